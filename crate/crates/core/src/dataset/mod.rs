//! Dataset manifests, ingestion, splitting, augmentation and the synthetic generator.

pub mod augment;
pub mod ingest;
pub mod manifest;
pub mod synth;

pub use augment::{augment, AugmentConfig};
pub use ingest::{collect, ingest, ingest_split, resample_pair, IngestStream, Provenance, Sample};
pub use manifest::{split, split_sizes, DatasetManifest, Role, SampleRecord, Split};
pub use synth::{generate_synthetic, synth_samples, DomainVariant, LesionFamily, SynthConfig};
