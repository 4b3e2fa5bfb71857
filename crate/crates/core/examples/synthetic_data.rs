//! Generate a small synthetic set, split it and ingest it back.
//!
//! cargo run --example synthetic_data -- /tmp/synth

use std::path::PathBuf;

use usground::dataset::{collect, generate_synthetic, ingest_split, split, DomainVariant, Split, SynthConfig};

fn main() -> usground::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "target/synth-example".into()).into();
    let cfg = SynthConfig {
        name: "synth-b".into(),
        count: 20,
        variant: DomainVariant::B,
        ..SynthConfig::default()
    };
    let manifest = generate_synthetic(&cfg, 42, &out)?;
    let manifest = split(&manifest, (0.7, 0.15, 0.15), 42, false)?;
    manifest.save(&out.join("manifest.json"))?;
    println!("wrote {} records to {}", manifest.samples.len(), out.display());
    println!("split sizes (train, val, test): {:?}", manifest.split_sizes());

    // resample to 64×64 on the way in; boxes are rescaled with the mask
    let (train, skipped) = collect(ingest_split(&manifest, (64, 64), Split::Train)?)?;
    for s in train.iter().take(3) {
        println!(
            "{} {:?} prompt={:?} box=({:.0},{:.0})-({:.0},{:.0})",
            s.provenance.image_path,
            s.size(),
            s.prompt,
            s.bbox.x_min,
            s.bbox.y_min,
            s.bbox.x_max,
            s.bbox.y_max
        );
    }
    println!("{} training samples, {skipped} skipped", train.len());
    Ok(())
}
