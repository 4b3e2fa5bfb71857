use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Role, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_tight_box, BinaryMask, BoundingBox};
use crate::imaging::{load_mask, resize_mask, GrayImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    /// (height, width) before resampling.
    pub original_size: (usize, usize),
    pub image_path: String,
}

/// An image, its mask and box at the target resolution, and the paired prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
    pub prompt: String,
    pub split: Option<Split>,
    pub provenance: Provenance,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        self.image.shape()
    }
}

/// Resamples an image/mask pair to `target` and rescales the tight box of the
/// original mask by `(w / W, h / H)`.
pub fn resample_pair(
    image: &GrayImage,
    mask: &BinaryMask,
    target: (usize, usize),
) -> Result<(GrayImage, BinaryMask, BoundingBox)> {
    if image.shape() != mask.shape() {
        return Err(Error::Record(format!(
            "image is {:?} but mask is {:?}",
            image.shape(),
            mask.shape()
        )));
    }
    let original_box = mask_to_tight_box(mask)?;
    let (h, w) = target;
    let sx = w as f64 / image.width() as f64;
    let sy = h as f64 / image.height() as f64;
    Ok((
        image.resized(h, w),
        resize_mask(mask, h, w),
        original_box.scaled(sx, sy),
    ))
}

/// Lazily ingests a manifest's records. Records with an all-background mask
/// are skipped (with a warning) and counted in [`skipped`](Self::skipped).
pub struct IngestStream<'a> {
    manifest: &'a DatasetManifest,
    records: Box<dyn Iterator<Item = &'a SampleRecord> + 'a>,
    target: (usize, usize),
    skipped: usize,
}

impl<'a> IngestStream<'a> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn load(&self, rec: &SampleRecord) -> Result<Option<Sample>> {
        let image_path = self.manifest.resolve(&rec.image);
        let image = GrayImage::load(&image_path)?;
        let mask = load_mask(&self.manifest.resolve(&rec.mask))?;
        if mask.shape() != image.shape() {
            return Err(Error::Record(format!(
                "{}: image is {:?} but mask is {:?}",
                image_path.display(),
                image.shape(),
                mask.shape()
            )));
        }
        if mask.is_empty() {
            return Ok(None);
        }
        let original_size = image.shape();
        let (image, mask, bbox) = resample_pair(&image, &mask, self.target)?;
        Ok(Some(Sample {
            image,
            mask,
            bbox,
            prompt: rec.prompt.clone(),
            split: rec.split,
            provenance: Provenance {
                dataset: self.manifest.name.clone(),
                original_size,
                image_path: rec.image.display().to_string(),
            },
        }))
    }
}

impl Iterator for IngestStream<'_> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let rec = self.records.next()?;
            match self.load(rec) {
                Ok(Some(s)) => return Some(Ok(s)),
                Ok(None) => {
                    self.skipped += 1;
                    tracing::warn!(
                        dataset = %self.manifest.name,
                        image = %rec.image.display(),
                        "skipping record with empty mask"
                    );
                }
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

/// Streams every record of the manifest resized to `target` = (height, width).
pub fn ingest(manifest: &DatasetManifest, target: (usize, usize)) -> IngestStream<'_> {
    IngestStream {
        manifest,
        records: Box::new(manifest.samples.iter()),
        target,
        skipped: 0,
    }
}

/// Streams only the records labelled `split`. Unseen datasets refuse to
/// provide train or validation data.
pub fn ingest_split(
    manifest: &DatasetManifest,
    target: (usize, usize),
    split: Split,
) -> Result<IngestStream<'_>> {
    if manifest.role == Role::Unseen && split != Split::Test {
        return Err(Error::State(format!(
            "{} is an unseen dataset and cannot supply {split} samples",
            manifest.name
        )));
    }
    Ok(IngestStream {
        manifest,
        records: Box::new(manifest.records(split)),
        target,
        skipped: 0,
    })
}

/// Collects a stream, returning the samples and the number skipped.
pub fn collect(mut stream: IngestStream<'_>) -> Result<(Vec<Sample>, usize)> {
    let mut out = Vec::new();
    for s in stream.by_ref() {
        out.push(s?);
    }
    Ok((out, stream.skipped()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{save_mask, GrayImage};
    use std::path::PathBuf;

    fn write_record(dir: &std::path::Path, name: &str, h: usize, w: usize, fg: &dyn Fn(usize, usize) -> bool) -> SampleRecord {
        let img = GrayImage::from_fn(h, w, |r, c| ((r + c) % 7) as f32 / 7.0);
        img.save_png(&dir.join(format!("{name}.png"))).unwrap();
        save_mask(&dir.join(format!("{name}_mask.png")), &BinaryMask::from_fn(h, w, fg)).unwrap();
        SampleRecord {
            image: format!("{name}.png").into(),
            mask: format!("{name}_mask.png").into(),
            prompt: "benign".into(),
            split: Some(Split::Train),
        }
    }

    fn manifest(dir: &std::path::Path, samples: Vec<SampleRecord>, role: Role) -> DatasetManifest {
        DatasetManifest {
            name: "toy".into(),
            organ: "breast".into(),
            role,
            samples,
            base_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn box_is_rescaled_from_original_mask() {
        let dir = tempfile::tempdir().unwrap();
        // 200 wide × 100 high, box (20, 10, 40, 30)
        let rec = write_record(dir.path(), "a", 100, 200, &|r, c| (10..30).contains(&r) && (20..40).contains(&c));
        let m = manifest(dir.path(), vec![rec], Role::Seen);
        let (samples, skipped) = collect(ingest(&m, (800, 800))).unwrap();
        assert_eq!(skipped, 0);
        let b = &samples[0].bbox;
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (80.0, 80.0, 160.0, 240.0));
        assert_eq!(samples[0].image.shape(), (800, 800));
        assert_eq!(samples[0].provenance.original_size, (100, 200));
        let tight = mask_to_tight_box(&samples[0].mask).unwrap();
        for (a, b) in [(tight.x_min, b.x_min), (tight.y_min, b.y_min), (tight.x_max, b.x_max), (tight.y_max, b.y_max)] {
            assert!((a - b).abs() <= 1.0);
        }
    }

    #[test]
    fn identity_size_keeps_box() {
        let dir = tempfile::tempdir().unwrap();
        let rec = write_record(dir.path(), "a", 40, 40, &|r, c| (3..9).contains(&r) && (5..7).contains(&c));
        let m = manifest(dir.path(), vec![rec], Role::Seen);
        let (samples, _) = collect(ingest(&m, (40, 40))).unwrap();
        let b = &samples[0].bbox;
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (5.0, 3.0, 7.0, 9.0));
    }

    #[test]
    fn empty_masks_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_record(dir.path(), "a", 20, 20, &|_, _| false);
        let b = write_record(dir.path(), "b", 20, 20, &|r, _| r == 4);
        let m = manifest(dir.path(), vec![a, b], Role::Seen);
        let (samples, skipped) = collect(ingest(&m, (20, 20))).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn unreadable_file_carries_path() {
        let dir = tempfile::tempdir().unwrap();
        let rec = SampleRecord {
            image: PathBuf::from("missing.png"),
            mask: PathBuf::from("missing_mask.png"),
            prompt: "x".into(),
            split: None,
        };
        let m = manifest(dir.path(), vec![rec], Role::Seen);
        match ingest(&m, (8, 8)).next().unwrap() {
            Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("missing.png")),
            other => panic!("unexpected {other:?}"),
        };
    }

    #[test]
    fn shape_mismatch_is_record_error() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::new(10, 10).save_png(&dir.path().join("i.png")).unwrap();
        save_mask(&dir.path().join("m.png"), &BinaryMask::from_fn(10, 12, |_, _| true)).unwrap();
        let rec = SampleRecord {
            image: "i.png".into(),
            mask: "m.png".into(),
            prompt: "x".into(),
            split: None,
        };
        let m = manifest(dir.path(), vec![rec], Role::Seen);
        assert!(matches!(ingest(&m, (8, 8)).next().unwrap(), Err(Error::Record(_))));
    }

    #[test]
    fn unseen_refuses_training_iterators() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(dir.path(), vec![], Role::Unseen);
        assert!(matches!(ingest_split(&m, (8, 8), Split::Train), Err(Error::State(_))));
        assert!(matches!(ingest_split(&m, (8, 8), Split::Val), Err(Error::State(_))));
        assert!(ingest_split(&m, (8, 8), Split::Test).is_ok());
    }
}
