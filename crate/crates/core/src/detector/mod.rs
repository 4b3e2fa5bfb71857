//! Text-conditioned box detection: the detector interface, box selection, the
//! toy transformer detector and the backend registry.

pub mod checkpoint;
pub mod scripted;
pub mod tokenizer;
pub mod toy;

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::imaging::GrayImage;

pub use scripted::{NullDetector, ScriptedDetector};
pub use tokenizer::{PromptTokens, Vocabulary, PAD_ID, UNK_ID};
pub use toy::{ForwardOutput, ToyDetector, ToyDetectorConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.30;
pub const DEFAULT_TOP_K: usize = 3;

/// Raw detector output for one image: `N` candidate boxes in normalized
/// cxcywh and an `N × T` matrix of query–token logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub boxes: Vec<[f64; 4]>,
    pub logits: Vec<Vec<f64>>,
    pub prompt: String,
}

impl DetectionOutput {
    pub fn from_tensors(boxes: &Tensor, logits: &Tensor, prompt: String) -> Result<Self> {
        let b: Vec<Vec<f64>> = boxes.to_dtype(DType::F64)?.to_vec2()?;
        let logits: Vec<Vec<f64>> = logits.to_dtype(DType::F64)?.to_vec2()?;
        if b.len() != logits.len() {
            return Err(Error::Dimension(format!(
                "{} boxes but {} logit rows",
                b.len(),
                logits.len()
            )));
        }
        let boxes = b
            .into_iter()
            .map(|r| {
                <[f64; 4]>::try_from(r.as_slice())
                    .map_err(|_| Error::Dimension(format!("box rows must have 4 values, got {}", r.len())))
            })
            .collect::<Result<_>>()?;
        Ok(Self { boxes, logits, prompt })
    }

    pub fn num_queries(&self) -> usize {
        self.boxes.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    /// Per-query score: sigmoid of the largest logit over the prompt tokens.
    pub fn scores(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                1.0 / (1.0 + (-m).exp())
            })
            .collect()
    }
}

/// A text-conditioned detector. Implementations must be usable from several
/// threads at once.
pub trait Detector: Send + Sync {
    fn name(&self) -> String;

    /// Input size the detector expects, or `None` if any size works.
    fn canvas(&self) -> Option<(usize, usize)>;

    fn detect(&self, image: &GrayImage, prompt: &str) -> Result<DetectionOutput>;
}

/// Keeps queries scoring at least `threshold`, best first, at most `top_k`,
/// as pixel boxes on a `width × height` image tagged with the prompt.
pub fn select_boxes(out: &DetectionOutput, threshold: f64, top_k: usize, width: usize, height: usize) -> Vec<BoundingBox> {
    if threshold >= 1.0 {
        return Vec::new();
    }
    let mut scored: Vec<(usize, f64)> = out
        .scores()
        .into_iter()
        .enumerate()
        .filter(|(_, s)| *s >= threshold)
        .collect();
    // stable: equal scores keep query order
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored
        .into_iter()
        .take(top_k)
        .map(|(q, s)| {
            BoundingBox::from_cxcywh_normalized(out.boxes[q], width, height)
                .clipped(width, height)
                .with_score(s)
                .with_phrase(out.prompt.clone())
        })
        .collect()
}

pub const BACKENDS: &[&str] = &["toy", "toy:<checkpoint.safetensors>", "null"];

/// Resolves a backend descriptor: `toy` (untrained toy detector),
/// `toy:<path>` (toy detector from a checkpoint) or `null` (zero-work mock).
pub fn external_backend(descriptor: &str) -> Result<Arc<dyn Detector>> {
    match descriptor.split_once(':') {
        None if descriptor == "toy" => Ok(Arc::new(ToyDetector::new(ToyDetectorConfig::default(), 0)?)),
        None if descriptor == "null" => Ok(Arc::new(NullDetector)),
        Some(("toy", path)) => Ok(Arc::new(checkpoint::load(Path::new(path))?)),
        _ => Err(Error::Backend(format!(
            "unknown detector backend {descriptor:?}; available: {}",
            BACKENDS.join(", ")
        ))),
    }
}
