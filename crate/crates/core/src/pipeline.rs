//! Prompt → boxes → mask.

use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{select_boxes, Detector, DEFAULT_THRESHOLD, DEFAULT_TOP_K};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, BoundingBox};
use crate::imaging::GrayImage;
use crate::mask::MaskBackend;

/// How several kept boxes become one mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Segment only the highest-scoring box.
    #[default]
    Best,
    /// Union of the masks of every kept box.
    All,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best" => Ok(Mode::Best),
            "all" => Ok(Mode::All),
            _ => Err(Error::Config(format!("mode must be \"best\" or \"all\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub threshold: f64,
    pub top_k: usize,
    pub mode: Mode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            mode: Mode::Best,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub detect: f64,
    pub segment: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Kept boxes in image pixels, best first.
    pub boxes: Vec<BoundingBox>,
    pub mask: BinaryMask,
    /// Highest query score, kept or not.
    pub best_score: Option<f64>,
    /// Milliseconds.
    pub timing: Timing,
}

#[derive(Clone)]
pub struct Pipeline {
    pub detector: Arc<dyn Detector>,
    pub segmenter: Arc<dyn MaskBackend>,
    pub config: PipelineConfig,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("detector", &self.detector.name())
            .field("segmenter", &self.segmenter.name())
            .field("config", &self.config)
            .finish()
    }
}

impl Pipeline {
    pub fn new(detector: Arc<dyn Detector>, segmenter: Arc<dyn MaskBackend>) -> Self {
        Self {
            detector,
            segmenter,
            config: PipelineConfig::default(),
        }
    }

    pub fn with_config(mut self, config: PipelineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn run(&self, image: &GrayImage, prompt: &str) -> Result<Segmentation> {
        self.run_with(image, prompt, &self.config)
    }

    /// Detects, keeps boxes per `cfg` and segments them. When nothing passes
    /// the threshold the mask is empty and `boxes` is empty.
    pub fn run_with(&self, image: &GrayImage, prompt: &str, cfg: &PipelineConfig) -> Result<Segmentation> {
        if prompt.trim().is_empty() {
            return Err(Error::Prompt("prompt is empty".into()));
        }
        let start = Instant::now();
        let out = match self.detector.canvas() {
            Some((h, w)) if image.shape() != (h, w) => self.detector.detect(&image.resized(h, w), prompt)?,
            _ => self.detector.detect(image, prompt)?,
        };
        let best_score = out.scores().into_iter().reduce(f64::max);
        let boxes = select_boxes(&out, cfg.threshold, cfg.top_k, image.width(), image.height());
        let detect = start.elapsed().as_secs_f64() * 1e3;

        let seg_start = Instant::now();
        let mut mask = BinaryMask::new(image.height(), image.width());
        let chosen: &[BoundingBox] = match cfg.mode {
            Mode::Best => &boxes[..boxes.len().min(1)],
            Mode::All => &boxes,
        };
        for b in chosen.iter().filter(|b| !b.is_degenerate()) {
            let m = self.segmenter.segment(image, b)?;
            mask = if chosen.len() == 1 { m } else { mask.union(&m)? };
        }
        let segment = seg_start.elapsed().as_secs_f64() * 1e3;
        Ok(Segmentation {
            boxes,
            mask,
            best_score,
            timing: Timing {
                detect,
                segment,
                total: start.elapsed().as_secs_f64() * 1e3,
            },
        })
    }
}
