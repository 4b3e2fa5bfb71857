//! Box-prompted mask generation.
//!
//! The toy backend thresholds the (slightly enlarged) box region at the
//! intensity that maximises between-class variance, decides which side of
//! the threshold is the object by looking at the region border, keeps the
//! largest connected component and fills its holes.

use std::collections::HashMap;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, BoundingBox};
use crate::imaging::GrayImage;

pub trait MaskBackend: Send + Sync {
    fn name(&self) -> String;

    /// Mask for the object inside `bbox` (pixel coordinates), image-sized.
    fn segment(&self, image: &GrayImage, bbox: &BoundingBox) -> Result<BinaryMask>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdStrategy {
    /// Between-class variance maximisation.
    Otsu,
    Fixed(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub threshold: ThresholdStrategy,
    pub fill_holes: bool,
    /// Fraction by which the box grows on each side before segmenting.
    pub dilation: f64,
    /// 3×3 mean filter before thresholding.
    pub smooth: bool,
    /// Regions whose best split explains less than this share of the
    /// intensity variance are treated as background.
    pub min_separability: f64,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            threshold: ThresholdStrategy::Otsu,
            fill_holes: true,
            dilation: 0.10,
            smooth: true,
            min_separability: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaskRequest<'a> {
    pub image: &'a GrayImage,
    pub bbox: BoundingBox,
    pub options: MaskOptions,
}

/// Otsu threshold over `values`, with the separability η = σ_B²/σ_T² it achieves.
pub fn otsu(values: &[f32]) -> Option<(f32, f64)> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi - lo > 1e-6) {
        return None;
    }
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    let bin = |v: f32| (((v - lo) / (hi - lo)) * (BINS - 1) as f32).round() as usize;
    for &v in values {
        hist[bin(v)] += 1;
    }
    let n = values.len() as f64;
    let center = |i: usize| lo as f64 + (hi - lo) as f64 * i as f64 / (BINS - 1) as f64;
    let total_mean: f64 = hist.iter().enumerate().map(|(i, &c)| c as f64 * center(i)).sum::<f64>() / n;
    let total_var: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * (center(i) - total_mean).powi(2))
        .sum::<f64>()
        / n;
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (0usize, -1.0f64);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += c as f64 * center(i);
        if w0 == 0.0 || w0 == n {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (total_mean * n - sum0) / (n - w0);
        let between = (w0 / n) * (1.0 - w0 / n) * (m0 - m1).powi(2);
        if between > best.1 {
            best = (i, between);
        }
    }
    let t = (center(best.0) + center(best.0 + 1)) / 2.0;
    Some((t as f32, if total_var > 0.0 { best.1 / total_var } else { 0.0 }))
}

fn smooth3(v: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; v.len()];
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut k) = (0.0, 0);
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    s += v[rr * w + cc];
                    k += 1;
                }
            }
            out[r * w + c] = s / k as f32;
        }
    }
    out
}

/// Keeps the largest 4-connected component (first in raster order on ties).
fn largest_component(fg: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![0u32; fg.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if fg[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// Marks as foreground every background pixel not reachable from the border.
fn fill_holes(fg: &mut [bool], h: usize, w: usize) {
    let mut outside = vec![false; fg.len()];
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r + 1 == h || c + 1 == w) && !fg[r * w + c] {
                outside[r * w + c] = true;
                queue.push_back(r * w + c);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / w, i % w);
        let neighbours = [
            (r > 0).then(|| i - w),
            (r + 1 < h).then(|| i + w),
            (c > 0).then(|| i - 1),
            (c + 1 < w).then(|| i + 1),
        ];
        for j in neighbours.into_iter().flatten() {
            if !fg[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    for (f, o) in fg.iter_mut().zip(outside) {
        *f = !o;
    }
}

/// The toy segmentation algorithm.
pub fn segment_box(req: &MaskRequest) -> Result<BinaryMask> {
    let (ih, iw) = req.image.shape();
    let b = &req.bbox;
    if b.is_degenerate() {
        return Err(Error::Prompt(format!("box {b:?} has zero area")));
    }
    let visible = b.clipped(iw, ih);
    if visible.is_degenerate() {
        return Err(Error::Prompt(format!("box {b:?} lies outside the {iw}×{ih} image")));
    }
    let region = b.dilated(req.options.dilation).clipped(iw, ih);
    let (c0, r0, c1, r1) = region.pixel_span(iw, ih);
    let (h, w) = (r1 - r0, c1 - c0);
    let mut out = BinaryMask::new(ih, iw);
    if h == 0 || w == 0 {
        return Ok(out);
    }
    let mut vals: Vec<f32> = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))).map(|(r, c)| req.image.get(r, c)).collect();
    if req.options.smooth {
        vals = smooth3(&vals, h, w);
    }
    let t = match req.options.threshold {
        ThresholdStrategy::Fixed(t) => t,
        ThresholdStrategy::Otsu => match otsu(&vals) {
            Some((t, eta)) if eta >= req.options.min_separability => t,
            _ => return Ok(out),
        },
    };
    let above: Vec<bool> = vals.iter().map(|&v| v > t).collect();

    // the object is the class that is rarer on the region border than overall
    let on_border = |r: usize, c: usize| {
        (r == 0 && r0 > 0) || (c == 0 && c0 > 0) || (r + 1 == h && r1 < ih) || (c + 1 == w && c1 < iw)
    };
    let mut border = (0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            if on_border(r, c) {
                border.0 += 1;
                border.1 += above[r * w + c] as usize;
            }
        }
    }
    let frac_all = above.iter().filter(|&&a| a).count() as f64 / above.len() as f64;
    let bright_object = if border.0 > 0 {
        (border.1 as f64 / border.0 as f64) < frac_all
    } else {
        frac_all <= 0.5
    };
    let fg: Vec<bool> = above.iter().map(|&a| a == bright_object).collect();
    if !fg.iter().any(|&f| f) {
        return Ok(out);
    }
    let mut fg = largest_component(&fg, h, w);
    if req.options.fill_holes {
        fill_holes(&mut fg, h, w);
    }
    for r in 0..h {
        for c in 0..w {
            if fg[r * w + c] {
                out.set(r0 + r, c0 + c, true);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyMaskBackend {
    pub options: MaskOptions,
}

impl MaskBackend for ToyMaskBackend {
    fn name(&self) -> String {
        "toy".into()
    }

    fn segment(&self, image: &GrayImage, bbox: &BoundingBox) -> Result<BinaryMask> {
        segment_box(&MaskRequest {
            image,
            bbox: bbox.clone(),
            options: self.options,
        })
    }
}

/// Returns stored masks for images it recognises by fingerprint, and an
/// empty mask otherwise.
#[derive(Debug, Clone, Default)]
pub struct ScriptedMaskBackend {
    masks: HashMap<u64, BinaryMask>,
}

impl ScriptedMaskBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: &GrayImage, mask: BinaryMask) {
        self.masks.insert(image.fingerprint(), mask);
    }

    /// Answers every sample with its ground-truth mask.
    pub fn oracle<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut m = Self::new();
        for s in samples {
            m.insert(&s.image, s.mask.clone());
        }
        m
    }
}

impl MaskBackend for ScriptedMaskBackend {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn segment(&self, image: &GrayImage, _bbox: &BoundingBox) -> Result<BinaryMask> {
        Ok(self
            .masks
            .get(&image.fingerprint())
            .cloned()
            .unwrap_or_else(|| BinaryMask::new(image.height(), image.width())))
    }
}

/// Zero-work backend: the mask is the box itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxMaskBackend;

impl MaskBackend for BoxMaskBackend {
    fn name(&self) -> String {
        "box".into()
    }

    fn segment(&self, image: &GrayImage, bbox: &BoundingBox) -> Result<BinaryMask> {
        Ok(BinaryMask::from_box(image.height(), image.width(), bbox))
    }
}

pub const MASK_BACKENDS: &[&str] = &["toy", "box"];

pub fn mask_backend(name: &str) -> Result<std::sync::Arc<dyn MaskBackend>> {
    match name {
        "toy" => Ok(std::sync::Arc::new(ToyMaskBackend::default())),
        "box" => Ok(std::sync::Arc::new(BoxMaskBackend)),
        _ => Err(Error::Backend(format!(
            "unknown mask backend {name:?}; available: {}",
            MASK_BACKENDS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dsc;

    fn square_image(bright: f32, dark: f32) -> (GrayImage, BinaryMask) {
        let img = GrayImage::from_fn(64, 64, |r, c| {
            if (20..40).contains(&r) && (22..42).contains(&c) {
                bright
            } else {
                dark
            }
        });
        let m = BinaryMask::from_fn(64, 64, |r, c| (20..40).contains(&r) && (22..42).contains(&c));
        (img, m)
    }

    fn run(img: &GrayImage, b: BoundingBox) -> Result<BinaryMask> {
        ToyMaskBackend::default().segment(img, &b)
    }

    #[test]
    fn bright_square() {
        let (img, gt) = square_image(0.9, 0.1);
        let m = run(&img, BoundingBox::new(22.0, 20.0, 42.0, 40.0).unwrap()).unwrap();
        assert!(dsc(&m, &gt).unwrap() >= 0.95);
    }

    #[test]
    fn dark_square() {
        let (img, gt) = square_image(0.1, 0.8);
        let m = run(&img, BoundingBox::new(22.0, 20.0, 42.0, 40.0).unwrap()).unwrap();
        assert!(dsc(&m, &gt).unwrap() >= 0.95);
    }

    #[test]
    fn uniform_background_is_empty() {
        let img = GrayImage::from_fn(64, 64, |_, _| 0.4);
        let m = run(&img, BoundingBox::new(5.0, 5.0, 30.0, 30.0).unwrap()).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.shape(), (64, 64));
    }

    #[test]
    fn deterministic_and_inside_dilated_box() {
        let img = GrayImage::from_fn(64, 64, |r, c| ((r * 31 + c * 17) % 23) as f32 / 23.0);
        let b = BoundingBox::new(10.0, 12.0, 40.0, 50.0).unwrap();
        let a = run(&img, b.clone()).unwrap();
        assert_eq!(a, run(&img, b.clone()).unwrap());
        let allowed = BinaryMask::from_box(64, 64, &b.dilated(0.10).clipped(64, 64));
        assert_eq!(a.intersection_count(&allowed).unwrap(), a.count());
    }

    #[test]
    fn holes_are_filled() {
        let img = GrayImage::from_fn(64, 64, |r, c| {
            let ring = (20..40).contains(&r) && (20..40).contains(&c) && !((27..33).contains(&r) && (27..33).contains(&c));
            if ring {
                0.9
            } else {
                0.1
            }
        });
        let opts = MaskOptions {
            smooth: false,
            ..MaskOptions::default()
        };
        let m = segment_box(&MaskRequest {
            image: &img,
            bbox: BoundingBox::new(20.0, 20.0, 40.0, 40.0).unwrap(),
            options: opts,
        })
        .unwrap();
        assert!(m.get(30, 30));
        assert_eq!(m.count(), 400);
    }

    #[test]
    fn invalid_boxes() {
        let img = GrayImage::new(32, 32);
        let flat = BoundingBox::from_corners_unchecked(5.0, 5.0, 5.0, 20.0);
        assert!(matches!(run(&img, flat), Err(Error::Prompt(_))));
        let outside = BoundingBox::new(40.0, 40.0, 50.0, 50.0).unwrap();
        assert!(matches!(run(&img, outside), Err(Error::Prompt(_))));
    }

    #[test]
    fn otsu_splits_two_levels() {
        let v: Vec<f32> = (0..100).map(|i| if i < 30 { 0.2 } else { 0.7 }).collect();
        let (t, eta) = otsu(&v).unwrap();
        assert!(t > 0.2 && t < 0.7);
        assert!((eta - 1.0).abs() < 1e-9);
        assert!(otsu(&[0.5; 10]).is_none());
    }
}
