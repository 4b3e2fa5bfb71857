//! Box and mask geometry plus the overlap metrics used everywhere else.
//!
//! Boxes use continuous pixel coordinates with a half-open convention: the
//! pixel at row `r`, column `c` covers `[c, c+1) × [r, r+1)`. A box's width is
//! therefore exactly the number of pixel columns it spans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
}

impl BoundingBox {
    /// Builds a box with strictly positive area.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self::from_corners_unchecked(x_min, y_min, x_max, y_max);
        b.validate()?;
        Ok(b)
    }

    /// Builds a box without checking its area; callers that accept degenerate
    /// boxes (clamped predictions) use this and check [`is_degenerate`](Self::is_degenerate).
    pub fn from_corners_unchecked(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            score: None,
            phrase: None,
        }
    }

    /// Box from normalized (center-x, center-y, width, height) on a canvas of `width × height` pixels.
    pub fn from_cxcywh_normalized(cxcywh: [f64; 4], width: usize, height: usize) -> Self {
        let [cx, cy, w, h] = cxcywh;
        let (wf, hf) = (width as f64, height as f64);
        Self::from_corners_unchecked(
            (cx - w / 2.0) * wf,
            (cy - h / 2.0) * hf,
            (cx + w / 2.0) * wf,
            (cy + h / 2.0) * hf,
        )
    }

    pub fn to_cxcywh_normalized(&self, width: usize, height: usize) -> [f64; 4] {
        let (wf, hf) = (width as f64, height as f64);
        [
            (self.x_min + self.x_max) / 2.0 / wf,
            (self.y_min + self.y_max) / 2.0 / hf,
            self.width() / wf,
            self.height() / hf,
        ]
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_phrase(mut self, phrase: impl Into<String>) -> Self {
        self.phrase = Some(phrase.into());
        self
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x_min < self.x_max && self.y_min < self.y_max)
            || ![self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_degenerate() {
            return Err(Error::Domain(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Domain(format!("box score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Same box with every coordinate multiplied by the per-axis scale.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
            ..self.clone()
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
            ..self.clone()
        }
    }

    /// Intersection with the canvas `[0, width) × [0, height)`.
    pub fn clipped(&self, width: usize, height: usize) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width as f64),
            y_min: self.y_min.clamp(0.0, height as f64),
            x_max: self.x_max.clamp(0.0, width as f64),
            y_max: self.y_max.clamp(0.0, height as f64),
            ..self.clone()
        }
    }

    /// Grows each side by `fraction` of the box's width (horizontal sides) or height (vertical sides).
    pub fn dilated(&self, fraction: f64) -> Self {
        let dx = self.width() * fraction;
        let dy = self.height() * fraction;
        Self {
            x_min: self.x_min - dx,
            y_min: self.y_min - dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
            ..self.clone()
        }
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    /// Whether the pixel at (row, col) lies inside the box.
    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        let (x, y) = (col as f64, row as f64);
        x >= self.x_min && x + 1.0 <= self.x_max && y >= self.y_min && y + 1.0 <= self.y_max
    }

    /// Integer pixel range `[c0, c1) × [r0, r1)` touched by the box, clipped to the canvas.
    pub fn pixel_span(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        // coordinates within 1e-9 of an integer are snapped so round-tripped boxes stay on the grid
        let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
        let c0 = snap(self.x_min).floor().clamp(0.0, width as f64) as usize;
        let r0 = snap(self.y_min).floor().clamp(0.0, height as f64) as usize;
        let c1 = snap(self.x_max).ceil().clamp(0.0, width as f64) as usize;
        let r1 = snap(self.y_max).ceil().clamp(0.0, height as f64) as usize;
        (c0, r0, c1, r1)
    }
}

/// Dense binary mask stored as a bit plane, one run of `u64` words per row.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("foreground", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        let words_per_row = width.div_ceil(64);
        Self {
            height,
            width,
            words_per_row,
            bits: vec![0; words_per_row * height],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    /// Interprets a row-major 8-bit plane with nonzero as foreground.
    pub fn from_u8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask buffer has {} bytes, expected {}×{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self::from_fn(height, width, |r, c| data[r * width + c] != 0))
    }

    /// Row-major 8-bit plane, 255 for foreground.
    pub fn to_u8(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.height * self.width];
        for (r, c) in self.foreground() {
            out[r * self.width + c] = 255;
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        debug_assert!(row < self.height && col < self.width);
        let w = self.bits[row * self.words_per_row + col / 64];
        (w >> (col % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        assert!(
            row < self.height && col < self.width,
            "pixel ({row}, {col}) outside {}×{} mask",
            self.height,
            self.width
        );
        let idx = row * self.words_per_row + col / 64;
        let bit = 1u64 << (col % 64);
        if value {
            self.bits[idx] |= bit;
        } else {
            self.bits[idx] &= !bit;
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |r| {
            let row = &self.bits[r * self.words_per_row..(r + 1) * self.words_per_row];
            row.iter().enumerate().flat_map(move |(wi, &word)| {
                let mut w = word;
                std::iter::from_fn(move || {
                    if w == 0 {
                        return None;
                    }
                    let tz = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some((r, wi * 64 + tz))
                })
            })
        })
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "masks are {}×{} and {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(out)
    }

    /// Foreground restricted to the pixels of `other`.
    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.bits.iter_mut().zip(&other.bits) {
            *a &= b;
        }
        Ok(out)
    }

    /// Mask of every pixel inside `b` (clipped to the canvas).
    pub fn from_box(height: usize, width: usize, b: &BoundingBox) -> Self {
        let mut m = Self::new(height, width);
        let (c0, r0, c1, r1) = b.pixel_span(width, height);
        for r in r0..r1 {
            for c in c0..c1 {
                m.set(r, c, true);
            }
        }
        m
    }
}

/// Intersection over union of two same-shape masks; 1.0 when both are empty.
pub fn iou(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    let inter = p.intersection_count(g)?;
    let union = p.union_count(g)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Dice coefficient of two same-shape masks; 1.0 when both are empty.
pub fn dsc(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    let inter = p.intersection_count(g)?;
    let total = p.count() + g.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Analytic IoU of two non-degenerate boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Smallest half-open box containing every foreground pixel.
pub fn mask_to_tight_box(m: &BinaryMask) -> Result<BoundingBox> {
    let mut r_min = usize::MAX;
    let mut r_max = 0;
    let mut c_min = usize::MAX;
    let mut c_max = 0;
    for r in 0..m.height {
        let row = &m.bits[r * m.words_per_row..(r + 1) * m.words_per_row];
        let first = row.iter().position(|&w| w != 0);
        let Some(first) = first else { continue };
        let last = row.iter().rposition(|&w| w != 0).unwrap_or(first);
        r_min = r_min.min(r);
        r_max = r;
        c_min = c_min.min(first * 64 + row[first].trailing_zeros() as usize);
        c_max = c_max.max(last * 64 + 63 - row[last].leading_zeros() as usize);
    }
    if r_min == usize::MAX {
        return Err(Error::EmptyAnnotation);
    }
    BoundingBox::new(
        c_min as f64,
        r_min as f64,
        (c_max + 1) as f64,
        (r_max + 1) as f64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| rows.contains(&r) && cols.contains(&c))
    }

    /// Per-pixel counting, independent of the bit-plane path.
    fn brute_counts(p: &BinaryMask, g: &BinaryMask) -> (usize, usize, usize, usize) {
        let (mut inter, mut union, mut np, mut ng) = (0, 0, 0, 0);
        for r in 0..p.height() {
            for c in 0..p.width() {
                let (a, b) = (p.get(r, c), g.get(r, c));
                inter += (a && b) as usize;
                union += (a || b) as usize;
                np += a as usize;
                ng += b as usize;
            }
        }
        (inter, union, np, ng)
    }

    #[test]
    fn overlapping_blocks() {
        let p = block(4, 4, 0..2, 0..2);
        let g = block(4, 4, 1..3, 1..3);
        let (inter, union, np, ng) = brute_counts(&p, &g);
        let oracle_iou = inter as f64 / union as f64;
        let oracle_dsc = 2.0 * inter as f64 / (np + ng) as f64;
        assert!((oracle_iou - 1.0 / 7.0).abs() < 1e-15);
        assert!((oracle_dsc - 0.25).abs() < 1e-15);
        assert_eq!(iou(&p, &g).unwrap(), oracle_iou);
        assert_eq!(dsc(&p, &g).unwrap(), oracle_dsc);
    }

    #[test]
    fn identity_and_empty_cases() {
        let p = block(5, 70, 1..4, 10..66);
        assert_eq!(iou(&p, &p).unwrap(), 1.0);
        assert_eq!(dsc(&p, &p).unwrap(), 1.0);
        let empty = BinaryMask::new(5, 70);
        assert_eq!(iou(&p, &empty).unwrap(), 0.0);
        assert_eq!(dsc(&p, &empty).unwrap(), 0.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        let q = block(5, 70, 0..1, 0..5);
        assert_eq!(dsc(&p, &q).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = BinaryMask::new(3, 3);
        let b = BinaryMask::new(3, 4);
        assert!(matches!(iou(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(dsc(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn box_iou_cases() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        // areas 4 and 4, overlap 1 → 1 / 7
        assert!((box_iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(box_iou(&a, &a).unwrap(), 1.0);
        let c = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let d = BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert_eq!(box_iou(&c, &d).unwrap(), 0.0);
        let flat = BoundingBox::from_corners_unchecked(0.0, 0.0, 0.0, 1.0);
        assert!(matches!(box_iou(&flat, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn tight_box_cases() {
        let m = block(10, 12, 3..6, 2..9);
        let b = mask_to_tight_box(&m).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (2.0, 3.0, 9.0, 6.0));

        let mut single = BinaryMask::new(4, 4);
        single.set(0, 0, true);
        let b = mask_to_tight_box(&single).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (0.0, 0.0, 1.0, 1.0));

        let full = BinaryMask::from_fn(7, 130, |_, _| true);
        let b = mask_to_tight_box(&full).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (0.0, 0.0, 130.0, 7.0));

        assert!(matches!(
            mask_to_tight_box(&BinaryMask::new(3, 3)),
            Err(Error::EmptyAnnotation)
        ));
    }

    #[test]
    fn cxcywh_conversion() {
        let b = BoundingBox::from_cxcywh_normalized([0.5, 0.5, 0.25, 0.5], 128, 128);
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (48.0, 32.0, 80.0, 96.0));
        let back = b.to_cxcywh_normalized(128, 128);
        assert_eq!(back, [0.5, 0.5, 0.25, 0.5]);
    }

    #[test]
    fn u8_roundtrip() {
        let m = block(6, 9, 1..5, 2..7);
        let bytes = m.to_u8();
        assert_eq!(BinaryMask::from_u8(6, 9, &bytes).unwrap(), m);
    }

    fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |v| BinaryMask::from_fn(h, w, |r, c| v[r * w + c]))
    }

    proptest! {
        #[test]
        fn metric_relations(p in mask_strategy(9, 67), g in mask_strategy(9, 67)) {
            let i = iou(&p, &g).unwrap();
            let d = dsc(&p, &g).unwrap();
            prop_assert!(0.0 <= i && i <= d && d <= 1.0);
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            prop_assert_eq!(i, iou(&g, &p).unwrap());
            prop_assert_eq!(d, dsc(&g, &p).unwrap());
            let (inter, union, np, ng) = brute_counts(&p, &g);
            if union > 0 {
                prop_assert_eq!(i, inter as f64 / union as f64);
                prop_assert_eq!(d, 2.0 * inter as f64 / (np + ng) as f64);
            }
        }

        #[test]
        fn tight_box_is_minimal(m in mask_strategy(11, 70)) {
            prop_assume!(!m.is_empty());
            let b = mask_to_tight_box(&m).unwrap();
            // scan oracle
            let mut rows = vec![];
            let mut cols = vec![];
            for r in 0..m.height() {
                for c in 0..m.width() {
                    if m.get(r, c) {
                        prop_assert!(b.contains_pixel(r, c));
                        rows.push(r);
                        cols.push(c);
                    }
                }
            }
            prop_assert_eq!(b.x_min, *cols.iter().min().unwrap() as f64);
            prop_assert_eq!(b.x_max, (*cols.iter().max().unwrap() + 1) as f64);
            prop_assert_eq!(b.y_min, *rows.iter().min().unwrap() as f64);
            prop_assert_eq!(b.y_max, (*rows.iter().max().unwrap() + 1) as f64);
        }
    }
}
