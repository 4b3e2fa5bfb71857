//! Training-time augmentation. Every geometric op is an axis-aligned affine
//! map `x' = a·x + b` (with `a < 0` for flips), so an arbitrary draw is
//! composed into a single map and the image, mask and box are all pushed
//! through the same transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ingest::Sample;
use crate::geometry::{BinaryMask, BoundingBox};
use crate::imaging::GrayImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_range: (f64, f64),
    pub pad_prob: f64,
    /// Maximum padding per side as a fraction of the canvas side.
    pub max_pad: f64,
    pub crop_prob: f64,
    pub erase_prob: f64,
    /// Erased rectangle area range as a fraction of the canvas.
    pub erase_area: (f64, f64),
    /// Largest fraction of foreground an erase may cover.
    pub max_erased_foreground: f64,
    pub retries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_prob: 0.5,
            scale_range: (0.8, 1.2),
            pad_prob: 0.3,
            max_pad: 0.15,
            crop_prob: 0.3,
            erase_prob: 0.3,
            erase_area: (0.02, 0.08),
            max_erased_foreground: 0.5,
            retries: 10,
        }
    }
}

impl AugmentConfig {
    /// A configuration whose every draw is the identity.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            scale_prob: 0.0,
            pad_prob: 0.0,
            crop_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Per-axis affine map from source to output pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAffine {
    pub ax: f64,
    pub bx: f64,
    pub ay: f64,
    pub by: f64,
}

impl AxisAffine {
    pub const IDENTITY: AxisAffine = AxisAffine {
        ax: 1.0,
        bx: 0.0,
        ay: 1.0,
        by: 0.0,
    };

    /// `self` applied after `first`.
    pub fn after(self, first: AxisAffine) -> AxisAffine {
        AxisAffine {
            ax: self.ax * first.ax,
            bx: self.ax * first.bx + self.bx,
            ay: self.ay * first.ay,
            by: self.ay * first.by + self.by,
        }
    }

    pub fn hflip(width: usize) -> AxisAffine {
        AxisAffine {
            ax: -1.0,
            bx: width as f64,
            ..Self::IDENTITY
        }
    }

    /// Zoom by `s` about the canvas center.
    pub fn scale_about_center(s: f64, height: usize, width: usize) -> AxisAffine {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        AxisAffine {
            ax: s,
            bx: cx - s * cx,
            ay: s,
            by: cy - s * cy,
        }
    }

    /// Maps the source rectangle `[x0, x0+w) × [y0, y0+h)` onto the full canvas.
    pub fn rect_to_canvas(x0: f64, y0: f64, w: f64, h: f64, height: usize, width: usize) -> AxisAffine {
        let ax = width as f64 / w;
        let ay = height as f64 / h;
        AxisAffine {
            ax,
            bx: -x0 * ax,
            ay,
            by: -y0 * ay,
        }
    }

    pub fn apply_box(&self, b: &BoundingBox) -> BoundingBox {
        let (x0, x1) = (self.ax * b.x_min + self.bx, self.ax * b.x_max + self.bx);
        let (y0, y1) = (self.ay * b.y_min + self.by, self.ay * b.y_max + self.by);
        BoundingBox {
            x_min: x0.min(x1),
            x_max: x0.max(x1),
            y_min: y0.min(y1),
            y_max: y0.max(y1),
            ..b.clone()
        }
    }
}

/// Resamples the sample through `t` onto a canvas of the same size. Image
/// values outside the source are zero; the mask uses nearest sampling.
pub fn warp(sample: &Sample, t: AxisAffine) -> Sample {
    if t == AxisAffine::IDENTITY {
        return sample.clone();
    }
    let (h, w) = sample.size();
    let src_x: Vec<f64> = (0..w).map(|c| (c as f64 + 0.5 - t.bx) / t.ax).collect();
    let src_y: Vec<f64> = (0..h).map(|r| (r as f64 + 0.5 - t.by) / t.ay).collect();
    let img = &sample.image;
    let bilinear = |y: f64, x: f64| -> f32 {
        let (y, x) = (y - 0.5, x - 0.5);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let px = |r: f64, c: f64| -> f32 {
            if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
                0.0
            } else {
                img.get(r as usize, c as usize)
            }
        };
        let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1.0) * fx;
        let bot = px(y0 + 1.0, x0) * (1.0 - fx) + px(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bot * fy
    };
    let inside = |v: f64, n: usize| v >= 0.0 && v < n as f64;
    let image = GrayImage::from_fn(h, w, |r, c| {
        let (sy, sx) = (src_y[r], src_x[c]);
        if !inside(sy, h) || !inside(sx, w) {
            0.0
        } else {
            bilinear(sy, sx)
        }
    });
    let mask = BinaryMask::from_fn(h, w, |r, c| {
        let (sy, sx) = (src_y[r], src_x[c]);
        inside(sy, h) && inside(sx, w) && sample.mask.get(sy as usize, sx as usize)
    });
    Sample {
        image,
        mask,
        bbox: t.apply_box(&sample.bbox).clipped(w, h),
        ..sample.clone()
    }
}

pub fn hflip(sample: &Sample) -> Sample {
    warp(sample, AxisAffine::hflip(sample.size().1))
}

/// Cuts out `[x0, x0+w) × [y0, y0+h)` without resizing; the box shifts by the crop origin.
pub fn crop(sample: &Sample, x0: usize, y0: usize, w: usize, h: usize) -> Sample {
    let image = GrayImage::from_fn(h, w, |r, c| sample.image.get(r + y0, c + x0));
    let mask = BinaryMask::from_fn(h, w, |r, c| sample.mask.get(r + y0, c + x0));
    Sample {
        image,
        mask,
        bbox: sample.bbox.translated(-(x0 as f64), -(y0 as f64)).clipped(w, h),
        ..sample.clone()
    }
}

/// Fills `[x0, x1) × [y0, y1)` of the image with `value`; mask and box are untouched.
pub fn erase(sample: &Sample, rect: (usize, usize, usize, usize), value: f32) -> Sample {
    let (x0, y0, x1, y1) = rect;
    let mut out = sample.clone();
    for r in y0..y1 {
        for c in x0..x1 {
            out.image.set(r, c, value);
        }
    }
    out
}

fn erased_foreground_fraction(mask: &BinaryMask, rect: (usize, usize, usize, usize)) -> f64 {
    let total = mask.count();
    if total == 0 {
        return 0.0;
    }
    let (x0, y0, x1, y1) = rect;
    let covered = mask
        .foreground()
        .filter(|&(r, c)| (y0..y1).contains(&r) && (x0..x1).contains(&c))
        .count();
    covered as f64 / total as f64
}

fn draw_geometry(cfg: &AugmentConfig, sample: &Sample, rng: &mut ChaCha8Rng) -> AxisAffine {
    let (h, w) = sample.size();
    let mut t = AxisAffine::IDENTITY;
    if rng.gen_bool(cfg.crop_prob) {
        // a crop that keeps the whole box
        let b = sample.bbox.clipped(w, h);
        let min_w = b.width().max(w as f64 * 0.5);
        let min_h = b.height().max(h as f64 * 0.5);
        let cw = rng.gen_range(min_w..=w as f64);
        let ch = rng.gen_range(min_h..=h as f64);
        let x_lo = (b.x_max - cw).max(0.0);
        let x_hi = b.x_min.min(w as f64 - cw).max(x_lo);
        let y_lo = (b.y_max - ch).max(0.0);
        let y_hi = b.y_min.min(h as f64 - ch).max(y_lo);
        let x0 = rng.gen_range(x_lo..=x_hi).floor();
        let y0 = rng.gen_range(y_lo..=y_hi).floor();
        t = AxisAffine::rect_to_canvas(x0, y0, cw.ceil(), ch.ceil(), h, w).after(t);
    }
    if rng.gen_bool(cfg.pad_prob) {
        let side = |rng: &mut ChaCha8Rng, n: usize| (rng.gen_range(0.0..=cfg.max_pad) * n as f64).round();
        let (l, r, top, bot) = (side(rng, w), side(rng, w), side(rng, h), side(rng, h));
        t = AxisAffine::rect_to_canvas(-l, -top, w as f64 + l + r, h as f64 + top + bot, h, w).after(t);
    }
    if rng.gen_bool(cfg.scale_prob) {
        let s = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
        t = AxisAffine::scale_about_center(s, h, w).after(t);
    }
    if rng.gen_bool(cfg.flip_prob) {
        t = AxisAffine::hflip(w).after(t);
    }
    t
}

fn geometry_ok(sample: &Sample, t: AxisAffine) -> bool {
    let (h, w) = sample.size();
    let moved = t.apply_box(&sample.bbox);
    let kept = moved.clipped(w, h);
    !kept.is_degenerate() && kept.area() >= 0.9 * moved.area() && kept.width() >= 2.0 && kept.height() >= 2.0
}

/// Applies a seeded random subset of {flip, scale jitter, pad, crop, erase}.
/// Degenerate draws are re-sampled up to `cfg.retries` times, then the
/// sample is returned unchanged.
pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = None;
    for _ in 0..cfg.retries.max(1) {
        let t = draw_geometry(cfg, sample, &mut rng);
        if geometry_ok(sample, t) {
            let warped = warp(sample, t);
            if !warped.mask.is_empty() {
                out = Some(warped);
                break;
            }
        }
    }
    let Some(mut out) = out else {
        return sample.clone();
    };
    if rng.gen_bool(cfg.erase_prob) {
        let (h, w) = out.size();
        for _ in 0..cfg.retries.max(1) {
            let area = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1) * (h * w) as f64;
            let aspect: f64 = rng.gen_range(0.5..=2.0);
            let ew = ((area * aspect).sqrt().round() as usize).clamp(1, w);
            let eh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
            let x0 = rng.gen_range(0..=w - ew);
            let y0 = rng.gen_range(0..=h - eh);
            let rect = (x0, y0, x0 + ew, y0 + eh);
            if erased_foreground_fraction(&out.mask, rect) <= cfg.max_erased_foreground {
                let value = rng.gen_range(0.0..1.0f32);
                out = erase(&out, rect, value);
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ingest::Provenance;
    use crate::geometry::mask_to_tight_box;
    use proptest::prelude::*;

    fn sample(h: usize, w: usize, b: (usize, usize, usize, usize)) -> Sample {
        let (x0, y0, x1, y1) = b;
        let mask = BinaryMask::from_fn(h, w, |r, c| (y0..y1).contains(&r) && (x0..x1).contains(&c));
        Sample {
            image: GrayImage::from_fn(h, w, |r, c| if mask.get(r, c) { 0.9 } else { 0.2 + 0.001 * c as f32 }),
            bbox: mask_to_tight_box(&mask).unwrap(),
            mask,
            prompt: "bright lesion".into(),
            split: None,
            provenance: Provenance {
                dataset: "t".into(),
                original_size: (h, w),
                image_path: "x.png".into(),
            },
        }
    }

    #[test]
    fn flip_reflects_box() {
        let s = sample(800, 800, (80, 80, 160, 240));
        let f = hflip(&s);
        let b = &f.bbox;
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (640.0, 80.0, 720.0, 240.0));
        assert_eq!(mask_to_tight_box(&f.mask).unwrap().x_min, 640.0);
        assert_eq!(f.image.get(100, 799 - 100), s.image.get(100, 100));
    }

    #[test]
    fn identity_draw_is_noop() {
        let s = sample(64, 64, (10, 12, 30, 40));
        assert_eq!(augment(&s, 9, &AugmentConfig::identity()), s);
    }

    #[test]
    fn crop_shifts_box_by_origin() {
        let s = sample(64, 64, (10, 12, 30, 40));
        let c = crop(&s, 5, 8, 40, 50);
        let b = &c.bbox;
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (5.0, 4.0, 25.0, 32.0));
        assert_eq!(c.size(), (50, 40));
        // coordinate-shift oracle on the mask
        for r in 0..50 {
            for col in 0..40 {
                assert_eq!(c.mask.get(r, col), s.mask.get(r + 8, col + 5));
            }
        }
    }

    #[test]
    fn erase_limits_foreground_loss() {
        let s = sample(64, 64, (20, 20, 30, 30));
        let cfg = AugmentConfig {
            erase_prob: 1.0,
            erase_area: (0.2, 0.3),
            ..AugmentConfig::identity()
        };
        for seed in 0..30 {
            let a = augment(&s, seed, &cfg);
            assert_eq!(a.mask, s.mask);
            let erased_fg = s
                .mask
                .foreground()
                .filter(|&(r, c)| a.image.get(r, c) != s.image.get(r, c))
                .count();
            assert!(erased_fg as f64 <= 0.5 * s.mask.count() as f64);
        }
    }

    #[test]
    fn augment_is_seeded() {
        let s = sample(64, 64, (10, 12, 30, 40));
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&s, 4, &cfg), augment(&s, 4, &cfg));
    }

    proptest! {
        #[test]
        fn augmentation_keeps_mask_and_box_consistent(
            seed in any::<u64>(),
            x0 in 0usize..90, y0 in 0usize..90, bw in 6usize..38, bh in 6usize..38,
        ) {
            let s = sample(128, 128, (x0, y0, x0 + bw, y0 + bh));
            let a = augment(&s, seed, &AugmentConfig::default());
            prop_assert_eq!(a.size(), (128, 128));
            let tight = mask_to_tight_box(&a.mask).unwrap();
            let b = &a.bbox;
            for (p, q) in [(tight.x_min, b.x_min), (tight.y_min, b.y_min), (tight.x_max, b.x_max), (tight.y_max, b.y_max)] {
                prop_assert!((p - q).abs() <= 1.0 + 1e-9, "tight {:?} vs box {:?}", tight, b);
            }
        }
    }
}
