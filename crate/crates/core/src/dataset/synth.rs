//! Ultrasound-like synthetic images for desk-scale experiments.
//!
//! Each image is a textured tissue background with one lesion (ellipse or
//! star-shaped polygon), corrupted by multiplicative gamma speckle that is
//! then spatially correlated with a small blur. Domain `B` changes the
//! texture statistics (depth attenuation, a bright near-field band, heavier
//! speckle, lower lesion contrast, smaller lesions) to stand in for the shift
//! between a pretraining corpus and a fine-tuning corpus.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::ingest::{Provenance, Sample};
use super::manifest::{DatasetManifest, Role, SampleRecord};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_tight_box, BinaryMask};
use crate::imaging::{save_mask, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionFamily {
    Bright,
    Dark,
}

impl LesionFamily {
    pub fn prompt(self) -> &'static str {
        match self {
            LesionFamily::Bright => "bright lesion",
            LesionFamily::Dark => "dark lesion",
        }
    }

    pub fn other(self) -> LesionFamily {
        match self {
            LesionFamily::Bright => LesionFamily::Dark,
            LesionFamily::Dark => LesionFamily::Bright,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainVariant {
    A,
    B,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// `None` alternates families at random.
    pub family: Option<LesionFamily>,
    pub variant: DomainVariant,
    /// Minimum tight-box area of a lesion, in pixels.
    pub min_lesion_area: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            count: 100,
            height: 128,
            width: 128,
            family: None,
            variant: DomainVariant::A,
            min_lesion_area: 100.0,
        }
    }
}

struct DomainStats {
    background: f64,
    texture_amp: f64,
    looks: f64,
    bright_contrast: f64,
    dark_contrast: f64,
    radius: (f64, f64),
    attenuation: f64,
    near_field: f64,
}

impl DomainVariant {
    fn stats(self) -> DomainStats {
        match self {
            DomainVariant::A => DomainStats {
                background: 0.42,
                texture_amp: 0.06,
                looks: 8.0,
                bright_contrast: 0.32,
                dark_contrast: -0.28,
                radius: (0.09, 0.22),
                attenuation: 0.0,
                near_field: 0.0,
            },
            DomainVariant::B => DomainStats {
                background: 0.60,
                texture_amp: 0.10,
                looks: 5.0,
                bright_contrast: 0.28,
                dark_contrast: -0.30,
                radius: (0.08, 0.18),
                attenuation: 0.6,
                near_field: 0.25,
            },
        }
    }
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, theta: f64 },
    Polygon { pts: Vec<(f64, f64)> },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, theta } => {
                let (s, c) = theta.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon { pts } => {
                // even-odd rule
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

fn draw_shape(rng: &mut ChaCha8Rng, h: usize, w: usize, radius: (f64, f64)) -> Shape {
    let side = h.min(w) as f64;
    let r_lo = radius.0 * side;
    let r_hi = radius.1 * side;
    let margin = r_hi + 2.0;
    let cx = rng.gen_range(margin..(w as f64 - margin).max(margin + 1.0));
    let cy = rng.gen_range(margin..(h as f64 - margin).max(margin + 1.0));
    if rng.gen_bool(0.6) {
        Shape::Ellipse {
            cx,
            cy,
            rx: rng.gen_range(r_lo..=r_hi),
            ry: rng.gen_range(r_lo..=r_hi),
            theta: rng.gen_range(0.0..PI),
        }
    } else {
        let n = rng.gen_range(6..=10);
        let base = rng.gen_range(r_lo..=r_hi);
        let pts = (0..n)
            .map(|i| {
                let a = 2.0 * PI * (i as f64 + rng.gen_range(-0.3..0.3)) / n as f64;
                let r = base * rng.gen_range(0.7..=1.15);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        Shape::Polygon { pts }
    }
}

fn box_blur3(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    acc += src[rr * w + cc];
                    n += 1.0;
                }
            }
            out[r * w + c] = acc / n;
        }
    }
    out
}

/// Renders one image/mask pair. The image is quantized to 8 bits so the
/// in-memory and on-disk versions agree exactly.
pub fn render(
    cfg: &SynthConfig,
    family: LesionFamily,
    rng: &mut ChaCha8Rng,
) -> (GrayImage, BinaryMask) {
    let (h, w) = (cfg.height, cfg.width);
    let st = cfg.variant.stats();
    let mut mask;
    let mut shape;
    let mut attempts = 0;
    loop {
        shape = draw_shape(rng, h, w, st.radius);
        mask = BinaryMask::from_fn(h, w, |r, c| shape.contains(c as f64 + 0.5, r as f64 + 0.5));
        attempts += 1;
        let ok = mask_to_tight_box(&mask)
            .map(|b| b.area() >= cfg.min_lesion_area)
            .unwrap_or(false);
        if ok || attempts > 50 {
            break;
        }
    }
    let contrast = match family {
        LesionFamily::Bright => st.bright_contrast,
        LesionFamily::Dark => st.dark_contrast,
    };
    // low-frequency tissue texture
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0) * 2.0 * PI / w as f64,
                rng.gen_range(0.5..3.0) * 2.0 * PI / h as f64,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.3..1.0),
            )
        })
        .collect();
    let gamma = Gamma::new(st.looks, 1.0 / st.looks).expect("positive gamma parameters");
    let mut echo = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64, r as f64);
            let tex: f64 = waves
                .iter()
                .map(|(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin())
                .sum::<f64>()
                / waves.len() as f64;
            let mut v = st.background + st.texture_amp * tex;
            if mask.get(r, c) {
                v += contrast;
            }
            let depth = y / h as f64;
            v *= (-st.attenuation * depth).exp();
            if depth < 0.1 {
                v += st.near_field * (1.0 - depth / 0.1);
            }
            echo[r * w + c] = v.max(0.02) * gamma.sample(rng);
        }
    }
    let smoothed = box_blur3(&echo, h, w);
    let bytes: Vec<u8> = smoothed
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let image = GrayImage::from_u8(h, w, &bytes).expect("buffer matches canvas");
    (image, mask)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn family_for(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> LesionFamily {
    cfg.family.unwrap_or_else(|| {
        if rng.gen_bool(0.5) {
            LesionFamily::Bright
        } else {
            LesionFamily::Dark
        }
    })
}

/// Generates the set in memory. Sample `i` is identical to the `i`-th record
/// written by [`generate_synthetic`] with the same config and seed.
pub fn synth_samples(cfg: &SynthConfig, seed: u64) -> Vec<Sample> {
    (0..cfg.count)
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let family = family_for(cfg, &mut rng);
            let (image, mask) = render(cfg, family, &mut rng);
            let bbox = mask_to_tight_box(&mask).expect("generated lesions are nonempty");
            Sample {
                image,
                mask,
                bbox,
                prompt: family.prompt().to_string(),
                split: None,
                provenance: Provenance {
                    dataset: cfg.name.clone(),
                    original_size: (cfg.height, cfg.width),
                    image_path: record_paths(i).0,
                },
            }
        })
        .collect()
}

fn record_paths(i: usize) -> (String, String) {
    (format!("images/{i:05}.png"), format!("masks/{i:05}.png"))
}

/// Writes `cfg.count` image/mask PNGs plus `manifest.json` under `out_dir`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let io_err = |e: std::io::Error| Error::Ingestion {
        path: out_dir.to_path_buf(),
        reason: e.to_string(),
    };
    std::fs::create_dir_all(out_dir.join("images")).map_err(io_err)?;
    std::fs::create_dir_all(out_dir.join("masks")).map_err(io_err)?;
    let samples = synth_samples(cfg, seed);
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (img, msk) = record_paths(i);
        s.image.save_png(&out_dir.join(&img))?;
        save_mask(&out_dir.join(&msk), &s.mask)?;
        records.push(SampleRecord {
            image: img.into(),
            mask: msk.into(),
            prompt: s.prompt.clone(),
            split: None,
        });
    }
    let manifest = DatasetManifest {
        name: cfg.name.clone(),
        organ: "synthetic".into(),
        role: Role::Seen,
        samples: records,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let cfg = SynthConfig {
            count: 4,
            ..SynthConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&cfg, 42, a.path()).unwrap();
        generate_synthetic(&cfg, 42, b.path()).unwrap();
        for f in ["manifest.json", "images/00000.png", "images/00003.png", "masks/00002.png"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn masks_nonempty_and_large_enough() {
        for variant in [DomainVariant::A, DomainVariant::B] {
            let cfg = SynthConfig {
                count: 500,
                variant,
                ..SynthConfig::default()
            };
            let samples = synth_samples(&cfg, 7);
            assert_eq!(samples.len(), 500);
            for s in &samples {
                let b = mask_to_tight_box(&s.mask).unwrap();
                assert!(b.area() >= cfg.min_lesion_area, "{b:?}");
            }
            let bright = samples.iter().filter(|s| s.prompt == "bright lesion").count();
            assert!((150..350).contains(&bright));
        }
    }

    #[test]
    fn lesion_contrast_has_expected_sign() {
        let cfg = SynthConfig {
            count: 20,
            family: Some(LesionFamily::Dark),
            ..SynthConfig::default()
        };
        for s in synth_samples(&cfg, 3) {
            let inside: Vec<f32> = s.mask.foreground().map(|(r, c)| s.image.get(r, c)).collect();
            let mean_in = inside.iter().sum::<f32>() / inside.len() as f32;
            assert!(mean_in < s.image.mean());
        }
    }

    #[test]
    fn disk_and_memory_agree() {
        let cfg = SynthConfig {
            count: 3,
            variant: DomainVariant::B,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&cfg, 5, dir.path()).unwrap();
        let mem = synth_samples(&cfg, 5);
        let (disk, _) = crate::dataset::collect(crate::dataset::ingest(&m, (128, 128))).unwrap();
        for (a, b) in disk.iter().zip(&mem) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.bbox, b.bbox);
        }
    }
}
