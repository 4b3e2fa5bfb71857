//! Seconds per 800×800 image, averaged over ten runs after a warm-up.
//!
//! cargo run --example benchmark -- [detector descriptor, default "toy"]

use rand::{Rng, SeedableRng};

use usground::detector::external_backend;
use usground::eval::benchmark_runtime;
use usground::imaging::GrayImage;
use usground::mask::mask_backend;
use usground::pipeline::Pipeline;

fn main() -> usground::Result<()> {
    let desc = std::env::args().nth(1).unwrap_or_else(|| "toy".into());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let image = GrayImage::from_fn(800, 800, |_, _| rng.gen::<f32>());
    for segmenter in ["box", "toy"] {
        let p = Pipeline::new(external_backend(&desc)?, mask_backend(segmenter)?);
        let s = benchmark_runtime(&p, &image, "bright lesion", 10)?;
        println!(
            "{desc} + {segmenter}: {:.1} ms/image (warm-up {:.1} ms; reference {:.2} s)",
            s.mean_secs * 1e3,
            s.warmup_secs * 1e3,
            s.reference_secs
        );
    }
    Ok(())
}
