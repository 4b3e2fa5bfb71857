//! Prompt → boxes → mask on one synthetic image.
//!
//! cargo run --example segment_image -- [checkpoint.safetensors]

use std::sync::Arc;

use usground::dataset::{synth_samples, SynthConfig};
use usground::detector::{external_backend, ScriptedDetector};
use usground::geometry::dsc;
use usground::imaging::save_mask;
use usground::mask::{mask_backend, segment_box, MaskOptions, MaskRequest};
use usground::pipeline::{Mode, Pipeline, PipelineConfig};

fn main() -> usground::Result<()> {
    let sample = synth_samples(&SynthConfig { count: 1, ..SynthConfig::default() }, 5).remove(0);

    // the mask decoder on its own, prompted with the true box
    let req = MaskRequest {
        image: &sample.image,
        bbox: sample.bbox.clone(),
        options: MaskOptions::default(),
    };
    println!("box-prompted mask DSC vs ground truth: {:.4}", dsc(&segment_box(&req)?, &sample.mask)?);

    // full pipeline: a trained checkpoint if given, otherwise a detector that knows the answer
    let detector = match std::env::args().nth(1) {
        Some(path) => external_backend(&format!("toy:{path}"))?,
        None => Arc::new(ScriptedDetector::oracle([&sample])),
    };
    let pipeline = Pipeline::new(detector, mask_backend("toy")?).with_config(PipelineConfig {
        mode: Mode::Best,
        ..PipelineConfig::default()
    });
    let seg = pipeline.run(&sample.image, &sample.prompt)?;
    for b in &seg.boxes {
        println!(
            "box ({:.1},{:.1})-({:.1},{:.1}) score {:.3}",
            b.x_min,
            b.y_min,
            b.x_max,
            b.y_max,
            b.score.unwrap_or(0.0)
        );
    }
    println!(
        "pipeline DSC {:.4}; detect {:.1} ms, segment {:.1} ms",
        dsc(&seg.mask, &sample.mask)?,
        seg.timing.detect,
        seg.timing.segment
    );
    save_mask(std::path::Path::new("target/segment-example.png"), &seg.mask)?;
    Ok(())
}
