//! Pretrain the toy detector on domain A, then LoRA-tune it on domain B.
//!
//! cargo run --example train_detector -- [pretrain_secs] [lora_secs] [out.safetensors]

use usground::dataset::{synth_samples, DomainVariant, Sample, SynthConfig};
use usground::detector::{checkpoint, select_boxes, Detector, ToyDetector, ToyDetectorConfig, DEFAULT_THRESHOLD};
use usground::geometry::box_iou;
use usground::lora::{apply_plan, DEFAULT_ALPHA, DEFAULT_RANK};
use usground::train::{train, TrainConfig};

fn top_box_iou(det: &ToyDetector, samples: &[Sample]) -> usground::Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = det.detect(&s.image, &s.prompt)?;
        if let Some(b) = select_boxes(&out, DEFAULT_THRESHOLD, 1, 128, 128).first() {
            total += box_iou(b, &s.bbox).unwrap_or(0.0);
        }
    }
    Ok(total / samples.len() as f64)
}

fn main() -> usground::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let pre_secs: f64 = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(60.0);
    let lora_secs: f64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(30.0);
    let out = args.get(3).cloned().unwrap_or_else(|| "target/toy-b.safetensors".into());

    let a = synth_samples(&SynthConfig { count: 500, ..SynthConfig::default() }, 1);
    let b = synth_samples(&SynthConfig { count: 200, variant: DomainVariant::B, ..SynthConfig::default() }, 2);
    let (a_train, a_val) = a.split_at(400);
    let (b_train, b_val) = b.split_at(160);

    let mut det = ToyDetector::new(ToyDetectorConfig::default(), 0)?;
    det.store.set_all_trainable(true)?;
    let cfg = TrainConfig { max_epochs: 1000, time_budget_secs: Some(pre_secs), ..TrainConfig::default() };
    let rep = train(&mut det, a_train, a_val, &cfg, None, |r| {
        println!("A epoch {:3}  train {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_loss)
    })?;
    println!("pretraining: loss {:.3} → {:.3}", rep.initial_train_loss, rep.final_train_loss);
    println!("B-val top-box IoU before adaptation: {:.3}", top_box_iou(&det, b_val)?);

    let plan = det.default_plan();
    let audit = apply_plan(&mut det.store, &plan, DEFAULT_RANK, DEFAULT_ALPHA, 1)?;
    println!("adapting {:.2}% of parameters", 100.0 * audit.trainable_fraction());
    let cfg = TrainConfig { max_epochs: 1000, time_budget_secs: Some(lora_secs), ..TrainConfig::default() };
    let rep = train(&mut det, b_train, b_val, &cfg, None, |r| {
        println!("B epoch {:3}  train {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_loss)
    })?;
    println!("fine-tuning: loss {:.3} → {:.3}", rep.initial_train_loss, rep.final_train_loss);
    println!("B-val top-box IoU after adaptation: {:.3}", top_box_iou(&det, b_val)?);
    checkpoint::save(&det, std::path::Path::new(&out))?;
    println!("saved {out}");
    Ok(())
}
