//! Inject adapters into the toy detector, audit what trains, then merge.

use usground::dataset::{synth_samples, SynthConfig};
use usground::detector::{Detector, ToyDetector, ToyDetectorConfig};
use usground::lora::{apply_plan, merge, Category, DEFAULT_ALPHA, DEFAULT_RANK};

fn main() -> usground::Result<()> {
    let mut det = ToyDetector::new(ToyDetectorConfig::default(), 0)?;
    let sample = &synth_samples(&SynthConfig { count: 1, ..SynthConfig::default() }, 1)[0];
    let before = det.detect(&sample.image, &sample.prompt)?;

    let plan = det.default_plan();
    println!("{} adapter sites, fully trainable: {:?}", plan.adapter_targets.len(), plan.fully_trainable);
    let audit = apply_plan(&mut det.store, &plan, DEFAULT_RANK, DEFAULT_ALPHA, 7)?;
    println!(
        "frozen {}  adapter {}  trainable {}  total {}  fraction {:.2}%",
        audit.count(Category::Frozen),
        audit.count(Category::Adapter),
        audit.count(Category::Trainable),
        audit.total(),
        100.0 * audit.trainable_fraction()
    );

    // B starts at zero, so the adapted model answers exactly like the base
    let after = det.detect(&sample.image, &sample.prompt)?;
    println!("outputs unchanged after injection: {}", before.boxes == after.boxes && before.logits == after.logits);

    merge(&mut det.store)?;
    println!("merged; adapters left: {}", det.store.linears().filter(|(_, l)| l.lora.is_some()).count());
    let mut audit_file = Vec::new();
    usground::lora::Audit::of(&det.store).write_jsonl(&mut audit_file)?;
    print!("{}", String::from_utf8_lossy(&audit_file).lines().take(3).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
