use std::sync::Arc;

use proptest::prelude::*;

use usground::dataset::{synth_samples, DomainVariant, SynthConfig};
use usground::detector::{external_backend, ScriptedDetector};
use usground::eval::{combine, evaluate, prompt_sweep, EvalReport, MeanStd};
use usground::geometry::BoundingBox;
use usground::mask::{mask_backend, BoxMaskBackend, ScriptedMaskBackend};
use usground::pipeline::Pipeline;

fn synth(count: usize, variant: DomainVariant, seed: u64) -> Vec<usground::dataset::Sample> {
    synth_samples(&SynthConfig { count, variant, ..SynthConfig::default() }, seed)
}

#[test]
fn oracle_backends_score_exactly_one_hundred() {
    let samples = synth(8, DomainVariant::A, 11);
    let p = Pipeline::new(
        Arc::new(ScriptedDetector::oracle(&samples)),
        Arc::new(ScriptedMaskBackend::oracle(&samples)),
    );
    let rep = evaluate(&p, "synthetic", &samples).unwrap();
    assert_eq!(rep.overall.dsc.compact(), "100.00±0");
    assert_eq!(rep.overall.iou.compact(), "100.00±0");
    assert_eq!(rep.overall.count, 8);
}

#[test]
fn missed_detections_score_the_empty_mask() {
    let samples = synth(4, DomainVariant::A, 12);
    // knows only the first image
    let p = Pipeline::new(
        Arc::new(ScriptedDetector::oracle(&samples[..1])),
        Arc::new(ScriptedMaskBackend::oracle(&samples)),
    );
    let rep = evaluate(&p, "synthetic", &samples).unwrap();
    assert_eq!(rep.samples.iter().filter(|s| s.detected).count(), 1);
    assert_eq!(rep.overall.count, 4);
    assert!((rep.overall.dsc.mean - 25.0).abs() < 1e-9);
    assert!(evaluate(&p, "synthetic", &[]).is_err());
}

#[test]
fn pooled_evaluation_equals_weighted_combination() {
    let a = synth(5, DomainVariant::A, 1);
    let b = synth(3, DomainVariant::B, 2);
    // box masks against lesion masks give a spread of scores
    let all: Vec<_> = a.iter().chain(&b).cloned().collect();
    let p = Pipeline::new(Arc::new(ScriptedDetector::oracle(&all)), Arc::new(BoxMaskBackend));
    let ra = evaluate(&p, "a", &a).unwrap();
    let rb = evaluate(&p, "b", &b).unwrap();
    let pooled = EvalReport::from_scores([ra.samples.clone(), rb.samples.clone()].concat()).unwrap();
    let comb = combine(&[ra.overall, rb.overall], "all", "*").unwrap();
    assert!((pooled.overall.dsc.mean - comb.dsc.mean).abs() < 1e-9);
    assert!((pooled.overall.dsc.std - comb.dsc.std).abs() < 1e-9);
    assert!((pooled.overall.iou.mean - comb.iou.mean).abs() < 1e-9);
    assert_eq!(pooled.datasets.len(), 2);
}

#[test]
fn sweep_rows_follow_tokenization() {
    let samples = synth(3, DomainVariant::A, 4);
    let p = Pipeline::new(external_backend("toy").unwrap(), mask_backend("toy").unwrap());
    let prompts = ["bright lesion", "bright lesions", "bright lesion"].map(String::from);
    let sweep = prompt_sweep(&p, &prompts, "synthetic", &samples).unwrap();
    assert_eq!(sweep.report.rows.len(), 3);
    assert_eq!(sweep.report.rows[0].dsc, sweep.report.rows[1].dsc);
    assert_eq!(sweep.report.rows[0], sweep.report.rows[2]);
    assert_eq!(sweep.dsc_spread, 0.0);
    assert!(prompt_sweep(&p, &prompts[..1], "synthetic", &samples).is_err());
}

#[test]
fn mock_boxes_reach_the_mask_backend_verbatim() {
    let s = &synth(1, DomainVariant::A, 9)[0];
    let b = BoundingBox::new(10.0, 20.0, 50.0, 70.0).unwrap().with_score(0.7);
    let mut det = ScriptedDetector::new();
    det.insert(&s.image, vec![b.clone()]);
    let p = Pipeline::new(Arc::new(det), Arc::new(BoxMaskBackend));
    let seg = p.run(&s.image, "dark lesion").unwrap();
    assert_eq!(seg.mask, usground::geometry::BinaryMask::from_box(128, 128, &b));
    assert_eq!(seg.boxes[0].phrase.as_deref(), Some("dark lesion"));
}

proptest! {
    #[test]
    fn mean_std_stays_in_range(v in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let m = MeanStd::of(&v);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&m.mean));
        prop_assert!(m.std >= 0.0 && m.std <= 50.0 + 1e-9);
    }

    #[test]
    fn reaggregation_is_order_independent(v in prop::collection::vec(0.0f64..=1.0, 2..30)) {
        let a = MeanStd::of(&v);
        let mut r = v.clone();
        r.reverse();
        let b = MeanStd::of(&r);
        prop_assert!((a.mean - b.mean).abs() < 1e-9 && (a.std - b.std).abs() < 1e-9);
    }
}
