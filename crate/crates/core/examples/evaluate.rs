//! Evaluation tables and a prompt sweep.

use std::sync::Arc;

use usground::dataset::{synth_samples, SynthConfig};
use usground::detector::ScriptedDetector;
use usground::eval::{evaluate, prompt_sweep, render_table, spreads, MeanStd, ReportRow};
use usground::mask::{BoxMaskBackend, ScriptedMaskBackend};
use usground::pipeline::Pipeline;

fn main() -> usground::Result<()> {
    let samples = synth_samples(&SynthConfig { count: 20, ..SynthConfig::default() }, 9);

    let oracle = Pipeline::new(
        Arc::new(ScriptedDetector::oracle(&samples)),
        Arc::new(ScriptedMaskBackend::oracle(&samples)),
    );
    print!("{}", evaluate(&oracle, "synthetic", &samples)?.table);

    // true boxes filled as masks: shows what box-only segmentation costs
    let boxes = Pipeline::new(Arc::new(ScriptedDetector::oracle(&samples)), Arc::new(BoxMaskBackend));
    print!("{}", evaluate(&boxes, "synthetic", &samples)?.table);

    let prompts = ["bright lesion", "hyperechoic lesion", "dark lesion"].map(String::from);
    let sweep = prompt_sweep(&boxes, &prompts, "synthetic", &samples)?;
    print!("{}", sweep.report.table);

    // the spread arithmetic on two reference rows
    let row = |prompt: &str, mean, std| ReportRow {
        dataset: "cortex".into(),
        prompt: prompt.into(),
        count: 1,
        dsc: MeanStd { mean, std },
        iou: MeanStd { mean, std },
    };
    let rows = [row("prompt 1", 70.01, 14.0), row("prompt 2", 72.55, 8.0)];
    print!("{}", render_table(&rows, None));
    println!("spread {:.2}", spreads(&rows).0);
    Ok(())
}
