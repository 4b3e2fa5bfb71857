//! Evaluation: per-sample DSC/IoU through the full pipeline, mean±std
//! aggregation in percent, table rendering, prompt sweeps and timing.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{collect, ingest, ingest_split, DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::{dsc, iou};
use crate::imaging::GrayImage;
use crate::pipeline::Pipeline;

/// Average seconds per image reported for the full-scale system, kept for context.
pub const REFERENCE_SECS_PER_IMAGE: f64 = 0.33;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub dataset: String,
    pub image: String,
    pub prompt: String,
    pub dsc: f64,
    pub iou: f64,
    pub detected: bool,
    pub best_score: Option<f64>,
}

/// Mean and population standard deviation, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// From fractions in [0, 1].
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean: mean * 100.0,
            std: var.sqrt() * 100.0,
        }
    }

    /// Table style: mean to two decimals, std to the nearest integer ("91.74±5").
    pub fn compact(&self) -> String {
        format!("{:.2}±{:.0}", self.mean, self.std)
    }

    /// Both to two decimals ("75.00±25.00").
    pub fn precise(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub prompt: String,
    pub count: usize,
    pub dsc: MeanStd,
    pub iou: MeanStd,
}

impl ReportRow {
    fn of(dataset: &str, prompt: &str, scores: &[&SampleScore]) -> Self {
        let d: Vec<f64> = scores.iter().map(|s| s.dsc).collect();
        let i: Vec<f64> = scores.iter().map(|s| s.iou).collect();
        Self {
            dataset: dataset.to_string(),
            prompt: prompt.to_string(),
            count: scores.len(),
            dsc: MeanStd::of(&d),
            iou: MeanStd::of(&i),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub runs: usize,
    pub mean_secs: f64,
    pub per_run_secs: Vec<f64>,
    pub warmup_secs: f64,
    pub reference_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// One row per (dataset, prompt), in order of first appearance.
    pub rows: Vec<ReportRow>,
    /// One row per dataset over all of its prompts.
    pub datasets: Vec<ReportRow>,
    /// All samples pooled.
    pub overall: ReportRow,
    pub samples: Vec<SampleScore>,
    pub runtime: Option<RuntimeStats>,
    /// Rendered text table.
    pub table: String,
}

impl EvalReport {
    /// Rebuilds every aggregate from per-sample scores.
    pub fn from_scores(samples: Vec<SampleScore>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Evaluation("no samples were evaluated".into()));
        }
        let mut keys: Vec<(String, String)> = Vec::new();
        let mut groups: HashMap<(String, String), Vec<&SampleScore>> = HashMap::new();
        for s in &samples {
            let k = (s.dataset.clone(), s.prompt.clone());
            if !groups.contains_key(&k) {
                keys.push(k.clone());
            }
            groups.entry(k).or_default().push(s);
        }
        let rows: Vec<ReportRow> = keys.iter().map(|k| ReportRow::of(&k.0, &k.1, &groups[k])).collect();
        let mut names: Vec<&str> = Vec::new();
        for k in &keys {
            if !names.contains(&k.0.as_str()) {
                names.push(&k.0);
            }
        }
        let datasets: Vec<ReportRow> = names
            .iter()
            .map(|n| {
                let members: Vec<&SampleScore> = samples.iter().filter(|s| s.dataset == *n).collect();
                ReportRow::of(n, "*", &members)
            })
            .collect();
        let all: Vec<&SampleScore> = samples.iter().collect();
        let overall = ReportRow::of("all", "*", &all);
        let mut shown = rows.clone();
        if rows.len() > datasets.len() {
            shown.extend(datasets.iter().cloned());
        }
        let table = render_table(&shown, Some(&overall));
        Ok(Self {
            rows,
            datasets,
            overall,
            samples,
            runtime: None,
            table,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Plain-text table with mean±std cells in compact table style.
pub fn render_table(rows: &[ReportRow], overall: Option<&ReportRow>) -> String {
    let mut lines = vec![
        format!("{:<16} {:<28} {:>5}  {:>10}  {:>10}", "Dataset", "Prompt", "N", "DSC (%)", "IoU (%)"),
        "-".repeat(75),
    ];
    for r in rows.iter().chain(overall) {
        lines.push(format!(
            "{:<16} {:<28} {:>5}  {:>10}  {:>10}",
            r.dataset,
            r.prompt,
            r.count,
            r.dsc.compact(),
            r.iou.compact()
        ));
    }
    lines.join("\n") + "\n"
}

/// Count-weighted combination of rows; equals aggregating their samples together.
pub fn combine(rows: &[ReportRow], dataset: &str, prompt: &str) -> Result<ReportRow> {
    let n: usize = rows.iter().map(|r| r.count).sum();
    if n == 0 {
        return Err(Error::Evaluation("cannot combine empty rows".into()));
    }
    let pool = |f: fn(&ReportRow) -> MeanStd| {
        let mean = rows.iter().map(|r| r.count as f64 * f(r).mean).sum::<f64>() / n as f64;
        let second = rows
            .iter()
            .map(|r| r.count as f64 * (f(r).std.powi(2) + f(r).mean.powi(2)))
            .sum::<f64>()
            / n as f64;
        MeanStd {
            mean,
            std: (second - mean * mean).max(0.0).sqrt(),
        }
    };
    Ok(ReportRow {
        dataset: dataset.to_string(),
        prompt: prompt.to_string(),
        count: n,
        dsc: pool(|r| r.dsc),
        iou: pool(|r| r.iou),
    })
}

pub fn write_scores(path: &Path, scores: &[SampleScore]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scores {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<SampleScore>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Scores one sample; a missed detection scores its empty mask.
pub fn score_sample(pipeline: &Pipeline, dataset: &str, s: &Sample, prompt: &str) -> Result<SampleScore> {
    let seg = pipeline.run(&s.image, prompt)?;
    Ok(SampleScore {
        dataset: dataset.to_string(),
        image: s.provenance.image_path.clone(),
        prompt: prompt.to_string(),
        dsc: dsc(&seg.mask, &s.mask)?,
        iou: iou(&seg.mask, &s.mask)?,
        detected: !seg.boxes.is_empty(),
        best_score: seg.best_score,
    })
}

/// Scores every sample with `prompt` (or each sample's own prompt), using
/// all available cores. Output order follows `samples`.
pub fn score_samples(pipeline: &Pipeline, dataset: &str, samples: &[Sample], prompt: Option<&str>) -> Result<Vec<SampleScore>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len().max(1));
    let chunk = samples.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| score_sample(pipeline, dataset, s, prompt.unwrap_or(&s.prompt)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate(pipeline: &Pipeline, dataset: &str, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Evaluation(format!("{dataset}: test split is empty")));
    }
    EvalReport::from_scores(score_samples(pipeline, dataset, samples, None)?)
}

/// The samples a manifest offers for testing: its test split, or every
/// record when it carries no split labels.
pub fn test_samples(manifest: &DatasetManifest, target: (usize, usize)) -> Result<Vec<Sample>> {
    let stream = if manifest.is_split() {
        ingest_split(manifest, target, Split::Test)?
    } else {
        ingest(manifest, target)
    };
    Ok(collect(stream)?.0)
}

pub fn evaluate_manifest(pipeline: &Pipeline, manifest: &DatasetManifest, target: (usize, usize)) -> Result<EvalReport> {
    evaluate(pipeline, &manifest.name, &test_samples(manifest, target)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub report: EvalReport,
    /// Max − min of the per-prompt means, in percentage points.
    pub dsc_spread: f64,
    pub iou_spread: f64,
}

/// Spread of row means (max − min) for each metric.
pub fn spreads(rows: &[ReportRow]) -> (f64, f64) {
    let spread = |f: fn(&ReportRow) -> f64| {
        let (lo, hi) = rows
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    };
    (spread(|r| r.dsc.mean), spread(|r| r.iou.mean))
}

/// Evaluates the same samples once per prompt.
pub fn prompt_sweep(pipeline: &Pipeline, prompts: &[String], dataset: &str, samples: &[Sample]) -> Result<SweepReport> {
    if prompts.len() < 2 {
        return Err(Error::Config("a prompt sweep needs at least two prompts".into()));
    }
    if samples.is_empty() {
        return Err(Error::Evaluation(format!("{dataset}: no samples to sweep")));
    }
    let mut scores = Vec::new();
    for p in prompts {
        scores.extend(score_samples(pipeline, dataset, samples, Some(p))?);
    }
    let mut report = EvalReport::from_scores(scores)?;
    // duplicate prompts share one row; list them once per request anyway
    let rows: Vec<ReportRow> = prompts
        .iter()
        .map(|p| report.rows.iter().find(|r| &r.prompt == p).expect("row per prompt").clone())
        .collect();
    let (dsc_spread, iou_spread) = spreads(&rows);
    report.table = render_table(&rows, None)
        + &format!("spread (max − min): DSC {dsc_spread:.2}, IoU {iou_spread:.2}\n");
    report.rows = rows;
    Ok(SweepReport {
        report,
        dsc_spread,
        iou_spread,
    })
}

/// Mean wall-clock seconds over `runs` single-image inferences after one
/// untimed warm-up.
pub fn benchmark_runtime(pipeline: &Pipeline, image: &GrayImage, prompt: &str, runs: usize) -> Result<RuntimeStats> {
    let runs = runs.max(1);
    let t = Instant::now();
    pipeline.run(image, prompt)?;
    let warmup_secs = t.elapsed().as_secs_f64();
    let mut per_run_secs = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        pipeline.run(image, prompt)?;
        per_run_secs.push(t.elapsed().as_secs_f64());
    }
    Ok(RuntimeStats {
        runs,
        mean_secs: per_run_secs.iter().sum::<f64>() / runs as f64,
        per_run_secs,
        warmup_secs,
        reference_secs: REFERENCE_SECS_PER_IMAGE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(dataset: &str, prompt: &str, d: f64) -> SampleScore {
        SampleScore {
            dataset: dataset.into(),
            image: "x.png".into(),
            prompt: prompt.into(),
            dsc: d,
            iou: d / (2.0 - d),
            detected: true,
            best_score: Some(0.9),
        }
    }

    #[test]
    fn two_samples() {
        let m = MeanStd::of(&[1.0, 0.5]);
        assert_eq!(m.precise(), "75.00±25.00");
        assert_eq!(m.compact(), "75.00±25");
    }

    #[test]
    fn compact_format() {
        assert_eq!(MeanStd { mean: 91.74, std: 5.0 }.compact(), "91.74±5");
        assert_eq!(MeanStd { mean: 100.0, std: 0.0 }.compact(), "100.00±0");
        assert_eq!(MeanStd { mean: 70.01, std: 13.6 }.compact(), "70.01±14");
    }

    #[test]
    fn spread_of_reference_rows() {
        let row = |m| ReportRow {
            dataset: "d".into(),
            prompt: "p".into(),
            count: 1,
            dsc: MeanStd { mean: m, std: 0.0 },
            iou: MeanStd { mean: m, std: 0.0 },
        };
        let (d, _) = spreads(&[row(70.01), row(72.55), row(71.0)]);
        assert!((d - 2.54).abs() < 1e-9);
    }

    #[test]
    fn combination_matches_pooling() {
        let a: Vec<SampleScore> = [0.9, 0.7, 0.8].iter().map(|&d| score("a", "p", d)).collect();
        let b: Vec<SampleScore> = [0.2, 0.95].iter().map(|&d| score("b", "p", d)).collect();
        let ra = EvalReport::from_scores(a.clone()).unwrap().overall;
        let rb = EvalReport::from_scores(b.clone()).unwrap().overall;
        let combined = combine(&[ra, rb], "all", "*").unwrap();
        let pooled = EvalReport::from_scores([a, b].concat()).unwrap().overall;
        assert!((combined.dsc.mean - pooled.dsc.mean).abs() < 1e-9);
        assert!((combined.dsc.std - pooled.dsc.std).abs() < 1e-9);
        assert!((combined.iou.std - pooled.iou.std).abs() < 1e-9);
    }

    #[test]
    fn scores_roundtrip_reaggregates() {
        let s: Vec<SampleScore> = [0.31, 0.77, 0.5, 0.91].iter().map(|&d| score("a", "p", d)).collect();
        let rep = EvalReport::from_scores(s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.jsonl");
        write_scores(&p, &rep.samples).unwrap();
        let again = EvalReport::from_scores(read_scores(&p).unwrap()).unwrap();
        assert!((again.overall.dsc.mean - rep.overall.dsc.mean).abs() < 1e-9);
        assert!((again.overall.dsc.std - rep.overall.dsc.std).abs() < 1e-9);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(EvalReport::from_scores(vec![]), Err(Error::Evaluation(_))));
    }
}
