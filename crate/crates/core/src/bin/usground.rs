use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use serde_json::json;

use usground::dataset::{
    collect, generate_synthetic, ingest, ingest_split, split, DatasetManifest, DomainVariant, LesionFamily, Role,
    Sample, Split, SynthConfig,
};
use usground::detector::{checkpoint, external_backend, ToyDetector, ToyDetectorConfig, DEFAULT_THRESHOLD};
use usground::eval::{benchmark_runtime, evaluate, prompt_sweep, test_samples, write_scores, EvalReport};
use usground::imaging::{save_mask, GrayImage};
use usground::lora::{apply_plan, Audit, DEFAULT_ALPHA, DEFAULT_RANK};
use usground::mask::mask_backend;
use usground::pipeline::{Mode, Pipeline, PipelineConfig};
use usground::service::{self, ServiceState, CHECKPOINT_ENV, PORT_ENV};
use usground::train::{train, write_history, TrainConfig};
use usground::{Error, Result};

#[derive(Parser)]
#[command(name = "usground", version, about = "Text-prompted ultrasound segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a manifest, optionally assign splits, and report what ingests.
    Ingest(IngestArgs),
    /// Write a synthetic dataset (images, masks, manifest.json).
    GenSynth(GenSynthArgs),
    /// Train the toy detector (LoRA on a base checkpoint, or full pretraining).
    Train(TrainArgs),
    /// Evaluate a pipeline on the test split of one or more manifests.
    Eval(EvalArgs),
    /// Evaluate the same test samples under several prompts.
    SweepPrompts(SweepArgs),
    /// Segment one image.
    Segment(SegmentArgs),
    /// Mean seconds per image over repeated runs.
    Bench(BenchArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Toy-detector checkpoint; shorthand for `--detector toy:<path>`.
    #[arg(long, conflicts_with = "detector")]
    checkpoint: Option<PathBuf>,
    /// Detector backend descriptor: toy, toy:<path> or null.
    #[arg(long)]
    detector: Option<String>,
    /// Mask backend: toy or box.
    #[arg(long, default_value = "toy")]
    segmenter: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Best)]
    mode: ModeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Best,
    All,
}

impl ModelArgs {
    fn descriptor(&self) -> Option<String> {
        match (&self.checkpoint, &self.detector) {
            (Some(p), _) => Some(format!("toy:{}", p.display())),
            (None, d) => d.clone(),
        }
    }

    fn pipeline(&self) -> Result<Pipeline> {
        let desc = self
            .descriptor()
            .ok_or_else(|| Error::Config("pass --checkpoint or --detector".into()))?;
        let cfg = PipelineConfig {
            threshold: self.threshold,
            mode: match self.mode {
                ModeArg::Best => Mode::Best,
                ModeArg::All => Mode::All,
            },
            ..PipelineConfig::default()
        };
        Ok(Pipeline::new(external_backend(&desc)?, mask_backend(&self.segmenter)?).with_config(cfg))
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Assign train/val/test splits with these fractions and write the manifest back.
    #[arg(long, value_parser = parse_fractions)]
    split: Option<(f64, f64, f64)>,
    #[arg(long)]
    resplit: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Bright,
    Dark,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::A)]
    variant: VariantArg,
    /// Restrict to one lesion family; mixed by default.
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long, default_value = "synthetic")]
    name: String,
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Mark the set unseen (test only).
    #[arg(long)]
    unseen: bool,
    #[arg(long, value_parser = parse_fractions, default_value = "0.7,0.15,0.15")]
    split: (f64, f64, f64),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Seen manifests; their train and val splits are pooled.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Base checkpoint to adapt; a freshly initialised toy detector otherwise.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Train every parameter instead of injecting adapters.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = DEFAULT_RANK)]
    rank: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value = "checkpoint.safetensors")]
    out: PathBuf,
    #[arg(long, default_value = "history.jsonl")]
    history: PathBuf,
    /// Per-step losses, JSON lines.
    #[arg(long)]
    step_log: Option<PathBuf>,
    /// Parameter audit, JSON lines.
    #[arg(long)]
    audit: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    /// Wall-clock budget in seconds (makes runs non-reproducible).
    #[arg(long)]
    time_budget: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Per-sample scores; defaults next to the report.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Repeat for each prompt (at least two).
    #[arg(long = "prompt", required = true)]
    prompts: Vec<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "sweep.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Benchmark on this image instead of random noise.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value = "bright lesion")]
    prompt: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = PORT_ENV, default_value_t = service::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, env = CHECKPOINT_ENV)]
    checkpoint: Option<PathBuf>,
    /// Detector descriptor used when no checkpoint is given.
    #[arg(long)]
    detector: Option<String>,
    #[arg(long, default_value = "toy")]
    segmenter: String,
}

fn parse_fractions(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated fractions".into()),
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(path)?;
    m.validate()?;
    Ok(m)
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let mut m = load_manifest(&a.manifest)?;
    if let Some(f) = a.split {
        m = split(&m, f, a.seed, a.resplit)?;
        m.save(&a.manifest)?;
    }
    let mut stream = ingest(&m, (a.size, a.size));
    let ok = stream.by_ref().filter(|r| r.is_ok()).count();
    let (train, val, test) = m.split_sizes();
    print_json(&json!({
        "dataset": m.name, "records": m.samples.len(), "ingested": ok, "skipped": stream.skipped(),
        "split": {"train": train, "val": val, "test": test},
    }));
    Ok(())
}

fn cmd_gen_synth(a: GenSynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        name: a.name,
        count: a.count,
        height: a.size,
        width: a.size,
        family: a.family.map(|f| match f {
            FamilyArg::Bright => LesionFamily::Bright,
            FamilyArg::Dark => LesionFamily::Dark,
        }),
        variant: match a.variant {
            VariantArg::A => DomainVariant::A,
            VariantArg::B => DomainVariant::B,
        },
        ..SynthConfig::default()
    };
    let mut m = generate_synthetic(&cfg, a.seed, &a.out)?;
    if a.unseen {
        m.role = Role::Unseen;
    }
    let m = split(&m, a.split, a.seed, false)?;
    let path = a.out.join("manifest.json");
    m.save(&path)?;
    let (train, val, test) = m.split_sizes();
    print_json(&json!({"manifest": path, "records": m.samples.len(), "split": {"train": train, "val": val, "test": test}}));
    Ok(())
}

fn pooled(paths: &[PathBuf], target: (usize, usize), which: Split) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for p in paths {
        let m = load_manifest(p)?;
        if m.role == Role::Unseen {
            return Err(Error::Config(format!("{} is unseen and never contributes to training", m.name)));
        }
        out.extend(collect(ingest_split(&m, target, which)?)?.0);
    }
    Ok(out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut det = match &a.base {
        Some(p) => checkpoint::load(p)?,
        None => ToyDetector::new(ToyDetectorConfig::default(), a.seed)?,
    };
    let canvas = (det.config.canvas, det.config.canvas);
    let train_set = pooled(&a.manifest, canvas, Split::Train)?;
    let val_set = pooled(&a.manifest, canvas, Split::Val)?;
    let audit = if a.full {
        det.store.set_all_trainable(true)?;
        Audit::of(&det.store)
    } else {
        if det.store.linears().any(|(_, l)| l.lora.is_some()) {
            return Err(Error::State("base checkpoint already carries adapters".into()));
        }
        let plan = det.default_plan();
        apply_plan(&mut det.store, &plan, a.rank, a.alpha, a.seed)?
    };
    if let Some(p) = &a.audit {
        audit.write_jsonl(BufWriter::new(File::create(p)?))?;
    }
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        max_epochs: a.max_epochs,
        patience: a.patience,
        seed: a.seed,
        augment: if a.no_augment { None } else { TrainConfig::default().augment },
        time_budget_secs: a.time_budget,
        ..TrainConfig::default()
    };
    let mut step_file = a.step_log.as_ref().map(File::create).transpose()?.map(BufWriter::new);
    let report = train(
        &mut det,
        &train_set,
        &val_set,
        &cfg,
        step_file.as_mut().map(|w| w as &mut dyn Write),
        |r| tracing::info!(epoch = r.epoch, train = r.train_loss, val = r.val_loss, "epoch"),
    )?;
    if let Some(mut w) = step_file {
        w.flush()?;
    }
    write_history(&a.history, &report.fit.history)?;
    checkpoint::save(&det, &a.out)?;
    print_json(&json!({
        "checkpoint": a.out, "history": a.history,
        "epochs": report.fit.history.len(), "best_epoch": report.fit.best_epoch,
        "best_val_loss": report.fit.best_val_loss, "stop": format!("{:?}", report.fit.stop),
        "initial_train_loss": report.initial_train_loss, "final_train_loss": report.final_train_loss,
        "trainable_params": report.trainable_params, "trainable_fraction": audit.trainable_fraction(),
    }));
    Ok(())
}

fn canvas_of(p: &Pipeline) -> (usize, usize) {
    p.detector.canvas().unwrap_or((128, 128))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pipeline = a.model.pipeline()?;
    let mut scores = Vec::new();
    for path in &a.manifest {
        let m = load_manifest(path)?;
        scores.extend(evaluate(&pipeline, &m.name, &test_samples(&m, canvas_of(&pipeline))?)?.samples);
    }
    let report = EvalReport::from_scores(scores)?;
    let scores_path = a.scores.unwrap_or_else(|| a.out.with_extension("scores.jsonl"));
    report.save(&a.out)?;
    write_scores(&scores_path, &report.samples)?;
    print!("{}", report.table);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let pipeline = a.model.pipeline()?;
    let m = load_manifest(&a.manifest)?;
    let samples = test_samples(&m, canvas_of(&pipeline))?;
    let sweep = prompt_sweep(&pipeline, &a.prompts, &m.name, &samples)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&sweep)?)?;
    print!("{}", sweep.report.table);
    Ok(())
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let pipeline = a.model.pipeline()?;
    let image = GrayImage::load(&a.image)?;
    let seg = pipeline.run(&image, &a.prompt)?;
    save_mask(&a.out, &seg.mask)?;
    print_json(&json!({
        "mask": a.out, "boxes": seg.boxes, "best_score": seg.best_score, "timing_ms": seg.timing,
        "foreground": seg.mask.count(),
    }));
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let pipeline = a.model.pipeline()?;
    let image = match &a.image {
        Some(p) => GrayImage::load(p)?,
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
            GrayImage::from_fn(a.size, a.size, |_, _| rng.gen::<f32>())
        }
    };
    let stats = benchmark_runtime(&pipeline, &image, &a.prompt, a.runs)?;
    print_json(&serde_json::to_value(&stats)?);
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let desc = match (&a.checkpoint, &a.detector) {
            (Some(p), _) => Some(format!("toy:{}", p.display())),
            (None, d) => d.clone(),
        };
        let state = match desc {
            Some(d) => {
                let p = Pipeline::new(external_backend(&d)?, mask_backend(&a.segmenter)?);
                ServiceState::with(p, a.checkpoint.as_ref().map(|c| c.display().to_string()))
            }
            None => {
                tracing::warn!("no checkpoint given; /api/segment answers 503 until one is loaded");
                ServiceState::empty()
            }
        };
        service::serve(state, SocketAddr::new(a.host, a.port)).await
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Ingest(a) => cmd_ingest(a),
        Cmd::GenSynth(a) => cmd_gen_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::SweepPrompts(a) => cmd_sweep(a),
        Cmd::Segment(a) => cmd_segment(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Serve(a) => cmd_serve(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "detail": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
