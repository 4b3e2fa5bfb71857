//! Training loop: AdamW on whatever the model marks trainable, per-epoch
//! validation, early stopping with best-checkpoint restore.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, AugmentConfig, Sample};
use crate::detector::{PromptTokens, ToyDetector};
use crate::error::{Error, Result};
use crate::losses::{total_loss_t, FocalParams, GroundTruth, LossBreakdown, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub focal: FocalParams,
    /// `None` trains on the samples as given.
    pub augment: Option<AugmentConfig>,
    /// Share of training items shown with a prompt naming nothing in the
    /// image (another prompt from the training set, or an unknown word).
    pub negative_rate: f64,
    /// Wall-clock limit; training stops after the epoch that crosses it.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 5e-4,
            weight_decay: 1e-4,
            max_epochs: 100,
            patience: 20,
            seed: 0,
            loss: LossWeights::default(),
            focal: FocalParams::default(),
            augment: Some(AugmentConfig::default()),
            negative_rate: 0.2,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, max epochs and patience must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.negative_rate) {
            return Err(Error::Config("negative_rate must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TimeBudget,
}

/// Tracks the best validation loss and how long ago it was seen.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch's validation loss; true when it is a new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        match self.best {
            Some((_, b)) if val_loss >= b => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

/// Anything `fit` can drive.
pub trait Trainee {
    type Snapshot;

    fn train_epoch(&mut self, epoch: usize) -> Result<f64>;
    fn validation_loss(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Result<Self::Snapshot>;
    fn restore(&mut self, snapshot: Self::Snapshot) -> Result<()>;
    fn lr(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub elapsed_secs: f64,
}

/// Epoch loop with early stopping; the best-validation snapshot is restored
/// before returning.
pub fn fit<T: Trainee>(
    t: &mut T,
    max_epochs: usize,
    patience: usize,
    time_budget: Option<Duration>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitReport> {
    let start = Instant::now();
    let mut stopper = EarlyStopping::new(patience);
    let mut best_snapshot = None;
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=max_epochs {
        let train_loss = t.train_epoch(epoch)?;
        let val_loss = t.validation_loss()?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            if let Some(s) = best_snapshot.take() {
                t.restore(s)?;
            }
            return Err(Error::Divergence(format!(
                "epoch {epoch}: train loss {train_loss}, validation loss {val_loss}"
            )));
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: t.lr(),
        };
        on_epoch(&rec);
        history.push(rec);
        if stopper.observe(epoch, val_loss) {
            best_snapshot = Some(t.snapshot()?);
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
        if time_budget.is_some_and(|b| start.elapsed() >= b) {
            stop = StopReason::TimeBudget;
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best.expect("at least one epoch");
    if let Some(s) = best_snapshot {
        t.restore(s)?;
    }
    Ok(FitReport {
        history,
        best_epoch,
        best_val_loss,
        stop,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fit: FitReport,
    /// Mean loss over the (unaugmented) training set before the first step.
    pub initial_train_loss: f64,
    /// Same measurement after restoring the best checkpoint.
    pub final_train_loss: f64,
    pub trainable_params: usize,
}

fn ground_truth(s: &Sample, tokens: &PromptTokens) -> GroundTruth {
    let (h, w) = s.size();
    GroundTruth {
        cxcywh: s.bbox.to_cxcywh_normalized(w, h),
        positive_tokens: vec![true; tokens.len()],
    }
}

struct Item {
    sample: Sample,
    tokens: PromptTokens,
    positive: bool,
}

/// Mean objective over `items`, processed `batch` at a time; the returned
/// tensor carries gradients.
fn batch_loss(det: &ToyDetector, items: &[Item], cfg: &TrainConfig) -> Result<(Tensor, LossBreakdown)> {
    let images: Vec<_> = items.iter().map(|i| &i.sample.image).collect();
    let prompts: Vec<_> = items.iter().map(|i| &i.tokens).collect();
    let out = det.forward(&images, &prompts)?;
    let mut losses = Vec::with_capacity(items.len());
    let mut sum = LossBreakdown::default();
    for (b, item) in items.iter().enumerate() {
        let (boxes, logits) = out.item(b)?;
        let gts = if item.positive {
            vec![ground_truth(&item.sample, &item.tokens)]
        } else {
            Vec::new()
        };
        let (l, bd) = total_loss_t(&boxes, &logits, &gts, &cfg.loss, cfg.focal)?;
        losses.push(l);
        sum.l1 += bd.l1;
        sum.giou += bd.giou;
        sum.focal += bd.focal;
        sum.total += bd.total;
    }
    let n = items.len() as f64;
    let mean = (Tensor::stack(&losses, 0)?.sum_all()? / n)?;
    Ok((
        mean,
        LossBreakdown {
            l1: sum.l1 / n,
            giou: sum.giou / n,
            focal: sum.focal / n,
            total: sum.total / n,
        },
    ))
}

/// Mean loss over `samples` with their own prompts, no augmentation.
pub fn dataset_loss(det: &ToyDetector, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Evaluation("cannot compute a loss over zero samples".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.batch_size.max(8)) {
        let items = chunk
            .iter()
            .map(|s| {
                Ok(Item {
                    tokens: det.tokenize(&s.prompt)?,
                    sample: s.clone(),
                    positive: true,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (_, bd) = batch_loss(det, &items, cfg)?;
        total += bd.total * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

struct DetectorTrainee<'a, 'w> {
    det: &'a mut ToyDetector,
    opt: AdamW,
    train: &'a [Sample],
    val: &'a [Sample],
    negatives: Vec<PromptTokens>,
    cfg: &'a TrainConfig,
    step_log: Option<&'w mut dyn Write>,
    step: usize,
}

impl DetectorTrainee<'_, '_> {
    fn item(&self, s: &Sample, rng: &mut ChaCha8Rng) -> Result<Item> {
        let sample = match &self.cfg.augment {
            Some(a) => augment(s, rng.gen(), a),
            None => s.clone(),
        };
        let own = self.det.tokenize(&s.prompt)?;
        if rng.gen::<f64>() < self.cfg.negative_rate {
            let pool: Vec<&PromptTokens> = self.negatives.iter().filter(|p| p.ids != own.ids).collect();
            if let Some(p) = pool.choose(rng) {
                return Ok(Item {
                    sample,
                    tokens: (*p).clone(),
                    positive: false,
                });
            }
        }
        Ok(Item {
            sample,
            tokens: own,
            positive: true,
        })
    }
}

impl Trainee for DetectorTrainee<'_, '_> {
    type Snapshot = IndexMap<String, Tensor>;

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let items = chunk
                .iter()
                .map(|&i| self.item(&self.train[i], &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (loss, bd) = batch_loss(self.det, &items, self.cfg)?;
            if !bd.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, step {}",
                    self.step
                )));
            }
            self.opt.backward_step(&loss)?;
            self.step += 1;
            if let Some(w) = self.step_log.as_mut() {
                serde_json::to_writer(&mut **w, &serde_json::json!({"epoch": epoch, "step": self.step, "loss": bd}))?;
                w.write_all(b"\n")?;
            }
            total += bd.total * chunk.len() as f64;
        }
        Ok(total / self.train.len() as f64)
    }

    fn validation_loss(&mut self) -> Result<f64> {
        dataset_loss(self.det, self.val, self.cfg)
    }

    fn snapshot(&self) -> Result<Self::Snapshot> {
        self.det.store.snapshot_trainable()
    }

    fn restore(&mut self, s: Self::Snapshot) -> Result<()> {
        self.det.store.assign(&s)
    }

    fn lr(&self) -> f64 {
        self.opt.learning_rate()
    }
}

/// Trains the parameters `det` currently marks trainable (all of them for
/// pretraining, adapters plus box head after an injection plan).
pub fn train(
    det: &mut ToyDetector,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    step_log: Option<&mut dyn Write>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let vars = det.store.trainable_vars();
    if vars.is_empty() {
        return Err(Error::State("model has no trainable parameters".into()));
    }
    let trainable_params = vars.iter().map(|v| v.elem_count()).sum();
    let opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut prompts: Vec<String> = train_set.iter().map(|s| s.prompt.clone()).collect();
    prompts.sort();
    prompts.dedup();
    prompts.push("unk".into());
    let negatives = prompts.iter().map(|p| det.tokenize(p)).collect::<Result<Vec<_>>>()?;

    let initial_train_loss = dataset_loss(det, train_set, cfg)?;
    let mut trainee = DetectorTrainee {
        det,
        opt,
        train: train_set,
        val: val_set,
        negatives,
        cfg,
        step_log,
        step: 0,
    };
    let fit = fit(
        &mut trainee,
        cfg.max_epochs,
        cfg.patience,
        cfg.time_budget_secs.map(Duration::from_secs_f64),
        on_epoch,
    )?;
    let final_train_loss = dataset_loss(trainee.det, train_set, cfg)?;
    Ok(TrainReport {
        fit,
        initial_train_loss,
        final_train_loss,
        trainable_params,
    })
}
