//! The detection objective: L1 and GIoU box terms over matched query/object
//! pairs plus a sigmoid focal term over every query–token logit.
//!
//! Each term exists twice: a plain `f64` version used for matching, logging
//! and as a test oracle, and a tensor version (`*_t`) that autograd trains
//! through.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::detector::DetectionOutput;
use crate::error::{Error, Result};

/// Smallest width/height a predicted box is clamped to before GIoU.
pub const MIN_BOX_SIDE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            focal: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.l1, self.giou, self.focal];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with at least one positive, got {w:?}"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            l1: self.l1 * s,
            giou: self.giou * s,
            focal: self.focal * s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// One annotated object: its normalized cxcywh box and which prompt tokens name it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub cxcywh: [f64; 4],
    pub positive_tokens: Vec<bool>,
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn clamp_degenerate(b: [f64; 4]) -> [f64; 4] {
    [b[0], b[1], b[2].max(MIN_BOX_SIDE), b[3].max(MIN_BOX_SIDE)]
}

/// Sum of absolute coordinate differences.
pub fn l1_loss(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    pred.iter().zip(&gt).map(|(p, g)| (p - g).abs()).sum()
}

/// Generalized IoU of two xyxy boxes.
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let enclosing = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (enclosing - union) / enclosing
}

/// `1 − GIoU` for two cxcywh boxes; zero-area predictions are clamped first.
pub fn giou_loss(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    1.0 - giou_xyxy(cxcywh_to_xyxy(clamp_degenerate(pred)), cxcywh_to_xyxy(clamp_degenerate(gt)))
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = −softplus(−x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Focal loss of one logit against a binary target.
pub fn focal_term(logit: f64, positive: bool, fp: FocalParams) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    if positive {
        -fp.alpha * (1.0 - p).powf(fp.gamma) * log_sigmoid(logit)
    } else {
        -(1.0 - fp.alpha) * p.powf(fp.gamma) * log_sigmoid(-logit)
    }
}

/// Mean focal loss over every entry of an `N × T` logit matrix.
pub fn focal_loss(logits: &[Vec<f64>], targets: &[Vec<bool>], fp: FocalParams) -> Result<f64> {
    if logits.len() != targets.len() || logits.iter().zip(targets).any(|(l, t)| l.len() != t.len()) {
        return Err(Error::Dimension("focal loss logits and targets differ in shape".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (row, trow) in logits.iter().zip(targets) {
        for (&x, &t) in row.iter().zip(trow) {
            if !x.is_finite() {
                return Err(Error::Numeric(format!("non-finite logit {x}")));
            }
            sum += focal_term(x, t, fp);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Query → object assignment; queries not listed are background.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// (query index, ground-truth index), sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn query_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows ≤ cols`),
/// by shortest augmenting paths with potentials. Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows ≤ cols");
    const INF: f64 = f64::INFINITY;
    // 1-based arrays; index 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Focal-form classification cost of assigning a query to an object: mean
/// over the object's positive tokens of (positive loss − negative loss).
fn class_cost(logits: &[f64], positive: &[bool], fp: FocalParams) -> f64 {
    let mut acc = 0.0;
    let mut n = 0;
    for (&x, &pos) in logits.iter().zip(positive) {
        if pos {
            acc += focal_term(x, true, fp) - focal_term(x, false, fp);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Matching cost matrix, rows = ground truths, columns = queries.
pub fn cost_matrix(out: &DetectionOutput, gts: &[GroundTruth], w: &LossWeights, fp: FocalParams) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| {
            (0..out.num_queries())
                .map(|q| {
                    w.focal * class_cost(&out.logits[q], &g.positive_tokens, fp)
                        + w.l1 * l1_loss(out.boxes[q], g.cxcywh)
                        + w.giou * giou_loss(out.boxes[q], g.cxcywh)
                })
                .collect()
        })
        .collect()
}

/// Optimal bipartite assignment of ground truths to queries.
pub fn match_queries(out: &DetectionOutput, gts: &[GroundTruth], w: &LossWeights, fp: FocalParams) -> Result<MatchResult> {
    if gts.len() > out.num_queries() {
        return Err(Error::Capacity {
            ground_truths: gts.len(),
            queries: out.num_queries(),
        });
    }
    let cost = cost_matrix(out, gts, w, fp);
    let cols = hungarian(&cost);
    Ok(MatchResult {
        pairs: cols.into_iter().enumerate().map(|(g, q)| (q, g)).collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
    pub total: f64,
}

/// Token targets: each matched query gets its object's positive tokens.
pub fn focal_targets(n_queries: usize, n_tokens: usize, gts: &[GroundTruth], m: &MatchResult) -> Vec<Vec<bool>> {
    let mut t = vec![vec![false; n_tokens]; n_queries];
    for &(q, g) in &m.pairs {
        for (k, &pos) in gts[g].positive_tokens.iter().enumerate().take(n_tokens) {
            t[q][k] = pos;
        }
    }
    t
}

/// Weighted objective; the box terms are summed over matched pairs and
/// divided by the number of ground truths.
pub fn total_loss(out: &DetectionOutput, gts: &[GroundTruth], w: &LossWeights, fp: FocalParams) -> Result<(LossBreakdown, MatchResult)> {
    w.validate()?;
    let m = match_queries(out, gts, w, fp)?;
    let norm = gts.len().max(1) as f64;
    let l1: f64 = m.pairs.iter().map(|&(q, g)| l1_loss(out.boxes[q], gts[g].cxcywh)).sum::<f64>() / norm;
    let giou: f64 = m.pairs.iter().map(|&(q, g)| giou_loss(out.boxes[q], gts[g].cxcywh)).sum::<f64>() / norm;
    let targets = focal_targets(out.num_queries(), out.num_tokens(), gts, &m);
    let focal = focal_loss(&out.logits, &targets, fp)?;
    let total = w.l1 * l1 + w.giou * giou + w.focal * focal;
    Ok((LossBreakdown { l1, giou, focal, total }, m))
}

// ---- tensor versions -------------------------------------------------------

fn softplus_t(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Mean focal loss over all entries of `logits` (`[N, T]`); `targets` is 0/1 of the same shape.
pub fn focal_loss_t(logits: &Tensor, targets: &Tensor, fp: FocalParams) -> Result<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?;
    let log_p = softplus_t(&logits.neg()?)?.neg()?;
    let log_1mp = softplus_t(logits)?.neg()?;
    let one_minus_p = (p.ones_like()? - &p)?;
    let pos = ((one_minus_p.powf(fp.gamma)? * log_p)? * (-fp.alpha))?;
    let neg = ((p.powf(fp.gamma)? * log_1mp)? * (-(1.0 - fp.alpha)))?;
    let inv = (targets.ones_like()? - targets)?;
    let per = ((pos * targets)? + (neg * inv)?)?;
    Ok(per.mean_all()?)
}

fn columns(b: &Tensor) -> Result<[Tensor; 4]> {
    Ok([b.narrow(1, 0, 1)?, b.narrow(1, 1, 1)?, b.narrow(1, 2, 1)?, b.narrow(1, 3, 1)?])
}

/// Per-row `1 − GIoU` between `[M, 4]` cxcywh tensors, returned as `[M]`.
pub fn giou_loss_t(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let [pcx, pcy, pw, ph] = columns(pred)?;
    let [gcx, gcy, gw, gh] = columns(gt)?;
    let pw = pw.clamp(MIN_BOX_SIDE, f64::MAX)?;
    let ph = ph.clamp(MIN_BOX_SIDE, f64::MAX)?;
    let (px0, px1) = ((&pcx - (&pw * 0.5)?)?, (&pcx + (&pw * 0.5)?)?);
    let (py0, py1) = ((&pcy - (&ph * 0.5)?)?, (&pcy + (&ph * 0.5)?)?);
    let (gx0, gx1) = ((&gcx - (&gw * 0.5)?)?, (&gcx + (&gw * 0.5)?)?);
    let (gy0, gy1) = ((&gcy - (&gh * 0.5)?)?, (&gcy + (&gh * 0.5)?)?);
    let iw = (px1.minimum(&gx1)? - px0.maximum(&gx0)?)?.relu()?;
    let ih = (py1.minimum(&gy1)? - py0.maximum(&gy0)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = (((&pw * &ph)? + (&gw * &gh)?)? - &inter)?;
    let ew = (px1.maximum(&gx1)? - px0.minimum(&gx0)?)?;
    let eh = (py1.maximum(&gy1)? - py0.minimum(&gy0)?)?;
    let enclosing = (ew * eh)?;
    let giou = ((&inter / &union)? - ((&enclosing - &union)? / &enclosing)?)?;
    Ok((giou.ones_like()? - giou)?.squeeze(1)?)
}

/// Differentiable objective for one image. `boxes` is `[N, 4]` cxcywh,
/// `logits` is `[N, T]`. Matching runs on detached values.
pub fn total_loss_t(
    boxes: &Tensor,
    logits: &Tensor,
    gts: &[GroundTruth],
    w: &LossWeights,
    fp: FocalParams,
) -> Result<(Tensor, LossBreakdown)> {
    w.validate()?;
    let out = DetectionOutput::from_tensors(boxes, logits, String::new())?;
    if out.logits.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let m = match_queries(&out, gts, w, fp)?;
    let (n, t) = logits.dims2()?;
    let dtype = logits.dtype();
    let dev = logits.device();
    let targets = focal_targets(n, t, gts, &m);
    let tflat: Vec<f64> = targets.iter().flatten().map(|&b| b as u8 as f64).collect();
    let targets_t = Tensor::from_vec(tflat, (n, t), dev)?.to_dtype(dtype)?;
    let focal = focal_loss_t(logits, &targets_t, fp)?;
    let mut total = (&focal * w.focal)?;
    let mut bd = LossBreakdown {
        focal: focal.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        ..Default::default()
    };
    if !m.pairs.is_empty() {
        let norm = gts.len() as f64;
        let q_idx: Vec<u32> = m.pairs.iter().map(|p| p.0 as u32).collect();
        let q_idx = Tensor::from_vec(q_idx, m.pairs.len(), dev)?;
        let matched = boxes.index_select(&q_idx, 0)?;
        let gflat: Vec<f64> = m.pairs.iter().flat_map(|p| gts[p.1].cxcywh).collect();
        let gt_t = Tensor::from_vec(gflat, (m.pairs.len(), 4), dev)?.to_dtype(dtype)?;
        let l1 = ((matched.clone() - &gt_t)?.abs()?.sum_all()? / norm)?;
        let giou = (giou_loss_t(&matched, &gt_t)?.sum_all()? / norm)?;
        bd.l1 = l1.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        bd.giou = giou.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total = ((total + (l1 * w.l1)?)? + (giou * w.giou)?)?;
    }
    bd.total = w.l1 * bd.l1 + w.giou * bd.giou + w.focal * bd.focal;
    Ok((total, bd))
}

/// Mean over a batch of per-image objectives.
pub fn batch_mean(losses: &[Tensor]) -> Result<Tensor> {
    let stacked = Tensor::stack(losses, 0)?;
    Ok(stacked.mean(D::Minus1)?)
}
