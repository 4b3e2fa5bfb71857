//! Low-rank adaptation: adapters, injection plans, freeze policy, merging and
//! trainable-parameter accounting.
//!
//! An adapted linear computes `W·x + b + (α/r)·B·(A·x)` where `A` is `r×d_in`
//! (drawn from N(0, 0.02²)) and `B` is `d_out×r` (zeros), so a fresh adapter
//! leaves the model's outputs unchanged.

use std::collections::BTreeSet;
use std::io::Write;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, Linear, Param, ParamKind, ParamStore};

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f64 = 8.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    /// `A`, shape `r × d_in`.
    pub down: Param,
    /// `B`, shape `d_out × r`.
    pub up: Param,
    pub target: String,
}

impl LoraAdapter {
    pub fn new(target: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64, init: &mut Init) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} for {target} must be in [1, {}]",
                d_in.min(d_out)
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            rank,
            alpha,
            down: Param::trainable(init.normal(&[rank, d_in], INIT_STD)?)?,
            up: Param::trainable(init.constant(&[d_out, rank], 0.0)?)?,
            target: target.to_string(),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r)·x·Aᵀ·Bᵀ` for a `[n, d_in]` input.
    pub fn delta_forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.down.tensor().t()?)?;
        Ok((h.matmul(&self.up.tensor().t()?)? * self.scale())?)
    }

    /// The dense update `(α/r)·B·A`, shape `d_out × d_in`.
    pub fn delta_weight(&self) -> Result<Tensor> {
        Ok((self.up.tensor().matmul(self.down.tensor())? * self.scale())?)
    }

    pub fn param_count(&self) -> usize {
        self.down.elem_count() + self.up.elem_count()
    }
}

/// Wraps a bare weight matrix (`d_out × d_in`) in a frozen linear with a fresh adapter.
pub fn wrap(base_weight: Tensor, rank: usize, alpha: f64, seed: u64) -> Result<Linear> {
    let dims = base_weight.dims2()?;
    let mut init = Init::new(seed, base_weight.dtype(), base_weight.device().clone());
    let lora = LoraAdapter::new("wrapped", dims.1, dims.0, rank, alpha, &mut init)?;
    Ok(Linear {
        weight: Param::frozen(base_weight),
        bias: None,
        lora: Some(lora),
    })
}

/// Which linears receive adapters and which parameters train fully. Everything
/// else is frozen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub adapter_targets: BTreeSet<String>,
    /// Linear names or module prefixes (e.g. `bbox_head`).
    pub fully_trainable: BTreeSet<String>,
}

impl InjectionPlan {
    pub fn new<A, B>(adapter_targets: A, fully_trainable: B) -> Self
    where
        A: IntoIterator,
        A::Item: Into<String>,
        B: IntoIterator,
        B::Item: Into<String>,
    {
        Self {
            adapter_targets: adapter_targets.into_iter().map(Into::into).collect(),
            fully_trainable: fully_trainable.into_iter().map(Into::into).collect(),
        }
    }

    fn matches_trainable(&self, param_name: &str) -> bool {
        self.fully_trainable.iter().any(|p| {
            param_name == p || param_name.strip_prefix(p.as_str()).is_some_and(|rest| rest.starts_with('.'))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Frozen,
    Adapter,
    Trainable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub name: String,
    pub category: Category,
    pub params: usize,
}

/// Per-parameter listing of how a model's weights are treated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    pub entries: Vec<AuditEntry>,
}

impl Audit {
    pub fn of(store: &ParamStore) -> Self {
        let mut entries = Vec::new();
        store.visit(|name, kind, p| {
            let category = match (kind, p.is_trainable()) {
                (ParamKind::Adapter, _) => Category::Adapter,
                (ParamKind::Base, true) => Category::Trainable,
                (ParamKind::Base, false) => Category::Frozen,
            };
            entries.push(AuditEntry {
                name: name.to_string(),
                category,
                params: p.elem_count(),
            });
        });
        Self { entries }
    }

    pub fn count(&self, category: Category) -> usize {
        self.entries
            .iter()
            .filter(|e| e.category == category)
            .map(|e| e.params)
            .sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn trainable_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (self.count(Category::Adapter) + self.count(Category::Trainable)) as f64 / total as f64
    }

    /// One JSON object per line: `{"name","category","params"}`.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Installs adapters on every plan target, freezes everything outside the
/// plan and returns the resulting audit.
pub fn apply_plan(store: &mut ParamStore, plan: &InjectionPlan, rank: usize, alpha: f64, seed: u64) -> Result<Audit> {
    let mut missing: Vec<String> = plan
        .adapter_targets
        .iter()
        .filter(|t| store.try_linear(t).is_none())
        .cloned()
        .collect();
    for prefix in &plan.fully_trainable {
        let mut found = false;
        store.visit(|name, _, _| found |= plan_prefix_matches(prefix, name));
        if !found {
            missing.push(prefix.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Plan(missing));
    }
    if store.is_merged() {
        return Err(Error::State("cannot apply a plan to a merged model".into()));
    }
    if let Some(t) = plan
        .adapter_targets
        .iter()
        .find(|t| store.linear(t).lora.is_some())
    {
        return Err(Error::State(format!("{t} already carries an adapter")));
    }
    // validate ranks before mutating anything
    for t in &plan.adapter_targets {
        let l = store.linear(t);
        if rank == 0 || rank > l.in_dim().min(l.out_dim()) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} for {t} must be in [1, {}]",
                l.in_dim().min(l.out_dim())
            )));
        }
    }

    store.set_all_trainable(false)?;
    let mut init = Init::new(seed, store.dtype, store.device.clone());
    for t in &plan.adapter_targets {
        let l = store.linear_mut(t).expect("validated above");
        let (d_in, d_out) = (l.in_dim(), l.out_dim());
        l.lora = Some(LoraAdapter::new(t, d_in, d_out, rank, alpha, &mut init)?);
    }
    store.visit_mut(|name, kind, p| {
        if kind == ParamKind::Base && plan.matches_trainable(name) {
            p.set_trainable(true)?;
        }
        Ok(())
    })?;
    Ok(Audit::of(store))
}

fn plan_prefix_matches(prefix: &str, name: &str) -> bool {
    name == prefix || name.strip_prefix(prefix).is_some_and(|r| r.starts_with('.'))
}

/// (adapter + fully trainable parameters) / all parameters.
pub fn trainable_fraction(store: &ParamStore) -> f64 {
    Audit::of(store).trainable_fraction()
}

/// Folds every adapter into its base weight (`W ← W + (α/r)·B·A`) and removes it.
pub fn merge(store: &mut ParamStore) -> Result<()> {
    if store.merged {
        return Err(Error::State("model adapters are already merged".into()));
    }
    if store.linears.values().all(|l| l.lora.is_none()) {
        return Err(Error::State("model has no adapters to merge".into()));
    }
    for l in store.linears.values_mut() {
        if let Some(a) = l.lora.take() {
            let merged = (l.weight.tensor() + a.delta_weight()?)?;
            l.weight.set(&merged)?;
        }
    }
    store.merged = true;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store_with_linear(d: usize, seed: u64) -> ParamStore {
        let mut init = Init::new(seed, DType::F64, Device::Cpu);
        let mut s = ParamStore::new(DType::F64, Device::Cpu);
        s.insert_linear("proj", init.linear(d, d, true).unwrap());
        s
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let mut init = Init::new(1, DType::F64, Device::Cpu);
        let w = init.uniform(&[5, 7], 0.5).unwrap();
        let l = wrap(w.clone(), 3, 8.0, 2).unwrap();
        let x = init.uniform(&[4, 7], 1.0).unwrap();
        let a = l.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let b = x.matmul(&w.t().unwrap()).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        assert!(l.lora.as_ref().unwrap().down.is_trainable());
        assert!(!l.weight.is_trainable());
    }

    #[test]
    fn hand_computed_delta() {
        // base = I, α/r = 1, A = [[1, 0]], B = [[2], [0]] so B·A = [[2, 0], [0, 0]]
        let eye = Tensor::eye(2, DType::F64, &Device::Cpu).unwrap();
        let mut l = wrap(eye, 1, 1.0, 0).unwrap();
        let a = l.lora.as_mut().unwrap();
        a.down.set(&Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap()).unwrap();
        a.up.set(&Tensor::new(&[[2.0f64], [0.0]], &Device::Cpu).unwrap()).unwrap();
        let x = Tensor::new(&[[1.0f64, 1.0]], &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().to_vec2::<f64>().unwrap(), vec![vec![3.0, 1.0]]);
    }

    #[test]
    fn rank_bounds() {
        let w = Tensor::zeros((3, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(wrap(w.clone(), 3, 8.0, 0).is_ok());
        assert!(matches!(wrap(w.clone(), 0, 8.0, 0), Err(Error::Config(_))));
        assert!(matches!(wrap(w, 4, 8.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn single_linear_fraction() {
        let mut s = store_with_linear(64, 0);
        let plan = InjectionPlan::new(["proj"], Vec::<String>::new());
        let audit = apply_plan(&mut s, &plan, 4, 8.0, 0).unwrap();
        assert_eq!(audit.count(Category::Adapter), 512);
        assert_eq!(audit.count(Category::Frozen), 4160);
        let f = trainable_fraction(&s);
        assert!((f - 512.0 / (4160.0 + 512.0)).abs() < 1e-12);
        assert!((f - 0.1096).abs() < 1e-4);
    }

    #[test]
    fn empty_plan_freezes_everything() {
        let mut s = store_with_linear(8, 0);
        s.set_all_trainable(true).unwrap();
        let audit = apply_plan(&mut s, &InjectionPlan::default(), 4, 8.0, 0).unwrap();
        assert_eq!(audit.trainable_fraction(), 0.0);
        assert!(s.trainable_vars().is_empty());
    }

    #[test]
    fn unresolved_names_are_listed() {
        let mut s = store_with_linear(8, 0);
        let plan = InjectionPlan::new(["proj", "nope.q_proj"], ["missing_head"]);
        match apply_plan(&mut s, &plan, 2, 4.0, 0) {
            Err(Error::Plan(names)) => assert_eq!(names, ["nope.q_proj", "missing_head"]),
            other => panic!("unexpected {other:?}"),
        }
        // nothing was touched
        assert!(s.linear("proj").lora.is_none());
    }

    #[test]
    fn merge_contract() {
        let mut s = store_with_linear(6, 3);
        let before = s.linear("proj").weight.tensor().to_vec2::<f64>().unwrap();
        apply_plan(&mut s, &InjectionPlan::new(["proj"], Vec::<String>::new()), 2, 4.0, 1).unwrap();
        merge(&mut s).unwrap();
        assert_eq!(s.linear("proj").weight.tensor().to_vec2::<f64>().unwrap(), before);
        assert!(s.linear("proj").lora.is_none());
        assert!(matches!(merge(&mut s), Err(Error::State(_))));
        assert_eq!(trainable_fraction(&s), 0.0);
    }

    #[test]
    fn audit_jsonl_shape() {
        let mut s = store_with_linear(4, 0);
        let audit = apply_plan(&mut s, &InjectionPlan::new(["proj"], ["proj"]), 2, 4.0, 0).unwrap();
        let mut buf = Vec::new();
        audit.write_jsonl(&mut buf).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0]["name"], "proj.weight");
        assert_eq!(lines[0]["category"], "trainable");
        assert_eq!(lines[2]["category"], "adapter");
        assert_eq!(lines[2]["params"], 8);
    }
}
