//! Named parameter storage shared by the detector, the LoRA engine, the
//! optimizer and checkpointing.
//!
//! A parameter is either frozen (a plain tensor, invisible to autograd) or
//! trainable (backed by a [`Var`]). Every linear transform lives under a
//! qualified name such as `decoder.layers.0.cross_attn.sampling_offsets`;
//! those names are what injection plans and checkpoints refer to.

use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;

#[derive(Debug, Clone)]
pub struct Param {
    tensor: Tensor,
    var: Option<Var>,
}

impl Param {
    pub fn frozen(t: Tensor) -> Self {
        Self { tensor: t, var: None }
    }

    pub fn trainable(t: Tensor) -> Result<Self> {
        let mut p = Self::frozen(t);
        p.set_trainable(true)?;
        Ok(p)
    }

    /// The current value; tracked by autograd when trainable.
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn var(&self) -> Option<&Var> {
        self.var.as_ref()
    }

    pub fn is_trainable(&self) -> bool {
        self.var.is_some()
    }

    pub fn elem_count(&self) -> usize {
        self.tensor.elem_count()
    }

    pub fn set_trainable(&mut self, on: bool) -> Result<()> {
        match (on, self.var.is_some()) {
            (true, false) => {
                let var = Var::from_tensor(&self.tensor)?;
                self.tensor = var.as_tensor().clone();
                self.var = Some(var);
            }
            (false, true) => {
                self.tensor = self.tensor.copy()?.detach();
                self.var = None;
            }
            _ => {}
        }
        Ok(())
    }

    /// Overwrites the value in place, keeping the trainability flag.
    pub fn set(&mut self, t: &Tensor) -> Result<()> {
        if t.shape() != self.tensor.shape() {
            return Err(Error::Dimension(format!(
                "cannot assign {:?} to parameter of shape {:?}",
                t.shape(),
                self.tensor.shape()
            )));
        }
        let t = t.to_dtype(self.tensor.dtype())?;
        match &self.var {
            Some(v) => v.set(&t)?,
            None => self.tensor = t.copy()?,
        }
        Ok(())
    }
}

/// `y = x·Wᵀ + b`, optionally with a low-rank adapter added on top.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.tensor().dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.tensor().dims()[0]
    }

    /// Applies the transform over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (x2, lead) = flatten(x)?;
        let mut y = self.forward_base(&x2)?;
        if let Some(l) = &self.lora {
            y = (y + l.delta_forward(&x2)?)?;
        }
        unflatten(y, &lead)
    }

    /// Forward without the adapter branch.
    pub fn forward_base(&self, x: &Tensor) -> Result<Tensor> {
        let (x2, lead) = flatten(x)?;
        let mut y = x2.matmul(&self.weight.tensor().t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b.tensor())?;
        }
        unflatten(y, &lead)
    }
}

fn flatten(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let dims = x.dims();
    if dims.len() == 2 {
        return Ok((x.clone(), vec![dims[0]]));
    }
    let lead = dims[..dims.len() - 1].to_vec();
    let n: usize = lead.iter().product();
    Ok((x.reshape((n, dims[dims.len() - 1]))?, lead))
}

fn unflatten(y: Tensor, lead: &[usize]) -> Result<Tensor> {
    if lead.len() == 1 {
        return Ok(y);
    }
    let mut shape = lead.to_vec();
    shape.push(y.dims()[1]);
    Ok(y.reshape(shape)?)
}

/// Parameter initialisation helper with a deterministic stream.
pub struct Init {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn uniform(&mut self, dims: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound);
        let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.from_f64(v, dims)
    }

    pub fn normal(&mut self, dims: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.from_f64(v, dims)
    }

    pub fn constant(&self, dims: &[usize], value: f64) -> Result<Tensor> {
        Ok((Tensor::ones(dims, self.dtype, &self.device)? * value)?)
    }

    pub fn from_f64(&self, v: Vec<f64>, dims: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(v, dims, &self.device)?.to_dtype(self.dtype)?)
    }

    /// PyTorch-style default: weights and biases uniform in ±1/√d_in.
    pub fn linear(&mut self, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = Param::frozen(self.uniform(&[d_out, d_in], bound)?);
        let bias = if bias {
            Some(Param::frozen(self.uniform(&[d_out], bound)?))
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            lora: None,
        })
    }
}

/// Every parameter of a model, addressable by qualified name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub(crate) linears: IndexMap<String, Linear>,
    pub(crate) tensors: IndexMap<String, Param>,
    pub(crate) merged: bool,
    pub dtype: DType,
    pub device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            linears: IndexMap::new(),
            tensors: IndexMap::new(),
            merged: false,
            dtype,
            device,
        }
    }

    pub fn insert_linear(&mut self, name: impl Into<String>, l: Linear) {
        self.linears.insert(name.into(), l);
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, p: Param) {
        self.tensors.insert(name.into(), p);
    }

    pub fn linear(&self, name: &str) -> &Linear {
        self.linears
            .get(name)
            .unwrap_or_else(|| panic!("model has no linear named {name}"))
    }

    pub fn try_linear(&self, name: &str) -> Option<&Linear> {
        self.linears.get(name)
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut Linear> {
        self.linears.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("model has no tensor named {name}"))
            .tensor()
    }

    pub fn linear_names(&self) -> impl Iterator<Item = &str> {
        self.linears.keys().map(String::as_str)
    }

    pub fn linears(&self) -> impl Iterator<Item = (&str, &Linear)> {
        self.linears.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Visits every parameter with its qualified name.
    pub fn visit(&self, mut f: impl FnMut(&str, ParamKind, &Param)) {
        for (name, l) in &self.linears {
            f(&format!("{name}.weight"), ParamKind::Base, &l.weight);
            if let Some(b) = &l.bias {
                f(&format!("{name}.bias"), ParamKind::Base, b);
            }
            if let Some(a) = &l.lora {
                f(&format!("{name}.lora_a"), ParamKind::Adapter, &a.down);
                f(&format!("{name}.lora_b"), ParamKind::Adapter, &a.up);
            }
        }
        for (name, p) in &self.tensors {
            f(name, ParamKind::Base, p);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut Param) -> Result<()>) -> Result<()> {
        for (name, l) in &mut self.linears {
            f(&format!("{name}.weight"), ParamKind::Base, &mut l.weight)?;
            if let Some(b) = &mut l.bias {
                f(&format!("{name}.bias"), ParamKind::Base, b)?;
            }
            if let Some(a) = &mut l.lora {
                f(&format!("{name}.lora_a"), ParamKind::Adapter, &mut a.down)?;
                f(&format!("{name}.lora_b"), ParamKind::Adapter, &mut a.up)?;
            }
        }
        for (name, p) in &mut self.tensors {
            f(name, ParamKind::Base, p)?;
        }
        Ok(())
    }

    pub fn total_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, p| n += p.elem_count());
        n
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.visit(|_, _, p| {
            if let Some(v) = p.var() {
                out.push(v.clone());
            }
        });
        out
    }

    /// Named trainable parameters, in visiting order.
    pub fn trainable_named(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit(|n, _, p| {
            if let Some(v) = p.var() {
                out.push((n.to_string(), v.clone()));
            }
        });
        out
    }

    /// Every parameter value by qualified name (fresh copies).
    pub fn named_tensors(&self) -> Result<IndexMap<String, Tensor>> {
        let mut out = IndexMap::new();
        let mut err = None;
        self.visit(|n, _, p| match p.tensor().copy() {
            Ok(t) => {
                out.insert(n.to_string(), t.detach());
            }
            Err(e) => err = Some(e),
        });
        match err {
            Some(e) => Err(e.into()),
            None => Ok(out),
        }
    }

    /// Copies of the trainable parameters, for restoring a best checkpoint.
    pub fn snapshot_trainable(&self) -> Result<IndexMap<String, Tensor>> {
        let mut out = IndexMap::new();
        for (n, v) in self.trainable_named() {
            out.insert(n, v.as_tensor().copy()?.detach());
        }
        Ok(out)
    }

    /// Assigns values by qualified name; names absent from `values` are left alone.
    pub fn assign(&mut self, values: &IndexMap<String, Tensor>) -> Result<()> {
        self.visit_mut(|n, _, p| {
            if let Some(t) = values.get(n) {
                p.set(t)?;
            }
            Ok(())
        })
    }

    /// Marks every parameter trainable (or frozen).
    pub fn set_all_trainable(&mut self, on: bool) -> Result<()> {
        self.visit_mut(|_, _, p| p.set_trainable(on))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    Adapter,
}
