//! A small grounded detector in the shape of a two-stage detection
//! transformer: patch embedding, a text encoder, a bidirectional
//! image–text feature enhancer, language-guided query selection and a
//! decoder with sampled (deformable-style) image attention and text
//! cross-attention. Boxes are refined layer by layer.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::tokenizer::{PromptTokens, Vocabulary, PAD_ID};
use super::{DetectionOutput, Detector};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::lora::InjectionPlan;
use crate::params::{Init, Linear, Param, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorConfig {
    pub canvas: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch_hidden: usize,
    pub enhancer_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    /// Sampling points per head in the decoder's image attention.
    pub points: usize,
    pub max_text_len: usize,
    /// Width and height of the reference boxes queries start from.
    pub init_box_size: f64,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        Self {
            canvas: 128,
            patch: 16,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            patch_hidden: 1024,
            enhancer_layers: 2,
            decoder_layers: 2,
            queries: 10,
            points: 4,
            max_text_len: 16,
            init_box_size: 0.25,
        }
    }
}

impl ToyDetectorConfig {
    /// A very small configuration for gradient checks.
    pub fn micro() -> Self {
        Self {
            canvas: 32,
            patch: 8,
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            patch_hidden: 16,
            enhancer_layers: 1,
            decoder_layers: 2,
            queries: 3,
            points: 2,
            max_text_len: 8,
            init_box_size: 0.3,
        }
    }

    pub fn grid(&self) -> usize {
        self.canvas / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.canvas,
            self.patch,
            self.dim,
            self.heads,
            self.ffn_dim,
            self.patch_hidden,
            self.decoder_layers,
            self.queries,
            self.points,
            self.max_text_len,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("toy detector dimensions must be positive".into()));
        }
        if self.canvas % self.patch != 0 {
            return Err(Error::Config(format!(
                "canvas {} is not a multiple of patch {}",
                self.canvas, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.queries > self.num_patches() {
            return Err(Error::Config(format!(
                "{} queries but only {} patches to select from",
                self.queries,
                self.num_patches()
            )));
        }
        if !(self.init_box_size > 0.0 && self.init_box_size < 1.0) {
            return Err(Error::Config("init_box_size must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Final decoder-layer outputs of one batched forward pass: boxes
/// `[B, N, 4]` and logits `[B, N, T]`, `T` being the longest prompt in the
/// batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub boxes: Tensor,
    pub logits: Tensor,
    pub token_lens: Vec<usize>,
}

impl ForwardOutput {
    /// Output of batch item `b`, logits cut to its own prompt.
    pub fn item(&self, b: usize) -> Result<(Tensor, Tensor)> {
        Ok((self.boxes.get(b)?, self.logits.get(b)?.narrow(1, 0, self.token_lens[b])?))
    }
}

#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub config: ToyDetectorConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
}

const MASKED: f64 = -1e9;
const LOGIT_PRIOR: f64 = 0.01;

fn attention_names(prefix: &str) -> [String; 4] {
    ["q", "k", "v", "out"].map(|p| format!("{prefix}.{p}"))
}

fn ffn_names(prefix: &str) -> [String; 2] {
    ["fc1", "fc2"].map(|p| format!("{prefix}.{p}"))
}

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

fn inverse_sigmoid(x: &Tensor) -> Result<Tensor> {
    let x = x.clamp(1e-5, 1.0 - 1e-5)?;
    let one_minus = (x.ones_like()? - &x)?;
    Ok((x / one_minus)?.log()?)
}

impl ToyDetector {
    /// Randomly initialised detector on the CPU in single precision.
    pub fn new(config: ToyDetectorConfig, seed: u64) -> Result<Self> {
        Self::build(config, Vocabulary::default(), seed, DType::F32, Device::Cpu)
    }

    pub fn build(config: ToyDetectorConfig, vocab: Vocabulary, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut init = Init::new(seed, dtype, device.clone());
        let mut store = ParamStore::new(dtype, device);
        let d = c.dim;

        store.insert_linear("patch_embed.fc1", init.linear(c.patch * c.patch, c.patch_hidden, true)?);
        store.insert_linear("patch_embed.fc2", init.linear(c.patch_hidden, d, true)?);
        store.insert_tensor("patch_embed.pos", Param::frozen(init.normal(&[c.num_patches(), d], 0.02)?));

        store.insert_tensor("text.embed", Param::frozen(init.normal(&[vocab.len(), d], 1.0)?));
        store.insert_tensor("text.pos", Param::frozen(init.normal(&[c.max_text_len, d], 0.02)?));
        add_attention(&mut store, &mut init, "text.self_attn", d)?;
        add_ffn(&mut store, &mut init, "text.ffn", d, c.ffn_dim)?;
        store.insert_linear("feat_map", init.linear(d, d, true)?);

        for l in 0..c.enhancer_layers {
            let p = format!("enhancer.layers.{l}");
            add_attention(&mut store, &mut init, &format!("{p}.img_self_attn"), d)?;
            add_attention(&mut store, &mut init, &format!("{p}.i2t"), d)?;
            add_attention(&mut store, &mut init, &format!("{p}.t2i"), d)?;
            add_ffn(&mut store, &mut init, &format!("{p}.img_ffn"), d, c.ffn_dim)?;
            add_ffn(&mut store, &mut init, &format!("{p}.text_ffn"), d, c.ffn_dim)?;
        }

        store.insert_linear("decoder.ref_point_head", init.linear(4, d, true)?);
        let (h, pts) = (c.heads, c.points);
        for l in 0..c.decoder_layers {
            let p = format!("decoder.layers.{l}");
            add_attention(&mut store, &mut init, &format!("{p}.self_attn"), d)?;
            add_attention(&mut store, &mut init, &format!("{p}.ca_text"), d)?;
            // offsets start as a fan of directions around the reference point
            let mut so = init.linear(d, h * pts * 2, true)?;
            so.weight = Param::frozen((init.uniform(&[h * pts * 2, d], 1.0 / (d as f64).sqrt())? * 0.01)?);
            let mut bias = Vec::with_capacity(h * pts * 2);
            for head in 0..h {
                let theta = 2.0 * std::f64::consts::PI * head as f64 / h as f64;
                for k in 0..pts {
                    bias.push(theta.cos() * (k + 1) as f64);
                    bias.push(theta.sin() * (k + 1) as f64);
                }
            }
            so.bias = Some(Param::frozen(init.from_f64(bias, &[h * pts * 2])?));
            store.insert_linear(format!("{p}.cross_attn.sampling_offsets"), so);
            let mut aw = init.linear(d, h * pts, true)?;
            aw.weight = Param::frozen(init.constant(&[h * pts, d], 0.0)?);
            aw.bias = Some(Param::frozen(init.constant(&[h * pts], 0.0)?));
            store.insert_linear(format!("{p}.cross_attn.attention_weights"), aw);
            store.insert_linear(format!("{p}.cross_attn.value_proj"), init.linear(d, d, true)?);
            store.insert_linear(format!("{p}.cross_attn.output_proj"), init.linear(d, d, true)?);
            add_ffn(&mut store, &mut init, &format!("{p}.ffn"), d, c.ffn_dim)?;
        }

        store.insert_linear("bbox_head.layers.0", init.linear(d, d, true)?);
        store.insert_linear("bbox_head.layers.1", init.linear(d, d, true)?);
        let mut last = init.linear(d, 4, true)?;
        last.weight = Param::frozen(init.constant(&[4, d], 0.0)?);
        last.bias = Some(Param::frozen(init.constant(&[4], 0.0)?));
        store.insert_linear("bbox_head.layers.2", last);
        let prior = -((1.0 - LOGIT_PRIOR) / LOGIT_PRIOR).ln();
        store.insert_tensor("logit_bias", Param::frozen(init.constant(&[1], prior)?));

        Ok(Self { config, vocab, store })
    }

    /// The adapter sites used for fine-tuning: feature-enhancer cross-attention
    /// and feed-forward layers, every decoder layer's sampling offsets,
    /// attention weights, projections and text cross-attention, the text
    /// encoder's self-attention output projection and feed-forward layers, and
    /// the text-to-image feature bridge. The box head trains fully.
    pub fn default_plan(&self) -> InjectionPlan {
        let c = &self.config;
        let mut targets: Vec<String> = vec!["text.self_attn.out".into(), "feat_map".into()];
        targets.extend(ffn_names("text.ffn"));
        for l in 0..c.enhancer_layers {
            let p = format!("enhancer.layers.{l}");
            targets.extend(attention_names(&format!("{p}.i2t")));
            targets.extend(attention_names(&format!("{p}.t2i")));
            targets.extend(ffn_names(&format!("{p}.img_ffn")));
            targets.extend(ffn_names(&format!("{p}.text_ffn")));
        }
        for l in 0..c.decoder_layers {
            let p = format!("decoder.layers.{l}");
            for s in ["sampling_offsets", "attention_weights", "value_proj", "output_proj"] {
                targets.push(format!("{p}.cross_attn.{s}"));
            }
            targets.extend(attention_names(&format!("{p}.ca_text")));
        }
        InjectionPlan::new(targets, ["bbox_head"])
    }

    pub fn tokenize(&self, text: &str) -> Result<PromptTokens> {
        self.vocab.tokenize(text)
    }

    fn lin(&self, name: &str) -> &Linear {
        self.store.linear(name)
    }

    fn attend(&self, prefix: &str, q_in: &Tensor, k_in: &Tensor, v_in: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, d) = q_in.dims3()?;
        let lk = k_in.dims()[1];
        let h = self.config.heads;
        let dh = d / h;
        let split = |x: Tensor, l: usize| -> Result<Tensor> { Ok(x.reshape((b, l, h, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.lin(&format!("{prefix}.q")).forward(q_in)?, lq)?;
        let k = split(self.lin(&format!("{prefix}.k")).forward(k_in)?, lk)?;
        let v = split(self.lin(&format!("{prefix}.v")).forward(v_in)?, lk)?;
        let mut s = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(m) = key_mask {
            s = s.broadcast_add(m)?;
        }
        let a = candle_nn::ops::softmax(&s, D::Minus1)?;
        let o = a.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, d))?;
        self.lin(&format!("{prefix}.out")).forward(&o)
    }

    fn ffn(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let h = self.lin(&format!("{prefix}.fc1")).forward(x)?.gelu()?;
        self.lin(&format!("{prefix}.fc2")).forward(&h)
    }

    fn bbox_delta(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.lin("bbox_head.layers.0").forward(x)?.relu()?;
        let h = self.lin("bbox_head.layers.1").forward(&h)?.relu()?;
        self.lin("bbox_head.layers.2").forward(&h)
    }

    fn contrast(&self, q: &Tensor, text: &Tensor) -> Result<Tensor> {
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        let l = (q.matmul(&text.transpose(1, 2)?.contiguous()?)? * scale)?;
        Ok(l.broadcast_add(self.store.tensor("logit_bias"))?)
    }

    /// Image attention at a few learned sampling locations around each
    /// query's reference box, with bilinear interpolation over the patch grid.
    fn sampled_attention(&self, prefix: &str, query: &Tensor, refs: &Tensor, value_src: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, n, d) = query.dims3()?;
        let (h, p, g) = (c.heads, c.points, c.grid());
        let dh = d / h;
        let off = self
            .lin(&format!("{prefix}.sampling_offsets"))
            .forward(query)?
            .reshape((b, n, h, p, 2))?;
        let aw = self
            .lin(&format!("{prefix}.attention_weights"))
            .forward(query)?
            .reshape((b, n, h, p))?;
        let aw = candle_nn::ops::softmax(&aw, D::Minus1)?;
        let xy = refs.narrow(2, 0, 2)?.reshape((b, n, 1, 1, 2))?;
        let wh = refs.narrow(2, 2, 2)?.reshape((b, n, 1, 1, 2))?;
        let loc = xy.broadcast_add(&(off.broadcast_mul(&wh)? * (0.5 / p as f64))?)?;
        let centers = Tensor::arange(0u32, g as u32, query.device())?.to_dtype(query.dtype())?;
        let tent = |axis: usize| -> Result<Tensor> {
            let pix = ((loc.narrow(4, axis, 1)? * g as f64)? - 0.5)?;
            let dist = pix.broadcast_sub(&centers)?.abs()?;
            Ok((dist.ones_like()? - dist)?.relu()?)
        };
        let wx = tent(0)?.unsqueeze(4)?; // [b,n,h,p,1,g]
        let wy = tent(1)?.unsqueeze(5)?; // [b,n,h,p,g,1]
        let kernel = wy.broadcast_mul(&wx)?.reshape((b, n, h, p, g * g))?;
        let kernel = kernel.broadcast_mul(&aw.unsqueeze(4)?)?.sum(3)?; // [b,n,h,L]
        let kernel = kernel.transpose(1, 2)?.contiguous()?; // [b,h,n,L]
        let v = self
            .lin(&format!("{prefix}.value_proj"))
            .forward(value_src)?
            .reshape((b, g * g, h, dh))?
            .transpose(1, 2)?
            .contiguous()?;
        let o = kernel.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.lin(&format!("{prefix}.output_proj")).forward(&o)
    }

    fn patches(&self, images: &[&GrayImage]) -> Result<Tensor> {
        let c = &self.config;
        let (g, p) = (c.grid(), c.patch);
        let mut v = Vec::with_capacity(images.len() * c.canvas * c.canvas);
        for img in images {
            if img.shape() != (c.canvas, c.canvas) {
                return Err(Error::Dimension(format!(
                    "toy detector expects {0}×{0} images, got {1}×{2}",
                    c.canvas,
                    img.height(),
                    img.width()
                )));
            }
            for gi in 0..g {
                for gj in 0..g {
                    for r in 0..p {
                        for col in 0..p {
                            v.push((img.get(gi * p + r, gj * p + col) - 0.5) * 4.0);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(v, (images.len(), g * g, p * p), &self.store.device)?.to_dtype(self.store.dtype)?)
    }

    /// Batched forward pass.
    pub fn forward(&self, images: &[&GrayImage], prompts: &[&PromptTokens]) -> Result<ForwardOutput> {
        if images.len() != prompts.len() || images.is_empty() {
            return Err(Error::Dimension(format!(
                "{} images but {} prompts",
                images.len(),
                prompts.len()
            )));
        }
        let c = &self.config;
        let dev = &self.store.device;
        let dtype = self.store.dtype;
        let bsz = images.len();

        let x = self.patches(images)?;
        let h = self.lin("patch_embed.fc1").forward(&x)?.gelu()?;
        let img = self.lin("patch_embed.fc2").forward(&h)?;
        let mut img = layer_norm(&img.broadcast_add(self.store.tensor("patch_embed.pos"))?)?;

        let token_lens: Vec<usize> = prompts.iter().map(|p| p.len().min(c.max_text_len)).collect();
        let t = *token_lens.iter().max().expect("nonempty batch");
        let mut ids = Vec::with_capacity(bsz * t);
        let mut mask = Vec::with_capacity(bsz * t);
        for (p, &len) in prompts.iter().zip(&token_lens) {
            for k in 0..t {
                ids.push(if k < len { p.ids[k] } else { PAD_ID });
                mask.push(if k < len { 0.0 } else { MASKED });
            }
        }
        let ids = Tensor::from_vec(ids, bsz * t, dev)?;
        let key_mask = Tensor::from_vec(mask, (bsz, 1, 1, t), dev)?.to_dtype(dtype)?;
        let text = self.store.tensor("text.embed").index_select(&ids, 0)?.reshape((bsz, t, c.dim))?;
        let text = layer_norm(&text.broadcast_add(&self.store.tensor("text.pos").narrow(0, 0, t)?)?)?;
        let text = layer_norm(&(&text + self.attend("text.self_attn", &text, &text, &text, Some(&key_mask))?)?)?;
        let text = layer_norm(&(&text + self.ffn("text.ffn", &text)?)?)?;
        let mut text = self.lin("feat_map").forward(&text)?;

        for l in 0..c.enhancer_layers {
            let p = format!("enhancer.layers.{l}");
            img = layer_norm(&(&img + self.attend(&format!("{p}.img_self_attn"), &img, &img, &img, None)?)?)?;
            let i2t = self.attend(&format!("{p}.i2t"), &img, &text, &text, Some(&key_mask))?;
            let t2i = self.attend(&format!("{p}.t2i"), &text, &img, &img, None)?;
            img = layer_norm(&(&img + i2t)?)?;
            text = layer_norm(&(&text + t2i)?)?;
            img = layer_norm(&(&img + self.ffn(&format!("{p}.img_ffn"), &img)?)?)?;
            text = layer_norm(&(&text + self.ffn(&format!("{p}.text_ffn"), &text)?)?)?;
        }

        // language-guided query selection
        let enc_logits = self.contrast(&img, &text)?; // [b, L, t]
        let host: Vec<Vec<Vec<f64>>> = enc_logits.to_dtype(DType::F64)?.to_vec3()?;
        let lcount = c.num_patches();
        let g = c.grid();
        let mut flat_idx = Vec::with_capacity(bsz * c.queries);
        let mut refs = Vec::with_capacity(bsz * c.queries * 4);
        for (bi, rows) in host.iter().enumerate() {
            let mut order: Vec<(usize, f64)> = rows
                .iter()
                .map(|r| r[..token_lens[bi]].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .enumerate()
                .collect();
            order.sort_by(|a, b| b.1.total_cmp(&a.1));
            for &(k, _) in order.iter().take(c.queries) {
                flat_idx.push((bi * lcount + k) as u32);
                refs.push(((k % g) as f64 + 0.5) / g as f64);
                refs.push(((k / g) as f64 + 0.5) / g as f64);
                refs.push(c.init_box_size);
                refs.push(c.init_box_size);
            }
        }
        let flat_idx = Tensor::from_vec(flat_idx, bsz * c.queries, dev)?;
        let selected = img
            .reshape((bsz * lcount, c.dim))?
            .index_select(&flat_idx, 0)?
            .reshape((bsz, c.queries, c.dim))?;
        let mut refs = Tensor::from_vec(refs, (bsz, c.queries, 4), dev)?.to_dtype(dtype)?;
        let mut q = selected;
        let mut last = None;
        for l in 0..c.decoder_layers {
            let p = format!("decoder.layers.{l}");
            let pos = self.lin("decoder.ref_point_head").forward(&refs)?;
            let qp = (&q + &pos)?;
            q = layer_norm(&(&q + self.attend(&format!("{p}.self_attn"), &qp, &qp, &q, None)?)?)?;
            let qp = (&q + &pos)?;
            q = layer_norm(&(&q + self.attend(&format!("{p}.ca_text"), &qp, &text, &text, Some(&key_mask))?)?)?;
            let qp = (&q + &pos)?;
            q = layer_norm(&(&q + self.sampled_attention(&format!("{p}.cross_attn"), &qp, &refs, &img)?)?)?;
            q = layer_norm(&(&q + self.ffn(&format!("{p}.ffn"), &q)?)?)?;
            let boxes = candle_nn::ops::sigmoid(&(inverse_sigmoid(&refs)? + self.bbox_delta(&q)?)?)?;
            let logits = self.contrast(&q, &text)?;
            refs = boxes.detach();
            last = Some((boxes, logits));
        }
        let (boxes, logits) = last.expect("at least one decoder layer");
        Ok(ForwardOutput {
            boxes,
            logits,
            token_lens,
        })
    }

    /// Final-layer output for a single image.
    pub fn detect_tokens(&self, image: &GrayImage, prompt: &PromptTokens) -> Result<DetectionOutput> {
        let out = self.forward(&[image], &[prompt])?;
        let (boxes, logits) = out.item(0)?;
        DetectionOutput::from_tensors(&boxes, &logits, prompt.text.clone())
    }
}

fn add_attention(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize) -> Result<()> {
    for name in attention_names(prefix) {
        store.insert_linear(name, init.linear(d, d, true)?);
    }
    Ok(())
}

fn add_ffn(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize, hidden: usize) -> Result<()> {
    let [fc1, fc2] = ffn_names(prefix);
    store.insert_linear(fc1, init.linear(d, hidden, true)?);
    store.insert_linear(fc2, init.linear(hidden, d, true)?);
    Ok(())
}

impl Detector for ToyDetector {
    fn name(&self) -> String {
        "toy".into()
    }

    fn canvas(&self) -> Option<(usize, usize)> {
        Some((self.config.canvas, self.config.canvas))
    }

    fn detect(&self, image: &GrayImage, prompt: &str) -> Result<DetectionOutput> {
        let tokens = self.tokenize(prompt)?;
        self.detect_tokens(image, &tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{apply_plan, Audit, Category, DEFAULT_ALPHA, DEFAULT_RANK};

    fn image(c: usize, seed: u32) -> GrayImage {
        GrayImage::from_fn(c, c, |r, col| (((r * 7 + col * 13) as u32 ^ seed) % 17) as f32 / 17.0)
    }

    #[test]
    fn output_shapes_and_determinism() {
        let det = ToyDetector::new(ToyDetectorConfig::default(), 3).unwrap();
        let img = image(128, 1);
        let a = det.detect(&img, "bright lesion").unwrap();
        let b = det.detect(&img, "bright lesion").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_queries(), 10);
        assert_eq!(a.num_tokens(), 2);
        for bx in &a.boxes {
            assert!(bx.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            assert!(bx[2] > 0.0 && bx[3] > 0.0);
        }
        assert!(a.logits.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_size_rejected() {
        let det = ToyDetector::new(ToyDetectorConfig::default(), 3).unwrap();
        assert!(matches!(det.detect(&image(64, 1), "bright lesion"), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_matches_single() {
        let det = ToyDetector::new(ToyDetectorConfig::default(), 4).unwrap();
        let (i1, i2) = (image(128, 1), image(128, 5));
        let (p1, p2) = (det.tokenize("bright lesion").unwrap(), det.tokenize("the dark round cyst").unwrap());
        let batch = det.forward(&[&i1, &i2], &[&p1, &p2]).unwrap();
        for (k, (img, p)) in [(&i1, &p1), (&i2, &p2)].into_iter().enumerate() {
            let single = det.detect_tokens(img, p).unwrap();
            let (b, l) = batch.item(k).unwrap();
            let from_batch = DetectionOutput::from_tensors(&b, &l, p.text.clone()).unwrap();
            for (x, y) in single.logits.iter().flatten().zip(from_batch.logits.iter().flatten()) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn default_plan_resolves_and_is_small() {
        let mut det = ToyDetector::new(ToyDetectorConfig::default(), 0).unwrap();
        let plan = det.default_plan();
        let audit = apply_plan(&mut det.store, &plan, DEFAULT_RANK, DEFAULT_ALPHA, 1).unwrap();
        for l in 0..2 {
            for s in ["sampling_offsets", "attention_weights", "value_proj", "output_proj"] {
                let name = format!("decoder.layers.{l}.cross_attn.{s}.lora_a");
                assert!(audit.entries.iter().any(|e| e.name == name && e.category == Category::Adapter));
            }
        }
        assert!(audit.trainable_fraction() <= 0.05, "fraction {}", audit.trainable_fraction());
        assert_eq!(Audit::of(&det.store).total(), audit.total());
    }
}
