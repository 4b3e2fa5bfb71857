//! Self-describing toy-detector checkpoints: a safetensors archive whose
//! header metadata carries the configuration, vocabulary and adapter layout,
//! with one tensor per qualified parameter name.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use indexmap::IndexMap;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::tokenizer::Vocabulary;
use super::toy::{ToyDetector, ToyDetectorConfig};
use crate::error::{Error, Result};
use crate::lora::{apply_plan, InjectionPlan};

const FORMAT: &str = "usground.toy-detector/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterLayout {
    rank: usize,
    alpha: f64,
    plan: InjectionPlan,
}

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn adapter_layout(det: &ToyDetector) -> Option<AdapterLayout> {
    let mut targets = Vec::new();
    let mut rank_alpha = None;
    for (name, l) in det.store.linears() {
        if let Some(a) = &l.lora {
            targets.push(name.to_string());
            rank_alpha = Some((a.rank, a.alpha));
        }
    }
    let (rank, alpha) = rank_alpha?;
    Some(AdapterLayout {
        rank,
        alpha,
        plan: InjectionPlan::new(targets, Vec::<String>::new()),
    })
}

pub fn to_bytes(det: &ToyDetector) -> Result<Vec<u8>> {
    let tensors = det.store.named_tensors()?;
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let shape = t.dims().to_vec();
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        blobs.push((name, shape, bytes));
    }
    let views = blobs
        .iter()
        .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(ck)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("config".to_string(), serde_json::to_string(&det.config)?);
    meta.insert("vocab".to_string(), serde_json::to_string(&det.vocab)?);
    if let Some(layout) = adapter_layout(det) {
        meta.insert("adapters".to_string(), serde_json::to_string(&layout)?);
    }
    safetensors::serialize(views, Some(meta)).map_err(ck)
}

pub fn save(det: &ToyDetector, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, to_bytes(det)?)?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ToyDetector> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| ck("archive has no metadata header"))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(ck(format!("not a toy-detector checkpoint (format {:?})", meta.get("format"))));
    }
    let field = |k: &str| meta.get(k).ok_or_else(|| ck(format!("metadata lacks {k:?}")));
    let config: ToyDetectorConfig = serde_json::from_str(field("config")?)?;
    let mut vocab: Vocabulary = serde_json::from_str(field("vocab")?)?;
    vocab.reindex();
    let mut det = ToyDetector::build(config, vocab, 0, DType::F32, Device::Cpu)?;
    if let Some(a) = meta.get("adapters") {
        let layout: AdapterLayout = serde_json::from_str(a)?;
        apply_plan(&mut det.store, &layout.plan, layout.rank, layout.alpha, 0)?;
    }

    let st = SafeTensors::deserialize(bytes).map_err(ck)?;
    let mut values = IndexMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(ck(format!("{name} is {:?}, expected F32", view.dtype())));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        values.insert(name, Tensor::from_vec(data, view.shape(), &Device::Cpu)?);
    }
    let mut missing = Vec::new();
    det.store.visit(|n, _, _| {
        if !values.contains_key(n) {
            missing.push(n.to_string());
        }
    });
    if !missing.is_empty() {
        return Err(ck(format!("missing parameters: {}", missing.join(", "))));
    }
    det.store.assign(&values)?;
    det.store.set_all_trainable(false)?;
    Ok(det)
}

pub fn load(path: &Path) -> Result<ToyDetector> {
    let bytes = std::fs::read(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detector;
    use crate::imaging::GrayImage;
    use crate::lora::{DEFAULT_ALPHA, DEFAULT_RANK};

    #[test]
    fn roundtrip_preserves_outputs() {
        let mut det = ToyDetector::new(ToyDetectorConfig::micro(), 11).unwrap();
        let plan = det.default_plan();
        apply_plan(&mut det.store, &plan, DEFAULT_RANK.min(2), DEFAULT_ALPHA, 3).unwrap();
        // give the adapters a nonzero delta
        let mut vals = IndexMap::new();
        for (n, v) in det.store.trainable_named() {
            if n.ends_with(".lora_b") {
                vals.insert(n, v.as_tensor().ones_like().unwrap());
            }
        }
        det.store.assign(&vals).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save(&det, &path).unwrap();
        let back = load(&path).unwrap();
        let img = GrayImage::from_fn(32, 32, |r, c| ((r * c) % 9) as f32 / 9.0);
        assert_eq!(det.detect(&img, "dark cyst").unwrap(), back.detect(&img, "dark cyst").unwrap());
        assert_eq!(back.vocab.id("tumour"), det.vocab.id("tumor"));
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
        let empty = safetensors::serialize(Vec::<(String, TensorView)>::new(), None).unwrap();
        assert!(matches!(from_bytes(&empty), Err(Error::Checkpoint(_))));
    }
}
