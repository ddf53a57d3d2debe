//! Binary checkpoints: model weights, batch-norm statistics and optimizer
//! state.
//!
//! Layout: 8-byte magic, u32 version, u64 manifest length, JSON manifest,
//! little-endian f32 blobs in manifest order, CRC32 of everything before it.

use std::path::Path;

use catt_tensor::{AdamW, AdamWConfig, RunningStats};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};

const MAGIC: &[u8; 8] = b"CATTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerManifest {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NormEntry {
    name: String,
    channels: usize,
    has_running: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    optimizer: OptimizerManifest,
    params: Vec<ParamEntry>,
    norms: Vec<NormEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: AdamW,
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model<f32>, optimizer: &AdamW) -> Result<Vec<u8>> {
    let c = optimizer.config;
    let manifest = Manifest {
        config: model.config.clone(),
        optimizer: OptimizerManifest {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            step: optimizer.step,
        },
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        norms: model
            .batch_norms()
            .iter()
            .map(|n| NormEntry {
                name: n.name.clone(),
                channels: n.channels,
                has_running: n.running.is_some(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(json.len() + 12 * model.parameter_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        put_f32s(&mut out, p.value.data());
        put_f32s(&mut out, &p.first_moment);
        put_f32s(&mut out, &p.second_moment);
    }
    for n in model.batch_norms() {
        if let Some(r) = &n.running {
            put_f32s(&mut out, &r.mean);
            put_f32s(&mut out, &r.var);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 12 };
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;

    let mut model = build_model::<f32>(&manifest.config)?;
    let names = model.parameter_names();
    let listed: Vec<&str> = manifest.params.iter().map(|p| p.name.as_str()).collect();
    if names != listed {
        return Err(Error::Checkpoint("parameter list does not match the configured architecture".into()));
    }
    for (entry, p) in manifest.params.iter().zip(model.store.iter_mut()) {
        if entry.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        p.value.data_mut().copy_from_slice(&r.f32s(n)?);
        p.first_moment = r.f32s(n)?;
        p.second_moment = r.f32s(n)?;
    }
    let mut norms = model.batch_norms_mut();
    if norms.len() != manifest.norms.len() {
        return Err(Error::Checkpoint("batch-norm layers do not match the architecture".into()));
    }
    for (entry, norm) in manifest.norms.iter().zip(norms.iter_mut()) {
        if entry.name != norm.name || entry.channels != norm.channels {
            return Err(Error::Checkpoint(format!("unexpected batch-norm layer {}", entry.name)));
        }
        norm.running = if entry.has_running {
            Some(RunningStats {
                mean: r.f32s(entry.channels)?,
                var: r.f32s(entry.channels)?,
            })
        } else {
            None
        };
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last blob".into()));
    }
    let o = manifest.optimizer;
    let optimizer = AdamW {
        config: AdamWConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        },
        step: o.step,
    };
    Ok(Checkpoint { model, optimizer })
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, optimizer: &AdamW) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and insists it was trained with the requested variant.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.config.variant != expected.variant {
        return Err(Error::VariantMismatch {
            expected: expected.variant.to_string(),
            found: ck.model.config.variant.to_string(),
        });
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            input_size: 16,
            channels: 4,
            attention_hidden: 8,
            classifier_hidden: 8,
            position_hidden: 8,
            seed: 3,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut model = build_model::<f32>(&small(Variant::Full)).unwrap();
        for (i, n) in model.batch_norms_mut().into_iter().enumerate() {
            n.running = Some(RunningStats {
                mean: vec![i as f32; n.channels],
                var: vec![1.5; n.channels],
            });
        }
        for p in model.store.iter_mut() {
            p.first_moment.iter_mut().for_each(|m| *m = 0.25);
        }
        let opt = AdamW { step: 7, ..AdamW::new(AdamWConfig::default()) };
        let ck = decode_checkpoint(&encode_checkpoint(&model, &opt).unwrap()).unwrap();
        assert_eq!(ck.model.store, model.store);
        assert_eq!(ck.optimizer, opt);
        let stats = |m: &Model<f32>| m.batch_norms().iter().map(|n| n.running.clone().unwrap().mean).collect::<Vec<_>>();
        assert_eq!(stats(&ck.model), stats(&model));
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let model = build_model::<f32>(&small(Variant::PositionOnly)).unwrap();
        let bytes = encode_checkpoint(&model, &AdamW::new(AdamWConfig::default())).unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checksum { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 9]), Err(Error::Checksum { .. })));
        let mut versioned = bytes;
        versioned[8] = 9;
        assert!(matches!(decode_checkpoint(&versioned), Err(Error::Version(9))));
        assert!(matches!(decode_checkpoint(b"nope"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn variant_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_model::<f32>(&small(Variant::NoAttention)).unwrap();
        save_checkpoint(&path, &model, &AdamW::new(AdamWConfig::default())).unwrap();
        assert!(load_checkpoint_for(&path, &small(Variant::NoAttention)).is_ok());
        let err = load_checkpoint_for(&path, &small(Variant::Full)).unwrap_err();
        assert!(matches!(err, Error::VariantMismatch { .. }));
    }
}
