//! Versioned binary checkpoints.
//!
//! ```text
//! magic    8 bytes   "MACRLCK\0"
//! version  u32
//! header   u32 length + UTF-8 `key=value` lines (model config, stage,
//!          step, seed, bank cursor, optimizer step)
//! count    u32
//! blobs    count x { u32 name length, name, u32 rank, rank x u32 dims,
//!                    product(dims) x f32 }
//! ```
//!
//! Integers and floats are little-endian. Blob names carry a group prefix:
//! `params/`, `momentum/`, `bank/keys`, `opt/m/`, `opt/v/`. Blobs are
//! written in name order within each group, so equal checkpoints serialize
//! to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::{RunConfig, Stage, MODEL_KEYS};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::momentum::is_tracked;
use crate::objectives::MemoryBank;
use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MACRLCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("shape mismatch for `{name}`: checkpoint has {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint model `{found}` is incompatible with `{expected}`")]
    Incompatible { found: String, expected: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stage: Stage,
    pub step: u64,
    pub seed: u64,
    pub params: ParamStore<f32>,
    /// Momentum encoder and projector; empty outside pre-training.
    pub momentum: ParamStore<f32>,
    pub bank: Option<MemoryBank<f32>>,
    pub optimizer: OptimizerState<f32>,
}

/// Parameter groups a checkpoint can hold besides the encoder and head.
pub const DROPPABLE: [&str; 5] = ["decoder", "projector", "momentum", "bank", "optimizer"];

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let mut rc = RunConfig::for_stage(self.stage);
        rc.model = self.model.clone();
        for key in MODEL_KEYS {
            header.push_str(&format!("{key}={}\n", rc.get(key).expect("model key")));
        }
        header.push_str(&format!("stage={}\n", self.stage));
        header.push_str(&format!("step={}\n", self.step));
        header.push_str(&format!("seed={}\n", self.seed));
        header.push_str(&format!(
            "bank_cursor={}\n",
            self.bank.as_ref().map_or(0, |b| b.cursor())
        ));
        header.push_str(&format!("opt_step={}\n", self.optimizer.step));

        let mut blobs: Vec<(String, &Tensor<f32>)> = Vec::new();
        group(&mut blobs, "params/", &self.params);
        group(&mut blobs, "momentum/", &self.momentum);
        if let Some(bank) = &self.bank {
            blobs.push(("bank/keys".to_string(), bank.keys()));
        }
        group(&mut blobs, "opt/m/", &self.optimizer.m);
        group(&mut blobs, "opt/v/", &self.optimizer.v);

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, header.as_bytes());
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, t) in blobs {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
        let mut fields = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("header line `{line}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let field = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| CheckpointError::Malformed(format!("header lacks `{k}`")))
        };
        let num = |k: &str| -> std::result::Result<u64, CheckpointError> {
            field(k)?
                .parse()
                .map_err(|_| CheckpointError::Malformed(format!("header `{k}` is not an integer")))
        };
        let stage: Stage = field("stage")?
            .parse()
            .map_err(|e: String| CheckpointError::Malformed(e))?;
        let mut rc = RunConfig::for_stage(stage);
        for key in MODEL_KEYS {
            rc.set(key, field(key)?)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        rc.model
            .validate()
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let model = rc.model;

        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut momentum = ParamStore::new();
        let mut bank_keys = None;
        let mut opt = OptimizerState::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("blob name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or(CheckpointError::Truncated { offset: r.pos })?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?;
            if let Some(p) = name.strip_prefix("params/") {
                params.insert(p, t);
            } else if let Some(p) = name.strip_prefix("momentum/") {
                momentum.insert(p, t);
            } else if name == "bank/keys" {
                bank_keys = Some(t);
            } else if let Some(p) = name.strip_prefix("opt/m/") {
                opt.m.insert(p, t);
            } else if let Some(p) = name.strip_prefix("opt/v/") {
                opt.v.insert(p, t);
            } else {
                return Err(CheckpointError::Malformed(format!("unknown blob `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after the last blob",
                bytes.len() - r.pos
            )));
        }
        opt.step = num("opt_step")?;

        let expected: BTreeMap<String, Vec<usize>> = model.param_shapes().into_iter().collect();
        let check = |name: &str, t: &Tensor<f32>| match expected.get(name) {
            Some(s) if s.as_slice() == t.shape() => Ok(()),
            Some(s) => Err(CheckpointError::Shape {
                name: name.to_string(),
                found: t.shape().to_vec(),
                expected: s.clone(),
            }),
            None => Err(CheckpointError::Malformed(format!(
                "unexpected parameter `{name}`"
            ))),
        };
        for (name, t) in params.iter().chain(opt.m.iter()).chain(opt.v.iter()) {
            check(name, t)?;
        }
        for (name, t) in momentum.iter() {
            if !is_tracked(name) {
                return Err(CheckpointError::Malformed(format!(
                    "`{name}` is not momentum-tracked"
                )));
            }
            check(name, t)?;
        }
        let bank = match bank_keys {
            None => None,
            Some(keys) => {
                if keys.rank() != 2 || keys.shape()[1] != model.proj_dim {
                    return Err(CheckpointError::Shape {
                        name: "bank/keys".into(),
                        found: keys.shape().to_vec(),
                        expected: vec![keys.shape()[0], model.proj_dim],
                    });
                }
                let cursor = num("bank_cursor")? as usize;
                Some(
                    MemoryBank::from_keys(keys, cursor)
                        .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
                )
            }
        };
        Ok(Checkpoint {
            model,
            stage,
            step: num("step")?,
            seed: num("seed")?,
            params,
            momentum,
            bank,
            optimizer: opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// The encoder (and head, when present) for fine-tuning or probing,
    /// plus the names of the groups that were present and discarded.
    pub fn into_backbone(self) -> (ParamStore<f32>, Vec<&'static str>) {
        let mut dropped = Vec::new();
        let has = |prefix: &str| self.params.names().any(|n| n.starts_with(prefix));
        if has("decoder.") {
            dropped.push("decoder");
        }
        if has("projector.") {
            dropped.push("projector");
        }
        if !self.momentum.is_empty() {
            dropped.push("momentum");
        }
        if self.bank.is_some() {
            dropped.push("bank");
        }
        if !self.optimizer.m.is_empty() {
            dropped.push("optimizer");
        }
        let mut params = self.params;
        params.retain(|n| n.starts_with("encoder.") || n.starts_with("head."));
        (params, dropped)
    }

    /// Rejects checkpoints whose encoder cannot serve `model`. Only the
    /// class count and the patch-embedding freeze flag may differ.
    pub fn check_compatible(
        &self,
        model: &ModelConfig,
    ) -> std::result::Result<(), CheckpointError> {
        let norm = |m: &ModelConfig| ModelConfig {
            num_classes: 0,
            freeze_patch_embed: false,
            ..m.clone()
        };
        if norm(&self.model) != norm(model) {
            return Err(CheckpointError::Incompatible {
                found: self.model.to_string(),
                expected: model.to_string(),
            });
        }
        Ok(())
    }
}

fn group<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, store: &'a ParamStore<f32>) {
    out.extend(store.iter().map(|(name, t)| (format!("{prefix}{name}"), t)));
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
