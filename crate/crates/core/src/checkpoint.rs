//! `GTCK` binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GTCK" | version u16 | meta_len u32 | meta JSON (meta_len bytes)
//! n_records u32
//! per record: name_len u16 | name | kind u8 | ndim u8 | dims u32 * ndim | f32 data
//! ```
//!
//! Record kind 0 is a trainable parameter, kind 1 a batch-norm buffer
//! (`<layer>.running_mean` / `<layer>.running_var`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureStats};
use crate::model::{BnBuffer, Model, ModelConfig, Param, ParamSet};
use crate::tensor::{RunningStats, Tensor};

const MAGIC: &[u8; 4] = b"GTCK";
pub const VERSION: u16 = 1;

/// Everything besides the tensors that a checkpoint needs to be usable on
/// its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub feature_kind: FeatureKind,
    pub feature_stats: Option<FeatureStats>,
    pub class_names: Vec<String>,
    /// Epoch the weights come from (0 when untrained).
    #[serde(default)]
    pub epoch: usize,
    #[serde(default)]
    pub val_oa: Option<f64>,
    /// Hash of the resolved run configuration that produced the weights.
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            feature_kind: FeatureKind::Mel,
            feature_stats: None,
            class_names: Vec::new(),
            epoch: 0,
            val_oa: None,
            config_hash: String::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Param,
    Buffer,
}

impl RecordKind {
    fn tag(self) -> u8 {
        match self {
            RecordKind::Param => 0,
            RecordKind::Buffer => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(RecordKind::Param),
            1 => Ok(RecordKind::Buffer),
            other => Err(Error::format("checkpoint", format!("unknown record kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub kind: RecordKind,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub records: Vec<Record>,
}

impl Checkpoint {
    /// Snapshot of `model`; `meta.model` is overwritten with its config.
    pub fn from_model(model: &Model<f32>, mut meta: CheckpointMeta) -> Self {
        meta.model = model.config().clone();
        let mut records: Vec<Record> = model
            .params()
            .iter()
            .map(|p| Record {
                name: p.name.clone(),
                kind: RecordKind::Param,
                tensor: p.tensor.clone(),
            })
            .collect();
        for b in model.buffers() {
            for (suffix, v) in [("running_mean", &b.stats.mean), ("running_var", &b.stats.var)] {
                records.push(Record {
                    name: format!("{}.{suffix}", b.name),
                    kind: RecordKind::Buffer,
                    tensor: Tensor::new(&[v.len()], v.clone()).expect("1-D buffer"),
                });
            }
        }
        Self { meta, records }
    }

    /// Rebuilds the model, checking every record against the layout of
    /// `meta.model`.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let params = ParamSet::from_params(
            self.records
                .iter()
                .filter(|r| r.kind == RecordKind::Param)
                .map(|r| Param {
                    name: r.name.clone(),
                    tensor: r.tensor.clone(),
                })
                .collect(),
        )?;
        let buffer = |name: &str| -> Result<Vec<f32>> {
            self.records
                .iter()
                .find(|r| r.kind == RecordKind::Buffer && r.name == name)
                .map(|r| r.tensor.data().to_vec())
                .ok_or_else(|| Error::format("checkpoint", format!("missing buffer {name}")))
        };
        let bn = self
            .meta
            .model
            .bn_layers()
            .into_iter()
            .map(|(name, _)| {
                Ok(BnBuffer {
                    stats: RunningStats {
                        mean: buffer(&format!("{name}.running_mean"))?,
                        var: buffer(&format!("{name}.running_var"))?,
                    },
                    name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_buffers = self.records.iter().filter(|r| r.kind == RecordKind::Buffer).count();
        if n_buffers != 2 * bn.len() {
            return Err(Error::format("checkpoint", format!("{n_buffers} buffer records for {} layers", bn.len())));
        }
        Model::from_parts(self.meta.model.clone(), params, bn)
    }

    /// Number of trainable scalars, counted from the records.
    pub fn param_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.kind == RecordKind::Param)
            .map(|r| r.tensor.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let payload: usize = self.records.iter().map(|r| 8 + r.name.len() + 4 * (r.tensor.ndim() + r.tensor.len())).sum();
        let mut out = Vec::with_capacity(14 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("record name too long: {}", r.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.kind.tag());
            let shape = r.tensor.shape();
            let ndim = u8::try_from(shape.len()).map_err(|_| Error::invalid("tensor rank above 255"))?;
            out.push(ndim);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in r.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = rd.u16()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let meta_len = rd.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(rd.take(meta_len)?)?;
        let n = rd.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = rd.u16()? as usize;
            let name = String::from_utf8(rd.take(name_len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "record name is not UTF-8"))?;
            let kind = RecordKind::from_tag(rd.u8()?)?;
            let ndim = rd.u8()? as usize;
            let shape = (0..ndim).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = rd
                .take(numel.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record {
                name,
                kind,
                tensor: Tensor::new(&shape, data)?,
            });
        }
        if rd.pos != bytes.len() {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(Self { meta, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &Model<f32>, meta: CheckpointMeta) -> Result<()> {
    Checkpoint::from_model(model, meta).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Model<f32>, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model()?;
    Ok((model, ck.meta))
}
