//! Binary checkpoint layout (all integers little-endian u32):
//!
//! ```text
//! "MBXN" | version | meta_len | meta (UTF-8 JSON) | tensor_count |
//!   { name_len | name | rank | dims[rank] | f32 payload } * tensor_count
//! ```
//!
//! Tensors are the network parameters by name, the batch-norm running
//! statistics as `<bn>.running_mean` / `<bn>.running_var`, and optionally
//! the optimizer momentum buffers as `optim.m.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelSet;
use crate::features::FeatureConfig;
use crate::model::{ModelConfig, Network};
use crate::nn::Tensor;
use crate::optim::{GroupState, NovoGrad, OptimConfig};

use super::{io_err, EngineError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBXN";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENTUM_PREFIX: &str = "optim.m.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub labels: LabelSet,
    pub features: FeatureConfig,
    /// Optimizer steps taken when this snapshot was written.
    pub step: u64,
    /// Epoch (0-based) that produced this snapshot, if any.
    pub epoch: Option<u64>,
    pub optimizer: Option<NovoGrad<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    labels: LabelSet,
    features: FeatureConfig,
    step: u64,
    epoch: Option<u64>,
    optimizer: Option<OptimMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimMeta {
    config: OptimConfig,
    groups: Vec<GroupMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupMeta {
    name: String,
    v: Option<f64>,
    step: u64,
}

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Checkpoint {
    pub fn new(network: Network<f32>, labels: LabelSet, features: FeatureConfig) -> Self {
        Self { network, labels, features, step: 0, epoch: None, optimizer: None }
    }

    fn records(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for p in self.network.params() {
            out.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        }
        for (prefix, bn) in self.network.batch_norms() {
            let c = bn.channels();
            out.push((format!("{prefix}.running_mean"), vec![c], bn.running_mean.clone()));
            out.push((format!("{prefix}.running_var"), vec![c], bn.running_var.clone()));
        }
        if let Some(opt) = &self.optimizer {
            for g in &opt.groups {
                out.push((format!("{MOMENTUM_PREFIX}{}", g.name), vec![g.m.len()], g.m.clone()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            model: self.network.config().clone(),
            labels: self.labels.clone(),
            features: self.features.clone(),
            step: self.step,
            epoch: self.epoch,
            optimizer: self.optimizer.as_ref().map(|o| OptimMeta {
                config: o.cfg.clone(),
                groups: o
                    .groups
                    .iter()
                    .map(|g| GroupMeta { name: g.name.clone(), v: g.v, step: g.step })
                    .collect(),
            }),
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint meta serializes");
        let records = self.records();

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put_u32(&mut out, records.len() as u32);
        for (name, shape, data) in records {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len() as u32);
            for d in shape {
                put_u32(&mut out, d as u32);
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(EngineError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("format version")?;
        if version != CHECKPOINT_VERSION {
            return Err(EngineError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let meta_len = r.u32("config length")? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len, "config")?)
            .map_err(|e| EngineError::CorruptConfig(e.to_string()))?;

        let count = r.u32("tensor count")? as usize;
        let mut records = BTreeMap::new();
        for i in 0..count {
            let rec = r.record(i)?;
            if records.contains_key(&rec.name) {
                return Err(EngineError::CorruptTensor(format!("duplicate tensor {}", rec.name)));
            }
            records.insert(rec.name.clone(), rec);
        }
        if r.pos != bytes.len() {
            return Err(EngineError::CorruptTensor(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut network = Network::<f32>::build(&meta.model, 0).map_err(|e| EngineError::CorruptConfig(e.to_string()))?;
        for p in network.params_mut() {
            let rec = take_record(&mut records, &p.name, p.value.shape())?;
            p.value = Tensor::new(&rec.shape, rec.data)?.with_grad();
        }
        for (prefix, bn) in network.batch_norms_mut() {
            let c = [bn.channels()];
            bn.running_mean = take_record(&mut records, &format!("{prefix}.running_mean"), &c)?.data;
            bn.running_var = take_record(&mut records, &format!("{prefix}.running_var"), &c)?.data;
        }
        let optimizer = match meta.optimizer {
            None => None,
            Some(om) => {
                let mut groups = Vec::with_capacity(om.groups.len());
                for g in om.groups {
                    let name = format!("{MOMENTUM_PREFIX}{}", g.name);
                    let rec = records
                        .remove(&name)
                        .ok_or_else(|| EngineError::CorruptTensor(format!("missing tensor {name}")))?;
                    if rec.shape.len() != 1 {
                        return Err(EngineError::CorruptTensor(format!("{name} must be rank 1")));
                    }
                    groups.push(GroupState { name: g.name, m: rec.data, v: g.v, step: g.step });
                }
                Some(NovoGrad { cfg: om.config, groups })
            }
        };
        if let Some(name) = records.keys().next() {
            return Err(EngineError::CorruptTensor(format!("unexpected tensor {name}")));
        }
        Ok(Self { network, labels: meta.labels, features: meta.features, step: meta.step, epoch: meta.epoch, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Names and shapes of every stored tensor, in file order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.records().into_iter().map(|(n, s, _)| (n, s)).collect()
    }
}

fn take_record(records: &mut BTreeMap<String, Record>, name: &str, shape: &[usize]) -> Result<Record, EngineError> {
    let rec = records
        .remove(name)
        .ok_or_else(|| EngineError::CorruptTensor(format!("missing tensor {name}")))?;
    if rec.shape != shape {
        return Err(EngineError::CorruptTensor(format!("{name} has shape {:?}, expected {shape:?}", rec.shape)));
    }
    Ok(rec)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EngineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            EngineError::CorruptTensor(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, EngineError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn record(&mut self, index: usize) -> Result<Record, EngineError> {
        let name_len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(name_len, "tensor name")?)
            .map_err(|_| EngineError::CorruptTensor(format!("tensor {index} name is not UTF-8")))?
            .to_string();
        let rank = self.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u32("tensor dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| EngineError::CorruptTensor(format!("{name}: shape {shape:?} overflows")))?;
        let payload = self.take(numel, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Record { name, shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_params, ModelConfig};

    fn ckpt(cfg: &ModelConfig) -> Checkpoint {
        Checkpoint::new(Network::build(cfg, 11).unwrap(), LabelSet::v2(), FeatureConfig::default())
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let c = ckpt(&ModelConfig::new(1, 1, 8, 35));
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!(back.labels, c.labels);
    }

    #[test]
    fn file_size_is_four_bytes_per_parameter_plus_headers() {
        let cfg = ModelConfig::new(3, 2, 64, 35);
        let c = ckpt(&cfg);
        let bytes = c.to_bytes();
        let bn_stats: usize = c.network.batch_norms().iter().map(|(_, b)| 2 * b.channels()).sum();
        let payload = 4 * (count_params(&cfg) + bn_stats);
        assert!(bytes.len() > payload);
        // headers (config JSON + per-tensor names and dims) stay small
        assert!(bytes.len() - payload < 16 * 1024, "{} header bytes", bytes.len() - payload);
    }

    #[test]
    fn every_truncation_is_detected() {
        let bytes = ckpt(&ModelConfig::new(1, 1, 4, 2)).to_bytes();
        for cut in (4..bytes.len()).step_by(97) {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, EngineError::CorruptTensor(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn header_errors() {
        let mut bytes = ckpt(&ModelConfig::new(1, 1, 4, 2)).to_bytes();
        let mut wrong_version = bytes.clone();
        wrong_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_version),
            Err(EngineError::VersionMismatch { found: 9, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(EngineError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"MB"), Err(EngineError::BadMagic)));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = ckpt(&ModelConfig::new(1, 1, 4, 2)).to_bytes();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(EngineError::CorruptTensor(_))));
    }
}
