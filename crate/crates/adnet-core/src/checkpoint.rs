//! Checkpoint persistence.
//!
//! File layout: magic `ADNETCKP`, format version (u32 LE), header length
//! (u64 LE), a TOML header (model config, training step, optional optimizer
//! step count, and a tensor directory of name / shape / byte offset), then
//! raw 32-bit little-endian tensor data. Round-trips are bit-exact; every
//! structural fault is rejected with a typed error before any tensor is
//! materialized.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::optim::OptimizerState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADNETCKP";
pub const FORMAT_VERSION: u32 = 1;
/// Prefixes for optimizer moment tensors stored beside the parameters.
const OPT_M_PREFIX: &str = "optim.m.";
const OPT_V_PREFIX: &str = "optim.v.";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Deserialized checkpoint: named tensors plus metadata.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub optimizer_step: Option<u64>,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Checkpoint({:?}, step={}, {} tensors)",
            self.config.kind,
            self.step,
            self.tensors.len()
        )
    }
}

impl Checkpoint {
    pub fn tensors(&self) -> &[(String, Vec<usize>, Vec<f32>)] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    /// Snapshot a model (and optionally its optimizer moments).
    pub fn from_model(
        model: &Model<f32>,
        step: u64,
        optimizer: Option<&OptimizerState<f32>>,
    ) -> Checkpoint {
        let named = model.named_params();
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = named
            .iter()
            .map(|(n, t)| (n.clone(), t.shape(), t.to_vec()))
            .collect();
        let mut optimizer_step = None;
        if let Some(state) = optimizer {
            optimizer_step = Some(state.t);
            for (idx, (name, t)) in named.iter().enumerate() {
                let (m, v) = state.moments(idx);
                tensors.push((format!("{OPT_M_PREFIX}{name}"), t.shape(), m.to_vec()));
                tensors.push((format!("{OPT_V_PREFIX}{name}"), t.shape(), v.to_vec()));
            }
        }
        Checkpoint {
            config: model.config.clone(),
            step,
            optimizer_step,
            tensors,
        }
    }

    /// Rebuild a model from this checkpoint. Every model parameter must be
    /// present with the exact shape; surplus non-optimizer tensors are
    /// rejected.
    pub fn build_model(&self) -> Result<Model<f32>> {
        let model = Model::init(self.config.clone(), 0)?;
        let named = model.named_params();
        let mut used = 0usize;
        for (name, tensor) in &named {
            let (_, shape, data) = self.find(name).ok_or_else(|| Error::Incompatible {
                field: name.clone(),
                message: "parameter missing from checkpoint".into(),
            })?;
            if *shape != tensor.shape() {
                return Err(Error::Incompatible {
                    field: name.clone(),
                    message: format!("shape {:?} != expected {:?}", shape, tensor.shape()),
                });
            }
            tensor.set_data(data.clone())?;
            used += 1;
        }
        let non_opt = self
            .tensors
            .iter()
            .filter(|(n, _, _)| !n.starts_with(OPT_M_PREFIX) && !n.starts_with(OPT_V_PREFIX))
            .count();
        if non_opt != used {
            return Err(Error::Incompatible {
                field: "tensors".into(),
                message: format!("{} unknown tensors in checkpoint", non_opt - used),
            });
        }
        Ok(model)
    }

    /// Restore optimizer moments saved by [`Checkpoint::from_model`].
    pub fn restore_optimizer(&self, model: &Model<f32>, state: &mut OptimizerState<f32>) -> Result<()> {
        let t = self.optimizer_step.ok_or_else(|| Error::Incompatible {
            field: "optimizer_step".into(),
            message: "checkpoint carries no optimizer state".into(),
        })?;
        for (idx, (name, _)) in model.named_params().iter().enumerate() {
            let m = self
                .find(&format!("{OPT_M_PREFIX}{name}"))
                .ok_or_else(|| Error::Incompatible {
                    field: name.clone(),
                    message: "first moment missing".into(),
                })?
                .2
                .clone();
            let v = self
                .find(&format!("{OPT_V_PREFIX}{name}"))
                .ok_or_else(|| Error::Incompatible {
                    field: name.clone(),
                    message: "second moment missing".into(),
                })?
                .2
                .clone();
            state.restore(idx, m, v, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += (data.len() * 4) as u64;
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            optimizer_step: self.optimizer_step,
            tensors: entries,
        };
        let header_toml = toml::to_string(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header_toml.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_toml.len() as u64).to_le_bytes());
        out.extend_from_slice(header_toml.as_bytes());
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a checkpoint from raw bytes. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.into(),
        };
        if bytes.len() < 20 {
            return Err(fail(bytes.len(), "file shorter than fixed preamble"));
        }
        if &bytes[0..8] != MAGIC {
            return Err(fail(0, "bad magic, expected ADNETCKP"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible {
                field: "format_version".into(),
                message: format!("file version {} unsupported (expected {})", version, FORMAT_VERSION),
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end = 20u64
            .checked_add(header_len)
            .ok_or_else(|| fail(12, "header length overflows"))?;
        if header_end > bytes.len() as u64 {
            return Err(fail(20, "header extends past end of file"));
        }
        let header_bytes = &bytes[20..header_end as usize];
        let header_str = std::str::from_utf8(header_bytes).map_err(|e| fail(20 + e.valid_up_to(), "header is not UTF-8"))?;
        let header: Header =
            toml::from_str(header_str).map_err(|e| fail(20, &format!("header parse: {}", e)))?;
        header.config.validate().map_err(|e| Error::Incompatible {
            field: "config".into(),
            message: e.to_string(),
        })?;

        let data = &bytes[header_end as usize..];
        let mut seen = std::collections::HashSet::new();
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            if !seen.insert(entry.name.clone()) {
                return Err(fail(20, &format!("duplicate tensor name {}", entry.name)));
            }
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| fail(20, &format!("shape overflow in {}", entry.name)))?;
            let byte_len = numel
                .checked_mul(4)
                .ok_or_else(|| fail(20, &format!("byte length overflow in {}", entry.name)))?;
            if entry.offset != expected_offset {
                return Err(fail(
                    header_end as usize + entry.offset as usize,
                    &format!("tensor {} offset {} != expected {}", entry.name, entry.offset, expected_offset),
                ));
            }
            let start = entry.offset as usize;
            let end = start
                .checked_add(byte_len)
                .ok_or_else(|| fail(20, "offset overflow"))?;
            if end > data.len() {
                return Err(fail(
                    header_end as usize + data.len(),
                    &format!("tensor {} truncated", entry.name),
                ));
            }
            let mut values = Vec::with_capacity(numel);
            for chunk in data[start..end].chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            tensors.push((entry.name.clone(), entry.shape.clone(), values));
            expected_offset = end as u64;
        }
        if expected_offset != data.len() as u64 {
            return Err(fail(
                header_end as usize + expected_offset as usize,
                "trailing bytes after last tensor",
            ));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            optimizer_step: header.optimizer_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Environment(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_bytes(&bytes)
    }
}

/// Load a model, verifying the stored config equals `expected` field by field.
pub fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<Model<f32>> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(field) = expected.diff_field(&ckpt.config) {
        return Err(Error::Incompatible {
            field: field.into(),
            message: format!(
                "checkpoint config differs from expected config on `{}`",
                field
            ),
        });
    }
    ckpt.build_model()
}

/// Save a model checkpoint to `path`.
pub fn save_model(
    model: &Model<f32>,
    step: u64,
    optimizer: Option<&OptimizerState<f32>>,
    path: &Path,
) -> Result<()> {
    Checkpoint::from_model(model, step, optimizer).save(path)
}

/// Convenience: load whatever model the checkpoint declares.
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    Checkpoint::load(path)?.build_model()
}

impl Model<f32> {
    /// Forward output on a fixed probe tensor; used to compare models cheaply.
    pub fn probe_signature(&self) -> Result<Vec<f32>> {
        let n = 3 * 16 * 16;
        let data: Vec<f32> = (0..n).map(|i| ((i * 61 % 127) as f32) / 127.0).collect();
        let x = Tensor::constant(data, &[1, 3, 16, 16])?;
        Ok(self.forward_tensor(&x)?.to_vec())
    }
}
