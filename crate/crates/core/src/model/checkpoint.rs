//! Binary checkpoints.
//!
//! Layout: `b"SGNC"`, format version `u32`, header length `u64`, a JSON
//! header, then every tensor's values back to back (little-endian, in the
//! header's dtype). The header records the model config, the task mode, a
//! tensor index and the stage-name map `<stream>.<task>.<stage> -> owner
//! prefix`. On load, tensors of stages whose owner prefix changed since the
//! checkpoint was written are renamed to the current layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::config::{joint_training_wiring, ModelConfig, TaskMode};
use crate::model::net::SgNet;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    task_mode: TaskMode,
    stage_map: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: Value,
}

/// Trained parameters with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub task_mode: TaskMode,
    pub params: ParamStore<T>,
    /// Free-form training metadata (epoch, metrics, train config).
    pub meta: Value,
}

fn stage_rename(name: &str, old: &str, new: &str, stage: &str) -> Option<String> {
    ["whole", "guide", "fuse"].iter().find_map(|branch| {
        let from = format!("{old}.{branch}.{stage}.");
        name.strip_prefix(&from).map(|rest| format!("{new}.{branch}.{stage}.{rest}"))
    })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: ModelConfig, task_mode: TaskMode, params: ParamStore<T>) -> Self {
        Self { model, task_mode, params, meta: Value::Null }
    }

    pub fn net(&self) -> Result<SgNet> {
        SgNet::new(&self.model, &joint_training_wiring(self.task_mode))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = self.net()?;
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.numel();
        }
        let header = Header {
            dtype: T::DTYPE.to_string(),
            model: self.model.clone(),
            task_mode: self.task_mode,
            stage_map: net.stage_map(),
            tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let width = std::mem::size_of::<T>();
        let mut buf = Vec::with_capacity(16 + json.len() + offset * width);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                match width {
                    4 => buf.extend_from_slice(&(v.to_f32().unwrap_or(f32::NAN)).to_le_bytes()),
                    _ => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };
        let data = &bytes[16 + hlen..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if data.len() != total * width {
            return Err(Error::Checkpoint(format!("payload is {} bytes, index needs {}", data.len(), total * width)));
        }
        let read = |i: usize| -> T {
            let b = &data[i * width..(i + 1) * width];
            if width == 4 {
                T::from_f32(f32::from_le_bytes(b.try_into().unwrap())).unwrap()
            } else {
                T::lit(f64::from_le_bytes(b.try_into().unwrap()))
            }
        };

        let current = SgNet::new(&header.model, &joint_training_wiring(header.task_mode))?.stage_map();
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset + n > total {
                return Err(Error::Checkpoint(format!("tensor {} overruns the payload", e.name)));
            }
            let values = (e.offset..e.offset + n).map(read).collect();
            let mut name = e.name.clone();
            for (key, old) in &header.stage_map {
                let Some(new) = current.get(key).filter(|new| *new != old) else { continue };
                let stage = key.rsplit('.').next().unwrap_or_default();
                if let Some(renamed) = stage_rename(&name, old, new, stage) {
                    name = renamed;
                    break;
                }
            }
            params.insert(name, Tensor::from_vec(&e.shape, values)?);
        }
        Ok(Self { model: header.model, task_mode: header.task_mode, params, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Errors with the mismatched keys when `config` cannot run these parameters.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let diff = self.model.architecture_diff(config);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(diff))
        }
    }
}
