//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "VMGCKPT\0"
//! version      u32       currently 1
//! header_len   u32       byte length of the JSON header
//! header       JSON      {"kind": str, "meta": any, "tensors": [{"name": str, "shape": [usize]}]}
//! payload      f64 LE    tensors back to back, in header order, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::mlp::{Activation, Dense, Mlp, NUM_LAYERS};
use crate::error::{Result, VmgError};

pub const MAGIC: &[u8; 8] = b"VMGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    step_count: u64,
    config: AdamConfig,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| VmgError::Schema(format!("checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            if payload.len() < n * 8 {
                return Err(bad(&format!("truncated tensor {}", th.name)));
            }
            let data = payload[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[n * 8..];
            tensors.push(Tensor {
                name: th.name,
                shape: th.shape,
                data,
            });
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| VmgError::Schema(format!("checkpoint: missing tensor {name}")))
    }

    pub fn push_mlp(&mut self, prefix: &str, mlp: &Mlp) {
        for (i, layer) in mlp.layers().iter().enumerate() {
            self.tensors.push(Tensor {
                name: format!("{prefix}.layer{i}.weight"),
                shape: vec![layer.out_dim(), layer.in_dim()],
                data: layer.weight.iter().copied().collect(),
            });
            self.tensors.push(Tensor {
                name: format!("{prefix}.layer{i}.bias"),
                shape: vec![layer.out_dim()],
                data: layer.bias.to_vec(),
            });
        }
    }

    pub fn take_mlp(&self, prefix: &str) -> Result<Mlp> {
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        for i in 0..NUM_LAYERS {
            let w = self.tensor(&format!("{prefix}.layer{i}.weight"))?;
            let b = self.tensor(&format!("{prefix}.layer{i}.bias"))?;
            if w.shape.len() != 2 || b.shape.len() != 1 {
                return Err(VmgError::Schema(format!("checkpoint: bad rank for {prefix} layer {i}")));
            }
            let weight = ndarray::Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
                .map_err(|e| VmgError::Schema(e.to_string()))?;
            let activation = if i + 1 == NUM_LAYERS {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Dense {
                weight,
                bias: ndarray::Array1::from(b.data.clone()),
                activation,
            });
        }
        Mlp::from_layers(layers).map_err(|e| VmgError::Schema(format!("checkpoint: {e}")))
    }

    pub fn push_adam(&mut self, prefix: &str, state: &AdamState) {
        self.push_mlp(&format!("{prefix}.adam_m"), &state.first_moment);
        self.push_mlp(&format!("{prefix}.adam_v"), &state.second_moment);
        let meta = AdamMeta {
            step_count: state.step_count,
            config: state.config,
        };
        if let serde_json::Value::Object(map) = &mut self.meta {
            map.insert(
                format!("{prefix}.adam"),
                serde_json::to_value(meta).expect("adam meta serializes"),
            );
        }
    }

    pub fn take_adam(&self, prefix: &str) -> Result<AdamState> {
        let meta = self
            .meta
            .get(format!("{prefix}.adam"))
            .ok_or_else(|| VmgError::Schema(format!("checkpoint: missing {prefix}.adam")))?;
        let meta: AdamMeta = serde_json::from_value(meta.clone())?;
        Ok(AdamState {
            first_moment: self.take_mlp(&format!("{prefix}.adam_m"))?,
            second_moment: self.take_mlp(&format!("{prefix}.adam_v"))?,
            step_count: meta.step_count,
            config: meta.config,
        })
    }

    /// Copy holding only the named network parameters; used for content hashing.
    pub fn without_prefix_containing(&self, needle: &str) -> Checkpoint {
        Checkpoint {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .filter(|t| !t.name.contains(needle))
                .cloned()
                .collect(),
        }
    }
}
