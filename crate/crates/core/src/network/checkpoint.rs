//! Checkpoint files: one line of JSON manifest, zero padding to a 16-byte
//! boundary, then a little-endian f32 blob. Tensor offsets are relative to
//! the blob start and 16-byte aligned.

use super::model::{build_lrnnet, Network};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

const FORMAT: &str = "lrnnet-checkpoint";
const ALIGN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the blob.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec_hash: String,
    pub spec: NetworkSpec,
    /// Free-form metadata such as the training iteration.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub extra: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn align(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            let expect: usize = t.shape.iter().product();
            if expect != t.data.len() {
                return Err(ckpt_err(format!("tensor {} has {} values for shape {:?}", t.name, t.data.len(), t.shape)));
            }
            let length = 4 * t.data.len();
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset,
                length,
            });
            offset = align(offset + length);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            spec_hash: self.spec.hash(),
            spec: self.spec.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&manifest).map_err(|e| ckpt_err(e.to_string()))?;
        out.push(b'\n');
        out.resize(align(out.len()), 0);
        let base = out.len();
        for (t, e) in self.tensors.iter().zip(&manifest.tensors) {
            out.resize(base + e.offset, 0);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ckpt_err("missing manifest line"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| ckpt_err(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(ckpt_err(format!("unknown format {:?}", manifest.format)));
        }
        if manifest.spec.hash() != manifest.spec_hash {
            return Err(ckpt_err("embedded spec does not match its hash"));
        }
        let base = align(nl + 1);
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(ckpt_err(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            if e.length != 4 * count || e.offset % ALIGN != 0 {
                return Err(ckpt_err(format!("tensor {} has an inconsistent entry", e.name)));
            }
            let start = base + e.offset;
            let raw = bytes
                .get(start..start + e.length)
                .ok_or_else(|| ckpt_err(format!("tensor {} runs past the end of the file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        Ok(Self {
            spec: manifest.spec,
            extra: manifest.extra,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Parameters in build order, then each norm's running mean and variance.
pub fn network_tensors(net: &Network) -> Vec<NamedTensor> {
    let mut out: Vec<NamedTensor> = net
        .params()
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().dims().to_vec(),
            data: to_f32(p.value.data()),
        })
        .collect();
    for rs in net.running_stats() {
        for (suffix, v) in [("running_mean", &rs.mean), ("running_var", &rs.var)] {
            out.push(NamedTensor {
                name: format!("{}.{suffix}", rs.name),
                shape: vec![v.len()],
                data: to_f32(v),
            });
        }
    }
    out
}

impl Network {
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            spec: self.spec().clone(),
            extra,
            tensors: network_tensors(self),
        }
    }

    /// Rebuilds a network from a checkpoint. When `expected` is given, its
    /// hash must match the one embedded in the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&NetworkSpec>) -> Result<Self> {
        if let Some(spec) = expected {
            if spec.hash() != ckpt.spec.hash() {
                return Err(ckpt_err(format!(
                    "checkpoint was written for model {} ({}), expected model {} ({})",
                    ckpt.spec.variant(),
                    &ckpt.spec.hash()[..12],
                    spec.variant(),
                    &spec.hash()[..12]
                )));
            }
        }
        let mut net = build_lrnnet(&ckpt.spec, 0)?;
        let fetch = |name: &str, len: usize| -> Result<Vec<f64>> {
            let t = ckpt.get(name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
            if t.data.len() != len {
                return Err(ckpt_err(format!("tensor {name} has {} values, expected {len}", t.data.len())));
            }
            Ok(t.data.iter().map(|&x| x as f64).collect())
        };
        for p in net.params_mut() {
            let v = fetch(&p.name, p.value.len())?;
            p.value.data_mut().copy_from_slice(&v);
        }
        for rs in net.running_stats_mut() {
            rs.mean = fetch(&format!("{}.running_mean", rs.name), rs.mean.len())?;
            rs.var = fetch(&format!("{}.running_var", rs.name), rs.var.len())?;
        }
        Ok(net)
    }
}
