// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ehrfl-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Aggregation class of a tensor. `Norm` covers normalization scale/offset
/// and running statistics; everything else is `Dense`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Norm,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub tag: Tag,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, tag: Tag, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            tag,
            shape,
            values: vec![0.0; n],
        }
    }

    /// Running statistics are updated by the forward pass, not by gradients.
    pub fn is_statistic(&self) -> bool {
        self.name.ends_with(".running_mean") || self.name.ends_with(".running_var")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Named, tagged model tensors in a fixed order. The flat view concatenates
/// tensors in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.tag, t.shape.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in &self.tensors {
            out.extend_from_slice(&t.values);
        }
        out
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, parameter set has {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut out = self.clone();
        let mut at = 0;
        for t in &mut out.tensors {
            let n = t.values.len();
            t.values.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(out)
    }

    /// Same names, shapes and tags in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.tag == b.tag)
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets have different layouts".into()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other` over trainable tensors only.
    pub fn axpy_trainable(&mut self, alpha: f64, other: &ParamSet) {
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            if t.is_statistic() {
                continue;
            }
            for (x, y) in t.values.iter_mut().zip(&o.values) {
                *x += alpha * y;
            }
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_layout(other)
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.values
                    .iter()
                    .zip(&b.values)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// SHA-256 over names, shapes, tags and value bits; hex-encoded prefix.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex_prefix(&h.finalize())
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            h.update([matches!(t.tag, Tag::Norm) as u8]);
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            tensors: self.tensors.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string(&CheckpointFile {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            tensors: self.tensors.clone(),
        })
        .expect("tensors serialize")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("bad checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unknown checkpoint format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!("unsupported checkpoint version {}", file.version)));
        }
        for t in &file.tensors {
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::Shape(format!("tensor {} has shape {:?} but {} values", t.name, t.shape, t.values.len())));
            }
        }
        Ok(Self { tensors: file.tensors })
    }
}

pub(crate) fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    tensors: Vec<Tensor>,
}
