// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint format: a magic line, one JSON header line, then raw
//! little-endian parameter values in the order listed by the header.
//!
//! ```text
//! KNLAB-CKPT 1\n
//! {"version":1,"dtype":"f32","config":{...},"tensors":[{"name":..,"shape":[r,c]},..]}\n
//! <values>
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params, Transformer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "KNLAB-CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorInfo>,
}

/// A checkpoint loaded at its stored precision.
#[derive(Debug, Clone)]
pub enum AnyTransformer {
    F32(Transformer<f32>),
    F64(Transformer<f64>),
}

impl AnyTransformer {
    pub fn to_f64(&self) -> Transformer<f64> {
        match self {
            Self::F32(m) => m.cast(),
            Self::F64(m) => m.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::F32(m) => &m.config,
            Self::F64(m) => &m.config,
        }
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Transformer<T>, path: &Path) -> Result<()> {
    let named = model.params.named();
    let header = CheckpointHeader {
        version: VERSION,
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorInfo { name: name.clone(), shape: [t.nrows(), t.ncols()] })
            .collect(),
    };
    let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
    out.extend(serde_json::to_vec(&header)?);
    out.push(b'\n');
    for (_, t) in &named {
        for &v in t.iter() {
            v.write_le(&mut out);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let nl1 = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing magic line"))?;
    let magic = std::str::from_utf8(&bytes[..nl1]).map_err(|_| bad("magic line is not UTF-8"))?;
    let version: u32 =
        magic.strip_prefix(MAGIC).and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad("not a knlab checkpoint"))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let rest = &bytes[nl1 + 1..];
    let nl2 = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..nl2])?;
    Ok((header, &rest[nl2 + 1..]))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}

fn decode<T: Scalar>(header: &CheckpointHeader, mut data: &[u8]) -> Result<Transformer<T>> {
    let mut model = Transformer::<T>::init(header.config.clone())?;
    let expected = model.params.named().into_iter().map(|(n, t)| (n, [t.nrows(), t.ncols()]));
    for (info, (name, shape)) in header.tensors.iter().zip(expected) {
        if info.name != name || info.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                info.name, info.shape
            )));
        }
    }
    if header.tensors.len() != model.params.tensors().len() {
        return Err(Error::Checkpoint("tensor count mismatch".into()));
    }
    let want = model.params.n_values() * T::BYTES;
    if data.len() != want {
        return Err(Error::Checkpoint(format!("expected {want} bytes of values, found {}", data.len())));
    }
    for t in model.params.tensors_mut() {
        let n = t.len();
        let vals: Vec<T> = data[..n * T::BYTES].chunks_exact(T::BYTES).map(T::read_le).collect();
        *t = Array2::from_shape_vec(t.raw_dim(), vals).expect("shape checked");
        data = &data[n * T::BYTES..];
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<AnyTransformer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, data) = split_header(&bytes)?;
    match header.dtype.as_str() {
        "f32" => decode::<f32>(&header, data).map(AnyTransformer::F32),
        "f64" => decode::<f64>(&header, data).map(AnyTransformer::F64),
        other => Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    }
}

impl<T: Scalar> Params<T> {
    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors().iter().zip(other.tensors()).all(|(a, b)| {
            a.shape() == b.shape()
                && a.iter().zip(b.iter()).all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
        })
    }
}
