//! `.wts` weight files: one JSON manifest line, `\n`, then every tensor as
//! little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::config::UNetConfig;
use crate::network::unet::NetworkWeights;

pub const MAGIC: &str = "WTS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub config: UNetConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(weights: &NetworkWeights) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let all = weights
        .params
        .iter()
        .map(|p| (TensorKind::Param, p))
        .chain(weights.buffers.iter().map(|b| (TensorKind::Buffer, b)));
    for (kind, (name, t)) in all {
        let offset = blob.len();
        for x in &t.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            kind,
            shape: t.shape.clone(),
            dtype: "f64".into(),
            offset,
            len: blob.len() - offset,
        });
    }
    let manifest = Manifest { magic: MAGIC.into(), config: weights.config.clone(), tensors: entries };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkWeights> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format("missing manifest terminator"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(format!("manifest: {e}")))?;
    if manifest.magic != MAGIC {
        return Err(Error::format(format!("bad magic {:?}", manifest.magic)));
    }
    let blob = &bytes[nl + 1..];
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut end = 0;
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if e.len != 8 * n || e.offset + e.len > blob.len() {
            return Err(Error::format(format!("{}: byte range does not match shape {:?}", e.name, e.shape)));
        }
        let data = blob[e.offset..e.offset + e.len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        match e.kind {
            TensorKind::Param => params.push((e.name.clone(), t)),
            TensorKind::Buffer => buffers.push((e.name.clone(), t)),
        }
        end = end.max(e.offset + e.len);
    }
    if end != blob.len() {
        return Err(Error::format(format!("{} trailing bytes after the last tensor", blob.len() - end)));
    }
    let weights = NetworkWeights { config: manifest.config, params, buffers };
    weights.check_layout().map_err(|e| Error::format(e.to_string()))?;
    Ok(weights)
}

pub fn save(path: &Path, weights: &NetworkWeights) -> Result<()> {
    fs::write(path, to_bytes(weights)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetworkWeights> {
    from_bytes(&crate::error::read_file(path)?).map_err(|e| e.at(path))
}
