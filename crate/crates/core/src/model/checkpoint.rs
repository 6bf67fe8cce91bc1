//! Checkpoint directories: `manifest.json`, `params.bin` and optionally `optim.bin`.
//!
//! Tensor files start with the 8-byte magic `DVBFTNS1`, a little-endian `u32`
//! tensor count, then per tensor a `u32` name length, the UTF-8 name, a `u32`
//! rank and `rank` `u64` dimensions. All values follow as little-endian `f64`
//! in index order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::autodiff::Tensor;
use crate::environments::EnvKind;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DVBFTNS1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub env: EnvKind,
    pub config: ModelConfig,
    /// Completed gradient updates.
    pub step: u64,
    /// Inverse temperature in effect at `step`.
    pub c: f64,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let numel: usize = tensors.values().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(16 + 8 * numel + 64 * tensors.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: format!("truncated at byte {} (need {n} more)", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(buf: &[u8], path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let count = r.u32()? as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(bad(format!("tensor `{name}` has invalid shape {shape:?}")));
        }
        index.push((name, shape));
    }
    let mut out = BTreeMap::new();
    for (name, shape) in index {
        let n: usize = shape.iter().product();
        let bytes = r.take(8 * n)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(shape, data));
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::write(path, encode_tensors(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&buf, path)
}

/// Writes `model` into `dir`, creating it if needed. Files are written to
/// temporary names first so an interrupted save keeps the previous checkpoint.
pub fn save(dir: &Path, model: &Model, env: EnvKind, step: u64, c: f64, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        env,
        config: model.config.clone(),
        step,
        c,
        seed,
        tensors: model
            .params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let params_tmp = dir.join("params.bin.tmp");
    write_tensors(&params_tmp, model.params.as_map())?;
    let manifest_tmp = dir.join("manifest.json.tmp");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_tmp, json).map_err(|e| Error::io(&manifest_tmp, e))?;
    let params_path = dir.join("params.bin");
    fs::rename(&params_tmp, &params_path).map_err(|e| Error::io(&params_path, e))?;
    let manifest_path = dir.join("manifest.json");
    fs::rename(&manifest_tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            detail: format!("unsupported format version {}", m.format_version),
        });
    }
    Ok(m)
}

/// Loads a checkpoint and checks the tensors against the manifest index.
pub fn load(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join("params.bin");
    let tensors = read_tensors(&path)?;
    let listed: Vec<(&str, &[usize])> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice()))
        .collect();
    let found: Vec<(&str, &[usize])> = tensors.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
    if listed != found {
        return Err(Error::Format {
            path,
            detail: "tensor index does not match manifest".into(),
        });
    }
    let expected = manifest.config.init_params(&mut crate::stream_rng(0, 0));
    for (name, t) in expected.iter() {
        match tensors.get(name) {
            Some(x) if x.shape() == t.shape() => {}
            _ => {
                return Err(Error::Format {
                    path,
                    detail: format!("parameter `{name}` is missing or has the wrong shape"),
                })
            }
        }
    }
    let model = Model {
        config: manifest.config.clone(),
        params: Params::from_map(tensors),
    };
    Ok((model, manifest))
}
