//! On-disk dataset container: `manifest.json` plus raw little-endian `f32`
//! arrays `obs.bin`, `ctrl.bin` and `truth.bin`, row-major over
//! (sequence, time, feature).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetMeta, EnvConstants, EnvKind, SequenceBatch};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub env: EnvKind,
    pub split: String,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub obs_dim: usize,
    pub ctrl_dim: usize,
    pub truth_dim: usize,
    pub dt: f64,
    pub seed: u64,
    pub stream: u64,
    pub dtype: String,
    pub byte_order: String,
    pub constants: EnvConstants,
}

fn write_f32(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &x in data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_container(dir: &Path, batch: &SequenceBatch) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        env: batch.meta.env,
        split: batch.meta.split.clone(),
        n_sequences: batch.n,
        seq_len: batch.t,
        obs_dim: batch.obs_dim,
        ctrl_dim: batch.ctrl_dim,
        truth_dim: batch.truth_dim,
        dt: batch.meta.env.dt(),
        seed: batch.meta.seed,
        stream: batch.meta.stream,
        dtype: "f32".into(),
        byte_order: "little".into(),
        constants: batch.meta.env.constants(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_f32(&dir.join("obs.bin"), &batch.obs)?;
    write_f32(&dir.join("ctrl.bin"), &batch.ctrl)?;
    if batch.truth_dim > 0 {
        write_f32(&dir.join("truth.bin"), &batch.truth)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            detail: format!("unsupported format version {}", m.format_version),
        });
    }
    Ok(m)
}

pub fn read_container(dir: &Path) -> Result<SequenceBatch> {
    let m = read_manifest(dir)?;
    let cells = m.n_sequences * m.seq_len;
    let obs = read_f32(&dir.join("obs.bin"), cells * m.obs_dim)?;
    let ctrl = read_f32(&dir.join("ctrl.bin"), cells * m.ctrl_dim)?;
    let truth = if m.truth_dim > 0 {
        read_f32(&dir.join("truth.bin"), cells * m.truth_dim)?
    } else {
        Vec::new()
    };
    Ok(SequenceBatch {
        meta: DatasetMeta {
            env: m.env,
            split: m.split,
            seed: m.seed,
            stream: m.stream,
        },
        n: m.n_sequences,
        t: m.seq_len,
        obs_dim: m.obs_dim,
        ctrl_dim: m.ctrl_dim,
        truth_dim: m.truth_dim,
        obs,
        ctrl,
        truth,
    })
}
