//! Versioned binary checkpoint format for named tensors.
//!
//! Layout: magic, format version, UTF-8 metadata blob, then each tensor as
//! (name, trainable flag, dims, little-endian f64 data).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LCADTNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint format version {found} (expected {expected})")]
    BadVersion { path: String, found: u32, expected: u32 },
    #[error("{path}: corrupt checkpoint: {detail}")]
    Corrupt { path: String, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io { path: path.display().to_string(), source }
}

pub struct LoadedCheckpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor, bool)>,
}

impl LoadedCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, t, _)| t)
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, metadata: &str) -> Result<(), StoreError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| io_err(path, e);
    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(werr)?;
    let meta = metadata.as_bytes();
    w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(werr)?;
    w.write_all(meta).map_err(werr)?;
    w.write_all(&(store.len() as u64).to_le_bytes()).map_err(werr)?;
    for (_, entry) in store.iter() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(werr)?;
        w.write_all(name).map_err(werr)?;
        w.write_all(&[entry.trainable as u8]).map_err(werr)?;
        let shape = entry.value.shape();
        w.write_all(&[shape.len() as u8]).map_err(werr)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(werr)?;
        }
        for &v in entry.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, StoreError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let rerr = |e| io_err(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic { path: path.display().to_string() });
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(rerr)?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(StoreError::BadVersion {
            path: path.display().to_string(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(rerr)?;
    let meta_len = u64::from_le_bytes(u64b) as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(rerr)?;
    let metadata = String::from_utf8(meta).map_err(|_| StoreError::Corrupt {
        path: path.display().to_string(),
        detail: "metadata is not UTF-8".into(),
    })?;
    r.read_exact(&mut u64b).map_err(rerr)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b).map_err(rerr)?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(rerr)?;
        let name = String::from_utf8(name).map_err(|_| StoreError::Corrupt {
            path: path.display().to_string(),
            detail: "tensor name is not UTF-8".into(),
        })?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(rerr)?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(rerr)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            r.read_exact(&mut u64b).map_err(rerr)?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut f64b = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut f64b).map_err(rerr)?;
            *v = f64::from_le_bytes(f64b);
        }
        tensors.push((name, Tensor::from_vec(shape, data), flag[0] != 0));
    }
    Ok(LoadedCheckpoint { metadata, tensors })
}

/// Overwrite store values from a checkpoint; every checkpoint tensor must
/// match an existing param of the same shape.
pub fn restore_into(store: &mut ParamStore, ckpt: &LoadedCheckpoint, path: &Path) -> Result<(), StoreError> {
    for (name, tensor, _) in &ckpt.tensors {
        let id = store.id_of(name).ok_or_else(|| StoreError::Corrupt {
            path: path.display().to_string(),
            detail: format!("checkpoint tensor {name} has no matching parameter"),
        })?;
        if store.get(id).shape() != tensor.shape() {
            return Err(StoreError::Corrupt {
                path: path.display().to_string(),
                detail: format!("shape mismatch for {name}"),
            });
        }
        store.set(id, tensor.clone());
    }
    Ok(())
}
