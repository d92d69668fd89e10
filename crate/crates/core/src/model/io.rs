//! Binary parameter files: magic, version, architecture as JSON, free-form
//! provenance JSON, then each named block with its shape and little-endian
//! values.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ArchConfig, FedVIParams, ModelError};
use crate::params::{ParamBlock, ParamSet};
use crate::tensor::Tensor;

pub const PARAMS_MAGIC: &[u8; 4] = b"FVPM";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed parameter file: {0}")]
    Malformed(String),
    #[error("parameter file version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn save_params(params: &FedVIParams, path: &Path) -> Result<(), CheckpointError> {
    save_params_with_meta(params, &serde_json::Value::Null, path)
}

/// Saves parameters with a provenance document (resolved config, seed).
pub fn save_params_with_meta(
    params: &FedVIParams,
    meta: &serde_json::Value,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PARAMS_MAGIC)?;
    put_u32(&mut w, PARAMS_VERSION)?;
    let arch = serde_json::to_vec(&params.arch).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    put_u32(&mut w, arch.len() as u32)?;
    w.write_all(&arch)?;
    let meta = serde_json::to_vec(meta).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    put_u32(&mut w, meta.len() as u32)?;
    w.write_all(&meta)?;
    put_u32(&mut w, params.blocks.len() as u32)?;
    for b in params.blocks.blocks() {
        put_u32(&mut w, b.name.len() as u32)?;
        w.write_all(b.name.as_bytes())?;
        put_u32(&mut w, b.value.shape().len() as u32)?;
        for &d in b.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in b.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Malformed(format!("truncated while reading {what}")),
        _ => CheckpointError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(read_exact::<4>(r, what)?))
}

fn read_vec(r: &mut impl Read, len: usize, limit: u64, what: &str) -> Result<Vec<u8>, CheckpointError> {
    if len as u64 > limit {
        return Err(CheckpointError::Malformed(format!("{what} length {len} exceeds file size")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Malformed(format!("truncated while reading {what}")))?;
    Ok(buf)
}

pub fn load_params(path: &Path) -> Result<FedVIParams, CheckpointError> {
    load_params_with_meta(path).map(|(p, _)| p)
}

pub fn load_params_with_meta(path: &Path) -> Result<(FedVIParams, serde_json::Value), CheckpointError> {
    let file = File::open(path)?;
    let limit = file.metadata()?.len();
    let mut r = BufReader::new(file);
    if &read_exact::<4>(&mut r, "magic")? != PARAMS_MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != PARAMS_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    let n = read_u32(&mut r, "architecture length")? as usize;
    let arch: ArchConfig = serde_json::from_slice(&read_vec(&mut r, n, limit, "architecture")?)
        .map_err(|e| CheckpointError::Malformed(format!("architecture: {e}")))?;
    let n = read_u32(&mut r, "provenance length")? as usize;
    let meta: serde_json::Value = serde_json::from_slice(&read_vec(&mut r, n, limit, "provenance")?)
        .map_err(|e| CheckpointError::Malformed(format!("provenance: {e}")))?;
    let count = read_u32(&mut r, "block count")?;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let n = read_u32(&mut r, "block name length")? as usize;
        let name = String::from_utf8(read_vec(&mut r, n, limit, "block name")?)
            .map_err(|_| CheckpointError::Malformed("block name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r, "rank")? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(CheckpointError::Malformed(format!("{name}: rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut total: u64 = 1;
        for _ in 0..ndim {
            let d = u64::from_le_bytes(read_exact::<8>(&mut r, "shape")?);
            total = total.saturating_mul(d);
            shape.push(d as usize);
        }
        if total.saturating_mul(8) > limit {
            return Err(CheckpointError::Malformed(format!("{name}: implausible shape {shape:?}")));
        }
        let mut data = Vec::with_capacity(total as usize);
        for _ in 0..total {
            data.push(f64::from_le_bytes(read_exact::<8>(&mut r, "values")?));
        }
        let value = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        blocks.push(ParamBlock::new(name, value));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes after last block".into()));
    }
    let set = ParamSet::new(blocks).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((FedVIParams::from_blocks(arch, set)?, meta))
}
