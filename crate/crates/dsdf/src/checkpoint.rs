//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `DSDF`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u32`, UTF-8 name, rank `u32`, extents
//! `u32[rank]`, `f32` payload.

use std::fs;
use std::path::Path;

use dsdf_core::model::ModelConfig;
use dsdf_core::params::ModelParams;
use dsdf_core::Tensor;

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"DSDF";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.count_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated while reading {what} at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ModelParams, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic (not a DSDF checkpoint)".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}, expected {VERSION}"));
    }
    let count = r.u32("tensor count")?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = r.u32(&format!("rank of `{name}`"))? as usize;
        let shape = (0..rank)
            .map(|_| r.u32(&format!("extents of `{name}`")).map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or("tensor size overflow")?, &format!("payload of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
        if params.position(name).is_some() {
            return Err(format!("duplicate tensor `{name}`"));
        }
        params.insert(name, Tensor::new(&shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|message| Error::Checkpoint {
        path: path.into(),
        message,
    })
}

/// Loads a checkpoint and checks every tensor against the geometry `cfg`
/// declares.
pub fn load_for(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let loaded = load(path)?;
    let expected = cfg.init_params(0)?;
    let fail = |message: String| Error::Checkpoint {
        path: path.into(),
        message,
    };
    for (name, t) in expected.iter() {
        let got = loaded
            .get(name)
            .map_err(|_| fail(format!("tensor `{name}` missing (config expects shape {:?})", t.shape())))?;
        if got.shape() != t.shape() {
            return Err(fail(format!(
                "tensor `{name}` has shape {:?} but the config expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = loaded.names().find(|n| expected.position(n).is_none()) {
        return Err(fail(format!("unexpected tensor `{extra}` for this config")));
    }
    // Reorder to declaration order so optimizers and reports line up.
    let mut out = ModelParams::new();
    for (name, _) in expected.iter() {
        out.insert(name, loaded.get(name)?.clone());
    }
    Ok(out)
}
