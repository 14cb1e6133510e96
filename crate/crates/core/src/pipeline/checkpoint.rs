//! Binary checkpoints. All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "FVOSCKPT"
//! version    u32      CHECKPOINT_VERSION
//! header     u32 length, then UTF-8 JSON:
//!            {"config": ModelConfig, "optimizer": null | {lr, beta1, beta2, eps, step}, "extra": any}
//! count      u32      number of blobs
//! blob       u32 name length, name bytes, u32 rank, u32 × rank dims, f32 × product(dims)
//! ```
//!
//! Parameters come first in registration order under their own names; with
//! optimizer state they are followed by `adam.m/<name>` and `adam.v/<name>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Model;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FVOSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    extra: Value,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::input(format!("{v} does not fit the checkpoint's u32 fields")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_blob(w: &mut impl Write, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    put_u32(w, t.shape().len())?;
    for &d in t.shape() {
        put_u32(w, d)?;
    }
    let mut bytes = Vec::with_capacity(4 * t.len());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Serialise a model; `extra` is stored verbatim in the header.
pub fn write_checkpoint(mut w: impl Write, model: &Model<f32>, extra: &Value) -> Result<()> {
    let header = Header {
        config: model.cfg.clone(),
        optimizer: model.optimizer.as_ref().map(|o| OptimizerHeader {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
        }),
        extra: extra.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut w, CHECKPOINT_VERSION as usize)?;
    put_u32(&mut w, json.len())?;
    w.write_all(&json)?;
    let n = model.params.len() * if model.optimizer.is_some() { 3 } else { 1 };
    put_u32(&mut w, n)?;
    for p in model.params.iter() {
        put_blob(&mut w, &p.name, &p.value)?;
    }
    if let Some(o) = &model.optimizer {
        for (p, m) in model.params.iter().zip(&o.m) {
            put_blob(&mut w, &format!("adam.m/{}", p.name), m)?;
        }
        for (p, v) in model.params.iter().zip(&o.v) {
            put_blob(&mut w, &format!("adam.v/{}", p.name), v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("checkpoint is truncated")
    } else {
        Error::Io(e)
    }
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::format("checkpoint is truncated"));
    }
    Ok(buf)
}

fn get_blob(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let name_len = get_u32(r)?;
    let name = String::from_utf8(get_bytes(r, name_len)?).map_err(|_| Error::format("blob name is not UTF-8"))?;
    let rank = get_u32(r)?;
    if rank > 8 {
        return Err(Error::format(format!("blob {name} has rank {rank}")));
    }
    let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(format!("blob {name} is too large")))?;
    let bytes = get_bytes(r, len.checked_mul(4).ok_or_else(|| Error::format("blob too large"))?)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, Tensor::new(&shape, data)?))
}

/// Inverse of [`write_checkpoint`]: the model and the stored `extra` value.
pub fn read_checkpoint(mut r: impl Read) -> Result<(Model<f32>, Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = get_u32(&mut r)?;
    let header: Header =
        serde_json::from_slice(&get_bytes(&mut r, header_len)?).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let mut model = Model::<f32>::new(header.config, 0)?;
    let mut opt = header.optimizer.map(|h| {
        let mut o = Adam::new(&model.params, h.lr);
        o.beta1 = h.beta1;
        o.beta2 = h.beta2;
        o.eps = h.eps;
        o.step = h.step;
        o
    });
    let count = get_u32(&mut r)?;
    let expected = model.params.len() * if opt.is_some() { 3 } else { 1 };
    if count != expected {
        return Err(Error::format(format!(
            "checkpoint holds {count} blobs, the configuration needs {expected}"
        )));
    }
    let mut seen = vec![[false; 3]; model.params.len()];
    for _ in 0..count {
        let (name, t) = get_blob(&mut r)?;
        let (slot, base) = match (name.strip_prefix("adam.m/"), name.strip_prefix("adam.v/")) {
            (Some(b), _) => (1, b),
            (_, Some(b)) => (2, b),
            _ => (0, name.as_str()),
        };
        let id = model.params.id(base).ok_or_else(|| Error::format(format!("unknown blob {name}")))?;
        let target = match (slot, opt.as_mut()) {
            (0, _) => model.params.get_mut(id),
            (1, Some(o)) => &mut o.m[id.0],
            (2, Some(o)) => &mut o.v[id.0],
            _ => return Err(Error::format(format!("optimizer blob {name} without optimizer state"))),
        };
        if target.shape() != t.shape() {
            return Err(Error::format(format!(
                "blob {name}: shape {:?}, expected {:?}",
                t.shape(),
                target.shape()
            )));
        }
        if std::mem::replace(&mut seen[id.0][slot], true) {
            return Err(Error::format(format!("duplicate blob {name}")));
        }
        *target = t;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after the last blob"));
    }
    model.optimizer = opt;
    Ok((model, header.extra))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>, extra: &Value) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, extra)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, Value)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
