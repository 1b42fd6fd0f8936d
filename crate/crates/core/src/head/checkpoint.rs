//! "GLRM" model checkpoints.
//!
//! Little-endian layout: magic "GLRM", version u32, head kind u8 (0 linear,
//! 1 glori), the head configuration, a training-provenance block (optimizer
//! hyperparameters recorded for auditability; zeros when untrained), then
//! each parameter tensor as (name length u16, name bytes, rank u8, extents
//! u32 x rank, f64 payload). Tensors appear in the canonical parameter
//! order, so read-then-write is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{GLoRIConfig, GLoRIParams, HeadParams, LinearProbeParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GLRM";
pub const VERSION: u32 = 1;

/// Training metadata embedded in the checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub train_seed: u64,
}

impl Default for TrainProvenance {
    fn default() -> Self {
        TrainProvenance {
            lr: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            weight_decay: 0.0,
            epochs: 0,
            batch_size: 0,
            train_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub head: HeadParams,
    pub provenance: TrainProvenance,
}

pub fn write_checkpoint(path: &Path, head: &HeadParams, provenance: &TrainProvenance) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    match head {
        HeadParams::Linear(p) => {
            out.write_all(&[0u8])?;
            out.write_all(&(p.n_findings as u32).to_le_bytes())?;
            out.write_all(&(p.d_model as u32).to_le_bytes())?;
            out.write_all(&p.seed.to_le_bytes())?;
        }
        HeadParams::Glori(p) => {
            let c = &p.config;
            out.write_all(&[1u8])?;
            out.write_all(&(c.n_findings as u32).to_le_bytes())?;
            out.write_all(&(c.d_model as u32).to_le_bytes())?;
            out.write_all(&c.seed.to_le_bytes())?;
            out.write_all(&(c.d_glori as u32).to_le_bytes())?;
            out.write_all(&(c.heads as u32).to_le_bytes())?;
            out.write_all(&(c.d_key() as u32).to_le_bytes())?;
            out.write_all(&(c.d_value() as u32).to_le_bytes())?;
            out.write_all(&(c.temp_hidden as u32).to_le_bytes())?;
            let flags = (c.use_global as u8) | ((c.use_adaptive_temp as u8) << 1) | ((c.use_pyramid as u8) << 2);
            out.write_all(&[flags])?;
            out.write_all(&(c.pyramid_ks.len() as u8).to_le_bytes())?;
            for &k in &c.pyramid_ks {
                out.write_all(&(k as u32).to_le_bytes())?;
            }
        }
    }
    out.write_all(&provenance.lr.to_le_bytes())?;
    out.write_all(&provenance.beta1.to_le_bytes())?;
    out.write_all(&provenance.beta2.to_le_bytes())?;
    out.write_all(&provenance.eps.to_le_bytes())?;
    out.write_all(&provenance.weight_decay.to_le_bytes())?;
    out.write_all(&provenance.epochs.to_le_bytes())?;
    out.write_all(&provenance.batch_size.to_le_bytes())?;
    out.write_all(&provenance.train_seed.to_le_bytes())?;

    let tensors = head.named_tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(t.rank() as u8).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {:?}, expected \"GLRM\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let kind = read_u8(&mut r)?;
    let n_findings = read_u32(&mut r)? as usize;
    let d_model = read_u32(&mut r)? as usize;
    let seed = read_u64(&mut r)?;

    let mut head = match kind {
        0 => HeadParams::Linear(LinearProbeParams::init(n_findings, d_model, seed)?),
        1 => {
            let d_glori = read_u32(&mut r)? as usize;
            let heads = read_u32(&mut r)? as usize;
            let d_key = read_u32(&mut r)? as usize;
            let d_value = read_u32(&mut r)? as usize;
            let temp_hidden = read_u32(&mut r)? as usize;
            let flags = read_u8(&mut r)?;
            let n_pyr = read_u8(&mut r)? as usize;
            let mut pyramid_ks = Vec::with_capacity(n_pyr);
            for _ in 0..n_pyr {
                pyramid_ks.push(read_u32(&mut r)? as usize);
            }
            let config = GLoRIConfig {
                n_findings,
                d_model,
                d_glori,
                heads,
                temp_hidden,
                pyramid_ks,
                use_global: flags & 1 != 0,
                use_adaptive_temp: flags & 2 != 0,
                use_pyramid: flags & 4 != 0,
                seed,
            };
            config.validate()?;
            if d_key != config.d_key() || d_value != config.d_value() {
                return Err(Error::format(format!(
                    "checkpoint d_key/d_value {d_key}/{d_value} inconsistent with d_glori {} over {} heads",
                    d_glori, heads
                )));
            }
            HeadParams::Glori(Box::new(GLoRIParams::init(config)?))
        }
        other => return Err(Error::format(format!("unknown head kind {other}"))),
    };

    let provenance = TrainProvenance {
        lr: read_f64(&mut r)?,
        beta1: read_f64(&mut r)?,
        beta2: read_f64(&mut r)?,
        eps: read_f64(&mut r)?,
        weight_decay: read_f64(&mut r)?,
        epochs: read_u32(&mut r)?,
        batch_size: read_u32(&mut r)?,
        train_seed: read_u64(&mut r)?,
    };

    let n_tensors = read_u32(&mut r)? as usize;
    let expected: Vec<(String, Vec<usize>)> = head
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if n_tensors != expected.len() {
        return Err(Error::format(format!(
            "checkpoint holds {n_tensors} tensors, head expects {}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(n_tensors);
    for (expect_name, expect_shape) in &expected {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("non-utf8 tensor name"))?;
        if &name != expect_name {
            return Err(Error::format(format!(
                "tensor {name:?} out of order, expected {expect_name:?}"
            )));
        }
        let rank = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        if &shape != expect_shape {
            return Err(Error::format(format!(
                "tensor {name:?} has shape {shape:?}, expected {expect_shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            read_exact(&mut r, &mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        loaded.push(Tensor::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing data after checkpoint payload"));
    }

    for (slot, t) in head.tensors_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(Checkpoint { head, provenance })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format(format!("truncated checkpoint: {e}")))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
