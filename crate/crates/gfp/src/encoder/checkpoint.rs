//! Versioned model checkpoints: magic "GFPM", config echo, then named
//! parameter tensors as row-major 32-bit little-endian floats.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::TensorMut;
use super::{Encoder, EncoderConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GFPM";
const VERSION: u16 = 1;

pub fn save(encoder: &mut Encoder, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    encoder.visit_tensors(true, &mut |name, t| {
        let (shape, data) = match t {
            TensorMut::Param(p) => (p.shape.clone(), p.data.clone()),
            TensorMut::Buffer(b) => (vec![b.len()], b.clone()),
        };
        tensors.push((name, shape, data));
    });
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = encoder.cfg.to_kv();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[shape.len() as u8])?;
        for dim in &shape {
            w.write_all(&(*dim as u32).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Encoder> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg = EncoderConfig::from_kv(
        std::str::from_utf8(&cfg_bytes).map_err(|_| Error::format("config echo is not UTF-8"))?,
    )?;
    let n_tensors = read_u32(&mut r)? as usize;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..n_tensors {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        tensors.insert(name, (shape, data));
    }
    // Parameter init is irrelevant: every tensor is overwritten below.
    let mut encoder = Encoder::new(cfg, 0)?;
    let mut missing = Vec::new();
    encoder.visit_tensors(true, &mut |name, t| {
        let Some((shape, data)) = tensors.remove(&name) else {
            missing.push(name);
            return;
        };
        match t {
            TensorMut::Param(p) => {
                if p.shape != shape {
                    missing.push(format!("{name} (shape mismatch)"));
                } else {
                    p.data.copy_from_slice(&data);
                }
            }
            TensorMut::Buffer(b) => {
                if b.len() != data.len() {
                    missing.push(format!("{name} (length mismatch)"));
                } else {
                    b.copy_from_slice(&data);
                }
            }
        }
    });
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "checkpoint {} is missing or mismatches tensors: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    if !tensors.is_empty() {
        let extra: Vec<_> = tensors.keys().cloned().collect();
        return Err(Error::format(format!(
            "checkpoint {} has unexpected tensors: {}",
            path.display(),
            extra.join(", ")
        )));
    }
    Ok(encoder)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
