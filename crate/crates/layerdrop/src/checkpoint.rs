//! Versioned binary checkpoints.
//!
//! Layout: magic "LDRP", format version u32, length-prefixed JSON model
//! config, then every parameter tensor in visitor order as (name length u32,
//! name UTF-8, rank u32, dims u64..., values f64 little-endian). Round-trips
//! are bit-exact.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LDRP";
const VERSION: u32 = 1;

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg_json = serde_json::to_vec(&params.config)?;
    w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    let mut io_err: Option<std::io::Error> = None;
    params.visit(&mut |name, t| {
        if io_err.is_some() {
            return;
        }
        let mut write_tensor = || -> std::io::Result<()> {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.values() {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        if let Err(e) = write_tensor() {
            io_err = Some(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {}", what)))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, not a checkpoint",
            magic
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (this build reads {})",
            version, VERSION
        )));
    }
    let cfg_len = read_u32(&mut r, "config length")? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg_bytes, "config")?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    config.validate()?;

    // Shape the container, then overwrite every tensor from the stream.
    let mut params = ModelParams::init(&config, &mut Rng::new(0))?;
    let mut err: Option<Error> = None;
    params.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let mut read_tensor = || -> Result<()> {
            let name_len = read_u32(&mut r, "tensor name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, "tensor name")?;
            let got = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if got != name {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: expected {}, found {}",
                    name, got
                )));
            }
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut r, "dim")? as usize);
            }
            if dims != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has dims {:?}, expected {:?}",
                    name,
                    dims,
                    t.shape()
                )));
            }
            for v in t.values_mut() {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b, "tensor values")?;
                *v = f64::from_le_bytes(b);
            }
            Ok(())
        };
        if let Err(e) = read_tensor() {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(params)
}
