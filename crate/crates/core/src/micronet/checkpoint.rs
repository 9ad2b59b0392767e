//! Binary checkpoints: magic `CFLX`, `u32` version, config block, then every
//! tensor in declared order as `u32 ndim, u32 dims…, f64 values…`, all
//! little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::{ModelParams, NetConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFLX";
pub const VERSION: u32 = 1;

pub fn to_bytes(p: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let c = &p.cfg;
    let w = &mut buf;
    w.write_u32::<LittleEndian>(VERSION).unwrap();
    for v in [c.image_size, c.channels, c.depth, c.embed_dim, c.lora_rank, c.time_dim] {
        w.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    w.write_f64::<LittleEndian>(c.lora_alpha).unwrap();
    w.write_u8(p.lora.is_some() as u8).unwrap();
    for (_, _, t) in p.tensors() {
        w.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    buf
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("truncated file".into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    }
    let cfg = NetConfig {
        image_size: dims[0],
        channels: dims[1],
        depth: dims[2],
        embed_dim: dims[3],
        lora_rank: dims[4],
        time_dim: dims[5],
        lora_alpha: r.read_f64::<LittleEndian>().map_err(truncated)?,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("invalid config block: {e}")))?;
    let has_lora = match r.read_u8().map_err(truncated)? {
        0 => false,
        1 => true,
        b => return Err(Error::Checkpoint(format!("bad lora flag {b}"))),
    };
    let mut p = ModelParams::init(cfg, 0)?;
    if !has_lora {
        p.lora = None;
    }
    for (_, name, t) in p.tensors_mut() {
        let ndim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>().map_err(truncated)? as usize);
        }
        if shape != t.shape() {
            return Err(Error::Shape(format!("{name}: stored shape {shape:?}, expected {:?}", t.shape())));
        }
        for v in t.data_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(truncated)?;
        }
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(p)
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_params(p: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(p))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}

/// Loads and rejects checkpoints whose configuration differs from `cfg`.
pub fn load_params_expecting(path: &Path, cfg: &NetConfig) -> Result<ModelParams> {
    let p = load_params(path)?;
    if &p.cfg != cfg {
        return Err(Error::Shape(format!("checkpoint config {:?} does not match expected {:?}", p.cfg, cfg)));
    }
    Ok(p)
}
