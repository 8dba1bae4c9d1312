//! Binary parameter container.
//!
//! Layout (little-endian): magic `DMH1`, `u32` version, `u32` entry count,
//! then per entry a `u32` name length, the UTF-8 name, a `u32` rank, `rank`
//! `u32` dims and the `f32` values.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DMH1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

pub fn write_to(store: &ParamStore<f32>, mut out: impl Write) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        let shape = p.tensor.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn save(store: &ParamStore<f32>, path: impl AsRef<Path>) -> io::Result<()> {
    write_to(store, BufWriter::new(File::create(path)?))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Malformed("unexpected end of file".into()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Named tensors in file order.
pub fn read_from(mut r: impl Read) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Malformed("file shorter than the header".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 4096 {
            return Err(CheckpointError::Malformed(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| CheckpointError::Malformed("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| CheckpointError::Malformed(format!("{name}: truncated values")))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    read_from(BufReader::new(File::open(path)?))
}

/// Copies checkpoint values into `store`, which must hold exactly the same
/// names and shapes.
pub fn restore(store: &mut ParamStore<f32>, entries: Vec<(String, Tensor<f32>)>) -> Result<(), CheckpointError> {
    if entries.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} entries for {} parameters",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {name}")))?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: shape {:?} vs {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
