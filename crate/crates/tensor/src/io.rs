//! TNSR binary format.
//!
//! ```text
//! "TNSR" | u32 version (=1) | u32 rank | u32 dims[rank] | f64 data[...]
//! ```
//! All integers and floats little-endian, data row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format {
        kind: "TNSR",
        msg: msg.into(),
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> TensorError {
    TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tnsr(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TNSR_MAGIC)?;
    w.write_all(&TNSR_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tnsr(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| format_err(e.to_string()))?;
    if &magic != TNSR_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(|e| format_err(e.to_string()))?;
    if version != TNSR_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let rank = read_u32(r).map_err(|e| format_err(e.to_string()))? as usize;
    if rank > 16 {
        return Err(format_err(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r).map_err(|e| format_err(e.to_string()))? as usize);
    }
    let mut bytes = vec![0u8; 8 * numel(&shape)];
    r.read_exact(&mut bytes).map_err(|e| format_err(format!("truncated data: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(data, &shape)
}

pub fn tnsr_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_tnsr(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn save_tnsr(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tnsr_bytes(t)).map_err(|e| io_err(path, e))
}

pub fn load_tnsr(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    read_tnsr(&mut bytes.as_slice())
}
