//! Parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//! `"QBNP"`, version, then until end of file one record per tensor:
//! name length, name bytes (UTF-8), rank, dims, `f32` values row-major.

use std::io::{ErrorKind, Read, Write};

use crate::error::{GradError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QBNP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape().len())?;
        for &d in t.shape() {
            write_u32(&mut w, d)?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GradError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?.ok_or_else(|| GradError::Checkpoint("truncated header".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(GradError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while let Some(name_len) = read_u32(&mut r)? {
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| GradError::Checkpoint("name is not UTF-8".into()))?;
        let rank = expect_u32(&mut r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(expect_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| GradError::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// `None` on a clean end of file.
fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut b[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(GradError::Checkpoint("truncated record".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn expect_u32<R: Read>(r: &mut R) -> Result<u32> {
    read_u32(r)?.ok_or_else(|| GradError::Checkpoint("truncated record".into()))
}
