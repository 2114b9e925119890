//! `QBFA` feature archives.
//!
//! Layout, little-endian: `"QBFA"`, `u32` version, `u32` entry count, then per
//! entry: `u32` id length, id bytes, `u32` frames, `u32` dim, `u8` kind,
//! `frames * dim` `f32` values in time-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{QbeError, Result};
use crate::features::{FeatureKind, FeatureMatrix};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"QBFA";
pub const ARCHIVE_VERSION: u32 = 1;

pub type Entry = (String, FeatureMatrix);

pub fn write_archive<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    put_u32(&mut w, ARCHIVE_VERSION as usize)?;
    put_u32(&mut w, entries.len())?;
    for (id, f) in entries {
        put_u32(&mut w, id.len())?;
        w.write_all(id.as_bytes())?;
        put_u32(&mut w, f.frames())?;
        put_u32(&mut w, f.dim())?;
        w.write_all(&[f.kind as u8])?;
        let mut buf = Vec::with_capacity(f.values().len() * 4);
        for v in f.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(QbeError::Data("not a feature archive (bad magic)".into()));
    }
    let version = get_u32(&mut r)?;
    if version != ARCHIVE_VERSION {
        return Err(QbeError::Data(format!("unsupported archive version {version}")));
    }
    let count = get_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = get_u32(&mut r)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(truncated)?;
        let id = String::from_utf8(id).map_err(|_| QbeError::Data("entry id is not UTF-8".into()))?;
        let frames = get_u32(&mut r)? as usize;
        let dim = get_u32(&mut r)? as usize;
        let mut kind = [0u8];
        r.read_exact(&mut kind).map_err(truncated)?;
        let kind = FeatureKind::from_u8(kind[0])
            .ok_or_else(|| QbeError::Data(format!("entry {id}: unknown kind tag {}", kind[0])))?;
        let mut raw = vec![0u8; frames * dim * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let f = FeatureMatrix::new(frames, dim, values, kind)
            .map_err(|e| QbeError::Data(format!("entry {id}: {e}")))?;
        out.push((id, f));
    }
    Ok(out)
}

pub fn save_archive(path: &Path, entries: &[Entry]) -> Result<()> {
    write_archive(BufWriter::new(File::create(path)?), entries)
}

pub fn load_archive(path: &Path) -> Result<Vec<Entry>> {
    let file = File::open(path)
        .map_err(|e| QbeError::Data(format!("cannot open {}: {e}", path.display())))?;
    read_archive(BufReader::new(file))
}

fn truncated(e: std::io::Error) -> QbeError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        QbeError::Data("truncated feature archive".into())
    } else {
        e.into()
    }
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| QbeError::Data(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(entries in prop::collection::vec(
            ("[a-z0-9#_]{1,10}", 0usize..6, 1usize..5, 0u8..4, -1e6f32..1e6),
            0..6,
        )) {
            let entries: Vec<Entry> = entries
                .into_iter()
                .map(|(id, frames, dim, kind, base)| {
                    let values = (0..frames * dim).map(|i| base + i as f32 * 0.25).collect();
                    (id, FeatureMatrix::new(frames, dim, values, FeatureKind::from_u8(kind).unwrap()).unwrap())
                })
                .collect();
            let mut buf = Vec::new();
            write_archive(&mut buf, &entries).unwrap();
            prop_assert_eq!(read_archive(buf.as_slice()).unwrap(), entries);
        }
    }

    #[test]
    fn rejects_corruption() {
        let f = FeatureMatrix::new(2, 2, vec![1.0; 4], FeatureKind::Bottleneck).unwrap();
        let mut buf = Vec::new();
        write_archive(&mut buf, &[("a".into(), f)]).unwrap();
        assert!(read_archive(&buf[..buf.len() - 2]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_archive(bad.as_slice()).is_err());
        let mut nan = buf.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(read_archive(nan.as_slice()).is_err());
    }
}
