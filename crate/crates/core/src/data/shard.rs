//! Fixed-width binary activation shards.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 8    | magic `HSAEACT1`               |
//! | 8      | 4    | `d` (u32, > 0)                 |
//! | 12     | 8    | `row_count` (u64)              |
//! | 20     | 1    | dtype (0 = f32)                |
//! | 21     | …    | `row_count × d` f32 values     |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{HsaeError, Result};
use crate::numerics::Matrix;

pub const SHARD_MAGIC: &[u8; 8] = b"HSAEACT1";
pub const HEADER_LEN: u64 = 21;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub d: u32,
    pub row_count: u64,
    pub dtype: u8,
}

impl ShardHeader {
    pub fn payload_len(&self) -> u64 {
        self.row_count * self.d as u64 * 4
    }

    pub fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut h = [0u8; HEADER_LEN as usize];
        h[..8].copy_from_slice(SHARD_MAGIC);
        h[8..12].copy_from_slice(&self.d.to_le_bytes());
        h[12..20].copy_from_slice(&self.row_count.to_le_bytes());
        h[20] = self.dtype;
        h
    }

    /// Parses and validates a header given the total file length.
    pub fn decode(bytes: &[u8], file_len: u64) -> Result<Self> {
        if bytes.len() < HEADER_LEN as usize {
            return Err(HsaeError::format(
                bytes.len() as u64,
                format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if &bytes[..8] != SHARD_MAGIC {
            return Err(HsaeError::format(0, "bad magic, expected HSAEACT1"));
        }
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if d == 0 {
            return Err(HsaeError::format(8, "dimension d must be positive"));
        }
        let row_count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let dtype = bytes[20];
        if dtype != DTYPE_F32 {
            return Err(HsaeError::format(20, format!("unknown dtype code {dtype}")));
        }
        let h = ShardHeader { d, row_count, dtype };
        let expected = row_count
            .checked_mul(d as u64 * 4)
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| HsaeError::format(12, "row_count overflows payload size"))?;
        if file_len < expected {
            return Err(HsaeError::format(
                file_len,
                format!("truncated payload: file has {file_len} bytes, header implies {expected}"),
            ));
        }
        if file_len > expected {
            return Err(HsaeError::format(
                expected,
                format!("{} trailing bytes after payload", file_len - expected),
            ));
        }
        Ok(h)
    }
}

pub fn write_shard(path: &Path, rows: &Matrix) -> Result<()> {
    if rows.cols() == 0 {
        return Err(HsaeError::InvalidArgument("shard rows must have d > 0".into()));
    }
    let header = ShardHeader {
        d: rows.cols() as u32,
        row_count: rows.rows() as u64,
        dtype: DTYPE_F32,
    };
    let file = File::create(path).map_err(|e| HsaeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| HsaeError::io(path, e);
    w.write_all(&header.encode()).map_err(io)?;
    for v in rows.as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<ShardHeader> {
    let mut f = File::open(path).map_err(|e| HsaeError::io(path, e))?;
    let len = f.metadata().map_err(|e| HsaeError::io(path, e))?.len();
    let mut buf = Vec::with_capacity(HEADER_LEN as usize);
    (&mut f)
        .take(HEADER_LEN)
        .read_to_end(&mut buf)
        .map_err(|e| HsaeError::io(path, e))?;
    ShardHeader::decode(&buf, len)
}

pub fn read_shard(path: &Path) -> Result<Matrix> {
    let h = read_header(path)?;
    read_rows(path, &h, 0, h.row_count as usize)
}

/// Reads `count` rows starting at row `start` of an already validated shard.
pub fn read_rows(path: &Path, header: &ShardHeader, start: usize, count: usize) -> Result<Matrix> {
    let d = header.d as usize;
    if (start + count) as u64 > header.row_count {
        return Err(HsaeError::InvalidArgument(format!(
            "rows {start}..{} out of range for shard with {} rows",
            start + count,
            header.row_count
        )));
    }
    let mut f = File::open(path).map_err(|e| HsaeError::io(path, e))?;
    f.seek(SeekFrom::Start(HEADER_LEN + (start * d * 4) as u64))
        .map_err(|e| HsaeError::io(path, e))?;
    let mut bytes = vec![0u8; count * d * 4];
    BufReader::new(f)
        .read_exact(&mut bytes)
        .map_err(|e| HsaeError::io(path, e))?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let offset = HEADER_LEN + (start * d * 4) as u64;
    if let Some(p) = data.iter().position(|v| !v.is_finite()) {
        return Err(HsaeError::format(offset + p as u64 * 4, "non-finite value in payload"));
    }
    Matrix::from_vec(count, d, data)
}
