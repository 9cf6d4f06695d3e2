//! "KIFT" dense matrix files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "KIFT"
//! 4       4     u32 n_rows
//! 8       4     u32 n_cols
//! 12      4     u32 element code: 0 = f32 (feature and embedding files), 1 = f64
//! 16      ...   row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KIFT";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KiftMatrix {
    pub rows: usize,
    pub cols: usize,
    pub payload: Payload,
}

impl KiftMatrix {
    pub fn f32(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_len(rows, cols, data.len())?;
        Ok(KiftMatrix {
            rows,
            cols,
            payload: Payload::F32(data),
        })
    }

    pub fn f64(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows, cols, data.len())?;
        Ok(KiftMatrix {
            rows,
            cols,
            payload: Payload::F64(data),
        })
    }

    pub fn dtype(&self) -> Dtype {
        match self.payload {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
        }
    }

    /// Payload widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows * self.cols * dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&dtype.code().to_le_bytes());
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "truncated header: {} bytes, need {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let rows = word(4) as usize;
        let cols = word(8) as usize;
        let dtype = match word(12) {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(Error::Format(format!("unknown element code {other}"))),
        };
        let body = &bytes[HEADER_LEN..];
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| Error::Format("shape overflow".into()))?;
        if body.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header {rows}x{cols} {} needs {expected}",
                body.len(),
                dtype.name()
            )));
        }
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(KiftMatrix {
            rows,
            cols,
            payload,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn check_len(rows: usize, cols: usize, len: usize) -> Result<()> {
    if rows.checked_mul(cols) != Some(len) {
        return Err(Error::shape("kift", &[rows, cols], &[len]));
    }
    if rows > u32::MAX as usize || cols > u32::MAX as usize {
        return Err(Error::Format("dimension exceeds u32".into()));
    }
    Ok(())
}
