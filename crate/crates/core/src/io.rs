//! Little-endian binary containers.
//!
//! Every file starts with a four-byte magic and a `u16` version, followed by
//! `u32` shape fields and row-major `f64` payloads:
//!
//! | magic  | contents                                                     |
//! |--------|--------------------------------------------------------------|
//! | `DSPF` | feature sequence: `n u32, d u32, n·d f64`                     |
//! | `DSPE` | perturbation: `d u32, rho f64, psi f64, achieved f64, d f64`  |
//! | `DSPW` | subspace descriptor: `d u32, p u32, d·p f64`                  |
//! | `DSPG` | Gram matrix: `n u32, n·n f64`                                 |
//! | `DSPM` | kernel SVM model (see [`crate::kernel_svm::SvmModel`])        |
//! | `DSPV` | softmax victim: `d u32, K u32, d·K f64, K f64`                |

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{DspError, Result};

pub const VERSION: u16 = 1;

pub const FEATURES_MAGIC: [u8; 4] = *b"DSPF";
pub const PERTURBATION_MAGIC: [u8; 4] = *b"DSPE";
pub const DESCRIPTOR_MAGIC: [u8; 4] = *b"DSPW";
pub const GRAM_MAGIC: [u8; 4] = *b"DSPG";
pub const MODEL_MAGIC: [u8; 4] = *b"DSPM";
pub const VICTIM_MAGIC: [u8; 4] = *b"DSPV";

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: [u8; 4]) -> Self {
        let mut e = Encoder { buf: Vec::new() };
        e.buf.extend_from_slice(&magic);
        e.u16(VERSION);
        e
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: impl IntoIterator<Item = f64>) -> &mut Self {
        for v in vs {
            self.f64(v);
        }
        self
    }

    /// Row-major payload of `m`.
    pub fn matrix(&mut self, m: &DMatrix<f64>) -> &mut Self {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub fn dim_u32(v: usize, what: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| DspError::dim(what, "value fitting in u32", v))
}

#[derive(Debug)]
pub struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Checks the magic and version.
    pub fn new(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(DspError::Truncated { expected: 6, actual: bytes.len() });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if found != magic {
            return Err(DspError::BadMagic { expected: magic, found });
        }
        let mut d = Decoder { bytes, pos: 4 };
        let version = d.u16()?;
        if version != VERSION {
            return Err(DspError::VersionMismatch { expected: VERSION, found: version });
        }
        Ok(d)
    }

    /// Fails with a truncation error unless `count` more bytes are present.
    pub fn require(&self, count: usize) -> Result<()> {
        let expected = self.pos + count;
        if self.bytes.len() < expected {
            return Err(DspError::Truncated { expected, actual: self.bytes.len() });
        }
        Ok(())
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        self.require(N)?;
        let out = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        Ok(out)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        self.require(count.saturating_mul(8))?;
        (0..count).map(|_| self.f64()).collect()
    }

    /// Row-major `rows × cols` payload.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let values = self.f64s(rows.saturating_mul(cols))?;
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(DspError::param(format!(
                "trailing data: {} unread bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(DspError::MissingInput(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(fs::write(path, bytes)?)
}

pub fn encode_gram(gram: &DMatrix<f64>) -> Result<Vec<u8>> {
    let mut e = Encoder::new(GRAM_MAGIC);
    e.u32(dim_u32(gram.nrows(), "gram size")?).matrix(gram);
    Ok(e.finish())
}

pub fn decode_gram(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut d = Decoder::new(bytes, GRAM_MAGIC)?;
    let n = d.usize()?;
    let m = d.matrix(n, n)?;
    d.finish()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_roundtrip() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        assert_eq!(decode_gram(&encode_gram(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = encode_gram(&DMatrix::identity(2, 2)).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_gram(&bad_magic), Err(DspError::BadMagic { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_gram(&bad_version), Err(DspError::VersionMismatch { found: 9, .. })));

        let truncated = &good[..good.len() - 3];
        match decode_gram(truncated) {
            Err(DspError::Truncated { expected, actual }) => {
                assert_eq!(expected, good.len());
                assert_eq!(actual, good.len() - 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
