//! TDRF feature files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `TDRF` |
//! | 4 | version, `u32` = 1 |
//! | 1 | modality, 0 text, 1 audio, 2 visual |
//! | 4 | frame count `τ`, `u32` |
//! | 4 | feature dimension `d`, `u32` |
//! | 4·τ·d | values as `f32`, row-major |
//! | τ | mask, one byte per frame, 0 or 1 |
//!
//! Values are held as `f64` in memory, so a file round-trip is exact for
//! every value representable as `f32`.

use std::fs;
use std::path::Path;

use tridira_core::data::FeatureSequence;
use tridira_core::{Matrix, Modality};

use crate::bin_io::{put_u32, Reader};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: [u8; 4] = *b"TDRF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 17;

/// Serializes a sequence. Values outside the `f32` range are rejected.
pub fn encode(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let (rows, cols) = seq.values().shape();
    let (tau, dim) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(t), Ok(d)) => (t, d),
        _ => return Err(validation(format!("shape {rows}x{cols} does not fit the header"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rows * cols + rows);
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    out.push(seq.modality().index() as u8);
    put_u32(&mut out, tau);
    put_u32(&mut out, dim);
    for (i, &v) in seq.values().data().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(validation(format!("{} value {v} at flat index {i} overflows f32", seq.modality())));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    out.extend(seq.mask().iter().map(|&m| u8::from(m)));
    Ok(out)
}

/// Parses a file image; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<FeatureSequence> {
    let mut r = Reader::new(bytes, path);
    if r.bytes(4)? != MAGIC {
        return r.fail("missing TDRF magic");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(format!("unsupported TDRF version {version}"));
    }
    let tag = r.u8()?;
    let Some(modality) = Modality::from_index(tag as usize) else {
        return r.fail(format!("unknown modality tag {tag}"));
    };
    let tau = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let expected = tau.checked_mul(dim).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(HEADER_LEN + tau));
    if expected != Some(bytes.len()) {
        return r.fail(format!("{} bytes do not match a {tau}x{dim} payload", bytes.len()));
    }
    let mut values = Vec::with_capacity(tau * dim);
    for _ in 0..tau * dim {
        values.push(f64::from(r.f32()?));
    }
    let mut mask = Vec::with_capacity(tau);
    for _ in 0..tau {
        match r.u8()? {
            0 => mask.push(false),
            1 => mask.push(true),
            b => return r.fail(format!("mask byte {b} is neither 0 nor 1")),
        }
    }
    r.finish()?;
    Ok(FeatureSequence::new(modality, Matrix::from_vec(tau, dim, values), mask)?)
}

pub fn write_feature_file(seq: &FeatureSequence, path: &Path) -> Result<()> {
    let bytes = encode(seq)?;
    fs::write(path, bytes).at(path)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes, path)
}

fn validation(msg: String) -> Error {
    Error::Core(tridira_core::Error::Validation(msg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_layout() {
        let seq = FeatureSequence::dense(Modality::Audio, Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])).unwrap();
        let bytes = encode(&seq).unwrap();
        assert_eq!(bytes.len(), 17 + 24 + 2);
        assert_eq!(&bytes[..4], b"TDRF");
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &3u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[41..], &[1, 1]);
        assert_eq!(decode(&bytes, Path::new("mem")).unwrap(), seq);
    }

    #[test]
    fn rejects_damaged_files() {
        let seq = FeatureSequence::dense(Modality::Text, Matrix::from_rows(&[[0.0]])).unwrap();
        let good = encode(&seq).unwrap();
        let p = Path::new("mem");
        assert!(decode(&good[..good.len() - 1], p).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
        let mut bad = good.clone();
        bad[8] = 7;
        assert!(decode(&bad, p).is_err());
        let mut bad = good;
        *bad.last_mut().unwrap() = 2;
        assert!(decode(&bad, p).is_err());
    }

    #[test]
    fn f32_overflow_is_a_validation_error() {
        let seq = FeatureSequence::dense(Modality::Text, Matrix::from_rows(&[[1e300]])).unwrap();
        assert!(matches!(encode(&seq), Err(Error::Core(tridira_core::Error::Validation(_)))));
    }
}
