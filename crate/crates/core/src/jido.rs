//! `.jido` operator-pair files.
//!
//! Little-endian layout:
//!
//! | field      | type           |
//! |------------|----------------|
//! | magic      | `b"JIDO"`      |
//! | version    | `u32` (= 1)    |
//! | k          | `u32`          |
//! | n_I        | `u32`          |
//! | n_D        | `u32`          |
//! | nu         | `f64`          |
//! | Omega_I    | `k * n_I` `f64`, row-major |
//! | Omega_D    | `k * n_D` `f64`, row-major |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::operator::{AnalysisOperator, OperatorPair};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"JIDO";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 8;
const LOAD_ROW_TOLERANCE: f64 = 1e-8;

pub fn encode_pair<T: Real>(pair: &OperatorPair<T>) -> Result<Vec<u8>> {
    pair.validate()?;
    let k = pair.k();
    let (ni, nd) = (pair.intensity.n(), pair.depth.n());
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * k * (ni + nd));
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, k as u32, ni as u32, nd as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&pair.nu.as_f64().to_le_bytes());
    for &v in pair.intensity.as_slice().iter().chain(pair.depth.as_slice()) {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_pair<T: Real>(bytes: &[u8]) -> Result<OperatorPair<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Malformed(format!("header truncated: {} bytes", bytes.len())));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());

    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (k, ni, nd) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let nu = f64_at(20);
    if k == 0 || ni == 0 || nd == 0 {
        return Err(Error::Malformed(format!("zero dimension: k={k}, n_I={ni}, n_D={nd}")));
    }
    let expected = k
        .checked_mul(ni + nd)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Malformed("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Malformed(format!(
            "expected {expected} bytes for k={k}, n_I={ni}, n_D={nd}, found {}",
            bytes.len()
        )));
    }
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::Malformed(format!("nu must be positive, found {nu}")));
    }

    let read_matrix = |start: usize, len: usize| -> Vec<T> { (0..len).map(|i| T::of(f64_at(start + 8 * i))).collect() };
    let intensity = AnalysisOperator::raw(k, ni, read_matrix(HEADER_LEN, k * ni))?;
    let depth = AnalysisOperator::raw(k, nd, read_matrix(HEADER_LEN + 8 * k * ni, k * nd))?;
    let tol = T::of(LOAD_ROW_TOLERANCE);
    intensity.check_row_norms("intensity", tol)?;
    depth.check_row_norms("depth", tol)?;
    for (op, name) in [(&intensity, "intensity"), (&depth, "depth")] {
        if op.side().is_none() || op.k() < op.n() {
            return Err(Error::Malformed(format!(
                "{name} operator has invalid shape {}x{}",
                op.k(),
                op.n()
            )));
        }
    }
    if ni != nd {
        return Err(Error::Malformed(format!("patch sizes differ: n_I={ni}, n_D={nd}")));
    }
    Ok(OperatorPair {
        intensity,
        depth,
        nu: T::of(nu),
    })
}

pub fn save_pair<T: Real>(pair: &OperatorPair<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pair(pair)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_pair<T: Real>(path: impl AsRef<Path>) -> Result<OperatorPair<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pair(&bytes)
}
