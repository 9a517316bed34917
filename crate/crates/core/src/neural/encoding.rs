//! Sinusoidal position signals.
//!
//! The story decoder uses the length-difference form, which encodes the
//! number of tokens remaining rather than the absolute position:
//!
//! ```text
//! LDPE(pos, len, 2i)     = sin((len - pos) / 10000^(2i/d))
//! LDPE(pos, len, 2i + 1) = cos((len - pos) / 10000^(2i/d))
//! ```
//!
//! so the last position of every story has the same vector whatever the
//! story length. Encoders use the ordinary absolute form.

use super::matrix::Matrix;
use crate::error::{Error, Result};

fn check_dim(d: usize) -> Result<()> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(format!(
            "positional encoding size must be even and positive, got {d}"
        )));
    }
    Ok(())
}

/// Sinusoid pair for a signed offset; shared by both encodings.
fn sinusoid(offset: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = offset / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// Length-difference encoding for position `pos` of a sequence of length `len`.
pub fn ldpe(pos: usize, len: usize, d: usize) -> Result<Vec<f64>> {
    check_dim(d)?;
    if pos > len {
        return Err(Error::config(format!("position {pos} exceeds length {len}")));
    }
    Ok(sinusoid((len - pos) as f64, d))
}

/// Length-difference rows for positions `0..count`. Positions past `len`
/// (a decoder running over its requested length) get negative offsets.
pub fn ldpe_rows(count: usize, len: usize, d: usize) -> Result<Matrix> {
    check_dim(d)?;
    let rows: Vec<Vec<f64>> = (0..count).map(|pos| sinusoid(len as f64 - pos as f64, d)).collect();
    Ok(Matrix::from_vec(count, d, rows.concat()))
}

/// Absolute sinusoidal encoding.
pub fn absolute(pos: usize, d: usize) -> Result<Vec<f64>> {
    check_dim(d)?;
    Ok(sinusoid(pos as f64, d))
}

pub fn absolute_rows(count: usize, d: usize) -> Result<Matrix> {
    check_dim(d)?;
    let rows: Vec<Vec<f64>> = (0..count).map(|pos| sinusoid(pos as f64, d)).collect();
    Ok(Matrix::from_vec(count, d, rows.concat()))
}
