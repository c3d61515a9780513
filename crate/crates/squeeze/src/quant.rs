//! Scalar quantization kernels: uniform asymmetric k-bit codes and 1-bit
//! sign codes with an optional per-row magnitude scale.
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`), fixed for
//! cross-platform reproducibility.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a uniform asymmetric k-bit quantizer: `code =
/// clamp(round(w/s) + z, 0, 2^k − 1)`, `ŵ = s·(code − z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub k: u8,
    pub s: f32,
    pub z: u8,
}

impl QuantParams {
    pub fn max_code(&self) -> u8 {
        ((1u16 << self.k) - 1) as u8
    }
}

/// Sign-code scaling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizeMode {
    /// Codes dequantize to ±1.
    BareSign,
    /// Codes dequantize to ±α with α = mean(|row|) at fit time.
    ScaledSign,
}

/// Per-row binarization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinParams {
    pub alpha: f32,
    pub mode: BinarizeMode,
}

impl BinParams {
    /// Dequantized value of one sign code.
    #[inline]
    pub fn value(&self, sign: i8) -> f32 {
        if sign > 0 {
            self.alpha
        } else {
            -self.alpha
        }
    }
}

pub(crate) fn check_bits(k: u8) -> Result<()> {
    if !(2..=8).contains(&k) {
        return Err(Error::BadBits(k));
    }
    Ok(())
}

/// Fit scale and zero-point over `values` for a k-bit quantizer.
///
/// The fitting range is the hull of the data and zero: `[min(0, min),
/// max(0, max)]`. Anchoring zero keeps `z` inside `[0, 2^k − 1]` for rows
/// that do not straddle zero and makes constant rows reconstruct exactly;
/// for rows that do straddle zero it coincides with the plain
/// `(max − min)/(2^k − 1)` fit. All-zero input falls back to `s = 1e-8`,
/// `z = 0`.
pub fn compute_uniform_params(values: &[f32], k: u8) -> Result<QuantParams> {
    check_bits(k)?;
    if values.is_empty() {
        return Err(Error::EmptyInput("compute_uniform_params".into()));
    }
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for &v in values {
        let v = v as f64;
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    let levels = ((1u16 << k) - 1) as f64;
    let width = hi - lo;
    if width == 0.0 {
        return Ok(QuantParams { k, s: 1e-8, z: 0 });
    }
    let s = width / levels;
    let z = (-lo / s).round().clamp(0.0, levels) as u8;
    Ok(QuantParams { k, s: s as f32, z })
}

/// Quantize one value. Math runs in f64; the stored f32 scale is widened
/// exactly.
#[inline]
pub fn quantize_value(w: f64, p: &QuantParams) -> u8 {
    let levels = ((1u16 << p.k) - 1) as f64;
    let code = (w / p.s as f64).round() + p.z as f64;
    code.clamp(0.0, levels) as u8
}

/// Dequantize one code: `ŵ = s·(code − z)`.
#[inline]
pub fn dequantize_value(code: u8, p: &QuantParams) -> f32 {
    (p.s as f64 * (code as i32 - p.z as i32) as f64) as f32
}

pub fn quantize_uniform(values: &[f32], p: &QuantParams) -> Vec<u8> {
    values.iter().map(|&w| quantize_value(w as f64, p)).collect()
}

pub fn dequantize_uniform(codes: &[u8], p: &QuantParams) -> Result<Vec<f32>> {
    let max = p.max_code();
    for &c in codes {
        if c > max {
            return Err(Error::CodeOutOfRange {
                code: c,
                max,
                k: p.k,
            });
        }
    }
    Ok(codes.iter().map(|&c| dequantize_value(c, p)).collect())
}

/// Sign of a weight under the 1-bit code convention: zero maps to −1.
#[inline]
pub fn sign_code(w: f64) -> i8 {
    if w > 0.0 {
        1
    } else {
        -1
    }
}

/// Binarize a row to sign codes. `ScaledSign` fits α = mean(|row|).
pub fn binarize_row(row: &[f32], mode: BinarizeMode) -> Result<(Vec<i8>, BinParams)> {
    if row.is_empty() {
        return Err(Error::EmptyInput("binarize_row".into()));
    }
    let signs: Vec<i8> = row.iter().map(|&w| sign_code(w as f64)).collect();
    let alpha = match mode {
        BinarizeMode::BareSign => 1.0,
        BinarizeMode::ScaledSign => {
            let sum: f64 = row.iter().map(|&w| (w as f64).abs()).sum();
            (sum / row.len() as f64) as f32
        }
    };
    Ok((signs, BinParams { alpha, mode }))
}
