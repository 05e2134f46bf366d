//! Simulated low-bit execution via quantize-dequantize.
//!
//! Real INT4/INT8 kernels are a hardware concern; here the numeric effect is
//! reproduced in working precision so accuracy claims stay testable while the
//! cost model accounts for the speedup separately.

use crate::error::{DashError, Result};
use serde::{Deserialize, Serialize};

/// Symmetric per-tensor quantization spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    /// Grid step, max_abs / (2^(bits-1) - 1). Zero only for an all-zero tensor.
    pub scale: f64,
}

impl QuantSpec {
    /// Largest representable integer magnitude for the bit width.
    pub fn q_max(bits: u8) -> Result<f64> {
        match bits {
            4 | 8 => Ok(((1i64 << (bits - 1)) - 1) as f64),
            other => Err(DashError::InvalidArgument(format!(
                "quantization bits must be 4 or 8, got {other}"
            ))),
        }
    }

    /// Derive the spec from the max-abs of `values`.
    pub fn from_values(bits: u8, values: &[f64]) -> Result<Self> {
        let q_max = Self::q_max(bits)?;
        let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !max_abs.is_finite() {
            return Err(DashError::InvalidArgument(
                "quantization input contains non-finite values".into(),
            ));
        }
        let scale = if max_abs == 0.0 { 0.0 } else { max_abs / q_max };
        Ok(Self { bits, scale })
    }

    /// Quantize-dequantize one value onto the grid.
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        if self.scale == 0.0 {
            return 0.0;
        }
        (v / self.scale).round() * self.scale
    }
}

/// Quantize-dequantize a tensor with a fresh per-tensor spec.
///
/// An all-zero input yields all zeros. Output is idempotent under
/// re-quantization with the same spec.
pub fn fake_quantize(values: &[f64], bits: u8) -> Result<Vec<f64>> {
    let spec = QuantSpec::from_values(bits, values)?;
    Ok(values.iter().map(|&v| spec.apply(v)).collect())
}

/// In-place variant used on activation buffers in the forward pass.
pub fn fake_quantize_in_place(values: &mut [f64], bits: u8) -> Result<()> {
    let spec = QuantSpec::from_values(bits, values)?;
    for v in values.iter_mut() {
        *v = spec.apply(*v);
    }
    Ok(())
}
