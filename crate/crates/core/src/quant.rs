//! Uniform symmetric quantisation (zero-point 0, round half to even).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest scale handed out by calibration; guards all-zero tensors.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Per-tensor quantiser parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub signed: bool,
    pub scale: f64,
}

impl QuantSpec {
    pub fn new(bits: u32, signed: bool, scale: f64) -> Result<Self> {
        let spec = QuantSpec {
            bits,
            signed,
            scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec whose largest code maps onto `max_abs` (floored at [`SCALE_FLOOR`]).
    pub fn calibrated(bits: u32, signed: bool, max_abs: f64) -> Result<Self> {
        let unit = QuantSpec::new(bits, signed, 1.0)?;
        let scale = (max_abs.abs() / unit.qmax() as f64).max(SCALE_FLOOR);
        QuantSpec::new(bits, signed, scale)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.bits) {
            return Err(Error::InvalidQuantSpec(format!(
                "bit width {} outside 2..=32",
                self.bits
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidQuantSpec(format!(
                "scale {} must be positive and finite",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn qmin(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn qmax(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    /// Number of representable codes.
    pub fn levels(&self) -> i64 {
        self.qmax() - self.qmin() + 1
    }

    /// `clamp(round_half_even(x / scale), qmin, qmax)`.
    pub fn quantize(&self, x: f64) -> i64 {
        let q = (x / self.scale).round_ties_even();
        q.clamp(self.qmin() as f64, self.qmax() as f64) as i64
    }

    pub fn dequantize(&self, code: i64) -> f64 {
        code as f64 * self.scale
    }

    pub fn fake_quant(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    /// Straight-through estimator: 1 inside the representable range, 0 outside.
    pub fn ste_grad(&self, x: f64) -> f64 {
        let lo = self.qmin() as f64 * self.scale;
        let hi = self.qmax() as f64 * self.scale;
        if (lo..=hi).contains(&x) {
            1.0
        } else {
            0.0
        }
    }
}
