use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::buffer::{ColorSpace, ImageBuffer, ValueRange};

/// Capture simulation parameters: scale by `2^ev`, clip, gamma-encode, quantize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureSpec {
    pub ev: f64,
    pub gamma: f64,
    pub quantize_bits: u32,
}

impl Default for ExposureSpec {
    fn default() -> Self {
        Self {
            ev: 0.0,
            gamma: 2.2,
            quantize_bits: 8,
        }
    }
}

impl ExposureSpec {
    /// Over-exposed variant used for the "Eye-over" style synthetic set.
    pub fn over() -> Self {
        Self {
            ev: 3.0,
            ..Self::default()
        }
    }

    /// Under-exposed variant used for the "Eye-under" style synthetic set.
    pub fn under() -> Self {
        Self {
            ev: -3.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.quantize_bits) {
            return Err(Error::InvalidConfig(format!(
                "quantize_bits must be in [1, 16], got {}",
                self.quantize_bits
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) || !self.ev.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma must be positive and ev finite, got gamma={} ev={}",
                self.gamma, self.ev
            )));
        }
        Ok(())
    }

    /// Exposes a single linear sample to its stored 8-bit code.
    pub fn expose_sample(&self, linear: f64) -> f64 {
        let levels = ((1u64 << self.quantize_bits) - 1) as f64;
        let v = (linear * self.ev.exp2()).clamp(0.0, 1.0);
        let q = (v.powf(1.0 / self.gamma) * levels).round();
        if self.quantize_bits == 8 {
            q
        } else {
            // other bit depths are re-expanded into the 8-bit container
            (q / levels * 255.0).round()
        }
    }
}

pub fn apply_exposure(hdr: &ImageBuffer, spec: &ExposureSpec) -> Result<ImageBuffer> {
    hdr.expect_range(ValueRange::HdrLinear)?;
    spec.validate()?;
    let data = hdr
        .data()
        .iter()
        .map(|&v| spec.expose_sample(v as f64) as f32)
        .collect();
    ImageBuffer::new(
        hdr.width(),
        hdr.height(),
        hdr.channels(),
        data,
        ValueRange::Byte,
        ColorSpace::Srgb,
    )
}
