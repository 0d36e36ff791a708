use crate::error::{Error, Result};

fn levels(bits: u8) -> Result<f64> {
    if !(1..=16).contains(&bits) {
        return Err(Error::invalid(format!("bits must be in 1..=16, got {bits}")));
    }
    Ok(((1u32 << bits) - 1) as f64)
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!("quantization range [{lo}, {hi}] is empty")));
    }
    Ok(())
}

/// Uniform scalar quantizer index of `x` on `2^bits` levels spanning `[lo, hi]`.
///
/// `x` is clamped into range first; ties round away from zero.
pub fn quantize_uniform(x: f64, lo: f64, hi: f64, bits: u8) -> Result<u32> {
    check_range(lo, hi)?;
    let n = levels(bits)?;
    let x = if x.is_nan() { lo } else { x.clamp(lo, hi) };
    Ok(((x - lo) / (hi - lo) * n).round().clamp(0.0, n) as u32)
}

/// Lattice point of `index`; endpoints map exactly to `lo` and `hi`.
pub fn dequantize_uniform(index: u32, lo: f64, hi: f64, bits: u8) -> Result<f64> {
    check_range(lo, hi)?;
    let n = levels(bits)?;
    if index as f64 > n {
        return Err(Error::invalid(format!("index {index} exceeds {bits}-bit range")));
    }
    let t = index as f64 / n;
    Ok(lo * (1.0 - t) + hi * t)
}

/// Lattice spacing `(hi - lo) / (2^bits - 1)`.
pub fn quant_step(lo: f64, hi: f64, bits: u8) -> f64 {
    (hi - lo) / ((1u32 << bits) - 1) as f64
}

/// Quantization range for one scalar attribute component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
}

impl Grid {
    /// Range covering `values`; a degenerate span is widened by one unit.
    pub fn spanning(values: impl IntoIterator<Item = f64>) -> Grid {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Grid { lo: 0.0, hi: 1.0 };
        }
        if !(lo < hi) {
            hi = lo + 1.0;
        }
        Grid { lo, hi }
    }

    pub fn quantize(&self, x: f64, bits: u8) -> Result<u32> {
        quantize_uniform(x, self.lo, self.hi, bits)
    }

    pub fn dequantize(&self, i: u32, bits: u8) -> Result<f64> {
        dequantize_uniform(i, self.lo, self.hi, bits)
    }

    pub fn step(&self, bits: u8) -> f64 {
        quant_step(self.lo, self.hi, bits)
    }
}
