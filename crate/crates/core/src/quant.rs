//! Uniform fake quantisation with percentile calibration.
//!
//! Weights use symmetric quantisation (`z = 0`, range `[-2^{k-1}, 2^{k-1}-1]`),
//! activations use asymmetric quantisation (range `[0, 2^k - 1]` shifted by the
//! zero point). A bit-width of [`PASSTHROUGH_BITS`] means "leave in float".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Sentinel bit-width meaning identity (no quantisation).
pub const PASSTHROUGH_BITS: u8 = 32;
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;
/// Scale floor used when the calibration range collapses.
pub const SCALE_EPS: f64 = 1e-8;
/// Default percentile for activation clipping.
pub const ACTIVATION_PERCENTILE: f64 = 99.9;
/// Default percentile for weights (absolute max).
pub const WEIGHT_PERCENTILE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
    pub symmetric: bool,
}

/// Integer codes produced by [`quantize`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i64>,
}

/// Inclusive integer range representable with `bits`.
pub fn code_range(bits: u8, symmetric: bool) -> (i64, i64) {
    let b = u32::from(bits);
    if symmetric {
        (-(1i64 << (b - 1)), (1i64 << (b - 1)) - 1)
    } else {
        (0, (1i64 << b) - 1)
    }
}

pub fn is_valid_bits(bits: u8) -> bool {
    (MIN_BITS..=MAX_BITS).contains(&bits) || bits == PASSTHROUGH_BITS
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: u8, symmetric: bool) -> Result<Self> {
        let qp = Self {
            scale,
            zero_point,
            bits,
            symmetric,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn passthrough() -> Self {
        Self {
            scale: 1.0,
            zero_point: 0,
            bits: PASSTHROUGH_BITS,
            symmetric: true,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == PASSTHROUGH_BITS
    }

    pub fn validate(&self) -> Result<()> {
        if !is_valid_bits(self.bits) {
            return Err(Error::Config(format!(
                "bit-width {} outside [{MIN_BITS},{MAX_BITS}] and not the {PASSTHROUGH_BITS}-bit sentinel",
                self.bits
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.symmetric && self.zero_point != 0 {
            return Err(Error::Config("symmetric quantisation requires zero point 0".into()));
        }
        let (lo, hi) = code_range(self.bits, self.symmetric);
        if !self.symmetric && !(lo..=hi).contains(&i64::from(self.zero_point)) {
            return Err(Error::Config(format!(
                "zero point {} outside [{lo},{hi}]",
                self.zero_point
            )));
        }
        Ok(())
    }

    pub fn code_range(&self) -> (i64, i64) {
        code_range(self.bits, self.symmetric)
    }

    fn code_of<T: Real>(&self, x: T, scale: T) -> i64 {
        let (lo, hi) = self.code_range();
        let q = (x / scale).round_half_even().to_f64_lossy();
        // NaN-free for finite inputs; clamp before the integer cast.
        let q = q.clamp(lo as f64 - f64::from(self.zero_point), hi as f64 - f64::from(self.zero_point));
        (q as i64 + i64::from(self.zero_point)).clamp(lo, hi)
    }

    /// Quantise-then-dequantise one value.
    pub fn fake_quant_value<T: Real>(&self, x: T) -> T {
        if self.is_passthrough() {
            return x;
        }
        let s = T::from_f64_lossy(self.scale);
        let q = self.code_of(x, s) - i64::from(self.zero_point);
        s * T::from_i64(q).unwrap()
    }
}

pub fn quantize<T: Real>(x: &Tensor<T>, qp: &QuantParams) -> QuantizedTensor {
    let s = T::from_f64_lossy(qp.scale);
    QuantizedTensor {
        shape: x.shape().to_vec(),
        codes: x.data().iter().map(|&v| qp.code_of(v, s)).collect(),
    }
}

pub fn dequantize<T: Real>(xq: &QuantizedTensor, qp: &QuantParams) -> Tensor<T> {
    let s = T::from_f64_lossy(qp.scale);
    let z = i64::from(qp.zero_point);
    Tensor::new(
        xq.shape.clone(),
        xq.codes
            .iter()
            .map(|&q| s * T::from_i64(q - z).unwrap())
            .collect(),
    )
    .expect("shape carried from a valid tensor")
}

/// `dequantize(quantize(x))`; identity for the pass-through sentinel.
pub fn fake_quant<T: Real>(x: &Tensor<T>, qp: &QuantParams) -> Tensor<T> {
    if qp.is_passthrough() {
        return x.clone();
    }
    x.map(|v| qp.fake_quant_value(v))
}

/// Fake-quantises row `i` of `x` with `rows[i]`.
pub fn fake_quant_rows<T: Real>(x: &Tensor<T>, rows: &[QuantParams]) -> Result<Tensor<T>> {
    if rows.len() != x.rows() {
        return Err(Error::Dimension(format!(
            "{} row quantisers for {} rows",
            rows.len(),
            x.rows()
        )));
    }
    let d = x.cols();
    let data = x
        .data()
        .chunks(d)
        .zip(rows)
        .flat_map(|(row, qp)| row.iter().map(move |&v| qp.fake_quant_value(v)))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Squared L2 distance between `x` and its fake-quantised version.
pub fn quant_error<T: Real>(x: &Tensor<T>, qp: &QuantParams) -> f64 {
    if qp.is_passthrough() {
        return 0.0;
    }
    x.data()
        .iter()
        .map(|&v| {
            let d = (qp.fake_quant_value(v) - v).to_f64_lossy();
            d * d
        })
        .sum()
}

/// Observed range of a calibration set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub min: f64,
    pub max: f64,
    pub pct_low: f64,
    pub pct_high: f64,
}

/// Linear-interpolated percentile of already sorted values.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn check_pct(pct: f64) -> Result<()> {
    if !(pct > 50.0 && pct <= 100.0) {
        return Err(Error::Config(format!("percentile must lie in (50,100], got {pct}")));
    }
    Ok(())
}

fn gather<T: Real>(samples: &[Tensor<T>], abs: bool) -> Result<Vec<f64>> {
    let mut values: Vec<f64> = samples
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_f64_lossy()))
        .map(|v| if abs { v.abs() } else { v })
        .collect();
    if values.is_empty() {
        return Err(Error::Input("calibration needs at least one sample".into()));
    }
    values.sort_by(f64::total_cmp);
    Ok(values)
}

impl CalibrationStats {
    pub fn collect<T: Real>(samples: &[Tensor<T>], pct: f64) -> Result<Self> {
        check_pct(pct)?;
        let values = gather(samples, false)?;
        Ok(Self {
            min: values[0],
            max: values[values.len() - 1],
            pct_low: percentile_sorted(&values, 100.0 - pct),
            pct_high: percentile_sorted(&values, pct),
        })
    }
}

/// Fits a scale (and zero point) to the percentile clip range of `samples`.
pub fn calibrate_percentile<T: Real>(
    samples: &[Tensor<T>],
    bits: u8,
    symmetric: bool,
    pct: f64,
) -> Result<QuantParams> {
    check_pct(pct)?;
    if bits == PASSTHROUGH_BITS {
        if samples.is_empty() {
            return Err(Error::Input("calibration needs at least one sample".into()));
        }
        return Ok(QuantParams::passthrough());
    }
    if !is_valid_bits(bits) {
        return Err(Error::Config(format!("cannot calibrate for {bits} bits")));
    }
    if symmetric {
        let values = gather(samples, true)?;
        let hi = percentile_sorted(&values, pct);
        let levels = ((1u64 << (bits - 1)) - 1) as f64;
        let scale = hi.max(SCALE_EPS) / levels;
        QuantParams::new(scale, 0, bits, true)
    } else {
        let stats = CalibrationStats::collect(samples, pct)?;
        // The grid always contains zero so that z is representable.
        let lo = stats.pct_low.min(0.0);
        let hi = stats.pct_high.max(0.0);
        let levels = ((1u64 << bits) - 1) as f64;
        let scale = if hi > lo {
            (hi - lo) / levels
        } else {
            hi.abs().max(SCALE_EPS) / levels
        };
        let (qmin, qmax) = code_range(bits, false);
        let z = (-lo / scale).round_ties_even().clamp(qmin as f64, qmax as f64) as i32;
        QuantParams::new(scale, z, bits, false)
    }
}
