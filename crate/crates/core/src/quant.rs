//! Affine quantization parameters, range observers and fixed-point
//! requantization plans.
//!
//! Real→integer conversion rounds half away from zero; integer
//! requantization adds `2^(s-1)` before an arithmetic right shift
//! (round half up). Both the integer engine and the generated VHDL use the
//! constants in [`rounding`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("degenerate range [{alpha}, {beta}]")]
    DegenerateRange { alpha: f64, beta: f64 },
    #[error("bitwidth {0} outside 2..=16")]
    Bitwidth(u8),
    #[error("ratio {0} must be positive and finite")]
    Ratio(f64),
    #[error("ratio {0} underflows the multiplier at shift {MAX_SHIFT}")]
    Underflow(f64),
    #[error("ratio {0} is too large for a 31-bit multiplier")]
    Overflow(f64),
    #[error("observer has not seen any values")]
    EmptyObserver,
}

pub type Result<T> = std::result::Result<T, QuantError>;

/// Rounding constants shared by the integer engine and the RTL templates.
pub mod rounding {
    /// Requantization adds `1 << (shift - 1)` before shifting right.
    pub const REQUANT_ROUND_HALF_UP: bool = true;
    /// Target lower bound for the fixed-point multiplier.
    pub const MIN_MULTIPLIER_BITS: u32 = 14;
    /// The multiplier stays strictly below `2^31`.
    pub const MULTIPLIER_BITS: u32 = 31;
}

pub const MAX_SHIFT: u32 = 40;

/// Range widening applied when an observer reads out `α == β`.
pub const DEGENERATE_WIDEN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Asymmetric,
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub scale: f64,
    pub zero_point: i32,
    pub scheme: Scheme,
}

pub fn qmin(bits: u8) -> i32 {
    -(1i32 << (bits - 1))
}

pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if (2..=16).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::Bitwidth(bits))
    }
}

impl QuantParams {
    /// `S = (β−α)/(2^b−1)`, `Z = clamp(round((2^(b−1)−1) − β/S))`.
    pub fn asymmetric(alpha: f64, beta: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(beta > alpha) || !alpha.is_finite() || !beta.is_finite() {
            return Err(QuantError::DegenerateRange { alpha, beta });
        }
        let levels = ((1u64 << bits) - 1) as f64;
        let scale = (beta - alpha) / levels;
        // β/S evaluated as β·levels/(β−α) keeps exact halves exact.
        let z = (qmax(bits) as f64 - beta * levels / (beta - alpha)).round();
        let zero_point = (z as i64).clamp(qmin(bits) as i64, qmax(bits) as i64) as i32;
        Ok(Self {
            bits,
            scale,
            zero_point,
            scheme: Scheme::Asymmetric,
        })
    }

    /// `S = max(|α|,|β|)/(2^(b−1)−1)`, `Z = 0`.
    pub fn symmetric(alpha: f64, beta: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let m = alpha.abs().max(beta.abs());
        if !(m > 0.0) || !m.is_finite() {
            return Err(QuantError::DegenerateRange { alpha, beta });
        }
        Ok(Self {
            bits,
            scale: m / qmax(bits) as f64,
            zero_point: 0,
            scheme: Scheme::Symmetric,
        })
    }

    /// Symmetric parameters with a given scale, used for biases whose scale
    /// is the product of input and weight scales.
    pub fn symmetric_with_scale(scale: f64, bits: u8) -> Self {
        Self {
            bits,
            scale,
            zero_point: 0,
            scheme: Scheme::Symmetric,
        }
    }

    pub fn qmin(&self) -> i32 {
        qmin(self.bits)
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    pub fn quantize_value(&self, x: f64) -> i32 {
        let q = (x / self.scale).round() + self.zero_point as f64;
        q.clamp(self.qmin() as f64, self.qmax() as f64) as i32
    }

    pub fn dequantize_value(&self, q: i32) -> f64 {
        self.scale * (q as f64 - self.zero_point as f64)
    }

    pub fn real_min(&self) -> f64 {
        self.dequantize_value(self.qmin())
    }

    pub fn real_max(&self) -> f64 {
        self.dequantize_value(self.qmax())
    }

    pub fn is_valid(&self) -> bool {
        self.scale > 0.0
            && self.scale.is_finite()
            && (self.qmin()..=self.qmax()).contains(&self.zero_point)
            && (self.scheme == Scheme::Asymmetric || self.zero_point == 0)
    }
}

pub fn quantize(x: &[f64], qp: &QuantParams) -> Vec<i32> {
    x.iter().map(|&v| qp.quantize_value(v)).collect()
}

pub fn dequantize(xq: &[i32], qp: &QuantParams) -> Vec<f64> {
    xq.iter().map(|&q| qp.dequantize_value(q)).collect()
}

/// Asymmetric parameters for a tensor, widened to contain zero and to a
/// non-degenerate interval.
pub fn qparams_for_range(alpha: f64, beta: f64, bits: u8) -> Result<QuantParams> {
    let (mut lo, mut hi) = (alpha.min(0.0), beta.max(0.0));
    if hi - lo <= 0.0 {
        lo -= DEGENERATE_WIDEN;
        hi += DEGENERATE_WIDEN;
    }
    QuantParams::asymmetric(lo, hi, bits)
}

pub fn tensor_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub const OBSERVER_MOMENTUM: f64 = 0.01;

/// Running `[α, β]` tracker. The first batch sets the range; later batches
/// move it by an exponential moving average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeObserver {
    pub min: f64,
    pub max: f64,
    pub momentum: f64,
    pub initialized: bool,
    pub frozen: bool,
}

impl Default for RangeObserver {
    fn default() -> Self {
        Self::new(OBSERVER_MOMENTUM)
    }
}

impl RangeObserver {
    pub fn new(momentum: f64) -> Self {
        Self {
            min: 0.0,
            max: 0.0,
            momentum,
            initialized: false,
            frozen: false,
        }
    }

    pub fn observe(&mut self, values: &[f64]) {
        if self.frozen || values.is_empty() {
            return;
        }
        let (lo, hi) = tensor_range(values);
        if !lo.is_finite() || !hi.is_finite() {
            return;
        }
        if self.initialized {
            self.min += self.momentum * (lo - self.min);
            self.max += self.momentum * (hi - self.max);
        } else {
            self.min = lo;
            self.max = hi;
            self.initialized = true;
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn qparams(&self, bits: u8) -> Result<QuantParams> {
        if !self.initialized {
            return Err(QuantError::EmptyObserver);
        }
        qparams_for_range(self.min, self.max, bits)
    }
}

/// Fixed-point approximation `M / 2^s` of a positive real ratio, with
/// `M < 2^31`. The largest shift up to [`MAX_SHIFT`] is chosen.
pub fn fixed_point_multiplier(ratio: f64) -> Result<(i32, u32)> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(QuantError::Ratio(ratio));
    }
    let limit = (1u64 << rounding::MULTIPLIER_BITS) as f64;
    if ratio.round() >= limit {
        return Err(QuantError::Overflow(ratio));
    }
    let mut shift = MAX_SHIFT;
    loop {
        let m = (ratio * (shift as f64).exp2()).round();
        if m < limit {
            if m == 0.0 {
                return Err(QuantError::Underflow(ratio));
            }
            return Ok((m as i32, shift));
        }
        shift -= 1;
    }
}

/// Integer rescaling of a 32-bit accumulator into an output code.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequantPlan {
    pub multiplier: i32,
    pub shift: u32,
    pub output: QuantParams,
}

impl RequantPlan {
    /// Plan with an explicit shift.
    pub fn with_shift(real_ratio: f64, shift: u32, output: QuantParams) -> Result<Self> {
        if !(real_ratio > 0.0) || !real_ratio.is_finite() {
            return Err(QuantError::Ratio(real_ratio));
        }
        let m = (real_ratio * (shift as f64).exp2()).round();
        if m >= (1u64 << rounding::MULTIPLIER_BITS) as f64 {
            return Err(QuantError::Overflow(real_ratio));
        }
        Ok(Self {
            multiplier: m as i32,
            shift,
            output,
        })
    }

    pub fn encoded_ratio(&self) -> f64 {
        self.multiplier as f64 / (self.shift as f64).exp2()
    }
}

pub fn plan_requant(real_ratio: f64, output: QuantParams) -> Result<RequantPlan> {
    let (multiplier, shift) = fixed_point_multiplier(real_ratio)?;
    Ok(RequantPlan {
        multiplier,
        shift,
        output,
    })
}
