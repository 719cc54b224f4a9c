//! Analytic FPGA cost models: resources, cycles, power, energy, and the
//! deployability filter.
//!
//! None of these numbers come from vendor tools. The LUT and power models are
//! affine fits calibrated once against published post-synthesis figures for
//! six small Transformer configurations on the Spartan-7 XC7S15; they are
//! meant to rank configurations consistently, not to reproduce a synthesis
//! report.
//!
//! LUT fit (XC7S15, LUT6): `73.69 + 368.90·b + 98.39·d + 4.5625·b·d`, with
//! calibration residuals between −438 and +589 LUTs. Power fit: 31 mW static
//! plus 0.0014895 mW/LUT, 0.23413 mW/DSP and 2.39708 mW/BRAM, residuals
//! within ±1.6 mW.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intrt::{IntModel, OpKind, OpTally};
use crate::model::{count_parameters, ModelConfig, REQUANT_PLAN_COUNT};

#[derive(Debug, Error)]
pub enum HwError {
    #[error("unknown platform '{0}'")]
    UnknownPlatform(String),
    #[error("cannot read platform profile {path}: {msg}")]
    Profile { path: String, msg: String },
    #[error("invalid platform '{name}': {msg}")]
    Invalid { name: String, msg: String },
}

pub type Result<T> = std::result::Result<T, HwError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintStyle {
    /// Vivado-style `.xdc`.
    Xdc,
    /// Radiant-style `.pdc`.
    Pdc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatformSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub clock_hz: u64,
    pub lut_budget: u64,
    pub dsp_budget: u64,
    pub bram_budget: u64,
    /// Bits per block RAM (EBR on Lattice parts).
    pub bram_bits: u64,
    pub static_mw: f64,
    /// LUT count relative to 6-input LUTs for the same logic.
    pub lut_factor: f64,
    pub mw_per_lut: f64,
    pub mw_per_dsp: f64,
    pub mw_per_bram: f64,
    pub constraint_style: ConstraintStyle,
}

const BUILTIN: [&str; 2] = [
    include_str!("../platforms/xc7s15.json"),
    include_str!("../platforms/ice40up5k.json"),
];

impl PlatformSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(HwError::Invalid {
                name: self.name.clone(),
                msg: msg.to_string(),
            })
        };
        if self.clock_hz == 0 || self.lut_budget == 0 || self.dsp_budget == 0 || self.bram_budget == 0 || self.bram_bits == 0 {
            return bad("all budgets and the clock must be positive");
        }
        let coeffs = [self.static_mw, self.lut_factor, self.mw_per_lut, self.mw_per_dsp, self.mw_per_bram];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) || self.lut_factor == 0.0 {
            return bad("power and LUT coefficients must be finite and non-negative");
        }
        Ok(())
    }

    pub fn builtins() -> Vec<PlatformSpec> {
        BUILTIN
            .iter()
            .map(|s| serde_json::from_str(s).expect("builtin platform parses"))
            .collect()
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let p: PlatformSpec = serde_json::from_str(text).map_err(|e| HwError::Profile {
            path: origin.to_string(),
            msg: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HwError::Profile {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Looks a platform up by name: `*.json` profiles in `extra_dir` first,
    /// then the built-in profiles.
    pub fn find(name: &str, extra_dir: Option<&Path>) -> Result<Self> {
        if let Some(dir) = extra_dir {
            let path = dir.join(format!("{name}.json"));
            if path.is_file() {
                return Self::load(&path);
            }
            if let Ok(entries) = std::fs::read_dir(dir) {
                let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
                paths.sort();
                for p in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
                    if let Ok(spec) = Self::load(&p) {
                        if spec.name.eq_ignore_ascii_case(name) {
                            return Ok(spec);
                        }
                    }
                }
            }
        }
        Self::builtins()
            .into_iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| HwError::UnknownPlatform(name.to_string()))
    }

    pub fn clock_period_ns(&self) -> f64 {
        1e9 / self.clock_hz as f64
    }
}

/// The architectural quantities the cost models depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwShape {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub d_model: usize,
    pub bits: u8,
}

impl HwShape {
    pub fn from_config(cfg: &ModelConfig, bits: u8) -> Self {
        Self {
            n: cfg.n,
            m: cfg.m,
            k: cfg.k,
            d_model: cfg.d_model,
            bits,
        }
    }

    pub fn from_int(im: &IntModel) -> Self {
        Self::from_config(&im.config, im.bits)
    }

    fn config(&self) -> ModelConfig {
        ModelConfig {
            n: self.n,
            m: self.m,
            k: self.k,
            d_model: self.d_model,
            bits: Some(self.bits),
            task: crate::model::Task::Forecasting,
        }
    }
}

/// Sequential MAC units in the emitted design: eight linear layers, the two
/// attention matrix products, and one multiplier per BatchNorm.
pub const MAC_UNITS: u64 = 12;
/// Pipeline overhead per layer.
pub const LAYER_OVERHEAD_CYCLES: u64 = 4;
/// Extra cycles per softmax row for the exponent-table access.
pub const LUT_ACCESS_CYCLES: u64 = 2;

pub mod lut_fit {
    pub const C0: f64 = 73.69;
    pub const PER_BIT: f64 = 368.90;
    pub const PER_DIM: f64 = 98.39;
    pub const PER_BIT_DIM: f64 = 4.5625;
    /// LUTs of one soft multiplier per operand bit squared.
    pub const SOFT_MULT_PER_BIT2: f64 = 2.0;
}

const REQUANT_CONST_BITS: u64 = 31 + 6 + 8;
const BN_CONST_BITS: u64 = 32 + 6 + 48;
const ACC_BITS: u64 = 32;

/// Bits of stored parameters and constants: `b`-bit weights, 32-bit biases,
/// positional codes (`b+1` bits), the softmax table, requantization
/// constants and folded BatchNorm constants.
pub fn memory_bits(s: &HwShape) -> u64 {
    let (n, m, k, d, b) = (s.n as u64, s.m as u64, s.k as u64, s.d_model as u64, s.bits as u64);
    let weights = m * d + 4 * d * d + 8 * d * d + d * k;
    let biases = d + 3 * d + d + 4 * d + d + k;
    let lut_entries = 1u64 << crate::intrt::SOFTMAX_FRAC_BITS;
    weights * b
        + biases * ACC_BITS
        + n * d * (b + 1)
        + lut_entries * (crate::intrt::SOFTMAX_FRAC_BITS as u64 + 2)
        + REQUANT_PLAN_COUNT as u64 * REQUANT_CONST_BITS
        + 2 * d * BN_CONST_BITS
}

pub fn bram_blocks(bits: u64, bits_per_block: u64) -> u64 {
    bits.div_ceil(bits_per_block)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    pub luts: u64,
    pub dsps: u64,
    pub brams: u64,
}

pub fn estimate_resources(s: &HwShape, p: &PlatformSpec) -> Resources {
    use lut_fit::*;
    let (b, d) = (s.bits as f64, s.d_model as f64);
    let dsps = MAC_UNITS.min(p.dsp_budget);
    let soft = (MAC_UNITS - dsps) as f64 * SOFT_MULT_PER_BIT2 * b * b;
    let base = C0 + PER_BIT * b + PER_DIM * d + PER_BIT_DIM * b * d;
    Resources {
        luts: (p.lut_factor * base + soft).round() as u64,
        dsps,
        brams: bram_blocks(memory_bits(s), p.bram_bits),
    }
}

/// Cycle count of the sequential schedule: every layer costs its work plus
/// `c0`; matrix products cost one cycle per MAC, softmax rows
/// `cols + LUT access`, elementwise layers one cycle per element.
pub fn estimate_cycles(tally: &OpTally, c0: u64) -> u64 {
    tally
        .layers
        .iter()
        .map(|l| {
            let work = match l.kind {
                OpKind::MatMul => l.rows * l.inner * l.cols,
                OpKind::Softmax => l.rows * (l.cols + LUT_ACCESS_CYCLES),
                OpKind::Elementwise => l.rows * l.cols,
            };
            work + c0
        })
        .sum()
}

pub fn latency_ms(cycles: u64, p: &PlatformSpec) -> f64 {
    cycles as f64 * 1e3 / p.clock_hz as f64
}

pub fn estimate_power(r: &Resources, p: &PlatformSpec) -> f64 {
    p.static_mw + p.mw_per_lut * r.luts as f64 + p.mw_per_dsp * r.dsps as f64 + p.mw_per_bram * r.brams as f64
}

/// mW × ms = µJ; divided by 1000 for mJ.
pub fn energy(power_mw: f64, latency_ms: f64) -> f64 {
    power_mw * latency_ms / 1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HwEstimate {
    pub platform: String,
    pub luts: u64,
    pub dsps: u64,
    pub brams: u64,
    pub cycles: u64,
    pub latency_ms: f64,
    pub power_mw: f64,
    pub energy_mj: f64,
    pub deployable: bool,
    pub reasons: Vec<String>,
}

impl HwEstimate {
    pub fn resources(&self) -> Resources {
        Resources {
            luts: self.luts,
            dsps: self.dsps,
            brams: self.brams,
        }
    }
}

/// Deployable iff every resource is within budget (inclusive). Reasons name
/// each exceeded resource with its overshoot, e.g. `"LUT +16%"`.
pub fn check_deployable(r: &Resources, p: &PlatformSpec) -> (bool, Vec<String>) {
    let mut reasons = Vec::new();
    for (name, used, budget) in [
        ("LUT", r.luts, p.lut_budget),
        ("DSP", r.dsps, p.dsp_budget),
        ("BRAM", r.brams, p.bram_budget),
    ] {
        if used > budget {
            let pct = ((used as f64 / budget as f64 - 1.0) * 100.0).round().max(1.0);
            reasons.push(format!("{name} +{pct:.0}%"));
        }
    }
    (reasons.is_empty(), reasons)
}

/// Full estimate from the architecture alone (used to discard trials before
/// training).
pub fn estimate_shape(s: &HwShape, p: &PlatformSpec) -> HwEstimate {
    let tally = OpTally::for_config(&s.config());
    estimate_with_tally(s, &tally, p)
}

/// Full estimate of an exported model, using its exact operation tally.
pub fn estimate(im: &IntModel, p: &PlatformSpec) -> HwEstimate {
    estimate_with_tally(&HwShape::from_int(im), &OpTally::for_config(&im.config), p)
}

pub fn estimate_with_tally(s: &HwShape, tally: &OpTally, p: &PlatformSpec) -> HwEstimate {
    let r = estimate_resources(s, p);
    let cycles = estimate_cycles(tally, LAYER_OVERHEAD_CYCLES);
    let lat = latency_ms(cycles, p);
    let power = estimate_power(&r, p);
    let (deployable, reasons) = check_deployable(&r, p);
    HwEstimate {
        platform: p.name.clone(),
        luts: r.luts,
        dsps: r.dsps,
        brams: r.brams,
        cycles,
        latency_ms: lat,
        power_mw: power,
        energy_mj: energy(power, lat),
        deployable,
        reasons,
    }
}

/// Parameter count of a shape (for reports).
pub fn parameter_count(s: &HwShape) -> usize {
    count_parameters(&s.config())
}
