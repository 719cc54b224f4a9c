//! Bit-exact integer-only inference, the software twin of the generated RTL.
//!
//! [`export_int`] compiles a QAT-trained [`TransformerModel`] into an
//! [`IntModel`]; [`int_forward`] then runs a window through it with nothing but
//! integer multiply, add, shift, compare and divide.
//!
//! [`TransformerModel`]: crate::model::TransformerModel

mod export;
mod kernels;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::quant::{QuantError, QuantParams, RequantPlan};

pub use export::{export_int, quantize_input};
pub(crate) use export::{pe_codes, softmax_plan};
pub use kernels::{
    div_round, int_batchnorm, int_forward, int_gap, int_linear, int_matmul, int_matmul_nt,
    int_pe_add, int_residual, int_softmax, softmax_codes, softmax_probs,
};

/// Fraction bits of the fixed-point softmax probabilities (row sum `2^f`).
pub const SOFTMAX_FRAC_BITS: u32 = 8;
/// Precision of the intermediate `2^x` values.
pub const SOFTMAX_EXP_BITS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntError {
    #[error("model has no quantization state")]
    NotQuantized,
    #[error("observers must be frozen before export")]
    NotFrozen,
    #[error("integer shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("input is not quantized with the model's input parameters")]
    InputParams,
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T> = std::result::Result<T, IntError>;

/// Integer tensor with the quantization parameters of its codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub qparams: QuantParams,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i32>, qparams: QuantParams) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            qparams,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn dequantize(&self) -> Vec<f64> {
        crate::quant::dequantize(&self.values, &self.qparams)
    }
}

/// Linear layer: `acc = bias + Σ (x − Z_x)(w − Z_w)`, then requantized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntLinear {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `in×out` weight codes.
    pub weight: Vec<i32>,
    pub weight_qparams: QuantParams,
    /// 32-bit symmetric bias codes at scale `S_x·S_w`.
    pub bias: Vec<i32>,
    pub input_zero: i32,
    pub plan: RequantPlan,
    pub relu: bool,
}

/// Product of two activation tensors (attention scores or value mix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntMatmul {
    pub lhs_zero: i32,
    pub rhs_zero: i32,
    pub plan: RequantPlan,
}

/// Integer softmax: scaled score differences feed a `2^x` evaluation with a
/// `2^f`-entry fraction table; probabilities sum to `2^f` per row before
/// being re-coded to the output bitwidth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPlan {
    /// Maps a score-code difference to `log2`-domain units of `2^-f`.
    pub exp_multiplier: i32,
    pub exp_shift: u32,
    pub frac_bits: u32,
    pub exp_bits: u32,
    /// `lut[j] = round(2^(j/2^f) · 2^f)` for `j < 2^f`.
    pub lut: Vec<i32>,
    pub output: QuantParams,
}

/// Residual add with both operands rescaled to the destination scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntResidual {
    pub lhs_zero: i32,
    pub lhs: RequantPlan,
    pub rhs_zero: i32,
    pub rhs: RequantPlan,
    pub output: QuantParams,
}

/// BatchNorm folded to a per-channel multiply-add and shift:
/// `y = ((x − Z_in)·M + B + 2^(s−1)) >> s + Z_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntBatchNorm {
    pub input_zero: i32,
    /// Signed fixed-point multipliers.
    pub multiplier: Vec<i32>,
    pub shift: Vec<u32>,
    /// Offsets in output codes scaled by `2^s`.
    pub offset: Vec<i64>,
    pub output: QuantParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntModel {
    pub config: ModelConfig,
    pub bits: u8,
    pub input: QuantParams,
    pub input_proj: IntLinear,
    /// Positional encoding codes at the embedding scale, `n×d`.
    pub pe: Vec<i32>,
    pub embed: QuantParams,
    pub query: IntLinear,
    pub key: IntLinear,
    pub value: IntLinear,
    pub scores: IntMatmul,
    pub softmax: SoftmaxPlan,
    pub context: IntMatmul,
    pub attn_out: IntLinear,
    pub residual1: IntResidual,
    pub norm1: IntBatchNorm,
    pub ff_up: IntLinear,
    pub ff_down: IntLinear,
    pub residual2: IntResidual,
    pub norm2: IntBatchNorm,
    pub head: IntLinear,
    pub output: QuantParams,
}

impl IntModel {
    pub fn linears(&self) -> [(&'static str, &IntLinear); 8] {
        [
            ("input_proj", &self.input_proj),
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("attn_out", &self.attn_out),
            ("ff_up", &self.ff_up),
            ("ff_down", &self.ff_down),
            ("head", &self.head),
        ]
    }

    /// Checks that every stored code lies within its declared bitwidth.
    pub fn codes_in_range(&self) -> bool {
        let lin_ok = self.linears().iter().all(|(_, l)| {
            let q = &l.weight_qparams;
            l.weight.iter().all(|w| (q.qmin()..=q.qmax()).contains(w))
        });
        let lim = (1i32 << self.bits) - 1;
        let pe_ok = self.pe.iter().all(|v| (-lim..=lim).contains(v));
        lin_ok && pe_ok
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// `rows × inner × cols` multiply-accumulates.
    MatMul,
    /// `rows` rows of `cols` entries through the exponent table.
    Softmax,
    /// One operation per output element.
    Elementwise,
}

/// Work done by one layer of [`int_forward`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOps {
    pub name: String,
    pub kind: OpKind,
    pub rows: u64,
    pub inner: u64,
    pub cols: u64,
}

impl LayerOps {
    pub fn macs(&self) -> u64 {
        match self.kind {
            OpKind::MatMul => self.rows * self.inner * self.cols,
            _ => 0,
        }
    }
}

/// Exact per-layer operation tally of one inference.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTally {
    pub layers: Vec<LayerOps>,
}

impl OpTally {
    pub fn record(&mut self, name: &str, kind: OpKind, rows: usize, inner: usize, cols: usize) {
        self.layers.push(LayerOps {
            name: name.to_string(),
            kind,
            rows: rows as u64,
            inner: inner as u64,
            cols: cols as u64,
        });
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(LayerOps::macs).sum()
    }

    /// Tally implied by a configuration, identical to what [`int_forward`] records.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let (n, m, k, d) = (cfg.n, cfg.m, cfg.k, cfg.d_model);
        let mut t = Self::default();
        t.record("input_proj", OpKind::MatMul, n, m, d);
        t.record("pe_add", OpKind::Elementwise, n, 1, d);
        t.record("query", OpKind::MatMul, n, d, d);
        t.record("key", OpKind::MatMul, n, d, d);
        t.record("value", OpKind::MatMul, n, d, d);
        t.record("scores", OpKind::MatMul, n, d, n);
        t.record("softmax", OpKind::Softmax, n, 1, n);
        t.record("context", OpKind::MatMul, n, n, d);
        t.record("attn_out", OpKind::MatMul, n, d, d);
        t.record("residual1", OpKind::Elementwise, n, 1, d);
        t.record("norm1", OpKind::Elementwise, n, 1, d);
        t.record("ff_up", OpKind::MatMul, n, d, 4 * d);
        t.record("ff_down", OpKind::MatMul, n, 4 * d, d);
        t.record("residual2", OpKind::Elementwise, n, 1, d);
        t.record("norm2", OpKind::Elementwise, n, 1, d);
        t.record("gap", OpKind::Elementwise, n, 1, d);
        t.record("head", OpKind::MatMul, 1, d, k);
        t
    }
}
