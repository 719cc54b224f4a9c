//! The encoder-only Transformer used for every task: input projection with
//! sinusoidal positional encoding, one single-head self-attention sublayer and
//! one feed-forward sublayer (both residual, followed by BatchNorm), global
//! average pooling over time and a linear head.
//!
//! In QAT mode every weight and every activation boundary goes through a
//! fake quantizer so that the exported integer model sees the same grid.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{qparams_for_range, tensor_range, QuantError, QuantParams, RangeObserver};
use crate::tensor::{BatchNormStats, BnMode, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("QAT mode requires quantization state (set a bitwidth)")]
    MissingQuant,
    #[error("input shape {got:?} does not match window {n}x{m}")]
    InputShape { got: Vec<usize>, n: usize, m: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Forecasting,
    Classification,
    Anomaly,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "forecasting" | "forecast" => Ok(Task::Forecasting),
            "classification" | "classify" => Ok(Task::Classification),
            "anomaly" => Ok(Task::Anomaly),
            other => Err(format!("unknown task '{other}'")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Forecasting => "forecasting",
            Task::Classification => "classification",
            Task::Anomaly => "anomaly",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Window length in time steps.
    pub n: usize,
    /// Input features per step.
    pub m: usize,
    /// Output width.
    pub k: usize,
    pub d_model: usize,
    /// Bitwidth for QAT and integer export; `None` builds a float-only model.
    pub bits: Option<u8>,
    pub task: Task,
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.k == 0 || self.d_model == 0 {
            return Err(ModelError::Config(format!(
                "n, m, k and d_model must be positive (got {self:?})"
            )));
        }
        if let Some(b) = self.bits {
            if !(2..=8).contains(&b) {
                return Err(ModelError::Config(format!("bitwidth {b} outside 2..=8")));
            }
        }
        Ok(())
    }
}

/// Closed-form trainable parameter count. Positional encoding contributes none.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let (m, k, d) = (cfg.m, cfg.k, cfg.d_model);
    (m * d + d)             // input projection
        + 3 * (d * d + d)   // Q, K, V
        + (d * d + d)       // attention output
        + (4 * d * d + 4 * d) // FFN up
        + (4 * d * d + d)   // FFN down
        + 4 * d             // two affine BatchNorms
        + (d * k + k) // head
}

/// Sinusoidal table, row-major `n×d`.
pub fn positional_encoding(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for t in 0..n {
        for i in 0..d {
            let pair = (i / 2) * 2;
            let freq = 10000f64.powf(pair as f64 / d as f64);
            let angle = t as f64 / freq;
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `in×out`, so `y = x·W + b`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_features).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub stats: BatchNormStats,
}

impl BatchNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            stats: BatchNormStats::new(d),
        }
    }
}

/// Activation boundaries carrying their own observer in QAT mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Input,
    Embed,
    Query,
    Key,
    Value,
    Scores,
    Context,
    AttnOut,
    Residual1,
    Norm1,
    FfHidden,
    FfOut,
    Residual2,
    Norm2,
    Output,
}

impl Boundary {
    pub const ALL: [Boundary; 15] = [
        Boundary::Input,
        Boundary::Embed,
        Boundary::Query,
        Boundary::Key,
        Boundary::Value,
        Boundary::Scores,
        Boundary::Context,
        Boundary::AttnOut,
        Boundary::Residual1,
        Boundary::Norm1,
        Boundary::FfHidden,
        Boundary::FfOut,
        Boundary::Residual2,
        Boundary::Norm2,
        Boundary::Output,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub bits: u8,
    pub observers: BTreeMap<Boundary, RangeObserver>,
}

impl QuantState {
    pub fn new(bits: u8) -> Self {
        Self {
            bits,
            observers: Boundary::ALL
                .iter()
                .map(|b| (*b, RangeObserver::default()))
                .collect(),
        }
    }

    pub fn qparams(&self, b: Boundary) -> std::result::Result<QuantParams, QuantError> {
        self.observers
            .get(&b)
            .ok_or(QuantError::EmptyObserver)?
            .qparams(self.bits)
    }

    pub fn freeze(&mut self) {
        self.observers.values_mut().for_each(RangeObserver::freeze);
    }

    pub fn is_frozen(&self) -> bool {
        self.observers.values().all(|o| o.frozen)
    }
}

/// Per-tensor asymmetric parameters for a weight matrix.
pub fn weight_qparams(w: &[f64], bits: u8) -> std::result::Result<QuantParams, QuantError> {
    let (lo, hi) = tensor_range(w);
    qparams_for_range(lo, hi, bits)
}

/// Fixed parameters of the attention probabilities: `[0, 1]` onto the full code range.
pub fn prob_qparams(bits: u8) -> QuantParams {
    QuantParams::asymmetric(0.0, 1.0, bits).expect("unit range is valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Float,
    Qat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub input_proj: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ff_up: Linear,
    pub ff_down: Linear,
    pub norm1: BatchNorm,
    pub norm2: BatchNorm,
    pub head: Linear,
    pub quant: Option<QuantState>,
}

/// Output of a recorded forward pass.
pub struct Forward {
    pub output: Var,
    /// Parameter leaves, in the order of [`TransformerModel::params_mut`].
    pub params: Vec<Var>,
    pub output_qparams: Option<QuantParams>,
}

#[derive(Clone, Copy)]
struct QVar {
    v: Var,
    qp: Option<QuantParams>,
}

struct Ctx<'a> {
    g: &'a mut Graph,
    quant: Option<&'a mut QuantState>,
    training: bool,
    params: Vec<Var>,
}

impl Ctx<'_> {
    fn observe(&mut self, b: Boundary, v: Var) -> Result<Option<QuantParams>> {
        let Some(q) = self.quant.as_deref_mut() else {
            return Ok(None);
        };
        if self.training {
            let values = &self.g.value(v).data;
            if let Some(o) = q.observers.get_mut(&b) {
                o.observe(values);
            }
        }
        Ok(Some(q.qparams(b)?))
    }

    fn boundary(&mut self, v: Var, b: Boundary) -> Result<QVar> {
        match self.observe(b, v)? {
            Some(qp) => Ok(QVar {
                v: self.g.fake_quantize(v, &qp),
                qp: Some(qp),
            }),
            None => Ok(QVar { v, qp: None }),
        }
    }

    fn linear(&mut self, x: QVar, l: &Linear) -> Result<Var> {
        let w = self
            .g
            .param(vec![l.in_features, l.out_features], l.weight.clone())?;
        let b = self.g.param(vec![l.out_features], l.bias.clone())?;
        self.params.push(w);
        self.params.push(b);
        let (w_used, b_used) = match (&self.quant, x.qp) {
            (Some(q), Some(qx)) => {
                let qw = weight_qparams(&l.weight, q.bits)?;
                let wq = self.g.fake_quantize(w, &qw);
                let bq = self.g.round_to_grid(b, qx.scale * qw.scale);
                (wq, bq)
            }
            _ => (w, b),
        };
        let y = self.g.matmul(x.v, w_used)?;
        Ok(self.g.add_row(y, b_used)?)
    }

    fn residual(&mut self, a: QVar, b: QVar, boundary: Boundary) -> Result<QVar> {
        let sum = self.g.add(a.v, b.v)?;
        match self.observe(boundary, sum)? {
            Some(qp) => {
                let ga = self.g.round_to_grid(a.v, qp.scale);
                let gb = self.g.round_to_grid(b.v, qp.scale);
                let s = self.g.add(ga, gb)?;
                Ok(QVar {
                    v: self.g.fake_quantize(s, &qp),
                    qp: Some(qp),
                })
            }
            None => Ok(QVar { v: sum, qp: None }),
        }
    }

    fn batchnorm(&mut self, x: Var, bn: &mut BatchNorm) -> Result<Var> {
        let d = bn.gamma.len();
        let gamma = self.g.param(vec![d], bn.gamma.clone())?;
        let beta = self.g.param(vec![d], bn.beta.clone())?;
        self.params.push(gamma);
        self.params.push(beta);
        let mode = if self.training { BnMode::Train } else { BnMode::Eval };
        Ok(self.g.batchnorm(x, gamma, beta, &mut bn.stats, mode)?)
    }
}

/// Per-window column means of `B·n×d` codes, in codes.
fn gap_codes(codes: &[i32], n: usize, d: usize, zero: i32) -> Vec<i32> {
    codes
        .chunks(n * d)
        .flat_map(|w| {
            (0..d).map(move |j| {
                let s: i64 = (0..n).map(|t| (w[t * d + j] - zero) as i64).sum();
                (zero as i64 + crate::intrt::div_round(s, n as i64)) as i32
            })
        })
        .collect()
}

fn tile(rows: &[f64], times: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * times);
    for _ in 0..times {
        out.extend_from_slice(rows);
    }
    out
}

impl TransformerModel {
    /// Builds a model with fan-in scaled uniform initialization from a seeded
    /// ChaCha stream. Attaches QAT state when the config carries a bitwidth.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, k) = (config.m, config.d_model, config.k);
        Ok(Self {
            config,
            input_proj: Linear::init(m, d, &mut rng),
            query: Linear::init(d, d, &mut rng),
            key: Linear::init(d, d, &mut rng),
            value: Linear::init(d, d, &mut rng),
            attn_out: Linear::init(d, d, &mut rng),
            ff_up: Linear::init(d, 4 * d, &mut rng),
            ff_down: Linear::init(4 * d, d, &mut rng),
            norm1: BatchNorm::new(d),
            norm2: BatchNorm::new(d),
            head: Linear::init(d, k, &mut rng),
            quant: config.bits.map(QuantState::new),
        })
    }

    /// Every trainable tensor, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(22);
        for l in [
            &mut self.input_proj,
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.attn_out,
            &mut self.ff_up,
            &mut self.ff_down,
        ] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for bn in [&mut self.norm1, &mut self.norm2] {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }

    pub fn freeze_observers(&mut self) {
        if let Some(q) = &mut self.quant {
            q.freeze();
        }
    }

    /// Lets observers and BatchNorm running statistics track `batch` for
    /// `passes` training-mode QAT forwards without touching weights, then
    /// freezes the observers. Enough to export an untrained model.
    pub fn calibrate(&mut self, batch: &Tensor, passes: usize) -> Result<()> {
        for _ in 0..passes {
            let mut g = Graph::new();
            self.forward_graph(&mut g, batch, Mode::Qat, true)?;
        }
        self.freeze_observers();
        Ok(())
    }

    /// Records a forward pass over `B` stacked windows (`[B·n × m]`).
    ///
    /// `training` selects batch statistics in BatchNorm and lets unfrozen
    /// observers track ranges.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph,
        batch: &Tensor,
        mode: Mode,
        training: bool,
    ) -> Result<Forward> {
        let cfg = self.config;
        let (n, d) = (cfg.n, cfg.d_model);
        if batch.shape.len() != 2 || batch.cols() != cfg.m || batch.rows() == 0 || batch.rows() % n != 0 {
            return Err(ModelError::InputShape {
                got: batch.shape.clone(),
                n,
                m: cfg.m,
            });
        }
        let nb = batch.rows() / n;
        let qat = mode == Mode::Qat;
        if qat && self.quant.is_none() {
            return Err(ModelError::MissingQuant);
        }
        let Self {
            input_proj,
            query,
            key,
            value,
            attn_out,
            ff_up,
            ff_down,
            norm1,
            norm2,
            head,
            quant,
            ..
        } = self;
        let mut cx = Ctx {
            g,
            quant: if qat { quant.as_mut() } else { None },
            training,
            params: Vec::with_capacity(22),
        };

        let x = cx.g.constant(batch.clone());
        let x = cx.boundary(x, Boundary::Input)?;

        let h = cx.linear(x, input_proj)?;
        let pe = positional_encoding(n, d);
        let pe_t = cx.g.constant(Tensor::matrix(nb * n, d, tile(&pe, nb))?);
        let sum = cx.g.add(h, pe_t)?;
        let emb = match cx.observe(Boundary::Embed, sum)? {
            Some(qp) => {
                let hq = cx.g.fake_quantize(h, &qp);
                let grid: Vec<f64> = crate::intrt::pe_codes(&pe, qp.scale, qp.bits)
                    .into_iter()
                    .map(|c| c as f64 * qp.scale)
                    .collect();
                let pe_q = cx.g.constant(Tensor::matrix(nb * n, d, tile(&grid, nb))?);
                let s = cx.g.add(hq, pe_q)?;
                QVar {
                    v: cx.g.fake_quantize(s, &qp),
                    qp: Some(qp),
                }
            }
            None => QVar { v: sum, qp: None },
        };

        let q = cx.linear(emb, query)?;
        let q = cx.boundary(q, Boundary::Query)?;
        let k = cx.linear(emb, key)?;
        let k = cx.boundary(k, Boundary::Key)?;
        let v = cx.linear(emb, value)?;
        let v = cx.boundary(v, Boundary::Value)?;

        let scores = cx.g.block_matmul_t(q.v, k.v, n)?;
        let scores = cx.g.scale(scores, 1.0 / (d as f64).sqrt());
        let scores = cx.boundary(scores, Boundary::Scores)?;
        let probs = match (cx.quant.as_deref(), scores.qp) {
            // the integer softmax evaluated on the score codes, exact softmax gradient
            (Some(qs), Some(sq)) if !cx.g.ste_surrogate() => {
                let plan = crate::intrt::softmax_plan(sq, qs.bits)?;
                let pq = plan.output;
                let codes = crate::quant::quantize(&cx.g.value(scores.v).data, &sq);
                let approx = codes
                    .chunks(n)
                    .flat_map(|row| crate::intrt::softmax_codes(row, &plan))
                    .map(|c| pq.dequantize_value(c))
                    .collect();
                cx.g.softmax_rows_approx(scores.v, approx)?
            }
            (Some(qs), _) => {
                let p = cx.g.softmax_rows(scores.v);
                cx.g.fake_quantize(p, &prob_qparams(qs.bits))
            }
            (None, _) => cx.g.softmax_rows(scores.v),
        };
        let ctx = cx.g.block_matmul(probs, v.v, n)?;
        let ctx = cx.boundary(ctx, Boundary::Context)?;
        let ao = cx.linear(ctx, attn_out)?;
        let ao = cx.boundary(ao, Boundary::AttnOut)?;

        let r1 = cx.residual(emb, ao, Boundary::Residual1)?;
        let n1 = cx.batchnorm(r1.v, norm1)?;
        let n1 = cx.boundary(n1, Boundary::Norm1)?;

        let f = cx.linear(n1, ff_up)?;
        let f = cx.g.relu(f);
        let f = cx.boundary(f, Boundary::FfHidden)?;
        let f2 = cx.linear(f, ff_down)?;
        let f2 = cx.boundary(f2, Boundary::FfOut)?;

        let r2 = cx.residual(n1, f2, Boundary::Residual2)?;
        let n2 = cx.batchnorm(r2.v, norm2)?;
        let n2 = cx.boundary(n2, Boundary::Norm2)?;

        let mut pooled = cx.g.mean_blocks(n2.v, n)?;
        if let Some(qp) = n2.qp {
            pooled = if cx.g.ste_surrogate() {
                cx.g.fake_quantize(pooled, &qp)
            } else {
                // integer mean of the codes, rounded exactly as the integer engine does
                let codes = crate::quant::quantize(&cx.g.value(n2.v).data, &qp);
                let exact = gap_codes(&codes, n, d, qp.zero_point)
                    .into_iter()
                    .map(|c| qp.dequantize_value(c))
                    .collect();
                cx.g.substitute(pooled, exact)?
            };
        }
        let pooled = QVar {
            v: pooled,
            qp: n2.qp,
        };
        let out = cx.linear(pooled, head)?;
        let out = cx.boundary(out, Boundary::Output)?;

        // forward order is in, q, k, v, ao, norm1, ff_up, ff_down, norm2, head
        let p = cx.params;
        let mut params = Vec::with_capacity(20);
        params.extend_from_slice(&p[0..10]); // in, q, k, v, ao
        params.extend_from_slice(&p[12..14]); // ff_up
        params.extend_from_slice(&p[14..16]); // ff_down
        params.extend_from_slice(&p[10..12]); // norm1
        params.extend_from_slice(&p[16..18]); // norm2
        params.extend_from_slice(&p[18..20]); // head
        Ok(Forward {
            output: out.v,
            params,
            output_qparams: out.qp,
        })
    }

    /// Evaluation-mode forward of one window (`n×m` → `1×k`) or of stacked
    /// windows (`B·n×m` → `B×k`).
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, x, mode, false)?;
        Ok(g.value(f.output).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub parameter_bytes: usize,
    pub buffer_bytes: usize,
    pub constant_bytes: usize,
}

impl Footprint {
    pub fn total(&self) -> usize {
        self.parameter_bytes + self.buffer_bytes + self.constant_bytes
    }
}

/// Number of requantization plans in an exported model: nine linear/matmul
/// layers, two per residual, and the softmax exponent plan.
pub const REQUANT_PLAN_COUNT: usize = 14;

/// Memory footprint at `bits`:
/// - parameters: `ceil(params·b/8)`
/// - buffers: the two largest activation tensors live at once, at `b` bits
/// - constants: 6 bytes per requant plan (multiplier, shift, zero point),
///   9 bytes per folded BatchNorm channel, 4 bytes per bias entry for the
///   32-bit biases beyond their `b`-bit share, and 2 bytes per softmax LUT entry.
pub fn estimate_footprint(cfg: &ModelConfig, bits: u8) -> Footprint {
    let (n, m, k, d) = (cfg.n, cfg.m, cfg.k, cfg.d_model);
    let b = bits as usize;
    let parameter_bytes = (count_parameters(cfg) * b).div_ceil(8);
    let mut sizes = [n * m, n * d, n * n, n * 4 * d, d, k];
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let buffer_bytes = ((sizes[0] + sizes[1]) * b).div_ceil(8);
    let bias_entries = d + 3 * d + d + 4 * d + d + k;
    let bias_extra = (bias_entries * (32 - b)).div_ceil(8);
    let lut = 1usize << crate::intrt::SOFTMAX_FRAC_BITS;
    let constant_bytes = REQUANT_PLAN_COUNT * 6 + 2 * d * 9 + bias_extra + lut * 2;
    Footprint {
        parameter_bytes,
        buffer_bytes,
        constant_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: usize, k: usize, d: usize) -> ModelConfig {
        ModelConfig {
            n: 24,
            m,
            k,
            d_model: d,
            bits: None,
            task: Task::Forecasting,
        }
    }

    #[test]
    fn parameter_counts_match_table() {
        assert_eq!(count_parameters(&cfg(1, 1, 16)), 3329);
        assert_eq!(count_parameters(&cfg(9, 6, 8)), 1006);
        assert_eq!(count_parameters(&cfg(3, 6, 40)), 20126);
        assert_eq!(count_parameters(&cfg(17, 10, 8)), 1106);
        assert_eq!(count_parameters(&cfg(8, 1, 24)), 7465);
        // the univariate reading of the AirU row: 945 with seven features
        assert_eq!(count_parameters(&cfg(7, 1, 8)), 945);
        assert_eq!(count_parameters(&cfg(1, 1, 8)), 897);
    }

    #[test]
    fn build_is_deterministic_and_counts_match() {
        let c = cfg(1, 1, 16);
        let a = TransformerModel::build(c, 3).unwrap();
        let b = TransformerModel::build(c, 3).unwrap();
        assert_eq!(a, b);
        let mut a = a;
        assert_eq!(a.param_count(), 3329);
        // off-grid d_model is accepted by the builder
        assert!(TransformerModel::build(cfg(1, 1, 12), 0).is_ok());
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6);
        for i in 0..6 {
            assert_eq!(pe[i], if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        for d in [2, 8, 64] {
            assert!((positional_encoding(2, d)[d] - 1f64.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let c = ModelConfig { n: 5, m: 2, k: 3, ..cfg(2, 3, 8) };
        let mut model = TransformerModel::build(c, 1).unwrap();
        for p in model.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::matrix(5, 2, (0..10).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let mut g = Graph::new();
        let f = model.forward_graph(&mut g, &x, Mode::Float, true).unwrap();
        assert!(g.value(f.output).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut model = TransformerModel::build(cfg(2, 1, 8), 0).unwrap();
        let x = Tensor::zeros(vec![24, 3]);
        assert!(matches!(
            model.forward(&x, Mode::Float),
            Err(ModelError::InputShape { .. })
        ));
        assert!(matches!(
            model.forward(&Tensor::zeros(vec![24, 2]), Mode::Qat),
            Err(ModelError::MissingQuant)
        ));
    }

    #[test]
    fn footprint_parameter_portion() {
        let c = ModelConfig { m: 17, k: 10, ..cfg(17, 10, 8) };
        let f4 = estimate_footprint(&c, 4);
        assert_eq!(f4.parameter_bytes, 553);
        let f8 = estimate_footprint(&c, 8);
        assert_eq!(f8.parameter_bytes, 2 * 553);
    }
}
