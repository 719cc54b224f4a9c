// Integer-only kernels. Nothing in this file may touch floating point; the
// source audit in tests/intrt.rs enforces that.

use super::{
    IntBatchNorm, IntError, IntLinear, IntMatmul, IntModel, IntResidual, IntTensor, OpKind,
    OpTally, Result, SoftmaxPlan,
};
use crate::quant::{qmax, qmin, QuantParams, RequantPlan};

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> IntError {
    IntError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `(v·M + 2^(s−1)) >> s` with an arithmetic shift.
pub(crate) fn scale_shift(v: i64, multiplier: i64, shift: u32) -> i64 {
    let p = v * multiplier;
    if shift == 0 {
        p
    } else {
        (p + (1i64 << (shift - 1))) >> shift
    }
}

impl RequantPlan {
    /// Rescales without adding the zero point or clamping.
    pub fn rescale(&self, acc: i64) -> i64 {
        scale_shift(acc, self.multiplier as i64, self.shift)
    }

    pub fn apply_unclamped(&self, acc: i32) -> i64 {
        self.rescale(acc as i64) + self.output.zero_point as i64
    }

    pub fn apply(&self, acc: i32) -> i32 {
        clamp_code(self.apply_unclamped(acc), &self.output)
    }
}

fn clamp_code(v: i64, qp: &QuantParams) -> i32 {
    v.clamp(qmin(qp.bits) as i64, qmax(qp.bits) as i64) as i32
}

fn to_acc(acc: i64) -> i32 {
    debug_assert!(
        acc >= i32::MIN as i64 && acc <= i32::MAX as i64,
        "32-bit accumulator overflow: {acc}"
    );
    acc as i32
}

pub fn int_linear(x: &IntTensor, layer: &IntLinear) -> Result<IntTensor> {
    let (rows, a) = (x.rows(), x.cols());
    if a != layer.in_features {
        return Err(shape_err(
            "int_linear",
            &x.shape,
            &[layer.in_features, layer.out_features],
        ));
    }
    let o = layer.out_features;
    let zx = layer.input_zero as i64;
    let zw = layer.weight_qparams.zero_point as i64;
    let out_qp = layer.plan.output;
    let mut out = Vec::with_capacity(rows * o);
    for r in 0..rows {
        let xr = &x.values[r * a..(r + 1) * a];
        for j in 0..o {
            let mut acc = layer.bias[j] as i64;
            for (i, &xv) in xr.iter().enumerate() {
                acc += (xv as i64 - zx) * (layer.weight[i * o + j] as i64 - zw);
            }
            let mut y = layer.plan.apply(to_acc(acc));
            if layer.relu {
                y = y.max(out_qp.zero_point);
            }
            out.push(y);
        }
    }
    Ok(IntTensor::new(vec![rows, o], out, out_qp))
}

/// `a · bᵀ` for `a, b` of shape `rows×q`.
pub fn int_matmul_nt(a: &IntTensor, b: &IntTensor, mm: &IntMatmul) -> Result<IntTensor> {
    if a.shape != b.shape {
        return Err(shape_err("int_matmul_nt", &a.shape, &b.shape));
    }
    let (p, q) = (a.rows(), a.cols());
    let r = b.rows();
    let (za, zb) = (mm.lhs_zero as i64, mm.rhs_zero as i64);
    let mut out = Vec::with_capacity(p * r);
    for i in 0..p {
        for j in 0..r {
            let mut acc = 0i64;
            for t in 0..q {
                acc += (a.values[i * q + t] as i64 - za) * (b.values[j * q + t] as i64 - zb);
            }
            out.push(mm.plan.apply(to_acc(acc)));
        }
    }
    Ok(IntTensor::new(vec![p, r], out, mm.plan.output))
}

/// `a · b` for `a` of shape `p×q` and `b` of shape `q×r`.
pub fn int_matmul(a: &IntTensor, b: &IntTensor, mm: &IntMatmul) -> Result<IntTensor> {
    let (p, q) = (a.rows(), a.cols());
    if b.rows() != q {
        return Err(shape_err("int_matmul", &a.shape, &b.shape));
    }
    let r = b.cols();
    let (za, zb) = (mm.lhs_zero as i64, mm.rhs_zero as i64);
    let mut out = Vec::with_capacity(p * r);
    for i in 0..p {
        for j in 0..r {
            let mut acc = 0i64;
            for t in 0..q {
                acc += (a.values[i * q + t] as i64 - za) * (b.values[t * r + j] as i64 - zb);
            }
            out.push(mm.plan.apply(to_acc(acc)));
        }
    }
    Ok(IntTensor::new(vec![p, r], out, mm.plan.output))
}

/// Fixed-point probabilities of one row of score codes; each entry is in
/// units of `2^-f` and the row sums to `2^f ± len`.
pub fn softmax_probs(row: &[i32], plan: &SoftmaxPlan) -> Vec<i64> {
    let f = plan.frac_bits;
    let w = plan.exp_bits;
    let mask = (1i64 << f) - 1;
    let max = row.iter().copied().max().unwrap_or(0);
    let exps: Vec<i64> = row
        .iter()
        .map(|&c| {
            let t = scale_shift((max - c) as i64, plan.exp_multiplier as i64, plan.exp_shift);
            let ip = t >> f;
            let fr = t & mask;
            if ip > w as i64 {
                0
            } else if fr == 0 {
                (1i64 << w) >> ip
            } else {
                let j = ((1i64 << f) - fr) as usize;
                ((plan.lut[j] as i64) << (w - f)) >> (ip + 1)
            }
        })
        .collect();
    let sum: i64 = exps.iter().sum();
    exps.iter()
        .map(|&e| ((e << f) + sum / 2) / sum)
        .collect()
}

/// Output codes of one softmax row.
pub fn softmax_codes(row: &[i32], plan: &SoftmaxPlan) -> Vec<i32> {
    let f = plan.frac_bits;
    let levels = (1i64 << plan.output.bits) - 1;
    let z = plan.output.zero_point as i64;
    softmax_probs(row, plan)
        .into_iter()
        .map(|p| clamp_code(((p * levels + (1i64 << (f - 1))) >> f) + z, &plan.output))
        .collect()
}

pub fn int_softmax(scores: &IntTensor, plan: &SoftmaxPlan) -> IntTensor {
    let cols = scores.cols();
    let mut out = Vec::with_capacity(scores.values.len());
    for row in scores.values.chunks(cols) {
        out.extend(softmax_codes(row, plan));
    }
    IntTensor::new(scores.shape.clone(), out, plan.output)
}

/// Saturating add of positional codes already at the input's scale.
pub fn int_pe_add(x: &IntTensor, pe: &[i32]) -> Result<IntTensor> {
    if x.values.len() != pe.len() {
        return Err(shape_err("int_pe_add", &x.shape, &[pe.len()]));
    }
    let values = x
        .values
        .iter()
        .zip(pe)
        .map(|(&a, &p)| clamp_code(a as i64 + p as i64, &x.qparams))
        .collect();
    Ok(IntTensor::new(x.shape.clone(), values, x.qparams))
}

pub fn int_residual(a: &IntTensor, b: &IntTensor, res: &IntResidual) -> Result<IntTensor> {
    if a.shape != b.shape {
        return Err(shape_err("int_residual", &a.shape, &b.shape));
    }
    let z = res.output.zero_point as i64;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| {
            let l = res.lhs.rescale(x as i64 - res.lhs_zero as i64);
            let r = res.rhs.rescale(y as i64 - res.rhs_zero as i64);
            clamp_code(l + r + z, &res.output)
        })
        .collect();
    Ok(IntTensor::new(a.shape.clone(), values, res.output))
}

pub fn int_batchnorm(x: &IntTensor, bn: &IntBatchNorm) -> Result<IntTensor> {
    let d = x.cols();
    if bn.multiplier.len() != d {
        return Err(shape_err("int_batchnorm", &x.shape, &[bn.multiplier.len()]));
    }
    let z_in = bn.input_zero as i64;
    let z_out = bn.output.zero_point as i64;
    let values = x
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % d;
            let acc = (v as i64 - z_in) * bn.multiplier[c] as i64 + bn.offset[c];
            clamp_code(scale_shift(acc, 1, bn.shift[c]) + z_out, &bn.output)
        })
        .collect();
    Ok(IntTensor::new(x.shape.clone(), values, bn.output))
}

/// `round(s / n)` with ties away from zero.
pub fn div_round(s: i64, n: i64) -> i64 {
    if s >= 0 {
        (s + n / 2) / n
    } else {
        -((-s + n / 2) / n)
    }
}

/// Column mean over rows: `Z + round(Σ(x − Z) / n)`, ties away from zero.
pub fn int_gap(x: &IntTensor) -> IntTensor {
    let (n, d) = (x.rows() as i64, x.cols());
    let z = x.qparams.zero_point as i64;
    let mut sums = vec![0i64; d];
    for row in x.values.chunks(d) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v as i64 - z;
        }
    }
    let values = sums
        .iter()
        .map(|&s| clamp_code(z + div_round(s, n), &x.qparams))
        .collect();
    IntTensor::new(vec![1, d], values, x.qparams)
}

/// Runs one quantized `n×m` window through the model. Returns the `1×k`
/// output codes and the exact operation tally.
pub fn int_forward(im: &IntModel, x: &IntTensor) -> Result<(IntTensor, OpTally)> {
    let cfg = &im.config;
    let (n, d) = (cfg.n, cfg.d_model);
    if x.shape != [cfg.n, cfg.m] {
        return Err(shape_err("int_forward", &x.shape, &[cfg.n, cfg.m]));
    }
    if x.qparams != im.input {
        return Err(IntError::InputParams);
    }
    let mut tally = OpTally::default();

    let h = int_linear(x, &im.input_proj)?;
    tally.record("input_proj", OpKind::MatMul, n, cfg.m, d);
    let emb = int_pe_add(&h, &im.pe)?;
    tally.record("pe_add", OpKind::Elementwise, n, 1, d);

    let q = int_linear(&emb, &im.query)?;
    tally.record("query", OpKind::MatMul, n, d, d);
    let k = int_linear(&emb, &im.key)?;
    tally.record("key", OpKind::MatMul, n, d, d);
    let v = int_linear(&emb, &im.value)?;
    tally.record("value", OpKind::MatMul, n, d, d);

    let scores = int_matmul_nt(&q, &k, &im.scores)?;
    tally.record("scores", OpKind::MatMul, n, d, n);
    let probs = int_softmax(&scores, &im.softmax);
    tally.record("softmax", OpKind::Softmax, n, 1, n);
    let ctx = int_matmul(&probs, &v, &im.context)?;
    tally.record("context", OpKind::MatMul, n, n, d);
    let ao = int_linear(&ctx, &im.attn_out)?;
    tally.record("attn_out", OpKind::MatMul, n, d, d);

    let r1 = int_residual(&emb, &ao, &im.residual1)?;
    tally.record("residual1", OpKind::Elementwise, n, 1, d);
    let n1 = int_batchnorm(&r1, &im.norm1)?;
    tally.record("norm1", OpKind::Elementwise, n, 1, d);

    let f = int_linear(&n1, &im.ff_up)?;
    tally.record("ff_up", OpKind::MatMul, n, d, 4 * d);
    let f2 = int_linear(&f, &im.ff_down)?;
    tally.record("ff_down", OpKind::MatMul, n, 4 * d, d);

    let r2 = int_residual(&n1, &f2, &im.residual2)?;
    tally.record("residual2", OpKind::Elementwise, n, 1, d);
    let n2 = int_batchnorm(&r2, &im.norm2)?;
    tally.record("norm2", OpKind::Elementwise, n, 1, d);

    let pooled = int_gap(&n2);
    tally.record("gap", OpKind::Elementwise, n, 1, d);
    let out = int_linear(&pooled, &im.head)?;
    tally.record("head", OpKind::MatMul, 1, d, cfg.k);
    Ok((out, tally))
}
