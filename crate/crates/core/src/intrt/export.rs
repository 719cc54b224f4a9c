use super::{
    IntBatchNorm, IntError, IntLinear, IntMatmul, IntModel, IntResidual, IntTensor, Result,
    SoftmaxPlan, SOFTMAX_EXP_BITS, SOFTMAX_FRAC_BITS,
};
use crate::model::{
    positional_encoding, prob_qparams, weight_qparams, BatchNorm, Boundary, Linear,
    TransformerModel,
};
use crate::quant::{fixed_point_multiplier, plan_requant, quantize, QuantParams};

fn export_linear(l: &Linear, input: QuantParams, output: QuantParams, bits: u8, relu: bool) -> Result<IntLinear> {
    let wq = weight_qparams(&l.weight, bits)?;
    let bias_scale = input.scale * wq.scale;
    let bias = l
        .bias
        .iter()
        .map(|b| (b / bias_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect();
    Ok(IntLinear {
        in_features: l.in_features,
        out_features: l.out_features,
        weight: quantize(&l.weight, &wq),
        weight_qparams: wq,
        bias,
        input_zero: input.zero_point,
        plan: plan_requant(bias_scale / output.scale, output)?,
        relu,
    })
}

fn export_residual(a: QuantParams, b: QuantParams, out: QuantParams) -> Result<IntResidual> {
    Ok(IntResidual {
        lhs_zero: a.zero_point,
        lhs: plan_requant(a.scale / out.scale, out)?,
        rhs_zero: b.zero_point,
        rhs: plan_requant(b.scale / out.scale, out)?,
        output: out,
    })
}

const BN_ZERO_SHIFT: u32 = 16;
const BN_OFFSET_LIMIT: f64 = (1u64 << 47) as f64;

fn export_batchnorm(bn: &BatchNorm, input: QuantParams, output: QuantParams) -> Result<IntBatchNorm> {
    let d = bn.gamma.len();
    let mut multiplier = Vec::with_capacity(d);
    let mut shift = Vec::with_capacity(d);
    let mut offset = Vec::with_capacity(d);
    for c in 0..d {
        let a = bn.gamma[c] / (bn.stats.running_var[c] + bn.stats.eps).sqrt();
        let off = bn.beta[c] - a * bn.stats.running_mean[c];
        let ratio = a * input.scale / output.scale;
        let off_codes = off / output.scale;
        let (mut m, mut s) = if ratio == 0.0 {
            (0, BN_ZERO_SHIFT)
        } else {
            let (m, s) = fixed_point_multiplier(ratio.abs())?;
            (if ratio < 0.0 { -m } else { m }, s)
        };
        // keep the offset term inside the accumulator range
        while s > 0 && off_codes.abs() * (s as f64).exp2() >= BN_OFFSET_LIMIT {
            s -= 1;
            m = (ratio * (s as f64).exp2()).round() as i32;
        }
        multiplier.push(m);
        shift.push(s);
        let b = (off_codes * (s as f64).exp2()).round();
        offset.push(b.clamp(-BN_OFFSET_LIMIT, BN_OFFSET_LIMIT) as i64);
    }
    Ok(IntBatchNorm {
        input_zero: input.zero_point,
        multiplier,
        shift,
        offset,
        output,
    })
}

/// Positional-encoding codes at `scale`, saturated to `b+1` signed bits.
pub(crate) fn pe_codes(pe: &[f64], scale: f64, bits: u8) -> Vec<i32> {
    let lim = ((1i64 << bits) - 1) as f64;
    pe.iter()
        .map(|v| (v / scale).round().clamp(-lim, lim) as i32)
        .collect()
}

pub(crate) fn softmax_plan(scores: QuantParams, bits: u8) -> crate::quant::Result<SoftmaxPlan> {
    let f = SOFTMAX_FRAC_BITS;
    let ratio = scores.scale * std::f64::consts::LOG2_E * (f as f64).exp2();
    let (exp_multiplier, exp_shift) = fixed_point_multiplier(ratio)?;
    let entries = 1usize << f;
    let lut = (0..entries)
        .map(|j| ((j as f64 / entries as f64).exp2() * entries as f64).round() as i32)
        .collect();
    Ok(SoftmaxPlan {
        exp_multiplier,
        exp_shift,
        frac_bits: f,
        exp_bits: SOFTMAX_EXP_BITS,
        lut,
        output: prob_qparams(bits),
    })
}

/// Compiles a QAT-trained model with frozen observers into integer form.
pub fn export_int(model: &TransformerModel) -> Result<IntModel> {
    let q = model.quant.as_ref().ok_or(IntError::NotQuantized)?;
    if !q.is_frozen() {
        return Err(IntError::NotFrozen);
    }
    let bits = q.bits;
    let cfg = model.config;
    let qp = |b: Boundary| q.qparams(b);

    let input = qp(Boundary::Input)?;
    let embed = qp(Boundary::Embed)?;
    let (q_q, q_k, q_v) = (qp(Boundary::Query)?, qp(Boundary::Key)?, qp(Boundary::Value)?);
    let q_scores = qp(Boundary::Scores)?;
    let q_ctx = qp(Boundary::Context)?;
    let q_ao = qp(Boundary::AttnOut)?;
    let q_r1 = qp(Boundary::Residual1)?;
    let q_n1 = qp(Boundary::Norm1)?;
    let q_ff = qp(Boundary::FfHidden)?;
    let q_ff2 = qp(Boundary::FfOut)?;
    let q_r2 = qp(Boundary::Residual2)?;
    let q_n2 = qp(Boundary::Norm2)?;
    let output = qp(Boundary::Output)?;
    let probs = prob_qparams(bits);
    let inv_sqrt_d = 1.0 / (cfg.d_model as f64).sqrt();

    Ok(IntModel {
        config: cfg,
        bits,
        input,
        input_proj: export_linear(&model.input_proj, input, embed, bits, false)?,
        pe: pe_codes(&positional_encoding(cfg.n, cfg.d_model), embed.scale, bits),
        embed,
        query: export_linear(&model.query, embed, q_q, bits, false)?,
        key: export_linear(&model.key, embed, q_k, bits, false)?,
        value: export_linear(&model.value, embed, q_v, bits, false)?,
        scores: IntMatmul {
            lhs_zero: q_q.zero_point,
            rhs_zero: q_k.zero_point,
            plan: plan_requant(q_q.scale * q_k.scale * inv_sqrt_d / q_scores.scale, q_scores)?,
        },
        softmax: softmax_plan(q_scores, bits)?,
        context: IntMatmul {
            lhs_zero: probs.zero_point,
            rhs_zero: q_v.zero_point,
            plan: plan_requant(probs.scale * q_v.scale / q_ctx.scale, q_ctx)?,
        },
        attn_out: export_linear(&model.attn_out, q_ctx, q_ao, bits, false)?,
        residual1: export_residual(embed, q_ao, q_r1)?,
        norm1: export_batchnorm(&model.norm1, q_r1, q_n1)?,
        ff_up: export_linear(&model.ff_up, q_n1, q_ff, bits, true)?,
        ff_down: export_linear(&model.ff_down, q_ff, q_ff2, bits, false)?,
        residual2: export_residual(q_n1, q_ff2, q_r2)?,
        norm2: export_batchnorm(&model.norm2, q_r2, q_n2)?,
        head: export_linear(&model.head, q_n2, output, bits, false)?,
        output,
    })
}

/// Quantizes a real `n×m` window with the model's input parameters.
pub fn quantize_input(im: &IntModel, window: &[f64]) -> Result<IntTensor> {
    let (n, m) = (im.config.n, im.config.m);
    if window.len() != n * m {
        return Err(IntError::Shape {
            op: "quantize_input",
            lhs: vec![window.len()],
            rhs: vec![n, m],
        });
    }
    Ok(IntTensor::new(vec![n, m], quantize(window, &im.input), im.input))
}
