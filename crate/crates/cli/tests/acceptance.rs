//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always shown, and runs the criteria one
//! after another so the reported runtimes are not inflated by each other.

use std::path::Path;
use std::time::{Duration, Instant};

use qforge_cli::{cmd_search, cmd_train, resolve, ModelFile, RunArgs};
use qforge_core::codegen::{emit_top, run_external_sim, SimStatus};
use qforge_core::data::{prepare, synth_task_with_noise, Fractions, SynthKind};
use qforge_core::hwmodel::{self, HwShape, PlatformSpec};
use qforge_core::intrt::{export_int, int_forward, IntTensor};
use qforge_core::quant::{self, plan_requant, QuantParams, Scheme};
use qforge_core::search::{self, non_dominated_sort, pareto_front, Genome, Trial, TrialStatus};
use qforge_core::tensor::{BatchNormStats, BnMode};
use qforge_core::train::{self, LossKind, TrainSpec};
use qforge_core::{count_parameters, Graph, Mode, ModelConfig, Task, Tensor, TransformerModel, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "parameter counts", limit: secs(1), run: c1_parameter_counts },
        Criterion { id: 2, name: "energy identity", limit: secs(1), run: c2_energy_identity },
        Criterion { id: 3, name: "quantization properties", limit: secs(30), run: c3_quantization },
        Criterion { id: 4, name: "gradient correctness", limit: secs(120), run: c4_gradients },
        Criterion { id: 5, name: "integer/QAT consistency", limit: secs(300), run: c5_int_consistency },
        Criterion { id: 6, name: "QAT viability", limit: secs(900), run: c6_qat_viability },
        Criterion { id: 7, name: "Pareto correctness", limit: secs(60), run: c7_pareto },
        Criterion { id: 8, name: "deployability filter", limit: secs(60), run: c8_deployability },
        Criterion { id: 9, name: "codegen determinism", limit: secs(300), run: c9_codegen },
        Criterion { id: 10, name: "end-to-end search smoke", limit: secs(600), run: c10_search_smoke },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        let label = format!("criterion {:>2} {}", c.id, c.name);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > c.limit => Err(format!("{d}; took {took:.1?}, limit {:?}", c.limit)),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("{label}: PASS [{:.2}s] {detail}", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("{label}: FAIL [{:.2}s] {why}", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_args(out: &Path) -> RunArgs {
    RunArgs {
        out: Some(out.to_path_buf()),
        ..RunArgs::default()
    }
}

// ---------------------------------------------------------------------------

fn c1_parameter_counts() -> Check {
    // (dataset, m, k, d_model, reported)
    let rows = [
        ("PeMS", 1, 1, 16, 3329),
        ("UCIHAR", 9, 6, 8, 1006),
        ("WISDM", 3, 6, 40, 20126),
        ("ALFA", 17, 10, 8, 1106),
        ("SKAB", 8, 1, 24, 7465),
    ];
    for (name, m, k, d, want) in rows {
        let cfg = ModelConfig { n: 24, m, k, d_model: d, bits: Some(8), task: Task::Forecasting };
        let got = count_parameters(&cfg);
        ensure(got == want, || format!("{name}: {got} != {want}"))?;
        let mut built = TransformerModel::build(cfg, 0).map_err(|e| e.to_string())?;
        ensure(built.param_count() == want, || format!("{name}: built model has {}", built.param_count()))?;
    }
    let airu_univariate = count_parameters(&ModelConfig { n: 24, m: 1, k: 1, d_model: 8, bits: None, task: Task::Forecasting });
    let airu_seven = count_parameters(&ModelConfig { n: 24, m: 7, k: 1, d_model: 8, bits: None, task: Task::Forecasting });
    Ok(format!(
        "5/5 exact; AirU reported 897: m=1 reading gives {airu_univariate}, 7-feature reading gives {airu_seven}"
    ))
}

fn c2_energy_identity() -> Check {
    // (dataset, power mW, latency ms, reported energy mJ)
    let rows = [
        ("PeMS", 65.0, 1.203, 0.078),
        ("AirU", 64.0, 0.570, 0.036),
        ("UCIHAR", 65.0, 1.034, 0.067),
        ("WISDM", 71.0, 12.04, 0.855),
        ("ALFA", 62.0, 0.527, 0.033),
        ("SKAB", 68.0, 2.261, 0.154),
    ];
    let mut worst = 0.0f64;
    for (name, p, t, e) in rows {
        let got = hwmodel::energy(p, t);
        let err = (got - e).abs();
        worst = worst.max(err);
        ensure(err <= 0.0005, || format!("{name}: {got:.6} vs {e}"))?;
    }
    Ok(format!("6/6 rows, max |P·T − E| = {worst:.6} mJ"))
}

fn c3_quantization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for bits in [4u8, 6, 8] {
        let lo = -rng.random_range(0.1..10.0);
        let hi = rng.random_range(0.1..10.0);
        let qp = QuantParams::asymmetric(lo, hi, bits).map_err(|e| e.to_string())?;
        let sym = QuantParams::symmetric(lo, hi, bits).map_err(|e| e.to_string())?;
        ensure(sym.zero_point == 0 && sym.scheme == Scheme::Symmetric, || "symmetric Z != 0".into())?;
        for p in [qp, sym] {
            let (a, b) = (p.real_min(), p.real_max());
            for _ in 0..100_000 {
                let x = rng.random_range(a..=b);
                let r = p.dequantize_value(p.quantize_value(x));
                ensure((x - r).abs() <= p.scale / 2.0 * (1.0 + 1e-12), || {
                    format!("b={bits} {:?}: x={x} deq={r} S={}", p.scheme, p.scale)
                })?;
            }
        }
        for _ in 0..1000 {
            let a = rng.random_range(-100.0..100.0f64);
            let s = QuantParams::symmetric(a.min(-1e-3), a.abs().max(1e-3), bits).map_err(|e| e.to_string())?;
            ensure(s.zero_point == 0, || "symmetric Z != 0".into())?;
        }
    }
    let out = QuantParams::symmetric_with_scale(1.0, 16);
    let mut worst = 0i64;
    for _ in 0..1_000_000 {
        let ratio = 10f64.powf(rng.random_range(-6.0..0.0));
        let plan = plan_requant(ratio, out).map_err(|e| e.to_string())?;
        let acc: i32 = rng.random();
        let got = plan.rescale(acc as i64);
        let want = (acc as f64 * ratio).round() as i64;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1, || format!("acc={acc} ratio={ratio}: {got} vs {want}"))?;
    }
    Ok(format!(
        "round-trip ≤ S/2 on 2×10⁵ samples per b∈{{4,6,8}}, Z=0 symmetric, requant max error {worst} on 10⁶ pairs"
    ))
}

// ---------------------------------------------------------------------------

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    // keep values away from ReLU's kink
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Relative error ‖g − ĝ‖ / max(‖g‖, ‖ĝ‖) between tape gradients and
/// central differences of a scalar function of the given leaves.
fn grad_error(inputs: &[Tensor], build: &Build, surrogate: bool) -> f64 {
    let new_graph = || if surrogate { Graph::with_ste_surrogate() } else { Graph::new() };
    let eval = |ts: &[Tensor]| {
        let mut g = new_graph();
        let leaves: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let loss = build(&mut g, &leaves);
        (g, leaves, loss)
    };
    let (mut g, leaves, loss) = eval(inputs);
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = leaves
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= h;
            let f = |ts: &[Tensor]| {
                let (g, _, l) = eval(ts);
                g.value(l).data[0]
            };
            numeric.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    rel_error(&analytic, &numeric)
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn mse_to(g: &mut Graph, v: Var, rng_seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = g.value(v).shape.clone();
    let target = rand_tensor(&mut rng, shape);
    g.mse_loss(v, &target).unwrap()
}

/// One seeded op instance: (op name, leaves, loss builder, surrogate graph).
fn op_instance(kind: usize, seed: u64) -> (&'static str, Vec<Tensor>, Box<Build>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(2..5usize);
    let c = rng.random_range(2..5usize);
    let q = rng.random_range(2..5usize);
    let t = |rng: &mut ChaCha8Rng, s: Vec<usize>| rand_tensor(rng, s);
    match kind {
        0 => ("matmul", vec![t(&mut rng, vec![r, c]), t(&mut rng, vec![c, q])], Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            mse_to(g, y, seed)
        }), false),
        1 => ("add", vec![t(&mut rng, vec![r, c]), t(&mut rng, vec![r, c])], Box::new(move |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            mse_to(g, y, seed)
        }), false),
        2 => ("add_row", vec![t(&mut rng, vec![r, c]), t(&mut rng, vec![c])], Box::new(move |g, v| {
            let y = g.add_row(v[0], v[1]).unwrap();
            mse_to(g, y, seed)
        }), false),
        3 => ("scale", vec![t(&mut rng, vec![r, c])], Box::new(move |g, v| {
            let y = g.scale(v[0], -1.7);
            mse_to(g, y, seed)
        }), false),
        4 => ("relu", vec![t(&mut rng, vec![r, c])], Box::new(move |g, v| {
            let y = g.relu(v[0]);
            mse_to(g, y, seed)
        }), false),
        5 => ("transpose", vec![t(&mut rng, vec![r, c])], Box::new(move |g, v| {
            let y = g.transpose(v[0]).unwrap();
            mse_to(g, y, seed)
        }), false),
        6 => ("sum", vec![t(&mut rng, vec![r, c]), t(&mut rng, vec![r, c])], Box::new(move |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            let s = g.sum(y);
            g.scale(s, 0.3)
        }), false),
        7 => ("softmax_rows", vec![t(&mut rng, vec![r, c])], Box::new(move |g, v| {
            let y = g.softmax_rows(v[0]);
            mse_to(g, y, seed)
        }), false),
        8 => ("batchnorm(train)", vec![t(&mut rng, vec![r + 2, c]), t(&mut rng, vec![c]), t(&mut rng, vec![c])], Box::new(move |g, v| {
            let mut stats = BatchNormStats::new(c);
            let y = g.batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Train).unwrap();
            mse_to(g, y, seed)
        }), false),
        9 => ("batchnorm(eval)", vec![t(&mut rng, vec![r, c]), t(&mut rng, vec![c]), t(&mut rng, vec![c])], Box::new(move |g, v| {
            let mut stats = BatchNormStats::new(c);
            stats.running_mean = (0..c).map(|i| 0.1 * i as f64).collect();
            stats.running_var = (0..c).map(|i| 0.5 + 0.2 * i as f64).collect();
            stats.initialized = true;
            let y = g.batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Eval).unwrap();
            mse_to(g, y, seed)
        }), false),
        10 => ("mean_blocks", vec![t(&mut rng, vec![2 * r, c])], Box::new(move |g, v| {
            let y = g.mean_blocks(v[0], r).unwrap();
            mse_to(g, y, seed)
        }), false),
        11 => ("block_matmul_t", vec![t(&mut rng, vec![2 * r, q]), t(&mut rng, vec![2 * r, q])], Box::new(move |g, v| {
            let y = g.block_matmul_t(v[0], v[1], r).unwrap();
            mse_to(g, y, seed)
        }), false),
        12 => ("block_matmul", vec![t(&mut rng, vec![2 * r, r]), t(&mut rng, vec![2 * r, q])], Box::new(move |g, v| {
            let y = g.block_matmul(v[0], v[1], r).unwrap();
            mse_to(g, y, seed)
        }), false),
        13 => ("fake_quantize(ste)", vec![t(&mut rng, vec![r, c])], Box::new(move |g, v| {
            let qp = QuantParams::asymmetric(-2.0, 2.0, 6).unwrap();
            let y = g.fake_quantize(v[0], &qp);
            mse_to(g, y, seed)
        }), true),
        14 => ("round_to_grid(ste)", vec![t(&mut rng, vec![r, c])], Box::new(move |g, v| {
            let y = g.round_to_grid(v[0], 0.05);
            mse_to(g, y, seed)
        }), true),
        _ => ("cross_entropy", vec![t(&mut rng, vec![r, c])], Box::new(move |g, v| {
            let targets: Vec<usize> = (0..r).map(|i| (i * 7 + seed as usize) % c).collect();
            g.cross_entropy_loss(v[0], &targets).unwrap()
        }), false),
    }
}

const OP_KINDS: usize = 16;

/// Full QAT forward (STE surrogate) of a calibrated micro-model: tape
/// gradients for every parameter against central differences. The two
/// range-defining entries of each fake-quantized weight tensor are skipped:
/// their clamp bounds move with them, which the STE deliberately ignores.
fn qat_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        n: rng.random_range(3..6),
        m: rng.random_range(1..3),
        k: rng.random_range(1..3),
        d_model: 4,
        bits: Some([4u8, 6, 8][rng.random_range(0..3)]),
        task: Task::Forecasting,
    };
    let mut model = TransformerModel::build(cfg, seed).unwrap();
    let rows = 3 * cfg.n;
    let batch = rand_tensor(&mut rng, vec![rows, cfg.m]);
    model.calibrate(&batch, 5).unwrap();
    let target = rand_tensor(&mut rng, vec![3, cfg.k]);
    let loss_of = |m: &mut TransformerModel, grads: bool| {
        let mut g = Graph::with_ste_surrogate();
        let f = m.forward_graph(&mut g, &batch, Mode::Qat, false).unwrap();
        let loss = g.mse_loss(f.output, &target).unwrap();
        let l = g.value(loss).data[0];
        if grads {
            g.backward(loss).unwrap();
            let gs = f.params.iter().map(|&p| g.grad(p).unwrap().to_vec()).collect::<Vec<_>>();
            (l, gs)
        } else {
            (l, Vec::new())
        }
    };
    let (_, grads) = loss_of(&mut model, true);
    // weight tensors sit at even positions except the two BatchNorm pairs
    let quantized_weight = |i: usize| i % 2 == 0 && i != 14 && i != 16;
    let h = 1e-6;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let n_params = model.params_mut().len();
    for i in 0..n_params {
        let values = model.params_mut()[i].clone();
        let skip: Vec<usize> = if quantized_weight(i) {
            let (lo, hi) = quant::tensor_range(&values);
            values
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == lo || v == hi)
                .map(|(j, _)| j)
                .collect()
        } else {
            Vec::new()
        };
        for j in 0..values.len() {
            if skip.contains(&j) {
                continue;
            }
            let orig = values[j];
            model.params_mut()[i][j] = orig + h;
            let (lp, _) = loss_of(&mut model, false);
            model.params_mut()[i][j] = orig - h;
            let (lm, _) = loss_of(&mut model, false);
            model.params_mut()[i][j] = orig;
            a.push(grads[i][j]);
            b.push((lp - lm) / (2.0 * h));
        }
    }
    rel_error(&a, &b)
}

fn c4_gradients() -> Check {
    let mut worst = (0.0f64, "");
    let mut qat_worst = 0.0f64;
    let instances = 100;
    for i in 0..instances {
        let seed = 4000 + i as u64;
        let (name, err) = if i % (OP_KINDS + 1) == OP_KINDS {
            let e = qat_instance(seed);
            qat_worst = qat_worst.max(e);
            ("qat forward", e)
        } else {
            let (name, inputs, build, surrogate) = op_instance(i % (OP_KINDS + 1), seed);
            (name, grad_error(&inputs, build.as_ref(), surrogate))
        };
        if !(err <= 1e-4) {
            return Err(format!("instance {i} ({name}): relative error {err:e}"));
        }
        if err > worst.0 {
            worst = (err, name);
        }
    }
    Ok(format!(
        "{instances} instances over {} ops + full QAT forward; worst {:.1e} ({}), QAT forward worst {qat_worst:.1e}",
        OP_KINDS, worst.0, worst.1
    ))
}

// ---------------------------------------------------------------------------

fn c5_int_consistency() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = resolve(&RunArgs { bits: Some(8), ..run_args(dir.path()) }).map_err(|e| e.to_string())?;
    cmd_train(&cfg).map_err(|e| e.to_string())?;
    let mut model = ModelFile::load(&dir.path().join("model.json"))
        .map_err(|e| e.to_string())?
        .model
        .ok_or("model.json without weights")?;
    let im = ModelFile::load(&dir.path().join("int_model.json"))
        .map_err(|e| e.to_string())?
        .int_model
        .ok_or("int_model.json without export")?;
    let data = qforge_cli::load_task_data(&cfg).map_err(|e| e.to_string())?;
    let pools = [&data.train, &data.val, &data.test];
    let (n, m) = (im.config.n, im.config.m);
    let s_out = im.output.scale;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 1000;
    let mut within = 0;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let pool = pools[rng.random_range(0..3)];
        let w = pool.window(rng.random_range(0..pool.len()));
        let x = Tensor::new(vec![n, m], w.to_vec()).map_err(|e| e.to_string())?;
        let qat = model.forward(&x, Mode::Qat).map_err(|e| e.to_string())?;
        let codes = quant::quantize(w, &im.input);
        let (y, _) = int_forward(&im, &IntTensor::new(vec![n, m], codes, im.input)).map_err(|e| e.to_string())?;
        let dev = y
            .dequantize()
            .iter()
            .zip(&qat.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev / s_out);
        if dev <= 3.0 * s_out {
            within += 1;
        }
    }
    let frac = within as f64 / trials as f64;
    let detail = format!("{within}/{trials} windows within 3·S_out (worst {worst:.2}·S_out)");
    if frac >= 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Float and 8-bit QAT/integer test metrics on one task's fixture.
fn float_vs_int(args: RunArgs) -> Result<(f64, f64), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = resolve(&RunArgs { baseline: true, bits: Some(8), ..RunArgs { out: Some(dir.path().into()), ..args } })
        .map_err(|e| e.to_string())?;
    let report = cmd_train(&cfg).map_err(|e| e.to_string())?;
    let m = report.metrics;
    Ok((m.float_metric.ok_or("no float baseline")?, m.int_metric))
}

/// Same comparison on a noiseless sine; reported only.
fn noiseless_ratio() -> Result<f64, String> {
    let seed = 42;
    let ds = synth_task_with_noise(SynthKind::SineForecast, seed, 0.0);
    let data = prepare(Task::Forecasting, &ds, SynthKind::SineForecast.window(), Fractions::default(), 1, None, seed)
        .map_err(|e| e.to_string())?;
    let spec = TrainSpec::new(32, 5e-3, LossKind::for_task(Task::Forecasting), seed);
    let metric = |bits: Option<u8>| -> Result<f64, String> {
        let cfg = ModelConfig { n: data.n(), m: data.m(), k: data.k(), d_model: 16, bits, task: Task::Forecasting };
        let model = TransformerModel::build(cfg, seed).map_err(|e| e.to_string())?;
        let mut model = train::fit(model, &data.train, &data.val, &spec).map_err(|e| e.to_string())?.model;
        let (val, test) = match bits {
            None => (
                train::predict(&mut model, &data.val, Mode::Float).map_err(|e| e.to_string())?,
                train::predict(&mut model, &data.test, Mode::Float).map_err(|e| e.to_string())?,
            ),
            Some(_) => {
                model.freeze_observers();
                let im = export_int(&model).map_err(|e| e.to_string())?;
                (
                    train::predict_int(&im, &data.val).map_err(|e| e.to_string())?,
                    train::predict_int(&im, &data.test).map_err(|e| e.to_string())?,
                )
            }
        };
        Ok(train::evaluate(&data, &val, &test).map_err(|e| e.to_string())?.metric)
    };
    let f = metric(None)?;
    let i = metric(Some(8))?;
    Ok(i / f)
}

fn c6_qat_viability() -> Check {
    let (f_rmse, i_rmse) = float_vs_int(RunArgs { task: Some("forecasting".into()), ..RunArgs::default() })?;
    let (f_acc, i_acc) = float_vs_int(RunArgs { task: Some("classification".into()), ..RunArgs::default() })?;
    let rmse_ok = i_rmse <= 1.25 * f_rmse;
    let acc_ok = i_acc >= 0.95 * f_acc;
    let noiseless = match noiseless_ratio() {
        Ok(r) => format!("{r:.3}"),
        Err(e) => format!("n/a ({e})"),
    };
    let detail = format!(
        "sine RMSE int {i_rmse:.4} / float {f_rmse:.4} = {:.3} (≤ 1.25); shapelet accuracy int {i_acc:.3} vs float {f_acc:.3} (≥ 95%); noiseless sine ratio {noiseless} (informational)",
        i_rmse / f_rmse
    );
    if rmse_ok && acc_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------

fn random_trial(rng: &mut ChaCha8Rng, index: usize, grid: bool) -> Trial {
    let status = match rng.random_range(0..10) {
        0 => TrialStatus::RejectedResources,
        1 => TrialStatus::FailedTraining,
        _ => TrialStatus::Completed,
    };
    let value = |rng: &mut ChaCha8Rng| {
        if grid {
            rng.random_range(0..8) as f64 / 8.0
        } else {
            rng.random_range(0.0..1.0)
        }
    };
    let done = status == TrialStatus::Completed;
    let (l, e) = (value(rng), value(rng));
    Trial {
        index,
        generation: 0,
        seed: 0,
        genome: Genome { bits: 8, batch_size: 32, lr: 1e-3, d_model: 16 },
        status,
        val_loss: (done || rng.random_bool(0.5)).then_some(l),
        test_metric: None,
        epochs: None,
        luts: 0,
        dsps: 0,
        brams: 0,
        cycles: None,
        latency_ms: None,
        power_mw: None,
        energy_mj: done.then_some(e),
        reasons: Vec::new(),
        error: None,
    }
}

fn c7_pareto() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ledgers = 1000;
    let mut members = 0;
    for l in 0..ledgers {
        let size = rng.random_range(0..=200);
        let grid = l % 2 == 0;
        let trials: Vec<Trial> = (0..size).map(|i| random_trial(&mut rng, i, grid)).collect();
        let pts: Vec<(usize, f64, f64)> = trials
            .iter()
            .filter(|t| t.status == TrialStatus::Completed)
            .map(|t| (t.index, t.val_loss.unwrap(), t.energy_mj.unwrap()))
            .collect();
        let brute: Vec<usize> = pts
            .iter()
            .filter(|&&(_, l1, e1)| !pts.iter().any(|&(_, l2, e2)| l2 <= l1 && e2 <= e1 && (l2 < l1 || e2 < e1)))
            .map(|p| p.0)
            .collect();
        let front = pareto_front(&trials);
        ensure(front.members == brute, || format!("ledger {l}: {:?} vs {brute:?}", front.members))?;
        ensure(front.empty == pts.is_empty(), || format!("ledger {l}: empty flag"))?;
        let objs: Vec<[f64; 2]> = pts.iter().map(|p| [p.1, p.2]).collect();
        let mut first: Vec<usize> = non_dominated_sort(&objs)
            .first()
            .map(|f| f.iter().map(|&i| pts[i].0).collect())
            .unwrap_or_default();
        first.sort_unstable();
        ensure(first == brute, || format!("ledger {l}: sorted front 0 differs"))?;
        members += brute.len();
    }
    Ok(format!("{ledgers} ledgers (≤200 trials, half with ties), {members} front members agree with enumeration"))
}

fn c8_deployability() -> Check {
    let ice = PlatformSpec::find("ice40up5k", None).map_err(|e| e.to_string())?;
    let shape = HwShape { n: 12, m: 1, k: 1, d_model: 64, bits: 8 };
    let est = hwmodel::estimate_shape(&shape, &ice);
    ensure(!est.deployable, || "d_model=64, b=8 accepted on iCE40".into())?;
    let pct = est
        .reasons
        .iter()
        .all(|r| r.contains('+') && r.ends_with('%'));
    ensure(pct && !est.reasons.is_empty(), || format!("reasons lack overshoot: {:?}", est.reasons))?;

    // short searches: trial training is capped at 2 epochs, the filter is what is tested
    let search_on = |platform: &str, trials: usize| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = resolve(&RunArgs {
            platform: Some(platform.into()),
            trials: Some(trials),
            epochs: Some(2),
            ..run_args(dir.path())
        })
        .map_err(|e| e.to_string())?;
        let report = cmd_search(&cfg).map_err(|e| e.to_string())?;
        let spec = cfg.platform;
        for &i in &report.front {
            let t = &report.trials[i];
            ensure(
                t.luts <= spec.lut_budget && t.dsps <= spec.dsp_budget && t.brams <= spec.bram_budget,
                || format!("{platform}: front member {i} over budget"),
            )?;
        }
        let rejected = report.trials.iter().filter(|t| t.status == TrialStatus::RejectedResources).count();
        Ok::<_, String>((report, rejected))
    };
    let (ice_run, ice_rejected) = search_on("ice40up5k", 8)?;
    ensure(ice_rejected == ice_run.trials.len() && ice_run.front.is_empty(), || {
        format!("iCE40 accepted {} of {} trials", ice_run.trials.len() - ice_rejected, ice_run.trials.len())
    })?;
    let (xc_run, xc_rejected) = search_on("xc7s15", 16)?;
    ensure(!xc_run.front.is_empty(), || "xc7s15: empty front".into())?;
    Ok(format!(
        "d=64 b=8 rejected on {} ({}); iCE40 search rejects all {ice_rejected} trials (empty front); \
         xc7s15 search: {xc_rejected}/{} rejected, all {} front members within budget",
        ice.name,
        est.reasons.join(", "),
        xc_run.trials.len(),
        xc_run.front.len()
    ))
}

fn c9_codegen() -> Check {
    let tiny = || {
        let cfg = ModelConfig { n: 6, m: 2, k: 1, d_model: 8, bits: Some(6), task: Task::Forecasting };
        let mut model = TransformerModel::build(cfg, 11).unwrap();
        let rows = 8 * 6;
        let data = (0..rows * 2).map(|i| ((i as f64) * 0.37).sin()).collect();
        model.calibrate(&Tensor::new(vec![rows, 2], data).unwrap(), 20).unwrap();
        export_int(&model).unwrap()
    };
    let p = PlatformSpec::find("xc7s15", None).map_err(|e| e.to_string())?;
    let a = emit_top(&tiny(), &p).map_err(|e| e.to_string())?;
    let b = emit_top(&tiny(), &p).map_err(|e| e.to_string())?;
    let da = tempfile::tempdir().map_err(|e| e.to_string())?;
    let db = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fa = a.write_to(da.path()).map_err(|e| e.to_string())?;
    b.write_to(db.path()).map_err(|e| e.to_string())?;
    for f in &fa {
        let name = f.file_name().unwrap();
        let x = std::fs::read(f).map_err(|e| e.to_string())?;
        let y = std::fs::read(db.path().join(name)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{} differs between runs", name.to_string_lossy()))?;
    }
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sim = run_external_sim(&a, work.path()).map_err(|e| e.to_string())?;
    let files = fa.len();
    match sim {
        SimStatus::Passed { vectors, .. } => Ok(format!("{files} files byte-identical; simulation matched {vectors} golden vectors")),
        SimStatus::Skipped(_) => Ok(format!("{files} files byte-identical; simulation {sim}")),
    }
}

fn c10_search_smoke() -> Check {
    let run = |dir: &Path| -> Result<Vec<u8>, String> {
        let cfg = resolve(&RunArgs { trials: Some(5), ..run_args(dir) }).map_err(|e| e.to_string())?;
        let r = cmd_search(&cfg).map_err(|e| e.to_string())?;
        ensure(r.trials.len() == 5, || format!("{} trials", r.trials.len()))?;
        std::fs::read(&r.ledger).map_err(|e| e.to_string())
    };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let first = run(a.path())?;
    let one = start.elapsed();
    let second = run(b.path())?;
    ensure(first == second, || "ledgers differ between identical runs".into())?;

    // replay: every line parses back to the same record, and resuming the
    // finished search leaves the ledger untouched
    let trials = search::read_ledger(&a.path().join("ledger.jsonl")).map_err(|e| e.to_string())?;
    let text = String::from_utf8(first.clone()).map_err(|e| e.to_string())?;
    for (t, line) in trials.iter().zip(text.lines()) {
        ensure(search::ledger_line(t) == line, || format!("trial {} does not round-trip", t.index))?;
    }
    let again = run(a.path())?;
    ensure(again == first, || "resume rewrote the ledger".into())?;
    let completed = trials.iter().filter(|t| t.status == TrialStatus::Completed).count();
    Ok(format!(
        "5 trials ({completed} completed) in {:.1}s per run; ledgers byte-identical ({} bytes) and replayable",
        one.as_secs_f64(),
        first.len()
    ))
}
