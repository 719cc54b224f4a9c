use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qforge_bench::{calibrated_model, int_model, sine_batch};
use qforge_core::codegen::emit_top;
use qforge_core::hwmodel::{estimate, PlatformSpec};
use qforge_core::intrt::{int_forward, quantize_input};
use qforge_core::search::{pareto_front, Genome, Trial, TrialStatus};
use qforge_core::{Graph, Mode, Tensor};
use std::hint::black_box;

fn int_inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("int_forward");
    for d in [8, 16, 32] {
        let im = int_model(d, 8);
        let window: Vec<f64> = (0..12).map(|i| (i as f64 * 0.5).sin()).collect();
        let x = quantize_input(&im, &window).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(d), &x, |b, x| {
            b.iter(|| int_forward(&im, black_box(x)).unwrap())
        });
    }
    group.finish();
}

fn qat_step(c: &mut Criterion) {
    let mut model = calibrated_model(16, 8);
    let batch = sine_batch(32, 12);
    let target = Tensor::new(vec![32, 1], vec![0.1; 32]).unwrap();
    c.bench_function("qat_forward_backward_bs32_d16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let f = model.forward_graph(&mut g, &batch, Mode::Qat, false).unwrap();
            let loss = g.mse_loss(f.output, &target).unwrap();
            g.backward(loss).unwrap();
            black_box(g.value(loss).data[0])
        })
    });
}

fn hardware(c: &mut Criterion) {
    let im = int_model(16, 8);
    let p = PlatformSpec::find("xc7s15", None).unwrap();
    c.bench_function("hw_estimate_d16", |b| b.iter(|| estimate(black_box(&im), &p)));
    c.bench_function("emit_vhdl_d16", |b| b.iter(|| emit_top(black_box(&im), &p).unwrap()));
}

fn pareto(c: &mut Criterion) {
    let trials: Vec<Trial> = (0..200)
        .map(|i| Trial {
            index: i,
            generation: 0,
            seed: 0,
            genome: Genome { bits: 8, batch_size: 32, lr: 1e-3, d_model: 16 },
            status: TrialStatus::Completed,
            val_loss: Some(((i * 37) % 101) as f64),
            test_metric: None,
            epochs: None,
            luts: 0,
            dsps: 0,
            brams: 0,
            cycles: None,
            latency_ms: None,
            power_mw: None,
            energy_mj: Some(((i * 53) % 97) as f64),
            reasons: Vec::new(),
            error: None,
        })
        .collect();
    c.bench_function("pareto_front_200", |b| b.iter(|| pareto_front(black_box(&trials))));
}

criterion_group!(benches, int_inference, qat_step, hardware, pareto);
criterion_main!(benches);
