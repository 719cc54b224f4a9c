//! Fixtures shared by the benchmarks.

use qforge_core::intrt::{export_int, IntModel};
use qforge_core::{ModelConfig, Task, Tensor, TransformerModel};

/// A forecasting-shaped model (`n=12, m=1, k=1`) with observers calibrated on a sine.
pub fn calibrated_model(d_model: usize, bits: u8) -> TransformerModel {
    let cfg = ModelConfig {
        n: 12,
        m: 1,
        k: 1,
        d_model,
        bits: Some(bits),
        task: Task::Forecasting,
    };
    let mut model = TransformerModel::build(cfg, 1).expect("valid config");
    model.calibrate(&sine_batch(16, 12), 10).expect("calibration");
    model
}

pub fn int_model(d_model: usize, bits: u8) -> IntModel {
    export_int(&calibrated_model(d_model, bits)).expect("export")
}

/// `windows` stacked sine windows of length `n`, one feature.
pub fn sine_batch(windows: usize, n: usize) -> Tensor {
    let data = (0..windows * n).map(|i| (i as f64 * 0.31).sin()).collect();
    Tensor::new(vec![windows * n, 1], data).expect("shape")
}
