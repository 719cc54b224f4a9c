//! Training loops (float baseline and QAT), losses, metrics and early stopping.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    abs_residuals, beta_grid, detect, f1_score, threshold_beta_sweep, DataError, MinMax, SweepMode,
    TaskData, Targets, Threshold, WindowSet,
};
use crate::intrt::{int_forward, quantize_input, IntError, IntModel};
use crate::model::{Mode, ModelError, Task, TransformerModel};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Int(#[from] IntError),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("{0}")]
    Contract(String),
    #[error("cannot write {path}: {msg}")]
    Io { path: String, msg: String },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl LossKind {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification => LossKind::CrossEntropy,
            Task::Forecasting | Task::Anomaly => LossKind::Mse,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl TrainSpec {
    pub fn new(batch_size: usize, lr: f64, loss: LossKind, seed: u64) -> Self {
        Self {
            batch_size,
            lr,
            max_epochs: 100,
            patience: 10,
            loss,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.patience >= self.max_epochs {
            return Err(TrainError::Contract(format!(
                "invalid training spec: bs={} lr={} patience={} max_epochs={}",
                self.batch_size, self.lr, self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Anything [`fit`] can optimize: records a forward pass and exposes its
/// parameters in the same order as the returned leaves.
pub trait Trainable: Clone {
    fn forward_batch(&mut self, g: &mut Graph, x: &Tensor, training: bool) -> crate::model::Result<(Var, Vec<Var>)>;
    fn params_mut(&mut self) -> Vec<&mut Vec<f64>>;
}

impl Trainable for TransformerModel {
    /// QAT when the model carries a bitwidth, float otherwise.
    fn forward_batch(&mut self, g: &mut Graph, x: &Tensor, training: bool) -> crate::model::Result<(Var, Vec<Var>)> {
        let mode = if self.quant.is_some() { Mode::Qat } else { Mode::Float };
        let f = self.forward_graph(g, x, mode, training)?;
        Ok((f.output, f.params))
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        TransformerModel::params_mut(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult<M> {
    pub best_val_loss: f64,
    /// 1-based epoch of the returned snapshot.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochLog>,
    pub model: M,
}

impl<M> FitResult<M> {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        write_log_csv(&self.history, path)
    }
}

/// Training log with columns `epoch,train_loss,val_loss,lr,wall_time_s`.
pub fn write_log_csv(history: &[EpochLog], path: &Path) -> Result<()> {
    let io = |e: &dyn std::fmt::Display| TrainError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    for row in history {
        w.serialize(row).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

fn batch_loss(g: &mut Graph, out: Var, ws: &WindowSet, idx: &[usize], loss: LossKind) -> Result<Var> {
    match (loss, &ws.targets) {
        (LossKind::Mse, Targets::Regression { .. }) => {
            let t = ws.regression_targets(idx).expect("regression targets");
            Ok(g.mse_loss(out, &t)?)
        }
        (LossKind::CrossEntropy, Targets::Classes { .. }) => {
            let t = ws.class_targets(idx).expect("class targets");
            Ok(g.cross_entropy_loss(out, &t)?)
        }
        _ => Err(TrainError::Contract("loss kind does not match the targets".into())),
    }
}

const EVAL_CHUNK: usize = 256;

/// Mean loss over a split, evaluated in inference mode.
pub fn evaluate_loss<M: Trainable>(model: &mut M, ws: &WindowSet, loss: LossKind) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..ws.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let (out, _) = model.forward_batch(&mut g, &ws.batch_inputs(chunk), false)?;
        let l = batch_loss(&mut g, out, ws, chunk, loss)?;
        total += g.value(l).data[0] * chunk.len() as f64;
    }
    Ok(total / ws.len().max(1) as f64)
}

/// Adam with global-norm clipping and early stopping on validation loss.
///
/// The training split is reshuffled every epoch from the spec's seed; the
/// returned model is the snapshot of the best validation epoch.
pub fn fit<M: Trainable>(model: M, train: &WindowSet, val: &WindowSet, spec: &TrainSpec) -> Result<FitResult<M>> {
    spec.validate()?;
    if train.is_empty() {
        return Err(DataError::EmptySplit("train").into());
    }
    if val.is_empty() {
        return Err(DataError::EmptySplit("val").into());
    }
    let mut model = model;
    let sizes: Vec<usize> = model.params_mut().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();

    let mut best: Option<(f64, usize, M)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=spec.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let mut g = Graph::new();
            let (out, leaves) = model.forward_batch(&mut g, &train.batch_inputs(batch), true)?;
            let loss = batch_loss(&mut g, out, train, batch, spec.loss)?;
            let lv = g.value(loss).data[0];
            if !lv.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            total += lv * batch.len() as f64;
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = leaves
                .iter()
                .zip(&sizes)
                .map(|(&v, &n)| g.grad(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
                .collect();
            clip_global_norm(&mut grads, CLIP_NORM);
            adam.step(model.params_mut(), &grads, spec.lr);
        }
        let train_loss = total / train.len() as f64;
        let val_loss = evaluate_loss(&mut model, val, spec.loss)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: spec.lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= spec.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, model) = best.expect("at least one epoch");
    Ok(FitResult {
        best_val_loss,
        best_epoch,
        epochs_run: history.len(),
        history,
        model,
    })
}

/// Row-major `count×k` outputs of the float or QAT forward.
pub fn predict(model: &mut TransformerModel, ws: &WindowSet, mode: Mode) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ws.len() * model.config.k);
    let idx: Vec<usize> = (0..ws.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(model.forward(&ws.batch_inputs(chunk), mode)?.data);
    }
    Ok(out)
}

/// Dequantized `count×k` outputs of the integer engine.
pub fn predict_int(im: &IntModel, ws: &WindowSet) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ws.len() * im.config.k);
    for i in 0..ws.len() {
        let x = quantize_input(im, ws.window(i))?;
        let (y, _) = int_forward(im, &x)?;
        out.extend(y.dequantize());
    }
    Ok(out)
}

/// Ground truth handed to [`metric`].
#[derive(Clone, Copy, Debug)]
pub enum Truth<'a> {
    Values(&'a [f64]),
    Classes(&'a [usize]),
    Flags(&'a [bool]),
}

pub fn rmse(pred: &[f64], target: &[f64], denorm: &MinMax) -> f64 {
    let k = denorm.min.len().max(1);
    let se: f64 = pred
        .iter()
        .zip(target)
        .enumerate()
        .map(|(i, (&p, &t))| {
            let d = denorm.inverse_value(i % k, p) - denorm.inverse_value(i % k, t);
            d * d
        })
        .sum();
    (se / pred.len().max(1) as f64).sqrt()
}

pub fn accuracy(logits: &[f64], k: usize, classes: &[usize]) -> f64 {
    let hits = logits
        .chunks(k)
        .zip(classes)
        .filter(|(row, &c)| argmax(row) == c)
        .count();
    hits as f64 / classes.len().max(1) as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Task metric: RMSE on denormalized values (forecasting), accuracy
/// (classification), or binary F1 of flags where `preds > 0.5` (anomaly).
pub fn metric(task: Task, preds: &[f64], k: usize, truth: Truth<'_>, denorm: Option<&MinMax>) -> Result<f64> {
    match (task, truth) {
        (Task::Forecasting, Truth::Values(t)) => {
            let d = denorm.ok_or_else(|| TrainError::Contract("RMSE needs the target scaler".into()))?;
            Ok(rmse(preds, t, d))
        }
        (Task::Classification, Truth::Classes(c)) => Ok(accuracy(preds, k, c)),
        (Task::Anomaly, Truth::Flags(f)) => {
            let p: Vec<bool> = preds.iter().map(|&v| v > 0.5).collect();
            Ok(f1_score(&p, f))
        }
        _ => Err(TrainError::Contract(format!("truth kind does not match task {task}"))),
    }
}

fn regression_values(ws: &WindowSet) -> &[f64] {
    match &ws.targets {
        Targets::Regression { values, .. } => values,
        Targets::Classes { .. } => &[],
    }
}

/// Residual threshold fitted on validation predictions, and test F1 of the
/// resulting detector.
pub fn anomaly_detection(
    val_preds: &[f64],
    val: &WindowSet,
    test_preds: &[f64],
    test: &WindowSet,
) -> Result<(Threshold, f64)> {
    let k = val.k();
    let rv = abs_residuals(val_preds, regression_values(val), k);
    let th = threshold_beta_sweep(&rv, &beta_grid(), val.anomaly.as_deref(), SweepMode::PeakDeviation)?;
    let rt = abs_residuals(test_preds, regression_values(test), k);
    let flags = detect(&rt, &th);
    let truth = test
        .anomaly
        .as_deref()
        .ok_or_else(|| TrainError::Contract("anomaly split has no labels".into()))?;
    Ok((th, f1_score(&flags, truth)))
}

/// Test metrics of one prediction vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: f64,
    pub threshold: Option<Threshold>,
}

/// Evaluates test (and, for anomaly detection, validation) predictions.
pub fn evaluate(data: &TaskData, val_preds: &[f64], test_preds: &[f64]) -> Result<Evaluation> {
    let k = data.k();
    match data.task {
        Task::Forecasting => Ok(Evaluation {
            metric: metric(
                Task::Forecasting,
                test_preds,
                k,
                Truth::Values(regression_values(&data.test)),
                data.target_scaler.as_ref(),
            )?,
            threshold: None,
        }),
        Task::Classification => {
            let classes = data
                .test
                .class_targets(&(0..data.test.len()).collect::<Vec<_>>())
                .unwrap_or_default();
            Ok(Evaluation {
                metric: accuracy(test_preds, k, &classes),
                threshold: None,
            })
        }
        Task::Anomaly => {
            let (th, f1) = anomaly_detection(val_preds, &data.val, test_preds, &data.test)?;
            Ok(Evaluation {
                metric: f1,
                threshold: Some(th),
            })
        }
    }
}
