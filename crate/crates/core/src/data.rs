//! Dataset ingestion, windowing, normalization, splitting, synthetic
//! fixtures and anomaly thresholding.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Task;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("not enough data: {t} steps for window length {n}")]
    Insufficient { t: usize, n: usize },
    #[error("split '{0}' is empty")]
    EmptySplit(&'static str),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Class,
    Anomaly,
}

/// Column layout of a dataset CSV. Shipped as one JSON document per dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub task: Task,
    pub features: Vec<String>,
    /// Subset of `features` predicted one step ahead (forecasting/anomaly).
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub label_kind: Option<LabelKind>,
    pub window: usize,
    #[serde(default = "one")]
    pub downsample: usize,
    /// Per-class cap on the number of windows (classification).
    #[serde(default)]
    pub class_cap: Option<usize>,
}

fn one() -> usize {
    1
}

const BUILTIN_SCHEMAS: [(&str, &str); 6] = [
    ("pems", include_str!("../datasets/pems.json")),
    ("airu", include_str!("../datasets/airu.json")),
    ("ucihar", include_str!("../datasets/ucihar.json")),
    ("wisdm", include_str!("../datasets/wisdm.json")),
    ("alfa", include_str!("../datasets/alfa.json")),
    ("skab", include_str!("../datasets/skab.json")),
];

impl DatasetSchema {
    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_SCHEMAS
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, s)| serde_json::from_str(s).expect("builtin schema parses"))
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN_SCHEMAS.iter().map(|(n, _)| *n).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DataError::Schema(e.to_string()))
    }

    pub fn target_indices(&self) -> Result<Vec<usize>> {
        self.targets
            .iter()
            .map(|t| {
                self.features
                    .iter()
                    .position(|f| f == t)
                    .ok_or_else(|| DataError::Schema(format!("target '{t}' is not a feature")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Class(Vec<usize>),
    Anomaly(Vec<bool>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Anomaly(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: impl Iterator<Item = usize>) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(idx.map(|i| v[i]).collect()),
            Labels::Anomaly(v) => Labels::Anomaly(idx.map(|i| v[i]).collect()),
        }
    }
}

/// A multivariate series, row-major `T×m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesDataset {
    pub m: usize,
    pub values: Vec<f64>,
    pub target_cols: Vec<usize>,
    pub labels: Option<Labels>,
    /// Class names in index order, when labels came from text.
    #[serde(default)]
    pub class_names: Vec<String>,
    pub provenance: String,
    /// Rows dropped at load time because of NaN cells.
    pub dropped_nan: usize,
}

impl SeriesDataset {
    pub fn len(&self) -> usize {
        self.values.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.m..(t + 1) * self.m]
    }

    /// Steps `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> SeriesDataset {
        SeriesDataset {
            m: self.m,
            values: self.values[start * self.m..end * self.m].to_vec(),
            target_cols: self.target_cols.clone(),
            labels: self.labels.as_ref().map(|l| l.select(start..end)),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
            dropped_nan: 0,
        }
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Some(f64::NAN);
    }
    s.parse::<f64>().ok()
}

/// Reads a headered CSV. Rows containing a NaN (or empty) feature cell are
/// dropped and counted.
pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<SeriesDataset> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::Schema(format!("missing column '{name}'")))
    };
    let feature_idx: Vec<usize> = schema.features.iter().map(|f| col(f)).collect::<Result<_>>()?;
    let label_idx = schema.label.as_deref().map(col).transpose()?;
    let target_cols = schema.target_indices()?;

    let m = feature_idx.len();
    let mut values = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let mut row = Vec::with_capacity(m);
        for &i in &feature_idx {
            let cell = rec.get(i).unwrap_or("");
            let v = parse_cell(cell).ok_or_else(|| DataError::Parse {
                line,
                msg: format!("cannot parse '{cell}' in column '{}'", &headers[i]),
            })?;
            row.push(v);
        }
        if row.iter().any(|v| v.is_nan()) {
            dropped += 1;
            continue;
        }
        values.extend(row);
        if let Some(li) = label_idx {
            raw_labels.push(rec.get(li).unwrap_or("").trim().to_string());
        }
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} rows containing NaN", path.display());
    }

    let mut class_names = Vec::new();
    let labels = match (label_idx, schema.label_kind) {
        (None, _) => None,
        (Some(_), Some(LabelKind::Anomaly)) => Some(Labels::Anomaly(
            raw_labels
                .iter()
                .map(|s| parse_cell(s).is_some_and(|v| v != 0.0 && !v.is_nan()))
                .collect(),
        )),
        (Some(_), _) => {
            let numeric: Option<Vec<usize>> = raw_labels.iter().map(|s| s.parse().ok()).collect();
            match numeric {
                Some(v) => Some(Labels::Class(v)),
                None => {
                    let mut names: Vec<String> = raw_labels.clone();
                    names.sort();
                    names.dedup();
                    let index: BTreeMap<&str, usize> =
                        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
                    let v = raw_labels.iter().map(|s| index[s.as_str()]).collect();
                    class_names = names;
                    Some(Labels::Class(v))
                }
            }
        }
    };

    Ok(SeriesDataset {
        m,
        values,
        target_cols,
        labels,
        class_names,
        provenance: path.display().to_string(),
        dropped_nan: dropped,
    })
}

/// Per-feature Min-Max scaler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    /// Fits on row-major data with `m` features.
    pub fn fit(values: &[f64], m: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(DataError::EmptySplit("train"));
        }
        let mut min = vec![f64::INFINITY; m];
        let mut max = vec![f64::NEG_INFINITY; m];
        for row in values.chunks(m) {
            for j in 0..m {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        Ok(Self { min, max })
    }

    fn span(&self, j: usize) -> f64 {
        let s = self.max[j] - self.min[j];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn transform_value(&self, j: usize, v: f64) -> f64 {
        (v - self.min[j]) / self.span(j)
    }

    pub fn inverse_value(&self, j: usize, v: f64) -> f64 {
        v * self.span(j) + self.min[j]
    }

    pub fn transform(&self, values: &[f64]) -> Vec<f64> {
        let m = self.min.len();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.transform_value(i % m, v))
            .collect()
    }

    pub fn inverse(&self, values: &[f64]) -> Vec<f64> {
        let m = self.min.len();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.inverse_value(i % m, v))
            .collect()
    }

    /// Scaler restricted to the given columns (used to denormalize targets).
    pub fn select(&self, cols: &[usize]) -> MinMax {
        MinMax {
            min: cols.iter().map(|&c| self.min[c]).collect(),
            max: cols.iter().map(|&c| self.max[c]).collect(),
        }
    }

    pub fn apply(&self, ds: &SeriesDataset) -> SeriesDataset {
        SeriesDataset {
            values: self.transform(&ds.values),
            ..ds.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// Row-major `count×k`.
    Regression { k: usize, values: Vec<f64> },
    Classes { k: usize, values: Vec<usize> },
}

/// Windows of shape `n×m` with their targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSet {
    pub n: usize,
    pub m: usize,
    /// Row-major `count×n×m`.
    pub inputs: Vec<f64>,
    pub targets: Targets,
    /// Anomaly flag of each window's target step.
    pub anomaly: Option<Vec<bool>>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.inputs.len() / (self.n * self.m)
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn k(&self) -> usize {
        match &self.targets {
            Targets::Regression { k, .. } | Targets::Classes { k, .. } => *k,
        }
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.n * self.m;
        &self.inputs[i * w..(i + 1) * w]
    }

    /// Stacks the selected windows into a `[B·n × m]` tensor.
    pub fn batch_inputs(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.n * self.m);
        for &i in idx {
            data.extend_from_slice(self.window(i));
        }
        Tensor::matrix(idx.len() * self.n, self.m, data).expect("window shape")
    }

    pub fn regression_targets(&self, idx: &[usize]) -> Option<Tensor> {
        match &self.targets {
            Targets::Regression { k, values } => {
                let mut data = Vec::with_capacity(idx.len() * k);
                for &i in idx {
                    data.extend_from_slice(&values[i * k..(i + 1) * k]);
                }
                Some(Tensor::matrix(idx.len(), *k, data).expect("target shape"))
            }
            Targets::Classes { .. } => None,
        }
    }

    pub fn class_targets(&self, idx: &[usize]) -> Option<Vec<usize>> {
        match &self.targets {
            Targets::Classes { values, .. } => Some(idx.iter().map(|&i| values[i]).collect()),
            Targets::Regression { .. } => None,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> WindowSet {
        let mut inputs = Vec::with_capacity(idx.len() * self.n * self.m);
        for &i in idx {
            inputs.extend_from_slice(self.window(i));
        }
        let targets = match &self.targets {
            Targets::Regression { k, values } => Targets::Regression {
                k: *k,
                values: idx
                    .iter()
                    .flat_map(|&i| values[i * k..(i + 1) * k].iter().copied())
                    .collect(),
            },
            Targets::Classes { k, values } => Targets::Classes {
                k: *k,
                values: idx.iter().map(|&i| values[i]).collect(),
            },
        };
        WindowSet {
            n: self.n,
            m: self.m,
            inputs,
            targets,
            anomaly: self
                .anomaly
                .as_ref()
                .map(|a| idx.iter().map(|&i| a[i]).collect()),
        }
    }
}

/// One-step-ahead (or `horizon`-ahead) sliding windows: window `t` covers
/// steps `[t, t+n)` and its target is `target_cols` at step `t+n+horizon−1`.
pub fn make_windows(ds: &SeriesDataset, n: usize, horizon: usize, target_cols: &[usize]) -> Result<WindowSet> {
    let t_len = ds.len();
    let horizon = horizon.max(1);
    if n == 0 || t_len < n + horizon {
        return Err(DataError::Insufficient { t: t_len, n });
    }
    if target_cols.is_empty() || target_cols.iter().any(|&c| c >= ds.m) {
        return Err(DataError::Contract(format!(
            "target columns {target_cols:?} invalid for {} features",
            ds.m
        )));
    }
    let count = t_len - n - (horizon - 1);
    let k = target_cols.len();
    let mut inputs = Vec::with_capacity(count * n * ds.m);
    let mut targets = Vec::with_capacity(count * k);
    for t in 0..count {
        inputs.extend_from_slice(&ds.values[t * ds.m..(t + n) * ds.m]);
        let row = ds.row(t + n + horizon - 1);
        targets.extend(target_cols.iter().map(|&c| row[c]));
    }
    let anomaly = match &ds.labels {
        Some(Labels::Anomaly(a)) => Some((0..count).map(|t| a[t + n + horizon - 1]).collect()),
        _ => None,
    };
    Ok(WindowSet {
        n,
        m: ds.m,
        inputs,
        targets: Targets::Regression { k, values: targets },
        anomaly,
    })
}

/// Cuts a class-labelled series into windows of `n` steps every `stride`
/// steps; each window takes the majority label (smallest index on ties).
pub fn segment_windows(ds: &SeriesDataset, n: usize, stride: usize, classes: usize) -> Result<WindowSet> {
    let Some(Labels::Class(labels)) = &ds.labels else {
        return Err(DataError::Contract("segmenting requires class labels".into()));
    };
    if n == 0 || ds.len() < n {
        return Err(DataError::Insufficient { t: ds.len(), n });
    }
    let stride = stride.max(1);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut start = 0;
    while start + n <= ds.len() {
        let mut counts = vec![0usize; classes.max(1)];
        for &l in &labels[start..start + n] {
            if l >= counts.len() {
                return Err(DataError::Contract(format!("class {l} ≥ {classes}")));
            }
            counts[l] += 1;
        }
        let best = (0..counts.len()).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
        inputs.extend_from_slice(&ds.values[start * ds.m..(start + n) * ds.m]);
        targets.push(best);
        start += stride;
    }
    Ok(WindowSet {
        n,
        m: ds.m,
        inputs,
        targets: Targets::Classes {
            k: classes,
            values: targets,
        },
        anomaly: None,
    })
}

/// Keeps every `factor`-th step.
pub fn downsample(ds: &SeriesDataset, factor: usize) -> SeriesDataset {
    let factor = factor.max(1);
    let keep: Vec<usize> = (0..ds.len()).step_by(factor).collect();
    let mut values = Vec::with_capacity(keep.len() * ds.m);
    for &t in &keep {
        values.extend_from_slice(ds.row(t));
    }
    SeriesDataset {
        m: ds.m,
        values,
        target_cols: ds.target_cols.clone(),
        labels: ds.labels.as_ref().map(|l| l.select(keep.iter().copied())),
        class_names: ds.class_names.clone(),
        provenance: ds.provenance.clone(),
        dropped_nan: ds.dropped_nan,
    }
}

/// Downsamples each window of a set by stride decimation (`n` → `ceil(n/f)`).
pub fn downsample_windows(ws: &WindowSet, factor: usize) -> WindowSet {
    let factor = factor.max(1);
    let n2 = ws.n.div_ceil(factor);
    let mut inputs = Vec::with_capacity(ws.len() * n2 * ws.m);
    for i in 0..ws.len() {
        let w = ws.window(i);
        for t in (0..ws.n).step_by(factor) {
            inputs.extend_from_slice(&w[t * ws.m..(t + 1) * ws.m]);
        }
    }
    WindowSet {
        n: n2,
        inputs,
        ..ws.clone()
    }
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl Fractions {
    fn check(&self) -> Result<()> {
        let s = self.train + self.val + self.test;
        let ok = [self.train, self.val, self.test].iter().all(|f| (0.0..=1.0).contains(f));
        if !ok || (s - 1.0).abs() > 1e-9 {
            return Err(DataError::Contract(format!("split fractions must sum to 1 (got {s})")));
        }
        Ok(())
    }

    fn sizes(&self, total: usize) -> (usize, usize, usize) {
        let tr = (total as f64 * self.train + 1e-9).floor() as usize;
        let va = (total as f64 * self.val + 1e-9).floor() as usize;
        (tr, va, total - tr - va)
    }
}

/// Chronological split of a series into contiguous train/val/test spans.
pub fn split(ds: &SeriesDataset, fr: Fractions) -> Result<(SeriesDataset, SeriesDataset, SeriesDataset)> {
    fr.check()?;
    let (tr, va, te) = fr.sizes(ds.len());
    for (size, name) in [(tr, "train"), (va, "val"), (te, "test")] {
        if size == 0 {
            return Err(DataError::EmptySplit(name));
        }
    }
    Ok((ds.slice(0, tr), ds.slice(tr, tr + va), ds.slice(tr + va, ds.len())))
}

/// Stratified random split of labelled windows, optionally capping each class.
pub fn split_stratified(
    ws: &WindowSet,
    fr: Fractions,
    cap_per_class: Option<usize>,
    seed: u64,
) -> Result<(WindowSet, WindowSet, WindowSet)> {
    fr.check()?;
    let Targets::Classes { k, values } = &ws.targets else {
        return Err(DataError::Contract("stratified split needs class targets".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..*k {
        let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] == c).collect();
        idx.shuffle(&mut rng);
        if let Some(cap) = cap_per_class {
            idx.truncate(cap);
        }
        let (a, b, _) = fr.sizes(idx.len());
        tr.extend_from_slice(&idx[..a]);
        va.extend_from_slice(&idx[a..a + b]);
        te.extend_from_slice(&idx[a + b..]);
    }
    for (v, name) in [(&tr, "train"), (&va, "val"), (&te, "test")] {
        if v.is_empty() {
            return Err(DataError::EmptySplit(name));
        }
    }
    tr.shuffle(&mut rng);
    va.sort_unstable();
    te.sort_unstable();
    Ok((ws.subset(&tr), ws.subset(&va), ws.subset(&te)))
}

/// Nearest-rank quantile: the sorted value at 1-based rank `ceil(q·N)`.
pub fn threshold_quantile(residuals: &[f64], q: f64) -> Result<f64> {
    if residuals.is_empty() {
        return Err(DataError::Contract("quantile of an empty residual set".into()));
    }
    let mut s = residuals.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(s[rank.min(s.len()) - 1])
}

/// `s_t = β·s_{t−1} + (1−β)·r_t` with `s₀ = r₀`.
pub fn ewma(r: &[f64], beta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.len());
    let mut s = 0.0;
    for (t, &v) in r.iter().enumerate() {
        s = if t == 0 { v } else { beta * s + (1.0 - beta) * v };
        out.push(s);
    }
    out
}

/// Twelve evenly spaced smoothing factors over `[0.749, 0.971]`.
pub fn beta_grid() -> Vec<f64> {
    let (lo, hi, n) = (0.749, 0.971, 12);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Threshold closest to the peak raw residual on anomaly-free steps.
    PeakDeviation,
    /// Highest F1 against validation labels.
    F1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub beta: f64,
    pub threshold: f64,
}

/// Picks the smoothing factor and threshold for residual-based detection.
///
/// For every β the candidate threshold is the largest smoothed residual over
/// anomaly-free validation steps. In peak-deviation mode the β whose
/// candidate lies closest to the peak raw residual over the same steps wins;
/// in F1 mode (labels required) the β with the best validation F1 wins.
/// Ties go to the smaller β.
pub fn threshold_beta_sweep(
    residuals: &[f64],
    betas: &[f64],
    labels: Option<&[bool]>,
    mode: SweepMode,
) -> Result<Threshold> {
    if residuals.is_empty() {
        return Err(DataError::Contract("empty residual series".into()));
    }
    if betas.is_empty() {
        return Err(DataError::Contract("empty β grid".into()));
    }
    if let Some(l) = labels {
        if l.len() != residuals.len() {
            return Err(DataError::Contract("labels and residuals differ in length".into()));
        }
    }
    let normal = |t: usize| labels.is_none_or(|l| !l[t]);
    let any_normal = (0..residuals.len()).any(normal);
    let peak = (0..residuals.len())
        .filter(|&t| normal(t) || !any_normal)
        .map(|t| residuals[t])
        .fold(f64::NEG_INFINITY, f64::max);

    let mut best: Option<(f64, Threshold)> = None;
    for &beta in betas {
        let s = ewma(residuals, beta);
        let threshold = (0..s.len())
            .filter(|&t| normal(t) || !any_normal)
            .map(|t| s[t])
            .fold(f64::NEG_INFINITY, f64::max);
        let score = match (mode, labels) {
            (SweepMode::F1, Some(l)) => {
                let pred: Vec<bool> = s.iter().map(|&v| v > threshold).collect();
                -f1_score(&pred, l)
            }
            (SweepMode::F1, None) => {
                return Err(DataError::Contract("F1 sweep needs labels".into()));
            }
            _ => (threshold - peak).abs(),
        };
        let better = match &best {
            None => true,
            Some((b, cur)) => score < *b || (score == *b && beta < cur.beta),
        };
        if better {
            best = Some((score, Threshold { beta, threshold }));
        }
    }
    Ok(best.expect("grid non-empty").1)
}

/// Flags steps whose smoothed residual exceeds the threshold.
pub fn detect(residuals: &[f64], th: &Threshold) -> Vec<bool> {
    ewma(residuals, th.beta).iter().map(|&s| s > th.threshold).collect()
}

/// Binary F1 on the positive class (1.0 when there are no positives at all).
pub fn f1_score(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Mean absolute residual per window across the predicted variables.
pub fn abs_residuals(pred: &[f64], target: &[f64], k: usize) -> Vec<f64> {
    pred.chunks(k)
        .zip(target.chunks(k))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / k as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    SineForecast,
    ShapeletClassify,
    SpikeAnomaly,
}

impl std::str::FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sine-forecast" | "sine" => Ok(SynthKind::SineForecast),
            "shapelet-classify" | "shapelet" => Ok(SynthKind::ShapeletClassify),
            "spike-anomaly" | "spike" => Ok(SynthKind::SpikeAnomaly),
            other => Err(format!("unknown synthetic kind '{other}'")),
        }
    }
}

impl SynthKind {
    pub fn task(self) -> Task {
        match self {
            SynthKind::SineForecast => Task::Forecasting,
            SynthKind::ShapeletClassify => Task::Classification,
            SynthKind::SpikeAnomaly => Task::Anomaly,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::SineForecast => "sine-forecast",
            SynthKind::ShapeletClassify => "shapelet-classify",
            SynthKind::SpikeAnomaly => "spike-anomaly",
        }
    }

    /// Window length used for the fixture.
    pub fn window(self) -> usize {
        match self {
            SynthKind::SineForecast | SynthKind::SpikeAnomaly => 12,
            SynthKind::ShapeletClassify => 16,
        }
    }

    /// Observation noise of the default fixture.
    pub fn default_noise(self) -> f64 {
        match self {
            SynthKind::SineForecast => SINE_NOISE,
            SynthKind::SpikeAnomaly => SPIKE_NOISE,
            SynthKind::ShapeletClassify => 0.0,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            SynthKind::ShapeletClassify => SHAPELET_CLASSES,
            _ => 0,
        }
    }
}

const SINE_LEN: usize = 2000;
const SINE_PERIOD: f64 = 20.0;
/// Observation noise of the default sine fixture. The optimal one-step
/// predictor cannot beat roughly this RMSE.
pub const SINE_NOISE: f64 = 0.05;
const SPIKE_NOISE: f64 = 0.02;
const SHAPELET_CLASSES: usize = 3;
const SHAPELET_SEGMENTS: usize = 150;
const SPIKE_LEN: usize = 1200;
const SPIKE_EVERY: usize = 40;

/// Deterministic synthetic fixtures.
///
/// - `sine-forecast`: a sine of period 20 steps with a seeded phase and
///   amplitude in `[0.8, 1.2]`, plus Gaussian observation noise of standard
///   deviation [`SINE_NOISE`]. Without noise the next step is an exact
///   linear function of the window.
/// - `shapelet-classify`: 150 segments of 16 steps, each uniform noise
///   (±0.1) plus one of three shapes (sine burst, square pulse, ramp) at a
///   seeded offset; the shape is the class.
/// - `spike-anomaly`: the sine above (noise 0.02) with spikes of height 3
///   injected every ~40 steps (seeded jitter); spike steps are labelled
///   anomalous.
pub fn synth_task(kind: SynthKind, seed: u64) -> SeriesDataset {
    synth_task_with_noise(kind, seed, kind.default_noise())
}

/// [`synth_task`] with an explicit standard deviation of additive Gaussian
/// observation noise on the sine-based series.
pub fn synth_task_with_noise(kind: SynthKind, seed: u64, noise: f64) -> SeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.8..1.2);
    let clean: Vec<f64> = (0..SINE_LEN.max(SPIKE_LEN))
        .map(|t| amp * (2.0 * PI * t as f64 / SINE_PERIOD + phase).sin())
        .collect();
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let sine = |t: usize, rng: &mut ChaCha8Rng| clean[t] + if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
    let base = SeriesDataset {
        m: 1,
        values: Vec::new(),
        target_cols: vec![0],
        labels: None,
        class_names: Vec::new(),
        provenance: format!("synthetic:{}:{seed}", kind.name()),
        dropped_nan: 0,
    };
    match kind {
        SynthKind::SineForecast => SeriesDataset {
            values: (0..SINE_LEN).map(|t| sine(t, &mut rng)).collect(),
            ..base
        },
        SynthKind::SpikeAnomaly => {
            let mut values: Vec<f64> = (0..SPIKE_LEN).map(|t| sine(t, &mut rng)).collect();
            let mut flags = vec![false; SPIKE_LEN];
            let mut t = SPIKE_EVERY / 2;
            while t < SPIKE_LEN {
                let at = t + rng.random_range(0..SPIKE_EVERY / 4);
                if at < SPIKE_LEN {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    values[at] += sign * 3.0;
                    flags[at] = true;
                }
                t += SPIKE_EVERY;
            }
            SeriesDataset {
                values,
                labels: Some(Labels::Anomaly(flags)),
                ..base
            }
        }
        SynthKind::ShapeletClassify => {
            let n = kind.window();
            let mut values = Vec::with_capacity(SHAPELET_SEGMENTS * n);
            let mut labels = Vec::with_capacity(SHAPELET_SEGMENTS * n);
            for s in 0..SHAPELET_SEGMENTS {
                let class = s % SHAPELET_CLASSES;
                let width = 8;
                let offset = rng.random_range(0..=n - width);
                for t in 0..n {
                    let mut v = rng.random_range(-0.1..0.1);
                    if (offset..offset + width).contains(&t) {
                        let u = (t - offset) as f64 / width as f64;
                        v += match class {
                            0 => (2.0 * PI * u).sin(),
                            1 => 1.0,
                            _ => 2.0 * u - 1.0,
                        };
                    }
                    values.push(v);
                    labels.push(class);
                }
            }
            SeriesDataset {
                values,
                labels: Some(Labels::Class(labels)),
                class_names: vec!["burst".into(), "pulse".into(), "ramp".into()],
                ..base
            }
        }
    }
}

/// Normalized, windowed splits ready for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub task: Task,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub scaler: MinMax,
    /// Scaler restricted to the target columns (forecasting/anomaly).
    pub target_scaler: Option<MinMax>,
}

impl TaskData {
    pub fn n(&self) -> usize {
        self.train.n
    }

    pub fn m(&self) -> usize {
        self.train.m
    }

    pub fn k(&self) -> usize {
        self.train.k()
    }
}

/// Splits, normalizes (fit on train only) and windows a series.
///
/// Forecasting/anomaly series are split chronologically before windowing, so
/// no window crosses a split boundary. Classification series are segmented
/// into windows (stride `n`), downsampled, split by class, then normalized.
pub fn prepare(
    task: Task,
    ds: &SeriesDataset,
    n: usize,
    fr: Fractions,
    downsample_factor: usize,
    class_cap: Option<usize>,
    seed: u64,
) -> Result<TaskData> {
    match task {
        Task::Forecasting | Task::Anomaly => {
            let ds = downsample(ds, downsample_factor);
            let (tr, va, te) = split(&ds, fr)?;
            let scaler = MinMax::fit(&tr.values, ds.m)?;
            let cols = if ds.target_cols.is_empty() {
                vec![0]
            } else {
                ds.target_cols.clone()
            };
            let w = |s: &SeriesDataset| make_windows(&scaler.apply(s), n, 1, &cols);
            Ok(TaskData {
                task,
                train: w(&tr)?,
                val: w(&va)?,
                test: w(&te)?,
                target_scaler: Some(scaler.select(&cols)),
                scaler,
            })
        }
        Task::Classification => {
            let classes = match &ds.labels {
                Some(Labels::Class(l)) => l.iter().max().map_or(0, |c| c + 1),
                _ => return Err(DataError::Contract("classification needs class labels".into())),
            };
            let ws = segment_windows(ds, n, n, classes)?;
            let ws = downsample_windows(&ws, downsample_factor);
            let (tr, va, te) = split_stratified(&ws, fr, class_cap, seed)?;
            let scaler = MinMax::fit(&tr.inputs, ws.m)?;
            let norm = |w: WindowSet| WindowSet {
                inputs: scaler.transform(&w.inputs),
                ..w
            };
            Ok(TaskData {
                task,
                train: norm(tr),
                val: norm(va),
                test: norm(te),
                scaler,
                target_scaler: None,
            })
        }
    }
}

/// Prepares a synthetic fixture with default fractions.
pub fn synth_task_data(kind: SynthKind, seed: u64) -> Result<TaskData> {
    let ds = synth_task(kind, seed);
    prepare(kind.task(), &ds, kind.window(), Fractions::default(), 1, None, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: Vec<f64>) -> SeriesDataset {
        SeriesDataset {
            m: 1,
            values,
            target_cols: vec![0],
            labels: None,
            class_names: vec![],
            provenance: "test".into(),
            dropped_nan: 0,
        }
    }

    #[test]
    fn window_counts_and_alignment() {
        let ds = series((0..100).map(|v| v as f64).collect());
        let ws = make_windows(&ds, 24, 1, &[0]).unwrap();
        assert_eq!(ws.len(), 76);
        let Targets::Regression { values, .. } = &ws.targets else { panic!() };
        assert_eq!(values[0], 24.0);
        let ds = series((0..25).map(|v| v as f64).collect());
        assert_eq!(make_windows(&ds, 24, 1, &[0]).unwrap().len(), 1);
        let ds = series((0..24).map(|v| v as f64).collect());
        assert!(matches!(make_windows(&ds, 24, 1, &[0]), Err(DataError::Insufficient { .. })));
    }

    #[test]
    fn downsample_stride() {
        let ds = series((0..128).map(|v| v as f64).collect());
        assert_eq!(downsample(&ds, 4).len(), 32);
        let ds = series((0..200).map(|v| v as f64).collect());
        assert_eq!(downsample(&ds, 4).len(), 50);
        assert_eq!(downsample(&ds, 1), ds);
    }

    #[test]
    fn chronological_split_sizes() {
        let ds = series((0..1000).map(|v| v as f64).collect());
        let (a, b, c) = split(&ds, Fractions::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (700, 150, 150));
        assert!(a.values.last() < b.values.first());
    }

    #[test]
    fn stratified_split_keeps_ratios() {
        let values: Vec<usize> = (0..300).map(|i| if i < 200 { 0 } else { 1 }).collect();
        let ws = WindowSet {
            n: 1,
            m: 1,
            inputs: (0..300).map(|v| v as f64).collect(),
            targets: Targets::Classes { k: 2, values },
            anomaly: None,
        };
        let (tr, va, te) = split_stratified(&ws, Fractions::default(), None, 3).unwrap();
        let count = |w: &WindowSet, c| w.class_targets(&(0..w.len()).collect::<Vec<_>>()).unwrap().iter().filter(|&&v| v == c).count();
        assert_eq!((count(&tr, 0), count(&tr, 1)), (140, 70));
        assert_eq!((count(&va, 0), count(&va, 1)), (30, 15));
        assert_eq!((count(&te, 0), count(&te, 1)), (30, 15));
        let (tr, _, _) = split_stratified(&ws, Fractions::default(), Some(50), 3).unwrap();
        assert_eq!(count(&tr, 0), 35);
    }

    #[test]
    fn nearest_rank_quantile() {
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        assert_eq!(threshold_quantile(&v, 0.99).unwrap(), 99.0);
        assert_eq!(threshold_quantile(&[4.5], 0.99).unwrap(), 4.5);
        assert_eq!(threshold_quantile(&[2.0; 7], 0.99).unwrap(), 2.0);
        assert!(threshold_quantile(&[], 0.99).is_err());
    }

    #[test]
    fn ewma_and_sweep() {
        let s = ewma(&[0.0, 1.0], 0.9);
        assert!((s[1] - 0.1).abs() < 1e-12);
        let c = [0.7; 20];
        for b in beta_grid() {
            let th = threshold_beta_sweep(&c, &[b], None, SweepMode::PeakDeviation).unwrap();
            assert!((th.threshold - 0.7).abs() < 1e-12);
            assert_eq!(th.beta, b);
        }
        assert!(threshold_beta_sweep(&c, &[], None, SweepMode::PeakDeviation).is_err());
        let g = beta_grid();
        assert_eq!(g.len(), 12);
        assert!((g[0] - 0.749).abs() < 1e-12 && (g[11] - 0.971).abs() < 1e-12);
    }

    #[test]
    fn f1_examples() {
        // TP=8, FP=2, FN=2
        let mut pred = vec![true; 10];
        pred.extend([false, false]);
        let mut truth = vec![true; 8];
        truth.extend([false, false, true, true]);
        assert!((f1_score(&pred, &truth) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn minmax_round_trip() {
        let v = vec![1.0, 10.0, 3.0, -2.0, 5.0, 4.0];
        let s = MinMax::fit(&v, 2).unwrap();
        let t = s.transform(&v);
        assert!(t.iter().all(|x| (0.0..=1.0).contains(x)));
        for (a, b) in s.inverse(&t).iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_fixtures_are_deterministic() {
        for k in [SynthKind::SineForecast, SynthKind::ShapeletClassify, SynthKind::SpikeAnomaly] {
            assert_eq!(synth_task(k, 5), synth_task(k, 5));
            assert_ne!(synth_task(k, 5), synth_task(k, 6));
        }
        let ds = synth_task(SynthKind::SpikeAnomaly, 1);
        let Some(Labels::Anomaly(flags)) = &ds.labels else { panic!() };
        let oracle: Vec<bool> = ds.values.iter().map(|v| v.abs() > 1.5).collect();
        assert_eq!(f1_score(&oracle, flags), 1.0);
    }

    #[test]
    fn builtin_schemas_parse() {
        for name in DatasetSchema::builtin_names() {
            let s = DatasetSchema::builtin(name).unwrap();
            s.target_indices().unwrap();
        }
    }

    #[test]
    fn csv_loading_drops_nan_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "a,b,c\n1,2,3\n4,,6\n7,8,9\n1,1,1\n2,2,2\n").unwrap();
        let schema = DatasetSchema {
            name: "x".into(),
            task: Task::Forecasting,
            features: vec!["a".into(), "b".into(), "c".into()],
            targets: vec!["c".into()],
            label: None,
            label_kind: None,
            window: 2,
            downsample: 1,
            class_cap: None,
        };
        let ds = load_csv(&p, &schema).unwrap();
        assert_eq!((ds.len(), ds.dropped_nan, ds.m), (4, 1, 3));
        std::fs::write(&p, "a,b,c\n1,2,3\n4,x,6\n").unwrap();
        match load_csv(&p, &schema) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad = DatasetSchema {
            features: vec!["zz".into()],
            targets: vec![],
            ..schema
        };
        assert!(matches!(load_csv(&p, &bad), Err(DataError::Schema(_))));
    }
}
