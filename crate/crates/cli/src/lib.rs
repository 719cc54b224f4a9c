//! `qforge`: train, search, export VHDL and run integer inference from the
//! command line. Every artifact embeds the hash of the resolved run
//! configuration.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use qforge_core::codegen;
use qforge_core::data::{
    detect, ewma, load_csv, prepare, synth_task_data, DataError, Fractions, MinMax, TaskData, Threshold,
};
use qforge_core::hwmodel::{self, HwEstimate, PlatformSpec};
use qforge_core::intrt::{export_int, int_forward, IntModel, IntTensor};
use qforge_core::model::{Mode, ModelConfig, TransformerModel};
use qforge_core::quant::quantize;
use qforge_core::search::{self, pareto_front, Trial};
use qforge_core::train::{self, FitResult, LossKind, TrainError, TrainSpec};
use qforge_core::Task;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{resolve, DataSource, RunArgs, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Constraint(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// 2 input error, 3 constraint violation, 4 internal error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Constraint(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<codegen::CodegenError> for CliError {
    fn from(e: codegen::CodegenError) -> Self {
        CliError::Internal(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "qforge", version, about = "Tiny Transformer deployment pipeline for embedded FPGAs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// QAT-train one configuration and export it to integers.
    Train(RunArgs),
    /// Hardware-aware NSGA-II search.
    Search(RunArgs),
    /// Emit VHDL, constraints, golden vectors and a testbench.
    ExportVhdl(ExportArgs),
    /// Integer-only inference over a CSV of time steps.
    Infer(InferArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ExportArgs {
    /// `int_model.json` (or any model file with an integer section).
    pub model: PathBuf,
    #[arg(long, default_value = "xc7s15")]
    pub platform: String,
    #[arg(long, default_value = "rtl")]
    pub out: PathBuf,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug, Clone)]
pub struct InferArgs {
    pub model: PathBuf,
    /// CSV with a header row and one time step per row.
    pub input: PathBuf,
    #[arg(long, default_value = "predictions.csv")]
    pub out: PathBuf,
    /// Anomaly threshold file written by `train`.
    #[arg(long)]
    pub threshold: Option<PathBuf>,
    /// Window stride; defaults to the window length (1 for anomaly scoring).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Input cells are already integer codes (e.g. golden vectors).
    #[arg(long)]
    pub codes: bool,
}

/// Entry point shared by the binary and tests; returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => {
            let cfg = resolve(&a)?;
            let r = cmd_train(&cfg)?;
            println!("{}", r.summary());
            Ok(())
        }
        Command::Search(a) => {
            let cfg = resolve(&a)?;
            let r = cmd_search(&cfg)?;
            println!("{}", r.summary());
            Ok(())
        }
        Command::ExportVhdl(a) => {
            let platform = config::find_platform(&a.platform)?;
            let est = cmd_export_vhdl(&a.model, &platform, &a.out, a.strict)?;
            print!("{}", estimate_table(&est));
            Ok(())
        }
        Command::Infer(a) => {
            let n = cmd_infer(&a)?;
            println!("wrote {n} predictions to {}", a.out.display());
            Ok(())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Model file: float/QAT weights and/or the integer export, plus what is
/// needed to feed raw data (scalers, feature names).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub task: Task,
    pub config: ModelConfig,
    #[serde(default)]
    pub features: Vec<String>,
    pub scaler: MinMax,
    pub target_scaler: Option<MinMax>,
    /// Input columns predicted by forecasting/anomaly models.
    #[serde(default)]
    pub target_cols: Vec<usize>,
    pub model: Option<TransformerModel>,
    pub int_model: Option<IntModel>,
}

pub const MODEL_FORMAT: &str = "qforge-model";

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let f: ModelFile = read_json(path)?;
        if f.format != MODEL_FORMAT {
            return Err(CliError::Input(format!("{} is not a {MODEL_FORMAT} file", path.display())));
        }
        Ok(f)
    }
}

pub fn load_task_data(cfg: &RunConfig) -> Result<TaskData> {
    match &cfg.data {
        DataSource::Synthetic { fixture } => {
            if cfg.window.is_some() {
                return Err(CliError::Input("window override applies to CSV data only".into()));
            }
            Ok(synth_task_data(*fixture, cfg.seed)?)
        }
        DataSource::Csv { path, schema } => {
            let ds = load_csv(path, schema)?;
            Ok(prepare(
                schema.task,
                &ds,
                cfg.window.unwrap_or(schema.window),
                Fractions::default(),
                schema.downsample,
                schema.class_cap,
                cfg.seed,
            )?)
        }
    }
}

fn target_cols(cfg: &RunConfig, task: Task) -> Result<Vec<usize>> {
    if task == Task::Classification {
        return Ok(Vec::new());
    }
    match &cfg.data {
        DataSource::Csv { schema, .. } => {
            let cols = schema.target_indices()?;
            Ok(if cols.is_empty() { vec![0] } else { cols })
        }
        DataSource::Synthetic { .. } => Ok(vec![0]),
    }
}

fn features(cfg: &RunConfig) -> Vec<String> {
    match &cfg.data {
        DataSource::Csv { schema, .. } => schema.features.clone(),
        DataSource::Synthetic { .. } => Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_hash: String,
    pub task: Task,
    /// RMSE (forecasting), accuracy (classification) or F1 (anomaly).
    pub metric_name: String,
    pub int_metric: f64,
    pub qat_metric: f64,
    pub float_metric: Option<f64>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub parameters: usize,
    pub hardware: HwEstimate,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Metrics,
    pub artifacts: Vec<PathBuf>,
}

impl TrainReport {
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut s = format!(
            "{} {}: int {:.6}  qat {:.6}",
            m.task, m.metric_name, m.int_metric, m.qat_metric
        );
        if let Some(f) = m.float_metric {
            let _ = write!(s, "  float {f:.6}");
        }
        let _ = write!(s, "\n{}", estimate_table(&m.hardware));
        for a in &self.artifacts {
            let _ = writeln!(s, "wrote {}", a.display());
        }
        s.trim_end().to_string()
    }
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Forecasting => "rmse",
        Task::Classification => "accuracy",
        Task::Anomaly => "f1",
    }
}

fn train_spec(cfg: &RunConfig, task: Task) -> TrainSpec {
    TrainSpec {
        max_epochs: cfg.train.max_epochs,
        patience: cfg.train.patience,
        ..TrainSpec::new(cfg.train.batch_size, cfg.train.lr, LossKind::for_task(task), cfg.seed)
    }
}

fn model_config(cfg: &RunConfig, data: &TaskData, bits: Option<u8>) -> ModelConfig {
    ModelConfig {
        n: data.n(),
        m: data.m(),
        k: data.k(),
        d_model: cfg.d_model,
        bits,
        task: data.task,
    }
}

fn fit_model(cfg: &RunConfig, data: &TaskData, bits: Option<u8>) -> Result<FitResult<TransformerModel>> {
    let mc = model_config(cfg, data, bits);
    let model = TransformerModel::build(mc, cfg.seed).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(train::fit(model, &data.train, &data.val, &train_spec(cfg, data.task))?)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Prepends a `# config_hash=` comment line to a CSV artifact.
fn stamp_csv(path: &Path, hash: &str) -> Result<()> {
    let body = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    std::fs::write(path, format!("# config_hash={hash}\n{body}")).map_err(|e| io_err(path, e))
}

/// QAT training, integer export, metrics and hardware estimate.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let data = load_task_data(cfg)?;
    let hash = cfg.hash();
    create_out(&cfg.out)?;

    let fit = fit_model(cfg, &data, Some(cfg.bits))?;
    let (best_val_loss, best_epoch, epochs_run) = (fit.best_val_loss, fit.best_epoch, fit.epochs_run);
    let log_path = cfg.out.join("train_log.csv");
    fit.write_log(&log_path)?;
    stamp_csv(&log_path, &hash)?;
    let mut model = fit.model;
    model.freeze_observers();
    let im = export_int(&model).map_err(|e| CliError::Internal(e.to_string()))?;

    let qat_val = train::predict(&mut model, &data.val, Mode::Qat)?;
    let qat_test = train::predict(&mut model, &data.test, Mode::Qat)?;
    let qat = train::evaluate(&data, &qat_val, &qat_test)?;
    let int_val = train::predict_int(&im, &data.val)?;
    let int_test = train::predict_int(&im, &data.test)?;
    let int = train::evaluate(&data, &int_val, &int_test)?;

    let float_metric = if cfg.baseline {
        let mut fm = fit_model(cfg, &data, None)?.model;
        let v = train::predict(&mut fm, &data.val, Mode::Float)?;
        let t = train::predict(&mut fm, &data.test, Mode::Float)?;
        Some(train::evaluate(&data, &v, &t)?.metric)
    } else {
        None
    };

    let hardware = hwmodel::estimate(&im, &cfg.platform);
    let metrics = Metrics {
        config_hash: hash.clone(),
        task: data.task,
        metric_name: metric_name(data.task).into(),
        int_metric: int.metric,
        qat_metric: qat.metric,
        float_metric,
        best_val_loss,
        best_epoch,
        epochs_run,
        parameters: qforge_core::count_parameters(&im.config),
        hardware,
    };

    let model_cfg = im.config;
    let targets = target_cols(cfg, data.task)?;
    let file = |model: Option<TransformerModel>, int_model: Option<IntModel>| ModelFile {
        format: MODEL_FORMAT.into(),
        version: 1,
        config_hash: hash.clone(),
        task: data.task,
        config: model_cfg,
        features: features(cfg),
        scaler: data.scaler.clone(),
        target_scaler: data.target_scaler.clone(),
        target_cols: targets.clone(),
        model,
        int_model,
    };
    let model_path = cfg.out.join("model.json");
    write_json(&model_path, &file(Some(model), None))?;
    let int_path = cfg.out.join("int_model.json");
    write_json(&int_path, &file(None, Some(im)))?;
    let metrics_path = cfg.out.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    let mut artifacts = vec![model_path, int_path, log_path, metrics_path];
    if let Some(th) = int.threshold {
        let p = cfg.out.join("threshold.json");
        write_json(&p, &ThresholdFile { config_hash: hash, threshold: th })?;
        artifacts.push(p);
    }
    if !metrics.hardware.deployable {
        let msg = format!(
            "design exceeds the {} budget: {}",
            cfg.platform.name,
            metrics.hardware.reasons.join(", ")
        );
        if cfg.strict {
            return Err(CliError::Constraint(msg));
        }
        eprintln!("warning: {msg}");
    }
    Ok(TrainReport { metrics, artifacts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub config_hash: String,
    #[serde(flatten)]
    pub threshold: Threshold,
}

pub fn estimate_table(e: &HwEstimate) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "platform      {}", e.platform);
    let _ = writeln!(s, "LUTs          {}", e.luts);
    let _ = writeln!(s, "DSPs          {}", e.dsps);
    let _ = writeln!(s, "BRAM blocks   {}", e.brams);
    let _ = writeln!(s, "cycles        {}", e.cycles);
    let _ = writeln!(s, "latency_ms    {}", e.latency_ms);
    let _ = writeln!(s, "power_mw      {}", e.power_mw);
    let _ = writeln!(s, "energy_mj     {}", e.energy_mj);
    let verdict = if e.deployable {
        "yes".to_string()
    } else {
        format!("no ({})", e.reasons.join(", "))
    };
    let _ = writeln!(s, "deployable    {verdict}");
    s
}

/// Writes the RTL design for an integer model. Over-budget designs are still
/// written; with `strict` they are then reported as a constraint violation.
pub fn cmd_export_vhdl(model: &Path, platform: &PlatformSpec, out: &Path, strict: bool) -> Result<HwEstimate> {
    let file = ModelFile::load(model)?;
    let im = file
        .int_model
        .ok_or_else(|| CliError::Input(format!("{} has no integer export", model.display())))?;
    let design = codegen::emit_top(&im, platform)?;
    design.write_to(out)?;
    let est = hwmodel::estimate(&im, platform);
    write_json(
        &out.join("estimate.json"),
        &serde_json::json!({ "config_hash": file.config_hash, "estimate": est }),
    )?;
    if !est.deployable {
        let msg = format!("design exceeds the {} budget: {}", platform.name, est.reasons.join(", "));
        if strict {
            return Err(CliError::Constraint(msg));
        }
        eprintln!("warning: {msg}");
    }
    Ok(est)
}

fn read_rows(path: &Path, m: usize) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CliError::Input(format!("{} row {row}: {e}", path.display())))?;
        if rec.len() < m {
            return Err(CliError::Input(format!(
                "{} row {row}: expected {m} columns, found {}",
                path.display(),
                rec.len()
            )));
        }
        let vals = rec
            .iter()
            .take(m)
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| CliError::Input(format!("{} row {row}: {e}", path.display())))?;
        rows.push(vals);
    }
    Ok(rows)
}

/// Header-less integer codes separated by whitespace or commas (the golden
/// vector format), regrouped into rows of `m`.
fn read_codes(path: &Path, m: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut codes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v: i32 = tok
                .parse()
                .map_err(|e| CliError::Input(format!("{} line {}: '{tok}': {e}", path.display(), i + 1)))?;
            codes.push(f64::from(v));
        }
    }
    if codes.len() % m != 0 {
        return Err(CliError::Input(format!(
            "row {}: {} codes do not fill rows of {m}",
            codes.len() / m + 1,
            codes.len()
        )));
    }
    Ok(codes.chunks(m).map(<[f64]>::to_vec).collect())
}

/// Integer-path predictions for every window of the input CSV. Returns the
/// number of windows written.
pub fn cmd_infer(a: &InferArgs) -> Result<usize> {
    let file = ModelFile::load(&a.model)?;
    let im = file
        .int_model
        .as_ref()
        .ok_or_else(|| CliError::Input(format!("{} has no integer export", a.model.display())))?;
    let (n, m, k) = (im.config.n, im.config.m, im.config.k);
    let rows = if a.codes { read_codes(&a.input, m)? } else { read_rows(&a.input, m)? };
    let anomaly = a.threshold.is_some();
    if anomaly && file.task != Task::Anomaly {
        return Err(CliError::Input("--threshold needs an anomaly-detection model".into()));
    }
    let th = a.threshold.as_ref().map(|p| read_json::<ThresholdFile>(p)).transpose()?;
    let stride = a.stride.unwrap_or(if anomaly { 1 } else { n });
    if stride == 0 {
        return Err(CliError::Input("--stride must be positive".into()));
    }
    if rows.len() < n {
        return Err(CliError::Input(format!(
            "row {}: input ends before the first window is complete ({} rows, window {n})",
            rows.len() + 1,
            rows.len()
        )));
    }
    if (rows.len() - n) % stride != 0 && !anomaly {
        let start = (rows.len() - n) / stride * stride + stride;
        return Err(CliError::Input(format!("row {}: incomplete window", start + 1)));
    }

    let starts: Vec<usize> = (0..=rows.len() - n).step_by(stride).collect();
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash={}", file.config_hash);
    let mut header = vec!["window".to_string(), "start_row".to_string()];
    header.extend((0..k).map(|j| format!("code_{j}")));
    header.extend((0..k).map(|j| format!("value_{j}")));
    match file.task {
        Task::Classification => header.push("class".into()),
        Task::Forecasting | Task::Anomaly => header.extend((0..k).map(|j| format!("pred_{j}"))),
    }
    if anomaly {
        header.extend(["residual", "smoothed", "flag"].map(String::from));
    }
    let _ = writeln!(out, "{}", header.join(","));

    let target_cols = &file.target_cols;
    if anomaly && target_cols.len() != k {
        return Err(CliError::Input(format!("{} lists no target columns", a.model.display())));
    }
    let mut lines = Vec::new();
    let mut residuals = Vec::new();
    for (w, &s) in starts.iter().enumerate() {
        let window: Vec<f64> = rows[s..s + n].iter().flatten().copied().collect();
        let codes = if a.codes {
            window.iter().map(|v| v.round() as i32).collect()
        } else {
            quantize(&file.scaler.transform(&window), &im.input)
        };
        let x = IntTensor::new(vec![n, m], codes, im.input);
        let (y, _) = int_forward(im, &x).map_err(|e| CliError::Input(format!("window {w}: {e}")))?;
        let vals = y.dequantize();
        let mut cells = vec![w.to_string(), (s + 1).to_string()];
        cells.extend(y.values.iter().map(|c| c.to_string()));
        cells.extend(vals.iter().map(|v| v.to_string()));
        let preds: Vec<f64> = match (&file.target_scaler, file.task) {
            (_, Task::Classification) => {
                cells.push(train::argmax(&vals).to_string());
                Vec::new()
            }
            (Some(ts), _) => ts.inverse(&vals),
            (None, _) => vals.clone(),
        };
        cells.extend(preds.iter().map(|v| v.to_string()));
        if anomaly {
            // residual against the step right after the window, in normalized units
            if s + n < rows.len() {
                let next = &rows[s + n];
                let r = (0..k)
                    .map(|j| (vals[j] - file.scaler.transform_value(target_cols[j], next[target_cols[j]])).abs())
                    .sum::<f64>()
                    / k as f64;
                residuals.push(r);
            } else {
                break;
            }
        }
        lines.push(cells);
    }
    if let Some(th) = &th {
        let smoothed = ewma(&residuals, th.threshold.beta);
        let flags = detect(&residuals, &th.threshold);
        for (i, cells) in lines.iter_mut().enumerate() {
            cells.push(residuals[i].to_string());
            cells.push(smoothed[i].to_string());
            cells.push(u8::from(flags[i]).to_string());
        }
    }
    for cells in &lines {
        let _ = writeln!(out, "{}", cells.join(","));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    std::fs::write(&a.out, out).map_err(|e| io_err(&a.out, e))?;
    Ok(lines.len())
}

#[derive(Clone, Debug)]
pub struct SearchReport {
    pub trials: Vec<Trial>,
    pub front: Vec<usize>,
    pub ledger: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

impl SearchReport {
    pub fn summary(&self) -> String {
        let done = self.trials.iter().filter(|t| t.objectives().is_some()).count();
        let mut s = format!(
            "{} trials ({} completed), front: {:?}\n",
            self.trials.len(),
            done,
            self.front
        );
        for a in &self.artifacts {
            let _ = writeln!(s, "wrote {}", a.display());
        }
        s.trim_end().to_string()
    }
}

const PARETO_COLUMNS: &str =
    "index,val_loss,energy_mj,bits,batch_size,lr,d_model,test_metric,luts,dsps,brams,latency_ms,power_mw";

fn pareto_row(t: &Trial) -> String {
    let o = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        t.index,
        o(t.val_loss),
        o(t.energy_mj),
        t.genome.bits,
        t.genome.batch_size,
        t.genome.lr,
        t.genome.d_model,
        o(t.test_metric),
        t.luts,
        t.dsps,
        t.brams,
        o(t.latency_ms),
        o(t.power_mw)
    )
}

/// Search with a resumable ledger in `out/ledger.jsonl`, Pareto CSV and
/// gnuplot-ready scatter data.
pub fn cmd_search(cfg: &RunConfig) -> Result<SearchReport> {
    let data = load_task_data(cfg)?;
    let hash = cfg.hash();
    create_out(&cfg.out)?;
    let ledger = cfg.out.join("ledger.jsonl");
    let trials = search::run_search(
        &cfg.space,
        &data,
        &cfg.platform,
        cfg.trials,
        cfg.seed,
        &cfg.search,
        Some(&ledger),
    )
    .map_err(|e| match e {
        search::SearchError::NoTrials | search::SearchError::Space(_) => CliError::Input(e.to_string()),
        other => CliError::Input(other.to_string()),
    })?;
    let front = pareto_front(&trials);

    let mut csv = format!("# config_hash={hash}\n{PARETO_COLUMNS}\n");
    for &i in &front.members {
        let _ = writeln!(csv, "{}", pareto_row(&trials[i]));
    }
    let pareto = cfg.out.join("pareto.csv");
    std::fs::write(&pareto, csv).map_err(|e| io_err(&pareto, e))?;

    let mut dat = format!("# config_hash={hash}\n# energy_mj val_loss on_front index\n");
    for t in &trials {
        if let Some([l, e]) = t.objectives() {
            let on = u8::from(front.members.contains(&t.index));
            let _ = writeln!(dat, "{e} {l} {on} {}", t.index);
        }
    }
    let dat_path = cfg.out.join("pareto.dat");
    std::fs::write(&dat_path, dat).map_err(|e| io_err(&dat_path, e))?;
    let gp = format!(
        "# config_hash={hash}\n\
         set xlabel 'energy per inference (mJ)'\n\
         set ylabel 'validation loss'\n\
         set key top right\n\
         plot 'pareto.dat' using 1:($3==0?$2:1/0) with points pt 7 lc rgb 'gray' title 'trials', \\\n\
         \x20    'pareto.dat' using 1:($3==1?$2:1/0) with points pt 7 lc rgb 'red' title 'Pareto front'\n"
    );
    let gp_path = cfg.out.join("pareto.gp");
    std::fs::write(&gp_path, gp).map_err(|e| io_err(&gp_path, e))?;

    let summary = cfg.out.join("search.json");
    write_json(
        &summary,
        &serde_json::json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "trials": trials.len(),
            "completed": trials.iter().filter(|t| t.objectives().is_some()).count(),
            "rejected": trials.iter().filter(|t| t.status == search::TrialStatus::RejectedResources).count(),
            "failed": trials.iter().filter(|t| t.status == search::TrialStatus::FailedTraining).count(),
            "front": front.members,
            "empty_front": front.empty,
        }),
    )?;
    Ok(SearchReport {
        trials,
        front: front.members,
        artifacts: vec![ledger.clone(), pareto, dat_path, gp_path, summary],
        ledger,
    })
}
