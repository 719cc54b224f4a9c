//! Run configuration: a TOML file overridden by command-line flags.
//! Precedence is flags > file > defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use qforge_core::data::{DatasetSchema, SynthKind};
use qforge_core::hwmodel::PlatformSpec;
use qforge_core::search::{SearchSettings, SearchSpace};
use qforge_core::Task;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable naming an extra directory of platform profiles.
pub const PLATFORM_DIR_ENV: &str = "QFORGE_PLATFORM_DIR";

#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// forecasting | classification | anomaly
    #[arg(long)]
    pub task: Option<String>,
    /// CSV path, or `synthetic:<sine|shapelet|spike>`.
    #[arg(long)]
    pub data: Option<String>,
    /// Built-in dataset schema name or a schema JSON file (CSV data only).
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub platform: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Also train a float model and report its metric.
    #[arg(long)]
    pub baseline: bool,
    /// Treat an over-budget design as an error (exit 3).
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub bits: Option<u8>,
    /// Window length override.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    task: Option<String>,
    data: Option<String>,
    schema: Option<String>,
    platform: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    trials: Option<usize>,
    baseline: Option<bool>,
    strict: Option<bool>,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    search: SearchSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    d_model: Option<usize>,
    bits: Option<u8>,
    window: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    batch_size: Option<usize>,
    lr: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchSection {
    population: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    mutation_p: Option<f64>,
    lr_sigma: Option<f64>,
    bits: Option<Vec<u8>>,
    batch_sizes: Option<Vec<usize>>,
    d_models: Option<Vec<usize>>,
    lr_min: Option<f64>,
    lr_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic { fixture: SynthKind },
    Csv { path: PathBuf, schema: DatasetSchema },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub task: Task,
    pub data: DataSource,
    pub platform: PlatformSpec,
    pub seed: u64,
    #[serde(skip)]
    pub out: PathBuf,
    pub d_model: usize,
    pub bits: u8,
    pub window: Option<usize>,
    pub train: TrainSettings,
    pub trials: usize,
    pub space: SearchSpace,
    pub search: SearchSettings,
    pub baseline: bool,
    pub strict: bool,
}

impl RunConfig {
    /// SHA-256 over the canonical JSON of everything but the output directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn platform_dir() -> Option<PathBuf> {
    std::env::var_os(PLATFORM_DIR_ENV).map(PathBuf::from)
}

pub fn find_platform(name: &str) -> Result<PlatformSpec, CliError> {
    PlatformSpec::find(name, platform_dir().as_deref()).map_err(|e| CliError::Input(e.to_string()))
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    s.parse().map_err(|_| CliError::Input(format!("unknown task '{s}'")))
}

fn synthetic_for(task: Task) -> SynthKind {
    match task {
        Task::Forecasting => SynthKind::SineForecast,
        Task::Classification => SynthKind::ShapeletClassify,
        Task::Anomaly => SynthKind::SpikeAnomaly,
    }
}

fn resolve_schema(name: Option<&str>, data: &Path) -> Result<DatasetSchema, CliError> {
    match name {
        Some(n) => {
            if let Some(s) = DatasetSchema::builtin(n) {
                return Ok(s);
            }
            let p = Path::new(n);
            if p.is_file() {
                return DatasetSchema::load(p).map_err(|e| CliError::Input(e.to_string()));
            }
            Err(CliError::Input(format!(
                "unknown schema '{n}' (built-in: {})",
                DatasetSchema::builtin_names().join(", ")
            )))
        }
        None => data
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(DatasetSchema::builtin)
            .ok_or_else(|| CliError::Input(format!("no --schema given and none matches {}", data.display()))),
    }
}

/// Merges defaults, the optional config file and flags, and checks that the
/// platform and dataset resolve.
pub fn resolve(args: &RunArgs) -> Result<RunConfig, CliError> {
    let file: FileConfig = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };

    let task = args.task.as_deref().or(file.task.as_deref()).map(parse_task).transpose()?;
    let data_arg = args.data.clone().or(file.data);
    let schema_arg = args.schema.clone().or(file.schema);
    let data = match data_arg.as_deref() {
        None => DataSource::Synthetic {
            fixture: synthetic_for(task.unwrap_or(Task::Forecasting)),
        },
        Some(d) if d.starts_with("synthetic:") => DataSource::Synthetic {
            fixture: d["synthetic:".len()..]
                .parse()
                .map_err(|e: String| CliError::Input(e))?,
        },
        Some(d) => {
            let path = PathBuf::from(d);
            if !path.is_file() {
                return Err(CliError::Input(format!("dataset not found: {}", path.display())));
            }
            let schema = resolve_schema(schema_arg.as_deref(), &path)?;
            DataSource::Csv { path, schema }
        }
    };
    let data_task = match &data {
        DataSource::Synthetic { fixture } => fixture.task(),
        DataSource::Csv { schema, .. } => schema.task,
    };
    if let Some(t) = task {
        if t != data_task {
            return Err(CliError::Input(format!("--task {t} does not match the dataset's task {data_task}")));
        }
    }

    let platform = find_platform(args.platform.as_deref().or(file.platform.as_deref()).unwrap_or("xc7s15"))?;
    // an unset patience shrinks to fit a short epoch budget
    let fit_patience = |p: Option<usize>, epochs: usize| p.unwrap_or(10.min(epochs.saturating_sub(1)));
    let max_epochs = args.epochs.or(file.train.max_epochs).unwrap_or(100);
    let train = TrainSettings {
        batch_size: args.batch_size.or(file.train.batch_size).unwrap_or(32),
        lr: args.lr.or(file.train.lr).unwrap_or(5e-3),
        max_epochs,
        patience: fit_patience(args.patience.or(file.train.patience), max_epochs),
    };
    if train.batch_size == 0 || !(train.lr > 0.0) || train.max_epochs == 0 || train.patience >= train.max_epochs {
        return Err(CliError::Input(format!(
            "invalid training settings: batch_size={} lr={} epochs={} patience={} (patience must be below epochs)",
            train.batch_size, train.lr, train.max_epochs, train.patience
        )));
    }
    let defaults = SearchSettings::default();
    let s = &file.search;
    let search_epochs = args.epochs.or(s.max_epochs).unwrap_or(defaults.max_epochs);
    let search = SearchSettings {
        population: s.population.unwrap_or(defaults.population),
        mutation_p: s.mutation_p.unwrap_or(defaults.mutation_p),
        lr_sigma: s.lr_sigma.unwrap_or(defaults.lr_sigma),
        max_epochs: search_epochs,
        patience: fit_patience(args.patience.or(s.patience), search_epochs),
    };
    if search.population == 0 || search.max_epochs == 0 || search.patience >= search.max_epochs {
        return Err(CliError::Input(format!(
            "invalid search settings: population={} epochs={} patience={}",
            search.population, search.max_epochs, search.patience
        )));
    }
    let sd = SearchSpace::default();
    let space = SearchSpace {
        bits: s.bits.clone().unwrap_or(sd.bits),
        batch_sizes: s.batch_sizes.clone().unwrap_or(sd.batch_sizes),
        lr_min: s.lr_min.unwrap_or(sd.lr_min),
        lr_max: s.lr_max.unwrap_or(sd.lr_max),
        d_models: s.d_models.clone().unwrap_or(sd.d_models),
    };
    space.validate().map_err(|e| CliError::Input(e.to_string()))?;

    let cfg = RunConfig {
        task: data_task,
        data,
        platform,
        seed: args.seed.or(file.seed).unwrap_or(42),
        out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("qforge-out")),
        d_model: args.d_model.or(file.model.d_model).unwrap_or(16),
        bits: args.bits.or(file.model.bits).unwrap_or(8),
        window: args.window.or(file.model.window),
        train,
        trials: args.trials.or(file.trials).unwrap_or(20),
        space,
        search,
        baseline: args.baseline || file.baseline.unwrap_or(false),
        strict: args.strict || file.strict.unwrap_or(false),
    };
    if !(2..=8).contains(&cfg.bits) {
        return Err(CliError::Input(format!("bits must be in 2..=8, got {}", cfg.bits)));
    }
    if cfg.trials == 0 {
        return Err(CliError::Input("--trials must be at least 1".into()));
    }
    Ok(cfg)
}
