//! Hardware-aware multi-objective hyperparameter search: NSGA-II over
//! (bitwidth, batch size, learning rate, model width), minimizing validation
//! loss and energy per inference, with a resumable JSON Lines ledger.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TaskData;
use crate::hwmodel::{self, HwEstimate, HwShape, PlatformSpec};
use crate::intrt::export_int;
use crate::model::{ModelConfig, TransformerModel};
use crate::train::{self, LossKind, TrainSpec};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("need at least one trial")]
    NoTrials,
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("ledger {path}: {msg}")]
    Ledger { path: String, msg: String },
    #[error("ledger line {line} does not replay: {msg}")]
    Replay { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, SearchError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub bits: Vec<u8>,
    pub batch_sizes: Vec<usize>,
    pub lr_min: f64,
    pub lr_max: f64,
    pub d_models: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            bits: vec![4, 6, 8],
            batch_sizes: (1..=16).map(|i| i * 16).collect(),
            lr_min: 1e-5,
            lr_max: 1e-2,
            d_models: (1..=8).map(|i| i * 8).collect(),
        }
    }
}

/// One point of the search space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub bits: u8,
    pub batch_size: usize,
    pub lr: f64,
    pub d_model: usize,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SearchError::Space(m.to_string()));
        if self.bits.is_empty() || self.batch_sizes.is_empty() || self.d_models.is_empty() {
            return bad("every categorical gene needs at least one choice");
        }
        if self.bits.iter().any(|b| !(2..=8).contains(b)) {
            return bad("bitwidths must lie in 2..=8");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("learning-rate interval must be positive and ordered");
        }
        if self.batch_sizes.contains(&0) || self.d_models.contains(&0) {
            return bad("batch sizes and widths must be positive");
        }
        Ok(())
    }

    pub fn contains(&self, g: &Genome) -> bool {
        self.bits.contains(&g.bits)
            && self.batch_sizes.contains(&g.batch_size)
            && self.d_models.contains(&g.d_model)
            && g.lr >= self.lr_min
            && g.lr <= self.lr_max
    }

    /// Uniform over the grids, log-uniform over the learning rate.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Genome {
        let (lo, hi) = (self.lr_min.ln(), self.lr_max.ln());
        Genome {
            bits: self.bits[rng.random_range(0..self.bits.len())],
            batch_size: self.batch_sizes[rng.random_range(0..self.batch_sizes.len())],
            lr: if hi > lo { rng.random_range(lo..=hi).exp() } else { self.lr_min },
            d_model: self.d_models[rng.random_range(0..self.d_models.len())],
        }
    }

    fn clamp_lr(&self, lr: f64) -> f64 {
        lr.clamp(self.lr_min, self.lr_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Completed,
    RejectedResources,
    FailedTraining,
}

/// One ledger entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub generation: usize,
    pub seed: u64,
    pub genome: Genome,
    pub status: TrialStatus,
    pub val_loss: Option<f64>,
    pub test_metric: Option<f64>,
    pub epochs: Option<usize>,
    pub luts: u64,
    pub dsps: u64,
    pub brams: u64,
    pub cycles: Option<u64>,
    pub latency_ms: Option<f64>,
    pub power_mw: Option<f64>,
    pub energy_mj: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trial {
    /// `(validation loss, energy)` for completed trials.
    pub fn objectives(&self) -> Option<[f64; 2]> {
        match (self.status, self.val_loss, self.energy_mj) {
            (TrialStatus::Completed, Some(l), Some(e)) => Some([l, e]),
            _ => None,
        }
    }
}

/// What an evaluator reports for one genome.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub status: TrialStatus,
    pub val_loss: Option<f64>,
    pub test_metric: Option<f64>,
    pub epochs: Option<usize>,
    pub hw: HwEstimate,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub population: usize,
    pub mutation_p: f64,
    pub lr_sigma: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            population: 20,
            mutation_p: 0.2,
            lr_sigma: 0.3,
            max_epochs: 100,
            patience: 10,
        }
    }
}

/// Independent stream per trial (splitmix64 of the search seed and index).
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(t as u64))
}

pub fn dominates(a: &[f64; 2], b: &[f64; 2]) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
}

/// Fronts of indices into `points`; front 0 is non-dominated.
pub fn non_dominated_sort(points: &[[f64; 2]]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dominates(&points[i], &points[j]) {
                dominates_list[i].push(j);
            } else if i != j && dominates(&points[j], &points[i]) {
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of `front` (same order).
pub fn crowding_distance(points: &[[f64; 2]], front: &[usize]) -> Vec<f64> {
    let mut dist = vec![0.0; front.len()];
    if front.len() <= 2 {
        return vec![f64::INFINITY; front.len()];
    }
    for obj in 0..2 {
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| points[front[a]][obj].total_cmp(&points[front[b]][obj]).then(a.cmp(&b)));
        let lo = points[front[order[0]]][obj];
        let hi = points[front[*order.last().unwrap()]][obj];
        dist[order[0]] = f64::INFINITY;
        dist[*order.last().unwrap()] = f64::INFINITY;
        if hi > lo {
            for w in 1..order.len() - 1 {
                let gap = points[front[order[w + 1]]][obj] - points[front[order[w - 1]]][obj];
                dist[order[w]] += gap / (hi - lo);
            }
        }
    }
    dist
}

/// Rank and crowding of every point: `(front index, crowding distance)`.
fn rank_points(points: &[[f64; 2]]) -> Vec<(usize, f64)> {
    let mut out = vec![(0, 0.0); points.len()];
    for (r, front) in non_dominated_sort(points).iter().enumerate() {
        for (i, c) in front.iter().zip(crowding_distance(points, front)) {
            out[*i] = (r, c);
        }
    }
    out
}

fn better(a: (usize, f64), b: (usize, f64)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 > b.1)
}

/// Survivor selection: the best `size` completed trials by rank, then by
/// crowding distance, then by index.
pub fn select_population(trials: &[Trial], size: usize) -> Vec<&Trial> {
    let done: Vec<&Trial> = trials.iter().filter(|t| t.objectives().is_some()).collect();
    let points: Vec<[f64; 2]> = done.iter().map(|t| t.objectives().unwrap()).collect();
    let ranks = rank_points(&points);
    let mut order: Vec<usize> = (0..done.len()).collect();
    order.sort_by(|&a, &b| {
        ranks[a]
            .0
            .cmp(&ranks[b].0)
            .then(ranks[b].1.total_cmp(&ranks[a].1))
            .then(done[a].index.cmp(&done[b].index))
    });
    order.into_iter().take(size).map(|i| done[i]).collect()
}

/// One NSGA-II reproduction step: binary tournaments on (rank, crowding),
/// uniform crossover, per-gene mutation (categorical resample, log-normal
/// learning-rate perturbation clamped to the interval).
pub fn nsga2_step<R: Rng>(
    population: &[&Trial],
    space: &SearchSpace,
    settings: &SearchSettings,
    rng: &mut R,
    count: usize,
) -> Vec<Genome> {
    if population.is_empty() {
        return (0..count).map(|_| space.sample(rng)).collect();
    }
    let points: Vec<[f64; 2]> = population
        .iter()
        .map(|t| t.objectives().unwrap_or([f64::INFINITY; 2]))
        .collect();
    let ranks = rank_points(&points);
    let tournament = |rng: &mut R| {
        let a = rng.random_range(0..population.len());
        let b = rng.random_range(0..population.len());
        if better(ranks[b], ranks[a]) {
            b
        } else {
            a
        }
    };
    let lr_noise = Normal::new(0.0, settings.lr_sigma).expect("sigma is finite");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let pa = population[tournament(rng)].genome;
        let pb = population[tournament(rng)].genome;
        let mut child = Genome {
            bits: if rng.random_bool(0.5) { pa.bits } else { pb.bits },
            batch_size: if rng.random_bool(0.5) { pa.batch_size } else { pb.batch_size },
            lr: if rng.random_bool(0.5) { pa.lr } else { pb.lr },
            d_model: if rng.random_bool(0.5) { pa.d_model } else { pb.d_model },
        };
        let p = settings.mutation_p;
        if rng.random_bool(p) {
            child.bits = space.bits[rng.random_range(0..space.bits.len())];
        }
        if rng.random_bool(p) {
            child.batch_size = space.batch_sizes[rng.random_range(0..space.batch_sizes.len())];
        }
        if rng.random_bool(p) {
            child.lr = space.clamp_lr(child.lr * lr_noise.sample(rng).exp());
        }
        if rng.random_bool(p) {
            child.d_model = space.d_models[rng.random_range(0..space.d_models.len())];
        }
        child.lr = space.clamp_lr(child.lr);
        out.push(child);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParetoFront {
    /// Trial indices of the non-dominated completed trials, ascending.
    pub members: Vec<usize>,
    /// Set when the ledger holds no completed trial.
    pub empty: bool,
}

/// Exact non-dominated filter over completed trials; exact ties are all kept.
pub fn pareto_front(trials: &[Trial]) -> ParetoFront {
    let done: Vec<(&Trial, [f64; 2])> = trials
        .iter()
        .filter_map(|t| t.objectives().map(|o| (t, o)))
        .collect();
    let mut members: Vec<usize> = done
        .iter()
        .filter(|(_, o)| !done.iter().any(|(_, p)| dominates(p, o)))
        .map(|(t, _)| t.index)
        .collect();
    members.sort_unstable();
    ParetoFront {
        empty: done.is_empty(),
        members,
    }
}

fn ledger_err(path: &Path, msg: impl ToString) -> SearchError {
    SearchError::Ledger {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

pub fn read_ledger(path: &Path) -> Result<Vec<Trial>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = std::fs::File::open(path).map_err(|e| ledger_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ledger_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trial = serde_json::from_str(&line).map_err(|e| ledger_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

pub fn ledger_line(t: &Trial) -> String {
    serde_json::to_string(t).expect("trial serializes")
}

fn genome_matches(a: &Genome, b: &Genome) -> bool {
    a.bits == b.bits && a.batch_size == b.batch_size && a.d_model == b.d_model && a.lr.to_bits() == b.lr.to_bits()
}

/// NSGA-II driver with a pluggable evaluator `(genome, trial seed) → Outcome`.
///
/// Generations are proposed sequentially from one seeded stream; trials of
/// a generation evaluate in parallel and are appended to the ledger in index
/// order. Entries already in `ledger` are replayed instead of re-evaluated,
/// so an interrupted search resumes where it stopped.
pub fn run_search_with<F>(
    space: &SearchSpace,
    settings: &SearchSettings,
    n_trials: usize,
    seed: u64,
    ledger: Option<&Path>,
    evaluate: F,
) -> Result<Vec<Trial>>
where
    F: Fn(&Genome, u64) -> Outcome + Sync,
{
    if n_trials == 0 {
        return Err(SearchError::NoTrials);
    }
    space.validate()?;
    let prior = match ledger {
        Some(p) => read_ledger(p)?,
        None => Vec::new(),
    };
    let mut sink = match ledger {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| ledger_err(p, e))?,
        ),
        None => None,
    };
    let pop = settings.population.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials: Vec<Trial> = Vec::with_capacity(n_trials);
    let mut generation = 0;
    while trials.len() < n_trials {
        let count = pop.min(n_trials - trials.len());
        let genomes = if generation == 0 {
            (0..count).map(|_| space.sample(&mut rng)).collect()
        } else {
            let parents = select_population(&trials, pop);
            nsga2_step(&parents, space, settings, &mut rng, count)
        };
        let base = trials.len();
        for (i, g) in genomes.iter().enumerate() {
            if let Some(p) = prior.get(base + i) {
                if p.index != base + i || !genome_matches(&p.genome, g) {
                    return Err(SearchError::Replay {
                        line: base + i + 1,
                        msg: "configuration differs from the seeded proposal".into(),
                    });
                }
            }
        }
        let results: Vec<(Trial, bool)> = genomes
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let t = base + i;
                if let Some(p) = prior.get(t) {
                    return (p.clone(), false);
                }
                let s = trial_seed(seed, t);
                (make_trial(t, generation, s, *g, evaluate(g, s)), true)
            })
            .collect();
        for (t, fresh) in results {
            if fresh {
                if let (Some(f), Some(p)) = (sink.as_mut(), ledger) {
                    writeln!(f, "{}", ledger_line(&t)).map_err(|e| ledger_err(p, e))?;
                }
            }
            trials.push(t);
        }
        generation += 1;
    }
    if let (Some(f), Some(p)) = (sink.as_mut(), ledger) {
        f.flush().map_err(|e| ledger_err(p, e))?;
    }
    Ok(trials)
}

fn make_trial(index: usize, generation: usize, seed: u64, genome: Genome, o: Outcome) -> Trial {
    let completed = o.status == TrialStatus::Completed;
    let keep = |v: Option<f64>| if completed { v } else { None };
    Trial {
        index,
        generation,
        seed,
        genome,
        status: o.status,
        val_loss: keep(o.val_loss),
        test_metric: keep(o.test_metric),
        epochs: if completed { o.epochs } else { None },
        luts: o.hw.luts,
        dsps: o.hw.dsps,
        brams: o.hw.brams,
        cycles: completed.then_some(o.hw.cycles),
        latency_ms: keep(Some(o.hw.latency_ms)),
        power_mw: keep(Some(o.hw.power_mw)),
        energy_mj: keep(Some(o.hw.energy_mj)),
        reasons: o.hw.reasons,
        error: o.error,
    }
}

/// Trains, exports and costs one genome on `data`: the real evaluator.
///
/// Over-budget shapes are rejected before any training.
pub fn evaluate_genome(data: &TaskData, platform: &PlatformSpec, settings: &SearchSettings, g: &Genome, seed: u64) -> Outcome {
    let cfg = ModelConfig {
        n: data.n(),
        m: data.m(),
        k: data.k(),
        d_model: g.d_model,
        bits: Some(g.bits),
        task: data.task,
    };
    let pre = hwmodel::estimate_shape(&HwShape::from_config(&cfg, g.bits), platform);
    if !pre.deployable {
        return Outcome {
            status: TrialStatus::RejectedResources,
            val_loss: None,
            test_metric: None,
            epochs: None,
            hw: pre,
            error: None,
        };
    }
    let failed = |hw: HwEstimate, e: String| Outcome {
        status: TrialStatus::FailedTraining,
        val_loss: None,
        test_metric: None,
        epochs: None,
        hw,
        error: Some(e),
    };
    let run = || -> std::result::Result<Outcome, String> {
        let model = TransformerModel::build(cfg, seed).map_err(|e| e.to_string())?;
        let spec = TrainSpec {
            max_epochs: settings.max_epochs,
            patience: settings.patience,
            ..TrainSpec::new(g.batch_size, g.lr, LossKind::for_task(data.task), seed)
        };
        let fit = train::fit(model, &data.train, &data.val, &spec).map_err(|e| e.to_string())?;
        let mut model = fit.model;
        model.freeze_observers();
        let im = export_int(&model).map_err(|e| e.to_string())?;
        let hw = hwmodel::estimate(&im, platform);
        let val = train::predict_int(&im, &data.val).map_err(|e| e.to_string())?;
        let test = train::predict_int(&im, &data.test).map_err(|e| e.to_string())?;
        let eval = train::evaluate(data, &val, &test).map_err(|e| e.to_string())?;
        Ok(Outcome {
            status: TrialStatus::Completed,
            val_loss: Some(fit.best_val_loss),
            test_metric: Some(eval.metric),
            epochs: Some(fit.epochs_run),
            hw,
            error: None,
        })
    };
    run().unwrap_or_else(|e| failed(pre, e))
}

/// Full hardware-aware search on one task.
pub fn run_search(
    space: &SearchSpace,
    data: &TaskData,
    platform: &PlatformSpec,
    n_trials: usize,
    seed: u64,
    settings: &SearchSettings,
    ledger: Option<&Path>,
) -> Result<Vec<Trial>> {
    run_search_with(space, settings, n_trials, seed, ledger, |g, s| {
        evaluate_genome(data, platform, settings, g, s)
    })
}
