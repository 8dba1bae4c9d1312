//! Offline training, gradient-free online evaluation, baselines, the
//! sub-goal ablation, timing benchmarks and metric files.

pub mod config;
mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{load_config, resolve_config, resolve_layers, ConfigError, RunConfig};
pub use metrics::{metric_records, write_metrics, write_summary_csv, MetricRecord};

use crate::attention::AttentionError;
use crate::datagen::{read_dataset, DatasetError, LearningHistory};
use crate::envs::{EnvFamily, Side, Task, TmazeTask};
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{ActionSelection, Agent, DmhConfig, EnvSpec, Model, ModelKind, Policy, Sample};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Rng};
use crate::trajectory::{sort_context, Step};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model error: {0}")]
    Model(#[from] AttentionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown baseline {0:?} (expected ad_transformer, ad_mamba or dt)")]
    UnknownBaseline(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dmh: DmhConfig,
    pub optim: AdamWConfig,
    /// Gradient updates.
    pub iterations: usize,
    pub seed: u64,
    pub log_every: usize,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig, dataset: impl Into<PathBuf>, checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            model: cfg.model.kind,
            dmh: cfg.dmh(),
            optim: cfg.optimizer(),
            iterations: cfg.train.iterations,
            seed: cfg.train.seed,
            log_every: cfg.train.log_every,
            dataset: dataset.into(),
            checkpoint: checkpoint.into(),
        }
    }
}

/// A trained model with its parameters and the per-iteration loss curve.
pub struct Trained {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub losses: Vec<f64>,
}

/// Builds a freshly initialised model for `env`.
pub fn build_model(kind: ModelKind, cfg: &DmhConfig, env: EnvSpec, seed: u64) -> (Model, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed).fork(0);
    let model = Model::new(kind, cfg, env, &mut store, &mut rng);
    (model, store)
}

/// Rejects data the model cannot be trained on: mixed environment
/// families, histories shorter than `n` episodes, or `c` longer than an
/// episode.
pub fn check_compatible(cfg: &DmhConfig, histories: &[LearningHistory]) -> Result<EnvFamily, HarnessError> {
    let first = histories
        .first()
        .ok_or_else(|| HarnessError::Config("dataset holds no learning histories".into()))?;
    let family = first.task.family();
    for (i, h) in histories.iter().enumerate() {
        if h.task.family() != family {
            return Err(HarnessError::Config(format!(
                "history {i} is {} but history 0 is {family}",
                h.task.family()
            )));
        }
        if h.episodes.len() < cfg.n {
            return Err(HarnessError::Config(format!(
                "n = {} but history {i} holds only {} episode(s)",
                cfg.n,
                h.episodes.len()
            )));
        }
    }
    if cfg.c > family.episode_len() {
        return Err(HarnessError::Config(format!(
            "c = {} exceeds the {family} episode length {}",
            cfg.c,
            family.episode_len()
        )));
    }
    Ok(family)
}

/// Samples `n` distinct episodes of one learning history and orders
/// them by return; the last one is the prediction target.
pub fn sample_context<'a>(histories: &'a [LearningHistory], n: usize, rng: &mut Rng) -> Sample<'a> {
    let h = &histories[rng.below(histories.len())];
    let mut picks: Vec<usize> = Vec::with_capacity(n);
    while picks.len() < n {
        let i = rng.below(h.episodes.len());
        if !picks.contains(&i) {
            picks.push(i);
        }
    }
    // chronological order first, so equal returns keep their history order
    picks.sort_unstable();
    Sample {
        task: &h.task,
        context: sort_context(picks.iter().map(|&i| &h.episodes[i]).collect()),
    }
}

/// Runs `cfg.iterations` AdamW updates on `histories`, calling `log` with
/// `(iteration, loss)` every `log_every` iterations and at the end.
pub fn train_model(
    cfg: &TrainConfig,
    histories: &[LearningHistory],
    mut log: impl FnMut(usize, f64),
) -> Result<Trained, HarnessError> {
    cfg.dmh.validate().map_err(HarnessError::Config)?;
    let family = check_compatible(&cfg.dmh, histories)?;
    let env = EnvSpec::of(&histories[0].task);
    debug_assert_eq!(env.state_dim, family.state_dim());
    let (model, mut store) = build_model(cfg.model, &cfg.dmh, env, cfg.seed);
    let mut opt = AdamW::new(cfg.optim.clone(), &store);
    let mut rng = Rng::new(cfg.seed).fork(1);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch: Vec<Sample> = (0..cfg.dmh.batch_size)
            .map(|_| sample_context(histories, cfg.dmh.n, &mut rng))
            .collect();
        let g = Graph::new();
        let loss = model.loss(&g, &store, &batch, Some(&mut rng))?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(HarnessError::Config(format!("loss diverged at iteration {it}")));
        }
        g.backward(loss).accumulate_into(&mut store);
        drop(g);
        opt.step(&mut store);
        losses.push(value);
        if (it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations {
            log(it + 1, value);
        }
    }
    Ok(Trained { model, store, losses })
}

/// Reads the dataset, trains, and writes the checkpoint.
pub fn train(cfg: &TrainConfig, log: impl FnMut(usize, f64)) -> Result<Trained, HarnessError> {
    let histories = read_dataset(&cfg.dataset)?;
    let trained = train_model(cfg, &histories, log)?;
    if let Some(dir) = cfg.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    checkpoint::save(&trained.store, &cfg.checkpoint)?;
    Ok(trained)
}

/// Rebuilds a model for `env` and loads its parameters from `path`.
pub fn load_model(
    kind: ModelKind,
    cfg: &DmhConfig,
    env: EnvSpec,
    path: impl AsRef<Path>,
) -> Result<(Model, ParamStore<f32>), HarnessError> {
    let (model, mut store) = build_model(kind, cfg, env, 0);
    checkpoint::restore(&mut store, checkpoint::load(path)?)?;
    Ok((model, store))
}

/// Returns of one task's consecutive test episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub seed: u64,
    pub task: usize,
    pub returns: Vec<f64>,
    pub wall_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub episodes: usize,
    pub runs: Vec<TaskRun>,
    pub checksum_before: u64,
    pub checksum_after: u64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, (var / v.len() as f64).sqrt())
}

impl EvalReport {
    /// Mean return at each episode index over all runs.
    pub fn mean_curve(&self) -> Vec<f64> {
        (0..self.episodes)
            .map(|e| mean(&self.runs.iter().map(|r| r.returns[e]).collect::<Vec<_>>()))
            .collect()
    }

    /// Distinct seeds, in first-seen order.
    pub fn seeds(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.seed) {
                out.push(r.seed);
            }
        }
        out
    }

    /// Per-seed mean return over episodes `range` of every task.
    pub fn seed_means(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        self.seeds()
            .into_iter()
            .map(|s| {
                let v: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| r.seed == s)
                    .flat_map(|r| r.returns[range.clone()].iter().copied())
                    .collect();
                mean(&v)
            })
            .collect()
    }

    /// Mean and standard error across seeds of the return over `range`.
    pub fn summary(&self, range: std::ops::Range<usize>) -> (f64, f64) {
        mean_stderr(&self.seed_means(range))
    }

    /// Per-task mean return over `range`, pooled across seeds.
    pub fn per_task(&self, range: std::ops::Range<usize>) -> Vec<(usize, f64)> {
        let mut tasks: Vec<usize> = self.runs.iter().map(|r| r.task).collect();
        tasks.sort_unstable();
        tasks.dedup();
        tasks
            .into_iter()
            .map(|t| {
                let v: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| r.task == t)
                    .flat_map(|r| r.returns[range.clone()].iter().copied())
                    .collect();
                (t, mean(&v))
            })
            .collect()
    }

    /// Same returns, ignoring wall-clock fields.
    pub fn same_outcome(&self, other: &EvalReport) -> bool {
        self.model == other.model
            && self.episodes == other.episodes
            && self.checksum_after == other.checksum_after
            && self.runs.len() == other.runs.len()
            && self
                .runs
                .iter()
                .zip(&other.runs)
                .all(|(a, b)| a.seed == b.seed && a.task == b.task && a.returns == b.returns)
    }

    /// Appends another report's runs (same model and episode count).
    pub fn merge(&mut self, other: EvalReport) {
        assert_eq!(self.model, other.model, "merging reports of different models");
        assert_eq!(self.episodes, other.episodes, "merging reports of different lengths");
        self.runs.extend(other.runs);
    }
}

/// Plays `episodes` consecutive episodes, timing each.
pub fn timed_rollout(agent: &mut dyn Agent, task: &Task, episodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut env = crate::envs::Env::new(task.clone());
    let mut returns = Vec::with_capacity(episodes);
    let mut wall = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let t0 = Instant::now();
        let mut obs = env.reset();
        agent.begin_episode();
        let mut total = 0.0;
        while !env.is_done() {
            let a = agent.act(obs);
            let tr = env.step(a).expect("valid action in a running episode");
            agent.record(Step {
                state: obs,
                action: a,
                reward: tr.reward,
                done: tr.done,
            });
            total += tr.reward;
            obs = tr.obs;
        }
        agent.end_episode();
        wall.push(t0.elapsed().as_secs_f64() * 1e3);
        returns.push(total);
    }
    (returns, wall)
}

/// Greedy [`online_test_with`].
pub fn online_test(model: &Model, store: &ParamStore<f32>, tasks: &[Task], episodes: usize, seed: u64) -> EvalReport {
    online_test_with(model, store, tasks, episodes, seed, ActionSelection::Greedy)
}

/// Gradient-free online testing: a fresh agent per task, with an empty
/// history, runs `episodes` episodes in context. Tasks run in parallel;
/// sampled actions draw from `Rng::new(seed).fork(task)`, so results do not
/// depend on the worker count. Parameters are only borrowed immutably and the checksum is
/// recorded on both sides.
pub fn online_test_with(
    model: &Model,
    store: &ParamStore<f32>,
    tasks: &[Task],
    episodes: usize,
    seed: u64,
    selection: ActionSelection,
) -> EvalReport {
    let checksum_before = store.checksum();
    let runs = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let policy = Policy::new(selection, Rng::new(seed).fork(i as u64));
            let mut agent = model.agent_with(store, task, policy);
            let (returns, wall_ms) = timed_rollout(agent.as_mut(), task, episodes);
            TaskRun {
                seed,
                task: i,
                returns,
                wall_ms,
            }
        })
        .collect();
    EvalReport {
        model: model.kind(),
        episodes,
        runs,
        checksum_before,
        checksum_after: store.checksum(),
    }
}

/// Trains and evaluates one of the comparison models on the same data and
/// tasks a DM-H run would use.
pub fn run_baseline(
    kind: &str,
    cfg: &TrainConfig,
    histories: &[LearningHistory],
    tasks: &[Task],
    episodes: usize,
) -> Result<EvalReport, HarnessError> {
    let kind: ModelKind = kind.parse().map_err(|_| HarnessError::UnknownBaseline(kind.to_string()))?;
    if kind == ModelKind::Dmh {
        return Err(HarnessError::UnknownBaseline(kind.to_string()));
    }
    let cfg = TrainConfig { model: kind, ..cfg.clone() };
    let trained = train_model(&cfg, histories, |_, _| {})?;
    Ok(online_test(&trained.model, &trained.store, tasks, episodes, cfg.seed))
}

/// The two arms of the sub-goal ablation; they differ only in
/// `valuable_subgoals`.
pub fn ablation_configs(cfg: &TrainConfig) -> (TrainConfig, TrainConfig) {
    let mut with = cfg.clone();
    with.model = ModelKind::Dmh;
    with.dmh.valuable_subgoals = true;
    let mut without = with.clone();
    without.dmh.valuable_subgoals = false;
    (with, without)
}

/// Paired reports (with, without) over `seeds`, each seed training both arms
/// on the same data and evaluating them on the same tasks.
pub fn ablate_subgoals(
    cfg: &TrainConfig,
    histories: &[LearningHistory],
    tasks: &[Task],
    episodes: usize,
    seeds: &[u64],
    selection: ActionSelection,
) -> Result<(EvalReport, EvalReport), HarnessError> {
    let (with, without) = ablation_configs(cfg);
    let mut out: Option<(EvalReport, EvalReport)> = None;
    for &seed in seeds {
        let arm = |c: &TrainConfig| -> Result<EvalReport, HarnessError> {
            let c = TrainConfig { seed, ..c.clone() };
            let t = train_model(&c, histories, |_, _| {})?;
            Ok(online_test_with(&t.model, &t.store, tasks, episodes, seed, selection))
        };
        let (a, b) = (arm(&with)?, arm(&without)?);
        match &mut out {
            None => out = Some((a, b)),
            Some((x, y)) => {
                x.merge(a);
                y.merge(b);
            }
        }
    }
    out.ok_or_else(|| HarnessError::Config("ablation needs at least one seed".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTiming {
    pub model: ModelKind,
    /// Median wall time of one online episode at each horizon.
    pub median_ms: Vec<f64>,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub horizons: Vec<usize>,
    pub models: Vec<ModelTiming>,
}

impl TimingReport {
    pub fn get(&self, kind: ModelKind) -> Option<&ModelTiming> {
        self.models.iter().find(|m| m.model == kind)
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Online time per episode on Tmaze at each horizon, with the context
/// spanning the whole horizon. Each measurement plays `warmup` untimed
/// episodes followed by `reps` timed ones with fresh agents; models use
/// freshly initialised weights, since cost does not depend on their values.
/// Runs on the calling thread.
pub fn benchmark_timing(
    models: &[ModelKind],
    horizons: &[usize],
    cfg: &DmhConfig,
    warmup: usize,
    reps: usize,
) -> Result<TimingReport, HarnessError> {
    if horizons.len() < 4 {
        return Err(HarnessError::Config(format!(
            "timing needs at least 4 horizons, got {}",
            horizons.len()
        )));
    }
    if reps == 0 {
        return Err(HarnessError::Config("timing needs at least one repetition".into()));
    }
    let cfg = DmhConfig { n: 1, ..cfg.clone() };
    let mut out = Vec::new();
    for &kind in models {
        let mut med = Vec::with_capacity(horizons.len());
        for &h in horizons {
            let task = Task::Tmaze(TmazeTask { horizon: h, side: Side::Up });
            let (model, store) = build_model(kind, &cfg, EnvSpec::of(&task), 0);
            let mut times = Vec::with_capacity(reps);
            for r in 0..warmup + reps {
                let mut agent = model.agent(&store, &task);
                let (_, wall) = timed_rollout(agent.as_mut(), &task, 1);
                if r >= warmup {
                    times.push(wall[0]);
                }
            }
            med.push(median(times));
        }
        let xs: Vec<f64> = horizons.iter().map(|&h| h as f64).collect();
        out.push(ModelTiming {
            model: kind,
            slope: loglog_slope(&xs, &med),
            median_ms: med,
        });
    }
    Ok(TimingReport {
        horizons: horizons.to_vec(),
        models: out,
    })
}

#[cfg(test)]
mod tests;
