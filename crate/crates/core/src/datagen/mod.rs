//! Offline learning-history datasets.
//!
//! Grid tasks are recorded from tabular ε-greedy Q-learning runs; Tmaze data
//! is a shuffled mixture of scripted-optimal and random-turn episodes.
//! Datasets are newline-delimited JSON: each history is a header line
//! followed by `num_episodes` episode lines.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{optimal_action, Env, Side, Task, NUM_ACTIONS, RIGHT};
use crate::tensor::Rng;
use crate::trajectory::{Step, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the step budget over which ε anneals linearly.
    pub anneal_fraction: f64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.99,
            eps_start: 1.0,
            eps_end: 0.05,
            anneal_fraction: 0.5,
        }
    }
}

/// Action values over the task's tabular state space.
#[derive(Clone, Debug)]
pub struct QTable {
    values: Vec<f64>,
    cfg: QConfig,
}

impl QTable {
    pub fn new(task: &Task, cfg: QConfig) -> Self {
        Self {
            values: vec![0.0; task.q_states() * NUM_ACTIONS],
            cfg,
        }
    }

    pub fn states(&self) -> usize {
        self.values.len() / NUM_ACTIONS
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * NUM_ACTIONS..(s + 1) * NUM_ACTIONS]
    }

    /// ε at interaction step `step` of a `budget`-step run.
    pub fn epsilon(&self, step: usize, budget: usize) -> f64 {
        let span = (self.cfg.anneal_fraction * budget as f64).max(1.0);
        let frac = (step as f64 / span).min(1.0);
        self.cfg.eps_start + (self.cfg.eps_end - self.cfg.eps_start) * frac
    }

    /// Greedy action with uniform tie-breaking.
    pub fn greedy(&self, s: usize, rng: &mut Rng) -> usize {
        let row = self.row(s);
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..NUM_ACTIONS).filter(|&a| row[a] == best).collect();
        ties[rng.below(ties.len())]
    }

    pub fn act(&self, s: usize, eps: f64, rng: &mut Rng) -> usize {
        if rng.bernoulli(eps) {
            rng.below(NUM_ACTIONS)
        } else {
            self.greedy(s, rng)
        }
    }

    /// One-step Q-learning update. Time-limit ends are not terminal, so the
    /// target always bootstraps.
    pub fn update(&mut self, s: usize, a: usize, r: f64, next: usize) {
        let next_best = self.row(next).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let q = &mut self.values[s * NUM_ACTIONS + a];
        *q += self.cfg.alpha * (r + self.cfg.gamma * next_best - *q);
    }
}

/// Ordered episodes from one run on one task.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningHistory {
    pub task: Task,
    pub episodes: Vec<Trajectory>,
}

impl LearningHistory {
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(Trajectory::total_return).collect()
    }

    pub fn steps(&self) -> usize {
        self.episodes.iter().map(Trajectory::len).sum()
    }
}

pub fn collect_history(task: &Task, budget: usize, rng: &mut Rng) -> LearningHistory {
    collect_history_with(task, budget, QConfig::default(), rng)
}

/// Runs ε-greedy Q-learning for exactly `budget` interaction steps; the last
/// episode is cut short if the budget ends mid-episode.
///
/// # Panics
/// If `budget` is shorter than one episode.
pub fn collect_history_with(task: &Task, budget: usize, cfg: QConfig, rng: &mut Rng) -> LearningHistory {
    assert!(budget >= task.episode_len(), "budget must cover at least one episode");
    let mut q = QTable::new(task, cfg);
    let mut env = Env::new(task.clone());
    let mut episodes = Vec::with_capacity(budget.div_ceil(task.episode_len()));
    let mut used = 0;
    while used < budget {
        let mut obs = env.reset();
        let mut steps = Vec::with_capacity(task.episode_len());
        while !env.is_done() && used < budget {
            let s = env.q_index();
            let a = q.act(s, q.epsilon(used, budget), rng);
            let tr = env.step(a).expect("episode running");
            q.update(s, a, tr.reward, env.q_index());
            steps.push(Step {
                state: obs,
                action: a,
                reward: tr.reward,
                done: tr.done,
            });
            obs = tr.obs;
            used += 1;
        }
        episodes.push(Trajectory::new(steps));
    }
    LearningHistory {
        task: task.clone(),
        episodes,
    }
}

/// One history per task, collected in parallel; task `i` uses stream `i` of
/// `rng`, so results do not depend on the thread count.
pub fn collect_histories(tasks: &[Task], budget: usize, rng: &Rng) -> Vec<LearningHistory> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| collect_history(t, budget, &mut rng.fork(i as u64)))
        .collect()
}

/// Runs one episode of `policy` and records it.
pub fn record_episode(task: &Task, mut policy: impl FnMut(&Env) -> usize) -> Trajectory {
    let mut env = Env::new(task.clone());
    let mut obs = env.observe();
    let mut steps = Vec::with_capacity(task.episode_len());
    while !env.is_done() {
        let a = policy(&env);
        let tr = env.step(a).expect("episode running");
        steps.push(Step {
            state: obs,
            action: a,
            reward: tr.reward,
            done: tr.done,
        });
        obs = tr.obs;
    }
    Trajectory::new(steps)
}

/// Tmaze episodes: a `optimal_fraction` share follow the scripted-optimal
/// policy, the rest walk the corridor and turn up or down at random.
///
/// # Panics
/// If `task` is not a Tmaze task or `optimal_fraction` is outside `[0, 1]`.
pub fn collect_tmaze_data(task: &Task, n_episodes: usize, optimal_fraction: f64, rng: &mut Rng) -> LearningHistory {
    assert!((0.0..=1.0).contains(&optimal_fraction), "optimal_fraction must lie in [0, 1]");
    let Task::Tmaze(tm) = task else { panic!("collect_tmaze_data needs a Tmaze task") };
    let junction = tm.horizon as i32 - 1;
    let n_opt = (optimal_fraction * n_episodes as f64).round() as usize;
    let mut episodes = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes {
        if k < n_opt {
            episodes.push(record_episode(task, optimal_action));
        } else {
            let turn = if rng.bernoulli(0.5) { Side::Up } else { Side::Down }.action();
            episodes.push(record_episode(task, |env| {
                if env.observe()[0] == junction {
                    turn
                } else {
                    RIGHT
                }
            }));
        }
    }
    rng.shuffle(&mut episodes);
    LearningHistory {
        task: task.clone(),
        episodes,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { line: usize, found: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub env_name: String,
    pub task_parameters: Task,
    pub num_episodes: usize,
}

pub fn write_dataset_to(histories: &[LearningHistory], mut out: impl Write) -> io::Result<()> {
    for h in histories {
        let header = DatasetHeader {
            format_version: FORMAT_VERSION,
            env_name: h.task.family().to_string(),
            task_parameters: h.task.clone(),
            num_episodes: h.episodes.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for ep in &h.episodes {
            serde_json::to_writer(&mut out, ep)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}

pub fn write_dataset(histories: &[LearningHistory], path: impl AsRef<Path>) -> io::Result<()> {
    write_dataset_to(histories, BufWriter::new(File::create(path)?))
}

pub fn read_dataset_from(input: impl BufRead) -> Result<Vec<LearningHistory>, DatasetError> {
    let mut histories: Vec<LearningHistory> = Vec::new();
    let mut remaining = 0usize;
    let mut last_line = 0;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = line?;
        let parse_err = |e: serde_json::Error| DatasetError::Parse {
            line: line_no,
            msg: e.to_string(),
        };
        if remaining == 0 {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
            if let Some(v) = value.get("format_version").and_then(|v| v.as_u64()) {
                if v != FORMAT_VERSION as u64 {
                    return Err(DatasetError::Version {
                        line: line_no,
                        found: v as u32,
                    });
                }
            }
            let header: DatasetHeader = serde_json::from_value(value).map_err(parse_err)?;
            let family = header.task_parameters.family().to_string();
            if header.env_name != family {
                return Err(DatasetError::Parse {
                    line: line_no,
                    msg: format!("env_name {:?} does not match task family {family:?}", header.env_name),
                });
            }
            remaining = header.num_episodes;
            histories.push(LearningHistory {
                task: header.task_parameters,
                episodes: Vec::with_capacity(remaining),
            });
        } else {
            let ep: Trajectory = serde_json::from_str(&line).map_err(parse_err)?;
            histories.last_mut().expect("header precedes episodes").episodes.push(ep);
            remaining -= 1;
        }
    }
    if remaining > 0 {
        return Err(DatasetError::Parse {
            line: last_line + 1,
            msg: format!("unexpected end of file: {remaining} episode(s) missing"),
        });
    }
    Ok(histories)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<LearningHistory>, DatasetError> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{sample_task, sample_tasks, EnvFamily, TmazeTask};

    fn darkroom(seed: u64) -> Task {
        sample_task(EnvFamily::Darkroom, &mut Rng::new(seed))
    }

    fn quarter_means(r: &[f64]) -> (f64, f64) {
        let q = r.len() / 4;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&r[..q]), mean(&r[r.len() - q..]))
    }

    #[test]
    fn darkroom_history_improves() {
        let h = collect_history(&darkroom(3), 50_000, &mut Rng::new(11));
        assert_eq!(h.steps(), 50_000);
        assert_eq!(h.episodes.len(), 2500);
        let (first, last) = quarter_means(&h.returns());
        assert!(last > first, "first {first} last {last}");
    }

    #[test]
    fn smoothed_returns_rise_on_most_seeds() {
        let mut ok = 0;
        for seed in 0..20 {
            let h = collect_history(&darkroom(100 + seed), 20_000, &mut Rng::new(seed));
            let r = h.returns();
            let avg = |s: &[f64]| s.iter().sum::<f64>() / 10.0;
            if avg(&r[r.len() - 10..]) >= avg(&r[..10]) {
                ok += 1;
            }
        }
        assert!(ok >= 18, "{ok}/20");
    }

    #[test]
    fn single_episode_budget_and_truncation() {
        let task = darkroom(1);
        let h = collect_history(&task, 20, &mut Rng::new(0));
        assert_eq!(h.episodes.len(), 1);
        assert!(h.episodes[0].steps().last().unwrap().done);
        let h = collect_history(&task, 45, &mut Rng::new(0));
        assert_eq!(h.episodes.iter().map(Trajectory::len).collect::<Vec<_>>(), [20, 20, 5]);
        assert!(!h.episodes[2].steps().last().unwrap().done);
    }

    #[test]
    fn collection_is_deterministic() {
        let task = darkroom(5);
        let a = collect_history(&task, 3000, &mut Rng::new(42));
        let b = collect_history(&task, 3000, &mut Rng::new(42));
        assert_eq!(a, b);
        let tasks = sample_tasks(EnvFamily::KeyToDoor, 4, &mut Rng::new(1));
        let rng = Rng::new(9);
        assert_eq!(collect_histories(&tasks, 1000, &rng), collect_histories(&tasks, 1000, &rng));
    }

    #[test]
    fn epsilon_schedule() {
        let q = QTable::new(&darkroom(0), QConfig::default());
        assert_eq!(q.states(), 162);
        assert_eq!(q.epsilon(0, 1000), 1.0);
        assert!((q.epsilon(250, 1000) - 0.525).abs() < 1e-12);
        assert!((q.epsilon(500, 1000) - 0.05).abs() < 1e-12);
        assert!((q.epsilon(999, 1000) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn recorded_states_precede_actions() {
        let task = darkroom(2);
        let ep = record_episode(&task, optimal_action);
        let mut env = Env::new(task.clone());
        for s in ep.steps() {
            assert_eq!(s.state, env.observe());
            env.step(s.action).unwrap();
        }
    }

    fn tmaze(side: Side) -> Task {
        Task::Tmaze(TmazeTask { horizon: 10, side })
    }

    #[test]
    fn tmaze_all_optimal() {
        let h = collect_tmaze_data(&tmaze(Side::Down), 30, 1.0, &mut Rng::new(0));
        assert_eq!(h.episodes.len(), 30);
        assert!(h.returns().iter().all(|&r| r == 1.0));
    }

    #[test]
    fn tmaze_random_turn_returns_half() {
        let mut total = 0.0;
        let n = 4000;
        for (i, side) in [Side::Up, Side::Down].into_iter().enumerate() {
            let h = collect_tmaze_data(&tmaze(side), n, 0.0, &mut Rng::new(i as u64));
            assert_eq!(h.episodes.len(), n);
            total += h.returns().iter().sum::<f64>();
        }
        let mean = total / (2 * n) as f64;
        // 4 standard errors of a Bernoulli(0.5) mean over 8000 draws
        assert!((mean - 0.5).abs() < 4.0 * (0.25f64 / 8000.0).sqrt(), "{mean}");
    }

    #[test]
    fn tmaze_mixture_is_shuffled() {
        let h = collect_tmaze_data(&tmaze(Side::Up), 200, 0.5, &mut Rng::new(4));
        let r = h.returns();
        assert!(r[..100].contains(&0.0), "optimal episodes should not all lead");
        let h2 = collect_tmaze_data(&tmaze(Side::Up), 200, 0.5, &mut Rng::new(4));
        assert_eq!(h, h2);
    }

    fn roundtrip_bytes(h: &[LearningHistory]) -> (Vec<u8>, Vec<LearningHistory>) {
        let mut buf = Vec::new();
        write_dataset_to(h, &mut buf).unwrap();
        let back = read_dataset_from(buf.as_slice()).unwrap();
        (buf, back)
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let tasks = sample_tasks(EnvFamily::Darkroom, 3, &mut Rng::new(2));
        let hs = collect_histories(&tasks, 200, &Rng::new(3));
        let (first, back) = roundtrip_bytes(&hs);
        assert_eq!(back, hs);
        let (second, _) = roundtrip_bytes(&back);
        assert_eq!(first, second);
    }

    #[test]
    fn awkward_floats_round_trip() {
        let mut rng = Rng::new(8);
        let steps: Vec<Step> = (0..50)
            .map(|i| Step {
                state: [i, -i],
                action: i as usize % NUM_ACTIONS,
                reward: rng.normal() * 10f64.powi(rng.below(40) as i32 - 20),
                done: i == 49,
            })
            .collect();
        let hs = vec![LearningHistory {
            task: darkroom(0),
            episodes: vec![Trajectory::new(steps)],
        }];
        let (_, back) = roundtrip_bytes(&hs);
        for (a, b) in back[0].episodes[0].steps().iter().zip(hs[0].episodes[0].steps()) {
            assert_eq!(a.reward.to_bits(), b.reward.to_bits());
        }
    }

    #[test]
    fn sixty_headers() {
        let tasks = sample_tasks(EnvFamily::Darkroom, 60, &mut Rng::new(0));
        let hs = collect_histories(&tasks, 40, &Rng::new(0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        write_dataset(&hs, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), 60);
        assert_eq!(back, hs);
    }

    #[test]
    fn truncated_file_reports_line() {
        let hs = collect_histories(&[darkroom(0)], 60, &Rng::new(0));
        let mut buf = Vec::new();
        write_dataset_to(&hs, &mut buf).unwrap();
        let cut = &buf[..buf.len() - 30];
        match read_dataset_from(cut) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let text = String::from_utf8(buf.clone()).unwrap();
        let three: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        match read_dataset_from(three.as_bytes()) {
            Err(DatasetError::Parse { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("1 episode"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let hs = collect_histories(&[darkroom(0)], 20, &Rng::new(0));
        let mut buf = Vec::new();
        write_dataset_to(&hs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("\"format_version\":1", "\"format_version\":7", 1);
        assert!(matches!(
            read_dataset_from(text.as_bytes()),
            Err(DatasetError::Version { line: 1, found: 7 })
        ));
    }

    #[test]
    fn garbage_is_a_parse_error() {
        assert!(matches!(
            read_dataset_from("{\"format_version\":1,".as_bytes()),
            Err(DatasetError::Parse { line: 1, .. })
        ));
    }
}
