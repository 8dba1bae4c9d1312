//! Sequence models over learning histories: the hybrid DM-H model and the
//! AD / DT baselines, plus checkpoint I/O.

pub mod baselines;
pub mod checkpoint;
pub mod dmh;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionError;
use crate::envs::{Obs, Task, NUM_ACTIONS};
use crate::tensor::{kernels, Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};
use crate::trajectory::{Step, Trajectory};

pub use baselines::{AdModel, BackboneKind, DtModel};
pub use dmh::{DmhConfig, DmhModel, SampleMode, SubGoal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dmh,
    AdTransformer,
    AdMamba,
    Dt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Dmh, ModelKind::AdTransformer, ModelKind::AdMamba, ModelKind::Dt];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dmh => "dmh",
            ModelKind::AdTransformer => "ad_transformer",
            ModelKind::AdMamba => "ad_mamba",
            ModelKind::Dt => "dt",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown model kind {0:?} (expected dmh, ad_transformer, ad_mamba or dt)")]
pub struct UnknownModel(pub String);

impl FromStr for ModelKind {
    type Err = UnknownModel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownModel(s.to_string()))
    }
}

/// How an agent turns action logits into an action.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSelection {
    /// Highest logit, first on ties.
    #[default]
    Greedy,
    /// A draw from the softmax of the logits.
    Sample,
}

impl fmt::Display for ActionSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Greedy => "greedy",
            Self::Sample => "sample",
        })
    }
}

/// Action selection state carried by an agent.
#[derive(Clone, Debug)]
pub struct Policy {
    pub selection: ActionSelection,
    rng: Rng,
}

impl Policy {
    pub fn greedy() -> Self {
        Self::new(ActionSelection::Greedy, Rng::new(0))
    }

    pub fn new(selection: ActionSelection, rng: Rng) -> Self {
        Self { selection, rng }
    }

    pub(crate) fn choose<T: Scalar>(&mut self, logits: &[T]) -> usize {
        match self.selection {
            ActionSelection::Greedy => argmax(logits),
            ActionSelection::Sample => {
                let l: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                let top = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = l.iter().map(|v| (v - top).exp()).collect();
                let mut u = self.rng.uniform() * w.iter().sum::<f64>();
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        return i;
                    }
                    u -= wi;
                }
                argmax(logits)
            }
        }
    }
}

/// Shape of the environment family a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub episode_len: usize,
    pub target_return: f64,
}

impl EnvSpec {
    pub fn of(task: &Task) -> Self {
        Self {
            state_dim: task.state_dim(),
            episode_len: task.episode_len(),
            target_return: task.family().target_return(),
        }
    }
}

/// One training example: a context of episodes from a single task, already
/// ordered; the last episode is the one whose actions are predicted.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub task: &'a Task,
    pub context: Vec<&'a Trajectory>,
}

/// An in-context policy interacting with one task across episodes.
/// Parameters are only ever read.
pub trait Agent {
    fn begin_episode(&mut self);
    /// Action for the current observation.
    fn act(&mut self, obs: Obs) -> usize;
    /// Outcome of the last action.
    fn record(&mut self, step: Step);
    fn end_episode(&mut self);
    /// Completed episodes, oldest first.
    fn history(&self) -> &[Trajectory];
}

/// Runs `episodes` consecutive episodes of `task`, returning each return.
pub fn rollout(agent: &mut dyn Agent, task: &Task, episodes: usize) -> Vec<f64> {
    let mut env = crate::envs::Env::new(task.clone());
    (0..episodes)
        .map(|_| {
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
            total
        })
        .collect()
}

pub(crate) fn features<T: Scalar>(task: &Task, obs: Obs) -> Vec<T> {
    task.features(obs).into_iter().map(|v| T::from_f64_lossy(v as f64)).collect()
}

pub(crate) fn one_hot<T: Scalar>(a: usize) -> Vec<T> {
    let mut v = vec![T::zero(); NUM_ACTIONS];
    v[a] = T::one();
    v
}

pub(crate) fn scalar<T: Scalar>(v: f64) -> Vec<T> {
    vec![T::from_f64_lossy(v)]
}

/// Row matrix from equal-width rows.
pub(crate) fn rows<'g, T: Scalar>(g: &'g Graph<T>, rows: Vec<Vec<T>>, width: usize) -> Var<'g, T> {
    let n = rows.len();
    let data: Vec<T> = rows.into_iter().flatten().collect();
    assert_eq!(data.len(), n * width, "ragged rows");
    g.constant(Tensor::from_vec(&[n, width], data))
}

/// Index of the largest value; the first one on ties.
pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Layer norm followed by a linear map.
#[derive(Clone, Debug)]
pub(crate) struct Head {
    ln_gain: ParamId,
    ln_bias: ParamId,
    w: ParamId,
    b: ParamId,
}

impl Head {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, out: usize, rng: &mut Rng) -> Self {
        Self {
            ln_gain: store.add_const(format!("{prefix}.ln.gain"), &[d], 1.0),
            ln_bias: store.add_const(format!("{prefix}.ln.bias"), &[d], 0.0),
            w: store.add_normal(format!("{prefix}.w"), &[d, out], (d as f64).powf(-0.5), rng),
            b: store.add_const(format!("{prefix}.b"), &[out], 0.0),
        }
    }

    pub(crate) fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let p = |id| g.param(store, id);
        x.layer_norm(p(self.ln_gain), p(self.ln_bias)).matmul(p(self.w)).add_row(p(self.b))
    }

    pub(crate) fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = |id| store.get(id).data();
        let (h, _) = kernels::layer_norm_forward(x, w(self.ln_gain), w(self.ln_bias), x.len(), kernels::LN_EPS);
        let mut out = w(self.b).to_vec();
        T::gemm(1, x.len(), out.len(), &h, false, w(self.w), false, &mut out, true);
        out
    }
}

/// Any of the four model families, sharing one parameter store layout.
#[derive(Clone, Debug)]
pub enum Model {
    Dmh(DmhModel),
    Ad(AdModel),
    Dt(DtModel),
}

impl Model {
    pub fn new<T: Scalar>(kind: ModelKind, cfg: &DmhConfig, env: EnvSpec, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        match kind {
            ModelKind::Dmh => Model::Dmh(DmhModel::new(cfg, env, store, rng)),
            ModelKind::AdTransformer => Model::Ad(AdModel::new(cfg, env, BackboneKind::Transformer, store, rng)),
            ModelKind::AdMamba => Model::Ad(AdModel::new(cfg, env, BackboneKind::Mamba, store, rng)),
            ModelKind::Dt => Model::Dt(DtModel::new(cfg, env, store, rng)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Dmh(_) => ModelKind::Dmh,
            Model::Ad(m) if m.is_transformer() => ModelKind::AdTransformer,
            Model::Ad(_) => ModelKind::AdMamba,
            Model::Dt(_) => ModelKind::Dt,
        }
    }

    /// Mean action cross-entropy over `batch`. With `rng`, dropout (on a
    /// training graph) and sub-goal sampling are active.
    pub fn loss<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        batch: &[Sample<'_>],
        rng: Option<&mut Rng>,
    ) -> Result<Var<'g, T>, AttentionError> {
        match self {
            Model::Dmh(m) => m.compute_loss(g, store, batch, rng),
            Model::Ad(m) => m.compute_loss(g, store, batch, rng),
            Model::Dt(m) => m.compute_loss(g, store, batch, rng),
        }
    }

    /// A fresh greedy in-context agent for `task`.
    pub fn agent<'a, T: Scalar>(&'a self, store: &'a ParamStore<T>, task: &Task) -> Box<dyn Agent + 'a> {
        self.agent_with(store, task, Policy::greedy())
    }

    pub fn agent_with<'a, T: Scalar>(
        &'a self,
        store: &'a ParamStore<T>,
        task: &Task,
        policy: Policy,
    ) -> Box<dyn Agent + 'a> {
        match self {
            Model::Dmh(m) => Box::new(m.agent(store, task).with_policy(policy)),
            Model::Ad(m) => Box::new(m.agent(store, task).with_policy(policy)),
            Model::Dt(m) => Box::new(m.agent(store, task).with_policy(policy)),
        }
    }
}
