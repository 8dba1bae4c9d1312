//! Comparison models. AD reads the sorted across-episode context as
//! per-step `(s, a, r, d)` tokens with either backbone; DT reads a single
//! episode as `(R, s, a)` tokens conditioned on a target return.

use super::{features, one_hot, rows, scalar, Agent, DmhConfig, EnvSpec, Head, Policy, Sample};
use crate::attention::{AttentionError, KvCache, Modality, TokenEmbedder, Transformer};
use crate::envs::{Obs, Task, NUM_ACTIONS};
use crate::ssm::{MambaStack, MambaState};
use crate::tensor::{Graph, ParamStore, Rng, Scalar, Var};
use crate::trajectory::{sort_context, Step, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Transformer,
    Mamba,
}

#[derive(Clone, Debug)]
enum Backbone {
    Transformer(Transformer),
    Mamba(MambaStack),
}

/// Per-step tokens in model order, with the row of each step's state token.
struct StepTokens<'g, T: Scalar> {
    x: Var<'g, T>,
    segs: Vec<usize>,
    state_rows: Vec<usize>,
    targets: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct AdModel {
    pub cfg: DmhConfig,
    pub env: EnvSpec,
    embed: TokenEmbedder,
    backbone: Backbone,
    head: Head,
}

impl AdModel {
    pub fn new<T: Scalar>(
        cfg: &DmhConfig,
        env: EnvSpec,
        kind: BackboneKind,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Self {
        cfg.validate().unwrap_or_else(|e| panic!("invalid model config: {e}"));
        let d = cfg.embed_dim;
        let embed = TokenEmbedder::new(
            store,
            "ad.embed",
            d,
            &[
                (Modality::State, env.state_dim),
                (Modality::Action, NUM_ACTIONS),
                (Modality::Reward, 1),
                (Modality::Done, 1),
            ],
            env.episode_len,
            rng,
        );
        let backbone = match kind {
            BackboneKind::Transformer => Backbone::Transformer(Transformer::new(&cfg.attention(0), store, "ad.tf", rng)),
            BackboneKind::Mamba => Backbone::Mamba(MambaStack::new(&cfg.ssm(), store, "ad.mamba", rng)),
        };
        let head = Head::new(store, "ad.action", d, NUM_ACTIONS, rng);
        Self {
            cfg: cfg.clone(),
            env,
            embed,
            backbone,
            head,
        }
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self.backbone, Backbone::Transformer(_))
    }

    /// Tokens in a context of episodes with the given lengths.
    pub fn context_tokens(lengths: &[usize]) -> usize {
        4 * lengths.iter().sum::<usize>()
    }

    fn tokens<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, batch: &[Sample<'_>]) -> StepTokens<'g, T> {
        let (mut s, mut a, mut r, mut dn, mut ts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut segs = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for smp in batch {
            let mut len = 0;
            for traj in &smp.context {
                for (t, st) in traj.steps().iter().enumerate() {
                    s.push(features(smp.task, st.state));
                    a.push(one_hot(st.action));
                    r.push(scalar(st.reward));
                    dn.push(scalar(st.done as u8 as f64));
                    ts.push(t);
                    targets.push(Some(st.action));
                }
                len += 4 * traj.len();
            }
            segs.push(len);
        }
        let m = ts.len();
        let e = &self.embed;
        let s = e.embed(g, store, Modality::State, rows(g, s, self.env.state_dim), &ts);
        let a = e.embed(g, store, Modality::Action, rows(g, a, NUM_ACTIONS), &ts);
        let r = e.embed(g, store, Modality::Reward, rows(g, r, 1), &ts);
        let dn = e.embed(g, store, Modality::Done, rows(g, dn, 1), &ts);
        let perm: Vec<usize> = (0..m).flat_map(|q| [q, m + q, 2 * m + q, 3 * m + q]).collect();
        StepTokens {
            x: g.concat_rows(&[s, a, r, dn]).gather_rows(&perm),
            segs,
            state_rows: (0..m).map(|q| 4 * q).collect(),
            targets,
        }
    }

    /// Mean cross-entropy over every step of every context episode.
    pub fn compute_loss<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        batch: &[Sample<'_>],
        rng: Option<&mut Rng>,
    ) -> Result<Var<'g, T>, AttentionError> {
        assert!(!batch.is_empty(), "empty batch");
        let tok = self.tokens(g, store, batch);
        let y = match &self.backbone {
            Backbone::Transformer(tf) => tf.forward(g, store, tok.x, &tok.segs, rng)?,
            Backbone::Mamba(m) => m.forward(g, store, tok.x, &tok.segs),
        };
        let logits = self.head.forward(g, store, y.gather_rows(&tok.state_rows));
        Ok(logits.cross_entropy(&tok.targets))
    }

    pub fn agent<'a, T: Scalar>(&'a self, store: &'a ParamStore<T>, task: &Task) -> AdAgent<'a, T> {
        let (cache, state) = match &self.backbone {
            Backbone::Transformer(tf) => (tf.init_cache(), None),
            Backbone::Mamba(m) => (KvCache::default(), Some(m.init_state())),
        };
        AdAgent {
            model: self,
            store,
            task: task.clone(),
            history: Vec::new(),
            current: Vec::new(),
            cache,
            state,
            tokens: 0,
            policy: Policy::greedy(),
        }
    }
}

/// Online AD policy: at each episode start the backbone state is rebuilt
/// from the most recent `n − 1` episodes (sorted by return), then extended
/// token by token.
pub struct AdAgent<'a, T: Scalar = f32> {
    model: &'a AdModel,
    store: &'a ParamStore<T>,
    task: Task,
    history: Vec<Trajectory>,
    current: Vec<Step>,
    cache: KvCache<T>,
    state: Option<MambaState<T>>,
    tokens: usize,
    policy: Policy,
}

impl<'a, T: Scalar> AdAgent<'a, T> {
    pub fn with_policy(self, policy: Policy) -> Self {
        Self { policy, ..self }
    }
}

impl<T: Scalar> AdAgent<'_, T> {
    fn push(&mut self, m: Modality, raw: &[T], t: usize) -> Vec<T> {
        let tok = self.model.embed.embed_one(self.store, m, raw, t);
        self.tokens += 1;
        match &self.model.backbone {
            Backbone::Transformer(tf) => tf.step(self.store, &mut self.cache, &tok).expect("unbounded context"),
            Backbone::Mamba(mb) => mb.step(self.store, self.state.as_mut().expect("mamba state"), &tok),
        }
    }

    fn push_tail(&mut self, st: Step, t: usize) {
        self.push(Modality::Action, &one_hot(st.action), t);
        self.push(Modality::Reward, &scalar(st.reward), t);
        self.push(Modality::Done, &scalar(st.done as u8 as f64), t);
    }

    /// Tokens consumed since the episode started, replayed context included.
    pub fn context_tokens(&self) -> usize {
        self.tokens
    }
}

impl<T: Scalar> Agent for AdAgent<'_, T> {
    fn begin_episode(&mut self) {
        self.current.clear();
        self.tokens = 0;
        match &self.model.backbone {
            Backbone::Transformer(_) => self.cache.clear(),
            Backbone::Mamba(m) => self.state = Some(m.init_state()),
        }
        let keep = self.model.cfg.n - 1;
        let from = self.history.len().saturating_sub(keep);
        if from < self.history.len() {
            let history = std::mem::take(&mut self.history);
            for traj in sort_context(history[from..].iter().collect()) {
                for (t, &st) in traj.steps().iter().enumerate() {
                    self.push(Modality::State, &features(&self.task, st.state), t);
                    self.push_tail(st, t);
                }
            }
            self.history = history;
        }
    }

    fn act(&mut self, obs: Obs) -> usize {
        let t = self.current.len();
        if t > 0 {
            self.push_tail(self.current[t - 1], t - 1);
        }
        let out = self.push(Modality::State, &features(&self.task, obs), t);
        self.policy.choose(&self.model.head.apply(self.store, &out))
    }

    fn record(&mut self, step: Step) {
        self.current.push(step);
    }

    fn end_episode(&mut self) {
        let steps = std::mem::take(&mut self.current);
        self.history.push(Trajectory::new(steps));
    }

    fn history(&self) -> &[Trajectory] {
        &self.history
    }
}

#[derive(Clone, Debug)]
pub struct DtModel {
    pub cfg: DmhConfig,
    pub env: EnvSpec,
    embed: TokenEmbedder,
    transformer: Transformer,
    head: Head,
}

impl DtModel {
    pub fn new<T: Scalar>(cfg: &DmhConfig, env: EnvSpec, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        cfg.validate().unwrap_or_else(|e| panic!("invalid model config: {e}"));
        assert!(env.target_return > 0.0, "DT needs a positive target return");
        let d = cfg.embed_dim;
        let embed = TokenEmbedder::new(
            store,
            "dt.embed",
            d,
            &[
                (Modality::ReturnToGo, 1),
                (Modality::State, env.state_dim),
                (Modality::Action, NUM_ACTIONS),
            ],
            env.episode_len,
            rng,
        );
        let transformer = Transformer::new(&cfg.attention(0), store, "dt.tf", rng);
        let head = Head::new(store, "dt.action", d, NUM_ACTIONS, rng);
        Self {
            cfg: cfg.clone(),
            env,
            embed,
            transformer,
            head,
        }
    }

    /// Return-to-go in units of the target return.
    fn rtg(&self, remaining: f64) -> f64 {
        remaining / self.env.target_return
    }

    /// Mean cross-entropy with every context episode as its own sequence,
    /// conditioned on its realised returns-to-go.
    pub fn compute_loss<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        batch: &[Sample<'_>],
        rng: Option<&mut Rng>,
    ) -> Result<Var<'g, T>, AttentionError> {
        assert!(!batch.is_empty(), "empty batch");
        let (mut rt, mut s, mut a, mut ts, mut targets, mut segs) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for smp in batch {
            for traj in &smp.context {
                let mut remaining = traj.total_return();
                for (t, st) in traj.steps().iter().enumerate() {
                    rt.push(scalar(self.rtg(remaining)));
                    remaining -= st.reward;
                    s.push(features(smp.task, st.state));
                    a.push(one_hot(st.action));
                    ts.push(t);
                    targets.push(Some(st.action));
                }
                segs.push(3 * traj.len());
            }
        }
        let m = ts.len();
        let e = &self.embed;
        let rt = e.embed(g, store, Modality::ReturnToGo, rows(g, rt, 1), &ts);
        let s = e.embed(g, store, Modality::State, rows(g, s, self.env.state_dim), &ts);
        let a = e.embed(g, store, Modality::Action, rows(g, a, NUM_ACTIONS), &ts);
        let perm: Vec<usize> = (0..m).flat_map(|q| [q, m + q, 2 * m + q]).collect();
        let x = g.concat_rows(&[rt, s, a]).gather_rows(&perm);
        let y = self.transformer.forward(g, store, x, &segs, rng)?;
        let states: Vec<usize> = (0..m).map(|q| 3 * q + 1).collect();
        Ok(self.head.forward(g, store, y.gather_rows(&states)).cross_entropy(&targets))
    }

    pub fn agent<'a, T: Scalar>(&'a self, store: &'a ParamStore<T>, task: &Task) -> DtAgent<'a, T> {
        DtAgent {
            model: self,
            store,
            task: task.clone(),
            history: Vec::new(),
            current: Vec::new(),
            cache: self.transformer.init_cache(),
            remaining: self.env.target_return,
            policy: Policy::greedy(),
        }
    }
}

/// Online DT policy; the context is the current episode only, starting
/// from the family's target return.
pub struct DtAgent<'a, T: Scalar = f32> {
    model: &'a DtModel,
    store: &'a ParamStore<T>,
    task: Task,
    history: Vec<Trajectory>,
    current: Vec<Step>,
    cache: KvCache<T>,
    remaining: f64,
    policy: Policy,
}

impl<'a, T: Scalar> DtAgent<'a, T> {
    pub fn with_policy(self, policy: Policy) -> Self {
        Self { policy, ..self }
    }
}

impl<T: Scalar> DtAgent<'_, T> {
    fn push(&mut self, m: Modality, raw: &[T], t: usize) -> Vec<T> {
        let tok = self.model.embed.embed_one(self.store, m, raw, t);
        self.model.transformer.step(self.store, &mut self.cache, &tok).expect("unbounded context")
    }

    /// Return still to be collected according to the conditioning target.
    pub fn return_to_go(&self) -> f64 {
        self.remaining
    }
}

impl<T: Scalar> Agent for DtAgent<'_, T> {
    fn begin_episode(&mut self) {
        self.current.clear();
        self.cache.clear();
        self.remaining = self.model.env.target_return;
    }

    fn act(&mut self, obs: Obs) -> usize {
        let t = self.current.len();
        if t > 0 {
            let prev = self.current[t - 1];
            self.push(Modality::Action, &one_hot(prev.action), t - 1);
        }
        let rtg = self.model.rtg(self.remaining);
        self.push(Modality::ReturnToGo, &scalar(rtg), t);
        let out = self.push(Modality::State, &features(&self.task, obs), t);
        self.policy.choose(&self.model.head.apply(self.store, &out))
    }

    fn record(&mut self, step: Step) {
        self.remaining -= step.reward;
        self.current.push(step);
    }

    fn end_episode(&mut self) {
        let steps = std::mem::take(&mut self.current);
        self.history.push(Trajectory::new(steps));
    }

    fn history(&self) -> &[Trajectory] {
        &self.history
    }
}
