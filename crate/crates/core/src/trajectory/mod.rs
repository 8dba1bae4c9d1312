//! Episode records and the two tokenized views built from them: the
//! block-aggregated long sequence read by the SSM and the prompted local
//! segments read by the transformer.

use serde::{Deserialize, Serialize};

use crate::envs::Obs;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("no sub-goal candidate after step {anchor} of a {len}-step episode")]
    NoCandidate { anchor: usize, len: usize },
    #[error("invalid episode record: {0}")]
    InvalidRecord(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: Obs,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

/// One episode. `total_return` is the in-order sum of step rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EpisodeRecord", into = "EpisodeRecord")]
pub struct Trajectory {
    steps: Vec<Step>,
    total_return: f64,
}

impl Trajectory {
    /// # Panics
    /// If `done` is set anywhere but the last step.
    pub fn new(steps: Vec<Step>) -> Self {
        let n = steps.len();
        assert!(
            steps.iter().enumerate().all(|(i, s)| !s.done || i + 1 == n),
            "done may only be set on the final step"
        );
        let total_return = steps.iter().map(|s| s.reward).sum();
        Self { steps, total_return }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.total_return
    }
}

/// Column-oriented episode record used in dataset files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub states: Vec<[i32; 2]>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<u8>,
}

impl From<Trajectory> for EpisodeRecord {
    fn from(t: Trajectory) -> Self {
        Self {
            states: t.steps.iter().map(|s| s.state).collect(),
            actions: t.steps.iter().map(|s| s.action).collect(),
            rewards: t.steps.iter().map(|s| s.reward).collect(),
            dones: t.steps.iter().map(|s| s.done as u8).collect(),
        }
    }
}

impl TryFrom<EpisodeRecord> for Trajectory {
    type Error = DataError;

    fn try_from(r: EpisodeRecord) -> Result<Self, DataError> {
        let n = r.states.len();
        if r.actions.len() != n || r.rewards.len() != n || r.dones.len() != n {
            return Err(DataError::InvalidRecord(format!(
                "column lengths differ: states {n}, actions {}, rewards {}, dones {}",
                r.actions.len(),
                r.rewards.len(),
                r.dones.len()
            )));
        }
        if let Some(i) = r.dones.iter().position(|&d| d > 1) {
            return Err(DataError::InvalidRecord(format!("done flag at step {i} is not 0/1")));
        }
        if let Some(i) = r.dones.iter().position(|&d| d == 1) {
            if i + 1 != n {
                return Err(DataError::InvalidRecord(format!("done flag set at step {i} of {n}")));
            }
        }
        let steps = (0..n)
            .map(|i| Step {
                state: r.states[i],
                action: r.actions[i],
                reward: r.rewards[i],
                done: r.dones[i] == 1,
            })
            .collect();
        Ok(Trajectory::new(steps))
    }
}

/// Orders a context by nondecreasing return; equal returns keep their
/// sampling order.
///
/// # Panics
/// On an empty context.
pub fn sort_context(mut trajs: Vec<&Trajectory>) -> Vec<&Trajectory> {
    assert!(!trajs.is_empty(), "a context needs at least one trajectory");
    trajs.sort_by(|a, b| a.total_return.total_cmp(&b.total_return));
    trajs
}

/// One `(state, aggregated reward, done)` triple of the long view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    /// Position of the owning trajectory within the context.
    pub traj: usize,
    /// Within-episode step of the block's first state (`k·c`).
    pub step: usize,
    pub state: Obs,
    /// Sum of the block's rewards.
    pub reward: f64,
    /// Set when the block contains the episode's final step.
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaSequence {
    pub c: usize,
    pub blocks: Vec<Block>,
    /// Index into `blocks` of each trajectory's first block.
    pub boundaries: Vec<usize>,
}

impl MambaSequence {
    pub fn token_count(&self) -> usize {
        3 * self.blocks.len()
    }

    /// Blocks belonging to trajectory `i` of the context.
    pub fn trajectory_blocks(&self, i: usize) -> &[Block] {
        let end = self.boundaries.get(i + 1).copied().unwrap_or(self.blocks.len());
        &self.blocks[self.boundaries[i]..end]
    }
}

/// Blocks of one trajectory, appended to `out`.
pub fn push_blocks(traj: &Trajectory, traj_index: usize, c: usize, out: &mut Vec<Block>) {
    assert!(c >= 1, "block length must be positive");
    let steps = traj.steps();
    for start in (0..steps.len()).step_by(c) {
        let chunk = &steps[start..(start + c).min(steps.len())];
        out.push(Block {
            traj: traj_index,
            step: start,
            state: chunk[0].state,
            reward: chunk.iter().map(|s| s.reward).sum(),
            done: chunk.iter().any(|s| s.done),
        });
    }
}

/// Long view of an (already sorted) context.
pub fn build_mamba_sequence(context: &[&Trajectory], c: usize) -> MambaSequence {
    assert!(c >= 1, "block length must be positive");
    let mut blocks = Vec::new();
    let mut boundaries = Vec::with_capacity(context.len());
    for (i, t) in context.iter().enumerate() {
        boundaries.push(blocks.len());
        push_blocks(t, i, c, &mut blocks);
    }
    MambaSequence { c, blocks, boundaries }
}

/// Closed-form token count of the long view: `3 · Σ ⌈T_i / c⌉`.
pub fn mamba_token_count(lengths: &[usize], c: usize) -> usize {
    3 * lengths.iter().map(|&t| t.div_ceil(c)).sum::<usize>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubGoalSelection {
    pub anchor: usize,
    pub index: usize,
    pub score: f64,
}

/// The future step `j > i` maximizing `(Σ_{t=i+1}^{j} r_t) / (j − i)`,
/// nearest on ties.
pub fn select_valuable_subgoal(traj: &Trajectory, i: usize) -> Result<SubGoalSelection, DataError> {
    let steps = traj.steps();
    if i + 1 >= steps.len() {
        return Err(DataError::NoCandidate { anchor: i, len: steps.len() });
    }
    let mut best = SubGoalSelection {
        anchor: i,
        index: i + 1,
        score: f64::NEG_INFINITY,
    };
    let mut acc = 0.0;
    for (j, s) in steps.iter().enumerate().skip(i + 1) {
        acc += s.reward;
        let score = acc / (j - i) as f64;
        if score > best.score {
            best.index = j;
            best.score = score;
        }
    }
    Ok(best)
}

/// Prompt placed before every step of a local segment.
#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    /// A generated sub-goal vector.
    SubGoal(Vec<f32>),
    /// A valuable sub-goal state, mapped by the frozen goal map downstream.
    Goal(Obs),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Token {
    Prompt,
    State(Obs),
    Action(usize),
    Reward(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalSegment<'a> {
    pub anchor: usize,
    pub prompt: Prompt,
    pub steps: &'a [Step],
}

impl LocalSegment<'_> {
    /// `[p, s, a, r]` per step.
    pub fn tokens(&self) -> Vec<Token> {
        self.steps
            .iter()
            .flat_map(|s| [Token::Prompt, Token::State(s.state), Token::Action(s.action), Token::Reward(s.reward)])
            .collect()
    }

    pub fn token_count(&self) -> usize {
        4 * self.steps.len()
    }
}

/// Up to `c` steps of `traj` starting at anchor `j`.
///
/// # Panics
/// If `j` is past the end or not a multiple of `c`.
pub fn build_local_segment(traj: &Trajectory, j: usize, c: usize, prompt: Prompt) -> LocalSegment<'_> {
    assert!(j < traj.len(), "segment anchor {j} outside a {}-step episode", traj.len());
    assert!(c >= 1 && j.is_multiple_of(c), "segment anchor {j} is not a multiple of {c}");
    LocalSegment {
        anchor: j,
        prompt,
        steps: &traj.steps()[j..(j + c).min(traj.len())],
    }
}
