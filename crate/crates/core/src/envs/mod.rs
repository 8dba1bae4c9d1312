//! Grid-world rooms (Darkroom, Darkroom Hard, Dark Key-to-Door and their
//! 40×40 variants) and the Tmaze recall task.
//!
//! All environments share five discrete actions and a two-integer
//! observation: `(x, y)` for grids, `(cell, signal)` for Tmaze.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::Rng;

pub const NUM_ACTIONS: usize = 5;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const UP: usize = 2;
pub const DOWN: usize = 3;
pub const STAY: usize = 4;

/// Raw observation.
pub type Obs = [i32; 2];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvError {
    #[error("step called after the episode finished")]
    EpisodeDone,
    #[error("action {0} out of range (expected < {NUM_ACTIONS})")]
    BadAction(usize),
    #[error("unknown environment family {0:?}")]
    UnknownFamily(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvFamily {
    Darkroom,
    DarkroomHard,
    KeyToDoor,
    LargeDarkroom,
    LargeDarkroomHard,
    LargeKeyToDoor,
    Tmaze { horizon: usize },
}

impl EnvFamily {
    pub fn is_large(self) -> bool {
        matches!(self, Self::LargeDarkroom | Self::LargeDarkroomHard | Self::LargeKeyToDoor)
    }

    pub fn grid_kind(self) -> Option<GridKind> {
        match self {
            Self::Darkroom | Self::LargeDarkroom => Some(GridKind::Darkroom),
            Self::DarkroomHard | Self::LargeDarkroomHard => Some(GridKind::DarkroomHard),
            Self::KeyToDoor | Self::LargeKeyToDoor => Some(GridKind::KeyToDoor),
            Self::Tmaze { .. } => None,
        }
    }

    /// Room side length.
    pub fn size(self) -> usize {
        if self.is_large() {
            40
        } else {
            9
        }
    }

    pub fn episode_len(self) -> usize {
        match self {
            Self::Darkroom | Self::DarkroomHard => 20,
            Self::KeyToDoor => 50,
            Self::LargeDarkroom | Self::LargeDarkroomHard => 200,
            Self::LargeKeyToDoor => 500,
            Self::Tmaze { horizon } => horizon,
        }
    }

    /// Width of the model-facing state features.
    pub fn state_dim(self) -> usize {
        match self {
            Self::Tmaze { .. } => 2,
            _ => 2 * self.size(),
        }
    }

    /// Target return for return-conditioned baselines.
    pub fn target_return(self) -> f64 {
        match self {
            Self::Darkroom => 20.0,
            Self::LargeDarkroom => 15.0,
            Self::DarkroomHard | Self::LargeDarkroomHard | Self::Tmaze { .. } => 1.0,
            Self::KeyToDoor | Self::LargeKeyToDoor => 2.0,
        }
    }
}

impl fmt::Display for EnvFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Darkroom => f.write_str("darkroom"),
            Self::DarkroomHard => f.write_str("darkroom_hard"),
            Self::KeyToDoor => f.write_str("key_to_door"),
            Self::LargeDarkroom => f.write_str("large_darkroom"),
            Self::LargeDarkroomHard => f.write_str("large_darkroom_hard"),
            Self::LargeKeyToDoor => f.write_str("large_key_to_door"),
            Self::Tmaze { horizon } => write!(f, "tmaze-{horizon}"),
        }
    }
}

impl FromStr for EnvFamily {
    type Err = EnvError;

    /// Accepts the [`Display`](fmt::Display) names; Tmaze is `tmaze-<horizon>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || EnvError::UnknownFamily(s.to_string());
        Ok(match s {
            "darkroom" => Self::Darkroom,
            "darkroom_hard" => Self::DarkroomHard,
            "key_to_door" => Self::KeyToDoor,
            "large_darkroom" => Self::LargeDarkroom,
            "large_darkroom_hard" => Self::LargeDarkroomHard,
            "large_key_to_door" => Self::LargeKeyToDoor,
            _ => {
                let h = s.strip_prefix("tmaze-").ok_or_else(unknown)?;
                let horizon: usize = h.parse().map_err(|_| unknown())?;
                if horizon < 3 {
                    return Err(unknown());
                }
                Self::Tmaze { horizon }
            }
        })
    }
}

impl Serialize for EnvFamily {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EnvFamily {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Reward on every step spent on the goal.
    Darkroom,
    /// Reward only on the first arrival at the goal.
    DarkroomHard,
    /// One-time reward at the key, then one-time reward at the door.
    KeyToDoor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTask {
    pub kind: GridKind,
    pub size: usize,
    /// Goal cell, or the key cell for Key-to-Door.
    pub goal: [i32; 2],
    pub door: Option<[i32; 2]>,
    pub episode_len: usize,
    pub large: bool,
}

/// Which way to turn at the junction: [`UP`] or [`DOWN`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Up,
    Down,
}

impl Side {
    pub fn action(self) -> usize {
        match self {
            Side::Up => UP,
            Side::Down => DOWN,
        }
    }

    pub fn signal(self) -> i32 {
        match self {
            Side::Up => 1,
            Side::Down => -1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TmazeTask {
    pub horizon: usize,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    Grid(GridTask),
    Tmaze(TmazeTask),
}

impl Task {
    pub fn family(&self) -> EnvFamily {
        match self {
            Task::Grid(g) => match (g.kind, g.large) {
                (GridKind::Darkroom, false) => EnvFamily::Darkroom,
                (GridKind::DarkroomHard, false) => EnvFamily::DarkroomHard,
                (GridKind::KeyToDoor, false) => EnvFamily::KeyToDoor,
                (GridKind::Darkroom, true) => EnvFamily::LargeDarkroom,
                (GridKind::DarkroomHard, true) => EnvFamily::LargeDarkroomHard,
                (GridKind::KeyToDoor, true) => EnvFamily::LargeKeyToDoor,
            },
            Task::Tmaze(t) => EnvFamily::Tmaze { horizon: t.horizon },
        }
    }

    pub fn episode_len(&self) -> usize {
        match self {
            Task::Grid(g) => g.episode_len,
            Task::Tmaze(t) => t.horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.family().state_dim()
    }

    /// Model-facing features: one-hot `x` ⊕ one-hot `y` for grids,
    /// `[cell / (H−1), signal]` for Tmaze.
    pub fn features(&self, obs: Obs) -> Vec<f32> {
        match self {
            Task::Grid(g) => {
                let mut f = vec![0.0; 2 * g.size];
                f[obs[0] as usize] = 1.0;
                f[g.size + obs[1] as usize] = 1.0;
                f
            }
            Task::Tmaze(t) => vec![obs[0] as f32 / (t.horizon - 1) as f32, obs[1] as f32],
        }
    }

    /// Number of distinct tabular states seen by [`Env::q_index`].
    pub fn q_states(&self) -> usize {
        match self {
            Task::Grid(g) => g.size * g.size * 2,
            Task::Tmaze(t) => t.horizon * 3,
        }
    }
}

/// Draws a task of `family`: goal (or distinct key and door) cells uniform
/// over the room; Tmaze side uniform.
pub fn sample_task(family: EnvFamily, rng: &mut Rng) -> Task {
    let Some(kind) = family.grid_kind() else {
        let EnvFamily::Tmaze { horizon } = family else { unreachable!() };
        let side = if rng.bernoulli(0.5) { Side::Up } else { Side::Down };
        return Task::Tmaze(TmazeTask { horizon, side });
    };
    let size = family.size();
    let cell = |rng: &mut Rng| [rng.below(size) as i32, rng.below(size) as i32];
    let goal = cell(rng);
    let door = (kind == GridKind::KeyToDoor).then(|| loop {
        let d = cell(rng);
        if d != goal {
            break d;
        }
    });
    Task::Grid(GridTask {
        kind,
        size,
        goal,
        door,
        episode_len: family.episode_len(),
        large: family.is_large(),
    })
}

/// Distinct tasks of `family`, in draw order.
pub fn sample_tasks(family: EnvFamily, count: usize, rng: &mut Rng) -> Vec<Task> {
    let mut out: Vec<Task> = Vec::with_capacity(count);
    let distinct = match family {
        EnvFamily::Tmaze { .. } => 2,
        f if f.grid_kind() == Some(GridKind::KeyToDoor) => usize::MAX,
        f => f.size() * f.size(),
    };
    while out.len() < count {
        let t = sample_task(family, rng);
        if out.len() >= distinct || !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Obs,
    pub reward: f64,
    pub done: bool,
}

/// One running episode of a task.
#[derive(Clone, Debug)]
pub struct Env {
    task: Task,
    pos: [i32; 2],
    t: usize,
    /// Darkroom Hard: goal reached; Key-to-Door: key held.
    flag: bool,
    door_opened: bool,
}

impl Env {
    pub fn new(task: Task) -> Self {
        let mut env = Self {
            task,
            pos: [0, 0],
            t: 0,
            flag: false,
            door_opened: false,
        };
        env.reset();
        env
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    /// Starts a new episode at the room centre (grid) or cell 0 (Tmaze).
    pub fn reset(&mut self) -> Obs {
        self.pos = match &self.task {
            Task::Grid(g) => [(g.size / 2) as i32, (g.size / 2) as i32],
            Task::Tmaze(_) => [0, 0],
        };
        self.t = 0;
        self.flag = false;
        self.door_opened = false;
        self.observe()
    }

    pub fn observe(&self) -> Obs {
        match &self.task {
            Task::Grid(_) => self.pos,
            Task::Tmaze(t) => [self.pos[0], if self.pos[0] == 0 { t.side.signal() } else { 0 }],
        }
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.task.episode_len()
    }

    /// Tabular index of the full (privileged) state: position plus progress
    /// flag for grids, `(cell, signal)` for Tmaze.
    pub fn q_index(&self) -> usize {
        match &self.task {
            Task::Grid(g) => {
                let s = g.size;
                ((self.flag as usize) * s + self.pos[1] as usize) * s + self.pos[0] as usize
            }
            Task::Tmaze(_) => self.pos[0] as usize * 3 + (self.observe()[1] + 1) as usize,
        }
    }

    pub fn step(&mut self, action: usize) -> Result<Transition, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeDone);
        }
        if action >= NUM_ACTIONS {
            return Err(EnvError::BadAction(action));
        }
        let reward = match &self.task {
            Task::Grid(g) => {
                let max = g.size as i32 - 1;
                let [x, y] = self.pos;
                self.pos = match action {
                    LEFT => [(x - 1).max(0), y],
                    RIGHT => [(x + 1).min(max), y],
                    UP => [x, (y + 1).min(max)],
                    DOWN => [x, (y - 1).max(0)],
                    _ => [x, y],
                };
                match g.kind {
                    GridKind::Darkroom => (self.pos == g.goal) as u8 as f64,
                    GridKind::DarkroomHard => {
                        if self.pos == g.goal && !self.flag {
                            self.flag = true;
                            1.0
                        } else {
                            0.0
                        }
                    }
                    GridKind::KeyToDoor => {
                        if self.pos == g.goal && !self.flag {
                            self.flag = true;
                            1.0
                        } else if Some(self.pos) == g.door && self.flag && !self.door_opened {
                            self.door_opened = true;
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            }
            Task::Tmaze(tm) => {
                let junction = tm.horizon as i32 - 1;
                let cell = self.pos[0];
                let last = self.t + 1 == tm.horizon;
                match action {
                    LEFT => self.pos[0] = (cell - 1).max(0),
                    RIGHT => self.pos[0] = (cell + 1).min(junction),
                    _ => {}
                }
                (last && cell == junction && action == tm.side.action()) as u8 as f64
            }
        };
        self.t += 1;
        Ok(Transition {
            obs: self.observe(),
            reward,
            done: self.is_done(),
        })
    }
}

/// Scripted policy achieving the maximum return of `env`'s task from its
/// current state.
pub fn optimal_action(env: &Env) -> usize {
    let toward = |from: [i32; 2], to: [i32; 2]| {
        if from[0] < to[0] {
            RIGHT
        } else if from[0] > to[0] {
            LEFT
        } else if from[1] < to[1] {
            UP
        } else if from[1] > to[1] {
            DOWN
        } else {
            STAY
        }
    };
    match &env.task {
        Task::Grid(g) => match g.kind {
            GridKind::Darkroom => toward(env.pos, g.goal),
            GridKind::DarkroomHard if env.flag => STAY,
            GridKind::DarkroomHard => toward(env.pos, g.goal),
            GridKind::KeyToDoor if !env.flag => toward(env.pos, g.goal),
            GridKind::KeyToDoor if !env.door_opened => toward(env.pos, g.door.expect("door cell")),
            GridKind::KeyToDoor => STAY,
        },
        Task::Tmaze(t) => {
            if env.pos[0] == t.horizon as i32 - 1 {
                t.side.action()
            } else {
                RIGHT
            }
        }
    }
}

/// Runs one episode of `task` with `policy`, returning the summed reward.
pub fn rollout_return(task: &Task, mut policy: impl FnMut(&Env) -> usize) -> f64 {
    let mut env = Env::new(task.clone());
    let mut total = 0.0;
    while !env.is_done() {
        let a = policy(&env);
        total += env.step(a).expect("episode running").reward;
    }
    total
}
