//! Run configuration: a TOML document with `model`, `data`, `train` and
//! `eval` tables. Built-in defaults are applied first, then the file, then
//! dotted `key=value` overrides. Unknown keys and type mismatches are
//! rejected with the offending key in the message.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::envs::EnvFamily;
use crate::model::{ActionSelection, DmhConfig, ModelKind};
use crate::tensor::AdamWConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` expects {expected}, got {found}")]
    Type {
        key: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("malformed override {0:?} (expected section.key=value)")]
    Override(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub mamba_layers: usize,
    pub state_size: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub valuable_subgoals: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub env: EnvFamily,
    /// Training tasks (one learning history each).
    pub tasks: usize,
    /// Held-out evaluation tasks, disjoint from the training tasks when the
    /// family has enough of them.
    pub heldout: usize,
    /// Interaction steps per learning history.
    pub steps: usize,
    /// Share of scripted-optimal episodes in Tmaze data.
    pub optimal_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub c: usize,
    pub n: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub log_every: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub seeds: usize,
    pub horizons: Vec<usize>,
    pub timing_reps: usize,
    pub action_selection: ActionSelection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DmhConfig::default();
        let o = AdamWConfig::default();
        Self {
            model: ModelSection {
                kind: ModelKind::Dmh,
                embed_dim: d.embed_dim,
                mamba_layers: d.mamba_layers,
                state_size: d.state_size,
                expand: d.expand,
                conv_width: d.conv_width,
                transformer_layers: d.transformer_layers,
                heads: d.heads,
                dropout: d.dropout,
                valuable_subgoals: d.valuable_subgoals,
            },
            data: DataSection {
                env: EnvFamily::Darkroom,
                tasks: 60,
                heldout: 10,
                steps: 50_000,
                optimal_fraction: 0.5,
                seed: 0,
            },
            train: TrainSection {
                c: d.c,
                n: d.n,
                iterations: 10_000,
                batch_size: d.batch_size,
                lr: o.lr,
                weight_decay: o.weight_decay,
                clip_norm: o.clip_norm,
                warmup_steps: o.warmup_steps,
                log_every: 100,
                seed: 0,
            },
            eval: EvalSection {
                episodes: 20,
                seeds: 10,
                horizons: vec![200, 400, 800, 1600],
                timing_reps: 3,
                action_selection: ActionSelection::Greedy,
            },
        }
    }
}

impl RunConfig {
    pub fn dmh(&self) -> DmhConfig {
        let m = &self.model;
        DmhConfig {
            c: self.train.c,
            n: self.train.n,
            embed_dim: m.embed_dim,
            mamba_layers: m.mamba_layers,
            state_size: m.state_size,
            expand: m.expand,
            conv_width: m.conv_width,
            transformer_layers: m.transformer_layers,
            heads: m.heads,
            dropout: m.dropout,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            valuable_subgoals: m.valuable_subgoals,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            clip_norm: self.train.clip_norm,
            warmup_steps: self.train.warmup_steps,
            ..AdamWConfig::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.dmh().validate().map_err(|msg| ConfigError::Invalid {
            key: "model".into(),
            msg,
        })?;
        let positive = [
            ("train.iterations", self.train.iterations),
            ("train.log_every", self.train.log_every),
            ("eval.episodes", self.eval.episodes),
            ("eval.seeds", self.eval.seeds),
            ("eval.timing_reps", self.eval.timing_reps),
            ("data.steps", self.data.steps),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid {
                key: key.to_string(),
                msg: "must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.data.optimal_fraction) {
            return Err(ConfigError::Invalid {
                key: "data.optimal_fraction".into(),
                msg: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a float",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Checks `value` against the default at the same key and merges it in.
/// Integers are accepted where floats are expected.
fn merge_value(slot: &mut Value, value: Value, key: &str) -> Result<(), ConfigError> {
    match (slot, value) {
        (Value::Table(dst), Value::Table(src)) => merge_table(dst, src, key),
        (slot @ Value::Float(_), Value::Integer(i)) => {
            *slot = Value::Float(i as f64);
            Ok(())
        }
        (Value::Array(dst), Value::Array(src)) => {
            let proto = dst.first().cloned();
            let mut out = Vec::with_capacity(src.len());
            for (i, v) in src.into_iter().enumerate() {
                let mut item = proto.clone().unwrap_or_else(|| v.clone());
                merge_value(&mut item, v, &format!("{key}[{i}]"))?;
                out.push(item);
            }
            *dst = out;
            Ok(())
        }
        (slot, value) if std::mem::discriminant(slot) == std::mem::discriminant(&value) => {
            *slot = value;
            Ok(())
        }
        (slot, value) => Err(ConfigError::Type {
            key: key.to_string(),
            expected: type_name(slot),
            found: type_name(&value),
        }),
    }
}

fn merge_table(dst: &mut Table, src: Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in src {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = dst.get_mut(&k).ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        merge_value(slot, v, &key)?;
    }
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value; bare words
/// that are not valid TOML are taken as strings.
fn parse_override_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let path = path.trim();
    let parts: Vec<&str> = path.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let mut table = root;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let key = parts[..=i].join(".");
        table = match table.get_mut(*part) {
            Some(Value::Table(t)) => t,
            Some(_) => return Err(ConfigError::UnknownKey(key)),
            None => return Err(ConfigError::UnknownKey(key)),
        };
    }
    let last = parts[parts.len() - 1];
    let slot = table.get_mut(last).ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
    let mut value = parse_override_value(raw.trim());
    // a bare word such as `dmh` parses as a string; so does `"dmh"`
    if let (Value::String(_), Value::Integer(_) | Value::Float(_) | Value::Boolean(_)) = (&*slot, &value) {
        value = Value::String(raw.trim().to_string());
    }
    merge_value(slot, value, path)
}

/// Resolves defaults, then `text` (a TOML document), then `overrides`.
pub fn resolve_config(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    resolve_layers(&[text], overrides)
}

/// Like [`resolve_config`] with several documents applied in order.
pub fn resolve_layers(docs: &[&str], overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut root = Table::try_from(RunConfig::default()).expect("defaults serialize");
    for text in docs {
        let file: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.message().to_string()))?;
        merge_table(&mut root, file, "")?;
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: RunConfig = Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid {
        key: "config".into(),
        msg: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any) and resolves it with `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
            path: p.to_path_buf(),
            msg: e.to_string(),
        })?,
        None => String::new(),
    };
    resolve_config(&text, overrides)
}
