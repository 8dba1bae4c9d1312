//! `dmh` subcommands. Every command resolves a [`RunConfig`], writes it to
//! the output directory as `config.toml`, and finishes with a
//! `manifest.json` listing its inputs and outputs.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dmh_core::datagen::{collect_histories, collect_tmaze_data, read_dataset, write_dataset, LearningHistory};
use dmh_core::envs::{sample_tasks, EnvFamily, Task};
use dmh_core::harness::{
    self, ablate_subgoals, benchmark_timing, online_test_with, write_metrics, write_summary_csv, EvalReport, HarnessError,
    RunConfig, TrainConfig,
};
use dmh_core::model::{ActionSelection, EnvSpec, ModelKind};
use dmh_core::tensor::Rng;

pub const DATASET_FILE: &str = "dataset.ndjson";
pub const HELDOUT_FILE: &str = "heldout.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "dmh", version, about = "Hybrid SSM/transformer in-context RL toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file with [model], [data], [train] and [eval] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.c=20`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory for every artifact of the run.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Collect learning histories and write a dataset.
    GenData {
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        model: Option<String>,
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained run in context, without gradient updates.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// `heldout` or `train`.
        #[arg(long, default_value = "heldout")]
        tasks: String,
        #[command(flatten)]
        common: Common,
    },
    /// Online wall time against the Tmaze horizon.
    Bench {
        /// Comma-separated model kinds.
        #[arg(long, default_value = "dmh,ad_transformer", value_delimiter = ',')]
        models: Vec<String>,
        /// Comma-separated horizons (at least four).
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
    /// Train DM-H with and without goal-prompted segments on the same data.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Number of paired seeds.
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<harness::ConfigError> for CliError {
    fn from(e: harness::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => CliError::Config(m),
            HarnessError::UnknownBaseline(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error: {e}"))
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub args: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<FileEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory bookkeeping: created up front, every file written
/// through it is listed in the manifest.
struct RunDir {
    root: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    fn create(root: &Path, cfg: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        let mut dir = Self {
            root: root.to_path_buf(),
            outputs: Vec::new(),
        };
        dir.write(CONFIG_FILE, cfg.to_toml().as_bytes())?;
        Ok(dir)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.root.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(p, bytes)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.write(name, text.as_bytes())
    }

    fn finish(self, command: &str, args: &[String], inputs: Vec<String>) -> Result<(), CliError> {
        let mut outputs = Vec::new();
        for name in &self.outputs {
            let bytes = fs::read(self.root.join(name))?;
            outputs.push(FileEntry {
                path: name.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        let m = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args: args.to_vec(),
            inputs,
            outputs,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

fn resolve(common: &Common, flags: Vec<String>) -> Result<RunConfig, CliError> {
    let mut overrides = flags;
    overrides.extend(common.overrides.iter().cloned());
    Ok(harness::load_config(common.config.as_deref(), &overrides)?)
}

fn flag<T: ToString>(key: &str, v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={}", v.to_string()))
}

/// Training tasks followed by held-out tasks, drawn from `data.seed`.
pub fn split_tasks(cfg: &RunConfig) -> (Vec<Task>, Vec<Task>) {
    let mut rng = Rng::new(cfg.data.seed);
    let mut all = sample_tasks(cfg.data.env, cfg.data.tasks + cfg.data.heldout, &mut rng);
    let heldout = all.split_off(cfg.data.tasks);
    (all, heldout)
}

/// Learning histories for `tasks`: Q-learning on grids, the scripted
/// mixture on Tmaze.
pub fn generate(cfg: &RunConfig, tasks: &[Task]) -> Vec<LearningHistory> {
    let rng = Rng::new(cfg.data.seed).fork(1);
    match cfg.data.env {
        EnvFamily::Tmaze { horizon } => {
            let episodes = (cfg.data.steps / horizon).max(1);
            tasks
                .iter()
                .enumerate()
                .map(|(i, t)| collect_tmaze_data(t, episodes, cfg.data.optimal_fraction, &mut rng.fork(i as u64)))
                .collect()
        }
        _ => collect_histories(tasks, cfg.data.steps, &rng),
    }
}

fn gen_data(cfg: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    if cfg.data.tasks == 0 {
        return Err(CliError::Config("data.tasks must be positive".into()));
    }
    if cfg.data.steps < cfg.data.env.episode_len() {
        return Err(CliError::Config(format!(
            "data.steps = {} is shorter than one {} episode",
            cfg.data.steps, cfg.data.env
        )));
    }
    let (train, heldout) = split_tasks(cfg);
    let histories = generate(cfg, &train);
    write_dataset(&histories, dir.path(DATASET_FILE))?;
    dir.write_json(HELDOUT_FILE, &heldout)?;
    let summary: Vec<serde_json::Value> = histories
        .iter()
        .map(|h| {
            let r = h.returns();
            serde_json::json!({
                "episodes": h.episodes.len(),
                "first_return": r.first(),
                "last_return": r.last(),
            })
        })
        .collect();
    dir.write_json("histories.json", &summary)?;
    Ok(())
}

fn train_cmd(cfg: &RunConfig, data: &Path, dir: &mut RunDir) -> Result<(), CliError> {
    let tc = TrainConfig::from_run(cfg, data.join(DATASET_FILE), dir.path(CHECKPOINT_FILE));
    let mut log = Vec::new();
    let t = harness::train(&tc, |it, loss| {
        eprintln!("iteration {it}: loss {loss:.5}");
        log.push((it, loss));
    })?;
    let mut lines = Vec::new();
    for (it, l) in t.losses.iter().enumerate() {
        writeln!(lines, "{}", serde_json::json!({ "iteration": it + 1, "loss": l }))?;
    }
    dir.write("loss.ndjson", &lines)?;
    dir.write("data_dir.txt", data.display().to_string().as_bytes())?;
    Ok(())
}

fn read_text(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))
}

fn eval_tasks(data: &Path, which: &str) -> Result<Vec<Task>, CliError> {
    match which {
        "heldout" => serde_json::from_str(&read_text(&data.join(HELDOUT_FILE))?)
            .map_err(|e| CliError::Config(format!("bad {HELDOUT_FILE}: {e}"))),
        "train" => Ok(read_dataset(data.join(DATASET_FILE))
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .into_iter()
            .map(|h| h.task)
            .collect()),
        other => Err(CliError::Config(format!("--tasks must be heldout or train, got {other:?}"))),
    }
}

fn write_report(dir: &mut RunDir, stem: &str, report: &EvalReport, run_id: &str) -> Result<(), CliError> {
    dir.write_json(&format!("{stem}.json"), report)?;
    write_metrics(report, run_id, dir.path(&format!("{stem}.ndjson")))?;
    write_summary_csv(report, dir.path(&format!("{stem}.csv")))?;
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, run: &Path, which: &str, dir: &mut RunDir) -> Result<(), CliError> {
    let data = PathBuf::from(read_text(&run.join("data_dir.txt"))?.trim());
    let tasks = eval_tasks(&data, which)?;
    let first = tasks.first().ok_or_else(|| CliError::Config("no evaluation tasks".into()))?;
    let (model, store) = harness::load_model(cfg.model.kind, &cfg.dmh(), EnvSpec::of(first), run.join(CHECKPOINT_FILE))?;
    let selection = cfg.eval.action_selection;
    // greedy play does not depend on the seed, so one pass suffices
    let seeds = match selection {
        ActionSelection::Greedy => 1,
        ActionSelection::Sample => cfg.eval.seeds.max(1) as u64,
    };
    let mut report: Option<EvalReport> = None;
    for s in 0..seeds {
        let r = online_test_with(&model, &store, &tasks, cfg.eval.episodes, cfg.train.seed + s, selection);
        match &mut report {
            None => report = Some(r),
            Some(acc) => acc.merge(r),
        }
    }
    let report = report.expect("at least one seed");
    if report.checksum_before != report.checksum_after {
        return Err(CliError::Runtime("parameters changed during evaluation".into()));
    }
    let run_id = run.file_name().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    write_report(dir, "metrics", &report, &run_id)?;
    let (m, se) = report.summary(0..cfg.eval.episodes);
    eprintln!("{}: mean return {m:.3} ± {se:.3} over {} task(s)", report.model, tasks.len());
    Ok(())
}

fn bench_cmd(cfg: &RunConfig, models: &[String], horizons: &[usize], dir: &mut RunDir) -> Result<(), CliError> {
    let kinds = models
        .iter()
        .map(|m| m.parse::<ModelKind>().map_err(|e| CliError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let report = pool.install(|| benchmark_timing(&kinds, horizons, &cfg.dmh(), 1, cfg.eval.timing_reps))?;
    dir.write_json("timing.json", &report)?;
    let mut csv = String::from("model,horizon,median_ms\n");
    for m in &report.models {
        for (h, t) in report.horizons.iter().zip(&m.median_ms) {
            csv.push_str(&format!("{},{h},{t:.3}\n", m.model));
        }
        eprintln!("{}: log-log slope {:.3}", m.model, m.slope);
    }
    dir.write("timing.csv", csv.as_bytes())?;
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, data: &Path, dir: &mut RunDir) -> Result<(), CliError> {
    let histories = read_dataset(data.join(DATASET_FILE)).map_err(|e| CliError::Runtime(e.to_string()))?;
    let tasks = eval_tasks(data, "heldout")?;
    let tc = TrainConfig::from_run(cfg, data.join(DATASET_FILE), PathBuf::new());
    let seeds: Vec<u64> = (0..cfg.eval.seeds as u64).map(|s| cfg.train.seed + s).collect();
    let (with, without) = ablate_subgoals(&tc, &histories, &tasks, cfg.eval.episodes, &seeds, cfg.eval.action_selection)?;
    write_report(dir, "with_subgoals", &with, "with_subgoals")?;
    write_report(dir, "without_subgoals", &without, "without_subgoals")?;
    let last = cfg.eval.episodes.saturating_sub(5)..cfg.eval.episodes;
    let (a, sa) = with.summary(last.clone());
    let (b, sb) = without.summary(last);
    dir.write_json(
        "ablation.json",
        &serde_json::json!({
            "with_subgoals": { "final_mean": a, "stderr": sa },
            "without_subgoals": { "final_mean": b, "stderr": sb },
            "seeds": seeds,
        }),
    )?;
    eprintln!("final return with sub-goals {a:.3} ± {sa:.3}, without {b:.3} ± {sb:.3}");
    Ok(())
}

/// Caps rayon's global pool at `DMH_THREADS` when set.
fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DMH_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("DMH_THREADS must be a positive integer, got {v:?}")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` and runs the command; `Ok(Some(text))` is help or version
/// output.
pub fn run<I, S>(argv: I) -> Result<Option<String>, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayHelpOnMissingArgumentOrSubcommand, DisplayVersion};
            return match e.kind() {
                DisplayHelp | DisplayVersion => Ok(Some(e.to_string())),
                DisplayHelpOnMissingArgumentOrSubcommand => Err(CliError::Usage(e.to_string())),
                _ => Err(CliError::Usage(e.render().to_string())),
            };
        }
    };
    init_threads()?;
    match cli.command {
        Command::GenData {
            env,
            tasks,
            steps,
            seed,
            common,
        } => {
            let flags = [flag("data.env", &env), flag("data.tasks", &tasks), flag("data.steps", &steps), flag("data.seed", &seed)];
            let cfg = resolve(&common, flags.into_iter().flatten().collect())?;
            let mut dir = RunDir::create(&common.out, &cfg)?;
            gen_data(&cfg, &mut dir)?;
            dir.finish("gen-data", &args, inputs(&common, &[]))?;
        }
        Command::Train {
            model,
            data,
            seed,
            common,
        } => {
            let flags = [flag("model.kind", &model), flag("train.seed", &seed)];
            let cfg = resolve(&common, flags.into_iter().flatten().collect())?;
            let mut dir = RunDir::create(&common.out, &cfg)?;
            train_cmd(&cfg, &data, &mut dir)?;
            dir.finish("train", &args, inputs(&common, &[data.join(DATASET_FILE)]))?;
        }
        Command::Eval {
            checkpoint,
            episodes,
            tasks,
            common,
        } => {
            // the trained run's config is the base; the file and flags refine it
            let base = read_text(&checkpoint.join(CONFIG_FILE))?;
            let extra = common.config.as_deref().map(read_text).transpose()?;
            let mut overrides: Vec<String> = flag("eval.episodes", &episodes).into_iter().collect();
            overrides.extend(common.overrides.iter().cloned());
            let docs: Vec<&str> = std::iter::once(base.as_str()).chain(extra.as_deref()).collect();
            let cfg = harness::resolve_layers(&docs, &overrides)?;
            let mut dir = RunDir::create(&common.out, &cfg)?;
            eval_cmd(&cfg, &checkpoint, &tasks, &mut dir)?;
            dir.finish("eval", &args, inputs(&common, &[checkpoint.join(CHECKPOINT_FILE)]))?;
        }
        Command::Bench {
            models,
            horizons,
            common,
        } => {
            let h = horizons.map(|h| format!("[{}]", h.iter().map(usize::to_string).collect::<Vec<_>>().join(",")));
            let cfg = resolve(&common, flag("eval.horizons", &h).into_iter().collect())?;
            let mut dir = RunDir::create(&common.out, &cfg)?;
            bench_cmd(&cfg, &models, &cfg.eval.horizons, &mut dir)?;
            dir.finish("bench", &args, inputs(&common, &[]))?;
        }
        Command::Ablate { data, seeds, common } => {
            let cfg = resolve(&common, flag("eval.seeds", &seeds).into_iter().collect())?;
            let mut dir = RunDir::create(&common.out, &cfg)?;
            ablate_cmd(&cfg, &data, &mut dir)?;
            dir.finish("ablate", &args, inputs(&common, &[data.join(DATASET_FILE)]))?;
        }
    }
    Ok(None)
}

fn inputs(common: &Common, extra: &[PathBuf]) -> Vec<String> {
    common
        .config
        .iter()
        .chain(extra)
        .map(|p| p.display().to_string())
        .collect()
}
