use super::*;
use crate::datagen::{collect_histories, write_dataset};
use crate::envs::sample_tasks;

fn tiny() -> DmhConfig {
    DmhConfig {
        c: 4,
        n: 3,
        embed_dim: 16,
        mamba_layers: 1,
        state_size: 4,
        expand: 2,
        conv_width: 4,
        transformer_layers: 1,
        heads: 2,
        dropout: 0.0,
        batch_size: 4,
        lr: 1e-3,
        valuable_subgoals: true,
    }
}

fn cfg(kind: ModelKind, iterations: usize) -> TrainConfig {
    let dmh = tiny();
    TrainConfig {
        model: kind,
        optim: AdamWConfig {
            lr: dmh.lr,
            warmup_steps: 10,
            ..AdamWConfig::default()
        },
        dmh,
        iterations,
        seed: 3,
        log_every: 100,
        dataset: PathBuf::new(),
        checkpoint: PathBuf::new(),
    }
}

fn darkroom(tasks: usize, steps: usize) -> Vec<LearningHistory> {
    let mut rng = Rng::new(11);
    let tasks = sample_tasks(EnvFamily::Darkroom, tasks, &mut rng);
    collect_histories(&tasks, steps, &rng)
}

#[test]
fn smoke_run_writes_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = darkroom(2, 400);
    write_dataset(&data, dir.path().join("data.ndjson")).unwrap();
    let c = TrainConfig {
        dataset: dir.path().join("data.ndjson"),
        checkpoint: dir.path().join("ckpt/model.bin"),
        ..cfg(ModelKind::Dmh, 1)
    };
    let mut logged = Vec::new();
    let t = train(&c, |it, l| logged.push((it, l))).unwrap();
    assert_eq!(logged.len(), 1);
    assert_eq!(t.losses.len(), 1);
    let (_, store) = load_model(ModelKind::Dmh, &c.dmh, EnvSpec::of(&data[0].task), &c.checkpoint).unwrap();
    assert_eq!(store.checksum(), t.store.checksum());
    // a checkpoint for one layout does not load into another
    let other = DmhConfig { embed_dim: 8, ..c.dmh.clone() };
    assert!(load_model(ModelKind::Dmh, &other, EnvSpec::of(&data[0].task), &c.checkpoint).is_err());
}

#[test]
fn incompatible_data_is_a_config_error() {
    let data = darkroom(2, 100);
    let c = TrainConfig {
        dmh: DmhConfig { n: 6, ..tiny() },
        ..cfg(ModelKind::Dmh, 1)
    };
    let err = train_model(&c, &data, |_, _| {}).err().unwrap();
    assert!(matches!(err, HarnessError::Config(ref m) if m.contains("n = 6")), "{err}");
    let c = TrainConfig {
        dmh: DmhConfig { c: 21, ..tiny() },
        ..cfg(ModelKind::Dmh, 1)
    };
    assert!(matches!(train_model(&c, &data, |_, _| {}), Err(HarnessError::Config(_))));
    assert!(matches!(train_model(&c, &[], |_, _| {}), Err(HarnessError::Config(_))));
}

#[test]
fn loss_decreases_and_goal_map_stays_frozen() {
    let data = darkroom(4, 2000);
    let c = cfg(ModelKind::Dmh, 120);
    let (model, init) = build_model(c.model, &c.dmh, EnvSpec::of(&data[0].task), c.seed);
    let t = train_model(&c, &data, |_, _| {}).unwrap();
    let head: f64 = t.losses[..12].iter().sum::<f64>() / 12.0;
    let tail: f64 = t.losses[108..].iter().sum::<f64>() / 12.0;
    assert!(tail < head, "loss {head} -> {tail}");
    let Model::Dmh(m) = &model else { unreachable!() };
    for id in m.goal_map_params() {
        assert_eq!(t.store.get(id).data(), init.get(id).data());
    }
    // training is a pure function of seed, config and data
    let again = train_model(&c, &data, |_, _| {}).unwrap();
    assert_eq!(again.losses, t.losses);
    assert_eq!(again.store.checksum(), t.store.checksum());
}

#[test]
fn online_test_is_gradient_free_and_deterministic() {
    let data = darkroom(2, 200);
    let t = train_model(&cfg(ModelKind::Dmh, 2), &data, |_, _| {}).unwrap();
    let tasks: Vec<Task> = data.iter().map(|h| h.task.clone()).collect();
    let before = t.store.checksum();
    let one = online_test(&t.model, &t.store, &tasks[..1], 1, 0);
    assert_eq!(one.runs[0].returns.len(), 1);
    let a = online_test(&t.model, &t.store, &tasks, 5, 0);
    let b = online_test(&t.model, &t.store, &tasks, 5, 0);
    assert_eq!(t.store.checksum(), before);
    assert_eq!(a.checksum_before, a.checksum_after);
    assert!(a.same_outcome(&b));
    assert_eq!(a.mean_curve().len(), 5);
    assert_eq!(a.per_task(0..5).len(), 2);
}

#[test]
fn baselines_share_the_report_schema() {
    let data = darkroom(2, 200);
    let tasks: Vec<Task> = data.iter().map(|h| h.task.clone()).collect();
    for kind in ["ad_transformer", "ad_mamba", "dt"] {
        let r = run_baseline(kind, &cfg(ModelKind::Dmh, 1), &data, &tasks, 20).unwrap();
        assert_eq!(r.model.name(), kind);
        assert_eq!(r.episodes, 20);
        assert!(r.runs.iter().all(|run| run.returns.len() == 20));
    }
    assert!(matches!(
        run_baseline("dmh", &cfg(ModelKind::Dmh, 1), &data, &tasks, 1),
        Err(HarnessError::UnknownBaseline(_))
    ));
    assert!(matches!(
        run_baseline("rnn", &cfg(ModelKind::Dmh, 1), &data, &tasks, 1),
        Err(HarnessError::UnknownBaseline(_))
    ));
}

#[test]
fn ablation_arms_differ_in_one_flag() {
    let (a, b) = ablation_configs(&cfg(ModelKind::AdMamba, 5));
    assert_eq!(a.model, ModelKind::Dmh);
    assert!(a.dmh.valuable_subgoals && !b.dmh.valuable_subgoals);
    let restored = TrainConfig {
        dmh: DmhConfig {
            valuable_subgoals: true,
            ..b.dmh.clone()
        },
        ..b.clone()
    };
    assert_eq!(restored, a);
    let data = darkroom(2, 200);
    let tasks: Vec<Task> = data.iter().map(|h| h.task.clone()).collect();
    let (w, wo) = ablate_subgoals(&cfg(ModelKind::Dmh, 2), &data, &tasks, 2, &[1, 2], ActionSelection::Sample).unwrap();
    assert_eq!(w.seeds(), vec![1, 2]);
    assert_eq!(wo.runs.len(), 4);
}

#[test]
fn slope_fit_and_timing_contract() {
    let xs = [200.0, 400.0, 800.0, 1600.0];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
    assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    assert!(benchmark_timing(&[ModelKind::Dmh], &[10, 20, 40], &tiny(), 0, 1).is_err());
    let r = benchmark_timing(&[ModelKind::Dmh, ModelKind::AdTransformer], &[10, 20, 40, 80], &tiny(), 1, 3).unwrap();
    assert_eq!(r.models.len(), 2);
    for m in &r.models {
        assert_eq!(m.median_ms.len(), 4);
        assert!(m.median_ms.iter().all(|&t| t > 0.0));
    }
}

#[test]
fn metrics_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = EvalReport {
        model: ModelKind::Dt,
        episodes: 2,
        runs: vec![
            TaskRun {
                seed: 0,
                task: 0,
                returns: vec![1.0, 2.0],
                wall_ms: vec![0.5, 0.5],
            },
            TaskRun {
                seed: 1,
                task: 0,
                returns: vec![3.0, 4.0],
                wall_ms: vec![0.5, 0.5],
            },
        ],
        checksum_before: 7,
        checksum_after: 7,
    };
    write_metrics(&report, "r1", dir.path().join("m.ndjson")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("m.ndjson")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for key in ["run_id", "model", "task", "episode", "return", "wall_ms"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert_eq!(lines[3]["return"], 4.0);
    write_summary_csv(&report, dir.path().join("s.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "dt,0,2.000000,1.000000,0.500");
    assert_eq!(report.summary(0..2), (2.5, 1.0));
}
