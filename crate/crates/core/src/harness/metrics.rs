use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mean_stderr, EvalReport};
use crate::model::ModelKind;

/// One NDJSON line per evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub model: ModelKind,
    pub seed: u64,
    pub task: usize,
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub wall_ms: f64,
}

pub fn metric_records(report: &EvalReport, run_id: &str) -> Vec<MetricRecord> {
    report
        .runs
        .iter()
        .flat_map(|r| {
            r.returns.iter().zip(&r.wall_ms).enumerate().map(move |(e, (&ret, &wall_ms))| MetricRecord {
                run_id: run_id.to_string(),
                model: report.model,
                seed: r.seed,
                task: r.task,
                episode: e,
                ret,
                wall_ms,
            })
        })
        .collect()
}

pub fn write_metrics(report: &EvalReport, run_id: &str, path: impl AsRef<Path>) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for rec in metric_records(report, run_id) {
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Per-episode summary across seeds: `episode,mean_return,stderr,mean_wall_ms`.
pub fn write_summary_csv(report: &EvalReport, path: impl AsRef<Path>) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "episode", "mean_return", "stderr", "mean_wall_ms"])?;
    for e in 0..report.episodes {
        let (m, se) = mean_stderr(&report.seed_means(e..e + 1));
        let wall: Vec<f64> = report.runs.iter().map(|r| r.wall_ms[e]).collect();
        let (wm, _) = mean_stderr(&wall);
        w.write_record([
            report.model.to_string(),
            e.to_string(),
            format!("{m:.6}"),
            format!("{se:.6}"),
            format!("{wm:.3}"),
        ])?;
    }
    w.flush()
}
