//! Offline checks and reporting over a run's trace, plus the `run`, `check`
//! and `bench` entry points the CLI wraps.

pub mod audit;
pub mod metrics;
pub mod oracle;
pub mod trace;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::sim::{self, RunResult, SimConfig, SimError};
use crate::workload::ConfigError;
use audit::AuditReport;
use metrics::Metrics;
use oracle::OracleError;
use trace::{Trace, TraceError};

pub const BENCH_HEADER: &str =
    "knob,value,seed,dist_throughput_tps,dist_lat_mean_ms,ro_lat_mean_ms,ro_round1_lat_mean_ms,ro_round2_pct,abort_pct,msgs_per_txn";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_owned(), source }
}

/// A finished run with its metrics and audit.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub metrics: Metrics,
    pub report: AuditReport,
}

pub fn run(cfg: SimConfig) -> Result<RunOutput, HarnessError> {
    let result = sim::run(cfg)?;
    let metrics = metrics::compute(&result.trace);
    let report = audit::audit(&result.trace)?;
    Ok(RunOutput { result, metrics, report })
}

/// Writes `metrics.csv` and `trace.jsonl` into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let m = dir.join("metrics.csv");
    fs::write(&m, out.metrics.to_csv()).map_err(io_err(&m))?;
    let t = dir.join("trace.jsonl");
    let f = File::create(&t).map_err(io_err(&t))?;
    out.result.trace.write_jsonl(BufWriter::new(f)).map_err(io_err(&t))?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<Trace, HarnessError> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(Trace::read_jsonl(BufReader::new(f))?)
}

/// Oracle and auditors over a recorded trace.
pub fn check(trace: &Trace) -> Result<AuditReport, HarnessError> {
    Ok(audit::audit(trace)?)
}

/// Sets a bench knob. `latency` is the added inter-cluster and client
/// latency, `clusters` the partition count, `mix` a `local:distributed:
/// read_only:write_only` weight tuple; any config key is accepted as is.
pub fn apply_knob(cfg: &mut SimConfig, knob: &str, value: &str) -> Result<(), ConfigError> {
    if knob == "mix" {
        let parts: Vec<&str> = value.split(':').collect();
        let [l, d, r, w] = parts[..] else {
            return Err(ConfigError::BadValue { key: knob.into(), value: value.into() });
        };
        for (k, v) in [("mix_local", l), ("mix_distributed", d), ("mix_read_only", r), ("mix_write_only", w)] {
            cfg.set(k, v)?;
        }
        return Ok(());
    }
    cfg.set(knob, value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub knob: String,
    pub value: String,
    pub seed: u64,
    pub dist_throughput_tps: f64,
    pub dist_lat_mean_ms: f64,
    pub ro_lat_mean_ms: f64,
    pub ro_round1_lat_mean_ms: f64,
    pub ro_round2_pct: f64,
    pub abort_pct: f64,
    pub msgs_per_txn: f64,
    /// Violations per audit check.
    pub violations: BTreeMap<&'static str, usize>,
}

impl BenchRow {
    fn from_run(knob: &str, value: &str, seed: u64, out: &RunOutput) -> Self {
        let m = &out.metrics;
        let mut violations = BTreeMap::new();
        for v in &out.report.violations {
            *violations.entry(v.check).or_default() += 1;
        }
        let dist = m.row("distributed_rw").cloned().unwrap_or_default();
        let ro = m.row("read_only").cloned().unwrap_or_default();
        let all = m.row("all").cloned().unwrap_or_default();
        BenchRow {
            knob: knob.to_owned(),
            value: value.to_owned(),
            seed,
            dist_throughput_tps: dist.throughput_tps,
            dist_lat_mean_ms: dist.lat_mean_ms,
            ro_lat_mean_ms: ro.lat_mean_ms,
            ro_round1_lat_mean_ms: m.ro_round1_lat_mean_ms,
            ro_round2_pct: ro.ro_round2_pct,
            abort_pct: all.abort_pct,
            msgs_per_txn: all.msgs_per_txn,
            violations,
        }
    }
}

/// Runs one simulation per value of `knob`.
pub fn bench(base: &SimConfig, knob: &str, values: &[String]) -> Result<Vec<BenchRow>, HarnessError> {
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        apply_knob(&mut cfg, knob, v)?;
        let out = run(cfg)?;
        rows.push(BenchRow::from_run(knob, v, base.seed, &out));
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            r.knob,
            r.value,
            r.seed,
            r.dist_throughput_tps,
            r.dist_lat_mean_ms,
            r.ro_lat_mean_ms,
            r.ro_round1_lat_mean_ms,
            r.ro_round2_pct,
            r.abort_pct,
            r.msgs_per_txn
        );
    }
    s
}
