use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transedge::harness::audit::AuditReport;
use transedge::harness::{self, HarnessError};
use transedge::sim::SimConfig;

#[derive(Parser)]
#[command(name = "transedge", version, about = "Simulate, audit and benchmark TransEdge deployments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation; writes metrics.csv and trace.jsonl.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Replay a trace through the serializability oracle and auditors.
    Check {
        trace: PathBuf,
        #[command(flatten)]
        allow: Allow,
    },
    /// Sweep one knob; writes bench.csv with one row per value.
    Bench {
        #[command(flatten)]
        common: Common,
        /// latency, clusters, f, mix (local:distributed:read_only:write_only) or any config key
        #[arg(long)]
        knob: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    /// key=value config file; `#` starts a comment
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// node_id:behavior[:param=value], comma separated
    #[arg(long)]
    faults: Option<String>,
    /// Allow more than f faulty replicas in a cluster.
    #[arg(long)]
    unsafe_faults: bool,
    /// Override any config key, e.g. --set n_txns=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    allow: Allow,
}

#[derive(Args)]
struct Allow {
    /// Report violations of this check without failing, e.g. ro_recheck
    #[arg(long = "allow", value_name = "CHECK")]
    allow: Vec<String>,
}

fn load_config(c: &Common) -> Result<SimConfig, String> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            SimConfig::from_text(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => SimConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set {kv}: expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| e.to_string())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = &c.faults {
        cfg.faults = f.clone();
    }
    if c.unsafe_faults {
        cfg.unsafe_faults = true;
    }
    Ok(cfg)
}

/// Prints a per-check summary; true when nothing outside `allow` failed.
fn report(rep: &AuditReport, allow: &[String]) -> bool {
    let mut by_check: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for v in &rep.violations {
        by_check.entry(v.check).or_default().push(&v.detail);
    }
    println!(
        "committed {} (sg edges {}), read-only {} ({} needed round 2), ro-attributed aborts {}",
        rep.committed, rep.sg_edges, rep.ro_done, rep.ro_round2, rep.ro_attributed_aborts
    );
    let mut ok = true;
    for check in harness::audit::CHECKS {
        let found = by_check.get(check).map_or(0, Vec::len);
        let allowed = allow.iter().any(|a| a == check);
        let status = match (found, allowed) {
            (0, _) => "ok",
            (_, true) => "allowed",
            _ => "FAILED",
        };
        println!("  {check:<18} {status} ({found})");
        if found > 0 && !allowed {
            ok = false;
            for d in by_check[check].iter().take(5) {
                eprintln!("    {check}: {d}");
            }
        }
    }
    ok
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn real_main(cli: Cli) -> Result<bool, String> {
    let herr = |e: HarnessError| e.to_string();
    match cli.cmd {
        Cmd::Run { common } => {
            let cfg = load_config(&common)?;
            let out = harness::run(cfg).map_err(herr)?;
            harness::write_outputs(&common.out_dir, &out).map_err(herr)?;
            print!("{}", out.metrics.to_csv());
            println!(
                "trace hash {} ({} events, {})",
                out.result.trace_hash().to_hex(),
                out.result.trace.records.len(),
                if out.result.completed { "completed" } else { "horizon reached" }
            );
            Ok(report(&out.report, &common.allow.allow) && out.result.completed)
        }
        Cmd::Check { trace, allow } => {
            let t = harness::load_trace(&trace).map_err(herr)?;
            let rep = harness::check(&t).map_err(herr)?;
            Ok(report(&rep, &allow.allow))
        }
        Cmd::Bench { common, knob, values } => {
            let cfg = load_config(&common)?;
            let rows = harness::bench(&cfg, &knob, &values).map_err(herr)?;
            let csv = harness::bench_csv(&rows);
            write(&common.out_dir.join("bench.csv"), &csv)?;
            print!("{csv}");
            let mut clean = true;
            for r in &rows {
                for (check, n) in &r.violations {
                    let allowed = common.allow.allow.iter().any(|a| a == check);
                    eprintln!("{}={}: {check} {n}{}", r.knob, r.value, if allowed { " (allowed)" } else { "" });
                    clean &= allowed;
                }
            }
            Ok(clean)
        }
    }
}
