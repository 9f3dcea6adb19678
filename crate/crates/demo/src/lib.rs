//! Browser bindings. Each export takes plain strings and returns a JSON
//! string, so the page needs no generated types.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use transedge::harness::audit::{AuditReport, CHECKS};
use transedge::harness::trace::Trace;
use transedge::harness::{self, RunOutput};
use transedge::sim::{RoMode, SimConfig};

/// Largest run the page accepts; the simulator is single threaded and
/// blocks the tab while it runs.
pub const MAX_TXNS: usize = 5_000;

fn audit_json(rep: &AuditReport) -> Value {
    let checks: Vec<Value> = CHECKS
        .iter()
        .map(|c| {
            let n = rep.count(c);
            let first = rep.violations.iter().find(|v| v.check == *c).map(|v| v.detail.clone());
            json!({ "check": c, "violations": n, "first": first })
        })
        .collect();
    json!({
        "committed": rep.committed,
        "sg_edges": rep.sg_edges,
        "ro_done": rep.ro_done,
        "ro_round2": rep.ro_round2,
        "cycle": rep.cycle.as_ref().map(|c| c.to_string()),
        "checks": checks,
    })
}

fn output_json(out: &RunOutput, with_trace: bool) -> Value {
    let mut trace = Vec::new();
    if with_trace {
        out.result.trace.write_jsonl(&mut trace).expect("in-memory write");
    }
    json!({
        "completed": out.result.completed,
        "sim_time_ms": out.result.end_time,
        "events": out.result.trace.records.len(),
        "trace_hash": out.result.trace_hash().to_hex(),
        "metrics_csv": out.metrics.to_csv(),
        "audit": audit_json(&out.report),
        "trace": with_trace.then(|| String::from_utf8(trace).expect("utf-8 json")),
    })
}

fn error(e: impl ToString) -> String {
    json!({ "error": e.to_string() }).to_string()
}

fn configure(config: &str, seed: u64, faults: &str) -> Result<SimConfig, String> {
    let mut cfg = SimConfig::from_text(config).map_err(|e| e.to_string())?;
    cfg.seed = seed;
    if !faults.trim().is_empty() {
        cfg.faults = faults.trim().to_owned();
    }
    if cfg.workload.n_txns > MAX_TXNS {
        return Err(format!("n_txns above {MAX_TXNS} would stall the page"));
    }
    Ok(cfg)
}

/// Runs one simulation from `key = value` config text.
pub fn simulate(config: &str, seed: u64, faults: &str) -> String {
    match configure(config, seed, faults).and_then(|c| harness::run(c).map_err(|e| e.to_string())) {
        Ok(out) => output_json(&out, true).to_string(),
        Err(e) => error(e),
    }
}

/// Audits a pasted `trace.jsonl`.
pub fn audit_trace(jsonl: &str) -> String {
    let trace = match Trace::read_jsonl(jsonl.as_bytes()) {
        Ok(t) => t,
        Err(e) => return error(e),
    };
    match harness::check(&trace) {
        Ok(rep) => json!({ "trace_hash": trace.hash().to_hex(), "audit": audit_json(&rep) }).to_string(),
        Err(e) => error(e),
    }
}

/// Runs the same seed with each read-only mode and reports whether the
/// oracle found a cycle through a read-only transaction.
pub fn compare_read_modes(config: &str, seed: u64) -> String {
    let modes = [RoMode::SkipDependencyCheck, RoMode::TransEdge, RoMode::Recheck];
    let mut rows = Vec::new();
    for mode in modes {
        let mut cfg = match configure(config, seed, "") {
            Ok(c) => c,
            Err(e) => return error(e),
        };
        cfg.ro_mode = mode;
        let out = match harness::run(cfg) {
            Ok(o) => o,
            Err(e) => return error(e),
        };
        let ro = out.metrics.row("read_only");
        rows.push(json!({
            "mode": mode.to_string(),
            "cycle": out.report.cycle.as_ref().map(|c| c.to_string()),
            "ro_committed": ro.map_or(0, |r| r.committed),
            "ro_round2_pct": ro.map_or(0.0, |r| r.ro_round2_pct),
            "ro_lat_mean_ms": ro.map_or(0.0, |r| r.lat_mean_ms),
        }));
    }
    json!({ "seed": seed, "modes": rows }).to_string()
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_js(config: &str, seed: u32, faults: &str) -> String {
    simulate(config, u64::from(seed), faults)
}

#[wasm_bindgen(js_name = auditTrace)]
pub fn audit_trace_js(jsonl: &str) -> String {
    audit_trace(jsonl)
}

#[wasm_bindgen(js_name = compareReadModes)]
pub fn compare_read_modes_js(config: &str, seed: u32) -> String {
    compare_read_modes(config, u64::from(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "# demo\nn_txns = 120\nn_clients = 6\n";

    #[test]
    fn simulate_then_audit_round_trips() {
        let out: Value = serde_json::from_str(&simulate(SMALL, 3, "")).unwrap();
        assert_eq!(out["completed"], true);
        let again: Value = serde_json::from_str(&audit_trace(out["trace"].as_str().unwrap())).unwrap();
        assert_eq!(again["trace_hash"], out["trace_hash"]);
        assert_eq!(again["audit"], out["audit"]);
    }

    #[test]
    fn bad_input_is_an_error_object() {
        for s in [simulate("n_txns = lots", 1, ""), simulate(SMALL, 1, "0.0:teleport"), audit_trace("{}")] {
            let v: Value = serde_json::from_str(&s).unwrap();
            assert!(v["error"].is_string(), "{s}");
        }
        let v: Value = serde_json::from_str(&simulate("n_txns = 999999", 1, "")).unwrap();
        assert!(v["error"].is_string());
    }

    #[test]
    fn skipping_the_check_shows_a_cycle() {
        let cfg = "n_keys = 60\nn_txns = 400\ninter_latency_min = 5\ninter_latency_max = 150\n";
        let mut mutant = 0;
        for seed in 0..10 {
            let v: Value = serde_json::from_str(&compare_read_modes(cfg, seed)).unwrap();
            let modes = v["modes"].as_array().unwrap();
            assert_eq!(modes.len(), 3);
            mutant += modes[0]["cycle"].is_string() as usize;
            assert!(modes[2]["cycle"].is_null(), "{v}");
        }
        assert!(mutant > 0);
    }
}
