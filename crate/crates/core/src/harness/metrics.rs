//! Per-kind metrics, recomputed from the trace alone. Times are simulated.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use super::trace::{Trace, TraceEvent};
use crate::types::TxnId;
use crate::workload::GenKind;

pub const METRICS_HEADER: &str = "kind,submitted,committed,aborted,abort_pct,throughput_tps,lat_mean_ms,lat_p50_ms,lat_p95_ms,lat_p99_ms,ro_round2_pct,msgs_per_txn,sim_time_ms";

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KindMetrics {
    pub kind: String,
    pub submitted: u64,
    pub committed: u64,
    pub aborted: u64,
    pub abort_pct: f64,
    pub throughput_tps: f64,
    pub lat_mean_ms: f64,
    pub lat_p50_ms: u64,
    pub lat_p95_ms: u64,
    pub lat_p99_ms: u64,
    pub ro_round2_pct: f64,
    /// Read-only rows: requests per transaction. Other rows: every message
    /// sent in the run divided by the finished transactions.
    pub msgs_per_txn: f64,
    pub sim_time_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub rows: Vec<KindMetrics>,
    /// Mean first-round latency of commit-free read-only transactions.
    pub ro_round1_lat_mean_ms: f64,
}

impl Metrics {
    pub fn row(&self, kind: &str) -> Option<&KindMetrics> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3},{:.3},{:.3},{},{},{},{:.3},{:.3},{}",
                r.kind,
                r.submitted,
                r.committed,
                r.aborted,
                r.abort_pct,
                r.throughput_tps,
                r.lat_mean_ms,
                r.lat_p50_ms,
                r.lat_p95_ms,
                r.lat_p99_ms,
                r.ro_round2_pct,
                r.msgs_per_txn,
                r.sim_time_ms
            );
        }
        s
    }
}

pub fn kind_name(k: GenKind) -> &'static str {
    match k {
        GenKind::LocalRw => "local_rw",
        GenKind::DistributedRw => "distributed_rw",
        GenKind::ReadOnly => "read_only",
        GenKind::WriteOnly => "write_only",
    }
}

const KINDS: [GenKind; 4] = [GenKind::LocalRw, GenKind::DistributedRw, GenKind::ReadOnly, GenKind::WriteOnly];

/// Nearest-rank percentile of a sorted slice.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Default)]
struct Acc {
    submitted: u64,
    committed: u64,
    aborted: u64,
    latencies: Vec<u64>,
    ro_done: u64,
    ro_round2: u64,
    ro_requests: u64,
}

impl Acc {
    fn finish(mut self, kind: &str, sim_time: u64, msgs_per_txn: f64) -> KindMetrics {
        self.latencies.sort_unstable();
        let done = self.committed + self.aborted;
        let pct = |a: u64, b: u64| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        KindMetrics {
            kind: kind.to_owned(),
            submitted: self.submitted,
            committed: self.committed,
            aborted: self.aborted,
            abort_pct: pct(self.aborted, done),
            throughput_tps: if sim_time == 0 { 0.0 } else { self.committed as f64 * 1000.0 / sim_time as f64 },
            lat_mean_ms: if self.latencies.is_empty() {
                0.0
            } else {
                self.latencies.iter().sum::<u64>() as f64 / self.latencies.len() as f64
            },
            lat_p50_ms: percentile(&self.latencies, 50.0),
            lat_p95_ms: percentile(&self.latencies, 95.0),
            lat_p99_ms: percentile(&self.latencies, 99.0),
            ro_round2_pct: pct(self.ro_round2, self.ro_done),
            msgs_per_txn: if self.ro_done > 0 && self.ro_done == done {
                self.ro_requests as f64 / self.ro_done as f64
            } else {
                msgs_per_txn
            },
            sim_time_ms: sim_time,
        }
    }

    fn merge(&mut self, o: &Acc) {
        self.submitted += o.submitted;
        self.committed += o.committed;
        self.aborted += o.aborted;
        self.latencies.extend(&o.latencies);
        self.ro_done += o.ro_done;
        self.ro_round2 += o.ro_round2;
        self.ro_requests += o.ro_requests;
    }
}

pub fn compute(trace: &Trace) -> Metrics {
    let mut kind_of: HashMap<TxnId, GenKind> = HashMap::new();
    let mut acc: BTreeMap<GenKind, Acc> = BTreeMap::new();
    let mut round2: HashMap<TxnId, bool> = HashMap::new();
    let (mut r1_sum, mut r1_n) = (0u64, 0u64);
    let mut sent = 0;
    let mut sim_time = 0;
    for rec in trace.events() {
        sim_time = sim_time.max(rec.t);
        match &rec.event {
            TraceEvent::TxnSubmitted { txn, txn_kind, .. } => {
                kind_of.insert(*txn, *txn_kind);
                acc.entry(*txn_kind).or_default().submitted += 1;
            }
            TraceEvent::Reply { txn, committed, latency_ms, .. } => {
                let Some(k) = kind_of.get(txn) else { continue };
                let a = acc.entry(*k).or_default();
                if *committed {
                    a.committed += 1;
                    a.latencies.push(*latency_ms);
                } else {
                    a.aborted += 1;
                }
            }
            TraceEvent::RoRound1 { latency_ms, .. } => {
                r1_sum += latency_ms;
                r1_n += 1;
            }
            TraceEvent::RoRound2 { txn, .. } => {
                round2.insert(*txn, true);
            }
            TraceEvent::RoDone { txn, ok, messages, latency_ms, .. } => {
                let a = acc.entry(GenKind::ReadOnly).or_default();
                a.ro_done += 1;
                a.ro_requests += u64::from(*messages);
                if round2.contains_key(txn) {
                    a.ro_round2 += 1;
                }
                if *ok {
                    a.committed += 1;
                    a.latencies.push(*latency_ms);
                } else {
                    a.aborted += 1;
                }
            }
            TraceEvent::NetStats { sent: s, .. } => sent = *s,
            _ => {}
        }
    }
    let done: u64 = acc.values().map(|a| a.committed + a.aborted).sum();
    let per_txn = if done == 0 { 0.0 } else { sent as f64 / done as f64 };
    let mut all = Acc::default();
    let mut rows = Vec::new();
    for k in KINDS {
        let a = acc.remove(&k).unwrap_or_default();
        all.merge(&a);
        rows.push(a.finish(kind_name(k), sim_time, per_txn));
    }
    all.ro_done = 0;
    let mut total = all.finish("all", sim_time, per_txn);
    total.ro_round2_pct = rows[2].ro_round2_pct;
    rows.push(total);
    Metrics { rows, ro_round1_lat_mean_ms: if r1_n == 0 { 0.0 } else { r1_sum as f64 / r1_n as f64 } }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 95.0), 95);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
    }

    #[test]
    fn header_matches_row_width() {
        let csv = Metrics { rows: vec![KindMetrics::default()], ..Default::default() }.to_csv();
        let mut lines = csv.lines();
        let head = lines.next().unwrap().split(',').count();
        assert_eq!(lines.next().unwrap().split(',').count(), head);
    }
}
