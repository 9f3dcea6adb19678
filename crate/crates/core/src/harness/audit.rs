//! Post-hoc auditors. Each check reads only the trace.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::Serialize;

use super::oracle::{build_sg, check_acyclic, CycleWitness, Graph, History, OracleError};
use super::trace::{Trace, TraceEvent};
use crate::crypto::{Digest, NodeId};
use crate::twopc::Decision;
use crate::types::{BatchId, PartitionId, TxnId};
use crate::workload::GenKind;

pub const SERIALIZABILITY: &str = "serializability";
pub const SAFETY: &str = "safety";
pub const VALIDITY: &str = "validity";
pub const BATCH_ORDER: &str = "batch_order";
pub const ATOMICITY: &str = "atomicity";
pub const COMMIT_ORDER: &str = "commit_order";
pub const CD_VECTOR: &str = "cd_vector";
pub const TWO_ROUND: &str = "two_round";
pub const RO_RECHECK: &str = "ro_recheck";
pub const NON_INTERFERENCE: &str = "non_interference";
pub const COMMIT_FREEDOM: &str = "commit_freedom";
pub const ABORT_REASON: &str = "abort_reason";

pub const CHECKS: &[&str] = &[
    SERIALIZABILITY,
    SAFETY,
    VALIDITY,
    BATCH_ORDER,
    ATOMICITY,
    COMMIT_ORDER,
    CD_VECTOR,
    TWO_ROUND,
    RO_RECHECK,
    NON_INTERFERENCE,
    COMMIT_FREEDOM,
    ABORT_REASON,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub check: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
    pub cycle: Option<CycleWitness>,
    pub committed: usize,
    pub sg_edges: usize,
    pub ro_done: usize,
    pub ro_round2: usize,
    /// Read-write aborts whose blamed transaction is read-only.
    pub ro_attributed_aborts: usize,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, check: &str) -> usize {
        self.violations.iter().filter(|v| v.check == check).count()
    }

    pub fn is_clean(&self, check: &str) -> bool {
        self.count(check) == 0
    }
}

struct BatchRec<'a> {
    seq: u64,
    index: BatchId,
    digest: Digest,
    lce: BatchId,
    cd: &'a [BatchId],
    prepared: &'a [TxnId],
    committed: Vec<(TxnId, BatchId, Decision)>,
    local: &'a [TxnId],
}

/// Runs every check.
pub fn audit(trace: &Trace) -> Result<AuditReport, OracleError> {
    let mut violations = Vec::new();
    let mut bad = |check: &'static str, detail: String| violations.push(Violation { check, detail });

    let Some(TraceEvent::Header { faulty, n_partitions, .. }) = trace.records.first().map(|r| &r.event) else {
        return Err(OracleError::IncompleteTrace("missing header".into()));
    };
    let faulty: HashSet<NodeId> = faulty.iter().copied().collect();
    let n_partitions = *n_partitions;

    let mut kinds: HashMap<TxnId, (GenKind, Option<PartitionId>)> = HashMap::new();
    let mut batches: BTreeMap<PartitionId, Vec<BatchRec>> = BTreeMap::new();
    let mut applied: BTreeMap<(PartitionId, BatchId), BTreeMap<Digest, Vec<NodeId>>> = BTreeMap::new();
    let mut decided: HashMap<TxnId, (u64, Decision, BTreeMap<PartitionId, BatchId>)> = HashMap::new();
    let mut ro_rounds: HashMap<TxnId, (usize, usize, usize)> = HashMap::new();
    let mut ro_ids_in_protocol = 0;
    for rec in trace.events() {
        match &rec.event {
            TraceEvent::TxnSubmitted { txn, txn_kind, coordinator, .. } => {
                kinds.insert(*txn, (*txn_kind, *coordinator));
            }
            TraceEvent::BatchCertified { partition, index, digest, lce, cd_vector, local, prepared, committed, .. } => {
                batches.entry(*partition).or_default().push(BatchRec {
                    seq: rec.seq,
                    index: *index,
                    digest: *digest,
                    lce: *lce,
                    cd: cd_vector,
                    prepared,
                    committed: committed.iter().map(|d| (d.txn, d.prepare_batch, d.decision)).collect(),
                    local,
                });
            }
            TraceEvent::ReplicaApplied { node, partition, index, digest } => {
                if !faulty.contains(node) {
                    applied.entry((*partition, *index)).or_default().entry(*digest).or_default().push(*node);
                }
            }
            TraceEvent::ReplicaStuck { node, partition, index, error } => {
                if !faulty.contains(node) {
                    bad(VALIDITY, format!("honest {node} could not apply {partition}/{index}: {error}"));
                }
            }
            TraceEvent::CommitDecided { txn, decision, votes, .. } => {
                let prep = votes.iter().map(|v| (v.partition, v.prepare_batch)).collect();
                decided.insert(*txn, (rec.seq, *decision, prep));
            }
            TraceEvent::Reply { txn, committed: false, reason: None, .. } => {
                bad(ABORT_REASON, format!("{txn} aborted without a reason"));
            }
            TraceEvent::RoRound1 { txn, .. } => ro_rounds.entry(*txn).or_default().0 += 1,
            TraceEvent::RoRound2 { txn, unsatisfied, .. } => {
                let e = ro_rounds.entry(*txn).or_default();
                e.1 += 1;
                e.2 = unsatisfied.len();
            }
            TraceEvent::NetStats { ro_ids_in_protocol: n, .. } => ro_ids_in_protocol = *n,
            _ => {}
        }
    }
    let ro_ids: HashSet<TxnId> = kinds
        .iter()
        .filter(|(_, (k, coord))| *k == GenKind::ReadOnly && coord.is_none())
        .map(|(t, _)| *t)
        .collect();

    // safety: honest replicas agree on every index
    for ((p, index), digests) in &applied {
        if digests.len() > 1 {
            let who: Vec<String> = digests.iter().map(|(d, ns)| format!("{}..:{ns:?}", &d.to_hex()[..8])).collect();
            bad(SAFETY, format!("{p}/{index}: honest replicas hold different batches {}", who.join(" ")));
        }
    }
    for (p, bs) in &batches {
        for b in bs {
            if let Some(ds) = applied.get(&(*p, b.index)) {
                if !ds.contains_key(&b.digest) {
                    bad(SAFETY, format!("{p}/{}: certified digest not held by any honest replica", b.index));
                }
            }
        }
    }

    // batch structure: dense log, lce and cd monotone, groups drain oldest first
    let mut commit_batches: HashMap<TxnId, Vec<(PartitionId, BatchId, u64)>> = HashMap::new();
    let mut prepared_at: HashMap<TxnId, Vec<(PartitionId, u64)>> = HashMap::new();
    let mut cd_of: HashMap<(PartitionId, BatchId), &[BatchId]> = HashMap::new();
    let mut drained_decision: HashMap<TxnId, Vec<(PartitionId, Decision)>> = HashMap::new();
    for (p, bs) in &batches {
        let mut groups: BTreeSet<BatchId> = BTreeSet::new();
        let mut prev: Option<&BatchRec> = None;
        for b in bs {
            cd_of.insert((*p, b.index), b.cd);
            let expected = prev.map_or(0, |q| q.index + 1);
            if b.index != expected {
                bad(BATCH_ORDER, format!("{p}: batch {} follows {}", b.index, expected - 1));
            }
            if b.cd.len() != n_partitions || b.cd.get(p.index()) != Some(&b.index) {
                bad(BATCH_ORDER, format!("{p}/{}: own CD entry is not the batch index", b.index));
            }
            if let Some(q) = prev {
                if b.lce < q.lce {
                    bad(BATCH_ORDER, format!("{p}/{}: lce went from {} to {}", b.index, q.lce, b.lce));
                }
                if b.cd.iter().zip(q.cd).any(|(x, y)| x < y) {
                    bad(CD_VECTOR, format!("{p}/{}: CD vector {:?} below previous {:?}", b.index, b.cd, q.cd));
                }
            }
            let drained: BTreeSet<BatchId> = b.committed.iter().map(|(_, pb, _)| *pb).collect();
            match drained.len() {
                0 => {
                    if prev.is_some_and(|q| q.lce != b.lce) || (prev.is_none() && b.lce != -1) {
                        bad(BATCH_ORDER, format!("{p}/{}: lce changed without a drained group", b.index));
                    }
                }
                1 => {
                    let g = *drained.first().expect("one group");
                    if groups.first() != Some(&g) {
                        bad(BATCH_ORDER, format!("{p}/{}: drained group {g} but oldest pending is {:?}", b.index, groups.first()));
                    }
                    groups.remove(&g);
                    if b.lce != g {
                        bad(BATCH_ORDER, format!("{p}/{}: lce {} after draining group {g}", b.index, b.lce));
                    }
                }
                _ => bad(BATCH_ORDER, format!("{p}/{}: drained several groups {drained:?}", b.index)),
            }
            if !b.prepared.is_empty() {
                groups.insert(b.index);
            }
            for t in b.prepared {
                prepared_at.entry(*t).or_default().push((*p, b.seq));
            }
            for t in b.local {
                commit_batches.entry(*t).or_default().push((*p, b.index, b.seq));
            }
            for (t, _, d) in &b.committed {
                drained_decision.entry(*t).or_default().push((*p, *d));
                if *d == Decision::Commit {
                    commit_batches.entry(*t).or_default().push((*p, b.index, b.seq));
                }
            }
            prev = Some(b);
        }
    }

    // atomicity: every drain agrees with the decision, and commits follow
    // prepares at every accessed partition
    for (t, drains) in &drained_decision {
        match decided.get(t) {
            None => bad(ATOMICITY, format!("{t} drained without a coordinator decision")),
            Some((_, d, votes)) => {
                for (p, got) in drains {
                    if got != d {
                        bad(ATOMICITY, format!("{t} drained as {got:?} at {p} but decided {d:?}"));
                    }
                }
                if *d == Decision::Commit {
                    let first_commit = commit_batches.get(t).and_then(|v| v.iter().map(|c| c.2).min());
                    for p in votes.keys() {
                        let prepared = prepared_at.get(t).and_then(|v| v.iter().find(|(q, _)| q == p)).map(|x| x.1);
                        match (prepared, first_commit) {
                            (Some(ps), Some(cs)) if ps < cs => {}
                            (_, None) => {}
                            _ => bad(ATOMICITY, format!("{t} committed before it was prepared at {p}")),
                        }
                    }
                }
            }
        }
    }

    // serializability
    let history = History::from_trace(trace)?;
    let graph = build_sg(&history)?;
    let (committed, sg_edges) = (history.txns.len(), graph.edges.len());
    let cycle = check_acyclic(&graph);
    if let Some(w) = &cycle {
        bad(SERIALIZABILITY, format!("cycle {w}"));
    }

    // commit points and CD dependencies along conflict edges
    let tcp = |t: &TxnId| -> Option<u64> {
        match decided.get(t) {
            Some((seq, Decision::Commit, _)) => Some(*seq),
            Some(_) => None,
            None => commit_batches.get(t).and_then(|v| v.first()).map(|c| c.2),
        }
    };
    audit_edges(&graph, &history, &decided, &commit_batches, &cd_of, tcp, &mut bad);

    // read-only transactions
    let (mut ro_done, mut ro_round2, mut ro_attributed_aborts) = (0, 0, 0);
    for rec in trace.events() {
        if let TraceEvent::RoDone { txn, ok, rounds, recheck, stats, messages, .. } = &rec.event {
            ro_done += 1;
            let (r1, r2, unsatisfied) = ro_rounds.get(txn).copied().unwrap_or_default();
            if r2 > 0 {
                ro_round2 += 1;
            }
            if !ok {
                bad(TWO_ROUND, format!("{txn} did not complete"));
                continue;
            }
            if *rounds > 2 || r1 != 1 || r2 > 1 {
                bad(TWO_ROUND, format!("{txn} took {rounds} rounds ({r1} first, {r2} second round events)"));
            }
            if !recheck.is_empty() {
                bad(RO_RECHECK, format!("{txn} final view fails the dependency check: {recheck:?}"));
            }
            let parts = trace_partitions(trace, *txn);
            let expected = stats.round1_requests + stats.round2_requests + stats.retries;
            if *messages != expected || stats.round1_requests as usize != parts || stats.round2_requests as usize != unsatisfied {
                bad(
                    COMMIT_FREEDOM,
                    format!(
                        "{txn}: {messages} requests, expected {parts} + {unsatisfied} + {} retries",
                        stats.retries
                    ),
                );
            }
        }
    }
    if ro_ids_in_protocol != 0 {
        bad(COMMIT_FREEDOM, format!("{ro_ids_in_protocol} consensus or commit messages carry read-only ids"));
    }
    for rec in trace.events() {
        if let TraceEvent::BatchCertified { partition, index, local, prepared, committed, rejected, decisions, .. } = &rec.event {
            let ids = local
                .iter()
                .chain(prepared)
                .chain(decisions)
                .chain(committed.iter().map(|d| &d.txn))
                .chain(rejected.iter().map(|r| &r.txn));
            for t in ids {
                if ro_ids.contains(t) {
                    bad(NON_INTERFERENCE, format!("read-only {t} appears in {partition}/{index}"));
                }
            }
            for r in rejected {
                if r.reason.blamed_txn().is_some_and(|b| ro_ids.contains(&b)) {
                    ro_attributed_aborts += 1;
                    bad(NON_INTERFERENCE, format!("{} aborted at {partition}/{index} blaming read-only txn", r.txn));
                }
            }
        }
    }
    Ok(AuditReport { violations, cycle, committed, sg_edges, ro_done, ro_round2, ro_attributed_aborts })
}

fn trace_partitions(trace: &Trace, txn: TxnId) -> usize {
    trace
        .events()
        .find_map(|r| match &r.event {
            TraceEvent::TxnSubmitted { txn: t, partitions, .. } if *t == txn => Some(partitions.len()),
            _ => None,
        })
        .unwrap_or(0)
}

#[allow(clippy::too_many_arguments)]
fn audit_edges(
    graph: &Graph,
    history: &History,
    decided: &HashMap<TxnId, (u64, Decision, BTreeMap<PartitionId, BatchId>)>,
    commit_batches: &HashMap<TxnId, Vec<(PartitionId, BatchId, u64)>>,
    cd_of: &HashMap<(PartitionId, BatchId), &[BatchId]>,
    tcp: impl Fn(&TxnId) -> Option<u64>,
    bad: &mut impl FnMut(&'static str, String),
) {
    for e in &graph.edges {
        let ro = |t: &TxnId| history.txns.get(t).is_some_and(|c| c.read_only);
        if ro(&e.from) || ro(&e.to) {
            continue;
        }
        match (tcp(&e.from), tcp(&e.to)) {
            (Some(a), Some(b)) if a < b => {}
            (a, b) => bad(COMMIT_ORDER, format!("{} -{}({})-> {} but commit points {a:?} / {b:?}", e.from, e.kind, e.key, e.to)),
        }
        let Some((_, Decision::Commit, prepares)) = decided.get(&e.from) else { continue };
        for (q, index, _) in commit_batches.get(&e.to).into_iter().flatten() {
            let Some(cd) = cd_of.get(&(*q, *index)) else { continue };
            for (p, pb) in prepares {
                if cd.get(p.index()).is_none_or(|v| v < pb) {
                    bad(
                        CD_VECTOR,
                        format!("{} -{}-> {}: CD of {q}/{index} misses prepare {p}/{pb}", e.from, e.kind, e.to),
                    );
                }
            }
        }
    }
}
