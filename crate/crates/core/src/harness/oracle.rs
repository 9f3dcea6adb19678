//! Serializability-graph oracle.
//!
//! Vertices are committed transactions, read-only ones included. A write's
//! version is the index of the batch that applied it at the key's
//! partition; the initial version of every key is `-1`. Edges:
//!
//! - `ww`: writer of a version to the writer of the next version,
//! - `wr`: writer of the version read to the reader,
//! - `rw`: reader to the writer of the next version after the one read.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::trace::{Trace, TraceEvent};
use crate::twopc::Decision;
use crate::types::{BatchId, Key, PartitionId, TxnId, NO_BATCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Ww,
    Wr,
    Rw,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Ww => "ww",
            EdgeKind::Wr => "wr",
            EdgeKind::Rw => "rw",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: TxnId,
    pub to: TxnId,
    pub kind: EdgeKind,
    pub key: Key,
}

/// A committed transaction as the oracle sees it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Committed {
    pub read_only: bool,
    pub reads: Vec<(Key, BatchId)>,
    pub writes: Vec<(Key, BatchId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),
}

/// Committed transactions keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct History {
    pub txns: BTreeMap<TxnId, Committed>,
}

impl History {
    /// Extracts committed transactions from a trace.
    pub fn from_trace(trace: &Trace) -> Result<History, OracleError> {
        struct Submitted {
            reads: Vec<(Key, BatchId)>,
            writes: Vec<(PartitionId, Key)>,
        }
        let mut submitted: HashMap<TxnId, Submitted> = HashMap::new();
        let mut h = History::default();
        let commit_at = |h: &mut History, t: TxnId, p: PartitionId, index: BatchId, submitted: &HashMap<TxnId, Submitted>| {
            let s = submitted
                .get(&t)
                .ok_or_else(|| OracleError::IncompleteTrace(format!("txn {t} committed but never submitted")))?;
            let e = h.txns.entry(t).or_insert_with(|| Committed { reads: s.reads.clone(), ..Default::default() });
            e.writes.extend(s.writes.iter().filter(|(wp, _)| *wp == p).map(|(_, k)| (k.clone(), index)));
            Ok::<(), OracleError>(())
        };
        for rec in trace.events() {
            match &rec.event {
                TraceEvent::TxnSubmitted { txn, reads, writes, .. } => {
                    submitted.insert(
                        *txn,
                        Submitted {
                            reads: reads.iter().map(|r| (r.key.clone(), r.version)).collect(),
                            writes: writes.iter().map(|w| (w.partition, w.key.clone())).collect(),
                        },
                    );
                }
                TraceEvent::BatchCertified { partition, index, local, committed, .. } => {
                    for t in local {
                        commit_at(&mut h, *t, *partition, *index, &submitted)?;
                    }
                    for d in committed.iter().filter(|d| d.decision == Decision::Commit) {
                        commit_at(&mut h, d.txn, *partition, *index, &submitted)?;
                    }
                }
                TraceEvent::RoDone { txn, ok: true, reads, .. } => {
                    let reads = reads.iter().map(|r| (r.key.clone(), r.version)).collect();
                    h.txns.insert(*txn, Committed { read_only: true, reads, writes: Vec::new() });
                }
                _ => {}
            }
        }
        Ok(h)
    }
}

/// Directed conflict graph over committed transactions.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub nodes: BTreeSet<TxnId>,
    pub edges: BTreeSet<Edge>,
}

impl Graph {
    pub fn successors(&self) -> BTreeMap<TxnId, Vec<&Edge>> {
        let mut out: BTreeMap<TxnId, Vec<&Edge>> = self.nodes.iter().map(|n| (*n, Vec::new())).collect();
        for e in &self.edges {
            out.entry(e.from).or_default().push(e);
        }
        out
    }
}

/// Builds the serializability graph.
pub fn build_sg(h: &History) -> Result<Graph, OracleError> {
    // per key: version -> writer
    let mut writers: HashMap<&Key, BTreeMap<BatchId, TxnId>> = HashMap::new();
    for (t, c) in &h.txns {
        for (k, v) in &c.writes {
            if let Some(other) = writers.entry(k).or_default().insert(*v, *t) {
                return Err(OracleError::IncompleteTrace(format!("{other} and {t} both wrote {k} at version {v}")));
            }
        }
    }
    let mut g = Graph { nodes: h.txns.keys().copied().collect(), edges: BTreeSet::new() };
    let add = |g: &mut Graph, from: TxnId, to: TxnId, kind: EdgeKind, key: &Key| {
        if from != to {
            g.edges.insert(Edge { from, to, kind, key: key.clone() });
        }
    };
    for (k, vs) in &writers {
        let ordered: Vec<TxnId> = vs.values().copied().collect();
        for w in ordered.windows(2) {
            add(&mut g, w[0], w[1], EdgeKind::Ww, k);
        }
    }
    for (t, c) in &h.txns {
        for (k, v) in &c.reads {
            let vs = writers.get(k);
            if *v != NO_BATCH {
                match vs.and_then(|vs| vs.get(v)) {
                    Some(w) => add(&mut g, *w, *t, EdgeKind::Wr, k),
                    None => {
                        return Err(OracleError::IncompleteTrace(format!("{t} read {k} at version {v}, which no committed txn wrote")))
                    }
                }
            }
            if let Some((_, next)) = vs.and_then(|vs| vs.range(v + 1..).next()) {
                add(&mut g, *t, *next, EdgeKind::Rw, k);
            }
        }
    }
    Ok(g)
}

/// A cycle `txns[0] -> txns[1] -> ... -> txns[0]`, one edge per hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleWitness {
    pub txns: Vec<TxnId>,
    pub edges: Vec<Edge>,
}

impl fmt::Display for CycleWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.edges.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{} -{}({})->", e.from, e.kind, e.key)?;
        }
        if let Some(first) = self.txns.first() {
            write!(f, " {first}")?;
        }
        Ok(())
    }
}

/// Depth-first search for a cycle; `None` means acyclic.
pub fn check_acyclic(g: &Graph) -> Option<CycleWitness> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Grey,
        Black,
    }
    let succ = g.successors();
    let mut color: HashMap<TxnId, Color> = g.nodes.iter().map(|n| (*n, Color::White)).collect();
    for root in &g.nodes {
        if color[root] != Color::White {
            continue;
        }
        // stack of (node, next successor position); `path` holds the edge
        // used to reach each grey node but the root
        let mut stack: Vec<(TxnId, usize)> = vec![(*root, 0)];
        let mut path: Vec<&Edge> = Vec::new();
        color.insert(*root, Color::Grey);
        while let Some((node, pos)) = stack.last_mut() {
            let out = succ.get(node).map(Vec::as_slice).unwrap_or(&[]);
            if *pos == out.len() {
                color.insert(*node, Color::Black);
                stack.pop();
                path.pop();
                continue;
            }
            let e = out[*pos];
            *pos += 1;
            match color.get(&e.to).copied().unwrap_or(Color::Black) {
                Color::White => {
                    color.insert(e.to, Color::Grey);
                    stack.push((e.to, 0));
                    path.push(e);
                }
                Color::Grey => {
                    let start = stack.iter().position(|(n, _)| *n == e.to).expect("grey node is on the stack");
                    let mut edges: Vec<Edge> = path[start..].iter().map(|e| (*e).clone()).collect();
                    edges.push(e.clone());
                    let txns = edges.iter().map(|e| e.from).collect();
                    return Some(CycleWitness { txns, edges });
                }
                Color::Black => {}
            }
        }
    }
    None
}

/// Builds the graph from a trace and checks it.
pub fn check_trace(trace: &Trace) -> Result<Option<CycleWitness>, OracleError> {
    let h = History::from_trace(trace)?;
    Ok(check_acyclic(&build_sg(&h)?))
}
