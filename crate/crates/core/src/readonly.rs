//! Commit-free read-only transactions.
//!
//! Each batch carries a conflict-dependency (CD) vector: for every
//! partition, the newest prepare batch whose commit the batch's state
//! depends on, directly or transitively. A client reading several
//! partitions checks that every partition's snapshot already contains the
//! prepare groups the other snapshots depend on. If not, it asks the lagging
//! partition once more for the batch where the missing group committed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::Directory;
use crate::crypto::{Canonical, Encoder, NodeId, QuorumCertificate};
use crate::ledger::{BatchHeader, CommitRecord, Ledger};
use crate::merkle::{verify_proof, MerkleProof};
use crate::twopc::Decision;
use crate::types::{BatchId, Key, PartitionId, TxnId, Value, NO_BATCH};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CdVector(pub Vec<BatchId>);

impl CdVector {
    pub fn initial(n_partitions: usize) -> Self {
        CdVector(vec![NO_BATCH; n_partitions])
    }

    pub fn get(&self, p: PartitionId) -> BatchId {
        self.0.get(p.index()).copied().unwrap_or(NO_BATCH)
    }

    pub fn raise(&mut self, p: PartitionId, v: BatchId) {
        if let Some(e) = self.0.get_mut(p.index()) {
            *e = (*e).max(v);
        }
    }

    pub fn pairwise_max(&mut self, other: &CdVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = (*a).max(*b);
        }
    }

    /// Componentwise `self >= other`.
    pub fn dominates(&self, other: &CdVector) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a >= b)
    }
}

impl Canonical for CdVector {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.0.len() as u32);
        for v in &self.0 {
            enc.i64(*v);
        }
    }
}

/// CD vector of batch `index` at partition `own`: the previous vector raised
/// by every vote vector reported in the committed segment, with the own
/// entry set to `index`. Aborted records contribute nothing.
pub fn derive_dep_vector<'a>(
    prev: &CdVector,
    index: BatchId,
    own: PartitionId,
    committed: impl IntoIterator<Item = &'a CommitRecord>,
) -> CdVector {
    let mut v = prev.clone();
    for rec in committed {
        if rec.decision != Decision::Commit {
            continue;
        }
        for m in &rec.prepared {
            v.pairwise_max(&m.cd_vector);
            v.raise(m.partition, m.prepare_batch);
        }
    }
    if let Some(e) = v.0.get_mut(own.index()) {
        *e = index;
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnsatisfiedDependency {
    pub partition: PartitionId,
    pub required_prepare_batch: BatchId,
}

/// Checks every ordered pair of snapshots: the dependency of one on another
/// partition must not exceed that partition's LCE. Returns the violations,
/// keeping the largest requirement per partition; empty means satisfied.
pub fn verify_dependencies<'a>(headers: impl IntoIterator<Item = &'a BatchHeader> + Clone) -> Vec<UnsatisfiedDependency> {
    let mut need: BTreeMap<PartitionId, BatchId> = BTreeMap::new();
    for hi in headers.clone() {
        for hj in headers.clone() {
            if hi.partition == hj.partition {
                continue;
            }
            let dep = hi.cd_vector.get(hj.partition);
            if dep > hj.lce {
                let e = need.entry(hj.partition).or_insert(dep);
                *e = (*e).max(dep);
            }
        }
    }
    need.into_iter()
        .map(|(partition, required_prepare_batch)| UnsatisfiedDependency { partition, required_prepare_batch })
        .collect()
}

pub fn check_freshness(timestamp: u64, client_clock: u64, delta: u64) -> bool {
    timestamp.abs_diff(client_clock) <= delta
}

/// A server's answer to a read-only query.
#[derive(Debug, Clone)]
pub struct RoResponse {
    pub responder: NodeId,
    pub header: BatchHeader,
    pub certificate: QuorumCertificate,
    pub proof: MerkleProof,
}

impl RoResponse {
    /// Values and versions as proved; absent keys read as `(None, -1)`.
    pub fn reads(&self) -> Vec<(Key, Option<Value>, BatchId)> {
        self.proof
            .entries
            .iter()
            .map(|e| (e.key.clone(), e.value.clone(), e.version.unwrap_or(NO_BATCH)))
            .collect()
    }
}

impl Canonical for RoResponse {
    fn encode(&self, enc: &mut Encoder) {
        self.responder.encode(enc);
        self.header.encode(enc);
        self.certificate.encode(enc);
        self.proof.encode(enc);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoError {
    #[error("header certificate does not verify")]
    BadCertificate,
    #[error("merkle proof does not verify")]
    BadProof,
    #[error("response does not answer the query")]
    WrongAnswer,
    #[error("snapshot outside the freshness window")]
    Stale,
    #[error("no batch satisfies the dependency yet")]
    DependencyTimeout,
    #[error("responder has no certified batch")]
    NotReady,
    #[error("no answer before the client timeout")]
    Timeout,
}

/// Client-side acceptance test for one response.
pub fn verify_response(
    resp: &RoResponse,
    partition: PartitionId,
    keys: &[Key],
    required: Option<BatchId>,
    dir: &Directory,
    client_clock: u64,
    delta: u64,
) -> Result<(), RoError> {
    let cluster = dir.cluster(partition).ok_or(RoError::WrongAnswer)?;
    if resp.header.partition != partition {
        return Err(RoError::WrongAnswer);
    }
    if !resp.certificate.verify_claim(&resp.header.digest(), cluster.reply_quorum(), &cluster.keys) {
        return Err(RoError::BadCertificate);
    }
    if !verify_proof(&resp.proof, &resp.header, &resp.certificate, &cluster.keys, cluster.reply_quorum()) {
        return Err(RoError::BadProof);
    }
    if resp.proof.entries.len() != keys.len() || resp.proof.entries.iter().zip(keys).any(|(e, k)| &e.key != k) {
        return Err(RoError::WrongAnswer);
    }
    if let Some(p) = required {
        if resp.header.lce < p {
            return Err(RoError::WrongAnswer);
        }
    }
    if !check_freshness(resp.header.timestamp, client_clock, delta) {
        return Err(RoError::Stale);
    }
    Ok(())
}

/// Server side: which batch answers a query. `required` is a second-round
/// dependency; `None` asks for the newest batch. Only batches with a reply
/// certificate in `certified` qualify.
pub fn serve_target(ledger: &Ledger, required: Option<BatchId>, newest_certified: Option<BatchId>) -> Option<BatchId> {
    let newest = newest_certified?;
    match required {
        None => Some(newest),
        Some(p) => ledger.earliest_with_lce(p).filter(|b| *b <= newest),
    }
}

/// What the client wants sent next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoQuery {
    pub partition: PartitionId,
    pub keys: Vec<Key>,
    /// Second-round dependency, `None` in round one.
    pub required: Option<BatchId>,
    /// Retry counter for this partition and round; picks the replica.
    pub attempt: usize,
}

/// Round one or two view of one partition.
#[derive(Debug, Clone)]
pub struct AcceptedView {
    pub header: BatchHeader,
    pub reads: Vec<(Key, Option<Value>, BatchId)>,
    pub responder: NodeId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoStats {
    pub round1_requests: u32,
    pub round2_requests: u32,
    pub retries: u32,
    pub responses: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoStatus {
    Running,
    Done,
    Failed(PartitionId),
}

/// Client state machine for one read-only transaction.
#[derive(Debug, Clone)]
pub struct RoTxn {
    pub txn: TxnId,
    pub keys: BTreeMap<PartitionId, Vec<Key>>,
    pub round: u8,
    pub round1: BTreeMap<PartitionId, AcceptedView>,
    /// Views from round two, and from later rounds when those are enabled.
    pub round2: BTreeMap<PartitionId, AcceptedView>,
    pub unsatisfied: Vec<UnsatisfiedDependency>,
    outstanding: BTreeMap<PartitionId, RoQuery>,
    pub stats: RoStats,
    pub status: RoStatus,
    /// Replicas per cluster; bounds retries.
    max_attempts: usize,
    /// Rounds before the transaction completes regardless of the check:
    /// [`PROTOCOL_ROUNDS`] normally, 1 for the negative control that skips
    /// the check, more to keep re-checking after round two.
    max_rounds: u8,
}

/// A read-only transaction completes after at most this many rounds.
pub const PROTOCOL_ROUNDS: u8 = 2;

impl RoTxn {
    pub fn new(txn: TxnId, keys: BTreeMap<PartitionId, Vec<Key>>, max_attempts: usize, max_rounds: u8) -> Self {
        RoTxn {
            txn,
            keys,
            round: 1,
            round1: BTreeMap::new(),
            round2: BTreeMap::new(),
            unsatisfied: Vec::new(),
            outstanding: BTreeMap::new(),
            stats: RoStats::default(),
            status: RoStatus::Running,
            max_attempts,
            max_rounds: max_rounds.max(1),
        }
    }

    pub fn start(&mut self) -> Vec<RoQuery> {
        let qs: Vec<RoQuery> = self
            .keys
            .iter()
            .map(|(p, ks)| RoQuery { partition: *p, keys: ks.clone(), required: None, attempt: 0 })
            .collect();
        self.stats.round1_requests += qs.len() as u32;
        for q in &qs {
            self.outstanding.insert(q.partition, q.clone());
        }
        qs
    }

    pub fn is_outstanding(&self, partition: PartitionId, attempt: usize, round: u8) -> bool {
        round == self.round && self.outstanding.get(&partition).is_some_and(|q| q.attempt == attempt)
    }

    /// Feeds a verified response or a failure for the outstanding query on
    /// `partition`. Returns the queries to send next.
    pub fn on_result(&mut self, partition: PartitionId, result: Result<AcceptedView, RoError>) -> Vec<RoQuery> {
        let Some(q) = self.outstanding.get(&partition).cloned() else {
            return Vec::new();
        };
        match result {
            Ok(view) => {
                self.stats.responses += 1;
                self.outstanding.remove(&partition);
                let slot = if self.round == 1 { &mut self.round1 } else { &mut self.round2 };
                slot.insert(partition, view);
            }
            Err(_) => {
                if q.attempt + 1 >= self.max_attempts {
                    self.outstanding.clear();
                    self.status = RoStatus::Failed(partition);
                    return Vec::new();
                }
                self.stats.retries += 1;
                let retry = RoQuery { attempt: q.attempt + 1, ..q };
                self.outstanding.insert(partition, retry.clone());
                return vec![retry];
            }
        }
        if !self.outstanding.is_empty() {
            return Vec::new();
        }
        if self.round >= self.max_rounds {
            self.status = RoStatus::Done;
            return Vec::new();
        }
        let unsatisfied = if self.round == 1 {
            verify_dependencies(self.round1.values().map(|v| &v.header))
        } else {
            self.recheck()
        };
        if unsatisfied.is_empty() {
            self.status = RoStatus::Done;
            return Vec::new();
        }
        self.unsatisfied = unsatisfied;
        self.round += 1;
        let qs: Vec<RoQuery> = self
            .unsatisfied
            .iter()
            .map(|u| RoQuery {
                partition: u.partition,
                keys: self.keys[&u.partition].clone(),
                required: Some(u.required_prepare_batch),
                attempt: 0,
            })
            .collect();
        self.stats.round2_requests += qs.len() as u32;
        for q in &qs {
            self.outstanding.insert(q.partition, q.clone());
        }
        qs
    }

    pub fn rounds(&self) -> u8 {
        self.round
    }

    /// Round-one views with round-two replacements applied.
    pub fn final_views(&self) -> BTreeMap<PartitionId, &AcceptedView> {
        let mut out: BTreeMap<PartitionId, &AcceptedView> = self.round1.iter().map(|(p, v)| (*p, v)).collect();
        for (p, v) in &self.round2 {
            out.insert(*p, v);
        }
        out
    }

    /// Re-runs the dependency check over the final combined view.
    pub fn recheck(&self) -> Vec<UnsatisfiedDependency> {
        let views = self.final_views();
        verify_dependencies(views.values().map(|v| &v.header))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Digest, QuorumCertificate};
    use crate::twopc::{PreparedMessage, Vote};

    fn header(p: u16, index: BatchId, lce: BatchId, cd: &[BatchId]) -> BatchHeader {
        BatchHeader {
            partition: PartitionId(p),
            index,
            lce,
            cd_vector: CdVector(cd.to_vec()),
            merkle_root: Digest::default(),
            timestamp: 0,
        }
    }

    fn vote(p: u16, batch: BatchId, cd: &[BatchId]) -> PreparedMessage {
        PreparedMessage {
            txn: TxnId(0),
            txn_digest: Digest::default(),
            partition: PartitionId(p),
            vote: Vote::Yes,
            prepare_batch: batch,
            cd_vector: CdVector(cd.to_vec()),
            certificate: QuorumCertificate { digest: Digest::default(), signatures: vec![], threshold: 0 },
        }
    }

    fn rec(decision: Decision, votes: Vec<PreparedMessage>) -> CommitRecord {
        CommitRecord { txn: TxnId(0), txn_digest: Digest::default(), decision, prepared: votes }
    }

    #[test]
    fn worked_example_vector_at_x() {
        // X prepared in b0 with [0,-1]; Y prepared in b5 with [-1,5]
        let r = rec(Decision::Commit, vec![vote(0, 0, &[0, -1]), vote(1, 5, &[-1, 5])]);
        let v = derive_dep_vector(&CdVector(vec![1, -1]), 2, PartitionId(0), [&r]);
        assert_eq!(v.0, vec![2, 5]);
        let v = derive_dep_vector(&CdVector(vec![-1, 7]), 8, PartitionId(1), [&r]);
        assert_eq!(v.0, vec![0, 8]);
    }

    #[test]
    fn empty_segment_bumps_self() {
        let v = derive_dep_vector(&CdVector(vec![3, 4, -1]), 9, PartitionId(2), []);
        assert_eq!(v.0, vec![3, 4, 9]);
    }

    #[test]
    fn latest_remote_batch_wins() {
        let a = rec(Decision::Commit, vec![vote(1, 3, &[-1, 3])]);
        let b = rec(Decision::Commit, vec![vote(1, 7, &[-1, 7])]);
        let v = derive_dep_vector(&CdVector::initial(2), 0, PartitionId(0), [&a, &b]);
        assert_eq!(v.get(PartitionId(1)), 7);
    }

    #[test]
    fn aborted_records_add_nothing() {
        let a = rec(Decision::Abort, vec![vote(1, 3, &[-1, 3])]);
        let v = derive_dep_vector(&CdVector::initial(2), 4, PartitionId(0), [&a]);
        assert_eq!(v.0, vec![4, -1]);
    }

    #[test]
    fn motivating_example_is_unsatisfied() {
        let x = header(0, 6, 4, &[6, 4]);
        let y = header(1, 3, 2, &[-1, 3]);
        assert_eq!(
            verify_dependencies([&x, &y]),
            vec![UnsatisfiedDependency { partition: PartitionId(1), required_prepare_batch: 4 }]
        );
    }

    #[test]
    fn single_partition_and_fresh_system_satisfied() {
        let x = header(0, 6, 4, &[6, 9]);
        assert!(verify_dependencies([&x]).is_empty());
        let a = header(0, 0, -1, &[0, -1, -1]);
        let b = header(1, 0, -1, &[-1, 0, -1]);
        let c = header(2, 0, -1, &[-1, -1, 0]);
        assert!(verify_dependencies([&a, &b, &c]).is_empty());
    }

    #[test]
    fn max_requirement_kept_per_partition() {
        let a = header(0, 5, 0, &[5, -1, 3]);
        let b = header(1, 5, 0, &[-1, 5, 6]);
        let c = header(2, 5, 2, &[-1, -1, 5]);
        let u = verify_dependencies([&a, &b, &c]);
        assert_eq!(u, vec![UnsatisfiedDependency { partition: PartitionId(2), required_prepare_batch: 6 }]);
    }

    #[test]
    fn freshness_window() {
        assert!(check_freshness(1000, 1000, 30_000));
        assert!(check_freshness(1000, 31_000, 30_000));
        assert!(!check_freshness(1000, 31_001, 30_000));
        assert!(!check_freshness(40_000, 1000, 30_000));
    }

    fn view(h: BatchHeader) -> AcceptedView {
        AcceptedView { header: h, reads: vec![], responder: NodeId(0) }
    }

    #[test]
    fn client_runs_second_round_only_for_lagging_partition() {
        let keys: BTreeMap<_, _> = [(PartitionId(0), vec![Key::from("x")]), (PartitionId(1), vec![Key::from("y")])].into();
        let mut ro = RoTxn::new(TxnId(5), keys, 4, PROTOCOL_ROUNDS);
        assert_eq!(ro.start().len(), 2);
        assert!(ro.on_result(PartitionId(0), Ok(view(header(0, 6, 4, &[6, 4])))).is_empty());
        let next = ro.on_result(PartitionId(1), Ok(view(header(1, 3, 2, &[-1, 3]))));
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].required, Some(4));
        assert_eq!(ro.round, 2);
        ro.on_result(PartitionId(1), Ok(view(header(1, 5, 4, &[3, 5]))));
        assert_eq!(ro.status, RoStatus::Done);
        assert_eq!(ro.stats.round1_requests + ro.stats.round2_requests, 3);
        assert!(ro.recheck().is_empty());
    }

    #[test]
    fn mutant_client_stops_after_round_one() {
        let keys: BTreeMap<_, _> = [(PartitionId(0), vec![]), (PartitionId(1), vec![])].into();
        let mut ro = RoTxn::new(TxnId(5), keys, 4, 1);
        ro.start();
        ro.on_result(PartitionId(0), Ok(view(header(0, 6, 4, &[6, 4]))));
        ro.on_result(PartitionId(1), Ok(view(header(1, 3, 2, &[-1, 3]))));
        assert_eq!(ro.status, RoStatus::Done);
        assert_eq!(ro.rounds(), 1);
        assert!(!ro.recheck().is_empty());
    }

    #[test]
    fn retries_rotate_then_give_up() {
        let keys: BTreeMap<_, _> = [(PartitionId(0), vec![])].into();
        let mut ro = RoTxn::new(TxnId(5), keys, 2, PROTOCOL_ROUNDS);
        ro.start();
        let r = ro.on_result(PartitionId(0), Err(RoError::BadProof));
        assert_eq!(r[0].attempt, 1);
        assert!(ro.on_result(PartitionId(0), Err(RoError::BadProof)).is_empty());
        assert_eq!(ro.status, RoStatus::Failed(PartitionId(0)));
        assert_eq!(ro.stats.retries, 1);
    }
}
