//! Optimistic conflict detection for admitting transactions into a batch.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{Canonical, Encoder, NodeId};
use crate::types::{BatchId, Key, PartitionId, TxnId, Value, NO_BATCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnKind {
    Local,
    Distributed,
    ReadOnly,
}

impl TxnKind {
    fn tag(self) -> u8 {
        match self {
            TxnKind::Local => 0,
            TxnKind::Distributed => 1,
            TxnKind::ReadOnly => 2,
        }
    }
}

/// A value observed by a transaction. `version` is the batch that wrote it,
/// or [`NO_BATCH`] for a key that had never been written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadEntry {
    pub partition: PartitionId,
    pub key: Key,
    pub value: Option<Value>,
    pub version: BatchId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteEntry {
    pub partition: PartitionId,
    pub key: Key,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxnId,
    pub kind: TxnKind,
    pub client: NodeId,
    pub coordinator: Option<PartitionId>,
    /// Sorted and deduplicated.
    pub partitions: Vec<PartitionId>,
    pub reads: Vec<ReadEntry>,
    pub writes: Vec<WriteEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MalformedTxn {
    #[error("local transaction spans {0} partitions")]
    LocalSpan(usize),
    #[error("distributed transaction spans {0} partitions")]
    DistributedSpan(usize),
    #[error("read-only transaction has writes")]
    ReadOnlyWrites,
    #[error("coordinator missing or not among accessed partitions")]
    Coordinator,
    #[error("operation on partition {0} outside the accessed set")]
    StrayOperation(PartitionId),
}

impl Transaction {
    pub fn validate(&self) -> Result<(), MalformedTxn> {
        let span = self.partitions.len();
        match self.kind {
            TxnKind::Local if span != 1 => return Err(MalformedTxn::LocalSpan(span)),
            TxnKind::Distributed if span < 2 => return Err(MalformedTxn::DistributedSpan(span)),
            TxnKind::ReadOnly if !self.writes.is_empty() => return Err(MalformedTxn::ReadOnlyWrites),
            _ => {}
        }
        if self.kind == TxnKind::Distributed {
            match self.coordinator {
                Some(c) if self.partitions.contains(&c) => {}
                _ => return Err(MalformedTxn::Coordinator),
            }
        }
        let stray = self
            .reads
            .iter()
            .map(|r| r.partition)
            .chain(self.writes.iter().map(|w| w.partition))
            .find(|p| self.partitions.binary_search(p).is_err());
        match stray {
            Some(p) => Err(MalformedTxn::StrayOperation(p)),
            None => Ok(()),
        }
    }

    pub fn reads_at(&self, p: PartitionId) -> impl Iterator<Item = &ReadEntry> {
        self.reads.iter().filter(move |r| r.partition == p)
    }

    pub fn writes_at(&self, p: PartitionId) -> impl Iterator<Item = &WriteEntry> {
        self.writes.iter().filter(move |w| w.partition == p)
    }

    pub fn touches(&self, p: PartitionId) -> bool {
        self.partitions.binary_search(&p).is_ok()
    }
}

impl Canonical for ReadEntry {
    fn encode(&self, enc: &mut Encoder) {
        self.partition.encode(enc);
        self.key.encode(enc);
        enc.option(self.value.as_ref());
        enc.i64(self.version);
    }
}

impl Canonical for WriteEntry {
    fn encode(&self, enc: &mut Encoder) {
        self.partition.encode(enc);
        self.key.encode(enc);
        self.value.encode(enc);
    }
}

impl Canonical for Transaction {
    fn encode(&self, enc: &mut Encoder) {
        self.id.encode(enc);
        enc.u8(self.kind.tag());
        self.client.encode(enc);
        enc.option(self.coordinator.as_ref());
        enc.seq(&self.partitions);
        enc.seq(&self.reads);
        enc.seq(&self.writes);
    }
}

/// Conflict types from `a` to `b`, following the serializability-graph
/// definitions: `wr` when `b` reads something `a` writes, `rw` when `b`
/// overwrites something `a` read, `ww` when both write the same key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConflictSet {
    pub wr: bool,
    pub rw: bool,
    pub ww: bool,
}

impl ConflictSet {
    pub fn is_empty(&self) -> bool {
        !(self.wr || self.rw || self.ww)
    }
}

pub fn conflicts(a: &Transaction, b: &Transaction) -> ConflictSet {
    let same = |p: PartitionId, k: &Key, q: PartitionId, l: &Key| p == q && k == l;
    let a_writes = |p, k| a.writes.iter().any(|w| same(w.partition, &w.key, p, k));
    ConflictSet {
        wr: b.reads.iter().any(|r| a_writes(r.partition, &r.key)),
        rw: a.reads.iter().any(|r| b.writes.iter().any(|w| same(w.partition, &w.key, r.partition, &r.key))),
        ww: b.writes.iter().any(|w| a_writes(w.partition, &w.key)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    StaleRead { key: Key },
    ConflictsInProgress { txn: TxnId },
    ConflictsPrepared { txn: TxnId },
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }
}

/// Why a transaction did not commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum AbortReason {
    StaleRead { key: Key },
    ConflictsInProgress { txn: TxnId },
    ConflictsPrepared { txn: TxnId },
    /// A participant voted no; `partition` is the first such voter.
    NegativeVote { partition: PartitionId },
    /// The batch carrying the transaction failed agreement.
    AgreementFailed,
}

impl AbortReason {
    /// The transaction blamed for the abort, when there is one.
    pub fn blamed_txn(&self) -> Option<TxnId> {
        match self {
            AbortReason::ConflictsInProgress { txn } | AbortReason::ConflictsPrepared { txn } => Some(*txn),
            _ => None,
        }
    }
}

impl From<Verdict> for Option<AbortReason> {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Ok => None,
            Verdict::StaleRead { key } => Some(AbortReason::StaleRead { key }),
            Verdict::ConflictsInProgress { txn } => Some(AbortReason::ConflictsInProgress { txn }),
            Verdict::ConflictsPrepared { txn } => Some(AbortReason::ConflictsPrepared { txn }),
        }
    }
}

impl Canonical for AbortReason {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            AbortReason::StaleRead { key } => {
                enc.u8(0);
                key.encode(enc);
            }
            AbortReason::ConflictsInProgress { txn } => {
                enc.u8(1);
                txn.encode(enc);
            }
            AbortReason::ConflictsPrepared { txn } => {
                enc.u8(2);
                txn.encode(enc);
            }
            AbortReason::NegativeVote { partition } => {
                enc.u8(3);
                partition.encode(enc);
            }
            AbortReason::AgreementFailed => {
                enc.u8(4);
            }
        }
    }
}

/// Readers and writers of each key at one partition, for a set of
/// transactions that have not yet committed.
#[derive(Debug, Clone, Default)]
pub struct KeyIndex {
    readers: HashMap<Key, Vec<TxnId>>,
    writers: HashMap<Key, Vec<TxnId>>,
}

impl KeyIndex {
    pub fn insert(&mut self, txn: &Transaction, p: PartitionId) {
        for r in txn.reads_at(p) {
            self.readers.entry(r.key.clone()).or_default().push(txn.id);
        }
        for w in txn.writes_at(p) {
            self.writers.entry(w.key.clone()).or_default().push(txn.id);
        }
    }

    pub fn remove(&mut self, txn: &Transaction, p: PartitionId) {
        fn drop_from(map: &mut HashMap<Key, Vec<TxnId>>, key: &Key, id: TxnId) {
            if let Some(ids) = map.get_mut(key) {
                ids.retain(|t| *t != id);
                if ids.is_empty() {
                    map.remove(key);
                }
            }
        }
        for r in txn.reads_at(p) {
            drop_from(&mut self.readers, &r.key, txn.id);
        }
        for w in txn.writes_at(p) {
            drop_from(&mut self.writers, &w.key, txn.id);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.readers.is_empty() && self.writers.is_empty()
    }

    /// First indexed transaction that conflicts with `txn` at `p` in either
    /// direction.
    pub fn conflicting(&self, txn: &Transaction, p: PartitionId) -> Option<TxnId> {
        let other = |ids: Option<&Vec<TxnId>>| ids.and_then(|v| v.iter().copied().find(|t| *t != txn.id));
        for r in txn.reads_at(p) {
            if let Some(t) = other(self.writers.get(&r.key)) {
                return Some(t);
            }
        }
        for w in txn.writes_at(p) {
            if let Some(t) = other(self.writers.get(&w.key)).or_else(|| other(self.readers.get(&w.key))) {
                return Some(t);
            }
        }
        None
    }
}

/// Committed key versions as seen by the admitting partition.
pub trait CommittedVersions {
    fn committed_version(&self, key: &Key) -> BatchId;
}

impl CommittedVersions for HashMap<Key, BatchId> {
    fn committed_version(&self, key: &Key) -> BatchId {
        self.get(key).copied().unwrap_or(NO_BATCH)
    }
}

/// Admission check at partition `p`. Rules are tried in order and the first
/// failure wins: stale read, conflict with the in-progress batch, conflict
/// with a prepared transaction that has not committed.
pub fn check<V: CommittedVersions>(
    txn: &Transaction,
    p: PartitionId,
    committed: &V,
    in_progress: &KeyIndex,
    prepared: &KeyIndex,
) -> Verdict {
    for r in txn.reads_at(p) {
        if committed.committed_version(&r.key) != r.version {
            return Verdict::StaleRead { key: r.key.clone() };
        }
    }
    if let Some(t) = in_progress.conflicting(txn, p) {
        return Verdict::ConflictsInProgress { txn: t };
    }
    if let Some(t) = prepared.conflicting(txn, p) {
        return Verdict::ConflictsPrepared { txn: t };
    }
    Verdict::Ok
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: PartitionId = PartitionId(0);

    pub fn txn(id: u64, reads: &[(&str, BatchId)], writes: &[&str]) -> Transaction {
        Transaction {
            id: TxnId(id),
            kind: TxnKind::Local,
            client: NodeId(0),
            coordinator: None,
            partitions: vec![P],
            reads: reads
                .iter()
                .map(|(k, v)| ReadEntry { partition: P, key: Key::from(*k), value: None, version: *v })
                .collect(),
            writes: writes.iter().map(|k| WriteEntry { partition: P, key: Key::from(*k), value: Value::from("v") }).collect(),
        }
    }

    fn versions(pairs: &[(&str, BatchId)]) -> HashMap<Key, BatchId> {
        pairs.iter().map(|(k, v)| (Key::from(*k), *v)).collect()
    }

    #[test]
    fn current_read_passes() {
        let t = txn(1, &[("k", 3)], &["j"]);
        assert_eq!(check(&t, P, &versions(&[("k", 3)]), &KeyIndex::default(), &KeyIndex::default()), Verdict::Ok);
    }

    #[test]
    fn overwritten_read_is_stale() {
        let t = txn(1, &[("k", 3)], &[]);
        let v = check(&t, P, &versions(&[("k", 5)]), &KeyIndex::default(), &KeyIndex::default());
        assert_eq!(v, Verdict::StaleRead { key: Key::from("k") });
    }

    #[test]
    fn never_written_key_reads_as_no_batch() {
        let t = txn(1, &[("fresh", NO_BATCH)], &[]);
        assert!(check(&t, P, &HashMap::new(), &KeyIndex::default(), &KeyIndex::default()).is_ok());
    }

    #[test]
    fn write_write_with_prepared_is_rejected() {
        let mut prepared = KeyIndex::default();
        prepared.insert(&txn(9, &[], &["k"]), P);
        let t = txn(1, &[], &["k"]);
        let v = check(&t, P, &HashMap::new(), &KeyIndex::default(), &prepared);
        assert_eq!(v, Verdict::ConflictsPrepared { txn: TxnId(9) });
    }

    #[test]
    fn rules_checked_in_order() {
        let mut idx = KeyIndex::default();
        idx.insert(&txn(9, &[], &["k"]), P);
        let t = txn(1, &[("k", 0)], &["k"]);
        let v = check(&t, P, &versions(&[("k", 4)]), &idx, &idx);
        assert!(matches!(v, Verdict::StaleRead { .. }));
        let v = check(&t, P, &versions(&[("k", 0)]), &idx, &idx);
        assert_eq!(v, Verdict::ConflictsInProgress { txn: TxnId(9) });
    }

    #[test]
    fn both_directions_checked() {
        // an in-progress reader blocks a later writer
        let mut idx = KeyIndex::default();
        idx.insert(&txn(9, &[("k", NO_BATCH)], &[]), P);
        let t = txn(1, &[], &["k"]);
        assert!(!check(&t, P, &HashMap::new(), &idx, &KeyIndex::default()).is_ok());
    }

    #[test]
    fn pairwise_types() {
        let a = txn(1, &[], &["k"]);
        let b = txn(2, &[("k", 0)], &[]);
        assert_eq!(conflicts(&a, &b), ConflictSet { wr: true, rw: false, ww: false });
        assert_eq!(conflicts(&b, &a), ConflictSet { wr: false, rw: true, ww: false });
        assert!(conflicts(&txn(3, &[("x", 0)], &["y"]), &txn(4, &[("z", 0)], &["w"])).is_empty());
    }

    #[test]
    fn other_partitions_ignored() {
        let mut t = txn(1, &[], &["k"]);
        t.writes[0].partition = PartitionId(1);
        t.partitions = vec![P, PartitionId(1)];
        let mut idx = KeyIndex::default();
        idx.insert(&txn(9, &[], &["k"]), P);
        assert!(idx.conflicting(&t, P).is_none());
    }

    #[test]
    fn index_removal_restores_empty() {
        let mut idx = KeyIndex::default();
        let t = txn(9, &[("a", 0)], &["b", "c"]);
        idx.insert(&t, P);
        idx.remove(&t, P);
        assert!(idx.is_empty());
    }

    #[test]
    fn validate_span_rules() {
        let mut t = txn(1, &[], &[]);
        assert!(t.validate().is_ok());
        t.kind = TxnKind::Distributed;
        assert_eq!(t.validate(), Err(MalformedTxn::DistributedSpan(1)));
        t.partitions.push(PartitionId(1));
        assert_eq!(t.validate(), Err(MalformedTxn::Coordinator));
        t.coordinator = Some(P);
        assert!(t.validate().is_ok());
        t.kind = TxnKind::ReadOnly;
        t.writes.push(WriteEntry { partition: P, key: "k".into(), value: "v".into() });
        assert_eq!(t.validate(), Err(MalformedTxn::ReadOnlyWrites));
    }

    fn arb_txn(id: u64) -> impl Strategy<Value = Transaction> {
        let key = prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]);
        (prop::collection::vec(key.clone(), 0..3), prop::collection::vec(key, 0..3))
            .prop_map(move |(r, w)| txn(id, &r.iter().map(|k| (*k, NO_BATCH)).collect::<Vec<_>>(), &w))
    }

    proptest! {
        // the index answers exactly what a pairwise scan answers
        #[test]
        fn index_agrees_with_pairwise_scan(pool in prop::collection::vec(any::<u8>(), 0..6).prop_flat_map(|v| {
            let n = v.len();
            (prop::collection::vec((0..n as u64).prop_flat_map(|i| arb_txn(100 + i)), n), arb_txn(1))
        })) {
            let (others, t) = pool;
            let mut idx = KeyIndex::default();
            for o in &others { idx.insert(o, P); }
            let brute = others.iter().any(|o| !conflicts(o, &t).is_empty() || !conflicts(&t, o).is_empty());
            prop_assert_eq!(idx.conflicting(&t, P).is_some(), brute);
        }
    }
}
