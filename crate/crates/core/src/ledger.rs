//! Per-partition log of batches.
//!
//! A batch has a local segment (single-partition transactions), a prepared
//! segment (coordinator and participant prepares), a committed segment (one
//! drained prepare group) and read-only metadata: the last committed epoch
//! (LCE), the CD vector, the Merkle root and a timestamp.
//!
//! A batch under construction is an [`InProgress`]; sealing it yields a
//! [`Staged`] batch that becomes part of the log only through
//! [`Ledger::apply`], after agreement. Leaders and validating replicas run
//! the same construction, so a replica revalidates a proposal by rebuilding
//! it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use thiserror::Error;

use crate::conflict::{check, AbortReason, CommittedVersions, KeyIndex, Transaction};
use crate::crypto::{Canonical, Digest, Encoder};
use crate::merkle::{CoversRoot, MerkleError, MerkleStore, Snapshot};
use crate::readonly::{derive_dep_vector, CdVector};
pub use crate::twopc::CommitRecord;
use crate::twopc::{Decision, PreparedMessage};
use crate::types::{BatchId, Key, PartitionId, TxnId, Value, NO_BATCH};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("batch is sealed")]
    SegmentClosed,
    #[error("transaction {0} is not prepared here")]
    UnknownTransaction(TxnId),
    #[error("conflicting vote for transaction {0}")]
    DuplicateVote(TxnId),
    #[error("no batch {0}")]
    UnknownBatch(BatchId),
    #[error("expected batch {expected}, got {got}")]
    OutOfOrder { expected: BatchId, got: BatchId },
    #[error("batch contents do not match this ledger: {0}")]
    Inconsistent(&'static str),
    #[error(transparent)]
    Merkle(#[from] MerkleError),
}

/// Something a leader wants to put in the next batch.
#[derive(Debug, Clone)]
pub enum Candidate {
    Local(Arc<Transaction>),
    /// This partition coordinates the transaction.
    CoordinatorPrepare(Arc<Transaction>),
    /// Another partition coordinates; `coordinator_vote` is its certified
    /// prepare.
    ParticipantPrepare { txn: Arc<Transaction>, coordinator_vote: Arc<PreparedMessage> },
}

impl Candidate {
    pub fn txn(&self) -> &Arc<Transaction> {
        match self {
            Candidate::Local(t) | Candidate::CoordinatorPrepare(t) => t,
            Candidate::ParticipantPrepare { txn, .. } => txn,
        }
    }

    pub fn is_prepare(&self) -> bool {
        !matches!(self, Candidate::Local(_))
    }
}

impl Canonical for Candidate {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Candidate::Local(t) => {
                enc.u8(0);
                t.encode(enc);
            }
            Candidate::CoordinatorPrepare(t) => {
                enc.u8(1);
                t.encode(enc);
            }
            Candidate::ParticipantPrepare { txn, coordinator_vote } => {
                enc.u8(2);
                txn.encode(enc);
                coordinator_vote.encode(enc);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Admitted,
    Rejected(AbortReason),
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub candidate: Candidate,
    pub outcome: Outcome,
}

impl Canonical for Entry {
    fn encode(&self, enc: &mut Encoder) {
        self.candidate.encode(enc);
        match &self.outcome {
            Outcome::Admitted => {
                enc.u8(1);
            }
            Outcome::Rejected(r) => {
                enc.u8(0);
                r.encode(enc);
            }
        }
    }
}

/// The part of a batch that read-only clients check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchHeader {
    pub partition: PartitionId,
    pub index: BatchId,
    pub lce: BatchId,
    pub cd_vector: CdVector,
    pub merkle_root: Digest,
    /// Leader clock in ms when sealed.
    pub timestamp: u64,
}

impl Canonical for BatchHeader {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(b"header");
        self.partition.encode(enc);
        enc.i64(self.index).i64(self.lce);
        self.cd_vector.encode(enc);
        enc.digest(&self.merkle_root).u64(self.timestamp);
    }
}

impl CoversRoot for BatchHeader {
    fn merkle_root(&self) -> Digest {
        self.merkle_root
    }
    fn batch(&self) -> BatchId {
        self.index
    }
}

/// A drained prepare-group member with its decision.
#[derive(Debug, Clone)]
pub struct CommittedEntry {
    pub txn: Arc<Transaction>,
    pub prepare_batch: BatchId,
    pub record: Arc<CommitRecord>,
}

impl CommittedEntry {
    pub fn committed(&self) -> bool {
        self.record.decision == Decision::Commit
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub header: BatchHeader,
    /// Local and prepare candidates in arrival order with their outcome.
    pub entries: Vec<Entry>,
    /// Decisions recorded into the prepared-batches structure by this batch.
    pub decisions: Vec<Arc<CommitRecord>>,
    /// The committed segment: at most one prepare group, by transaction id.
    pub committed: Vec<CommittedEntry>,
}

impl Canonical for Batch {
    fn encode(&self, enc: &mut Encoder) {
        self.header.encode(enc);
        enc.seq(&self.entries);
        enc.u32(self.decisions.len() as u32);
        for d in &self.decisions {
            d.encode(enc);
        }
        enc.u32(self.committed.len() as u32);
        for c in &self.committed {
            c.txn.id.encode(enc);
            enc.i64(c.prepare_batch);
            enc.digest(&c.record.digest());
        }
    }
}

impl Batch {
    pub fn index(&self) -> BatchId {
        self.header.index
    }

    pub fn local(&self) -> impl Iterator<Item = &Arc<Transaction>> {
        self.entries.iter().filter_map(|e| match (&e.candidate, &e.outcome) {
            (Candidate::Local(t), Outcome::Admitted) => Some(t),
            _ => None,
        })
    }

    pub fn prepared(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| e.candidate.is_prepare() && e.outcome == Outcome::Admitted)
    }

    pub fn rejected(&self) -> impl Iterator<Item = (&Candidate, &AbortReason)> {
        self.entries.iter().filter_map(|e| match &e.outcome {
            Outcome::Rejected(r) => Some((&e.candidate, r)),
            Outcome::Admitted => None,
        })
    }

    /// The prepare group drained by this batch, if any.
    pub fn drained_group(&self) -> Option<BatchId> {
        self.committed.first().map(|c| c.prepare_batch)
    }

    /// Every write this batch applies at its own partition.
    pub fn writes(&self) -> Vec<(Key, Value)> {
        let p = self.header.partition;
        let local = self.local().flat_map(|t| t.writes_at(p));
        let committed = self.committed.iter().filter(|c| c.committed()).flat_map(|c| c.txn.writes_at(p));
        local.chain(committed).map(|w| (w.key.clone(), w.value.clone())).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.decisions.is_empty() && self.committed.is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum VoteStatus {
    Pending,
    Decided(Arc<CommitRecord>),
}

#[derive(Debug, Clone)]
pub struct Member {
    pub txn: Arc<Transaction>,
    pub status: VoteStatus,
}

/// Prepared-but-undrained transactions, grouped by the batch that prepared
/// them. Groups leave strictly oldest first, and only once no member is
/// pending.
#[derive(Debug, Clone, Default)]
pub struct PreparedBatches {
    groups: BTreeMap<BatchId, BTreeMap<TxnId, Member>>,
    locate: HashMap<TxnId, BatchId>,
}

impl PreparedBatches {
    pub fn register(&mut self, batch: BatchId, txn: Arc<Transaction>) {
        self.locate.insert(txn.id, batch);
        self.groups.entry(batch).or_default().insert(txn.id, Member { txn, status: VoteStatus::Pending });
    }

    pub fn prepare_batch_of(&self, txn: TxnId) -> Option<BatchId> {
        self.locate.get(&txn).copied()
    }

    pub fn member(&self, txn: TxnId) -> Option<&Member> {
        let b = self.locate.get(&txn)?;
        self.groups.get(b)?.get(&txn)
    }

    /// Returns `Ok(true)` if the vote changed state, `Ok(false)` for an
    /// identical repeat.
    pub fn record_vote(&mut self, prepare_batch: BatchId, txn: TxnId, record: Arc<CommitRecord>) -> Result<bool, LedgerError> {
        let member = self
            .groups
            .get_mut(&prepare_batch)
            .and_then(|g| g.get_mut(&txn))
            .ok_or(LedgerError::UnknownTransaction(txn))?;
        match &member.status {
            VoteStatus::Pending => {
                member.status = VoteStatus::Decided(record);
                Ok(true)
            }
            VoteStatus::Decided(r) if **r == *record => Ok(false),
            VoteStatus::Decided(_) => Err(LedgerError::DuplicateVote(txn)),
        }
    }

    pub fn oldest(&self) -> Option<BatchId> {
        self.groups.keys().next().copied()
    }

    /// The oldest group, if it is ready once `extra` votes are counted.
    fn oldest_ready_with(&self, extra: &HashMap<TxnId, Arc<CommitRecord>>) -> Option<(BatchId, Vec<CommittedEntry>)> {
        let (id, group) = self.groups.iter().next()?;
        let mut out = Vec::with_capacity(group.len());
        for (txn_id, m) in group {
            let record = match &m.status {
                VoteStatus::Decided(r) => r.clone(),
                VoteStatus::Pending => extra.get(txn_id)?.clone(),
            };
            out.push(CommittedEntry { txn: m.txn.clone(), prepare_batch: *id, record });
        }
        Some((*id, out))
    }

    pub fn oldest_ready(&self) -> Option<BatchId> {
        self.oldest_ready_with(&HashMap::new()).map(|(id, _)| id)
    }

    pub fn drain_oldest(&mut self) -> Option<(BatchId, Vec<CommittedEntry>)> {
        let (id, entries) = self.oldest_ready_with(&HashMap::new())?;
        self.groups.remove(&id);
        for e in &entries {
            self.locate.remove(&e.txn.id);
        }
        Some((id, entries))
    }

    pub fn len(&self) -> usize {
        self.locate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locate.is_empty()
    }

    pub fn group_ids(&self) -> impl Iterator<Item = BatchId> + '_ {
        self.groups.keys().copied()
    }
}

struct Versions<'a>(&'a HashMap<Key, BatchId>);

impl CommittedVersions for Versions<'_> {
    fn committed_version(&self, key: &Key) -> BatchId {
        self.0.get(key).copied().unwrap_or(NO_BATCH)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LedgerConfig {
    /// Seal a batch even when it carries nothing.
    pub seal_empty: bool,
    /// Merkle roots kept for historical reads; `None` keeps all.
    pub root_retention: Option<usize>,
}

/// One partition's replicated state.
#[derive(Debug, Clone)]
pub struct Ledger {
    partition: PartitionId,
    n_partitions: usize,
    config: LedgerConfig,
    log: Vec<Arc<Batch>>,
    store: MerkleStore,
    prepared: PreparedBatches,
    /// Keys of prepared transactions that have not drained.
    pending: KeyIndex,
    versions: HashMap<Key, BatchId>,
    /// Transactions whose group has drained here.
    finished: HashSet<TxnId>,
}

impl Ledger {
    pub fn new(partition: PartitionId, n_partitions: usize, keys: impl IntoIterator<Item = Key>, config: LedgerConfig) -> Self {
        let store = MerkleStore::new(keys).with_retention(config.root_retention);
        Ledger {
            partition,
            n_partitions,
            config,
            log: Vec::new(),
            store,
            prepared: PreparedBatches::default(),
            pending: KeyIndex::default(),
            versions: HashMap::new(),
            finished: HashSet::new(),
        }
    }

    pub fn partition(&self) -> PartitionId {
        self.partition
    }

    pub fn next_index(&self) -> BatchId {
        self.log.len() as BatchId
    }

    pub fn get_batch(&self, index: BatchId) -> Result<&Arc<Batch>, LedgerError> {
        usize::try_from(index).ok().and_then(|i| self.log.get(i)).ok_or(LedgerError::UnknownBatch(index))
    }

    pub fn get_latest(&self) -> Option<&Arc<Batch>> {
        self.log.last()
    }

    pub fn lce(&self) -> BatchId {
        self.log.last().map_or(NO_BATCH, |b| b.header.lce)
    }

    pub fn cd_vector(&self) -> CdVector {
        self.log.last().map_or_else(|| CdVector::initial(self.n_partitions), |b| b.header.cd_vector.clone())
    }

    pub fn store(&self) -> &MerkleStore {
        &self.store
    }

    pub fn prepared(&self) -> &PreparedBatches {
        &self.prepared
    }

    pub fn committed_version(&self, key: &Key) -> BatchId {
        self.versions.get(key).copied().unwrap_or(NO_BATCH)
    }

    pub fn read(&self, key: &Key) -> (Option<Value>, BatchId) {
        match self.store.get(key) {
            Some((v, ver)) => (Some(v), ver),
            None => (None, NO_BATCH),
        }
    }

    /// Whether the transaction's group has drained at this partition.
    pub fn is_finished(&self, txn: TxnId) -> bool {
        self.finished.contains(&txn)
    }

    /// The earliest batch whose LCE is at least `prepare_batch`, i.e. the
    /// batch where that prepare group committed.
    pub fn earliest_with_lce(&self, prepare_batch: BatchId) -> Option<BatchId> {
        let i = self.log.partition_point(|b| b.header.lce < prepare_batch);
        (i < self.log.len()).then_some(i as BatchId)
    }

    pub fn open(&self) -> InProgress<'_> {
        InProgress {
            ledger: self,
            entries: Vec::new(),
            index: KeyIndex::default(),
            decisions: Vec::new(),
            decided_now: HashMap::new(),
            sealed: false,
        }
    }

    /// Appends an agreed batch. `staged` may carry the snapshot computed
    /// while validating; otherwise the writes are staged again.
    pub fn apply(&mut self, batch: Arc<Batch>, staged: Option<Snapshot>) -> Result<(), LedgerError> {
        let index = batch.index();
        if index != self.next_index() || batch.header.partition != self.partition {
            return Err(LedgerError::OutOfOrder { expected: self.next_index(), got: index });
        }
        let snapshot = match staged {
            Some(s) => s,
            None => self.store.stage(&batch.writes(), index)?,
        };
        if snapshot.root() != batch.header.merkle_root {
            return Err(LedgerError::Inconsistent("merkle root"));
        }
        for rec in &batch.decisions {
            let pb = self.prepared.prepare_batch_of(rec.txn).ok_or(LedgerError::UnknownTransaction(rec.txn))?;
            self.prepared.record_vote(pb, rec.txn, rec.clone())?;
        }
        if let Some(group) = batch.drained_group() {
            if self.prepared.oldest_ready() != Some(group) {
                return Err(LedgerError::Inconsistent("drained group not ready"));
            }
            let (_, members) = self.prepared.drain_oldest().expect("checked ready");
            for m in &members {
                self.pending.remove(&m.txn, self.partition);
                self.finished.insert(m.txn.id);
            }
        }
        for e in batch.prepared() {
            let t = e.candidate.txn();
            self.prepared.register(index, t.clone());
            self.pending.insert(t, self.partition);
        }
        for (k, _) in batch.writes() {
            self.versions.insert(k, index);
        }
        self.store.commit(snapshot, index)?;
        self.log.push(batch);
        Ok(())
    }

    /// Rebuilds `proposal` from its own inputs against this ledger and
    /// returns the staged result if it matches exactly.
    pub fn revalidate(&self, proposal: &Batch) -> Result<Staged, LedgerError> {
        if proposal.header.index != self.next_index() || proposal.header.partition != self.partition {
            return Err(LedgerError::OutOfOrder { expected: self.next_index(), got: proposal.header.index });
        }
        let mut b = self.open();
        for e in &proposal.entries {
            match &e.outcome {
                // aborting is always safe; the leader may know of a failed
                // agreement round that replicas cannot check
                Outcome::Rejected(AbortReason::AgreementFailed) => {
                    b.reject(e.candidate.clone(), AbortReason::AgreementFailed)?;
                }
                claimed => {
                    if b.append(e.candidate.clone())? != *claimed {
                        return Err(LedgerError::Inconsistent("admission outcome"));
                    }
                }
            }
        }
        for d in &proposal.decisions {
            if !b.record_decision(d.clone())? {
                return Err(LedgerError::Inconsistent("repeated decision"));
            }
        }
        let staged = b.seal_forced(proposal.header.timestamp)?;
        if staged.batch.digest() != proposal.digest() {
            return Err(LedgerError::Inconsistent("batch digest"));
        }
        Ok(staged)
    }
}

/// A sealed batch and the Merkle snapshot its writes produce.
#[derive(Debug, Clone)]
pub struct Staged {
    pub batch: Batch,
    pub snapshot: Snapshot,
}

/// The batch being assembled on top of a ledger.
pub struct InProgress<'a> {
    ledger: &'a Ledger,
    entries: Vec<Entry>,
    index: KeyIndex,
    decisions: Vec<Arc<CommitRecord>>,
    decided_now: HashMap<TxnId, Arc<CommitRecord>>,
    sealed: bool,
}

impl InProgress<'_> {
    /// Runs the admission check and records the candidate with its outcome.
    pub fn append(&mut self, candidate: Candidate) -> Result<Outcome, LedgerError> {
        if self.sealed {
            return Err(LedgerError::SegmentClosed);
        }
        let p = self.ledger.partition;
        let txn = candidate.txn().clone();
        let verdict = check(&txn, p, &Versions(&self.ledger.versions), &self.index, &self.ledger.pending);
        let outcome = match Option::<AbortReason>::from(verdict) {
            None => {
                self.index.insert(&txn, p);
                Outcome::Admitted
            }
            Some(r) => Outcome::Rejected(r),
        };
        self.entries.push(Entry { candidate, outcome: outcome.clone() });
        Ok(outcome)
    }

    /// Records a candidate as aborted without checking it.
    pub fn reject(&mut self, candidate: Candidate, reason: AbortReason) -> Result<(), LedgerError> {
        if self.sealed {
            return Err(LedgerError::SegmentClosed);
        }
        self.entries.push(Entry { candidate, outcome: Outcome::Rejected(reason) });
        Ok(())
    }

    /// Records a coordinator decision for a prepared transaction. Returns
    /// `Ok(false)` for a decision already known.
    pub fn record_decision(&mut self, record: Arc<CommitRecord>) -> Result<bool, LedgerError> {
        if self.sealed {
            return Err(LedgerError::SegmentClosed);
        }
        let member = self.ledger.prepared.member(record.txn).ok_or(LedgerError::UnknownTransaction(record.txn))?;
        let known = match &member.status {
            VoteStatus::Decided(r) => Some(r),
            VoteStatus::Pending => self.decided_now.get(&record.txn),
        };
        match known {
            Some(r) if **r == *record => Ok(false),
            Some(_) => Err(LedgerError::DuplicateVote(record.txn)),
            None => {
                self.decided_now.insert(record.txn, record.clone());
                self.decisions.push(record);
                Ok(true)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.decisions.is_empty()
    }

    /// Seals the batch: drains the oldest prepare group if it is ready,
    /// derives the CD vector, stages the writes. Returns `None` when the
    /// batch would carry nothing and empty batches are disabled.
    pub fn seal(&mut self, timestamp: u64) -> Result<Option<Staged>, LedgerError> {
        let drained = self.ledger.prepared.oldest_ready_with(&self.decided_now);
        if self.is_empty() && drained.is_none() && !self.ledger.config.seal_empty {
            self.sealed = true;
            return Ok(None);
        }
        self.seal_forced(timestamp).map(Some)
    }

    /// Like [`seal`](Self::seal) but always produces a batch.
    pub fn seal_forced(&mut self, timestamp: u64) -> Result<Staged, LedgerError> {
        if self.sealed {
            return Err(LedgerError::SegmentClosed);
        }
        self.sealed = true;
        let l = self.ledger;
        let index = l.next_index();
        let (lce, committed) = match l.prepared.oldest_ready_with(&self.decided_now) {
            Some((id, members)) => (id, members),
            None => (l.lce(), Vec::new()),
        };
        let cd_vector = derive_dep_vector(&l.cd_vector(), index, l.partition, committed.iter().map(|c| c.record.as_ref()));
        let mut batch = Batch {
            header: BatchHeader {
                partition: l.partition,
                index,
                lce,
                cd_vector,
                merkle_root: Digest::default(),
                timestamp,
            },
            entries: std::mem::take(&mut self.entries),
            decisions: std::mem::take(&mut self.decisions),
            committed,
        };
        let snapshot = l.store.stage(&batch.writes(), index)?;
        batch.header.merkle_root = snapshot.root();
        Ok(Staged { batch, snapshot })
    }
}
