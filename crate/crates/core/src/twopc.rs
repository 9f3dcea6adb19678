//! Two-phase commit layered over per-cluster agreement.
//!
//! Every message that crosses clusters carries an `f+1` reply certificate
//! from the sending cluster, so a single faulty node can neither forge a
//! vote nor a decision. A [`CommitRecord`] embeds the certified prepared
//! messages it was decided from and is checkable by anyone holding the
//! cluster directory.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conflict::{AbortReason, Transaction, TxnKind};
use crate::consensus::Directory;
use crate::crypto::{Canonical, Digest, Encoder, QuorumCertificate};
use crate::ledger::Candidate;
use crate::readonly::CdVector;
use crate::types::{BatchId, PartitionId, TxnId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "vote", rename_all = "snake_case")]
pub enum Vote {
    Yes,
    No { reason: AbortReason },
}

impl Vote {
    pub fn is_yes(&self) -> bool {
        matches!(self, Vote::Yes)
    }
}

impl Canonical for Vote {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Vote::Yes => {
                enc.u8(1);
            }
            Vote::No { reason } => {
                enc.u8(0);
                reason.encode(enc);
            }
        }
    }
}

/// One partition's certified vote. The coordinator's own prepare uses the
/// same shape and doubles as the coordinator-prepare message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedMessage {
    pub txn: TxnId,
    pub txn_digest: Digest,
    pub partition: PartitionId,
    pub vote: Vote,
    /// Batch holding the prepared record (or the rejection, for a no).
    pub prepare_batch: BatchId,
    pub cd_vector: CdVector,
    pub certificate: QuorumCertificate,
}

/// The signed part of a [`PreparedMessage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedClaim {
    pub txn: TxnId,
    pub txn_digest: Digest,
    pub partition: PartitionId,
    pub vote: Vote,
    pub prepare_batch: BatchId,
    pub cd_vector: CdVector,
}

impl Canonical for PreparedClaim {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(b"prepared");
        self.txn.encode(enc);
        enc.digest(&self.txn_digest);
        self.partition.encode(enc);
        self.vote.encode(enc);
        enc.i64(self.prepare_batch);
        self.cd_vector.encode(enc);
    }
}

impl PreparedClaim {
    pub fn certify(self, certificate: QuorumCertificate) -> PreparedMessage {
        PreparedMessage {
            txn: self.txn,
            txn_digest: self.txn_digest,
            partition: self.partition,
            vote: self.vote,
            prepare_batch: self.prepare_batch,
            cd_vector: self.cd_vector,
            certificate,
        }
    }
}

impl PreparedMessage {
    pub fn claim(&self) -> PreparedClaim {
        PreparedClaim {
            txn: self.txn,
            txn_digest: self.txn_digest,
            partition: self.partition,
            vote: self.vote.clone(),
            prepare_batch: self.prepare_batch,
            cd_vector: self.cd_vector.clone(),
        }
    }

    pub fn verify(&self, dir: &Directory) -> bool {
        match dir.cluster(self.partition) {
            Some(c) => self.certificate.verify_claim(&self.claim().digest(), c.reply_quorum(), &c.keys),
            None => false,
        }
    }
}

impl Canonical for PreparedMessage {
    fn encode(&self, enc: &mut Encoder) {
        self.claim().encode(enc);
        self.certificate.encode(enc);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Commit,
    Abort,
}

/// The coordinator's decision together with the votes that justify it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRecord {
    pub txn: TxnId,
    pub txn_digest: Digest,
    pub decision: Decision,
    /// One message per partition that voted, sorted by partition.
    pub prepared: Vec<PreparedMessage>,
}

impl Canonical for CommitRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(b"commit-record");
        self.txn.encode(enc);
        enc.digest(&self.txn_digest);
        enc.u8(matches!(self.decision, Decision::Commit) as u8);
        enc.seq(&self.prepared);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TwoPcError {
    #[error("certificate does not verify")]
    BadCertificate,
    #[error("message does not match transaction {0}")]
    Mismatch(TxnId),
    #[error("unknown transaction {0}")]
    UnknownTransaction(TxnId),
}

impl CommitRecord {
    pub fn abort_reason(&self) -> Option<AbortReason> {
        self.prepared.iter().find_map(|m| match &m.vote {
            Vote::No { .. } => Some(AbortReason::NegativeVote { partition: m.partition }),
            Vote::Yes => None,
        })
    }

    /// Checks that the record is justified by its certified votes: a commit
    /// needs a yes from every accessed partition, an abort at least one no.
    pub fn verify(&self, txn: &Transaction, dir: &Directory) -> Result<(), TwoPcError> {
        if txn.id != self.txn || txn.digest() != self.txn_digest {
            return Err(TwoPcError::Mismatch(self.txn));
        }
        let mut seen = HashSet::new();
        for m in &self.prepared {
            if m.txn != self.txn || m.txn_digest != self.txn_digest || !txn.touches(m.partition) || !seen.insert(m.partition) {
                return Err(TwoPcError::Mismatch(self.txn));
            }
            if !m.verify(dir) {
                return Err(TwoPcError::BadCertificate);
            }
        }
        let justified = match self.decision {
            Decision::Commit => seen.len() == txn.partitions.len() && self.prepared.iter().all(|m| m.vote.is_yes()),
            Decision::Abort => self.prepared.iter().any(|m| !m.vote.is_yes()),
        };
        if justified {
            Ok(())
        } else {
            Err(TwoPcError::Mismatch(self.txn))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// The coordinator-prepare has not certified yet.
    Preparing,
    Collecting,
    Done(Decision),
}

/// Coordinator-side bookkeeping for one distributed transaction.
#[derive(Debug, Clone)]
pub struct CoordinatorState {
    pub txn: Arc<Transaction>,
    pub phase: Phase,
    votes: BTreeMap<PartitionId, Option<PreparedMessage>>,
}

impl CoordinatorState {
    pub fn new(txn: Arc<Transaction>) -> Self {
        let votes = txn.partitions.iter().map(|p| (*p, None)).collect();
        CoordinatorState { txn, phase: Phase::Preparing, votes }
    }

    /// Records a verified vote. Returns the decision once no vote is
    /// pending. Later calls are no-ops.
    pub fn on_prepared(&mut self, msg: PreparedMessage) -> Option<CommitRecord> {
        if matches!(self.phase, Phase::Done(_)) || msg.txn != self.txn.id {
            return None;
        }
        let coordinator = self.txn.coordinator;
        match self.votes.get_mut(&msg.partition) {
            Some(slot @ None) => {
                if Some(msg.partition) == coordinator {
                    self.phase = Phase::Collecting;
                }
                *slot = Some(msg);
            }
            _ => return None,
        }
        if self.votes.values().any(Option::is_none) {
            return None;
        }
        let any_no = self.votes.values().flatten().any(|m| !m.vote.is_yes());
        let decision = if any_no { Decision::Abort } else { Decision::Commit };
        self.phase = Phase::Done(decision);
        Some(CommitRecord {
            txn: self.txn.id,
            txn_digest: self.txn.digest(),
            decision,
            prepared: self.votes.values().flatten().cloned().collect(),
        })
    }

    pub fn pending_partitions(&self) -> impl Iterator<Item = PartitionId> + '_ {
        self.votes.iter().filter(|(_, v)| v.is_none()).map(|(p, _)| *p)
    }

    /// Partitions that hold a prepared record and so must hear the decision.
    pub fn yes_voters(&self) -> impl Iterator<Item = PartitionId> + '_ {
        self.votes.iter().filter_map(|(p, v)| v.as_ref().filter(|m| m.vote.is_yes()).map(|_| *p))
    }
}

/// Participant-side deduplication and message checks.
#[derive(Debug, Clone, Default)]
pub struct ParticipantState {
    prepares: HashSet<TxnId>,
    decisions: HashSet<TxnId>,
}

impl ParticipantState {
    /// Validates a coordinator-prepare and turns it into a batch candidate.
    /// Returns `Ok(None)` for a duplicate.
    pub fn on_coordinator_prepare(
        &mut self,
        me: PartitionId,
        txn: Arc<Transaction>,
        vote: Arc<PreparedMessage>,
        dir: &Directory,
    ) -> Result<Option<Candidate>, TwoPcError> {
        if txn.kind != TxnKind::Distributed
            || !txn.touches(me)
            || txn.coordinator != Some(vote.partition)
            || vote.txn != txn.id
            || vote.txn_digest != txn.digest()
            || !vote.vote.is_yes()
        {
            return Err(TwoPcError::Mismatch(txn.id));
        }
        if !vote.verify(dir) {
            return Err(TwoPcError::BadCertificate);
        }
        if !self.prepares.insert(txn.id) {
            return Ok(None);
        }
        Ok(Some(Candidate::ParticipantPrepare { txn, coordinator_vote: vote }))
    }

    /// Returns true the first time a decision for the transaction arrives.
    pub fn on_decision(&mut self, txn: TxnId) -> bool {
        self.decisions.insert(txn)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::consensus::tests::directory;
    use crate::conflict::{ReadEntry, WriteEntry};
    use crate::crypto::NodeId;
    use crate::types::{Key, Value};

    pub fn dist_txn(id: u64, parts: &[u16]) -> Transaction {
        Transaction {
            id: TxnId(id),
            kind: TxnKind::Distributed,
            client: NodeId(99),
            coordinator: Some(PartitionId(parts[0])),
            partitions: parts.iter().map(|p| PartitionId(*p)).collect(),
            reads: vec![ReadEntry { partition: PartitionId(parts[0]), key: Key::from("r"), value: None, version: -1 }],
            writes: parts
                .iter()
                .map(|p| WriteEntry { partition: PartitionId(*p), key: Key::new(format!("w{p}")), value: Value::from("v") })
                .collect(),
        }
    }

    fn vote(dir: &crate::consensus::tests::TestDirectory, t: &Transaction, p: u16, v: Vote, batch: BatchId) -> PreparedMessage {
        let claim = PreparedClaim {
            txn: t.id,
            txn_digest: t.digest(),
            partition: PartitionId(p),
            vote: v,
            prepare_batch: batch,
            cd_vector: CdVector::initial(3),
        };
        let cert = dir.reply_cert(PartitionId(p), &claim.digest(), None);
        claim.certify(cert)
    }

    #[test]
    fn all_yes_commits_with_every_vote() {
        let d = directory(3, 1);
        let t = Arc::new(dist_txn(1, &[0, 1, 2]));
        let mut c = CoordinatorState::new(t.clone());
        assert_eq!(c.phase, Phase::Preparing);
        assert!(c.on_prepared(vote(&d, &t, 0, Vote::Yes, 0)).is_none());
        assert_eq!(c.phase, Phase::Collecting);
        assert!(c.on_prepared(vote(&d, &t, 1, Vote::Yes, 4)).is_none());
        let rec = c.on_prepared(vote(&d, &t, 2, Vote::Yes, 2)).unwrap();
        assert_eq!(rec.decision, Decision::Commit);
        assert_eq!(rec.prepared.len(), 3);
        assert!(rec.verify(&t, &d.dir).is_ok());
        assert_eq!(c.yes_voters().count(), 3);
    }

    #[test]
    fn one_no_aborts_and_is_justified() {
        let d = directory(2, 1);
        let t = Arc::new(dist_txn(1, &[0, 1]));
        let mut c = CoordinatorState::new(t.clone());
        c.on_prepared(vote(&d, &t, 0, Vote::Yes, 0));
        let no = Vote::No { reason: AbortReason::ConflictsPrepared { txn: TxnId(7) } };
        let rec = c.on_prepared(vote(&d, &t, 1, no, 3)).unwrap();
        assert_eq!(rec.prepared.len(), 2);
        assert_eq!(rec.decision, Decision::Abort);
        assert_eq!(rec.abort_reason(), Some(AbortReason::NegativeVote { partition: PartitionId(1) }));
        assert!(rec.verify(&t, &d.dir).is_ok());
        assert_eq!(c.yes_voters().collect::<Vec<_>>(), vec![PartitionId(0)]);
        // decided: further votes ignored
        assert!(c.on_prepared(vote(&d, &t, 1, Vote::Yes, 3)).is_none());
    }

    #[test]
    fn unjustified_commit_rejected() {
        let d = directory(2, 1);
        let t = dist_txn(1, &[0, 1]);
        let rec = CommitRecord {
            txn: t.id,
            txn_digest: t.digest(),
            decision: Decision::Commit,
            prepared: vec![vote(&d, &t, 0, Vote::Yes, 0)],
        };
        assert_eq!(rec.verify(&t, &d.dir), Err(TwoPcError::Mismatch(t.id)));
    }

    #[test]
    fn forged_vote_certificate_rejected() {
        let d = directory(2, 1);
        let t = Arc::new(dist_txn(1, &[0, 1]));
        let mut m = vote(&d, &t, 0, Vote::Yes, 0);
        m.prepare_batch = 9;
        assert!(!m.verify(&d.dir));
        let mut p = ParticipantState::default();
        let r = p.on_coordinator_prepare(PartitionId(1), t.clone(), Arc::new(m), &d.dir);
        assert_eq!(r.unwrap_err(), TwoPcError::BadCertificate);
        // a genuine one is accepted once
        let good = Arc::new(vote(&d, &t, 0, Vote::Yes, 0));
        assert!(p.on_coordinator_prepare(PartitionId(1), t.clone(), good.clone(), &d.dir).unwrap().is_some());
        assert!(p.on_coordinator_prepare(PartitionId(1), t, good, &d.dir).unwrap().is_none());
    }

    #[test]
    fn prepare_from_non_coordinator_rejected() {
        let d = directory(3, 1);
        let t = Arc::new(dist_txn(1, &[0, 1, 2]));
        let m = Arc::new(vote(&d, &t, 1, Vote::Yes, 0));
        let r = ParticipantState::default().on_coordinator_prepare(PartitionId(2), t.clone(), m, &d.dir);
        assert_eq!(r.unwrap_err(), TwoPcError::Mismatch(t.id));
    }
}
