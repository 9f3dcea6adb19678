use std::sync::Arc;

use crate::conflict::{AbortReason, Transaction};
use crate::consensus::CertifiedBatch;
use crate::crypto::{Canonical, Digest, Encoder, QuorumCertificate, Signature};
use crate::ledger::{Batch, Candidate, CommitRecord, Outcome};
use crate::readonly::{RoError, RoResponse};
use crate::twopc::{Decision, PreparedClaim, PreparedMessage, Vote};
use crate::types::{BatchId, Key, PartitionId, TxnId, Value};

/// What a cluster tells a client about one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyClaim {
    pub txn: TxnId,
    pub txn_digest: Digest,
    pub partition: PartitionId,
    pub batch: BatchId,
    pub committed: bool,
    pub reason: Option<AbortReason>,
}

impl Canonical for ReplyClaim {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(b"reply");
        self.txn.encode(enc);
        enc.digest(&self.txn_digest);
        self.partition.encode(enc);
        enc.i64(self.batch).u8(self.committed as u8);
        enc.option(self.reason.as_ref());
    }
}

#[derive(Debug, Clone)]
pub struct ClientReply {
    pub claim: ReplyClaim,
    pub certificate: QuorumCertificate,
}

/// A client-visible consequence of applying a batch. Replicas sign each
/// one; `f+1` signatures make it actionable.
#[derive(Debug, Clone)]
pub enum Output {
    Reply { client: crate::crypto::NodeId, claim: ReplyClaim },
    /// The coordinator's own prepare (`coordinator == true`) or a
    /// participant's vote.
    Vote { claim: PreparedClaim, txn: Arc<Transaction>, coordinator: bool },
}

impl Output {
    pub fn digest(&self) -> Digest {
        match self {
            Output::Reply { claim, .. } => claim.digest(),
            Output::Vote { claim, .. } => claim.digest(),
        }
    }
}

fn reply(txn: &Transaction, batch: &Batch, committed: bool, reason: Option<AbortReason>) -> Output {
    Output::Reply {
        client: txn.client,
        claim: ReplyClaim {
            txn: txn.id,
            txn_digest: txn.digest(),
            partition: batch.header.partition,
            batch: batch.index(),
            committed,
            reason,
        },
    }
}

fn vote(txn: &Arc<Transaction>, batch: &Batch, v: Vote, coordinator: bool) -> Output {
    Output::Vote {
        claim: PreparedClaim {
            txn: txn.id,
            txn_digest: txn.digest(),
            partition: batch.header.partition,
            vote: v,
            prepare_batch: batch.index(),
            cd_vector: batch.header.cd_vector.clone(),
        },
        txn: txn.clone(),
        coordinator,
    }
}

/// Outputs of an applied batch in a fixed order: entries first, then the
/// drained group's replies where this partition coordinates.
pub fn batch_outputs(batch: &Batch) -> Vec<Output> {
    let me = batch.header.partition;
    let mut out = Vec::new();
    for e in &batch.entries {
        let rejected = match &e.outcome {
            Outcome::Admitted => None,
            Outcome::Rejected(r) => Some(r.clone()),
        };
        match (&e.candidate, rejected) {
            (Candidate::Local(t), r) => out.push(reply(t, batch, r.is_none(), r)),
            (Candidate::CoordinatorPrepare(t), None) => out.push(vote(t, batch, Vote::Yes, true)),
            (Candidate::CoordinatorPrepare(t), Some(r)) => out.push(reply(t, batch, false, Some(r))),
            (Candidate::ParticipantPrepare { txn, .. }, None) => out.push(vote(txn, batch, Vote::Yes, false)),
            (Candidate::ParticipantPrepare { txn, .. }, Some(reason)) => {
                out.push(vote(txn, batch, Vote::No { reason }, false))
            }
        }
    }
    for c in &batch.committed {
        if c.txn.coordinator == Some(me) {
            let committed = c.record.decision == Decision::Commit;
            out.push(reply(&c.txn, batch, committed, c.record.abort_reason()));
        }
    }
    out
}

/// Claims a replica signs after applying a batch: the header, then every
/// output.
pub fn claim_digests(batch: &Batch, outputs: &[Output]) -> Vec<Digest> {
    std::iter::once(batch.header.digest()).chain(outputs.iter().map(Output::digest)).collect()
}

#[derive(Debug, Clone)]
pub enum Msg {
    // client and leader, read-write path
    ReadReq { txn: TxnId, keys: Vec<Key> },
    ReadResp { txn: TxnId, partition: PartitionId, reads: Vec<(Key, Option<Value>, BatchId)> },
    Submit { txn: Arc<Transaction> },
    Reply { reply: Arc<ClientReply> },
    // read-only path
    RoQuery { txn: TxnId, partition: PartitionId, keys: Arc<Vec<Key>>, required: Option<BatchId>, attempt: usize, round: u8 },
    RoAnswer { txn: TxnId, partition: PartitionId, attempt: usize, round: u8, result: Result<Arc<RoResponse>, RoError> },
    // agreement inside a cluster
    /// `attempt` numbers the leader's proposals; a replica signs at most
    /// one digest per index and attempt.
    Propose { batch: Arc<Batch>, digest: Digest, attempt: u64 },
    /// `signature` is `None` for a rejection.
    Vote { index: BatchId, attempt: u64, digest: Digest, signature: Option<Signature> },
    Commit { cert: Arc<CertifiedBatch> },
    ReplyShare { index: BatchId, signatures: Arc<Vec<Signature>> },
    HeaderCert { index: BatchId, cert: Arc<QuorumCertificate> },
    // two-phase commit between leaders
    CoordinatorPrepare { txn: Arc<Transaction>, vote: Arc<PreparedMessage> },
    Prepared { vote: Arc<PreparedMessage> },
    Decision { record: Arc<CommitRecord> },
}

impl Msg {
    pub fn type_name(&self) -> &'static str {
        match self {
            Msg::ReadReq { .. } => "read_req",
            Msg::ReadResp { .. } => "read_resp",
            Msg::Submit { .. } => "submit",
            Msg::Reply { .. } => "reply",
            Msg::RoQuery { .. } => "ro_query",
            Msg::RoAnswer { .. } => "ro_answer",
            Msg::Propose { .. } => "propose",
            Msg::Vote { .. } => "vote",
            Msg::Commit { .. } => "commit",
            Msg::ReplyShare { .. } => "reply_share",
            Msg::HeaderCert { .. } => "header_cert",
            Msg::CoordinatorPrepare { .. } => "coordinator_prepare",
            Msg::Prepared { .. } => "prepared",
            Msg::Decision { .. } => "decision",
        }
    }

    /// Transaction ids carried by an agreement or commit-protocol message.
    pub fn protocol_txn_ids(&self) -> Vec<TxnId> {
        fn of_batch(b: &Batch) -> Vec<TxnId> {
            b.entries
                .iter()
                .map(|e| e.candidate.txn().id)
                .chain(b.decisions.iter().map(|d| d.txn))
                .chain(b.committed.iter().map(|c| c.txn.id))
                .collect()
        }
        match self {
            Msg::Propose { batch, .. } => of_batch(batch),
            Msg::Commit { cert } => of_batch(&cert.batch),
            Msg::CoordinatorPrepare { txn, .. } => vec![txn.id],
            Msg::Prepared { vote } => vec![vote.txn],
            Msg::Decision { record } => vec![record.txn],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    SealTick,
    AgreementTimeout { attempt: u64 },
    ClientNext,
    RoTimeout { txn: TxnId, partition: PartitionId, attempt: usize, round: u8 },
    DepWait { id: u64 },
}
