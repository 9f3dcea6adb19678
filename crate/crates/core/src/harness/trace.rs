//! JSONL trace: one [`TraceRecord`] per line, the first a
//! [`TraceEvent::Header`] carrying [`SCHEMA_VERSION`].

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conflict::AbortReason;
use crate::crypto::{Digest, NodeId};
use crate::readonly::{RoStats, UnsatisfiedDependency};
use crate::twopc::Decision;
use crate::types::{BatchId, Key, PartitionId, SimTime, TxnId};
use crate::workload::GenKind;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadRec {
    pub partition: PartitionId,
    pub key: Key,
    pub version: BatchId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRec {
    pub partition: PartitionId,
    pub key: Key,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrainedRec {
    pub txn: TxnId,
    pub prepare_batch: BatchId,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Local,
    Coordinator,
    Participant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRec {
    pub txn: TxnId,
    pub role: Role,
    pub reason: AbortReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderRec {
    pub partition: PartitionId,
    pub index: BatchId,
    pub lce: BatchId,
    pub cd_vector: Vec<BatchId>,
    pub responder: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRec {
    pub partition: PartitionId,
    pub prepare_batch: BatchId,
    pub yes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Header {
        schema_version: u32,
        seed: u64,
        config: BTreeMap<String, String>,
        faults: String,
        /// Replica and client ids of the run, for offline audits.
        n_partitions: usize,
        replicas_per_cluster: usize,
        faulty: Vec<NodeId>,
    },
    /// A read-write transaction leaves its client, or a read-only one starts.
    TxnSubmitted {
        txn: TxnId,
        client: NodeId,
        txn_kind: GenKind,
        coordinator: Option<PartitionId>,
        partitions: Vec<PartitionId>,
        reads: Vec<ReadRec>,
        writes: Vec<WriteRec>,
    },
    BatchCertified {
        partition: PartitionId,
        index: BatchId,
        digest: Digest,
        lce: BatchId,
        cd_vector: Vec<BatchId>,
        timestamp: u64,
        local: Vec<TxnId>,
        prepared: Vec<TxnId>,
        committed: Vec<DrainedRec>,
        rejected: Vec<RejectedRec>,
        decisions: Vec<TxnId>,
    },
    AgreementFailed {
        partition: PartitionId,
        index: BatchId,
        variants: usize,
    },
    ReplicaApplied {
        node: NodeId,
        partition: PartitionId,
        index: BatchId,
        digest: Digest,
    },
    /// A batch could not be applied; the replica stops.
    ReplicaStuck {
        node: NodeId,
        partition: PartitionId,
        index: BatchId,
        error: String,
    },
    CommitDecided {
        txn: TxnId,
        coordinator: PartitionId,
        decision: Decision,
        reason: Option<AbortReason>,
        votes: Vec<VoteRec>,
    },
    Reply {
        txn: TxnId,
        client: NodeId,
        committed: bool,
        reason: Option<AbortReason>,
        latency_ms: u64,
    },
    RoRound1 {
        txn: TxnId,
        headers: Vec<HeaderRec>,
        latency_ms: u64,
    },
    RoRound2 {
        txn: TxnId,
        unsatisfied: Vec<UnsatisfiedDependency>,
        headers: Vec<HeaderRec>,
    },
    RoDone {
        txn: TxnId,
        client: NodeId,
        ok: bool,
        rounds: u8,
        reads: Vec<ReadRec>,
        recheck: Vec<UnsatisfiedDependency>,
        stats: RoStats,
        /// Requests and answers exchanged for this transaction.
        messages: u32,
        latency_ms: u64,
    },
    NetStats {
        sent: u64,
        delivered: u64,
        dropped: u64,
        duplicated: u64,
        by_type: BTreeMap<String, u64>,
        /// Consensus or commit messages carrying a read-only transaction id.
        ro_ids_in_protocol: u64,
    },
    End {
        completed: bool,
        outstanding_clients: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub t: SimTime,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("trace has no header")]
    MissingHeader,
    #[error("unsupported schema version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, t: SimTime, event: TraceEvent) -> u64 {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord { seq, t, event });
        seq
    }

    pub fn events(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })?;
            records.push(rec);
        }
        match records.first().map(|r| &r.event) {
            Some(TraceEvent::Header { schema_version, .. }) if *schema_version == SCHEMA_VERSION => Ok(Trace { records }),
            Some(TraceEvent::Header { schema_version, .. }) => Err(TraceError::Version(*schema_version)),
            _ => Err(TraceError::MissingHeader),
        }
    }

    /// SHA-256 over the JSONL encoding.
    pub fn hash(&self) -> Digest {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        Digest::of(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut t = Trace::default();
        t.push(0, TraceEvent::Header {
            schema_version: SCHEMA_VERSION,
            seed: 3,
            config: BTreeMap::from([("n_txns".into(), "5".into())]),
            faults: "1:mute".into(),
            n_partitions: 2,
            replicas_per_cluster: 4,
            faulty: vec![NodeId(1)],
        });
        t.push(7, TraceEvent::Reply {
            txn: TxnId(4),
            client: NodeId(9),
            committed: false,
            reason: Some(AbortReason::StaleRead { key: Key::from("k1") }),
            latency_ms: 12,
        });
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.starts_with(r#"{"seq":0,"t":0,"kind":"header","schema_version":1"#), "{line}");
        let back = Trace::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.hash(), t.hash());
    }

    #[test]
    fn header_required() {
        let line = br#"{"seq":0,"t":0,"kind":"end","completed":true,"outstanding_clients":0}"#;
        assert!(matches!(Trace::read_jsonl(&line[..]), Err(TraceError::MissingHeader)));
    }
}
