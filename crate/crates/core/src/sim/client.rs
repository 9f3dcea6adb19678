//! Closed-loop clients: one transaction at a time.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use super::msg::{ClientReply, Msg, Timer};
use super::{value_for, RoMode, Sim};
use crate::conflict::{ReadEntry, Transaction, TxnKind, WriteEntry};
use crate::crypto::{Canonical, NodeId};
use crate::harness::trace::{HeaderRec, ReadRec, TraceEvent, WriteRec};
use crate::readonly::{verify_response, AcceptedView, RoError, RoQuery, RoResponse, RoStatus, RoTxn};
use crate::types::{BatchId, Key, PartitionId, SimTime, TxnId, Value};
use crate::workload::{GenKind, GeneratedTxn};

struct RwState {
    gen: GeneratedTxn,
    started: SimTime,
    reads: BTreeMap<Key, (PartitionId, Option<Value>, BatchId)>,
    waiting: BTreeSet<PartitionId>,
    txn: Option<Arc<Transaction>>,
}

struct RoState {
    ro: RoTxn,
    started: SimTime,
    messages: u32,
}

enum Current {
    Rw(RwState),
    Ro(RoState),
}

pub(super) struct Client {
    pub id: NodeId,
    pub txns: VecDeque<GeneratedTxn>,
    current: Option<Current>,
}

impl Client {
    pub fn new(id: NodeId) -> Self {
        Client { id, txns: VecDeque::new(), current: None }
    }
}

fn header_rec(v: &AcceptedView) -> HeaderRec {
    HeaderRec {
        partition: v.header.partition,
        index: v.header.index,
        lce: v.header.lce,
        cd_vector: v.header.cd_vector.0.clone(),
        responder: v.responder,
    }
}

impl Sim {
    pub(super) fn client_timer(&mut self, c: usize, timer: Timer) {
        match timer {
            Timer::ClientNext => self.start_next(c),
            Timer::RoTimeout { txn, partition, attempt, round } => {
                let live = matches!(&self.clients[c].current,
                    Some(Current::Ro(s)) if s.ro.txn == txn && s.ro.is_outstanding(partition, attempt, round));
                if live {
                    self.ro_result(c, partition, Err(RoError::Timeout));
                }
            }
            _ => {}
        }
    }

    pub(super) fn client_msg(&mut self, c: usize, _from: NodeId, msg: Msg) {
        match msg {
            Msg::ReadResp { txn, partition, reads } => self.on_read_resp(c, txn, partition, reads),
            Msg::Reply { reply } => self.on_reply(c, reply),
            Msg::RoAnswer { txn, partition, attempt, round, result } => {
                let live = matches!(&self.clients[c].current,
                    Some(Current::Ro(s)) if s.ro.txn == txn && s.ro.is_outstanding(partition, attempt, round));
                if live {
                    self.on_ro_answer(c, partition, result);
                }
            }
            _ => {}
        }
    }

    fn start_next(&mut self, c: usize) {
        let now = self.net.now();
        let Some(gen) = self.clients[c].txns.pop_front() else {
            self.clients_done += 1;
            return;
        };
        let id = self.clients[c].id;
        if gen.kind == GenKind::ReadOnly && self.cfg.ro_mode != RoMode::Baseline {
            let mut keys: BTreeMap<PartitionId, Vec<Key>> = BTreeMap::new();
            for op in gen.reads() {
                let ks = keys.entry(op.partition).or_default();
                if !ks.contains(&op.key) {
                    ks.push(op.key.clone());
                }
            }
            let txn = TxnId(gen.seq);
            self.emit(TraceEvent::TxnSubmitted {
                txn,
                client: id,
                txn_kind: gen.kind,
                coordinator: None,
                partitions: keys.keys().copied().collect(),
                reads: Vec::new(),
                writes: Vec::new(),
            });
            let n = self.cfg.workload.replicas_per_cluster();
            let mut ro = RoTxn::new(txn, keys, n, self.cfg.ro_mode.max_rounds());
            let qs = ro.start();
            self.clients[c].current = Some(Current::Ro(RoState { ro, started: now, messages: 0 }));
            self.send_ro_queries(c, qs);
            return;
        }
        let mut by_part: BTreeMap<PartitionId, Vec<Key>> = BTreeMap::new();
        for op in gen.reads() {
            let ks = by_part.entry(op.partition).or_default();
            if !ks.contains(&op.key) {
                ks.push(op.key.clone());
            }
        }
        let txn = TxnId(gen.seq);
        let waiting: BTreeSet<PartitionId> = by_part.keys().copied().collect();
        self.clients[c].current =
            Some(Current::Rw(RwState { gen, started: now, reads: BTreeMap::new(), waiting, txn: None }));
        if by_part.is_empty() {
            self.submit(c);
            return;
        }
        for (p, keys) in by_part {
            let to = self.leader_of(p);
            self.send(id, to, Msg::ReadReq { txn, keys });
        }
    }

    fn on_read_resp(&mut self, c: usize, txn: TxnId, partition: PartitionId, reads: Vec<(Key, Option<Value>, BatchId)>) {
        let Some(Current::Rw(s)) = &mut self.clients[c].current else { return };
        if s.gen.seq != txn.0 || !s.waiting.remove(&partition) {
            return;
        }
        for (k, v, ver) in reads {
            s.reads.insert(k, (partition, v, ver));
        }
        if s.waiting.is_empty() {
            self.submit(c);
        }
    }

    fn submit(&mut self, c: usize) {
        let id = self.clients[c].id;
        let value_size = self.cfg.workload.value_size;
        let Some(Current::Rw(s)) = &mut self.clients[c].current else { return };
        let gen = &s.gen;
        let partitions: Vec<PartitionId> = gen.partitions().into_iter().collect();
        let distributed = partitions.len() > 1;
        let coordinator = if distributed { gen.coordinator() } else { partitions[0] };
        let tid = TxnId(gen.seq);
        let reads: Vec<ReadEntry> = s
            .reads
            .iter()
            .map(|(k, (p, v, ver))| ReadEntry { partition: *p, key: k.clone(), value: v.clone(), version: *ver })
            .collect();
        let mut writes: Vec<WriteEntry> = Vec::new();
        for op in gen.writes() {
            if !writes.iter().any(|w| w.key == op.key) {
                writes.push(WriteEntry { partition: op.partition, key: op.key.clone(), value: value_for(tid, &op.key, value_size) });
            }
        }
        let txn = Arc::new(Transaction {
            id: tid,
            kind: if distributed { TxnKind::Distributed } else { TxnKind::Local },
            client: id,
            coordinator: distributed.then_some(coordinator),
            partitions: partitions.clone(),
            reads,
            writes,
        });
        s.txn = Some(txn.clone());
        let event = TraceEvent::TxnSubmitted {
            txn: tid,
            client: id,
            txn_kind: gen.kind,
            coordinator: Some(coordinator),
            partitions,
            reads: txn.reads.iter().map(|r| ReadRec { partition: r.partition, key: r.key.clone(), version: r.version }).collect(),
            writes: txn.writes.iter().map(|w| WriteRec { partition: w.partition, key: w.key.clone() }).collect(),
        };
        self.emit(event);
        let to = self.leader_of(coordinator);
        self.send(id, to, Msg::Submit { txn });
    }

    fn on_reply(&mut self, c: usize, reply: Arc<ClientReply>) {
        let now = self.net.now();
        let id = self.clients[c].id;
        let Some(Current::Rw(s)) = &self.clients[c].current else { return };
        let Some(txn) = &s.txn else { return };
        let claim = &reply.claim;
        let expected = txn.coordinator.unwrap_or(txn.partitions[0]);
        if claim.txn != txn.id || claim.txn_digest != txn.digest() || claim.partition != expected {
            return;
        }
        let cluster = self.dir.cluster(claim.partition).expect("known partition");
        if !reply.certificate.verify_claim(&claim.digest(), cluster.reply_quorum(), &cluster.keys) {
            return;
        }
        let latency = now - s.started;
        self.emit(TraceEvent::Reply {
            txn: claim.txn,
            client: id,
            committed: claim.committed,
            reason: claim.reason.clone(),
            latency_ms: latency,
        });
        self.finish_txn(c);
    }

    fn finish_txn(&mut self, c: usize) {
        self.clients[c].current = None;
        let id = self.clients[c].id;
        self.net.set_timer(id, self.cfg.think_time, Timer::ClientNext);
    }

    // ---- read-only path ----

    fn send_ro_queries(&mut self, c: usize, qs: Vec<RoQuery>) {
        let id = self.clients[c].id;
        let Some(Current::Ro(s)) = &mut self.clients[c].current else { return };
        let txn = s.ro.txn;
        let round = s.ro.round;
        s.messages += qs.len() as u32;
        let link = self.cfg.client_latency_max + self.cfg.extra_latency;
        let timeout = self.cfg.ro_timeout + 2 * link + if round >= 2 { self.cfg.dep_wait } else { 0 };
        for q in qs {
            let members = &self.dir.cluster(q.partition).expect("known partition").members;
            // the leader first, then the other replicas in turn
            let to = members[q.attempt % members.len()];
            self.send(id, to, Msg::RoQuery {
                txn,
                partition: q.partition,
                keys: Arc::new(q.keys),
                required: q.required,
                attempt: q.attempt,
                round,
            });
            self.net.set_timer(id, timeout, Timer::RoTimeout { txn, partition: q.partition, attempt: q.attempt, round });
        }
    }

    fn on_ro_answer(&mut self, c: usize, partition: PartitionId, result: Result<Arc<RoResponse>, RoError>) {
        let id = self.clients[c].id;
        let clock = self.net.clock(id);
        let Some(Current::Ro(s)) = &self.clients[c].current else { return };
        let keys = &s.ro.keys[&partition];
        let required = if s.ro.round >= 2 {
            s.ro.unsatisfied.iter().find(|u| u.partition == partition).map(|u| u.required_prepare_batch)
        } else {
            None
        };
        let verdict = result.and_then(|resp| {
            verify_response(&resp, partition, keys, required, &self.dir, clock, self.cfg.delta).map(|()| AcceptedView {
                header: resp.header.clone(),
                reads: resp.reads(),
                responder: resp.responder,
            })
        });
        self.ro_result(c, partition, verdict);
    }

    fn ro_result(&mut self, c: usize, partition: PartitionId, result: Result<AcceptedView, RoError>) {
        let now = self.net.now();
        let Some(Current::Ro(s)) = &mut self.clients[c].current else { return };
        let before = s.ro.round;
        let next = s.ro.on_result(partition, result);
        let round1_done = before == 1 && (s.ro.round == 2 || s.ro.status == RoStatus::Done);
        let mut events = Vec::new();
        if round1_done {
            events.push(TraceEvent::RoRound1 {
                txn: s.ro.txn,
                headers: s.ro.round1.values().map(header_rec).collect(),
                latency_ms: now - s.started,
            });
        }
        if s.ro.round >= 2 && s.ro.status == RoStatus::Done {
            events.push(TraceEvent::RoRound2 {
                txn: s.ro.txn,
                unsatisfied: s.ro.unsatisfied.clone(),
                headers: s.ro.round2.values().map(header_rec).collect(),
            });
        }
        let finished = s.ro.status != RoStatus::Running;
        for e in events {
            self.emit(e);
        }
        if !next.is_empty() {
            self.send_ro_queries(c, next);
        }
        if finished {
            self.finish_ro(c);
        }
    }

    fn finish_ro(&mut self, c: usize) {
        let now = self.net.now();
        let id = self.clients[c].id;
        let Some(Current::Ro(s)) = &self.clients[c].current else { return };
        let ok = s.ro.status == RoStatus::Done;
        let reads = if ok {
            s.ro
                .final_views()
                .iter()
                .flat_map(|(p, v)| v.reads.iter().map(|(k, _, ver)| ReadRec { partition: *p, key: k.clone(), version: *ver }))
                .collect()
        } else {
            Vec::new()
        };
        let event = TraceEvent::RoDone {
            txn: s.ro.txn,
            client: id,
            ok,
            rounds: s.ro.round,
            reads,
            recheck: if ok { s.ro.recheck() } else { Vec::new() },
            stats: s.ro.stats,
            messages: s.messages,
            latency_ms: now - s.started,
        };
        self.emit(event);
        self.finish_txn(c);
    }
}
