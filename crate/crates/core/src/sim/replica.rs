//! Replica and leader handlers.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use rand::Rng;

use super::msg::{batch_outputs, claim_digests, ClientReply, Msg, Output, Timer};
use super::Sim;
use crate::conflict::{AbortReason, Transaction, TxnKind};
use crate::consensus::{agreement_certify, reply_certify, sign_as, validate_proposal, CertifiedBatch};
use crate::crypto::{Canonical, Digest, NodeId, NodeKeyPair, QuorumCertificate, Signature};
use crate::faults::Behavior;
use crate::harness::trace::{DrainedRec, RejectedRec, Role, TraceEvent, VoteRec};
use crate::ledger::{Batch, Candidate, CommitRecord, Ledger, Staged};
use crate::merkle::Snapshot;
use crate::readonly::{RoError, RoResponse};
use crate::twopc::{CoordinatorState, ParticipantState, PreparedMessage};
use crate::types::{BatchId, Key, PartitionId, TxnId};

/// A follower's signature shares that reach the leader before it tracks the batch.
type EarlyShare = (NodeId, Arc<Vec<Signature>>);

struct Proposal {
    attempt: u64,
    batch: Arc<Batch>,
    digest: Digest,
    handled: bool,
}

/// A second-round query waiting for its dependency to commit here.
struct Waiter {
    id: u64,
    client: NodeId,
    txn: TxnId,
    keys: Arc<Vec<Key>>,
    required: BatchId,
    attempt: usize,
}

struct Variant {
    batch: Arc<Batch>,
    digest: Digest,
    snapshot: Snapshot,
    recipients: Vec<NodeId>,
    sigs: Vec<Signature>,
    responded: HashSet<NodeId>,
    certified: Option<Arc<CertifiedBatch>>,
}

struct Outstanding {
    attempt: u64,
    index: BatchId,
    variants: Vec<Variant>,
    /// Everything the batch carried, replayed as aborts if it fails.
    candidates: Vec<Candidate>,
    decisions: Vec<Arc<CommitRecord>>,
    applied: Option<usize>,
    commit_sent: HashSet<NodeId>,
}

struct ShareCollect {
    outputs: Vec<Output>,
    digests: Vec<Digest>,
    shares: Vec<(NodeId, Arc<Vec<Signature>>)>,
    done: Vec<bool>,
}

#[derive(Default)]
pub(super) struct LeaderState {
    queue: VecDeque<Candidate>,
    forced: Vec<Candidate>,
    decisions: VecDeque<Arc<CommitRecord>>,
    outstanding: Option<Outstanding>,
    next_attempt: u64,
    shares: BTreeMap<BatchId, ShareCollect>,
    early_shares: BTreeMap<BatchId, Vec<EarlyShare>>,
    coordinators: HashMap<TxnId, CoordinatorState>,
    participant: ParticipantState,
    seen: HashSet<TxnId>,
}

pub(super) struct Replica {
    pub id: NodeId,
    pub partition: PartitionId,
    pub behavior: Behavior,
    key: NodeKeyPair,
    pub ledger: Ledger,
    proposals: BTreeMap<BatchId, Vec<Proposal>>,
    commits: BTreeMap<BatchId, Arc<CertifiedBatch>>,
    voted: HashMap<(BatchId, u64), Digest>,
    staged: HashMap<Digest, (BatchId, Snapshot)>,
    header_certs: BTreeMap<BatchId, Arc<QuorumCertificate>>,
    waiters: Vec<Waiter>,
    stuck: bool,
    pub leader: Option<LeaderState>,
}

impl Replica {
    pub fn new(key: NodeKeyPair, partition: PartitionId, behavior: Behavior, ledger: Ledger, is_leader: bool) -> Self {
        Replica {
            id: key.node,
            partition,
            behavior,
            key,
            ledger,
            proposals: BTreeMap::new(),
            commits: BTreeMap::new(),
            voted: HashMap::new(),
            staged: HashMap::new(),
            header_certs: BTreeMap::new(),
            waiters: Vec::new(),
            stuck: false,
            leader: is_leader.then(LeaderState::default),
        }
    }

    fn applied(&self) -> BatchId {
        self.ledger.next_index() - 1
    }

    /// Newest batch this replica can prove to a reader.
    fn newest_certified(&self) -> Option<BatchId> {
        let newest = *self.header_certs.range(..=self.applied()).next_back()?.0;
        match self.behavior {
            Behavior::StaleResponder { lag } => {
                let old = newest - lag as BatchId;
                self.header_certs
                    .range(..=old)
                    .next_back()
                    .or_else(|| self.header_certs.first_key_value())
                    .map(|(k, _)| *k)
            }
            _ => Some(newest),
        }
    }

    fn certified_header(&self, index: BatchId) -> Option<Arc<QuorumCertificate>> {
        let cert = self.header_certs.get(&index)?;
        let batch = self.ledger.get_batch(index).ok()?;
        (cert.digest == batch.header.digest()).then(|| cert.clone())
    }
}

fn role_of(c: &Candidate) -> Role {
    match c {
        Candidate::Local(_) => Role::Local,
        Candidate::CoordinatorPrepare(_) => Role::Coordinator,
        Candidate::ParticipantPrepare { .. } => Role::Participant,
    }
}

fn certified_event(b: &Batch, digest: Digest) -> TraceEvent {
    TraceEvent::BatchCertified {
        partition: b.header.partition,
        index: b.index(),
        digest,
        lce: b.header.lce,
        cd_vector: b.header.cd_vector.0.clone(),
        timestamp: b.header.timestamp,
        local: b.local().map(|t| t.id).collect(),
        prepared: b.prepared().map(|e| e.candidate.txn().id).collect(),
        committed: b
            .committed
            .iter()
            .map(|c| DrainedRec { txn: c.txn.id, prepare_batch: c.prepare_batch, decision: c.record.decision })
            .collect(),
        rejected: b
            .rejected()
            .map(|(c, r)| RejectedRec { txn: c.txn().id, role: role_of(c), reason: r.clone() })
            .collect(),
        decisions: b.decisions.iter().map(|d| d.txn).collect(),
    }
}

impl Sim {
    pub(super) fn replica_msg(&mut self, i: usize, from: NodeId, msg: Msg) {
        let r = &self.replicas[i];
        if r.stuck || r.behavior == Behavior::Mute {
            return;
        }
        match msg {
            Msg::Propose { batch, digest, attempt } => self.on_propose(i, from, batch, digest, attempt),
            Msg::Vote { index, attempt, digest, signature } => self.on_vote(i, from, index, attempt, digest, signature),
            Msg::Commit { cert } => self.on_commit(i, from, cert),
            Msg::ReplyShare { index, signatures } => self.on_share(i, from, index, signatures),
            Msg::HeaderCert { index, cert } => self.on_header_cert(i, from, index, cert),
            Msg::ReadReq { txn, keys } => {
                let r = &self.replicas[i];
                let reads = keys
                    .into_iter()
                    .map(|k| {
                        let (v, ver) = r.ledger.read(&k);
                        (k, v, ver)
                    })
                    .collect();
                let (id, partition) = (r.id, r.partition);
                self.send(id, from, Msg::ReadResp { txn, partition, reads });
            }
            Msg::Submit { txn } => self.on_submit(i, txn),
            Msg::RoQuery { txn, partition, keys, required, attempt, round } => {
                self.on_ro_query(i, from, txn, partition, keys, required, attempt, round)
            }
            Msg::CoordinatorPrepare { txn, vote } => self.on_coordinator_prepare(i, txn, vote),
            Msg::Prepared { vote } => self.on_prepared(i, vote),
            Msg::Decision { record } => self.on_decision(i, record),
            Msg::ReadResp { .. } | Msg::Reply { .. } | Msg::RoAnswer { .. } => {}
        }
    }

    pub(super) fn replica_timer(&mut self, i: usize, timer: Timer) {
        if self.replicas[i].stuck {
            return;
        }
        match timer {
            Timer::SealTick => {
                if self.replicas[i].behavior != Behavior::Mute {
                    self.try_propose(i, false);
                }
                let id = self.replicas[i].id;
                self.net.set_timer(id, self.cfg.batch_interval, Timer::SealTick);
            }
            Timer::AgreementTimeout { attempt } => self.on_agreement_timeout(i, attempt),
            Timer::DepWait { id } => {
                let r = &mut self.replicas[i];
                if let Some(pos) = r.waiters.iter().position(|w| w.id == id) {
                    let w = r.waiters.remove(pos);
                    let me = r.id;
                    let partition = r.partition;
                    self.send(me, w.client, Msg::RoAnswer {
                        txn: w.txn,
                        partition,
                        attempt: w.attempt,
                        round: 2,
                        result: Err(RoError::DependencyTimeout),
                    });
                }
            }
            Timer::ClientNext | Timer::RoTimeout { .. } => {}
        }
    }

    // ---- agreement, leader side ----

    /// Seals and proposes the next batch unless one is in flight.
    pub(super) fn try_propose(&mut self, i: usize, initial: bool) {
        let ts = self.net.clock(self.replicas[i].id);
        let max_batch = self.cfg.max_batch;
        let r = &mut self.replicas[i];
        let Some(l) = r.leader.as_mut() else { return };
        if l.outstanding.is_some() {
            return;
        }
        let forced = std::mem::take(&mut l.forced);
        let take = l.queue.len().min(max_batch);
        let cands: Vec<Candidate> = l.queue.drain(..take).collect();
        let decs: Vec<Arc<CommitRecord>> = l.decisions.drain(..).collect();
        let mut ip = r.ledger.open();
        for c in &forced {
            ip.reject(c.clone(), AbortReason::AgreementFailed).expect("open batch");
        }
        for c in &cands {
            ip.append(c.clone()).expect("open batch");
        }
        let mut used = Vec::new();
        for d in decs {
            if let Ok(true) = ip.record_decision(d.clone()) {
                used.push(d);
            }
        }
        let staged = if initial { ip.seal_forced(ts).map(Some) } else { ip.seal(ts) };
        let Some(Staged { batch, snapshot }) = staged.expect("sealing an open batch") else { return };

        let behavior = r.behavior;
        let mut batch = batch;
        if let Behavior::BadCdVector { rate } = behavior {
            if self.adversary.gen_bool(rate) {
                let n = batch.header.cd_vector.0.len();
                let k = (r.partition.index() + 1) % n;
                batch.header.cd_vector.0[k] += 1;
            }
        }
        let equivocate = matches!(behavior, Behavior::Equivocate { rate } if self.adversary.gen_bool(rate));

        let cluster = self.dir.cluster(r.partition).expect("own cluster");
        let others: Vec<NodeId> = cluster.members.iter().copied().filter(|m| *m != r.id).collect();
        let mut plans: Vec<(Batch, Vec<NodeId>)> = Vec::new();
        if equivocate {
            let colluding = |m: &NodeId| matches!(self.replicas[m.0 as usize].behavior, Behavior::Equivocate { .. });
            let (colluders, rest): (Vec<NodeId>, Vec<NodeId>) = others.iter().partition(|m| colluding(m));
            let half = rest.len().div_ceil(2);
            let mut b = batch.clone();
            b.header.timestamp += 1;
            let mut to_a = rest[..half].to_vec();
            let mut to_b = rest[half..].to_vec();
            to_a.extend(&colluders);
            to_b.extend(&colluders);
            plans.push((batch, to_a));
            plans.push((b, to_b));
        } else {
            plans.push((batch, others));
        }

        let r = &mut self.replicas[i];
        let l = r.leader.as_mut().expect("leader");
        let attempt = l.next_attempt;
        l.next_attempt += 1;
        let index = plans[0].0.index();
        let variants: Vec<Variant> = plans
            .into_iter()
            .map(|(b, recipients)| {
                let batch = Arc::new(b);
                let digest = batch.digest();
                Variant {
                    sigs: vec![sign_as(&r.key, behavior, &digest)],
                    batch,
                    digest,
                    snapshot: snapshot.clone(),
                    recipients,
                    responded: HashSet::new(),
                    certified: None,
                }
            })
            .collect();
        let sends: Vec<(NodeId, Arc<Batch>, Digest)> = variants
            .iter()
            .flat_map(|v| v.recipients.iter().map(move |to| (*to, v.batch.clone(), v.digest)))
            .collect();
        let mut candidates = forced;
        candidates.extend(cands);
        l.outstanding = Some(Outstanding {
            attempt,
            index,
            variants,
            candidates,
            decisions: used,
            applied: None,
            commit_sent: HashSet::new(),
        });
        let id = r.id;
        for (to, batch, digest) in sends {
            self.send(id, to, Msg::Propose { batch, digest, attempt });
        }
        self.net.set_timer(id, self.cfg.agreement_timeout, Timer::AgreementTimeout { attempt });
        self.leader_progress(i, false);
    }

    fn on_vote(&mut self, i: usize, from: NodeId, index: BatchId, attempt: u64, digest: Digest, sig: Option<Signature>) {
        let r = &mut self.replicas[i];
        let cluster = self.dir.cluster(r.partition).expect("own cluster");
        let Some(out) = r.leader.as_mut().and_then(|l| l.outstanding.as_mut()) else { return };
        if out.attempt != attempt || out.index != index {
            return;
        }
        let Some(v) = out.variants.iter_mut().find(|v| v.digest == digest && v.recipients.contains(&from)) else {
            return;
        };
        if !v.responded.insert(from) {
            return;
        }
        if let Some(s) = sig {
            if s.signer == from && cluster.keys.verify(&digest, &s) {
                v.sigs.push(s);
            }
        }
        self.leader_progress(i, false);
    }

    fn on_agreement_timeout(&mut self, i: usize, attempt: u64) {
        let matches = self.replicas[i]
            .leader
            .as_ref()
            .and_then(|l| l.outstanding.as_ref())
            .is_some_and(|o| o.attempt == attempt);
        if matches {
            self.leader_progress(i, true);
        }
    }

    /// Certifies whatever variant can be, sends commits, and settles the
    /// round once no variant can change outcome (or on timeout).
    fn leader_progress(&mut self, i: usize, timed_out: bool) {
        let r = &mut self.replicas[i];
        let me = r.id;
        let cluster = self.dir.cluster(r.partition).expect("own cluster");
        let q = cluster.agreement_quorum();
        let Some(out) = r.leader.as_mut().and_then(|l| l.outstanding.as_mut()) else { return };

        let mut commits: Vec<(NodeId, Arc<CertifiedBatch>)> = Vec::new();
        let mut apply: Option<(Arc<CertifiedBatch>, Snapshot)> = None;
        for (k, v) in out.variants.iter_mut().enumerate() {
            if v.certified.is_some() || v.sigs.len() < q {
                continue;
            }
            let Ok(certificate) = agreement_certify(cluster, v.digest, v.sigs.iter().copied()) else { continue };
            let cb = Arc::new(CertifiedBatch { batch: v.batch.clone(), digest: v.digest, certificate });
            v.certified = Some(cb.clone());
            if out.applied.is_none() {
                out.applied = Some(k);
                apply = Some((cb.clone(), v.snapshot.clone()));
            }
            for to in &v.recipients {
                if out.commit_sent.insert(*to) {
                    commits.push((*to, cb.clone()));
                }
            }
        }
        let settled = timed_out
            || out.variants.iter().all(|v| {
                let unanswered = v.recipients.iter().filter(|m| !v.responded.contains(m)).count();
                v.certified.is_some() || v.sigs.len() + unanswered < q
            });
        let mut failed = None;
        if settled {
            match out.applied {
                Some(k) => {
                    let cb = out.variants[k].certified.clone().expect("applied variant is certified");
                    for m in &cluster.members {
                        if *m != me && out.commit_sent.insert(*m) {
                            commits.push((*m, cb.clone()));
                        }
                    }
                }
                None => failed = Some((out.index, out.variants.len())),
            }
        }
        if settled {
            let l = r.leader.as_mut().expect("leader");
            let out = l.outstanding.take().expect("outstanding");
            if failed.is_some() {
                l.forced = out.candidates;
                for d in out.decisions.into_iter().rev() {
                    l.decisions.push_front(d);
                }
            }
        }

        if let Some((cb, snapshot)) = apply {
            self.emit(certified_event(&cb.batch, cb.digest));
            self.apply_certified(i, cb, Some(snapshot));
        }
        for (to, cert) in commits {
            self.send(me, to, Msg::Commit { cert });
        }
        if let Some((index, variants)) = failed {
            let partition = self.replicas[i].partition;
            self.emit(TraceEvent::AgreementFailed { partition, index, variants });
        }
    }

    // ---- agreement, replica side ----

    fn on_propose(&mut self, i: usize, from: NodeId, batch: Arc<Batch>, digest: Digest, attempt: u64) {
        let r = &mut self.replicas[i];
        if from != self.dir.cluster(r.partition).expect("own cluster").leader() || r.leader.is_some() {
            return;
        }
        let index = batch.index();
        if index < r.ledger.next_index() || batch.digest() != digest {
            return;
        }
        let list = r.proposals.entry(index).or_default();
        if list.iter().any(|p| p.attempt == attempt && p.digest == digest) {
            return;
        }
        list.push(Proposal { attempt, batch, digest, handled: false });
        self.replica_process(i);
    }

    fn on_commit(&mut self, i: usize, from: NodeId, cert: Arc<CertifiedBatch>) {
        let r = &mut self.replicas[i];
        let cluster = self.dir.cluster(r.partition).expect("own cluster");
        if from != cluster.leader() || r.leader.is_some() {
            return;
        }
        let index = cert.batch.index();
        if index < r.ledger.next_index() || r.commits.contains_key(&index) {
            return;
        }
        if !cert.verify(cluster) || cert.batch.digest() != cert.digest {
            return;
        }
        r.commits.insert(index, cert);
        self.replica_process(i);
    }

    /// Applies buffered commits in order, then votes on proposals for the
    /// next index.
    fn replica_process(&mut self, i: usize) {
        loop {
            let r = &mut self.replicas[i];
            if r.stuck {
                return;
            }
            let next = r.ledger.next_index();
            let Some(cb) = r.commits.remove(&next) else { break };
            let snapshot = r.staged.remove(&cb.digest).map(|(_, s)| s);
            self.apply_certified(i, cb, snapshot);
        }
        let clock = self.net.clock(self.replicas[i].id);
        let delta = self.cfg.delta;
        let r = &mut self.replicas[i];
        if r.stuck {
            return;
        }
        let next = r.ledger.next_index();
        r.proposals = r.proposals.split_off(&next);
        r.staged.retain(|_, (idx, _)| *idx >= next);
        let mut votes = Vec::new();
        if let Some(list) = r.proposals.get_mut(&next) {
            for p in list.iter_mut().filter(|p| !p.handled) {
                p.handled = true;
                let sig = match r.behavior {
                    Behavior::Equivocate { .. } => Some(r.key.sign(&p.digest)),
                    b => match r.voted.get(&(next, p.attempt)) {
                        Some(d) if *d != p.digest => None,
                        Some(_) => continue,
                        None => match validate_proposal(&r.ledger, &p.batch, &self.dir, clock, delta) {
                            Ok(st) => {
                                r.voted.insert((next, p.attempt), p.digest);
                                r.staged.insert(p.digest, (next, st.snapshot));
                                Some(sign_as(&r.key, b, &p.digest))
                            }
                            Err(_) => None,
                        },
                    },
                };
                votes.push(Msg::Vote { index: next, attempt: p.attempt, digest: p.digest, signature: sig });
            }
        }
        r.voted.retain(|(idx, _), _| *idx >= next);
        let (me, partition) = (r.id, r.partition);
        let leader = self.leader_of(partition);
        for v in votes {
            self.send(me, leader, v);
        }
    }

    fn apply_certified(&mut self, i: usize, cb: Arc<CertifiedBatch>, snapshot: Option<Snapshot>) {
        let r = &mut self.replicas[i];
        let (node, partition, index) = (r.id, r.partition, cb.batch.index());
        if let Err(e) = r.ledger.apply(cb.batch.clone(), snapshot) {
            r.stuck = true;
            self.emit(TraceEvent::ReplicaStuck { node, partition, index, error: e.to_string() });
            return;
        }
        let outputs = batch_outputs(&cb.batch);
        let digests = claim_digests(&cb.batch, &outputs);
        let sigs: Arc<Vec<Signature>> = Arc::new(digests.iter().map(|d| sign_as(&r.key, r.behavior, d)).collect());
        let is_leader = r.leader.is_some();
        if let Some(l) = r.leader.as_mut() {
            let mut shares = vec![(node, sigs.clone())];
            shares.extend(l.early_shares.remove(&index).unwrap_or_default());
            let done = vec![false; digests.len()];
            l.shares.insert(index, ShareCollect { outputs, digests, shares, done });
        }
        self.emit(TraceEvent::ReplicaApplied { node, partition, index, digest: cb.digest });
        if is_leader {
            self.try_assemble(i, index);
        } else {
            let leader = self.leader_of(partition);
            self.send(node, leader, Msg::ReplyShare { index, signatures: sigs });
        }
        self.serve_waiters(i);
    }

    // ---- reply certificates ----

    fn on_share(&mut self, i: usize, from: NodeId, index: BatchId, signatures: Arc<Vec<Signature>>) {
        let r = &mut self.replicas[i];
        let cluster = self.dir.cluster(r.partition).expect("own cluster");
        let Some(l) = r.leader.as_mut() else { return };
        if from == r.id || cluster.replica_index(from).is_none() {
            return;
        }
        match l.shares.get_mut(&index) {
            Some(sc) => {
                if sc.shares.iter().any(|(n, _)| *n == from) {
                    return;
                }
                sc.shares.push((from, signatures));
            }
            None => {
                // shares for a batch the leader already finished are stale
                if index >= r.ledger.next_index() {
                    let early = l.early_shares.entry(index).or_default();
                    if !early.iter().any(|(n, _)| *n == from) {
                        early.push((from, signatures));
                    }
                }
                return;
            }
        }
        self.try_assemble(i, index);
    }

    /// Certifies every claim of batch `index` that has `f+1` valid shares
    /// and acts on it.
    fn try_assemble(&mut self, i: usize, index: BatchId) {
        let r = &mut self.replicas[i];
        let cluster = self.dir.cluster(r.partition).expect("own cluster");
        let Some(l) = r.leader.as_mut() else { return };
        let Some(sc) = l.shares.get_mut(&index) else { return };
        if sc.shares.len() < cluster.reply_quorum() {
            return;
        }
        let mut ready: Vec<(usize, QuorumCertificate)> = Vec::new();
        for (j, d) in sc.digests.iter().enumerate() {
            if sc.done[j] {
                continue;
            }
            let sigs = sc.shares.iter().filter_map(|(_, s)| s.get(j).copied());
            if let Ok(qc) = reply_certify(cluster, *d, sigs) {
                sc.done[j] = true;
                ready.push((j, qc));
            }
        }
        let actions: Vec<(Option<Output>, QuorumCertificate)> =
            ready.into_iter().map(|(j, qc)| (j.checked_sub(1).map(|k| sc.outputs[k].clone()), qc)).collect();
        if sc.done.iter().all(|d| *d) {
            l.shares.remove(&index);
        }
        for (output, qc) in actions {
            match output {
                None => self.on_header_certified(i, index, Arc::new(qc)),
                Some(o) => self.on_output_certified(i, o, qc),
            }
        }
    }

    fn on_header_certified(&mut self, i: usize, index: BatchId, cert: Arc<QuorumCertificate>) {
        let r = &mut self.replicas[i];
        r.header_certs.insert(index, cert.clone());
        let me = r.id;
        let members = self.dir.cluster(r.partition).expect("own cluster").members.clone();
        for m in members {
            if m != me {
                self.send(me, m, Msg::HeaderCert { index, cert: cert.clone() });
            }
        }
        self.serve_waiters(i);
    }

    fn on_header_cert(&mut self, i: usize, from: NodeId, index: BatchId, cert: Arc<QuorumCertificate>) {
        let r = &mut self.replicas[i];
        let cluster = self.dir.cluster(r.partition).expect("own cluster");
        if from != cluster.leader() || !cert.verify(&cluster.keys) || (cert.threshold as usize) < cluster.reply_quorum() {
            return;
        }
        r.header_certs.insert(index, cert);
        self.serve_waiters(i);
    }

    fn on_output_certified(&mut self, i: usize, output: Output, qc: QuorumCertificate) {
        let me = self.replicas[i].id;
        let partition = self.replicas[i].partition;
        match output {
            Output::Reply { client, claim } => {
                let reply = Arc::new(ClientReply { claim, certificate: qc });
                self.send(me, client, Msg::Reply { reply });
            }
            Output::Vote { claim, txn, coordinator: true } => {
                let vote = Arc::new(claim.certify(qc));
                let l = self.replicas[i].leader.as_mut().expect("leader");
                let state = l.coordinators.entry(txn.id).or_insert_with(|| CoordinatorState::new(txn.clone()));
                let decided = state.on_prepared((*vote).clone());
                for p in txn.partitions.iter().filter(|p| **p != partition) {
                    let to = self.leader_of(*p);
                    self.send(me, to, Msg::CoordinatorPrepare { txn: txn.clone(), vote: vote.clone() });
                }
                if let Some(rec) = decided {
                    self.decide(i, txn.id, rec);
                }
            }
            Output::Vote { claim, txn, coordinator: false } => {
                let vote = Arc::new(claim.certify(qc));
                let coordinator = txn.coordinator.expect("distributed transaction");
                let to = self.leader_of(coordinator);
                self.send(me, to, Msg::Prepared { vote });
            }
        }
    }

    // ---- two-phase commit between leaders ----

    fn on_submit(&mut self, i: usize, txn: Arc<Transaction>) {
        let r = &mut self.replicas[i];
        let me = r.partition;
        let Some(l) = r.leader.as_mut() else { return };
        if txn.validate().is_err() || !txn.touches(me) || !l.seen.insert(txn.id) {
            return;
        }
        let cand = match txn.kind {
            TxnKind::Local => Candidate::Local(txn),
            TxnKind::Distributed if txn.coordinator == Some(me) => Candidate::CoordinatorPrepare(txn),
            _ => return,
        };
        l.queue.push_back(cand);
    }

    fn on_coordinator_prepare(&mut self, i: usize, txn: Arc<Transaction>, vote: Arc<PreparedMessage>) {
        let r = &mut self.replicas[i];
        let me = r.partition;
        let Some(l) = r.leader.as_mut() else { return };
        if let Ok(Some(c)) = l.participant.on_coordinator_prepare(me, txn, vote, &self.dir) {
            l.queue.push_back(c);
        }
    }

    fn on_prepared(&mut self, i: usize, vote: Arc<PreparedMessage>) {
        if !vote.verify(&self.dir) {
            return;
        }
        let Some(l) = self.replicas[i].leader.as_mut() else { return };
        let Some(state) = l.coordinators.get_mut(&vote.txn) else { return };
        if let Some(rec) = state.on_prepared((*vote).clone()) {
            self.decide(i, vote.txn, rec);
        }
    }

    fn decide(&mut self, i: usize, txn: TxnId, rec: crate::twopc::CommitRecord) {
        let r = &mut self.replicas[i];
        let (me, partition) = (r.id, r.partition);
        let l = r.leader.as_mut().expect("leader");
        let state = l.coordinators.remove(&txn).expect("decided transaction");
        let record = Arc::new(rec);
        let voters: Vec<PartitionId> = state.yes_voters().collect();
        if voters.contains(&partition) {
            l.decisions.push_back(record.clone());
        }
        self.emit(TraceEvent::CommitDecided {
            txn,
            coordinator: partition,
            decision: record.decision,
            reason: record.abort_reason(),
            votes: record
                .prepared
                .iter()
                .map(|m| VoteRec { partition: m.partition, prepare_batch: m.prepare_batch, yes: m.vote.is_yes() })
                .collect(),
        });
        for p in voters.into_iter().filter(|p| *p != partition) {
            let to = self.leader_of(p);
            self.send(me, to, Msg::Decision { record: record.clone() });
        }
    }

    fn on_decision(&mut self, i: usize, record: Arc<CommitRecord>) {
        let r = &mut self.replicas[i];
        let Some(l) = r.leader.as_mut() else { return };
        let Some(member) = r.ledger.prepared().member(record.txn) else { return };
        if record.verify(&member.txn, &self.dir).is_err() {
            return;
        }
        if l.participant.on_decision(record.txn) {
            l.decisions.push_back(record);
        }
    }

    // ---- read-only queries ----

    #[allow(clippy::too_many_arguments)]
    fn on_ro_query(
        &mut self,
        i: usize,
        from: NodeId,
        txn: TxnId,
        partition: PartitionId,
        keys: Arc<Vec<Key>>,
        required: Option<BatchId>,
        attempt: usize,
        round: u8,
    ) {
        let r = &mut self.replicas[i];
        if partition != r.partition {
            return;
        }
        let target = match required {
            None => Some(r.newest_certified().ok_or(RoError::NotReady)),
            Some(p) => match r.behavior {
                Behavior::StaleResponder { .. } => Some(r.newest_certified().ok_or(RoError::NotReady)),
                _ => r
                    .ledger
                    .earliest_with_lce(p)
                    .filter(|b| r.certified_header(*b).is_some())
                    .map(Ok),
            },
        };
        match target {
            Some(t) => {
                let result = t.and_then(|b| self.ro_response(i, b, &keys));
                let me = self.replicas[i].id;
                self.send(me, from, Msg::RoAnswer { txn, partition, attempt, round, result });
            }
            None => {
                let id = self.next_wait_id;
                self.next_wait_id += 1;
                let required = required.expect("round one always has a target");
                r.waiters.push(Waiter { id, client: from, txn, keys, required, attempt });
                let me = r.id;
                self.net.set_timer(me, self.cfg.dep_wait, Timer::DepWait { id });
            }
        }
    }

    fn ro_response(&self, i: usize, target: BatchId, keys: &[Key]) -> Result<Arc<RoResponse>, RoError> {
        let r = &self.replicas[i];
        let certificate = r.certified_header(target).ok_or(RoError::NotReady)?;
        let header = r.ledger.get_batch(target).map_err(|_| RoError::NotReady)?.header.clone();
        let mut proof = r.ledger.store().prove(keys, target).map_err(|_| RoError::WrongAnswer)?;
        if r.behavior == Behavior::ForgedProof {
            match proof.entries.first_mut().and_then(|e| e.siblings.first_mut()) {
                Some(s) => s.0[0] ^= 0xff,
                None => proof.root.0[0] ^= 0xff,
            }
        }
        Ok(Arc::new(RoResponse { responder: r.id, header, certificate: (*certificate).clone(), proof }))
    }

    /// Answers second-round queries whose dependency has now committed.
    fn serve_waiters(&mut self, i: usize) {
        let r = &mut self.replicas[i];
        if r.waiters.is_empty() {
            return;
        }
        let mut ready = Vec::new();
        let waiters = std::mem::take(&mut r.waiters);
        for w in waiters {
            match r.ledger.earliest_with_lce(w.required).filter(|b| r.certified_header(*b).is_some()) {
                Some(b) => ready.push((w, b)),
                None => r.waiters.push(w),
            }
        }
        let (me, partition) = (r.id, r.partition);
        for (w, b) in ready {
            let result = self.ro_response(i, b, &w.keys);
            self.send(me, w.client, Msg::RoAnswer { txn: w.txn, partition, attempt: w.attempt, round: 2, result });
        }
    }
}
