//! Deterministic simulation of a full deployment: one cluster of `3f+1`
//! replicas per partition (replica 0 leads) and closed-loop clients, wired
//! through [`crate::net`].
//!
//! Cross-cluster traffic goes leader to leader and carries `f+1`
//! certificates; the per-replica fan-out is not modelled.

mod client;
mod config;
pub mod msg;
mod replica;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{RoMode, SimConfig};
use client::Client;
use msg::{Msg, Timer};
use replica::Replica;

use crate::consensus::Directory;
use crate::crypto::{Digest, NodeId};
use crate::faults::{parse_faults, FaultError, FaultPlan};
use crate::harness::trace::{Trace, TraceEvent, SCHEMA_VERSION};
use crate::ledger::{Ledger, LedgerConfig};
use crate::net::{Event, LinkProfile, Net, NetConfig};
use crate::types::{Key, PartitionId, SimTime, TxnId, Value};
use crate::workload::{ConfigError, GenKind, Generator};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Faults(#[from] FaultError),
}

/// Result of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    pub completed: bool,
    pub end_time: SimTime,
}

impl RunResult {
    pub fn trace_hash(&self) -> Digest {
        self.trace.hash()
    }
}

pub struct Sim {
    cfg: SimConfig,
    dir: Arc<Directory>,
    net: Net<Msg, Timer>,
    replicas: Vec<Replica>,
    clients: Vec<Client>,
    trace: Trace,
    adversary: ChaCha8Rng,
    ro_ids: HashSet<TxnId>,
    msg_counts: BTreeMap<&'static str, u64>,
    ro_in_protocol: u64,
    clients_done: usize,
    next_wait_id: u64,
}

/// Deterministic write value for `key` in `txn`.
pub fn value_for(txn: TxnId, key: &Key, size: usize) -> Value {
    let d = Digest::of(format!("{}/{}", txn.0, key.0).as_bytes());
    Value(d.0.iter().cycle().take(size).copied().collect())
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let w = &cfg.workload;
        let faults = parse_faults(&cfg.faults)?;
        let plan = FaultPlan::resolve(&faults, w.n_partitions, w.f, cfg.unsafe_faults)?;
        let mut key_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (dir, pairs) = Directory::generate(w.n_partitions, w.f, cfg.signature, &mut key_rng);
        let dir = Arc::new(dir);
        let generator = Generator::new(w, cfg.seed)?;
        let ledger_cfg = LedgerConfig { seal_empty: cfg.seal_empty, root_retention: None };
        let n_replicas = dir.n_replicas();

        let mut replicas = Vec::with_capacity(n_replicas);
        for key in pairs {
            let (p, r) = dir.locate(key.node).expect("generated node");
            let ledger = Ledger::new(p, w.n_partitions, generator.keys_of(p).iter().cloned(), ledger_cfg.clone());
            let behavior = plan.behavior(key.node);
            replicas.push(Replica::new(key, p, behavior, ledger, r == 0));
        }

        let mut adversary = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6164_7665_7273_6172);
        let txns: Vec<_> = generator.collect();
        let ro_ids: HashSet<TxnId> = if cfg.ro_mode == RoMode::Baseline {
            HashSet::new()
        } else {
            txns.iter().filter(|t| t.kind == GenKind::ReadOnly).map(|t| TxnId(t.seq)).collect()
        };
        let mut clients: Vec<Client> =
            (0..cfg.n_clients).map(|i| Client::new(NodeId((n_replicas + i) as u32))).collect();
        for t in txns {
            let c = t.seq as usize % cfg.n_clients;
            clients[c].txns.push_back(t);
        }

        let link = |min: u64, max: u64| LinkProfile {
            min: min.max(1),
            max: max.max(min).max(1),
            drop_rate: cfg.drop_rate,
            dup_rate: cfg.dup_rate,
        };
        let mut net_cfg = NetConfig::uniform(cfg.seed ^ 0x6e65_7477_6f72_6b00, link(cfg.intra_latency_min, cfg.intra_latency_max));
        net_cfg.inter = link(cfg.inter_latency_min + cfg.extra_latency, cfg.inter_latency_max + cfg.extra_latency);
        let client_link = link(cfg.client_latency_min + cfg.extra_latency, cfg.client_latency_max + cfg.extra_latency);
        for r in &replicas {
            net_cfg.groups.insert(r.id, r.partition.0 as u32);
        }
        let skew = cfg.clock_skew as i64;
        for node in (0..n_replicas + cfg.n_clients).map(|i| NodeId(i as u32)) {
            if skew > 0 {
                net_cfg.clock_skew.insert(node, adversary.gen_range(-skew..=skew));
            }
        }
        for c in &clients {
            for r in &replicas {
                net_cfg.overrides.insert((c.id, r.id), client_link);
                net_cfg.overrides.insert((r.id, c.id), client_link);
            }
        }

        let mut trace = Trace::default();
        trace.push(0, TraceEvent::Header {
            schema_version: SCHEMA_VERSION,
            seed: cfg.seed,
            config: cfg.to_map(),
            faults: cfg.faults.clone(),
            n_partitions: w.n_partitions,
            replicas_per_cluster: w.replicas_per_cluster(),
            faulty: plan.faulty_nodes().map(|(n, _)| n).collect(),
        });

        Ok(Sim {
            net: Net::new(net_cfg),
            cfg,
            dir,
            replicas,
            clients,
            trace,
            adversary,
            ro_ids,
            msg_counts: BTreeMap::new(),
            ro_in_protocol: 0,
            clients_done: 0,
            next_wait_id: 0,
        })
    }

    pub fn directory(&self) -> &Directory {
        &self.dir
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Ledger of replica `node`.
    pub fn ledger(&self, node: NodeId) -> &Ledger {
        &self.replicas[node.0 as usize].ledger
    }

    fn emit(&mut self, event: TraceEvent) -> u64 {
        self.trace.push(self.net.now(), event)
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: Msg) {
        *self.msg_counts.entry(msg.type_name()).or_default() += 1;
        if !self.ro_ids.is_empty() {
            let hits = msg.protocol_txn_ids().into_iter().filter(|t| self.ro_ids.contains(t)).count();
            self.ro_in_protocol += hits as u64;
        }
        self.net.send(from, to, msg);
    }

    fn is_replica(&self, node: NodeId) -> bool {
        (node.0 as usize) < self.replicas.len()
    }

    fn leader_of(&self, p: PartitionId) -> NodeId {
        self.dir.cluster(p).expect("known partition").leader()
    }

    /// Runs to completion or the horizon.
    pub fn run(mut self) -> RunResult {
        self.start();
        let horizon = self.cfg.horizon;
        while self.clients_done < self.clients.len() {
            let Some(ev) = self.net.pop_until(horizon) else { break };
            self.dispatch(ev);
        }
        self.finish()
    }

    fn start(&mut self) {
        for i in 0..self.replicas.len() {
            if self.replicas[i].leader.is_some() {
                // the first batch carries nothing but gives read-only
                // clients a certified header to read from
                self.try_propose(i, true);
                let id = self.replicas[i].id;
                self.net.set_timer(id, self.cfg.batch_interval, Timer::SealTick);
            }
        }
        for c in 0..self.clients.len() {
            let id = self.clients[c].id;
            self.net.set_timer(id, self.cfg.start_delay, Timer::ClientNext);
        }
    }

    fn dispatch(&mut self, ev: Event<Msg, Timer>) {
        match ev {
            Event::Deliver { from, to, msg, .. } => {
                if self.is_replica(to) {
                    self.replica_msg(to.0 as usize, from, msg);
                } else {
                    self.client_msg(to.0 as usize - self.replicas.len(), from, msg);
                }
            }
            Event::Timer { node, timer } => {
                if self.is_replica(node) {
                    self.replica_timer(node.0 as usize, timer);
                } else {
                    self.client_timer(node.0 as usize - self.replicas.len(), timer);
                }
            }
        }
    }

    fn finish(mut self) -> RunResult {
        let stats = self.net.stats;
        let completed = self.clients_done == self.clients.len();
        self.emit(TraceEvent::NetStats {
            sent: stats.sent,
            delivered: stats.delivered,
            dropped: stats.dropped,
            duplicated: stats.duplicated,
            by_type: self.msg_counts.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect(),
            ro_ids_in_protocol: self.ro_in_protocol,
        });
        self.emit(TraceEvent::End { completed, outstanding_clients: self.clients.len() - self.clients_done });
        RunResult { end_time: self.net.now(), trace: self.trace, completed }
    }
}

/// Builds and runs one simulation.
pub fn run(cfg: SimConfig) -> Result<RunResult, SimError> {
    Ok(Sim::new(cfg)?.run())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small(seed: u64) -> SimConfig {
        let mut c = SimConfig { seed, n_clients: 8, ..Default::default() };
        c.workload.n_keys = 200;
        c.workload.n_txns = 200;
        c
    }

    fn count(r: &RunResult, kind: &str) -> usize {
        r.trace
            .events()
            .filter(|e| serde_json::to_value(&e.event).unwrap()["kind"] == kind)
            .count()
    }

    #[test]
    fn small_run_completes() {
        let r = run(small(3)).unwrap();
        assert!(r.completed, "ended at {}", r.end_time);
        let replies = count(&r, "reply");
        let ro = count(&r, "ro_done");
        assert_eq!(replies + ro, 200);
    }

    #[test]
    fn small_run_passes_audit() {
        use crate::harness::audit;
        for seed in 0..4 {
            let r = run(small(seed)).unwrap();
            let rep = audit::audit(&r.trace).unwrap();
            // the read-only recheck is stricter than the protocol guarantees
            let bad: Vec<_> = rep.violations.iter().filter(|v| v.check != audit::RO_RECHECK).collect();
            assert!(bad.is_empty(), "seed {seed}: {:?}", &bad[..bad.len().min(5)]);
        }
    }
}
