//! Scenario builders and criterion checks shared by the integration tests
//! and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transedge::conflict::{Transaction, TxnKind, WriteEntry};
use transedge::crypto::{Canonical, Digest, NodeId, QuorumCertificate};
use transedge::harness::audit::{self, AuditReport};
use transedge::harness::trace::TraceEvent;
use transedge::harness::{self, RunOutput};
use transedge::ledger::{Batch, Candidate, Ledger, LedgerConfig};
use transedge::readonly::{derive_dep_vector, CdVector};
use transedge::sim::{RoMode, SimConfig};
use transedge::twopc::{CommitRecord, Decision, PreparedMessage, Vote};
use transedge::types::{BatchId, Key, PartitionId, TxnId, Value, NO_BATCH};

/// Result of one acceptance criterion.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

/// Desk scale: 3 partitions, f=1, 10k keys, 2k mixed transactions.
pub fn desk(seed: u64) -> SimConfig {
    SimConfig { seed, ..SimConfig::default() }
}

/// At most one faulty replica per cluster, drawn from the whole catalogue.
/// Leader misbehaviour uses a rate below 1 so the cluster keeps making
/// progress without a view change.
pub fn catalogue_faults(seed: u64, n_partitions: usize, f: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6661_756c_7473);
    let n = 3 * f + 1;
    let mut items = Vec::new();
    for p in 0..n_partitions {
        let follower = rng.gen_range(1..n);
        let any = rng.gen_range(0..n);
        let item = match rng.gen_range(0..8) {
            0 => continue,
            1 => format!("{p}.0:equivocate:rate={:.2}", rng.gen_range(0.1..0.5)),
            2 => format!("{p}.{follower}:equivocate"),
            3 => format!("{p}.0:bad_cd_vector:rate={:.2}", rng.gen_range(0.1..0.5)),
            4 => format!("{p}.{any}:stale_responder:lag={}", rng.gen_range(1..20)),
            5 => format!("{p}.{any}:forged_proof"),
            6 => format!("{p}.{follower}:mute"),
            _ => format!("{p}.{follower}:forge_sig"),
        };
        items.push(item);
    }
    items.join(",")
}

pub fn run(cfg: SimConfig) -> RunOutput {
    let faults = cfg.faults.clone();
    harness::run(cfg).unwrap_or_else(|e| panic!("run with faults {faults:?}: {e}"))
}

/// Per-run facts the fuzz criteria need.
#[derive(Debug, Clone)]
pub struct FuzzRun {
    pub seed: u64,
    pub faults: String,
    pub completed: bool,
    pub report: AuditReport,
    pub max_rounds: u8,
}

pub fn fuzz_run(seed: u64) -> FuzzRun {
    let mut cfg = desk(seed);
    cfg.faults = catalogue_faults(seed, cfg.workload.n_partitions, cfg.workload.f);
    let faults = cfg.faults.clone();
    let out = run(cfg);
    let max_rounds = out
        .result
        .trace
        .events()
        .filter_map(|r| match &r.event {
            TraceEvent::RoDone { rounds, .. } => Some(*rounds),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    FuzzRun { seed, faults, completed: out.result.completed, report: out.report, max_rounds }
}

fn first_violation(runs: &[FuzzRun], check: &str) -> String {
    runs.iter()
        .find_map(|r| r.report.violations.iter().find(|v| v.check == check).map(|v| format!("seed {} [{}]: {}", r.seed, r.faults, v.detail)))
        .unwrap_or_default()
}

/// Criterion 1: every run completes and its serializability graph is acyclic.
pub fn serializability_fuzz(runs: &[FuzzRun]) -> Outcome {
    let cyclic = runs.iter().filter(|r| !r.report.is_clean(audit::SERIALIZABILITY)).count();
    let stalled = runs.iter().filter(|r| !r.completed).count();
    let other: BTreeMap<&str, usize> = runs
        .iter()
        .flat_map(|r| r.report.violations.iter())
        .filter(|v| ![audit::SERIALIZABILITY, audit::RO_RECHECK, audit::TWO_ROUND, audit::SAFETY].contains(&v.check))
        .fold(BTreeMap::new(), |mut m, v| {
            *m.entry(v.check).or_default() += 1;
            m
        });
    let mut detail = format!("{} runs, {cyclic} cyclic, {stalled} incomplete, other invariant violations {other:?}", runs.len());
    if cyclic > 0 {
        detail += &format!("; first: {}", first_violation(runs, audit::SERIALIZABILITY));
    }
    Outcome::new(cyclic == 0 && stalled == 0 && other.is_empty(), detail)
}

/// Criterion 2: at most two rounds, and the final combined view satisfies
/// the dependency check.
pub fn two_round(runs: &[FuzzRun]) -> Outcome {
    let ro: usize = runs.iter().map(|r| r.report.ro_done).sum();
    let round2: usize = runs.iter().map(|r| r.report.ro_round2).sum();
    let over: usize = runs.iter().map(|r| r.report.count(audit::TWO_ROUND)).sum();
    let recheck: usize = runs.iter().map(|r| r.report.count(audit::RO_RECHECK)).sum();
    let max_rounds = runs.iter().map(|r| r.max_rounds).max().unwrap_or(0);
    let mut detail = format!(
        "{ro} read-only txns, {round2} used round 2, max rounds {max_rounds}, {over} round violations, {recheck} final views failing re-verification"
    );
    if recheck > 0 {
        detail += &format!("; first: {}", first_violation(runs, audit::RO_RECHECK));
    }
    Outcome::new(over == 0 && recheck == 0, detail)
}

/// Criterion 9, positive half: honest replicas never diverge.
pub fn safety_fuzz(runs: &[FuzzRun]) -> Outcome {
    let bad: usize = runs.iter().map(|r| r.report.count(audit::SAFETY) + r.report.count(audit::VALIDITY)).sum();
    let faulted = runs.iter().filter(|r| !r.faults.is_empty()).count();
    let mut detail = format!("{} runs ({faulted} with faults), {bad} divergent or stuck honest replicas", runs.len());
    if bad > 0 {
        detail += &format!("; first: {}", first_violation(runs, audit::SAFETY));
    }
    Outcome::new(bad == 0, detail)
}

/// Criterion 9, negative control: f+1 colluding equivocators split a cluster.
pub fn equivocation_control(seeds: impl IntoIterator<Item = u64>) -> Outcome {
    let mut detected = Vec::new();
    for seed in seeds {
        let mut cfg = desk(seed);
        cfg.workload.n_txns = 300;
        cfg.faults = "0.0:equivocate,0.1:equivocate".into();
        cfg.unsafe_faults = true;
        detected.push(run(cfg).report.count(audit::SAFETY));
    }
    let pass = detected.iter().all(|d| *d >= 1);
    Outcome::new(pass, format!("divergent indices detected per seed with 2 equivocators at f=1: {detected:?}"))
}

/// Read-only-only workload with one client, so every message is attributable.
pub fn ro_only(seed: u64, n_partitions: usize, mode: RoMode) -> SimConfig {
    let mut cfg = desk(seed);
    cfg.n_clients = 1;
    cfg.ro_mode = mode;
    let w = &mut cfg.workload;
    w.n_partitions = n_partitions;
    w.n_txns = 60;
    w.mix_local = 0;
    w.mix_distributed = 0;
    w.mix_read_only = 100;
    w.mix_write_only = 0;
    cfg
}

fn net_sent(out: &RunOutput) -> u64 {
    out.result
        .trace
        .events()
        .find_map(|r| match &r.event {
            TraceEvent::NetStats { sent, .. } => Some(*sent),
            _ => None,
        })
        .unwrap_or(0)
}

/// Criterion 4: per-transaction message formula, no read-only ids in the
/// protocol, and fewer messages and lower latency than the 2PC/BFT baseline.
pub fn commit_freedom(seed: u64) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in 2..=5 {
        let te = run(ro_only(seed, n, RoMode::TransEdge));
        let base = run(ro_only(seed, n, RoMode::Baseline));
        let formula = te.report.count(audit::COMMIT_FREEDOM);
        let (m_te, m_base) = (net_sent(&te), net_sent(&base));
        let lat = |o: &RunOutput| o.metrics.row("read_only").map_or(0.0, |r| r.lat_mean_ms);
        let (l_te, l_base) = (lat(&te), lat(&base));
        let ok = formula == 0 && m_te < m_base && l_te < l_base && te.result.completed && base.result.completed;
        pass &= ok;
        parts.push(format!("{n} clusters: msgs {m_te} vs {m_base}, latency {l_te:.1} vs {l_base:.1} ms, formula violations {formula}"));
    }
    Outcome::new(pass, parts.join("; "))
}

/// Criterion 3: long read-only transactions never cause read-write aborts.
pub fn non_interference(seed: u64) -> Outcome {
    let mut cfg = desk(seed);
    cfg.workload.n_keys = 2_000;
    cfg.workload.ro_keys_per_txn = 60;
    let out = run(cfg);
    let rw_aborts: u64 = ["local_rw", "distributed_rw", "write_only"]
        .iter()
        .filter_map(|k| out.metrics.row(k))
        .map(|r| r.aborted)
        .sum();
    let attributed = out.report.ro_attributed_aborts;
    let leaked = out.report.count(audit::NON_INTERFERENCE);
    Outcome::new(
        attributed == 0 && leaked == 0 && out.result.completed,
        format!("{rw_aborts} read-write aborts, {attributed} attributed to read-only txns, {leaked} read-only ids in batches"),
    )
}

/// Criterion 10: identical inputs give identical trace hashes.
pub fn determinism(seed: u64, runs: usize) -> Outcome {
    let mut cfg = desk(seed);
    cfg.faults = catalogue_faults(seed, 3, 1);
    let hashes: BTreeSet<Digest> = (0..runs).map(|_| run(cfg.clone()).result.trace_hash()).collect();
    let h = hashes.iter().next().map(|d| d.to_hex()[..16].to_owned()).unwrap_or_default();
    Outcome::new(hashes.len() == 1, format!("{runs} runs of seed {seed} with faults [{}]: {} distinct hashes ({h}..)", cfg.faults, hashes.len()))
}

/// Adversarial schedule for the dependency check: few hot keys and widely
/// varying inter-cluster delays, so partitions drain a distributed
/// transaction far apart in time.
pub fn adversarial(seed: u64, mode: RoMode) -> SimConfig {
    let mut cfg = desk(seed);
    cfg.ro_mode = mode;
    cfg.workload.n_keys = 60;
    cfg.workload.n_txns = 400;
    cfg.inter_latency_min = 5;
    cfg.inter_latency_max = 150;
    cfg
}

/// Whether a cycle passes through a read-only transaction: the fractured
/// read of a transaction's writes.
pub fn ro_cycle(out: &RunOutput) -> bool {
    let ro: BTreeSet<TxnId> = out
        .result
        .trace
        .events()
        .filter_map(|r| match &r.event {
            TraceEvent::RoDone { txn, .. } => Some(*txn),
            _ => None,
        })
        .collect();
    out.report.cycle.as_ref().is_some_and(|c| c.txns.iter().any(|t| ro.contains(t)))
}

/// Criterion 7: the mutant that skips the dependency check reads
/// inconsistently and the oracle catches it; the real client does not.
pub fn fractured_reads(seeds: std::ops::Range<u64>) -> Outcome {
    let (mut mutant, mut real, mut real_other) = (0, 0, 0);
    let mut first = String::new();
    for seed in seeds.clone() {
        if ro_cycle(&run(adversarial(seed, RoMode::SkipDependencyCheck))) {
            mutant += 1;
        }
        let out = run(adversarial(seed, RoMode::TransEdge));
        if ro_cycle(&out) {
            real += 1;
            if first.is_empty() {
                first = format!("; first real cycle seed {seed}: {}", out.report.cycle.as_ref().expect("cycle"));
            }
        } else if out.report.cycle.is_some() {
            real_other += 1;
        }
    }
    let n = seeds.end - seeds.start;
    Outcome::new(
        mutant >= 1 && real == 0 && real_other == 0,
        format!("{n} seeds: mutant read-only cycles in {mutant}, real client cycles in {real} (+{real_other} without a read-only txn){first}"),
    )
}

/// Criterion 8: throughput falls and round-one latency rises by one round
/// trip as inter-cluster latency grows.
pub fn latency_sweep(seed: u64, values: &[u64]) -> Outcome {
    let mut base = desk(seed);
    base.workload.n_txns = 1_000;
    let vals: Vec<String> = values.iter().map(u64::to_string).collect();
    let rows = harness::bench(&base, "latency", &vals).expect("bench");
    let mut pass = true;
    let mut notes = Vec::new();
    for (i, w) in rows.windows(2).enumerate() {
        let step = (values[i + 1] - values[i]) as f64;
        let tput_ok = w[1].dist_throughput_tps <= w[0].dist_throughput_tps;
        let grew = w[1].ro_round1_lat_mean_ms - w[0].ro_round1_lat_mean_ms;
        // one client round trip crosses the added latency twice
        let rtt_ok = (grew - 2.0 * step).abs() <= 0.1 * 2.0 * step + 5.0;
        pass &= tput_ok && rtt_ok;
        notes.push(format!(
            "+{step}ms: tput {:.1}->{:.1}{}, round1 +{grew:.1}ms (expect {:.0}){}",
            w[0].dist_throughput_tps,
            w[1].dist_throughput_tps,
            if tput_ok { "" } else { " RISE" },
            2.0 * step,
            if rtt_ok { "" } else { " OFF" }
        ));
    }
    Outcome::new(pass, notes.join("; "))
}

// ---- CD vector oracle ----

fn empty_qc() -> QuorumCertificate {
    QuorumCertificate { digest: Digest::default(), signatures: vec![], threshold: 0 }
}

struct SimTxn {
    parts: Vec<usize>,
    prepared: BTreeMap<usize, BatchId>,
    committed: BTreeSet<usize>,
}

/// One random history of prepares and commits over up to six partitions.
/// Every batch's CD vector from `derive_dep_vector` is compared with the
/// latest batch per partition reachable in the dependency graph: a batch
/// reaches its predecessor and, for each transaction committed in it, the
/// batch where that transaction prepared at each partition.
pub fn cd_closure_case(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let n = rng.gen_range(2..=6);
    let steps = rng.gen_range(5..60);
    let mut cds: Vec<Vec<CdVector>> = vec![Vec::new(); n];
    let mut commits: Vec<Vec<Vec<usize>>> = vec![Vec::new(); n];
    let mut txns: Vec<SimTxn> = Vec::new();
    let mut checked = 0;
    for _ in 0..steps {
        let x = rng.gen_range(0..n);
        let i = cds[x].len() as BatchId;
        let mut committing = Vec::new();
        for (id, t) in txns.iter_mut().enumerate() {
            if !t.parts.contains(&x) || t.committed.contains(&x) {
                continue;
            }
            let ready = t.parts.iter().all(|p| t.prepared.contains_key(p)) && t.prepared[&x] < i;
            if ready && rng.gen_bool(0.5) {
                committing.push(id);
                t.committed.insert(x);
            } else if !t.prepared.contains_key(&x) && rng.gen_bool(0.5) {
                t.prepared.insert(x, i);
            }
        }
        if rng.gen_bool(0.6) {
            let mut parts: Vec<usize> = (0..n).filter(|p| *p != x && rng.gen_bool(0.4)).collect();
            if parts.is_empty() {
                parts.push((x + 1) % n);
            }
            parts.push(x);
            parts.sort_unstable();
            txns.push(SimTxn { parts, prepared: BTreeMap::from([(x, i)]), committed: BTreeSet::new() });
        }
        let records: Vec<CommitRecord> = committing
            .iter()
            .map(|id| {
                let t = &txns[*id];
                CommitRecord {
                    txn: TxnId(*id as u64),
                    txn_digest: Digest::default(),
                    decision: Decision::Commit,
                    prepared: t
                        .parts
                        .iter()
                        .map(|p| PreparedMessage {
                            txn: TxnId(*id as u64),
                            txn_digest: Digest::default(),
                            partition: PartitionId(*p as u16),
                            vote: Vote::Yes,
                            prepare_batch: t.prepared[p],
                            cd_vector: cds[*p][t.prepared[p] as usize].clone(),
                            certificate: empty_qc(),
                        })
                        .collect(),
                }
            })
            .collect();
        let prev = cds[x].last().cloned().unwrap_or_else(|| CdVector::initial(n));
        let got = derive_dep_vector(&prev, i, PartitionId(x as u16), &records);
        cds[x].push(got.clone());
        commits[x].push(committing);

        let expected = closure(n, x, i as usize, &commits, &txns);
        if got.0 != expected {
            return Err(format!("partition {x} batch {i}: derived {:?}, closure {expected:?}", got.0));
        }
        checked += 1;
    }
    Ok(checked)
}

fn closure(n: usize, x: usize, i: usize, commits: &[Vec<Vec<usize>>], txns: &[SimTxn]) -> Vec<BatchId> {
    let mut best = vec![NO_BATCH; n];
    let mut seen = BTreeSet::new();
    let mut stack = vec![(x, i)];
    while let Some((p, j)) = stack.pop() {
        if !seen.insert((p, j)) {
            continue;
        }
        best[p] = best[p].max(j as BatchId);
        if j > 0 {
            stack.push((p, j - 1));
        }
        for t in &commits[p][j] {
            for (q, pb) in &txns[*t].prepared {
                stack.push((*q, *pb as usize));
            }
        }
    }
    best
}

/// Criterion 5.
pub fn cd_closure(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = 0;
    for c in 0..cases {
        match cd_closure_case(&mut rng) {
            Ok(n) => batches += n,
            Err(e) => return Outcome::new(false, format!("case {c}: {e}")),
        }
    }
    Outcome::new(true, format!("{cases} random histories, {batches} batches, 0 mismatches"))
}

// ---- worked example ----

const X: PartitionId = PartitionId(0);
const Y: PartitionId = PartitionId(1);

fn write(p: PartitionId, k: &str) -> WriteEntry {
    WriteEntry { partition: p, key: Key::from(k), value: Value::from("v") }
}

fn local(id: u64, p: PartitionId, k: &str) -> Candidate {
    Candidate::Local(Arc::new(Transaction {
        id: TxnId(id),
        kind: TxnKind::Local,
        client: NodeId(0),
        coordinator: None,
        partitions: vec![p],
        reads: vec![],
        writes: vec![write(p, k)],
    }))
}

fn seal(l: &mut Ledger, cands: Vec<Candidate>, decisions: &[Arc<CommitRecord>]) -> Arc<Batch> {
    let mut ip = l.open();
    for c in cands {
        ip.append(c).expect("append");
    }
    for d in decisions {
        ip.record_decision(d.clone()).expect("decision");
    }
    let staged = ip.seal_forced(0).expect("seal");
    let b = Arc::new(staged.batch);
    l.apply(b.clone(), Some(staged.snapshot)).expect("apply");
    b
}

fn vote(t: &Transaction, p: PartitionId, batch: &Batch) -> PreparedMessage {
    PreparedMessage {
        txn: t.id,
        txn_digest: t.digest(),
        partition: p,
        vote: Vote::Yes,
        prepare_batch: batch.index(),
        cd_vector: batch.header.cd_vector.clone(),
        certificate: empty_qc(),
    }
}

/// The scenario of the worked example: `t3..t5` span X and Y, prepare in
/// `b0^X` and `b5^Y`, and commit in `b2^X` and `b8^Y`; every other batch
/// holds a local transaction. Returns `(V_2^X, lce(b_2^X), V_8^Y)`.
pub fn worked_example() -> (Vec<BatchId>, BatchId, Vec<BatchId>) {
    let cfg = LedgerConfig::default();
    let mut lx = Ledger::new(X, 2, ["x0", "x1", "x3", "x4", "x5"].map(Key::from), cfg.clone());
    let mut ly = Ledger::new(Y, 2, (0..8).map(|i| Key::from(format!("y{i}").as_str())).chain(["y3", "y4", "y5"].map(Key::from)), cfg);
    let dist: Vec<Arc<Transaction>> = (3..=5)
        .map(|i| {
            Arc::new(Transaction {
                id: TxnId(i),
                kind: TxnKind::Distributed,
                client: NodeId(0),
                coordinator: Some(X),
                partitions: vec![X, Y],
                reads: vec![],
                writes: vec![write(X, &format!("x{i}")), write(Y, &format!("y{i}"))],
            })
        })
        .collect();

    let bx0 = seal(&mut lx, dist.iter().cloned().map(Candidate::CoordinatorPrepare).collect(), &[]);
    let mut id = 100;
    let mut next = || {
        id += 1;
        id
    };
    for i in 0..5 {
        seal(&mut ly, vec![local(next(), Y, &format!("y{i}"))], &[]);
    }
    let x_votes: Vec<Arc<PreparedMessage>> = dist.iter().map(|t| Arc::new(vote(t, X, &bx0))).collect();
    let by5 = seal(
        &mut ly,
        dist.iter()
            .zip(&x_votes)
            .map(|(t, v)| Candidate::ParticipantPrepare { txn: t.clone(), coordinator_vote: v.clone() })
            .collect(),
        &[],
    );
    let records: Vec<Arc<CommitRecord>> = dist
        .iter()
        .map(|t| {
            Arc::new(CommitRecord {
                txn: t.id,
                txn_digest: t.digest(),
                decision: Decision::Commit,
                prepared: vec![vote(t, X, &bx0), vote(t, Y, &by5)],
            })
        })
        .collect();
    seal(&mut lx, vec![local(next(), X, "x1")], &[]);
    let bx2 = seal(&mut lx, vec![], &records);
    for i in 6..8 {
        seal(&mut ly, vec![local(next(), Y, &format!("y{i}"))], &[]);
    }
    let by8 = seal(&mut ly, vec![], &records);
    assert_eq!((bx2.index(), by8.index()), (2, 8));
    (bx2.header.cd_vector.0.clone(), bx2.header.lce, by8.header.cd_vector.0.clone())
}

/// Criterion 6.
pub fn worked_example_golden() -> Outcome {
    let (v2x, lce, v8y) = worked_example();
    Outcome::new(
        v2x == [2, 5] && lce == 0 && v8y[0] == 0,
        format!("V_2^X = {v2x:?}, lce(b_2^X) = {lce}, V_8^Y = {v8y:?}"),
    )
}

