//! Every committed pair with a key-level conflict is ordered by the
//! serializability graph, checked by a brute-force pairwise scan.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use transedge::harness::oracle::{build_sg, Graph, History};
use transedge::harness;
use transedge::sim::SimConfig;
use transedge::harness::oracle::Committed;
use transedge::types::{Key, TxnId};

fn reach(g: &Graph) -> BTreeMap<TxnId, BTreeSet<TxnId>> {
    let succ = g.successors();
    g.nodes
        .iter()
        .map(|n| {
            let mut seen = BTreeSet::new();
            let mut q = VecDeque::from([*n]);
            while let Some(x) = q.pop_front() {
                for e in succ.get(&x).into_iter().flatten() {
                    if seen.insert(e.to) {
                        q.push_back(e.to);
                    }
                }
            }
            (*n, seen)
        })
        .collect()
}

/// `(a, b)` pairs that must be ordered a before b: both touch a key, one
/// writes it, and the versions say who came first.
fn conflicting_pairs(h: &History) -> Vec<(TxnId, TxnId, Key)> {
    let mut out = Vec::new();
    let txns: Vec<_> = h.txns.iter().collect();
    for (a, ca) in &txns {
        for (b, cb) in &txns {
            if a == b {
                continue;
            }
            for (k, va) in &ca.writes {
                for (k2, vb) in &cb.writes {
                    if k == k2 && va < vb {
                        out.push((**a, **b, k.clone()));
                    }
                }
                for (k2, vr) in &cb.reads {
                    if k == k2 && va <= vr {
                        out.push((**a, **b, k.clone()));
                    }
                }
            }
            for (k, vr) in &ca.reads {
                for (k2, vb) in &cb.writes {
                    if k == k2 && vr < vb {
                        out.push((**a, **b, k.clone()));
                    }
                }
            }
        }
    }
    out
}

fn check(cfg: SimConfig) -> usize {
    let out = harness::run(cfg).unwrap();
    let h = History::from_trace(&out.result.trace).unwrap();
    let g = build_sg(&h).unwrap();
    let r = reach(&g);
    let pairs = conflicting_pairs(&h);
    for (a, b, k) in &pairs {
        assert!(r[a].contains(b), "{a} and {b} conflict on {k} but the graph does not order them");
    }
    pairs.len()
}

#[test]
fn every_conflict_is_ordered() {
    for seed in 0..3 {
        let mut cfg = SimConfig { seed, n_clients: 8, ..SimConfig::default() };
        cfg.workload.n_keys = 150;
        cfg.workload.n_txns = 400;
        assert!(check(cfg) > 100);
    }
}

#[test]
fn initial_versions_order_readers_before_writers() {
    let mut h = History::default();
    h.txns.insert(TxnId(1), Committed { read_only: true, reads: vec![(Key::from("a"), -1)], writes: vec![] });
    h.txns.insert(TxnId(2), Committed { read_only: false, reads: vec![], writes: vec![(Key::from("a"), 4)] });
    let g = build_sg(&h).unwrap();
    assert_eq!(conflicting_pairs(&h), vec![(TxnId(1), TxnId(2), Key::from("a"))]);
    assert!(reach(&g)[&TxnId(1)].contains(&TxnId(2)));
}
