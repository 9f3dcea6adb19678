//! Deterministic discrete-event network.
//!
//! Events are ordered by delivery time, ties broken by the order they were
//! scheduled in. All randomness (latency, drops, duplicates) comes from one
//! seeded generator, so a seed and a schedule of sends fully determine the
//! delivery order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::NodeId;
use crate::types::SimTime;

/// Latency range and loss of one link, in ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkProfile {
    pub min: u64,
    pub max: u64,
    pub drop_rate: f64,
    pub dup_rate: f64,
}

impl LinkProfile {
    pub fn fixed(ms: u64) -> Self {
        LinkProfile { min: ms, max: ms, drop_rate: 0.0, dup_rate: 0.0 }
    }

    pub fn uniform(min: u64, max: u64) -> Self {
        LinkProfile { min, max: max.max(min), drop_rate: 0.0, dup_rate: 0.0 }
    }
}

/// How links are classified: nodes in the same group use `intra`, others
/// `inter`. Overrides win.
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub seed: u64,
    pub groups: HashMap<NodeId, u32>,
    pub intra: LinkProfile,
    pub inter: LinkProfile,
    pub overrides: HashMap<(NodeId, NodeId), LinkProfile>,
    pub clock_skew: HashMap<NodeId, i64>,
}

impl NetConfig {
    pub fn uniform(seed: u64, link: LinkProfile) -> Self {
        NetConfig {
            seed,
            groups: HashMap::new(),
            intra: link,
            inter: link,
            overrides: HashMap::new(),
            clock_skew: HashMap::new(),
        }
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> LinkProfile {
        if let Some(l) = self.overrides.get(&(from, to)) {
            return *l;
        }
        match (self.groups.get(&from), self.groups.get(&to)) {
            (Some(a), Some(b)) if a == b => self.intra,
            _ => self.inter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event<M, T> {
    Deliver { from: NodeId, to: NodeId, msg: M, sent_at: SimTime },
    Timer { node: NodeId, timer: T },
}

struct Scheduled<M, T> {
    at: SimTime,
    seq: u64,
    event: Event<M, T>,
}

impl<M, T> PartialEq for Scheduled<M, T> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<M, T> Eq for Scheduled<M, T> {}

impl<M, T> PartialOrd for Scheduled<M, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M, T> Ord for Scheduled<M, T> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
}

pub struct Net<M, T> {
    config: NetConfig,
    rng: ChaCha8Rng,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Scheduled<M, T>>,
    pub stats: NetStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    /// The condition held at `at`.
    Reached { at: SimTime },
    /// Nothing left to deliver.
    Idle { at: SimTime },
    /// The horizon passed with the condition unmet.
    Horizon { at: SimTime },
}

impl<M: Clone, T> Net<M, T> {
    pub fn new(config: NetConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Net { config, rng, now: 0, seq: 0, queue: BinaryHeap::new(), stats: NetStats::default() }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// The node's local clock, including its configured skew.
    pub fn clock(&self, node: NodeId) -> SimTime {
        self.now.saturating_add_signed(self.config.clock_skew.get(&node).copied().unwrap_or(0))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    fn push(&mut self, at: SimTime, event: Event<M, T>) {
        self.seq += 1;
        self.queue.push(Scheduled { at, seq: self.seq, event });
    }

    fn sample(&mut self, link: LinkProfile) -> u64 {
        if link.max <= link.min {
            link.min
        } else {
            self.rng.gen_range(link.min..=link.max)
        }
    }

    pub fn send(&mut self, from: NodeId, to: NodeId, msg: M) {
        self.stats.sent += 1;
        if from == to {
            let now = self.now;
            self.push(now, Event::Deliver { from, to, msg, sent_at: now });
            return;
        }
        let link = self.config.link(from, to);
        if link.drop_rate > 0.0 && self.rng.gen_bool(link.drop_rate.min(1.0)) {
            self.stats.dropped += 1;
            return;
        }
        if link.dup_rate > 0.0 && self.rng.gen_bool(link.dup_rate.min(1.0)) {
            self.stats.duplicated += 1;
            let at = self.now + self.sample(link);
            let now = self.now;
            self.push(at, Event::Deliver { from, to, msg: msg.clone(), sent_at: now });
        }
        let at = self.now + self.sample(link);
        let now = self.now;
        self.push(at, Event::Deliver { from, to, msg, sent_at: now });
    }

    pub fn set_timer(&mut self, node: NodeId, after: u64, timer: T) {
        let at = self.now + after;
        self.push(at, Event::Timer { node, timer });
    }

    /// Next event if it is due by `horizon`; advances the clock.
    pub fn pop_until(&mut self, horizon: SimTime) -> Option<Event<M, T>> {
        if self.queue.peek()?.at > horizon {
            return None;
        }
        let s = self.queue.pop()?;
        debug_assert!(s.at >= self.now);
        self.now = s.at;
        if matches!(s.event, Event::Deliver { .. }) {
            self.stats.delivered += 1;
        }
        Some(s.event)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Processes events in order until `done` holds, the queue drains or
    /// the next event lies beyond `horizon`.
    pub fn run_until<S>(
        &mut self,
        state: &mut S,
        horizon: SimTime,
        mut done: impl FnMut(&S) -> bool,
        mut handle: impl FnMut(&mut S, &mut Self, Event<M, T>),
    ) -> RunOutcome {
        loop {
            if done(state) {
                return RunOutcome::Reached { at: self.now };
            }
            match self.pop_until(horizon) {
                Some(ev) => handle(state, self, ev),
                None if self.queue.is_empty() => return RunOutcome::Idle { at: self.now },
                None => return RunOutcome::Horizon { at: self.now },
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type TestNet = Net<u32, ()>;

    fn deliveries(seed: u64, link: LinkProfile) -> Vec<(SimTime, u32)> {
        let mut net: TestNet = Net::new(NetConfig::uniform(seed, link));
        for i in 0..50 {
            net.send(NodeId(0), NodeId(1 + i % 3), i);
        }
        let mut out = Vec::new();
        while let Some(ev) = net.pop_until(u64::MAX) {
            if let Event::Deliver { msg, .. } = ev {
                out.push((net.now(), msg));
            }
        }
        out
    }

    #[test]
    fn fixed_latency() {
        let d = deliveries(1, LinkProfile::fixed(5));
        assert_eq!(d.len(), 50);
        assert!(d.iter().all(|(t, _)| *t == 5));
        // ties resolve in send order
        assert_eq!(d.iter().map(|(_, m)| *m).collect::<Vec<_>>(), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn full_drop_delivers_nothing() {
        let link = LinkProfile { drop_rate: 1.0, ..LinkProfile::fixed(5) };
        assert!(deliveries(1, link).is_empty());
    }

    #[test]
    fn same_seed_same_schedule() {
        let link = LinkProfile { dup_rate: 0.2, drop_rate: 0.1, ..LinkProfile::uniform(1, 40) };
        assert_eq!(deliveries(9, link), deliveries(9, link));
        assert_ne!(deliveries(9, link), deliveries(10, link));
    }

    #[test]
    fn duplicates_counted() {
        let link = LinkProfile { dup_rate: 1.0, ..LinkProfile::fixed(2) };
        assert_eq!(deliveries(1, link).len(), 100);
    }

    #[test]
    fn run_until_reports_outcomes() {
        let mut net: TestNet = Net::new(NetConfig::uniform(0, LinkProfile::fixed(10)));
        let mut seen = 0u32;
        assert_eq!(net.run_until(&mut seen, 100, |_| false, |_, _, _| {}), RunOutcome::Idle { at: 0 });
        net.send(NodeId(0), NodeId(1), 1);
        net.send(NodeId(0), NodeId(1), 2);
        net.set_timer(NodeId(1), 500, ());
        let r = net.run_until(&mut seen, 100, |s| *s >= 2, |s, _, ev| {
            if matches!(ev, Event::Deliver { .. }) {
                *s += 1;
            }
        });
        assert_eq!(r, RunOutcome::Reached { at: 10 });
        let r = net.run_until(&mut seen, 100, |_| false, |_, _, _| {});
        assert_eq!(r, RunOutcome::Horizon { at: 10 });
    }

    #[test]
    fn causality_and_skew() {
        let mut cfg = NetConfig::uniform(3, LinkProfile::uniform(1, 30));
        cfg.clock_skew.insert(NodeId(1), -4);
        let mut net: TestNet = Net::new(cfg);
        for i in 0..20 {
            net.send(NodeId(0), NodeId(1), i);
        }
        while let Some(ev) = net.pop_until(u64::MAX) {
            if let Event::Deliver { sent_at, .. } = ev {
                assert!(net.now() > sent_at);
            }
        }
        assert_eq!(net.clock(NodeId(1)), net.now() - 4);
    }

    #[test]
    fn groups_pick_link_class() {
        let mut cfg = NetConfig::uniform(0, LinkProfile::fixed(1));
        cfg.inter = LinkProfile::fixed(50);
        cfg.groups.insert(NodeId(0), 0);
        cfg.groups.insert(NodeId(1), 0);
        cfg.groups.insert(NodeId(2), 1);
        assert_eq!(cfg.link(NodeId(0), NodeId(1)).min, 1);
        assert_eq!(cfg.link(NodeId(0), NodeId(2)).min, 50);
        assert_eq!(cfg.link(NodeId(0), NodeId(9)).min, 50);
    }
}
