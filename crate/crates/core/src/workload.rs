//! Transactional workload generation and the flat `key = value` config
//! format shared by every run setting.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Key, PartitionId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value}")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Parses flat `key = value` text. `#` starts a comment; blank lines are
/// ignored. Later duplicates win when applied in order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.push((k.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub n_partitions: usize,
    pub f: usize,
    pub n_keys: usize,
    pub key_size: usize,
    pub value_size: usize,
    pub n_txns: usize,
    pub mix_local: u32,
    pub mix_distributed: u32,
    pub mix_read_only: u32,
    pub mix_write_only: u32,
    pub reads_per_txn: usize,
    pub writes_per_txn: usize,
    /// Partitions a distributed transaction spans; 0 means all.
    pub dist_partitions: usize,
    pub ro_keys_per_txn: usize,
    /// Partitions a read-only transaction spans; 0 means all.
    pub ro_partitions_per_txn: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            n_partitions: 3,
            f: 1,
            n_keys: 10_000,
            key_size: 8,
            value_size: 16,
            n_txns: 2_000,
            mix_local: 30,
            mix_distributed: 45,
            mix_read_only: 20,
            mix_write_only: 5,
            reads_per_txn: 5,
            writes_per_txn: 3,
            dist_partitions: 0,
            ro_keys_per_txn: 5,
            ro_partitions_per_txn: 0,
        }
    }
}

impl WorkloadConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n_partitions",
        "f",
        "replicas_per_cluster",
        "n_keys",
        "key_size",
        "value_size",
        "n_txns",
        "mix_local",
        "mix_distributed",
        "mix_read_only",
        "mix_write_only",
        "reads_per_txn",
        "writes_per_txn",
        "dist_partitions",
        "ro_keys_per_txn",
        "ro_partitions_per_txn",
    ];

    /// Sets one field. Returns `Ok(false)` if `key` is not a workload key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "n_partitions" | "clusters" => self.n_partitions = parse_value(key, value)?,
            "f" => self.f = parse_value(key, value)?,
            "replicas_per_cluster" => {
                let n: usize = parse_value(key, value)?;
                if n == 0 || !(n - 1).is_multiple_of(3) {
                    return Err(ConfigError::BadValue { key: key.into(), value: value.into() });
                }
                self.f = (n - 1) / 3;
            }
            "n_keys" => self.n_keys = parse_value(key, value)?,
            "key_size" => self.key_size = parse_value(key, value)?,
            "value_size" => self.value_size = parse_value(key, value)?,
            "n_txns" => self.n_txns = parse_value(key, value)?,
            "mix_local" => self.mix_local = parse_value(key, value)?,
            "mix_distributed" => self.mix_distributed = parse_value(key, value)?,
            "mix_read_only" => self.mix_read_only = parse_value(key, value)?,
            "mix_write_only" => self.mix_write_only = parse_value(key, value)?,
            "reads_per_txn" => self.reads_per_txn = parse_value(key, value)?,
            "writes_per_txn" => self.writes_per_txn = parse_value(key, value)?,
            "dist_partitions" => self.dist_partitions = parse_value(key, value)?,
            "ro_keys_per_txn" => self.ro_keys_per_txn = parse_value(key, value)?,
            "ro_partitions_per_txn" => self.ro_partitions_per_txn = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn replicas_per_cluster(&self) -> usize {
        3 * self.f + 1
    }

    fn dist_span(&self) -> usize {
        match self.dist_partitions {
            0 => self.n_partitions,
            s => s.min(self.n_partitions),
        }
    }

    fn ro_span(&self) -> usize {
        match self.ro_partitions_per_txn {
            0 => self.n_partitions,
            s => s.min(self.n_partitions),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::InvalidConfig(m.into()));
        if self.n_partitions == 0 || self.n_partitions > u16::MAX as usize {
            return bad("n_partitions must be positive");
        }
        if self.mix_local + self.mix_distributed + self.mix_read_only + self.mix_write_only != 100 {
            return bad("mix must sum to 100");
        }
        if self.n_keys < self.n_partitions {
            return bad("fewer keys than partitions");
        }
        if self.key_size < digits(self.n_keys) + 1 {
            return bad("key_size too small to name every key");
        }
        let dist_used = self.mix_distributed > 0 || self.mix_write_only > 0;
        if dist_used && (self.n_partitions < 2 || self.dist_span() < 2) {
            return bad("distributed transactions need at least two partitions");
        }
        if self.mix_distributed > 0 && self.reads_per_txn + self.writes_per_txn < self.dist_span() {
            return bad("distributed transactions need one operation per spanned partition");
        }
        if self.mix_write_only > 0 && self.writes_per_txn < self.dist_span() {
            return bad("write-only transactions need one write per spanned partition");
        }
        if self.mix_read_only > 0 && (self.ro_keys_per_txn == 0 || self.ro_keys_per_txn < self.ro_span()) {
            return bad("read-only transactions need one key per spanned partition");
        }
        // each transaction draws distinct keys per partition
        let per_partition = self.n_keys / self.n_partitions;
        let need = [
            self.reads_per_txn.max(self.writes_per_txn),
            self.ro_keys_per_txn.div_ceil(self.ro_span().max(1)),
        ];
        if need.iter().any(|n| *n > per_partition / 2) {
            return bad("too few keys per partition for the transaction size");
        }
        Ok(())
    }

    /// Every key name in generation order.
    pub fn key_names(&self) -> Vec<Key> {
        let width = self.key_size - 1;
        (0..self.n_keys).map(|i| Key(format!("k{i:0width$}"))).collect()
    }
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

/// FNV-1a, the hash that places keys on partitions.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn partition_of(key: &Key, n_partitions: usize) -> PartitionId {
    PartitionId((fnv1a(key.as_bytes()) % n_partitions as u64) as u16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    LocalRw,
    DistributedRw,
    ReadOnly,
    WriteOnly,
}

impl fmt::Display for GenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenKind::LocalRw => "local",
            GenKind::DistributedRw => "distributed",
            GenKind::ReadOnly => "read_only",
            GenKind::WriteOnly => "write_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Op {
    pub kind: OpKind,
    pub partition: PartitionId,
    pub key: Key,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedTxn {
    pub seq: u64,
    pub kind: GenKind,
    /// Operations in program order.
    pub ops: Vec<Op>,
}

impl GeneratedTxn {
    pub fn partitions(&self) -> BTreeSet<PartitionId> {
        self.ops.iter().map(|o| o.partition).collect()
    }

    pub fn reads(&self) -> impl Iterator<Item = &Op> {
        self.ops.iter().filter(|o| o.kind == OpKind::Read)
    }

    pub fn writes(&self) -> impl Iterator<Item = &Op> {
        self.ops.iter().filter(|o| o.kind == OpKind::Write)
    }

    /// Partition with the most operations, lowest id on ties.
    pub fn coordinator(&self) -> PartitionId {
        let parts = self.partitions();
        *parts
            .iter()
            .max_by_key(|p| (self.ops.iter().filter(|o| o.partition == **p).count(), std::cmp::Reverse(**p)))
            .expect("transaction has operations")
    }
}

/// Deterministic generator over a validated config.
pub struct Generator {
    config: WorkloadConfig,
    rng: ChaCha8Rng,
    by_partition: Vec<Vec<Key>>,
    next: u64,
}

impl Generator {
    pub fn new(config: &WorkloadConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut by_partition = vec![Vec::new(); config.n_partitions];
        for k in config.key_names() {
            by_partition[partition_of(&k, config.n_partitions).index()].push(k);
        }
        if by_partition.iter().any(Vec::is_empty) {
            return Err(ConfigError::InvalidConfig("a partition owns no keys".into()));
        }
        Ok(Generator { config: config.clone(), rng: ChaCha8Rng::seed_from_u64(seed), by_partition, next: 0 })
    }

    pub fn keys_of(&self, p: PartitionId) -> &[Key] {
        &self.by_partition[p.index()]
    }

    fn pick_kind(&mut self) -> GenKind {
        let c = &self.config;
        let roll = self.rng.gen_range(0..100);
        let mut acc = c.mix_local;
        if roll < acc {
            return GenKind::LocalRw;
        }
        acc += c.mix_distributed;
        if roll < acc {
            return GenKind::DistributedRw;
        }
        acc += c.mix_read_only;
        if roll < acc {
            return GenKind::ReadOnly;
        }
        GenKind::WriteOnly
    }

    fn pick_partitions(&mut self, span: usize) -> Vec<PartitionId> {
        let mut all: Vec<PartitionId> = (0..self.config.n_partitions as u16).map(PartitionId).collect();
        all.shuffle(&mut self.rng);
        all.truncate(span);
        all
    }

    /// Spreads `kinds` round-robin over `parts`, drawing distinct keys per
    /// partition and operation kind.
    fn assign(&mut self, parts: &[PartitionId], kinds: &[OpKind]) -> Vec<Op> {
        let mut slots: Vec<Vec<OpKind>> = vec![Vec::new(); parts.len()];
        for (i, k) in kinds.iter().enumerate() {
            slots[i % parts.len()].push(*k);
        }
        let mut ops = Vec::with_capacity(kinds.len());
        for (p, slot) in parts.iter().zip(slots) {
            for kind in [OpKind::Read, OpKind::Write] {
                let n = slot.iter().filter(|k| **k == kind).count();
                let keys = &self.by_partition[p.index()];
                let chosen: Vec<Key> = keys.choose_multiple(&mut self.rng, n).cloned().collect();
                ops.extend(chosen.into_iter().map(|key| Op { kind, partition: *p, key }));
            }
        }
        ops
    }

    pub fn next_txn(&mut self) -> GeneratedTxn {
        let kind = self.pick_kind();
        let c = self.config.clone();
        let reads = |n| std::iter::repeat_n(OpKind::Read, n);
        let writes = |n| std::iter::repeat_n(OpKind::Write, n);
        let ops = match kind {
            GenKind::LocalRw => {
                let p = self.pick_partitions(1);
                let kinds: Vec<_> = reads(c.reads_per_txn).chain(writes(c.writes_per_txn)).collect();
                self.assign(&p, &kinds)
            }
            GenKind::DistributedRw => {
                let p = self.pick_partitions(c.dist_span());
                // interleave so every spanned partition gets an operation
                let mut kinds: Vec<_> = reads(c.reads_per_txn).chain(writes(c.writes_per_txn)).collect();
                if kinds.iter().take(p.len()).all(|k| *k == OpKind::Read) && c.writes_per_txn > 0 {
                    kinds.rotate_right(c.writes_per_txn.min(p.len()));
                }
                self.assign(&p, &kinds)
            }
            GenKind::WriteOnly => {
                let p = self.pick_partitions(c.dist_span());
                self.assign(&p, &writes(c.writes_per_txn).collect::<Vec<_>>())
            }
            GenKind::ReadOnly => {
                let p = self.pick_partitions(c.ro_span());
                self.assign(&p, &reads(c.ro_keys_per_txn).collect::<Vec<_>>())
            }
        };
        let seq = self.next;
        self.next += 1;
        GeneratedTxn { seq, kind, ops }
    }
}

impl Iterator for Generator {
    type Item = GeneratedTxn;

    fn next(&mut self) -> Option<GeneratedTxn> {
        (self.next < self.config.n_txns as u64).then(|| self.next_txn())
    }
}

pub fn generate(config: &WorkloadConfig, seed: u64) -> Result<Vec<GeneratedTxn>, ConfigError> {
    Ok(Generator::new(config, seed)?.collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn audit(c: &WorkloadConfig, txns: &[GeneratedTxn]) {
        assert_eq!(txns.len(), c.n_txns);
        for t in txns {
            let span = t.partitions().len();
            match t.kind {
                GenKind::LocalRw => assert_eq!(span, 1),
                GenKind::DistributedRw | GenKind::WriteOnly => assert!(span >= 2, "{t:?}"),
                GenKind::ReadOnly => assert!(t.writes().next().is_none()),
            }
            for o in &t.ops {
                assert_eq!(partition_of(&o.key, c.n_partitions), o.partition);
            }
            let mut seen = BTreeSet::new();
            for o in &t.ops {
                assert!(seen.insert((o.kind, o.key.clone())), "duplicate op in {t:?}");
            }
            assert!(t.partitions().contains(&t.coordinator()));
        }
    }

    #[test]
    fn desk_scale_respects_spans() {
        let c = WorkloadConfig::default();
        audit(&c, &generate(&c, 1).unwrap());
    }

    #[test]
    fn five_cluster_mix() {
        let c = WorkloadConfig {
            n_partitions: 5,
            f: 2,
            n_keys: 5_000,
            mix_local: 0,
            mix_distributed: 80,
            mix_read_only: 20,
            mix_write_only: 0,
            n_txns: 500,
            ..WorkloadConfig::default()
        };
        let txns = generate(&c, 3).unwrap();
        audit(&c, &txns);
        for t in &txns {
            let parts = t.partitions();
            match t.kind {
                GenKind::ReadOnly => {
                    assert_eq!(parts.len(), 5);
                    assert_eq!(t.ops.len(), 5);
                }
                _ => {
                    assert_eq!((t.reads().count(), t.writes().count()), (5, 3));
                    assert_eq!(parts.len(), 5);
                }
            }
        }
    }

    #[test]
    fn all_local_mix() {
        let c = WorkloadConfig { mix_local: 100, mix_distributed: 0, mix_read_only: 0, mix_write_only: 0, ..Default::default() };
        assert!(generate(&c, 2).unwrap().iter().all(|t| t.partitions().len() == 1));
    }

    #[test]
    fn reproducible_by_seed() {
        let c = WorkloadConfig { n_txns: 200, ..Default::default() };
        assert_eq!(generate(&c, 5).unwrap(), generate(&c, 5).unwrap());
        assert_ne!(generate(&c, 5).unwrap(), generate(&c, 6).unwrap());
    }

    #[test]
    fn keys_spread_over_partitions() {
        let c = WorkloadConfig::default();
        let g = Generator::new(&c, 0).unwrap();
        for p in 0..3 {
            let n = g.keys_of(PartitionId(p)).len();
            assert!((3000..3700).contains(&n), "partition {p} owns {n}");
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            WorkloadConfig { mix_local: 50, ..Default::default() },
            WorkloadConfig { n_partitions: 1, ..Default::default() },
            WorkloadConfig { key_size: 3, ..Default::default() },
            WorkloadConfig { n_keys: 20, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(ConfigError::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn kv_parsing() {
        let text = "# desk\nn_txns = 10 # short\n\nmix_local=100\nmix_distributed = 0\n";
        let kv = parse_kv(text).unwrap();
        assert_eq!(kv[0], ("n_txns".into(), "10".into()));
        let mut c = WorkloadConfig::default();
        for (k, v) in &kv {
            assert!(c.set(k, v).unwrap());
        }
        assert_eq!(c.n_txns, 10);
        assert_eq!(parse_kv("oops"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(c.set("n_keys", "many"), Err(ConfigError::BadValue { .. })));
        assert_eq!(c.set("colour", "red"), Ok(false));
        assert!(c.set("replicas_per_cluster", "7").unwrap());
        assert_eq!(c.f, 2);
        assert!(c.set("replicas_per_cluster", "6").is_err());
    }
}
