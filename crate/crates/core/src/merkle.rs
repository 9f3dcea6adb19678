//! Authenticated key-value snapshots.
//!
//! The tree is binary over the partition's declared keys in lexicographic
//! order, padded to a power of two. Every declared key owns a slot for its
//! whole lifetime, so a key that was never written is proved absent by the
//! absent-leaf hash sitting in its slot.
//!
//! Updates copy only the path from the touched leaf to the root, which
//! lets every historical root stay provable for the cost of `O(log n)`
//! nodes per write.
//!
//! Hashing:
//!
//! ```text
//! present leaf  = H(0x00 || key || value || version)
//! absent leaf   = H(0x03 || key)
//! padding leaf  = H(0x02)
//! inner node    = H(0x01 || left || right)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Canonical, Digest, Encoder, KeySet, QuorumCertificate};
use crate::types::{BatchId, Key, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MerkleError {
    #[error("version {version} does not advance past {last}")]
    VersionRegression { version: BatchId, last: BatchId },
    #[error("no root recorded for batch {0}")]
    UnknownBatch(BatchId),
    #[error("key {0} has no slot in this store")]
    UnknownKey(Key),
}

fn present_leaf_hash(key: &Key, value: &Value, version: BatchId) -> Digest {
    let mut e = Encoder::new();
    e.u8(0x00);
    key.encode(&mut e);
    value.encode(&mut e);
    e.i64(version);
    Digest::of(e.as_bytes())
}

fn absent_leaf_hash(key: &Key) -> Digest {
    let mut e = Encoder::new();
    e.u8(0x03);
    key.encode(&mut e);
    Digest::of(e.as_bytes())
}

pub fn padding_leaf_hash() -> Digest {
    Digest::of(&[0x02])
}

fn inner_hash(left: &Digest, right: &Digest) -> Digest {
    let mut buf = [0u8; 65];
    buf[0] = 0x01;
    buf[1..33].copy_from_slice(&left.0);
    buf[33..].copy_from_slice(&right.0);
    Digest::of(&buf)
}

/// Hash of a leaf as seen by a verifier.
pub fn leaf_hash(key: &Key, entry: Option<(&Value, BatchId)>) -> Digest {
    match entry {
        Some((v, ver)) => present_leaf_hash(key, v, ver),
        None => absent_leaf_hash(key),
    }
}

#[derive(Debug)]
enum Node {
    Leaf { hash: Digest, entry: Option<(Value, BatchId)> },
    Branch { hash: Digest, children: [Arc<Node>; 2] },
}

impl Node {
    fn hash(&self) -> &Digest {
        match self {
            Node::Leaf { hash, .. } | Node::Branch { hash, .. } => hash,
        }
    }
}

#[derive(Debug)]
struct Layout {
    keys: Vec<Key>,
    slots: HashMap<Key, usize>,
    depth: u32,
}

impl Layout {
    fn new(mut keys: Vec<Key>) -> Self {
        keys.sort();
        keys.dedup();
        let depth = if keys.len() <= 1 { 0 } else { usize::BITS - (keys.len() - 1).leading_zeros() };
        let slots = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Layout { keys, slots, depth }
    }

    fn width(&self) -> usize {
        1usize << self.depth
    }
}

fn build(layout: &Layout, entries: &HashMap<Key, (Value, BatchId)>) -> Arc<Node> {
    let pad = Arc::new(Node::Leaf { hash: padding_leaf_hash(), entry: None });
    let mut level: Vec<Arc<Node>> = (0..layout.width())
        .map(|slot| match layout.keys.get(slot) {
            None => pad.clone(),
            Some(key) => {
                let entry = entries.get(key).cloned();
                let hash = leaf_hash(key, entry.as_ref().map(|(v, ver)| (v, *ver)));
                Arc::new(Node::Leaf { hash, entry })
            }
        })
        .collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let hash = inner_hash(pair[0].hash(), pair[1].hash());
                Arc::new(Node::Branch { hash, children: [pair[0].clone(), pair[1].clone()] })
            })
            .collect();
    }
    level.pop().expect("width is at least one")
}

fn update(node: &Arc<Node>, depth: u32, slot: usize, leaf: Arc<Node>) -> Arc<Node> {
    if depth == 0 {
        return leaf;
    }
    match node.as_ref() {
        Node::Branch { children, .. } => {
            let bit = (slot >> (depth - 1)) & 1;
            let mut kids = children.clone();
            kids[bit] = update(&children[bit], depth - 1, slot, leaf);
            let hash = inner_hash(kids[0].hash(), kids[1].hash());
            Arc::new(Node::Branch { hash, children: kids })
        }
        Node::Leaf { .. } => unreachable!("leaf above depth 0"),
    }
}

/// An immutable view of the tree at one version.
#[derive(Debug, Clone)]
pub struct Snapshot {
    layout: Arc<Layout>,
    root: Arc<Node>,
}

impl Snapshot {
    pub fn root(&self) -> Digest {
        *self.root.hash()
    }

    fn leaf(&self, slot: usize) -> (&Option<(Value, BatchId)>, Vec<Digest>) {
        let mut siblings = Vec::with_capacity(self.layout.depth as usize);
        let mut node = &self.root;
        for level in (0..self.layout.depth).rev() {
            let bit = (slot >> level) & 1;
            match node.as_ref() {
                Node::Branch { children, .. } => {
                    siblings.push(*children[1 - bit].hash());
                    node = &children[bit];
                }
                Node::Leaf { .. } => unreachable!(),
            }
        }
        siblings.reverse();
        match node.as_ref() {
            Node::Leaf { entry, .. } => (entry, siblings),
            Node::Branch { .. } => unreachable!(),
        }
    }

    pub fn get(&self, key: &Key) -> Option<(Value, BatchId)> {
        let slot = *self.layout.slots.get(key)?;
        self.leaf(slot).0.clone()
    }

    /// Applies writes without touching any store. Keys outside the layout
    /// force a full rebuild over the enlarged key set.
    pub fn with_writes(&self, writes: &[(Key, Value)], version: BatchId) -> Snapshot {
        if writes.iter().any(|(k, _)| !self.layout.slots.contains_key(k)) {
            let mut entries: HashMap<Key, (Value, BatchId)> = HashMap::new();
            for (slot, key) in self.layout.keys.iter().enumerate() {
                if let Some(e) = self.leaf(slot).0 {
                    entries.insert(key.clone(), e.clone());
                }
            }
            let mut keys = self.layout.keys.clone();
            for (k, v) in writes {
                keys.push(k.clone());
                entries.insert(k.clone(), (v.clone(), version));
            }
            let layout = Arc::new(Layout::new(keys));
            let root = build(&layout, &entries);
            return Snapshot { layout, root };
        }
        let mut root = self.root.clone();
        for (key, value) in writes {
            let slot = self.layout.slots[key];
            let hash = present_leaf_hash(key, value, version);
            let leaf = Arc::new(Node::Leaf { hash, entry: Some((value.clone(), version)) });
            root = update(&root, self.layout.depth, slot, leaf);
        }
        Snapshot { layout: self.layout.clone(), root }
    }

    pub fn prove(&self, keys: &[Key], batch: BatchId) -> Result<MerkleProof, MerkleError> {
        let entries = keys
            .iter()
            .map(|key| {
                let slot = *self.layout.slots.get(key).ok_or_else(|| MerkleError::UnknownKey(key.clone()))?;
                let (entry, siblings) = self.leaf(slot);
                Ok(ProofEntry {
                    key: key.clone(),
                    value: entry.as_ref().map(|(v, _)| v.clone()),
                    version: entry.as_ref().map(|(_, ver)| *ver),
                    slot: slot as u64,
                    siblings,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MerkleProof { entries, root: self.root(), root_batch: batch })
    }
}

/// Per-partition store with a history of roots, one per applied batch.
#[derive(Debug, Clone)]
pub struct MerkleStore {
    current: Snapshot,
    history: BTreeMap<BatchId, Snapshot>,
    last_version: Option<BatchId>,
    retain: Option<usize>,
}

impl MerkleStore {
    /// A store whose layout covers `keys`. Nothing is recorded in the
    /// history until the first [`apply_writes`](Self::apply_writes).
    pub fn new(keys: impl IntoIterator<Item = Key>) -> Self {
        let layout = Arc::new(Layout::new(keys.into_iter().collect()));
        let root = build(&layout, &HashMap::new());
        MerkleStore {
            current: Snapshot { layout, root },
            history: BTreeMap::new(),
            last_version: None,
            retain: None,
        }
    }

    /// Keep only the newest `depth` roots. `None` keeps everything.
    pub fn with_retention(mut self, depth: Option<usize>) -> Self {
        self.retain = depth;
        self
    }

    pub fn root(&self) -> Digest {
        self.current.root()
    }

    pub fn latest_version(&self) -> Option<BatchId> {
        self.last_version
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.current
    }

    pub fn snapshot_at(&self, batch: BatchId) -> Result<&Snapshot, MerkleError> {
        self.history.get(&batch).ok_or(MerkleError::UnknownBatch(batch))
    }

    pub fn root_at(&self, batch: BatchId) -> Option<Digest> {
        self.history.get(&batch).map(Snapshot::root)
    }

    pub fn get(&self, key: &Key) -> Option<(Value, BatchId)> {
        self.current.get(key)
    }

    /// Computes what [`apply_writes`](Self::apply_writes) would produce,
    /// leaving the store untouched.
    pub fn stage(&self, writes: &[(Key, Value)], version: BatchId) -> Result<Snapshot, MerkleError> {
        if let Some(last) = self.last_version {
            if version <= last {
                return Err(MerkleError::VersionRegression { version, last });
            }
        }
        Ok(self.current.with_writes(writes, version))
    }

    /// Records a snapshot produced by [`stage`](Self::stage) under `version`.
    pub fn commit(&mut self, snapshot: Snapshot, version: BatchId) -> Result<Digest, MerkleError> {
        if let Some(last) = self.last_version {
            if version <= last {
                return Err(MerkleError::VersionRegression { version, last });
            }
        }
        let root = snapshot.root();
        self.history.insert(version, snapshot.clone());
        self.current = snapshot;
        self.last_version = Some(version);
        if let Some(depth) = self.retain {
            while self.history.len() > depth.max(1) {
                self.history.pop_first();
            }
        }
        Ok(root)
    }

    pub fn apply_writes(&mut self, writes: &[(Key, Value)], version: BatchId) -> Result<Digest, MerkleError> {
        let staged = self.stage(writes, version)?;
        self.commit(staged, version)
    }

    pub fn prove(&self, keys: &[Key], at_batch: BatchId) -> Result<MerkleProof, MerkleError> {
        self.snapshot_at(at_batch)?.prove(keys, at_batch)
    }
}

/// One proved key. `value`/`version` are `None` for a proof of absence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofEntry {
    pub key: Key,
    pub value: Option<Value>,
    pub version: Option<BatchId>,
    pub slot: u64,
    /// Sibling hashes from the leaf level up to just below the root.
    pub siblings: Vec<Digest>,
}

impl ProofEntry {
    pub fn recompute_root(&self) -> Option<Digest> {
        let entry = match (&self.value, self.version) {
            (Some(v), Some(ver)) => Some((v, ver)),
            (None, None) => None,
            _ => return None,
        };
        if self.siblings.len() < 64 && self.slot >> self.siblings.len() != 0 {
            return None;
        }
        let mut acc = leaf_hash(&self.key, entry);
        for (level, sib) in self.siblings.iter().enumerate() {
            acc = if (self.slot >> level) & 1 == 0 { inner_hash(&acc, sib) } else { inner_hash(sib, &acc) };
        }
        Some(acc)
    }
}

impl Canonical for ProofEntry {
    fn encode(&self, enc: &mut Encoder) {
        self.key.encode(enc);
        enc.option(self.value.as_ref());
        enc.option(self.version.as_ref());
        enc.u64(self.slot);
        enc.seq(&self.siblings);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub entries: Vec<ProofEntry>,
    pub root: Digest,
    pub root_batch: BatchId,
}

impl MerkleProof {
    /// True iff every entry hashes up to `self.root`.
    pub fn is_consistent(&self) -> bool {
        self.entries.iter().all(|e| e.recompute_root() == Some(self.root))
    }

    pub fn get(&self, key: &Key) -> Option<&ProofEntry> {
        self.entries.iter().find(|e| &e.key == key)
    }
}

impl Canonical for MerkleProof {
    fn encode(&self, enc: &mut Encoder) {
        enc.seq(&self.entries).digest(&self.root).i64(self.root_batch);
    }
}

/// A signed statement that includes a Merkle root for a given batch.
pub trait CoversRoot: Canonical {
    fn merkle_root(&self) -> Digest;
    fn batch(&self) -> BatchId;
}

/// Minimal claim binding only a root to a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootClaim {
    pub root: Digest,
    pub batch: BatchId,
}

impl Canonical for RootClaim {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.root).i64(self.batch);
    }
}

impl CoversRoot for RootClaim {
    fn merkle_root(&self) -> Digest {
        self.root
    }
    fn batch(&self) -> BatchId {
        self.batch
    }
}

/// Client-side check of a proof against a certified claim.
pub fn verify_proof<C: CoversRoot>(
    proof: &MerkleProof,
    claim: &C,
    certificate: &QuorumCertificate,
    keys: &KeySet,
    threshold: usize,
) -> bool {
    proof.is_consistent()
        && claim.merkle_root() == proof.root
        && claim.batch() == proof.root_batch
        && certificate.verify_claim(&claim.digest(), threshold, keys)
}
