//! Digests, signatures and quorum certificates.
//!
//! Every protocol structure that gets signed is first reduced to a
//! canonical byte encoding (see [`Encoder`]) and hashed with SHA-256.
//! Signatures are made over that 32-byte digest, never over raw structs,
//! so that two nodes serializing the same value always sign the same bytes.
//!
//! Wire format of the canonical encoding:
//!
//! * integers are little-endian and fixed width (`u8`, `u16`, `u32`, `u64`, `i64`)
//! * byte strings are a `u32` length followed by the raw bytes
//! * sequences are a `u32` element count followed by the elements
//! * `Option<T>` is a `u8` tag (0 = none, 1 = some) followed by the value
//! * struct fields are written in declaration order
//!
//! Two signature schemes sit behind one interface: Ed25519 for real
//! deployments and a keyed-hash scheme that the simulator uses for speed.
//! Both honour the same contract: a signature verifies only against the
//! signer's public key and the exact digest that was signed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ed25519_dalek::{Signer as _, Verifier as _};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Opaque node identifier, unique within a deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn of_canonical<T: Canonical + ?Sized>(value: &T) -> Self {
        let mut enc = Encoder::new();
        value.encode(&mut enc);
        Digest::of(enc.as_bytes())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("invalid digest hex"))
    }
}

/// Canonical, length-prefixed byte writer.
#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.buf.extend_from_slice(&d.0);
        self
    }

    pub fn seq<T: Canonical>(&mut self, items: &[T]) -> &mut Self {
        self.u32(items.len() as u32);
        for item in items {
            item.encode(self);
        }
        self
    }

    pub fn option<T: Canonical>(&mut self, v: Option<&T>) -> &mut Self {
        match v {
            None => self.u8(0),
            Some(inner) => {
                self.u8(1);
                inner.encode(self);
                self
            }
        }
    }
}

/// Types with a fixed canonical encoding.
pub trait Canonical {
    fn encode(&self, enc: &mut Encoder);

    fn digest(&self) -> Digest {
        Digest::of_canonical(self)
    }
}

impl Canonical for Digest {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(self);
    }
}

impl Canonical for NodeId {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.0);
    }
}

impl Canonical for i64 {
    fn encode(&self, enc: &mut Encoder) {
        enc.i64(*self);
    }
}

/// Which signature algorithm a key pair uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SignatureScheme {
    #[default]
    Ed25519,
    /// SHA-256 keyed hash. Verification needs the secret, so this is only
    /// sound inside a simulation where the key directory is trusted.
    KeyedHash,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SigBytes(pub [u8; 64]);

impl fmt::Debug for SigBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigBytes({}..)", hex::encode(&self.0[..6]))
    }
}

impl Serialize for SigBytes {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for SigBytes {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 64] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("signature must be 64 bytes"))?;
        Ok(SigBytes(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub signer: NodeId,
    pub bytes: SigBytes,
}

impl Canonical for Signature {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.signer.0);
        enc.buf.extend_from_slice(&self.bytes.0);
    }
}

#[derive(Clone)]
enum SecretKey {
    Ed25519(ed25519_dalek::SigningKey),
    KeyedHash([u8; 32]),
}

#[derive(Clone, PartialEq, Eq)]
pub enum PublicKey {
    Ed25519(ed25519_dalek::VerifyingKey),
    KeyedHash([u8; 32]),
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PublicKey::Ed25519(k) => write!(f, "Ed25519({}..)", hex::encode(&k.as_bytes()[..6])),
            PublicKey::KeyedHash(_) => f.write_str("KeyedHash(..)"),
        }
    }
}

fn keyed_hash(secret: &[u8; 32], digest: &Digest) -> [u8; 64] {
    let mut h = Sha256::new();
    h.update(b"transedge-kh");
    h.update(secret);
    h.update(digest.0);
    let first: [u8; 32] = h.finalize().into();
    let mut out = [0u8; 64];
    out[..32].copy_from_slice(&first);
    out[32..].copy_from_slice(&Sha256::digest(first));
    out
}

impl PublicKey {
    pub fn verify(&self, digest: &Digest, sig: &Signature) -> bool {
        match self {
            PublicKey::Ed25519(vk) => {
                let s = ed25519_dalek::Signature::from_bytes(&sig.bytes.0);
                vk.verify(&digest.0, &s).is_ok()
            }
            PublicKey::KeyedHash(secret) => keyed_hash(secret, digest) == sig.bytes.0,
        }
    }
}

/// A node's signing identity.
#[derive(Clone)]
pub struct NodeKeyPair {
    pub node: NodeId,
    secret: SecretKey,
    public: PublicKey,
}

impl fmt::Debug for NodeKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeKeyPair")
            .field("node", &self.node)
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl NodeKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(node: NodeId, scheme: SignatureScheme, rng: &mut R) -> Self {
        match scheme {
            SignatureScheme::Ed25519 => {
                let sk = ed25519_dalek::SigningKey::generate(rng);
                let pk = sk.verifying_key();
                NodeKeyPair { node, secret: SecretKey::Ed25519(sk), public: PublicKey::Ed25519(pk) }
            }
            SignatureScheme::KeyedHash => {
                let mut secret = [0u8; 32];
                rng.fill_bytes(&mut secret);
                NodeKeyPair { node, secret: SecretKey::KeyedHash(secret), public: PublicKey::KeyedHash(secret) }
            }
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn sign(&self, digest: &Digest) -> Signature {
        let bytes = match &self.secret {
            SecretKey::Ed25519(sk) => sk.sign(&digest.0).to_bytes(),
            SecretKey::KeyedHash(secret) => keyed_hash(secret, digest),
        };
        Signature { signer: self.node, bytes: SigBytes(bytes) }
    }
}

/// Public keys of one signer population (usually one cluster).
#[derive(Debug, Clone, Default)]
pub struct KeySet {
    keys: BTreeMap<NodeId, PublicKey>,
}

impl KeySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails if `node` is already bound to a different key.
    pub fn insert(&mut self, node: NodeId, key: PublicKey) -> Result<(), CryptoError> {
        if let Some(existing) = self.keys.get(&node) {
            if *existing != key {
                return Err(CryptoError::DuplicateNode(node));
            }
        }
        self.keys.insert(node, key);
        Ok(())
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.keys.contains_key(&node)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.keys.keys().copied()
    }

    pub fn verify(&self, digest: &Digest, sig: &Signature) -> bool {
        self.keys.get(&sig.signer).is_some_and(|pk| pk.verify(digest, sig))
    }
}

impl FromIterator<(NodeId, PublicKey)> for KeySet {
    fn from_iter<I: IntoIterator<Item = (NodeId, PublicKey)>>(iter: I) -> Self {
        KeySet { keys: iter.into_iter().collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("insufficient signatures: {valid} valid, {threshold} required")]
    InsufficientSignatures { valid: usize, threshold: usize },
    #[error("node {0} is already bound to a different public key")]
    DuplicateNode(NodeId),
}

/// A set of at least `threshold` distinct, valid signatures over one digest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuorumCertificate {
    pub digest: Digest,
    pub signatures: Vec<Signature>,
    pub threshold: u32,
}

impl QuorumCertificate {
    /// Builds a certificate from an arbitrary pile of signatures. Invalid,
    /// foreign and duplicate signers are dropped; the survivors are kept in
    /// signer order.
    pub fn assemble<I>(digest: Digest, signatures: I, threshold: usize, keys: &KeySet) -> Result<Self, CryptoError>
    where
        I: IntoIterator<Item = Signature>,
    {
        let mut seen = BTreeSet::new();
        let mut valid: Vec<Signature> = signatures
            .into_iter()
            .filter(|s| keys.verify(&digest, s))
            .filter(|s| seen.insert(s.signer))
            .collect();
        if valid.len() < threshold {
            return Err(CryptoError::InsufficientSignatures { valid: valid.len(), threshold });
        }
        valid.sort_by_key(|s| s.signer);
        Ok(QuorumCertificate { digest, signatures: valid, threshold: threshold as u32 })
    }

    /// Full check: threshold met, signers distinct members of `keys`, every
    /// signature valid over `self.digest`.
    pub fn verify(&self, keys: &KeySet) -> bool {
        let mut seen = BTreeSet::new();
        let mut count = 0usize;
        for s in &self.signatures {
            if !seen.insert(s.signer) || !keys.verify(&self.digest, s) {
                return false;
            }
            count += 1;
        }
        self.threshold > 0 && count >= self.threshold as usize
    }

    /// Like [`verify`](Self::verify) but also pins the digest and a minimum
    /// threshold, so a certificate for some other claim, or one assembled at
    /// a weaker quorum, is rejected.
    pub fn verify_claim(&self, claim: &Digest, min_threshold: usize, keys: &KeySet) -> bool {
        self.digest == *claim && self.threshold as usize >= min_threshold && self.verify(keys)
    }

    pub fn signers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.signatures.iter().map(|s| s.signer)
    }
}

impl Canonical for QuorumCertificate {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.digest).u32(self.threshold).seq(&self.signatures);
    }
}
