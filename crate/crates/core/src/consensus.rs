//! Intra-cluster agreement on batches.
//!
//! The leader proposes a sealed batch; every replica rebuilds it from its
//! own copy of the ledger and signs the batch digest only if the rebuild
//! matches exactly. `2f+1` matching signatures certify the batch. After
//! applying a certified batch, replicas sign the batch's client-visible
//! claims (header, votes, replies), and `f+1` of those signatures form a
//! reply certificate.

use std::sync::Arc;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::conflict::TxnKind;
use crate::crypto::{Canonical, CryptoError, Digest, KeySet, NodeId, NodeKeyPair, QuorumCertificate, SigBytes, Signature, SignatureScheme};
use crate::faults::Behavior;
use crate::ledger::{Batch, Candidate, Ledger, LedgerError, Staged};
use crate::readonly::check_freshness;
use crate::types::PartitionId;

/// Membership and keys of one cluster. Replica 0 leads.
#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub partition: PartitionId,
    pub f: usize,
    pub members: Vec<NodeId>,
    pub keys: KeySet,
}

impl ClusterConfig {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn leader(&self) -> NodeId {
        self.members[0]
    }

    pub fn agreement_quorum(&self) -> usize {
        2 * self.f + 1
    }

    pub fn reply_quorum(&self) -> usize {
        self.f + 1
    }

    pub fn replica_index(&self, node: NodeId) -> Option<usize> {
        self.members.iter().position(|m| *m == node)
    }
}

/// Every cluster's public configuration.
#[derive(Debug, Clone)]
pub struct Directory {
    clusters: Vec<ClusterConfig>,
}

impl Directory {
    /// Node `p * (3f+1) + r` is replica `r` of partition `p`. Returns the
    /// directory and every replica's key pair, in node order.
    pub fn generate<R: RngCore + CryptoRng>(
        n_partitions: usize,
        f: usize,
        scheme: SignatureScheme,
        rng: &mut R,
    ) -> (Directory, Vec<NodeKeyPair>) {
        let n = 3 * f + 1;
        let mut pairs = Vec::with_capacity(n_partitions * n);
        let mut clusters = Vec::with_capacity(n_partitions);
        for p in 0..n_partitions {
            let members: Vec<NodeId> = (0..n).map(|r| NodeId((p * n + r) as u32)).collect();
            let cluster_pairs: Vec<NodeKeyPair> = members.iter().map(|m| NodeKeyPair::generate(*m, scheme, rng)).collect();
            let keys = cluster_pairs.iter().map(|k| (k.node, k.public().clone())).collect();
            clusters.push(ClusterConfig { partition: PartitionId(p as u16), f, members, keys });
            pairs.extend(cluster_pairs);
        }
        (Directory { clusters }, pairs)
    }

    pub fn cluster(&self, p: PartitionId) -> Option<&ClusterConfig> {
        self.clusters.get(p.index())
    }

    pub fn clusters(&self) -> &[ClusterConfig] {
        &self.clusters
    }

    pub fn n_partitions(&self) -> usize {
        self.clusters.len()
    }

    /// Partition and replica index of a replica node.
    pub fn locate(&self, node: NodeId) -> Option<(PartitionId, usize)> {
        let n = self.clusters.first()?.n();
        let p = node.0 as usize / n;
        (p < self.clusters.len()).then(|| (PartitionId(p as u16), node.0 as usize % n))
    }

    pub fn n_replicas(&self) -> usize {
        self.clusters.iter().map(ClusterConfig::n).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("timestamp {timestamp} outside window of clock {clock}")]
    Timestamp { timestamp: u64, clock: u64 },
    #[error("malformed input: {0}")]
    BadInput(&'static str),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// What an honest replica checks before signing a proposal: a timestamp
/// within `delta` of its own clock, well-formed and certified inputs, and
/// an exact rebuild.
pub fn validate_proposal(
    ledger: &Ledger,
    batch: &Batch,
    dir: &Directory,
    clock: u64,
    delta: u64,
) -> Result<Staged, Rejection> {
    if !check_freshness(batch.header.timestamp, clock, delta) {
        return Err(Rejection::Timestamp { timestamp: batch.header.timestamp, clock });
    }
    let me = ledger.partition();
    for e in &batch.entries {
        let t = e.candidate.txn();
        if t.validate().is_err() || !t.touches(me) {
            return Err(Rejection::BadInput("transaction shape"));
        }
        match &e.candidate {
            Candidate::Local(t) if t.kind != TxnKind::Local => return Err(Rejection::BadInput("local kind")),
            Candidate::CoordinatorPrepare(t) if t.kind != TxnKind::Distributed || t.coordinator != Some(me) => {
                return Err(Rejection::BadInput("coordinator"));
            }
            Candidate::ParticipantPrepare { txn, coordinator_vote: v } => {
                let ok = txn.kind == TxnKind::Distributed
                    && txn.coordinator == Some(v.partition)
                    && v.partition != me
                    && v.txn == txn.id
                    && v.vote.is_yes()
                    && v.txn_digest == txn.digest()
                    && v.verify(dir);
                if !ok {
                    return Err(Rejection::BadInput("coordinator vote"));
                }
            }
            _ => {}
        }
    }
    for d in &batch.decisions {
        let member = ledger.prepared().member(d.txn).ok_or(Rejection::BadInput("decision for unknown txn"))?;
        if d.verify(&member.txn, dir).is_err() {
            return Err(Rejection::BadInput("decision"));
        }
    }
    Ok(ledger.revalidate(batch)?)
}

/// A signature that will not verify.
pub fn forged_signature(signer: NodeId) -> Signature {
    Signature { signer, bytes: SigBytes([0xA5; 64]) }
}

/// Signs as `behavior` dictates.
pub fn sign_as(key: &NodeKeyPair, behavior: Behavior, digest: &Digest) -> Signature {
    match behavior {
        Behavior::ForgeSig => forged_signature(key.node),
        _ => key.sign(digest),
    }
}

/// Reply certificate over a claim.
pub fn reply_certify(
    cluster: &ClusterConfig,
    claim: Digest,
    signatures: impl IntoIterator<Item = Signature>,
) -> Result<QuorumCertificate, CryptoError> {
    QuorumCertificate::assemble(claim, signatures, cluster.reply_quorum(), &cluster.keys)
}

pub fn agreement_certify(
    cluster: &ClusterConfig,
    batch_digest: Digest,
    signatures: impl IntoIterator<Item = Signature>,
) -> Result<QuorumCertificate, CryptoError> {
    QuorumCertificate::assemble(batch_digest, signatures, cluster.agreement_quorum(), &cluster.keys)
}

#[derive(Debug, Clone)]
pub struct CertifiedBatch {
    pub batch: Arc<Batch>,
    pub digest: Digest,
    pub certificate: QuorumCertificate,
}

impl CertifiedBatch {
    pub fn verify(&self, cluster: &ClusterConfig) -> bool {
        self.certificate.verify_claim(&self.digest, cluster.agreement_quorum(), &cluster.keys)
            && self.batch.header.partition == cluster.partition
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgreementFailed {
    #[error("only {signatures} of {needed} signatures")]
    TooFewSignatures { signatures: usize, needed: usize },
}

/// One replica of an [`InstantCluster`].
#[derive(Debug, Clone)]
pub struct InstantReplica {
    pub key: NodeKeyPair,
    pub behavior: Behavior,
    pub ledger: Ledger,
    pub clock_skew: i64,
}

/// A cluster whose replicas exchange messages by direct call. Used where
/// the message schedule does not matter: unit tests, golden scenarios and
/// the browser demo.
#[derive(Debug, Clone)]
pub struct InstantCluster {
    pub config: ClusterConfig,
    pub replicas: Vec<InstantReplica>,
    pub delta: u64,
}

impl InstantCluster {
    pub fn leader_ledger(&self) -> &Ledger {
        &self.replicas[0].ledger
    }

    /// Runs one round of agreement on `staged` and applies the batch at
    /// every replica that signed or can verify the certificate.
    pub fn propose(&mut self, staged: Staged, dir: &Directory, now: u64) -> Result<CertifiedBatch, AgreementFailed> {
        let batch = Arc::new(staged.batch);
        let digest = batch.digest();
        let mut sigs = Vec::new();
        let mut snapshots = vec![None; self.replicas.len()];
        for (i, r) in self.replicas.iter().enumerate() {
            let clock = now.saturating_add_signed(r.clock_skew);
            match r.behavior {
                Behavior::Mute => continue,
                Behavior::Equivocate { .. } => sigs.push(r.key.sign(&digest)),
                b => {
                    if let Ok(st) = validate_proposal(&r.ledger, &batch, dir, clock, self.delta) {
                        sigs.push(sign_as(&r.key, b, &digest));
                        snapshots[i] = Some(st.snapshot);
                    }
                }
            }
        }
        let certificate = agreement_certify(&self.config, digest, sigs).map_err(|e| match e {
            CryptoError::InsufficientSignatures { valid, threshold } => AgreementFailed::TooFewSignatures { signatures: valid, needed: threshold },
            CryptoError::DuplicateNode(_) => unreachable!(),
        })?;
        for (r, snap) in self.replicas.iter_mut().zip(snapshots) {
            // replicas that rejected still follow the certificate
            let _ = r.ledger.apply(batch.clone(), snap);
        }
        Ok(CertifiedBatch { batch, digest, certificate })
    }

    /// Collects reply signatures from every replica that would send one.
    pub fn reply_certify(&self, claim: Digest) -> Result<QuorumCertificate, CryptoError> {
        let sigs = self
            .replicas
            .iter()
            .filter(|r| r.behavior != Behavior::Mute)
            .map(|r| sign_as(&r.key, r.behavior, &claim));
        reply_certify(&self.config, claim, sigs)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::conflict::tests::txn;
    use crate::ledger::LedgerConfig;
    use crate::types::Key;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub struct TestDirectory {
        pub dir: Directory,
        pub keys: Vec<NodeKeyPair>,
    }

    impl TestDirectory {
        /// Certificate from the first `signers` replicas (default `f+1`).
        pub fn reply_cert(&self, p: PartitionId, claim: &Digest, signers: Option<usize>) -> QuorumCertificate {
            let c = self.dir.cluster(p).unwrap();
            let k = signers.unwrap_or(c.reply_quorum());
            let sigs = c.members[..k].iter().map(|m| self.keys[m.0 as usize].sign(claim));
            QuorumCertificate::assemble(*claim, sigs, k, &c.keys).unwrap()
        }
    }

    pub fn directory(n_partitions: usize, f: usize) -> TestDirectory {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (dir, keys) = Directory::generate(n_partitions, f, SignatureScheme::KeyedHash, &mut rng);
        TestDirectory { dir, keys }
    }

    pub fn cluster(td: &TestDirectory, p: u16, behaviors: &[Behavior]) -> InstantCluster {
        let config = td.dir.cluster(PartitionId(p)).unwrap().clone();
        let keys = ["a", "b", "c", "k"].map(Key::from);
        let replicas = config
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| InstantReplica {
                key: td.keys[m.0 as usize].clone(),
                behavior: behaviors.get(i).copied().unwrap_or(Behavior::Honest),
                ledger: Ledger::new(PartitionId(p), td.dir.n_partitions(), keys.clone(), LedgerConfig::default()),
                clock_skew: 0,
            })
            .collect();
        InstantCluster { config, replicas, delta: 30_000 }
    }

    fn local_batch(c: &InstantCluster, id: u64, ts: u64) -> Staged {
        let mut ip = c.leader_ledger().open();
        ip.append(Candidate::Local(Arc::new(txn(id, &[], &["a"])))).unwrap();
        ip.seal(ts).unwrap().unwrap()
    }

    #[test]
    fn honest_cluster_with_one_mute_replica_certifies() {
        let td = directory(1, 1);
        let mut c = cluster(&td, 0, &[Behavior::Honest, Behavior::Honest, Behavior::Honest, Behavior::Mute]);
        let staged = local_batch(&c, 1, 0);
        let cb = c.propose(staged, &td.dir, 0).unwrap();
        assert_eq!(cb.certificate.signatures.len(), 3);
        assert!(cb.verify(&c.config));
        assert!(c.replicas.iter().all(|r| r.ledger.next_index() == 1));
    }

    #[test]
    fn wrong_cd_vector_fails_agreement() {
        let td = directory(2, 1);
        let mut c = cluster(&td, 0, &[]);
        let mut staged = local_batch(&c, 1, 0);
        staged.batch.header.cd_vector.0[1] = 7;
        let err = c.propose(staged, &td.dir, 0).unwrap_err();
        assert_eq!(err, AgreementFailed::TooFewSignatures { signatures: 0, needed: 3 });
        assert!(c.replicas.iter().all(|r| r.ledger.next_index() == 0));
    }

    #[test]
    fn one_colluder_cannot_certify_bad_batch() {
        let td = directory(1, 1);
        let mut c = cluster(&td, 0, &[Behavior::Honest, Behavior::Equivocate { rate: 1.0 }]);
        let mut staged = local_batch(&c, 1, 0);
        staged.batch.header.lce = 4;
        // the leader signs its own proposal through validation, which fails
        assert!(c.propose(staged, &td.dir, 0).is_err());
    }

    #[test]
    fn back_dated_timestamp_rejected() {
        let td = directory(1, 1);
        let mut c = cluster(&td, 0, &[]);
        let staged = local_batch(&c, 1, 0);
        assert!(c.propose(staged, &td.dir, 30_001).is_err());
        let staged = local_batch(&c, 1, 0);
        assert!(c.propose(staged, &td.dir, 30_000).is_ok());
    }

    #[test]
    fn reply_certificates_need_f_plus_one_valid() {
        let td = directory(1, 2);
        let c = cluster(&td, 0, &[Behavior::Honest, Behavior::ForgeSig, Behavior::Mute, Behavior::Honest]);
        let claim = Digest::of(b"claim");
        // 7 replicas, one forging and one mute: 5 valid
        let cert = c.reply_certify(claim).unwrap();
        assert_eq!(cert.signatures.len(), 5);
        assert!(!cert.signers().any(|s| s == c.config.members[1]));
        let config = &c.config;
        let two: Vec<_> = c.replicas[..2].iter().map(|r| sign_as(&r.key, r.behavior, &claim)).collect();
        assert_eq!(
            reply_certify(config, claim, two),
            Err(CryptoError::InsufficientSignatures { valid: 1, threshold: 3 })
        );
        let honest_two: Vec<_> = [0, 3].iter().map(|i| c.replicas[*i].key.sign(&claim)).collect();
        assert_eq!(
            reply_certify(config, claim, honest_two),
            Err(CryptoError::InsufficientSignatures { valid: 2, threshold: 3 })
        );
    }

    #[test]
    fn divergent_reply_signature_excluded() {
        let td = directory(1, 1);
        let c = cluster(&td, 0, &[]);
        let claim = Digest::of(b"root-a");
        let mut sigs: Vec<_> = c.replicas[..2].iter().map(|r| r.key.sign(&claim)).collect();
        sigs.push(c.replicas[2].key.sign(&Digest::of(b"root-b")));
        let cert = reply_certify(&c.config, claim, sigs).unwrap();
        assert_eq!(cert.signatures.len(), 2);
    }

    #[test]
    fn directory_layout() {
        let td = directory(3, 1);
        assert_eq!(td.dir.locate(NodeId(5)), Some((PartitionId(1), 1)));
        assert_eq!(td.dir.locate(NodeId(12)), None);
        assert_eq!(td.dir.cluster(PartitionId(2)).unwrap().leader(), NodeId(8));
        assert_eq!(td.dir.n_replicas(), 12);
    }
}
