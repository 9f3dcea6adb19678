//! Byzantine behaviours and the `--faults` grammar.
//!
//! ```text
//! spec     = item ("," item)*
//! item     = node ":" behavior (":" param "=" value)*
//! node     = <global node id> | <partition> "." <replica>
//! behavior = equivocate | stale_responder | bad_cd_vector
//!          | forged_proof | mute | forge_sig
//! ```
//!
//! Parameters: `rate` (0..=1, how often a leader misbehaves when
//! proposing; default 1) and `lag` (batches a stale responder stays behind;
//! default 5).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "snake_case")]
pub enum Behavior {
    Honest,
    /// Leader: sends conflicting proposals to two halves of the cluster.
    /// Replica: signs every proposal it sees without validating.
    Equivocate { rate: f64 },
    /// Answers read-only queries from an old certified batch.
    StaleResponder { lag: u64 },
    /// Leader: raises a CD vector entry before proposing.
    BadCdVector { rate: f64 },
    /// Corrupts Merkle proofs in read-only answers.
    ForgedProof,
    /// Sends nothing.
    Mute,
    /// Emits invalid signatures.
    ForgeSig,
}

impl Behavior {
    pub fn is_honest(&self) -> bool {
        matches!(self, Behavior::Honest)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Behavior::Honest => "honest",
            Behavior::Equivocate { .. } => "equivocate",
            Behavior::StaleResponder { .. } => "stale_responder",
            Behavior::BadCdVector { .. } => "bad_cd_vector",
            Behavior::ForgedProof => "forged_proof",
            Behavior::Mute => "mute",
            Behavior::ForgeSig => "forge_sig",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FaultError {
    #[error("cannot parse fault item `{0}`")]
    Syntax(String),
    #[error("unknown behavior `{0}`")]
    UnknownBehavior(String),
    #[error("bad parameter `{0}`")]
    BadParam(String),
    #[error("node {0} does not exist")]
    UnknownNode(String),
    #[error("{behavior} is not supported on {role} node {node}")]
    UnsupportedBehavior { node: NodeId, behavior: &'static str, role: &'static str },
    #[error("partition {partition} has {faulty} faulty replicas, more than f={f}; pass --unsafe-faults to allow")]
    TooManyFaults { partition: u16, faulty: usize, f: usize },
}

/// Where a fault item points before the topology is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Global(u32),
    Replica { partition: u16, replica: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultSpec {
    pub node: NodeRef,
    pub behavior: Behavior,
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            NodeRef::Global(n) => write!(f, "{n}")?,
            NodeRef::Replica { partition, replica } => write!(f, "{partition}.{replica}")?,
        }
        write!(f, ":{}", self.behavior.name())?;
        match self.behavior {
            Behavior::Equivocate { rate } | Behavior::BadCdVector { rate } if rate != 1.0 => write!(f, ":rate={rate}"),
            Behavior::StaleResponder { lag } => write!(f, ":lag={lag}"),
            _ => Ok(()),
        }
    }
}

impl FromStr for FaultSpec {
    type Err = FaultError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split(':');
        let node_s = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| FaultError::Syntax(s.into()))?;
        let node = match node_s.split_once('.') {
            Some((p, r)) => NodeRef::Replica {
                partition: p.parse().map_err(|_| FaultError::Syntax(s.into()))?,
                replica: r.parse().map_err(|_| FaultError::Syntax(s.into()))?,
            },
            None => NodeRef::Global(node_s.parse().map_err(|_| FaultError::Syntax(s.into()))?),
        };
        let name = parts.next().ok_or_else(|| FaultError::Syntax(s.into()))?;
        let mut params = BTreeMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| FaultError::BadParam(p.into()))?;
            params.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let rate = |params: &mut BTreeMap<String, String>| -> Result<f64, FaultError> {
            match params.remove("rate") {
                None => Ok(1.0),
                Some(v) => v.parse::<f64>().ok().filter(|r| (0.0..=1.0).contains(r)).ok_or(FaultError::BadParam(format!("rate={v}"))),
            }
        };
        let behavior = match name.trim() {
            "equivocate" => Behavior::Equivocate { rate: rate(&mut params)? },
            "bad_cd_vector" => Behavior::BadCdVector { rate: rate(&mut params)? },
            "stale_responder" => Behavior::StaleResponder {
                lag: match params.remove("lag") {
                    None => 5,
                    Some(v) => v.parse().map_err(|_| FaultError::BadParam(format!("lag={v}")))?,
                },
            },
            "forged_proof" => Behavior::ForgedProof,
            "mute" => Behavior::Mute,
            "forge_sig" => Behavior::ForgeSig,
            other => return Err(FaultError::UnknownBehavior(other.into())),
        };
        if let Some((k, v)) = params.into_iter().next() {
            return Err(FaultError::BadParam(format!("{k}={v}")));
        }
        Ok(FaultSpec { node, behavior })
    }
}

pub fn parse_faults(s: &str) -> Result<Vec<FaultSpec>, FaultError> {
    s.split(',').filter(|i| !i.trim().is_empty()).map(str::parse).collect()
}

pub fn format_faults(specs: &[FaultSpec]) -> String {
    specs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Behaviour of every replica in a deployment.
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    by_node: BTreeMap<NodeId, Behavior>,
}

impl FaultPlan {
    /// Resolves specs against a topology of `n_partitions` clusters of
    /// `3f+1` replicas, replica 0 leading. Rejects behaviours that make no
    /// sense for the node's role, and more than `f` faulty replicas in a
    /// cluster unless `allow_unsafe`.
    pub fn resolve(specs: &[FaultSpec], n_partitions: usize, f: usize, allow_unsafe: bool) -> Result<Self, FaultError> {
        let n = 3 * f + 1;
        let mut by_node = BTreeMap::new();
        for s in specs {
            let (partition, replica) = match s.node {
                NodeRef::Global(g) => ((g as usize) / n, (g as usize) % n),
                NodeRef::Replica { partition, replica } => (partition as usize, replica as usize),
            };
            if partition >= n_partitions || replica >= n {
                return Err(FaultError::UnknownNode(s.to_string()));
            }
            let node = NodeId((partition * n + replica) as u32);
            let leader = replica == 0;
            let unsupported = |role| FaultError::UnsupportedBehavior { node, behavior: s.behavior.name(), role };
            match s.behavior {
                Behavior::BadCdVector { .. } if !leader => return Err(unsupported("non-leader")),
                // nothing replaces a silent leader, so it only makes sense in
                // negative tests
                Behavior::Mute | Behavior::ForgeSig if leader && !allow_unsafe => return Err(unsupported("leader")),
                _ => {}
            }
            by_node.insert(node, s.behavior);
        }
        for p in 0..n_partitions {
            let faulty = (0..n).filter(|r| by_node.contains_key(&NodeId((p * n + r) as u32))).count();
            if faulty > f && !allow_unsafe {
                return Err(FaultError::TooManyFaults { partition: p as u16, faulty, f });
            }
        }
        Ok(FaultPlan { by_node })
    }

    pub fn behavior(&self, node: NodeId) -> Behavior {
        self.by_node.get(&node).copied().unwrap_or(Behavior::Honest)
    }

    pub fn is_faulty(&self, node: NodeId) -> bool {
        self.by_node.contains_key(&node)
    }

    pub fn faulty_nodes(&self) -> impl Iterator<Item = (NodeId, Behavior)> + '_ {
        self.by_node.iter().map(|(n, b)| (*n, *b))
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_grammar() {
        let specs = parse_faults("3:mute, 0.0:equivocate:rate=0.25,1.2:stale_responder:lag=9").unwrap();
        assert_eq!(specs[0], FaultSpec { node: NodeRef::Global(3), behavior: Behavior::Mute });
        assert_eq!(specs[1].behavior, Behavior::Equivocate { rate: 0.25 });
        assert_eq!(specs[2].node, NodeRef::Replica { partition: 1, replica: 2 });
        assert_eq!(specs[2].behavior, Behavior::StaleResponder { lag: 9 });
        assert!(parse_faults("").unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_items() {
        assert_eq!(parse_faults("1:teleport"), Err(FaultError::UnknownBehavior("teleport".into())));
        assert!(matches!(parse_faults("x:mute"), Err(FaultError::Syntax(_))));
        assert!(matches!(parse_faults("1:mute:rate"), Err(FaultError::BadParam(_))));
        assert!(matches!(parse_faults("1:equivocate:rate=2"), Err(FaultError::BadParam(_))));
        assert!(matches!(parse_faults("1:mute:lag=3"), Err(FaultError::BadParam(_))));
    }

    #[test]
    fn resolve_enforces_roles_and_bounds() {
        let specs = parse_faults("1:bad_cd_vector").unwrap();
        assert!(matches!(FaultPlan::resolve(&specs, 2, 1, false), Err(FaultError::UnsupportedBehavior { .. })));
        let specs = parse_faults("1:mute,2:forge_sig").unwrap();
        assert!(matches!(FaultPlan::resolve(&specs, 2, 1, false), Err(FaultError::TooManyFaults { partition: 0, .. })));
        assert!(FaultPlan::resolve(&specs, 2, 1, true).is_ok());
        let specs = parse_faults("0.0:equivocate,0.1:equivocate").unwrap();
        assert!(FaultPlan::resolve(&specs, 1, 1, false).is_err());
        assert!(FaultPlan::resolve(&specs, 1, 1, true).is_ok());
        let plan = FaultPlan::resolve(&parse_faults("5:forged_proof").unwrap(), 2, 1, false).unwrap();
        assert_eq!(plan.behavior(NodeId(5)), Behavior::ForgedProof);
        assert_eq!(plan.behavior(NodeId(4)), Behavior::Honest);
        assert!(FaultPlan::resolve(&parse_faults("8:mute").unwrap(), 2, 1, false).is_err());
    }

    proptest! {
        #[test]
        fn display_round_trips(p in 0u16..5, r in 0u32..7, which in 0usize..6, rate in 0.0f64..1.0, lag in 0u64..50) {
            let behavior = [
                Behavior::Equivocate { rate },
                Behavior::StaleResponder { lag },
                Behavior::BadCdVector { rate },
                Behavior::ForgedProof,
                Behavior::Mute,
                Behavior::ForgeSig,
            ][which];
            let spec = FaultSpec { node: NodeRef::Replica { partition: p, replica: r }, behavior };
            prop_assert_eq!(spec.to_string().parse::<FaultSpec>().unwrap(), spec);
        }
    }
}
