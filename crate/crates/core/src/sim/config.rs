use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::crypto::SignatureScheme;
use crate::readonly::PROTOCOL_ROUNDS;
use crate::workload::{parse_kv, parse_value, ConfigError, WorkloadConfig};

/// How read-only transactions execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoMode {
    /// Commit-free reads with the dependency check and second round.
    #[default]
    TransEdge,
    /// Negative control: accept round one without checking dependencies.
    SkipDependencyCheck,
    /// Run the same reads as a read-write transaction through 2PC and
    /// agreement.
    Baseline,
    /// Experiment, not the protocol: keep re-checking the combined view and
    /// issue further rounds (up to [`RoMode::RECHECK_ROUNDS`]) until it
    /// satisfies the dependency check.
    Recheck,
}

impl RoMode {
    pub const RECHECK_ROUNDS: u8 = 8;

    pub fn max_rounds(self) -> u8 {
        match self {
            RoMode::TransEdge | RoMode::Baseline => PROTOCOL_ROUNDS,
            RoMode::SkipDependencyCheck => 1,
            RoMode::Recheck => Self::RECHECK_ROUNDS,
        }
    }
}

impl fmt::Display for RoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoMode::TransEdge => "transedge",
            RoMode::SkipDependencyCheck => "skip_dependency_check",
            RoMode::Baseline => "baseline",
            RoMode::Recheck => "recheck",
        })
    }
}

impl FromStr for RoMode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "transedge" => Ok(RoMode::TransEdge),
            "skip_dependency_check" | "mutant" => Ok(RoMode::SkipDependencyCheck),
            "baseline" => Ok(RoMode::Baseline),
            "recheck" => Ok(RoMode::Recheck),
            _ => Err(()),
        }
    }
}

/// Everything a run needs besides the seed's randomness. All times in ms.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub workload: WorkloadConfig,
    pub n_clients: usize,
    pub intra_latency_min: u64,
    pub intra_latency_max: u64,
    pub inter_latency_min: u64,
    pub inter_latency_max: u64,
    pub client_latency_min: u64,
    pub client_latency_max: u64,
    /// Added to every inter-cluster and client link.
    pub extra_latency: u64,
    pub drop_rate: f64,
    pub dup_rate: f64,
    /// Each node's clock is off by a seeded amount in `[-clock_skew, clock_skew]`.
    pub clock_skew: u64,
    pub delta: u64,
    pub batch_interval: u64,
    pub max_batch: usize,
    pub agreement_timeout: u64,
    pub ro_timeout: u64,
    pub dep_wait: u64,
    pub start_delay: u64,
    pub think_time: u64,
    pub horizon: u64,
    pub signature: SignatureScheme,
    pub ro_mode: RoMode,
    pub seal_empty: bool,
    pub faults: String,
    pub unsafe_faults: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            workload: WorkloadConfig::default(),
            n_clients: 16,
            intra_latency_min: 1,
            intra_latency_max: 2,
            inter_latency_min: 10,
            inter_latency_max: 15,
            client_latency_min: 5,
            client_latency_max: 10,
            extra_latency: 0,
            drop_rate: 0.0,
            dup_rate: 0.0,
            clock_skew: 5,
            delta: 30_000,
            batch_interval: 5,
            max_batch: 64,
            agreement_timeout: 100,
            ro_timeout: 1_000,
            dep_wait: 500,
            start_delay: 50,
            think_time: 0,
            horizon: 3_600_000,
            signature: SignatureScheme::KeyedHash,
            ro_mode: RoMode::TransEdge,
            seal_empty: false,
            faults: String::new(),
            unsafe_faults: false,
        }
    }
}

impl SimConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "n_clients",
        "intra_latency_min",
        "intra_latency_max",
        "inter_latency_min",
        "inter_latency_max",
        "client_latency_min",
        "client_latency_max",
        "extra_latency",
        "drop_rate",
        "dup_rate",
        "clock_skew",
        "delta",
        "batch_interval",
        "max_batch",
        "agreement_timeout",
        "ro_timeout",
        "dep_wait",
        "start_delay",
        "think_time",
        "horizon",
        "signature",
        "ro_mode",
        "seal_empty",
        "faults",
        "unsafe_faults",
    ];

    /// Sets one key, workload keys included.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if self.workload.set(key, value)? {
            return Ok(());
        }
        let bad = || ConfigError::BadValue { key: key.into(), value: value.into() };
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "n_clients" => self.n_clients = parse_value(key, value)?,
            "intra_latency_min" => self.intra_latency_min = parse_value(key, value)?,
            "intra_latency_max" => self.intra_latency_max = parse_value(key, value)?,
            "inter_latency_min" => self.inter_latency_min = parse_value(key, value)?,
            "inter_latency_max" => self.inter_latency_max = parse_value(key, value)?,
            "client_latency_min" => self.client_latency_min = parse_value(key, value)?,
            "client_latency_max" => self.client_latency_max = parse_value(key, value)?,
            "extra_latency" | "latency" => self.extra_latency = parse_value(key, value)?,
            "drop_rate" => self.drop_rate = parse_value(key, value)?,
            "dup_rate" => self.dup_rate = parse_value(key, value)?,
            "clock_skew" => self.clock_skew = parse_value(key, value)?,
            "delta" => self.delta = parse_value(key, value)?,
            "batch_interval" => self.batch_interval = parse_value(key, value)?,
            "max_batch" => self.max_batch = parse_value(key, value)?,
            "agreement_timeout" => self.agreement_timeout = parse_value(key, value)?,
            "ro_timeout" => self.ro_timeout = parse_value(key, value)?,
            "dep_wait" => self.dep_wait = parse_value(key, value)?,
            "start_delay" => self.start_delay = parse_value(key, value)?,
            "think_time" => self.think_time = parse_value(key, value)?,
            "horizon" => self.horizon = parse_value(key, value)?,
            "signature" => {
                self.signature = match value {
                    "ed25519" => SignatureScheme::Ed25519,
                    "keyed_hash" => SignatureScheme::KeyedHash,
                    _ => return Err(bad()),
                }
            }
            "ro_mode" => self.ro_mode = value.parse().map_err(|_| bad())?,
            "seal_empty" => self.seal_empty = parse_value(key, value)?,
            "faults" => self.faults = value.to_owned(),
            "unsafe_faults" => self.unsafe_faults = parse_value(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Defaults overridden by a config file's text.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = SimConfig::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.workload.validate()?;
        let bad = |m: &str| Err(ConfigError::InvalidConfig(m.into()));
        if self.n_clients == 0 {
            return bad("n_clients must be positive");
        }
        if self.batch_interval == 0 || self.max_batch == 0 {
            return bad("batch_interval and max_batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.drop_rate) || !(0.0..=1.0).contains(&self.dup_rate) {
            return bad("drop_rate and dup_rate must lie in [0, 1]");
        }
        // two skewed clocks can disagree by twice the skew
        if self.delta <= 2 * self.clock_skew {
            return bad("delta must exceed twice the clock skew");
        }
        Ok(())
    }

    /// Every setting as text, in a stable order.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let w = &self.workload;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_owned(), v);
        };
        put("n_partitions", w.n_partitions.to_string());
        put("f", w.f.to_string());
        put("n_keys", w.n_keys.to_string());
        put("key_size", w.key_size.to_string());
        put("value_size", w.value_size.to_string());
        put("n_txns", w.n_txns.to_string());
        put("mix_local", w.mix_local.to_string());
        put("mix_distributed", w.mix_distributed.to_string());
        put("mix_read_only", w.mix_read_only.to_string());
        put("mix_write_only", w.mix_write_only.to_string());
        put("reads_per_txn", w.reads_per_txn.to_string());
        put("writes_per_txn", w.writes_per_txn.to_string());
        put("dist_partitions", w.dist_partitions.to_string());
        put("ro_keys_per_txn", w.ro_keys_per_txn.to_string());
        put("ro_partitions_per_txn", w.ro_partitions_per_txn.to_string());
        put("seed", self.seed.to_string());
        put("n_clients", self.n_clients.to_string());
        put("intra_latency_min", self.intra_latency_min.to_string());
        put("intra_latency_max", self.intra_latency_max.to_string());
        put("inter_latency_min", self.inter_latency_min.to_string());
        put("inter_latency_max", self.inter_latency_max.to_string());
        put("client_latency_min", self.client_latency_min.to_string());
        put("client_latency_max", self.client_latency_max.to_string());
        put("extra_latency", self.extra_latency.to_string());
        put("drop_rate", self.drop_rate.to_string());
        put("dup_rate", self.dup_rate.to_string());
        put("clock_skew", self.clock_skew.to_string());
        put("delta", self.delta.to_string());
        put("batch_interval", self.batch_interval.to_string());
        put("max_batch", self.max_batch.to_string());
        put("agreement_timeout", self.agreement_timeout.to_string());
        put("ro_timeout", self.ro_timeout.to_string());
        put("dep_wait", self.dep_wait.to_string());
        put("start_delay", self.start_delay.to_string());
        put("think_time", self.think_time.to_string());
        put("horizon", self.horizon.to_string());
        put(
            "signature",
            match self.signature {
                SignatureScheme::Ed25519 => "ed25519",
                SignatureScheme::KeyedHash => "keyed_hash",
            }
            .into(),
        );
        put("ro_mode", self.ro_mode.to_string());
        put("seal_empty", self.seal_empty.to_string());
        put("faults", self.faults.clone());
        put("unsafe_faults", self.unsafe_faults.to_string());
        m
    }

    /// Rebuilds a config from [`to_map`](Self::to_map) output.
    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut c = SimConfig::default();
        for (k, v) in m {
            c.set(k, v)?;
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut c = SimConfig::from_text("n_txns = 40\nextra_latency=20 # knob\nro_mode = baseline\n").unwrap();
        assert_eq!(c.workload.n_txns, 40);
        assert_eq!(c.extra_latency, 20);
        assert_eq!(c.ro_mode, RoMode::Baseline);
        c.set("n_txns", "50").unwrap();
        assert_eq!(c.workload.n_txns, 50);
        assert_eq!(c.set("nope", "1"), Err(ConfigError::UnknownKey("nope".into())));
    }

    #[test]
    fn map_round_trip() {
        let mut c = SimConfig::default();
        c.set("faults", "1:mute").unwrap();
        c.set("signature", "ed25519").unwrap();
        assert_eq!(SimConfig::from_map(&c.to_map()).unwrap(), c);
        for k in SimConfig::KEYS.iter().chain(WorkloadConfig::KEYS) {
            if *k != "replicas_per_cluster" {
                assert!(c.to_map().contains_key(*k), "{k}");
            }
        }
    }

    #[test]
    fn skew_must_fit_in_delta() {
        let c = SimConfig { clock_skew: 20_000, ..Default::default() };
        assert!(c.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
    }
}
