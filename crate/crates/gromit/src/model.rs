//! Shared domain types and identifiers used across the harness.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::reffabric::FabricParams;

/// Milliseconds since the shared experiment epoch.
pub type Ms = i64;

/// Identifier of a running instance (validator or client), 1-based.
///
/// Validators are numbered before clients: in an experiment with `n`
/// validators and `m` clients, validators hold IDs `1..=n` and clients
/// `n+1..=n+m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(u32);

impl InstanceId {
    pub fn new(value: u32) -> Result<Self, ModelError> {
        if value == 0 {
            return Err(ModelError::ZeroInstanceId);
        }
        Ok(InstanceId(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<u32> for InstanceId {
    type Error = ModelError;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        InstanceId::new(value)
    }
}

/// Role of an instance within an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Validator,
    Client,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Validator => write!(f, "validator"),
            Role::Client => write!(f, "client"),
        }
    }
}

impl std::str::FromStr for Role {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "validator" => Ok(Role::Validator),
            "client" => Ok(Role::Client),
            other => Err(ModelError::BadRole(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("instance ids are 1-based; 0 is not a valid id")]
    ZeroInstanceId,
    #[error("unknown role `{0}` (expected `validator` or `client`)")]
    BadRole(String),
}

/// Maps a client to the validator it submits transactions to.
///
/// The returned validator ID lies in `[1, n_validators]` and is congruent to
/// the client ID modulo `n_validators`, with residue 0 mapping to
/// `n_validators`. Restricted to any `n_validators` consecutive client IDs
/// this is a bijection, so every validator receives an equal client load.
pub fn assign_validator(client: InstanceId, n_validators: u32) -> InstanceId {
    assert!(n_validators >= 1, "need at least one validator");
    InstanceId(((client.get() - 1) % n_validators) + 1)
}

/// A host an experiment deploys instances onto.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostSpec {
    /// Network address (`localhost` for local runs, or `user@host` for ssh).
    pub address: String,
    /// Remote working directory experiment files are synced into.
    pub workdir: PathBuf,
}

impl HostSpec {
    pub fn local() -> Self {
        HostSpec {
            address: "localhost".to_string(),
            workdir: PathBuf::from("."),
        }
    }

    pub fn is_local(&self) -> bool {
        matches!(self.address.as_str(), "localhost" | "127.0.0.1" | "::1")
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub hosts: Vec<HostSpec>,
    pub n_validators: u32,
    pub n_clients: u32,
    /// Target system-wide transaction rate λ in tx/s, divided equally among
    /// clients.
    pub tx_rate: f64,
    /// Seconds clients keep issuing transactions.
    pub issue_duration: f64,
    /// Seconds to wait after issuing stops before the experiment is torn
    /// down, giving in-flight transactions time to settle.
    pub drain_duration: f64,
    /// Outgoing connections each validator opens in the random topology.
    pub topology_degree: u32,
    pub rng_seed: u64,
    pub fabric_params: FabricParams,
    /// Optional city RTT matrix enabling geo-delay injection.
    pub latency_matrix_path: Option<PathBuf>,
    pub repetitions: u32,
    /// Adapter registry name of the system under test.
    pub adapter: String,
    /// Fixed amount transferred by every workload transaction.
    pub transfer_amount: u64,
    /// Client-side confirmation polling cadence; 0 disables polling.
    pub poll_interval_ms: u64,
    /// Also delay client-to-validator links when a latency matrix is active.
    pub delay_clients: bool,
    /// Root directory run artifacts are written under.
    pub results_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hosts: vec![HostSpec::local()],
            n_validators: 4,
            n_clients: 4,
            tx_rate: 100.0,
            issue_duration: 10.0,
            drain_duration: 5.0,
            topology_degree: 10,
            rng_seed: 42,
            fabric_params: FabricParams::default(),
            latency_matrix_path: None,
            repetitions: 1,
            adapter: "reffabric".to_string(),
            transfer_amount: 1,
            poll_interval_ms: 0,
            delay_clients: false,
            results_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Total number of instances (validators numbered first, then clients).
    pub fn n_instances(&self) -> u32 {
        self.n_validators + self.n_clients
    }

    pub fn validator_ids(&self) -> impl Iterator<Item = InstanceId> {
        (1..=self.n_validators).map(InstanceId)
    }

    pub fn client_ids(&self) -> impl Iterator<Item = InstanceId> {
        (self.n_validators + 1..=self.n_instances()).map(InstanceId)
    }

    pub fn role_of(&self, id: InstanceId) -> Role {
        if id.get() <= self.n_validators {
            Role::Validator
        } else {
            Role::Client
        }
    }

    /// Per-client submission rate, tx/s.
    pub fn per_client_rate(&self) -> f64 {
        self.tx_rate / self.n_clients as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.hosts.is_empty() {
            return Err(ConfigError::Invalid("hosts", "at least one host required".into()));
        }
        if self.n_validators < 1 {
            return Err(ConfigError::Invalid("n_validators", "must be >= 1".into()));
        }
        if self.n_clients < 1 {
            return Err(ConfigError::Invalid("n_clients", "must be >= 1".into()));
        }
        if !(self.tx_rate >= 0.0) {
            return Err(ConfigError::Invalid("tx_rate", "must be >= 0".into()));
        }
        if !(self.issue_duration > 0.0) {
            return Err(ConfigError::Invalid("issue_duration", "must be > 0".into()));
        }
        if !(self.drain_duration >= 0.0) {
            return Err(ConfigError::Invalid("drain_duration", "must be >= 0".into()));
        }
        if self.n_validators > 1 && self.topology_degree >= self.n_validators {
            return Err(ConfigError::Invalid(
                "topology_degree",
                format!("must be < n_validators ({})", self.n_validators),
            ));
        }
        if self.repetitions < 1 {
            return Err(ConfigError::Invalid("repetitions", "must be >= 1".into()));
        }
        if self.fabric_params.round_duration_ms == 0 {
            return Err(ConfigError::Invalid("round_duration_ms", "must be > 0".into()));
        }
        if self.fabric_params.block_capacity == 0 {
            return Err(ConfigError::Invalid("block_capacity", "must be >= 1".into()));
        }
        if self.transfer_amount == 0 {
            return Err(ConfigError::Invalid("transfer_amount", "must be > 0".into()));
        }
        Ok(())
    }

    /// Parses the flat `key = value` configuration format.
    ///
    /// Blank lines and `#` comments are ignored. Unknown keys are rejected so
    /// typos do not silently fall back to defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: line_no })?;
            let key = key.trim();
            let value = value.trim();
            config.apply(key, value).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::UnknownKeyAt { key: k, line: line_no },
                other => other,
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    /// Applies a single `key = value` pair; used both by the file parser and
    /// by CLI flag overrides (flags take precedence over file keys).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &'static str, v: &str) -> Result<T, ConfigError> {
            v.parse()
                .map_err(|_| ConfigError::Invalid(key, format!("cannot parse `{v}`")))
        }
        match key {
            "hosts" => {
                self.hosts = value
                    .split(',')
                    .map(|h| {
                        let h = h.trim();
                        match h.split_once(':') {
                            Some((addr, dir)) => HostSpec {
                                address: addr.to_string(),
                                workdir: PathBuf::from(dir),
                            },
                            None => HostSpec {
                                address: h.to_string(),
                                workdir: PathBuf::from("."),
                            },
                        }
                    })
                    .collect();
            }
            "n_validators" => self.n_validators = num("n_validators", value)?,
            "n_clients" => self.n_clients = num("n_clients", value)?,
            "tx_rate" => self.tx_rate = num("tx_rate", value)?,
            "issue_duration" => self.issue_duration = num("issue_duration", value)?,
            "drain_duration" => self.drain_duration = num("drain_duration", value)?,
            "topology_degree" => self.topology_degree = num("topology_degree", value)?,
            "rng_seed" => self.rng_seed = num("rng_seed", value)?,
            "round_duration_ms" => {
                self.fabric_params.round_duration_ms = num("round_duration_ms", value)?
            }
            "block_capacity" => self.fabric_params.block_capacity = num("block_capacity", value)?,
            "latency_matrix" => self.latency_matrix_path = Some(PathBuf::from(value)),
            "repetitions" => self.repetitions = num("repetitions", value)?,
            "adapter" => self.adapter = value.to_string(),
            "transfer_amount" => self.transfer_amount = num("transfer_amount", value)?,
            "poll_interval_ms" => self.poll_interval_ms = num("poll_interval_ms", value)?,
            "delay_clients" => self.delay_clients = num("delay_clients", value)?,
            "results_dir" => self.results_dir = PathBuf::from(value),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Renders the config back to the flat key-value format.
    pub fn render(&self) -> String {
        let hosts = self
            .hosts
            .iter()
            .map(|h| format!("{}:{}", h.address, h.workdir.display()))
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("hosts", hosts);
        kv("n_validators", self.n_validators.to_string());
        kv("n_clients", self.n_clients.to_string());
        kv("tx_rate", self.tx_rate.to_string());
        kv("issue_duration", self.issue_duration.to_string());
        kv("drain_duration", self.drain_duration.to_string());
        kv("topology_degree", self.topology_degree.to_string());
        kv("rng_seed", self.rng_seed.to_string());
        kv("round_duration_ms", self.fabric_params.round_duration_ms.to_string());
        kv("block_capacity", self.fabric_params.block_capacity.to_string());
        if let Some(path) = &self.latency_matrix_path {
            kv("latency_matrix", path.display().to_string());
        }
        kv("repetitions", self.repetitions.to_string());
        kv("adapter", self.adapter.clone());
        kv("transfer_amount", self.transfer_amount.to_string());
        kv("poll_interval_ms", self.poll_interval_ms.to_string());
        kv("delay_clients", self.delay_clients.to_string());
        kv("results_dir", self.results_dir.display().to_string());
        out
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKeyAt { key: String, line: usize },
    #[error("config key `{0}`: {1}")]
    Invalid(&'static str, String),
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

/// A signed asset transfer; the unit of all measurement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub tx_id: String,
    pub sender: String,
    pub receiver: String,
    pub amount: u64,
    /// Per-sender monotonic counter; strictly increases across a sender's
    /// accepted transactions.
    pub nonce: u64,
    /// Keyed hash over (sender, receiver, amount, nonce), hex-encoded.
    pub auth_tag: String,
    /// Client wall-clock submission time, ms since the experiment epoch.
    pub submit_ts: Ms,
}

/// Credential a client signs its transfers with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub account: String,
    /// Hex-encoded per-client secret.
    pub secret: String,
}

impl Credential {
    /// Keyed digest over the authenticated transaction fields.
    pub fn tag(&self, sender: &str, receiver: &str, amount: u64, nonce: u64) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.secret.as_bytes());
        hasher.update([0u8]);
        hasher.update(sender.as_bytes());
        hasher.update([0u8]);
        hasher.update(receiver.as_bytes());
        hasher.update([0u8]);
        hasher.update(amount.to_be_bytes());
        hasher.update(nonce.to_be_bytes());
        hex::encode(&hasher.finalize()[..16])
    }

    pub fn verify(&self, tx: &Transaction) -> bool {
        self.tag(&tx.sender, &tx.receiver, tx.amount, tx.nonce) == tx.auth_tag
    }
}

/// Final status of a submitted transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxStatus {
    Confirmed,
    Unconfirmed,
    Rejected,
}

impl fmt::Display for TxStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TxStatus::Confirmed => write!(f, "confirmed"),
            TxStatus::Unconfirmed => write!(f, "unconfirmed"),
            TxStatus::Rejected => write!(f, "rejected"),
        }
    }
}

/// Submission and settlement record of one transaction; the raw material of
/// latency and throughput analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxOutcome {
    pub tx_id: String,
    pub submit_ts: Ms,
    pub confirm_ts: Option<Ms>,
    pub status: TxStatus,
}

impl TxOutcome {
    pub fn confirmed(tx_id: String, submit_ts: Ms, confirm_ts: Ms) -> Self {
        debug_assert!(confirm_ts >= submit_ts);
        TxOutcome {
            tx_id,
            submit_ts,
            confirm_ts: Some(confirm_ts),
            status: TxStatus::Confirmed,
        }
    }

    /// Confirmation latency in ms; `None` unless confirmed.
    pub fn latency_ms(&self) -> Option<Ms> {
        match self.status {
            TxStatus::Confirmed => self.confirm_ts.map(|c| c - self.submit_ts),
            _ => None,
        }
    }

    /// Checks the status/confirm_ts coupling invariant.
    pub fn is_consistent(&self) -> bool {
        match self.status {
            TxStatus::Confirmed => self.confirm_ts.is_some_and(|c| c >= self.submit_ts),
            _ => self.confirm_ts.is_none(),
        }
    }
}

/// One periodic resource reading for an instance.
///
/// `cpu_time`, `net_in` and `net_out` are cumulative and monotone
/// non-decreasing over a log; `mem_rss` and `disk_used` are instantaneous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub instance: InstanceId,
    pub ts: Ms,
    /// Cumulative user+system CPU seconds of the monitored processes.
    pub cpu_time: f64,
    pub mem_rss: u64,
    pub disk_used: u64,
    pub net_in: u64,
    pub net_out: u64,
}

/// Genesis description: the initial ledger state with pre-funded accounts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisFile {
    /// Account id -> initial balance.
    pub balances: BTreeMap<String, u64>,
    /// Per-client credentials, keyed by client instance id.
    pub credentials: BTreeMap<u32, Credential>,
}

impl GenesisFile {
    pub fn total_supply(&self) -> u64 {
        self.balances.values().sum()
    }

    /// Account owned by a client instance.
    pub fn account_for(client: InstanceId) -> String {
        format!("acct-{client}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn assign_validator_examples() {
        // Listing-1 layout: clients 11-20 against 10 validators.
        let v = assign_validator(InstanceId::new(11).unwrap(), 10);
        assert_eq!(v.get(), 1);
        // Single validator receives everything.
        assert_eq!(assign_validator(InstanceId::new(5).unwrap(), 1).get(), 1);
        // Residue 0 maps to the highest validator id.
        assert_eq!(assign_validator(InstanceId::new(20).unwrap(), 10).get(), 10);
    }

    #[test]
    fn assign_validator_balances_64_clients_over_16_validators() {
        // Independent oracle: enumerate residues and count per validator.
        let mut counts = BTreeMap::new();
        for c in 1..=64u32 {
            let v = assign_validator(InstanceId::new(c).unwrap(), 16);
            *counts.entry(v.get()).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len(), 16);
        assert!(counts.values().all(|&n| n == 4));
    }

    proptest! {
        // Any n consecutive client ids map bijectively onto [1, n].
        #[test]
        fn assign_validator_is_bijective_on_consecutive_ids(start in 1u32..10_000, n in 1u32..257) {
            let mut seen = std::collections::HashSet::new();
            for c in start..start + n {
                let v = assign_validator(InstanceId::new(c).unwrap(), n);
                prop_assert!(v.get() >= 1 && v.get() <= n);
                prop_assert!(seen.insert(v.get()));
            }
            prop_assert_eq!(seen.len(), n as usize);
        }
    }

    #[test]
    fn instance_id_rejects_zero() {
        assert!(InstanceId::new(0).is_err());
        assert!(InstanceId::new(1).is_ok());
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let mut config = ExperimentConfig::default();
        config.n_validators = 10;
        config.n_clients = 10;
        config.tx_rate = 64.0;
        config.latency_matrix_path = Some(PathBuf::from("cities.csv"));
        let rendered = config.render();
        let parsed = ExperimentConfig::parse(&rendered).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn config_parse_rejects_bad_input() {
        assert!(matches!(
            ExperimentConfig::parse("n_validators 4"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            ExperimentConfig::parse("no_such_key = 1"),
            Err(ConfigError::UnknownKeyAt { line: 1, .. })
        ));
        assert!(ExperimentConfig::parse("n_validators = 0").is_err());
        assert!(ExperimentConfig::parse("n_validators = 4\ntopology_degree = 4").is_err());
        // Comments and blank lines are fine.
        let cfg = ExperimentConfig::parse("# comment\n\nn_validators = 2\ntopology_degree = 1\n");
        assert_eq!(cfg.unwrap().n_validators, 2);
    }

    #[test]
    fn credential_tag_verifies_and_detects_tampering() {
        let cred = Credential {
            account: "acct-5".into(),
            secret: "00ff".into(),
        };
        let tag = cred.tag("acct-5", "acct-6", 1, 7);
        let tx = Transaction {
            tx_id: "t5-7".into(),
            sender: "acct-5".into(),
            receiver: "acct-6".into(),
            amount: 1,
            nonce: 7,
            auth_tag: tag,
            submit_ts: 123,
        };
        assert!(cred.verify(&tx));
        let mut tampered = tx.clone();
        tampered.amount = 2;
        assert!(!cred.verify(&tampered));
    }

    #[test]
    fn outcome_latency_is_nonnegative_and_consistent() {
        let ok = TxOutcome::confirmed("t".into(), 100, 150);
        assert_eq!(ok.latency_ms(), Some(50));
        assert!(ok.is_consistent());
        let pending = TxOutcome {
            tx_id: "t".into(),
            submit_ts: 100,
            confirm_ts: None,
            status: TxStatus::Unconfirmed,
        };
        assert_eq!(pending.latency_ms(), None);
        assert!(pending.is_consistent());
        let broken = TxOutcome {
            tx_id: "t".into(),
            submit_ts: 100,
            confirm_ts: Some(90),
            status: TxStatus::Confirmed,
        };
        assert!(!broken.is_consistent());
    }
}
