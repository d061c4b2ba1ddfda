//! The system-under-test abstraction every fabric integration implements,
//! plus validator-topology generation.
//!
//! Integrating a system means implementing [`SystemAdapter`]: configure it,
//! start and stop its validators, and parse its ledger into per-transaction
//! outcomes after the run. Adapters register by name; scenario actions
//! (`init_blockchain_config`, `start_validator`, `stop_validator`) route to
//! the adapter bound in the experiment config.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExperimentConfig, GenesisFile, InstanceId, Role, TxOutcome};
use crate::netshape::LinkDelays;
use crate::runtime::broker::BrokerClient;
use crate::runtime::clock::EpochClock;
use crate::telemetry::{NetCounters, PidSet};

// Canonical artifact file names, the contract between instance agents that
// write them and the collector/analyzer that reads them.
pub const LEDGER_FILE: &str = "ledger.ndjson";
pub const ACCOUNTS_FILE: &str = "accounts.json";
pub const SUBMISSIONS_FILE: &str = "submissions.csv";
pub const POLLS_FILE: &str = "polls.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HEARTBEAT_FILE: &str = "heartbeat.csv";
pub const DISPATCH_FILE: &str = "dispatch.csv";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("no adapter registered under `{0}`")]
    Unknown(String),
    #[error("adapter used before init_configuration")]
    NotInitialized,
    #[error("{0}")]
    Fabric(String),
    #[error("cannot parse ledger artifact {0}: {1}")]
    LedgerParse(PathBuf, String),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("cannot connect {n} validators with degree {degree}")]
    Unconnectable { n: u32, degree: u32 },
}

/// Undirected validator connection graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub n: u32,
    /// Unordered pairs, normalized to (low, high). No self-loops.
    pub edges: BTreeSet<(u32, u32)>,
}

impl Topology {
    pub fn neighbors(&self, v: InstanceId) -> Vec<u32> {
        let v = v.get();
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn degree(&self, v: u32) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == v || b == v).count()
    }

    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut adjacency: HashMap<u32, Vec<u32>> = HashMap::new();
        for &(a, b) in &self.edges {
            adjacency.entry(a).or_default().push(b);
            adjacency.entry(b).or_default().push(a);
        }
        let mut seen = BTreeSet::from([1u32]);
        let mut queue = VecDeque::from([1u32]);
        while let Some(v) = queue.pop_front() {
            for &next in adjacency.get(&v).into_iter().flatten() {
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        seen.len() as u32 == self.n
    }
}

/// Generates the random validator topology: each validator initiates `k`
/// outgoing connections chosen uniformly without replacement among the other
/// validators, and the undirected union is taken. `k` is capped at `n - 1`.
///
/// Deterministic in `(n, k, seed)`. Regenerated with bounded retries until
/// connected; only the degenerate `k = 0, n > 1` case cannot connect.
pub fn random_topology(n: u32, k: u32, seed: u64) -> Result<Topology, TopologyError> {
    let k = k.min(n.saturating_sub(1));
    if n > 1 && k == 0 {
        return Err(TopologyError::Unconnectable { n, degree: 0 });
    }
    const MAX_ATTEMPTS: u64 = 64;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut edges = BTreeSet::new();
        for v in 1..=n {
            let mut others: Vec<u32> = (1..=n).filter(|&u| u != v).collect();
            others.shuffle(&mut rng);
            for &u in others.iter().take(k as usize) {
                edges.insert((v.min(u), v.max(u)));
            }
        }
        let topology = Topology { n, edges };
        if topology.is_connected() {
            return Ok(topology);
        }
    }
    Err(TopologyError::Unconnectable { n, degree: k })
}

/// Per-instance artifact locations after collection, indexed by instance id.
#[derive(Debug, Clone, Default)]
pub struct ArtifactBundle {
    pub run_dir: PathBuf,
    pub instances: BTreeMap<u32, InstanceArtifacts>,
    /// Instances whose artifacts could not be collected.
    pub missing: Vec<u32>,
    /// Instances whose heartbeat log shows gaps longer than three cadences.
    pub unhealthy: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct InstanceArtifacts {
    pub instance: InstanceId,
    pub role: Role,
    pub dir: PathBuf,
}

impl InstanceArtifacts {
    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

impl ArtifactBundle {
    pub fn validators(&self) -> impl Iterator<Item = &InstanceArtifacts> {
        self.instances.values().filter(|a| a.role == Role::Validator)
    }

    pub fn clients(&self) -> impl Iterator<Item = &InstanceArtifacts> {
        self.instances.values().filter(|a| a.role == Role::Client)
    }
}

/// Everything an adapter needs to configure and run its share of the system
/// under test on one instance.
pub struct AdapterContext {
    pub config: ExperimentConfig,
    pub topology: Topology,
    pub genesis: GenesisFile,
    pub link_delays: Option<LinkDelays>,
    /// The loaded city matrix when geo delays are configured.
    pub latency_matrix: Option<crate::netshape::LatencyMatrix>,
    pub self_id: InstanceId,
    pub role: Role,
    pub instance_dir: PathBuf,
    pub clock: EpochClock,
    pub broker: BrokerClient,
    pub net_counters: NetCounters,
    pub pids: PidSet,
    /// Scenario stop offset; validators stop extending the chain at the last
    /// round boundary before it so all exported chains end identically.
    pub stop_offset_ms: Option<crate::model::Ms>,
    pub bind_host: String,
}

/// Interface every transaction fabric implements to be benchmarked.
///
/// `init_configuration` is called exactly once before any `start_validator`;
/// `parse_ledger` only runs after all validators stopped, on the collected
/// artifacts. Adapters are driven from the instance scheduler loop and need
/// not be reentrant.
#[async_trait]
pub trait SystemAdapter: Send {
    async fn init_configuration(&mut self, ctx: Arc<AdapterContext>) -> Result<(), AdapterError>;

    async fn start_validator(&mut self, id: InstanceId) -> Result<(), AdapterError>;

    /// Stopping an already-stopped validator is a no-op.
    async fn stop_validator(&mut self, id: InstanceId) -> Result<(), AdapterError>;

    /// One outcome per transaction visible in the ledger, with `confirm_ts`
    /// taken from ledger data-element timestamps. Empty artifacts yield an
    /// empty list, not an error.
    fn parse_ledger(&self, artifacts: &ArtifactBundle) -> Result<Vec<TxOutcome>, AdapterError>;
}

type AdapterFactory = Box<dyn Fn() -> Box<dyn SystemAdapter> + Send + Sync>;

/// Name-keyed adapter registry. The built-in registry ships only the
/// reference fabric; integrations register additional factories.
pub struct AdapterRegistry {
    factories: BTreeMap<String, AdapterFactory>,
}

impl AdapterRegistry {
    pub fn empty() -> Self {
        AdapterRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        registry.register("reffabric", || {
            Box::new(crate::reffabric::RefFabricAdapter::new())
        });
        registry
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn() -> Box<dyn SystemAdapter> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn SystemAdapter>, AdapterError> {
        self.factories
            .get(name)
            .map(|f| f())
            .ok_or_else(|| AdapterError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }
}

/// Reads a ledger directory tree (one subdirectory per validator) and keeps
/// the longest valid chain; shared helper for ledger-file based adapters.
pub fn ledger_paths(bundle: &ArtifactBundle) -> Vec<PathBuf> {
    bundle
        .validators()
        .map(|v| v.file(LEDGER_FILE))
        .filter(|p| p.exists())
        .collect()
}

pub fn scenario_action_vocabulary() -> Vec<&'static str> {
    vec![
        "init_blockchain_config",
        "start_validator",
        "stop_validator",
        "start_client",
        "start_creating_transactions",
        "stop",
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_topology_is_empty() {
        let t = random_topology(1, 0, 7).unwrap();
        assert!(t.edges.is_empty());
        assert!(t.is_connected());
    }

    #[test]
    fn degree_caps_at_complete_graph() {
        let t = random_topology(4, 10, 7).unwrap();
        // K4: all 6 unordered pairs.
        assert_eq!(t.edges.len(), 6);
        for v in 1..=4 {
            assert_eq!(t.degree(v), 3);
        }
    }

    #[test]
    fn topology_is_deterministic_and_connected() {
        let a = random_topology(32, 10, 1234).unwrap();
        let b = random_topology(32, 10, 1234).unwrap();
        assert_eq!(a, b);
        let c = random_topology(32, 10, 1235).unwrap();
        assert_ne!(a, c, "different seeds should differ");

        // Breadth-first search oracle over the generated edges.
        assert!(a.is_connected());
        for v in 1..=32 {
            assert!(a.degree(v) >= 10, "validator {v} has degree {}", a.degree(v));
        }
        for &(x, y) in &a.edges {
            assert!(x < y && x >= 1 && y <= 32);
        }
    }

    #[test]
    fn zero_degree_multi_node_cannot_connect() {
        assert!(matches!(
            random_topology(5, 0, 1),
            Err(TopologyError::Unconnectable { .. })
        ));
    }

    #[test]
    fn registry_resolves_builtin_and_rejects_unknown() {
        let registry = AdapterRegistry::builtin();
        assert_eq!(registry.names(), ["reffabric"]);
        assert!(registry.create("reffabric").is_ok());
        assert!(matches!(
            registry.create("nope"),
            Err(AdapterError::Unknown(_))
        ));
    }
}
