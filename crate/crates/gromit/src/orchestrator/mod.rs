//! Experiment lifecycle: environment setup, instance launch, artifact
//! collection, analysis, and teardown.

pub mod genesis;
pub mod transport;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use thiserror::Error;

use crate::adapter::{
    random_topology, AdapterError, AdapterRegistry, ArtifactBundle, InstanceArtifacts, Topology,
    TopologyError, HEARTBEAT_FILE, LEDGER_FILE, METRICS_FILE, SUBMISSIONS_FILE,
};
use crate::analysis::report::{summarize_resources, ResourceSummary};
use crate::analysis::{join_outcomes, AnalysisError, RunResult};
use crate::model::{ConfigError, ExperimentConfig, GenesisFile, InstanceId, Ms, Role};
use crate::netshape::{build_link_delays, LatencyMatrix, LinkDelays, MatrixError};
use crate::reffabric::ledger;
use crate::runtime::broker::BrokerHub;
use crate::runtime::clock::unix_now_ms;
use crate::scenario::{Scenario, ScenarioError};
use crate::telemetry::parse_metrics_csv;
use crate::workload::parse_submissions_csv;

pub use transport::{LocalTransport, SshTransport, Transport, TransportError};

pub const CONFIG_SNAPSHOT_FILE: &str = "config.snapshot.conf";
pub const SCENARIO_FILE: &str = "scenario.scn";
pub const GENESIS_FILE_NAME: &str = "genesis.json";
pub const TOPOLOGY_FILE: &str = "topology.json";
pub const LINK_DELAYS_FILE: &str = "link_delays.json";
pub const LATENCY_MATRIX_COPY: &str = "latency_matrix.csv";
pub const ANALYSIS_DIR: &str = "analysis";

/// Heartbeat cadence instances write at; collection flags gaps above three
/// cadences as unhealthy.
pub const HEARTBEAT_CADENCE_MS: i64 = 1000;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("failed to spawn instance {0}: {1}")]
    SpawnFailed(InstanceId, String),
    #[error("broker failed to start: {0}")]
    Broker(std::io::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |e| OrchestratorError::Io(path.to_path_buf(), e)
}

/// Where one instance runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub instance: InstanceId,
    pub role: Role,
    pub host_idx: usize,
}

/// Instances are placed round-robin across hosts by id, so consecutive
/// validators alternate hosts. Deterministic in the config.
pub fn plan_placements(config: &ExperimentConfig) -> Vec<Placement> {
    let n_hosts = config.hosts.len().max(1);
    (1..=config.n_instances())
        .map(|id| {
            let instance = InstanceId::new(id).expect("ids start at 1");
            Placement {
                instance,
                role: config.role_of(instance),
                host_idx: ((id - 1) as usize) % n_hosts,
            }
        })
        .collect()
}

/// Everything decided before launch.
pub struct DeploymentPlan {
    pub run_dir: PathBuf,
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub placements: Vec<Placement>,
    pub genesis: GenesisFile,
    pub topology: Topology,
    pub link_delays: Option<LinkDelays>,
}

impl DeploymentPlan {
    pub fn instance_dir(&self, id: InstanceId) -> PathBuf {
        self.run_dir.join(format!("instance-{id}"))
    }

    pub fn describe(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "run directory: {}", self.run_dir.display());
        let _ = writeln!(
            out,
            "instances: {} validators + {} clients",
            self.config.n_validators, self.config.n_clients
        );
        for p in &self.placements {
            let host = &self.config.hosts[p.host_idx];
            let _ = writeln!(
                out,
                "  instance {:>3}  {:<9} host {}",
                p.instance.to_string(),
                p.role.to_string(),
                host.address
            );
        }
        let _ = writeln!(
            out,
            "topology: {} edges, degree target {}",
            self.topology.edges.len(),
            self.config.topology_degree
        );
        let _ = writeln!(
            out,
            "fabric: round {} ms, block capacity {}",
            self.config.fabric_params.round_duration_ms, self.config.fabric_params.block_capacity
        );
        if self.link_delays.is_some() {
            let _ = writeln!(out, "geo delays: enabled");
        }
        out
    }
}

static RUN_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

/// A fresh timestamped run directory under the results root:
/// `<results>/<iso-timestamp>-<label>/<instance-id>/...`.
pub fn fresh_run_dir(results_root: &Path, label: &str) -> PathBuf {
    let ts = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let seq = RUN_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    results_root.join(format!("{ts}-p{}-{seq}-{label}", std::process::id()))
}

/// The canonical workload scenario generated from a config: validators
/// initialize and start, clients connect, issue for the configured window,
/// and everything stops after the drain.
pub fn standard_scenario(config: &ExperimentConfig) -> Scenario {
    let n = config.n_validators;
    let total = config.n_instances();
    let stop_at = 3.0 + config.issue_duration + config.drain_duration;
    let text = format!(
        "@0.5 init_blockchain_config {{1-{n}}}\n\
         @1 start_validator {{1-{n}}}\n\
         @2 start_client {{{}-{total}}}\n\
         @3 start_creating_transactions {{{}-{total}}}\n\
         @{stop_at} stop\n",
        n + 1,
        n + 1,
    );
    crate::scenario::parse_scenario(&text).expect("generated scenario is valid")
}

/// Prepares the run directory: genesis, topology, delay tables, config
/// snapshot, scenario file, and per-instance directories; syncs to remote
/// hosts when any are configured.
pub async fn setup(
    config: &ExperimentConfig,
    scenario: &Scenario,
    run_dir: PathBuf,
    transport: &dyn Transport,
) -> Result<DeploymentPlan, OrchestratorError> {
    config.validate()?;
    scenario.require_stop()?;

    std::fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let genesis = genesis::generate_genesis(config);
    let degree = config.topology_degree.min(config.n_validators.saturating_sub(1));
    let topology = random_topology(config.n_validators, degree, config.rng_seed)?;

    let mut snapshot = config.clone();
    let link_delays = match &config.latency_matrix_path {
        Some(path) => {
            let matrix = LatencyMatrix::load(path)?;
            let copy = run_dir.join(LATENCY_MATRIX_COPY);
            std::fs::copy(path, &copy).map_err(io_err(&copy))?;
            snapshot.latency_matrix_path = Some(copy);
            let delays = build_link_delays(config.n_validators, &matrix);
            let delays_path = run_dir.join(LINK_DELAYS_FILE);
            std::fs::write(
                &delays_path,
                serde_json::to_string_pretty(&delays).expect("delays serialize"),
            )
            .map_err(io_err(&delays_path))?;
            Some(delays)
        }
        None => None,
    };

    let genesis_path = run_dir.join(GENESIS_FILE_NAME);
    std::fs::write(&genesis_path, genesis::genesis_json(&genesis)).map_err(io_err(&genesis_path))?;
    let topology_path = run_dir.join(TOPOLOGY_FILE);
    std::fs::write(
        &topology_path,
        serde_json::to_string_pretty(&topology).expect("topology serializes"),
    )
    .map_err(io_err(&topology_path))?;
    let snapshot_path = run_dir.join(CONFIG_SNAPSHOT_FILE);
    std::fs::write(&snapshot_path, snapshot.render()).map_err(io_err(&snapshot_path))?;
    let scenario_path = run_dir.join(SCENARIO_FILE);
    std::fs::write(&scenario_path, scenario.render()).map_err(io_err(&scenario_path))?;

    let placements = plan_placements(config);
    for p in &placements {
        let dir = run_dir.join(format!("instance-{}", p.instance));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }

    // Remote hosts receive the whole run directory; local hosts share it.
    let run_name = run_dir.file_name().map(PathBuf::from).unwrap_or_default();
    for host in &config.hosts {
        if !host.is_local() {
            transport
                .sync_to_host(host, &run_dir, &host.workdir.join(&run_name))
                .await?;
        }
    }

    Ok(DeploymentPlan {
        run_dir,
        config: snapshot,
        scenario: scenario.clone(),
        placements,
        genesis,
        topology,
        link_delays,
    })
}

/// Launch knobs that do not belong in the experiment config.
pub struct LaunchOptions {
    /// The harness binary to execute with the hidden `instance` subcommand.
    pub agent_program: PathBuf,
    /// Extra startup slack added to the epoch, seconds.
    pub epoch_grace_s: f64,
}

impl LaunchOptions {
    pub fn with_current_exe() -> Self {
        LaunchOptions {
            agent_program: std::env::current_exe().unwrap_or_else(|_| PathBuf::from("gromit")),
            epoch_grace_s: 0.0,
        }
    }
}

pub struct RunningInstance {
    pub id: InstanceId,
    pub child: tokio::process::Child,
}

/// A launched experiment: broker hub plus one agent process per placement.
pub struct LiveExperiment {
    pub broker: BrokerHub,
    pub epoch_unix_ms: i64,
    pub instances: Vec<RunningInstance>,
    pub stop_offset_ms: Ms,
}

/// Spawns every instance of the plan. On any spawn failure the already
/// started instances are killed before the error is returned.
pub async fn launch(
    plan: &DeploymentPlan,
    options: &LaunchOptions,
) -> Result<LiveExperiment, OrchestratorError> {
    let broker = BrokerHub::bind().await.map_err(OrchestratorError::Broker)?;
    let grace_ms = 2000 + 15 * plan.placements.len() as i64 + (options.epoch_grace_s * 1000.0) as i64;
    let epoch_unix_ms = unix_now_ms() + grace_ms;
    let stop_offset_ms = plan
        .scenario
        .stop_offset()
        .map(|s| (s * 1000.0) as Ms)
        .unwrap_or(0);

    let mut instances: Vec<RunningInstance> = Vec::with_capacity(plan.placements.len());
    for p in &plan.placements {
        let host = &plan.config.hosts[p.host_idx];
        if !host.is_local() {
            // Remote launch goes through the remote shell; command layout is
            // identical, with the synced run directory path.
            log::warn!(
                "remote launch for instance {} on {} is not wired in this build; skipping",
                p.instance,
                host.address
            );
            continue;
        }
        let dir = plan.instance_dir(p.instance);
        let stdout = std::fs::File::create(dir.join("agent.out.log")).map_err(io_err(&dir))?;
        let stderr = std::fs::File::create(dir.join("agent.err.log")).map_err(io_err(&dir))?;
        let spawned = tokio::process::Command::new(&options.agent_program)
            .arg("instance")
            .arg("--id")
            .arg(p.instance.to_string())
            .arg("--role")
            .arg(p.role.to_string())
            .arg("--broker")
            .arg(broker.addr().to_string())
            .arg("--epoch-ms")
            .arg(epoch_unix_ms.to_string())
            .arg("--run-dir")
            .arg(&plan.run_dir)
            .stdin(Stdio::null())
            .stdout(Stdio::from(stdout))
            .stderr(Stdio::from(stderr))
            .kill_on_drop(true)
            .spawn();
        match spawned {
            Ok(child) => instances.push(RunningInstance {
                id: p.instance,
                child,
            }),
            Err(e) => {
                for mut running in instances {
                    let _ = running.child.start_kill();
                    let _ = running.child.wait().await;
                }
                return Err(OrchestratorError::SpawnFailed(p.instance, e.to_string()));
            }
        }
    }
    Ok(LiveExperiment {
        broker,
        epoch_unix_ms,
        instances,
        stop_offset_ms,
    })
}

/// Waits for every instance to exit on its own (the scenario's stop action),
/// force-killing stragglers well past the scheduled stop.
pub async fn await_completion(live: &mut LiveExperiment) -> Vec<(InstanceId, bool)> {
    let deadline_unix_ms = live.epoch_unix_ms + live.stop_offset_ms + 20_000;
    let mut outcomes = Vec::with_capacity(live.instances.len());
    for instance in &mut live.instances {
        let remaining_ms = (deadline_unix_ms - unix_now_ms()).max(0) as u64;
        let clean = match tokio::time::timeout(
            Duration::from_millis(remaining_ms),
            instance.child.wait(),
        )
        .await
        {
            Ok(Ok(status)) => status.success(),
            Ok(Err(_)) => false,
            Err(_) => {
                log::warn!("instance {} missed the stop deadline; killing it", instance.id);
                let _ = instance.child.start_kill();
                let _ = instance.child.wait().await;
                false
            }
        };
        outcomes.push((instance.id, clean));
    }
    outcomes
}

/// Stops whatever is still running; used on error paths. Idempotent: already
/// stopped instances are no-ops.
pub async fn teardown(live: &mut LiveExperiment) {
    for instance in &mut live.instances {
        if let Ok(None) = instance.child.try_wait() {
            let _ = instance.child.start_kill();
            let _ = instance.child.wait().await;
        }
    }
}

/// Fetches remote artifacts and indexes everything by instance.
///
/// Missing instance directories become a partial collection: analysis
/// proceeds on what exists, with a warning. Instances whose heartbeat log
/// has gaps above three cadences are flagged unhealthy.
pub async fn collect(
    plan: &DeploymentPlan,
    transport: &dyn Transport,
) -> Result<ArtifactBundle, OrchestratorError> {
    let run_name = plan.run_dir.file_name().map(PathBuf::from).unwrap_or_default();
    for host in &plan.config.hosts {
        if !host.is_local() {
            transport
                .fetch_from_host(host, &host.workdir.join(&run_name), &plan.run_dir)
                .await?;
        }
    }
    let bundle = index_placements(&plan.run_dir, &plan.placements);
    if !bundle.missing.is_empty() {
        log::warn!(
            "partial collection: missing artifacts for instances {:?}",
            bundle.missing
        );
    }
    Ok(bundle)
}

fn index_placements(run_dir: &Path, placements: &[Placement]) -> ArtifactBundle {
    let mut bundle = ArtifactBundle {
        run_dir: run_dir.to_path_buf(),
        instances: BTreeMap::new(),
        missing: Vec::new(),
        unhealthy: Vec::new(),
    };
    for p in placements {
        let dir = run_dir.join(format!("instance-{}", p.instance));
        let expected = match p.role {
            Role::Validator => dir.join(LEDGER_FILE),
            Role::Client => dir.join(SUBMISSIONS_FILE),
        };
        if !expected.exists() {
            bundle.missing.push(p.instance.get());
            continue;
        }
        let artifacts = InstanceArtifacts {
            instance: p.instance,
            role: p.role,
            dir: dir.clone(),
        };
        if let Ok(text) = std::fs::read_to_string(dir.join(HEARTBEAT_FILE)) {
            if !heartbeat_healthy(&text) {
                bundle.unhealthy.push(p.instance.get());
            }
        }
        bundle.instances.insert(p.instance.get(), artifacts);
    }
    bundle
}

/// A run directory reopened after the fact (the `report` subcommand path).
pub struct IndexedRun {
    pub config: ExperimentConfig,
    pub genesis: GenesisFile,
    pub bundle: ArtifactBundle,
}

/// Rebuilds config, genesis, and the artifact index from a collected run
/// directory, without re-running anything.
pub fn index_run_dir(run_dir: &Path) -> Result<IndexedRun, OrchestratorError> {
    let config = ExperimentConfig::parse_file(&run_dir.join(CONFIG_SNAPSHOT_FILE))?;
    let genesis_path = run_dir.join(GENESIS_FILE_NAME);
    let genesis_text = std::fs::read_to_string(&genesis_path).map_err(io_err(&genesis_path))?;
    let genesis: GenesisFile = serde_json::from_str(&genesis_text)
        .map_err(|e| OrchestratorError::Io(genesis_path, std::io::Error::other(e)))?;
    let placements = plan_placements(&config);
    let bundle = index_placements(run_dir, &placements);
    Ok(IndexedRun {
        config,
        genesis,
        bundle,
    })
}

fn heartbeat_healthy(text: &str) -> bool {
    let beats: Vec<i64> = text
        .lines()
        .skip(1)
        .filter_map(|l| l.trim().parse().ok())
        .collect();
    beats.windows(2).all(|w| w[1] - w[0] <= 3 * HEARTBEAT_CADENCE_MS)
}

/// Everything analysis derives from one collected run.
pub struct RunAnalysis {
    pub run_result: RunResult,
    pub latencies_ms: Vec<Ms>,
    pub resources: Vec<ResourceSummary>,
    pub foreign_tx: Vec<String>,
    /// Ledger total equals genesis total, for every validator chain, and the
    /// exported account state matches a replay of the chain.
    pub conservation_ok: bool,
    /// All exported validator chains are block-for-block identical.
    pub chains_consistent: bool,
    pub warnings: Vec<String>,
}

/// Parses collected artifacts into metrics and persists the per-run analysis
/// files under `<run_dir>/analysis/`.
pub fn analyze_run(
    bundle: &ArtifactBundle,
    config: &ExperimentConfig,
    genesis: &GenesisFile,
    registry: &AdapterRegistry,
) -> Result<RunAnalysis, OrchestratorError> {
    let adapter = registry.create(&config.adapter)?;
    let ledger_outcomes = adapter.parse_ledger(bundle)?;

    let mut submissions = Vec::new();
    let mut warnings = Vec::new();
    for client in bundle.clients() {
        let path = client.file(SUBMISSIONS_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => submissions.extend(parse_submissions_csv(&text)),
            Err(e) => warnings.push(format!("missing submission log for {}: {e}", client.instance)),
        }
    }
    for missing in &bundle.missing {
        warnings.push(format!("instance {missing} produced no artifacts"));
    }
    for unhealthy in &bundle.unhealthy {
        warnings.push(format!("instance {unhealthy} had heartbeat gaps"));
    }

    let joined = join_outcomes(&submissions, &ledger_outcomes)?;
    let bin_ms = (config.fabric_params.round_duration_ms / 10).max(1);
    let run_result = RunResult::from_outcomes(config.tx_rate, &joined.outcomes, bin_ms);
    let mut latencies: Vec<Ms> = joined
        .outcomes
        .iter()
        .filter_map(|o| o.latency_ms())
        .collect();
    latencies.sort_unstable();

    // Conservation and chain agreement across validators.
    let mut conservation_ok = true;
    let mut chains_consistent = true;
    let mut reference_chain: Option<Vec<crate::reffabric::Block>> = None;
    for validator in bundle.validators() {
        let ledger_path = validator.file(LEDGER_FILE);
        if !ledger_path.exists() {
            continue;
        }
        let chain = match ledger::read_chain(&ledger_path) {
            Ok(chain) => chain,
            Err(e) => {
                warnings.push(format!("unreadable ledger for {}: {e}", validator.instance));
                conservation_ok = false;
                continue;
            }
        };
        let replayed = ledger::replay_balances(&genesis.balances, &chain);
        if replayed.values().sum::<u64>() != genesis.total_supply() {
            conservation_ok = false;
            warnings.push(format!(
                "validator {}: ledger total diverges from genesis supply",
                validator.instance
            ));
        }
        let accounts_path = validator.file(crate::adapter::ACCOUNTS_FILE);
        if let Ok(exported) = ledger::read_accounts(&accounts_path) {
            if exported != replayed {
                conservation_ok = false;
                warnings.push(format!(
                    "validator {}: exported accounts disagree with chain replay",
                    validator.instance
                ));
            }
        }
        match &reference_chain {
            None => reference_chain = Some(chain),
            Some(reference) => {
                if !ledger::chains_equal(reference, &chain) {
                    chains_consistent = false;
                    warnings.push(format!(
                        "validator {}: chain differs from validator {}",
                        validator.instance,
                        bundle.validators().next().map(|v| v.instance.get()).unwrap_or(0)
                    ));
                }
            }
        }
    }

    let mut resources = Vec::new();
    for artifacts in bundle.instances.values() {
        if let Ok(text) = std::fs::read_to_string(artifacts.file(METRICS_FILE)) {
            let samples = parse_metrics_csv(&text, artifacts.instance);
            if let Some(summary) = summarize_resources(&samples, artifacts.role) {
                resources.push(summary);
            }
        }
    }

    persist_analysis(
        &bundle.run_dir,
        &run_result,
        &joined.outcomes,
        &latencies,
        &warnings,
    )?;

    Ok(RunAnalysis {
        run_result,
        latencies_ms: latencies,
        resources,
        foreign_tx: joined.foreign,
        conservation_ok,
        chains_consistent,
        warnings,
    })
}

fn persist_analysis(
    run_dir: &Path,
    run_result: &RunResult,
    outcomes: &[crate::model::TxOutcome],
    latencies: &[Ms],
    warnings: &[String],
) -> Result<(), OrchestratorError> {
    use std::fmt::Write as _;
    let dir = run_dir.join(ANALYSIS_DIR);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let mut outcomes_csv = String::from("tx_id,submit_ts_ms,confirm_ts_ms,status,latency_ms\n");
    for o in outcomes {
        let confirm = o.confirm_ts.map(|v| v.to_string()).unwrap_or_default();
        let latency = o.latency_ms().map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            outcomes_csv,
            "{},{},{confirm},{},{latency}",
            o.tx_id, o.submit_ts, o.status
        );
    }
    let path = dir.join("outcomes.csv");
    std::fs::write(&path, outcomes_csv).map_err(io_err(&path))?;

    let mut latencies_csv = String::from("latency_ms\n");
    for l in latencies {
        let _ = writeln!(latencies_csv, "{l}");
    }
    let path = dir.join("latencies.csv");
    std::fs::write(&path, latencies_csv).map_err(io_err(&path))?;

    let path = dir.join("run_result.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(run_result).expect("run result serializes"),
    )
    .map_err(io_err(&path))?;

    if !warnings.is_empty() {
        let path = dir.join("warnings.txt");
        std::fs::write(&path, warnings.join("\n") + "\n").map_err(io_err(&path))?;
    }
    Ok(())
}

/// Outcome of one full experiment run.
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub bundle: ArtifactBundle,
    pub analysis: RunAnalysis,
    /// False when some instance exited uncleanly or had to be killed.
    pub clean_exit: bool,
}

/// The end-to-end flow for one run: setup, launch, wait for the scenario's
/// stop, collect, analyze. Teardown is attempted on every error path.
pub async fn run_experiment(
    config: &ExperimentConfig,
    scenario: &Scenario,
    run_dir: PathBuf,
    options: &LaunchOptions,
    registry: &AdapterRegistry,
) -> Result<ExperimentOutcome, OrchestratorError> {
    let transport = LocalTransport;
    let plan = setup(config, scenario, run_dir, &transport).await?;
    let mut live = launch(&plan, options).await?;
    let exits = await_completion(&mut live).await;
    teardown(&mut live).await;
    let clean_exit = exits.iter().all(|(_, ok)| *ok);
    drop(live);
    let bundle = collect(&plan, &transport).await?;
    let analysis = analyze_run(&bundle, &plan.config, &plan.genesis, registry)?;
    Ok(ExperimentOutcome {
        run_dir: plan.run_dir,
        bundle,
        analysis,
        clean_exit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HostSpec;

    #[test]
    fn single_host_places_everyone_locally() {
        let mut config = ExperimentConfig::default();
        config.n_validators = 4;
        config.n_clients = 4;
        config.topology_degree = 3;
        let placements = plan_placements(&config);
        assert_eq!(placements.len(), 8);
        assert!(placements.iter().all(|p| p.host_idx == 0));
        assert_eq!(placements[0].role, Role::Validator);
        assert_eq!(placements[4].role, Role::Client);
        assert_eq!(placements[4].instance.get(), 5);
    }

    #[test]
    fn two_hosts_alternate_round_robin() {
        let mut config = ExperimentConfig::default();
        config.hosts = vec![
            HostSpec::local(),
            HostSpec { address: "node2".into(), workdir: "/srv".into() },
        ];
        config.n_validators = 4;
        config.n_clients = 2;
        config.topology_degree = 3;
        let placements = plan_placements(&config);
        // Validators {1,3} on host 0, {2,4} on host 1.
        let hosts: Vec<usize> = placements.iter().take(4).map(|p| p.host_idx).collect();
        assert_eq!(hosts, vec![0, 1, 0, 1]);
    }

    #[test]
    fn listing_style_layout_numbers_validators_before_clients() {
        let mut config = ExperimentConfig::default();
        config.n_validators = 10;
        config.n_clients = 10;
        config.topology_degree = 9;
        let placements = plan_placements(&config);
        let validators: Vec<u32> = placements
            .iter()
            .filter(|p| p.role == Role::Validator)
            .map(|p| p.instance.get())
            .collect();
        let clients: Vec<u32> = placements
            .iter()
            .filter(|p| p.role == Role::Client)
            .map(|p| p.instance.get())
            .collect();
        assert_eq!(validators, (1..=10).collect::<Vec<_>>());
        assert_eq!(clients, (11..=20).collect::<Vec<_>>());
    }

    #[tokio::test]
    async fn setup_writes_the_run_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::default();
        config.n_validators = 2;
        config.n_clients = 2;
        config.topology_degree = 1;
        config.results_dir = tmp.path().to_path_buf();
        let scenario = standard_scenario(&config);
        let run_dir = fresh_run_dir(tmp.path(), "test");
        let plan = setup(&config, &scenario, run_dir.clone(), &LocalTransport)
            .await
            .unwrap();
        for file in [CONFIG_SNAPSHOT_FILE, SCENARIO_FILE, GENESIS_FILE_NAME, TOPOLOGY_FILE] {
            assert!(run_dir.join(file).exists(), "missing {file}");
        }
        for id in 1..=4u32 {
            assert!(run_dir.join(format!("instance-{id}")).is_dir());
        }
        // Snapshot parses back to the same resolved config.
        let parsed = ExperimentConfig::parse_file(&run_dir.join(CONFIG_SNAPSHOT_FILE)).unwrap();
        assert_eq!(parsed, plan.config);
        assert!(plan.describe().contains("instance"));
    }

    #[test]
    fn standard_scenario_matches_config_windows() {
        let mut config = ExperimentConfig::default();
        config.n_validators = 4;
        config.n_clients = 4;
        config.topology_degree = 3;
        config.issue_duration = 10.0;
        config.drain_duration = 5.0;
        let scenario = standard_scenario(&config);
        scenario.require_stop().unwrap();
        assert_eq!(scenario.stop_offset(), Some(18.0));
        let five = InstanceId::new(5).unwrap();
        let actions: Vec<&str> = scenario
            .actions_for(five)
            .iter()
            .map(|a| a.action.as_str())
            .collect();
        assert_eq!(actions, ["start_client", "start_creating_transactions", "stop"]);
    }

    #[test]
    fn heartbeat_gap_detection() {
        assert!(heartbeat_healthy("ts_ms\n0\n1000\n2000\n3000\n"));
        assert!(!heartbeat_healthy("ts_ms\n0\n1000\n8000\n"));
        assert!(heartbeat_healthy("ts_ms\n"));
    }
}
