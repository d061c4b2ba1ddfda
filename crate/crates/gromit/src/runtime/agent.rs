//! The per-instance agent process: loads the run directory, connects to the
//! broker, runs the scenario schedule, and drives the adapter, workload,
//! telemetry, and graceful termination.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::sync::watch;

use crate::adapter::{
    scenario_action_vocabulary, AdapterContext, AdapterRegistry, DISPATCH_FILE, HEARTBEAT_FILE,
    METRICS_FILE, POLLS_FILE,
};
use crate::model::{
    assign_validator, Credential, ExperimentConfig, GenesisFile, InstanceId, Role,
};
use crate::netshape::{LatencyMatrix, LinkDelays};
use crate::orchestrator::{
    CONFIG_SNAPSHOT_FILE, GENESIS_FILE_NAME, LINK_DELAYS_FILE, SCENARIO_FILE, TOPOLOGY_FILE,
};
use crate::reffabric::wallet::WalletClient;
use crate::reffabric::{ClientCredentialRecord, EndpointRecord, ACCOUNTS_TOPIC, ENDPOINTS_TOPIC};
use crate::runtime::broker::BrokerClient;
use crate::runtime::clock::EpochClock;
use crate::scenario::{self, ScenarioAction, Scenario};
use crate::telemetry::{monitor_loop, NetCounters, PidSet, Sampler};
use crate::workload::{self, counterparty_client, LoadContext};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("bad run directory contents: {0}")]
    RunDir(String),
    #[error(transparent)]
    Config(#[from] crate::model::ConfigError),
    #[error(transparent)]
    Scenario(#[from] crate::scenario::ScenarioError),
    #[error("broker: {0}")]
    Broker(#[from] crate::runtime::broker::BrokerError),
    #[error("adapter: {0}")]
    Adapter(#[from] crate::adapter::AdapterError),
}

/// Command-line identity of one instance process.
#[derive(Debug, Clone)]
pub struct InstanceArgs {
    pub id: u32,
    pub role: Role,
    pub broker: SocketAddr,
    pub epoch_unix_ms: i64,
    pub run_dir: PathBuf,
}

struct ClientRuntime {
    validator: InstanceId,
    wallet_addr: SocketAddr,
    wallet: Option<WalletClient>,
    credential: Credential,
    counterparty_account: String,
}

struct Agent {
    ctx: Arc<AdapterContext>,
    adapter: Box<dyn crate::adapter::SystemAdapter>,
    config: ExperimentConfig,
    self_id: InstanceId,
    role: Role,
    clock: EpochClock,
    counters: NetCounters,
    client: Option<ClientRuntime>,
    load_task: Option<tokio::task::JoinHandle<()>>,
    poll_task: Option<tokio::task::JoinHandle<()>>,
    poll_stop: Option<watch::Sender<bool>>,
}

const RESOLVE_TIMEOUT: Duration = Duration::from_secs(30);

impl Agent {
    async fn execute(&mut self, action: &ScenarioAction) -> Result<(), String> {
        match action.action.as_str() {
            "init_blockchain_config" => self
                .adapter
                .init_configuration(self.ctx.clone())
                .await
                .map_err(|e| e.to_string()),
            "start_validator" => {
                if self.role != Role::Validator {
                    return Err("start_validator dispatched to a client instance".into());
                }
                self.adapter
                    .start_validator(self.self_id)
                    .await
                    .map_err(|e| e.to_string())
            }
            "stop_validator" => self
                .adapter
                .stop_validator(self.self_id)
                .await
                .map_err(|e| e.to_string()),
            "start_client" => {
                if self.role != Role::Client {
                    return Err("start_client dispatched to a validator instance".into());
                }
                self.start_client().await
            }
            "start_creating_transactions" => {
                if self.role != Role::Client {
                    return Err("start_creating_transactions dispatched to a validator".into());
                }
                self.start_creating_transactions().await
            }
            scenario::STOP_ACTION => {
                self.graceful_stop().await;
                Ok(())
            }
            other => Err(format!("action `{other}` is not in the registered vocabulary")),
        }
    }

    /// Resolves credentials and the assigned validator's wallet endpoint via
    /// the broker, then connects.
    async fn start_client(&mut self) -> Result<(), String> {
        let assigned = assign_validator(self.self_id, self.config.n_validators);

        let mut accounts = self.ctx.broker.subscribe(ACCOUNTS_TOPIC);
        let frame = tokio::time::timeout(RESOLVE_TIMEOUT, accounts.recv())
            .await
            .map_err(|_| "timed out waiting for account credentials".to_string())?
            .ok_or("broker stream closed while waiting for credentials")?;
        let records: Vec<ClientCredentialRecord> =
            serde_json::from_slice(&frame.payload).map_err(|e| format!("bad credentials: {e}"))?;
        let credential = records
            .iter()
            .find(|r| r.client == self.self_id.get())
            .map(|r| r.credential.clone())
            .ok_or_else(|| format!("no credential for client {}", self.self_id))?;
        let counterparty = counterparty_client(
            self.self_id,
            self.config.n_validators,
            self.config.n_clients,
        );
        let counterparty_account = records
            .iter()
            .find(|r| r.client == counterparty.get())
            .map(|r| r.credential.account.clone())
            .unwrap_or_else(|| GenesisFile::account_for(counterparty));

        let mut endpoints = self.ctx.broker.subscribe(ENDPOINTS_TOPIC);
        let wallet_addr = loop {
            let frame = tokio::time::timeout(RESOLVE_TIMEOUT, endpoints.recv())
                .await
                .map_err(|_| format!("timed out waiting for validator {assigned} endpoint"))?
                .ok_or("broker stream closed while waiting for endpoints")?;
            if let Ok(record) = serde_json::from_slice::<EndpointRecord>(&frame.payload) {
                if record.id == assigned.get() {
                    break record
                        .wallet
                        .parse::<SocketAddr>()
                        .map_err(|e| format!("bad wallet endpoint: {e}"))?;
                }
            }
        };

        let wallet = WalletClient::connect(wallet_addr, self.counters.clone())
            .await
            .map_err(|e| format!("wallet connect failed: {e}"))?;
        self.client = Some(ClientRuntime {
            validator: assigned,
            wallet_addr,
            wallet: Some(wallet),
            credential,
            counterparty_account,
        });
        log::info!(
            "client {} attached to validator {assigned} at {wallet_addr}",
            self.self_id
        );
        Ok(())
    }

    /// Spawns the open-loop load (and the confirmation poller when enabled).
    async fn start_creating_transactions(&mut self) -> Result<(), String> {
        let client = self
            .client
            .as_mut()
            .ok_or("client not started; start_client must run first")?;
        let mut wallet = client
            .wallet
            .take()
            .ok_or("transaction creation already started")?;

        let poll_feed = if self.config.poll_interval_ms > 0 {
            let (feed_tx, feed_rx) = tokio::sync::mpsc::unbounded_channel();
            let poll_wallet = WalletClient::connect(client.wallet_addr, self.counters.clone())
                .await
                .map_err(|e| format!("poller wallet connect failed: {e}"))?;
            let (stop_tx, stop_rx) = watch::channel(false);
            let out_path = self.ctx.instance_dir.join(POLLS_FILE);
            self.poll_task = Some(tokio::spawn(workload::poll_loop(
                poll_wallet,
                self.clock,
                self.config.poll_interval_ms,
                out_path,
                feed_rx,
                stop_rx,
            )));
            self.poll_stop = Some(stop_tx);
            Some(feed_tx)
        } else {
            None
        };

        let load_ctx = LoadContext {
            client: self.self_id,
            validator: client.validator,
            credential: client.credential.clone(),
            counterparty_account: client.counterparty_account.clone(),
            rate_per_client: self.config.per_client_rate(),
            issue_duration_s: self.config.issue_duration,
            transfer_amount: self.config.transfer_amount,
            clock: self.clock,
            out_dir: self.ctx.instance_dir.clone(),
        };
        let drain = self.config.drain_duration;
        let client_id = self.self_id;
        self.load_task = Some(tokio::spawn(async move {
            match workload::start_load(&load_ctx, &mut wallet, poll_feed.as_ref()).await {
                Ok(summary) => log::info!(
                    "client {client_id}: submitted {} (accepted {}, rejected {}, failed {}), max lateness {} ms",
                    summary.submitted,
                    summary.accepted,
                    summary.rejected,
                    summary.failed,
                    summary.max_lateness_ms
                ),
                Err(e) => log::error!("client {client_id}: load failed: {e}"),
            }
            workload::drain_wait(drain).await;
        }));
        Ok(())
    }

    /// The stop action: wind down the workload, flush the poller, stop the
    /// validator (exporting its ledger). Always completes.
    async fn graceful_stop(&mut self) {
        if let Some(load) = self.load_task.take() {
            if !load.is_finished() {
                log::warn!("stop arrived while the load window was still open; aborting load");
                load.abort();
            }
            let _ = tokio::time::timeout(Duration::from_secs(2), async {
                // Already-finished tasks resolve immediately; aborted ones error.
            })
            .await;
        }
        if let Some(stop) = self.poll_stop.take() {
            let _ = stop.send(true);
        }
        if let Some(poll) = self.poll_task.take() {
            let _ = tokio::time::timeout(Duration::from_secs(5), poll).await;
        }
        if self.role == Role::Validator {
            if let Err(e) = self.adapter.stop_validator(self.self_id).await {
                log::warn!("stop_validator during shutdown failed: {e}");
            }
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, AgentError> {
    let text = std::fs::read_to_string(path).map_err(|e| AgentError::Io(path.clone(), e))?;
    serde_json::from_str(&text).map_err(|e| AgentError::RunDir(format!("{}: {e}", path.display())))
}

/// Entry point of the `instance` subcommand: runs one instance end to end
/// and returns once the scenario stopped it.
pub async fn run_instance(args: InstanceArgs) -> Result<(), AgentError> {
    let self_id = InstanceId::new(args.id)
        .map_err(|e| AgentError::RunDir(format!("bad instance id: {e}")))?;
    let instance_dir = args.run_dir.join(format!("instance-{self_id}"));
    std::fs::create_dir_all(&instance_dir).map_err(|e| AgentError::Io(instance_dir.clone(), e))?;

    let config = ExperimentConfig::parse_file(&args.run_dir.join(CONFIG_SNAPSHOT_FILE))?;
    let scenario_text = std::fs::read_to_string(args.run_dir.join(SCENARIO_FILE))
        .map_err(|e| AgentError::Io(args.run_dir.join(SCENARIO_FILE), e))?;
    let scenario: Scenario = scenario::parse_scenario(&scenario_text)?;
    for unknown in scenario.unknown_actions(&scenario_action_vocabulary()) {
        log::warn!("scenario uses unregistered action `{unknown}`");
    }
    let genesis: GenesisFile = read_json(&args.run_dir.join(GENESIS_FILE_NAME))?;
    let topology = read_json(&args.run_dir.join(TOPOLOGY_FILE))?;
    let link_delays: Option<LinkDelays> = {
        let path = args.run_dir.join(LINK_DELAYS_FILE);
        if path.exists() {
            Some(read_json(&path)?)
        } else {
            None
        }
    };
    let latency_matrix = match &config.latency_matrix_path {
        Some(path) if path.exists() => Some(
            LatencyMatrix::load(path)
                .map_err(|e| AgentError::RunDir(format!("latency matrix: {e}")))?,
        ),
        _ => None,
    };

    let clock = EpochClock::from_unix_ms(args.epoch_unix_ms);
    let counters = NetCounters::default();
    let pids = PidSet::of_self();
    let broker =
        BrokerClient::connect_with_retries(args.broker, args.id, counters.clone(), 8).await?;

    // Round clocks tolerate skew up to a quarter round; complain beyond it.
    if let Ok(offset) = broker.clock_offset_ms().await {
        let quarter_round = (config.fabric_params.round_duration_ms / 4) as i64;
        if offset.abs() > quarter_round.max(1) {
            log::warn!(
                "host clock is {offset} ms off the orchestrator; round alignment may suffer"
            );
        }
    }

    // Telemetry and heartbeat run for the life of the instance.
    let (telemetry_stop_tx, telemetry_stop_rx) = watch::channel(false);
    let telemetry_task = match Sampler::check_available() {
        Ok(()) => {
            let sampler = Sampler {
                instance: self_id,
                pids: pids.clone(),
                workdir: instance_dir.clone(),
                net: counters.clone(),
            };
            Some(tokio::spawn(monitor_loop(
                sampler,
                clock,
                1000,
                instance_dir.join(METRICS_FILE),
                telemetry_stop_rx,
            )))
        }
        Err(e) => {
            log::warn!("resource sampling disabled: {e}");
            None
        }
    };
    let heartbeat_task = {
        let path = instance_dir.join(HEARTBEAT_FILE);
        let clock = clock;
        let mut stop = telemetry_stop_tx.subscribe();
        tokio::spawn(async move {
            use std::io::Write as _;
            let Ok(mut file) = std::fs::File::create(&path) else { return };
            let _ = writeln!(file, "ts_ms");
            let mut ticker =
                tokio::time::interval(Duration::from_millis(crate::orchestrator::HEARTBEAT_CADENCE_MS as u64));
            loop {
                tokio::select! {
                    _ = ticker.tick() => {
                        let _ = writeln!(file, "{}", clock.now_ms());
                    }
                    _ = stop.changed() => {
                        if *stop.borrow() {
                            break;
                        }
                    }
                }
            }
        })
    };

    let registry = AdapterRegistry::builtin();
    let adapter = registry.create(&config.adapter)?;
    let role = args.role;
    let ctx = Arc::new(AdapterContext {
        config: config.clone(),
        topology,
        genesis,
        link_delays,
        latency_matrix,
        self_id,
        role,
        instance_dir: instance_dir.clone(),
        clock,
        broker,
        net_counters: counters.clone(),
        pids,
        stop_offset_ms: scenario.stop_offset().map(|s| (s * 1000.0) as i64),
        bind_host: "127.0.0.1".to_string(),
    });

    let agent = Arc::new(tokio::sync::Mutex::new(Agent {
        ctx: ctx.clone(),
        adapter,
        config,
        self_id,
        role,
        clock,
        counters,
        client: None,
        load_task: None,
        poll_task: None,
        poll_stop: None,
    }));

    let dispatch_agent = agent.clone();
    let log = scenario::schedule(&scenario, self_id, &clock, move |action| {
        let agent = dispatch_agent.clone();
        async move { agent.lock().await.execute(&action).await }
    })
    .await;

    if !log.stopped {
        // No stop action reached this instance; wind down anyway.
        agent.lock().await.graceful_stop().await;
    }

    // Persist the dispatch record.
    {
        use std::fmt::Write as _;
        let mut csv = String::from("at_s,action,dispatched_at_ms,lateness_ms,result\n");
        for r in &log.records {
            let result = match &r.result {
                Ok(()) => "ok".to_string(),
                Err(e) => format!("error:{}", e.replace([',', '\n'], ";")),
            };
            let _ = writeln!(
                csv,
                "{},{},{},{},{result}",
                r.at, r.action, r.dispatched_at_ms, r.lateness_ms
            );
        }
        let path = instance_dir.join(DISPATCH_FILE);
        std::fs::write(&path, csv).map_err(|e| AgentError::Io(path, e))?;
    }

    let _ = telemetry_stop_tx.send(true);
    if let Some(task) = telemetry_task {
        let _ = tokio::time::timeout(Duration::from_secs(3), task).await;
    }
    let _ = tokio::time::timeout(Duration::from_secs(1), heartbeat_task).await;

    let errors = log.errors().count();
    if errors > 0 {
        log::warn!("instance {self_id} finished with {errors} dispatch errors");
    }
    log::info!("instance {self_id} done");
    Ok(())
}
