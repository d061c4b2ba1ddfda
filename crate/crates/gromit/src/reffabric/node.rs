//! One running reference-fabric validator: a round-clock task producing and
//! committing blocks, a peer-network task speaking the framed validator
//! protocol (kinds `TX`, `BLOCK`, `RESYNC_REQ`, `RESYNC_RESP`), and a wallet
//! server for clients.
//!
//! Link delays are injected on the receive side: each inbound peer frame is
//! stamped on arrival and processed only once its one-way delay elapsed.
//! Per-connection processing is sequential, so per-link FIFO order holds.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, BufWriter};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::model::{GenesisFile, InstanceId, Ms};
use crate::netshape::LinkDelays;
use crate::runtime::clock::EpochClock;
use crate::runtime::wire::Frame;
use crate::telemetry::NetCounters;

use super::ledger;
use super::state::{ApplyError, ApplyOutcome, GossipAction, ValidatorState};
use super::types::{Block, FabricParams};
use super::wallet;

const KIND_TX: &str = "TX";
const KIND_BLOCK: &str = "BLOCK";
const KIND_RESYNC_REQ: &str = "RESYNC_REQ";
const KIND_RESYNC_RESP: &str = "RESYNC_RESP";

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("fabric node io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("fabric node export error on {0}: {1}")]
    Export(PathBuf, std::io::Error),
}

/// Everything needed to start one validator node.
pub struct NodeConfig {
    pub self_id: InstanceId,
    pub n_validators: u32,
    pub params: FabricParams,
    pub genesis: GenesisFile,
    pub neighbors: Vec<u32>,
    pub link_delays: Option<LinkDelays>,
    /// Extra submit-side delay per sender account when client links are also
    /// shaped. Keyed by account id.
    pub client_submit_delay_ms: HashMap<String, u64>,
    pub clock: EpochClock,
    pub counters: NetCounters,
    /// Directory `ledger.ndjson` and `accounts.json` land in on shutdown.
    pub export_dir: PathBuf,
    /// Stop producing blocks at round boundaries at or after this offset, so
    /// every validator ends on the same deterministic final block.
    pub production_cutoff_ms: Option<Ms>,
    pub bind_host: String,
}

struct Shared {
    state: Mutex<ValidatorState>,
    peers: PeerLinks,
    self_id: u32,
    neighbors: Vec<u32>,
    link_delays: Option<LinkDelays>,
    clock: EpochClock,
    counters: NetCounters,
}

/// Outbound connections to other validators, resolved lazily from the
/// endpoint table the broker fills in.
struct PeerLinks {
    endpoints: Mutex<HashMap<u32, SocketAddr>>,
    conns: tokio::sync::Mutex<HashMap<u32, mpsc::UnboundedSender<Frame>>>,
    counters: NetCounters,
    sequence: std::sync::atomic::AtomicU64,
}

impl PeerLinks {
    fn new(counters: NetCounters) -> Self {
        PeerLinks {
            endpoints: Mutex::new(HashMap::new()),
            conns: tokio::sync::Mutex::new(HashMap::new()),
            counters,
            sequence: std::sync::atomic::AtomicU64::new(1),
        }
    }

    fn set_endpoint(&self, id: u32, addr: SocketAddr) {
        self.endpoints.lock().unwrap().insert(id, addr);
    }

    fn next_seq(&self) -> u64 {
        self.sequence
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed)
    }

    /// Sends a frame to a validator, establishing the connection on first
    /// use. Waits briefly for the endpoint to appear in the table; failures
    /// are logged and dropped (the resync path recovers lost blocks).
    async fn send(&self, to: u32, frame: Frame) {
        let sender = {
            let mut conns = self.conns.lock().await;
            if let Some(tx) = conns.get(&to) {
                if !tx.is_closed() {
                    Some(tx.clone())
                } else {
                    conns.remove(&to);
                    None
                }
            } else {
                None
            }
        };
        let sender = match sender {
            Some(s) => s,
            None => {
                let addr = {
                    let mut waited = 0u64;
                    loop {
                        if let Some(addr) = self.endpoints.lock().unwrap().get(&to).copied() {
                            break Some(addr);
                        }
                        if waited >= 3000 {
                            break None;
                        }
                        tokio::time::sleep(Duration::from_millis(50)).await;
                        waited += 50;
                    }
                };
                let Some(addr) = addr else {
                    log::warn!("no endpoint known for validator {to}; dropping {}", frame.topic);
                    return;
                };
                match TcpStream::connect(addr).await {
                    Ok(stream) => {
                        let _ = stream.set_nodelay(true);
                        let (tx, mut rx) = mpsc::unbounded_channel::<Frame>();
                        let counters = self.counters.clone();
                        tokio::spawn(async move {
                            let mut writer = BufWriter::new(stream);
                            while let Some(frame) = rx.recv().await {
                                if frame.write_to(&mut writer, &counters).await.is_err() {
                                    break;
                                }
                                while let Ok(extra) = rx.try_recv() {
                                    if extra.write_to(&mut writer, &counters).await.is_err() {
                                        return;
                                    }
                                }
                                if writer.flush().await.is_err() {
                                    break;
                                }
                            }
                        });
                        self.conns.lock().await.insert(to, tx.clone());
                        tx
                    }
                    Err(e) => {
                        log::warn!("cannot connect to validator {to} at {addr}: {e}");
                        return;
                    }
                }
            }
        };
        let _ = sender.send(frame);
    }
}

/// Clone-able view of a node's peer endpoint table.
#[derive(Clone)]
pub struct NodeEndpointHandle {
    shared: Arc<Shared>,
}

impl NodeEndpointHandle {
    pub fn set_peer_endpoint(&self, id: u32, addr: SocketAddr) {
        self.shared.peers.set_endpoint(id, addr);
    }
}

/// A running validator.
pub struct FabricNode {
    shared: Arc<Shared>,
    wallet_addr: SocketAddr,
    peer_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
    export_dir: PathBuf,
    stopped: bool,
}

impl FabricNode {
    pub async fn start(cfg: NodeConfig) -> Result<FabricNode, NodeError> {
        let wallet_listener = TcpListener::bind((cfg.bind_host.as_str(), 0)).await?;
        let peer_listener = TcpListener::bind((cfg.bind_host.as_str(), 0)).await?;
        let wallet_addr = wallet_listener.local_addr()?;
        let peer_addr = peer_listener.local_addr()?;

        let state = ValidatorState::new(
            cfg.self_id.get(),
            cfg.n_validators,
            cfg.params.clone(),
            &cfg.genesis,
        );
        let shared = Arc::new(Shared {
            state: Mutex::new(state),
            peers: PeerLinks::new(cfg.counters.clone()),
            self_id: cfg.self_id.get(),
            neighbors: cfg.neighbors.clone(),
            link_delays: cfg.link_delays.clone().or(cfg.params.link_delay_matrix.clone()),
            clock: cfg.clock,
            counters: cfg.counters.clone(),
        });

        let (shutdown, shutdown_rx) = watch::channel(false);
        let mut tasks = Vec::new();

        tasks.push(tokio::spawn(accept_wallet_loop(
            wallet_listener,
            shared.clone(),
            Arc::new(cfg.client_submit_delay_ms),
            shutdown_rx.clone(),
        )));
        tasks.push(tokio::spawn(accept_peer_loop(
            peer_listener,
            shared.clone(),
            shutdown_rx.clone(),
        )));
        tasks.push(tokio::spawn(round_clock_loop(
            shared.clone(),
            cfg.production_cutoff_ms,
            shutdown_rx,
        )));

        Ok(FabricNode {
            shared,
            wallet_addr,
            peer_addr,
            shutdown,
            tasks,
            export_dir: cfg.export_dir,
            stopped: false,
        })
    }

    pub fn wallet_addr(&self) -> SocketAddr {
        self.wallet_addr
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer_addr
    }

    pub fn set_peer_endpoint(&self, id: u32, addr: SocketAddr) {
        self.shared.peers.set_endpoint(id, addr);
    }

    /// Cheap handle for feeding peer endpoints from a discovery task.
    pub fn endpoint_handle(&self) -> NodeEndpointHandle {
        NodeEndpointHandle {
            shared: self.shared.clone(),
        }
    }

    /// Runs `f` under the state lock; test and telemetry hook.
    pub fn with_state<T>(&self, f: impl FnOnce(&ValidatorState) -> T) -> T {
        f(&self.shared.state.lock().unwrap())
    }

    /// Stops round production and listeners, waits a short grace period for
    /// in-flight frames, then exports the ledger. Idempotent.
    pub async fn stop(&mut self) -> Result<(), NodeError> {
        if self.stopped {
            return Ok(());
        }
        self.stopped = true;
        let max_delay = self
            .shared
            .link_delays
            .as_ref()
            .map(|d| d.max_delay())
            .unwrap_or(0);
        tokio::time::sleep(Duration::from_millis(300 + max_delay)).await;
        let _ = self.shutdown.send(true);
        tokio::time::sleep(Duration::from_millis(50)).await;
        for task in self.tasks.drain(..) {
            task.abort();
        }
        let state = self.shared.state.lock().unwrap();
        ledger::export_chain(&self.export_dir, state.chain())
            .map_err(|(p, e)| NodeError::Export(p, e))?;
        ledger::export_accounts(&self.export_dir, state.balances())
            .map_err(|(p, e)| NodeError::Export(p, e))?;
        Ok(())
    }
}

async fn round_clock_loop(
    shared: Arc<Shared>,
    production_cutoff_ms: Option<Ms>,
    mut shutdown: watch::Receiver<bool>,
) {
    let round_ms = {
        let state = shared.state.lock().unwrap();
        state.params().round_duration_ms as i64
    };
    let mut round = shared.clock.now_ms().div_euclid(round_ms);
    loop {
        let boundary = (round + 1) * round_ms;
        tokio::select! {
            _ = tokio::time::sleep_until(shared.clock.instant_at(boundary)) => {}
            _ = shutdown.changed() => {
                if *shutdown.borrow() {
                    return;
                }
            }
        }
        round += 1;
        if let Some(cutoff) = production_cutoff_ms {
            if round * round_ms >= cutoff {
                // Keep serving status queries, but the chain is final.
                continue;
            }
        }
        let block = {
            let mut state = shared.state.lock().unwrap();
            if state.leader_of(round) != shared.self_id {
                continue;
            }
            state.drain_block(shared.clock.now_ms())
        };
        log::debug!(
            "validator {} proposed block {} with {} txs",
            shared.self_id,
            block.height,
            block.txs.len()
        );
        broadcast_block(&shared, &block, None).await;
    }
}

async fn broadcast_block(shared: &Arc<Shared>, block: &Block, except: Option<u32>) {
    let payload = serde_json::to_vec(block).expect("block serializes");
    for &neighbor in &shared.neighbors {
        if Some(neighbor) == except {
            continue;
        }
        let frame = Frame::new(
            KIND_BLOCK,
            shared.self_id,
            shared.peers.next_seq(),
            payload.clone(),
        );
        shared.peers.send(neighbor, frame).await;
    }
}

async fn forward_tx(shared: &Arc<Shared>, tx_json: Vec<u8>, except: Option<u32>) {
    for &neighbor in &shared.neighbors {
        if Some(neighbor) == except {
            continue;
        }
        let frame = Frame::new(
            KIND_TX,
            shared.self_id,
            shared.peers.next_seq(),
            tx_json.clone(),
        );
        shared.peers.send(neighbor, frame).await;
    }
}

async fn accept_wallet_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    submit_delays: Arc<HashMap<String, u64>>,
    mut shutdown: watch::Receiver<bool>,
) {
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((socket, _)) = accepted else { break };
                let _ = socket.set_nodelay(true);
                tokio::spawn(serve_wallet_conn(socket, shared.clone(), submit_delays.clone()));
            }
            _ = shutdown.changed() => {
                if *shutdown.borrow() {
                    break;
                }
            }
        }
    }
}

async fn serve_wallet_conn(
    socket: TcpStream,
    shared: Arc<Shared>,
    submit_delays: Arc<HashMap<String, u64>>,
) {
    let (read_half, write_half) = socket.into_split();
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(write_half);
    let mut line = String::new();
    loop {
        line.clear();
        let n = match reader.read_line(&mut line).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        shared.counters.add_in(n as u64);
        let response = match wallet::parse_request(&line) {
            Some(wallet::WalletRequest::Submit(tx)) => {
                if let Some(&delay) = submit_delays.get(&tx.sender) {
                    if delay > 0 {
                        tokio::time::sleep(Duration::from_millis(delay)).await;
                    }
                }
                let tx_id = tx.tx_id.clone();
                let tx_json = serde_json::to_vec(&tx).expect("tx serializes");
                let outcome = {
                    let mut state = shared.state.lock().unwrap();
                    state.wallet_submit(tx)
                };
                match outcome {
                    Ok(result) => {
                        if result.pooled {
                            forward_tx(&shared, tx_json, None).await;
                        }
                        wallet::encode_submit_ok(&tx_id)
                    }
                    Err(reason) => wallet::encode_submit_rejected(&tx_id, reason),
                }
            }
            Some(wallet::WalletRequest::Status(tx_id)) => {
                let status = shared.state.lock().unwrap().status(&tx_id);
                wallet::encode_status(&status)
            }
            None => "ERR unrecognized request\n".to_string(),
        };
        if writer.write_all(response.as_bytes()).await.is_err() {
            break;
        }
        if writer.flush().await.is_err() {
            break;
        }
        shared.counters.add_out(response.len() as u64);
    }
}

async fn accept_peer_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    mut shutdown: watch::Receiver<bool>,
) {
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((socket, _)) = accepted else { break };
                let _ = socket.set_nodelay(true);
                tokio::spawn(serve_peer_conn(socket, shared.clone()));
            }
            _ = shutdown.changed() => {
                if *shutdown.borrow() {
                    break;
                }
            }
        }
    }
}

/// Reads frames promptly and hands them to a sequential processor that
/// applies the receive-side link delay per frame.
async fn serve_peer_conn(socket: TcpStream, shared: Arc<Shared>) {
    let (read_half, _write_half) = socket.into_split();
    let (queue_tx, mut queue_rx) = mpsc::unbounded_channel::<(Frame, Instant)>();

    let reader_shared = shared.clone();
    let reader_task = tokio::spawn(async move {
        let mut reader = BufReader::new(read_half);
        loop {
            match Frame::read_from(&mut reader).await {
                Ok(Some(frame)) => {
                    reader_shared.counters.add_in(frame.wire_len());
                    if queue_tx.send((frame, Instant::now())).is_err() {
                        break;
                    }
                }
                Ok(None) | Err(_) => break,
            }
        }
    });

    while let Some((frame, arrived)) = queue_rx.recv().await {
        let delay_ms = shared
            .link_delays
            .as_ref()
            .and_then(|delays| {
                let from = InstanceId::new(frame.sender).ok()?;
                let to = InstanceId::new(shared.self_id).ok()?;
                Some(delays.between(from, to))
            })
            .unwrap_or(0);
        if delay_ms > 0 {
            tokio::time::sleep_until(arrived + Duration::from_millis(delay_ms)).await;
        }
        handle_peer_frame(&shared, frame).await;
    }
    reader_task.abort();
}

async fn handle_peer_frame(shared: &Arc<Shared>, frame: Frame) {
    match frame.topic.as_str() {
        KIND_TX => {
            let Ok(tx) = serde_json::from_slice::<crate::model::Transaction>(&frame.payload)
            else {
                return;
            };
            let action = {
                let mut state = shared.state.lock().unwrap();
                state.accept_gossip(tx)
            };
            if action == GossipAction::Forward {
                forward_tx(shared, frame.payload.clone(), Some(frame.sender)).await;
            }
        }
        KIND_BLOCK => {
            let Ok(block) = serde_json::from_slice::<Block>(&frame.payload) else {
                return;
            };
            let proposer = block.proposer;
            let outcome = {
                let mut state = shared.state.lock().unwrap();
                state.apply_block(block.clone())
            };
            match outcome {
                Ok(ApplyOutcome::Applied) => {
                    broadcast_block(shared, &block, Some(frame.sender)).await;
                }
                Ok(ApplyOutcome::AlreadyHave) => {}
                Err(ApplyError::HeightGap { local_head, .. }) => {
                    request_resync(shared, proposer, local_head + 1).await;
                }
                Err(ApplyError::ForkDetected { .. }) => {
                    log::warn!(
                        "validator {}: fork detected at block {}, resyncing from proposer {}",
                        shared.self_id,
                        block.height,
                        proposer
                    );
                    request_resync(shared, proposer, 1).await;
                }
                Err(e) => {
                    log::warn!("validator {}: rejected block: {e}", shared.self_id);
                }
            }
        }
        KIND_RESYNC_REQ => {
            let from_height = serde_json::from_slice::<u64>(&frame.payload).unwrap_or(1);
            let blocks = {
                let state = shared.state.lock().unwrap();
                state.blocks_from(from_height)
            };
            let payload = serde_json::to_vec(&blocks).expect("blocks serialize");
            let resp = Frame::new(
                KIND_RESYNC_RESP,
                shared.self_id,
                shared.peers.next_seq(),
                payload,
            );
            shared.peers.send(frame.sender, resp).await;
        }
        KIND_RESYNC_RESP => {
            let Ok(blocks) = serde_json::from_slice::<Vec<Block>>(&frame.payload) else {
                return;
            };
            let applied = {
                let mut state = shared.state.lock().unwrap();
                state.apply_resync(blocks)
            };
            if applied > 0 {
                log::debug!("validator {}: resync applied {applied} blocks", shared.self_id);
            }
        }
        other => log::warn!("validator {}: unknown peer frame kind `{other}`", shared.self_id),
    }
}

async fn request_resync(shared: &Arc<Shared>, proposer: u32, from_height: u64) {
    let payload = serde_json::to_vec(&from_height).expect("u64 serializes");
    let frame = Frame::new(
        KIND_RESYNC_REQ,
        shared.self_id,
        shared.peers.next_seq(),
        payload,
    );
    shared.peers.send(proposer, frame).await;
}
