//! The message broker instances share data through.
//!
//! A single hub lives in the orchestrator process. Every data frame published
//! to a topic is retained, so late subscribers (clients joining after
//! validators published credentials) still receive it. Delivery is
//! at-least-once on the wire; the client dedups by (sender, topic, sequence)
//! and presents exactly-once to its consumers.
//!
//! Control messages reuse the frame codec on reserved `!`-prefixed topics:
//! `!sub` (payload = topic to subscribe), `!ack` (publish acknowledgement),
//! `!ping`/`!pong` (clock-skew probe, payload = hub unix ms).

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncWriteExt, BufReader, BufWriter};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, Mutex};

use crate::runtime::clock::unix_now_ms;
use crate::runtime::wire::Frame;
use crate::telemetry::NetCounters;

const SUB_TOPIC: &str = "!sub";
const ACK_TOPIC: &str = "!ack";
const PING_TOPIC: &str = "!ping";
const PONG_TOPIC: &str = "!pong";

const PUBLISH_ATTEMPTS: usize = 3;
const PUBLISH_ACK_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("broker unavailable: {0}")]
    Unavailable(String),
    #[error("broker connection closed")]
    Closed,
}

#[derive(Default)]
struct TopicState {
    retained: Vec<Frame>,
    subscribers: Vec<mpsc::UnboundedSender<Frame>>,
}

#[derive(Default)]
struct HubState {
    topics: HashMap<String, TopicState>,
}

/// The broker hub: accepts connections and fans published frames out to
/// current and future subscribers.
pub struct BrokerHub {
    addr: SocketAddr,
    accept_task: tokio::task::JoinHandle<()>,
}

impl BrokerHub {
    pub async fn bind() -> std::io::Result<BrokerHub> {
        let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(HubState::default()));
        let accept_task = tokio::spawn(async move {
            loop {
                let Ok((socket, _)) = listener.accept().await else {
                    break;
                };
                let state = state.clone();
                tokio::spawn(handle_connection(socket, state));
            }
        });
        Ok(BrokerHub { addr, accept_task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for BrokerHub {
    fn drop(&mut self) {
        self.accept_task.abort();
    }
}

async fn handle_connection(socket: TcpStream, state: Arc<Mutex<HubState>>) {
    let _ = socket.set_nodelay(true);
    let (read_half, write_half) = socket.into_split();
    let mut reader = BufReader::new(read_half);
    // All writes to this connection funnel through one queue so retained
    // replay, live frames, and acks cannot interleave mid-frame.
    let (out_tx, out_rx) = mpsc::unbounded_channel::<Frame>();
    let writer_task = tokio::spawn(write_loop(write_half, out_rx));

    loop {
        let frame = match Frame::read_from(&mut reader).await {
            Ok(Some(frame)) => frame,
            Ok(None) | Err(_) => break,
        };
        match frame.topic.as_str() {
            SUB_TOPIC => {
                let topic = String::from_utf8_lossy(&frame.payload).to_string();
                let mut state = state.lock().await;
                let entry = state.topics.entry(topic).or_default();
                for retained in &entry.retained {
                    let _ = out_tx.send(retained.clone());
                }
                entry.subscribers.push(out_tx.clone());
            }
            PING_TOPIC => {
                let pong = Frame::new(
                    PONG_TOPIC,
                    0,
                    frame.sequence,
                    unix_now_ms().to_be_bytes().to_vec(),
                );
                let _ = out_tx.send(pong);
            }
            _ => {
                let mut state = state.lock().await;
                let entry = state.topics.entry(frame.topic.clone()).or_default();
                entry.retained.push(frame.clone());
                entry
                    .subscribers
                    .retain(|sub| sub.send(frame.clone()).is_ok());
                let ack = Frame::new(ACK_TOPIC, 0, frame.sequence, Vec::new());
                let _ = out_tx.send(ack);
            }
        }
    }
    writer_task.abort();
}

async fn write_loop(write_half: OwnedWriteHalf, mut rx: mpsc::UnboundedReceiver<Frame>) {
    let counters = NetCounters::default();
    let mut writer = BufWriter::new(write_half);
    while let Some(frame) = rx.recv().await {
        if frame.write_to(&mut writer, &counters).await.is_err() {
            break;
        }
        // Coalesce whatever is already queued before flushing.
        while let Ok(extra) = rx.try_recv() {
            if extra.write_to(&mut writer, &counters).await.is_err() {
                return;
            }
        }
        if writer.flush().await.is_err() {
            break;
        }
    }
}

struct ClientShared {
    subscriptions: HashMap<String, mpsc::UnboundedSender<Frame>>,
    ack_waiters: HashMap<u64, oneshot::Sender<()>>,
    pong_waiters: HashMap<u64, oneshot::Sender<i64>>,
    seen: HashSet<(u32, String, u64)>,
}

/// A broker connection owned by one instance. Clone-able; all clones share
/// the underlying connection and dedup state.
#[derive(Clone)]
pub struct BrokerClient {
    sender_id: u32,
    out_tx: mpsc::UnboundedSender<Frame>,
    shared: Arc<std::sync::Mutex<ClientShared>>,
    next_seq: Arc<std::sync::atomic::AtomicU64>,
}

impl BrokerClient {
    pub async fn connect(
        addr: SocketAddr,
        sender_id: u32,
        counters: NetCounters,
    ) -> Result<BrokerClient, BrokerError> {
        let socket = TcpStream::connect(addr)
            .await
            .map_err(|e| BrokerError::Unavailable(e.to_string()))?;
        let _ = socket.set_nodelay(true);
        let (read_half, write_half) = socket.into_split();
        let shared = Arc::new(std::sync::Mutex::new(ClientShared {
            subscriptions: HashMap::new(),
            ack_waiters: HashMap::new(),
            pong_waiters: HashMap::new(),
            seen: HashSet::new(),
        }));
        let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Frame>();

        let write_counters = counters.clone();
        tokio::spawn(async move {
            let mut writer = BufWriter::new(write_half);
            while let Some(frame) = out_rx.recv().await {
                if frame.write_to(&mut writer, &write_counters).await.is_err() {
                    break;
                }
                if writer.flush().await.is_err() {
                    break;
                }
            }
        });

        let read_shared = shared.clone();
        tokio::spawn(async move {
            let mut reader = BufReader::new(read_half);
            loop {
                let frame = match Frame::read_from(&mut reader).await {
                    Ok(Some(frame)) => frame,
                    Ok(None) | Err(_) => break,
                };
                counters.add_in(frame.wire_len());
                let mut shared = read_shared.lock().unwrap();
                match frame.topic.as_str() {
                    ACK_TOPIC => {
                        if let Some(waiter) = shared.ack_waiters.remove(&frame.sequence) {
                            let _ = waiter.send(());
                        }
                    }
                    PONG_TOPIC => {
                        if let Some(waiter) = shared.pong_waiters.remove(&frame.sequence) {
                            let hub_ms = frame
                                .payload
                                .as_slice()
                                .try_into()
                                .map(i64::from_be_bytes)
                                .unwrap_or(0);
                            let _ = waiter.send(hub_ms);
                        }
                    }
                    _ => {
                        let key = (frame.sender, frame.topic.clone(), frame.sequence);
                        if !shared.seen.insert(key) {
                            continue;
                        }
                        if let Some(sub) = shared.subscriptions.get(&frame.topic) {
                            let _ = sub.send(frame);
                        }
                    }
                }
            }
        });

        Ok(BrokerClient {
            sender_id,
            out_tx,
            shared,
            next_seq: Arc::new(std::sync::atomic::AtomicU64::new(1)),
        })
    }

    /// Connects with bounded retries; instances race the hub at startup.
    pub async fn connect_with_retries(
        addr: SocketAddr,
        sender_id: u32,
        counters: NetCounters,
        attempts: usize,
    ) -> Result<BrokerClient, BrokerError> {
        let mut last = String::new();
        for attempt in 0..attempts {
            match Self::connect(addr, sender_id, counters.clone()).await {
                Ok(client) => return Ok(client),
                Err(e) => {
                    last = e.to_string();
                    tokio::time::sleep(Duration::from_millis(50 << attempt.min(5))).await;
                }
            }
        }
        Err(BrokerError::Unavailable(last))
    }

    fn next_sequence(&self) -> u64 {
        self.next_seq
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed)
    }

    /// Publishes to a topic; resolves once the hub acknowledged retention.
    ///
    /// All current subscribers eventually receive the message exactly once;
    /// messages from one sender on one topic arrive in publish order.
    pub async fn publish(&self, topic: &str, payload: Vec<u8>) -> Result<(), BrokerError> {
        let seq = self.next_sequence();
        let frame = Frame::new(topic, self.sender_id, seq, payload);
        for _ in 0..PUBLISH_ATTEMPTS {
            let (ack_tx, ack_rx) = oneshot::channel();
            self.shared.lock().unwrap().ack_waiters.insert(seq, ack_tx);
            self.out_tx
                .send(frame.clone())
                .map_err(|_| BrokerError::Closed)?;
            match tokio::time::timeout(PUBLISH_ACK_TIMEOUT, ack_rx).await {
                Ok(Ok(())) => return Ok(()),
                _ => {
                    self.shared.lock().unwrap().ack_waiters.remove(&seq);
                }
            }
        }
        Err(BrokerError::Unavailable(format!(
            "no ack for publish to `{topic}` after {PUBLISH_ATTEMPTS} attempts"
        )))
    }

    /// Subscribes to a topic: the stream yields retained messages first, then
    /// live ones.
    pub fn subscribe(&self, topic: &str) -> mpsc::UnboundedReceiver<Frame> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.shared
            .lock()
            .unwrap()
            .subscriptions
            .insert(topic.to_string(), tx);
        let sub = Frame::new(SUB_TOPIC, self.sender_id, 0, topic.as_bytes().to_vec());
        let _ = self.out_tx.send(sub);
        rx
    }

    /// Estimated offset between this host's clock and the hub's clock, in ms.
    pub async fn clock_offset_ms(&self) -> Result<i64, BrokerError> {
        let seq = self.next_sequence();
        let (tx, rx) = oneshot::channel();
        self.shared.lock().unwrap().pong_waiters.insert(seq, tx);
        let sent_at = unix_now_ms();
        self.out_tx
            .send(Frame::new(PING_TOPIC, self.sender_id, seq, Vec::new()))
            .map_err(|_| BrokerError::Closed)?;
        let hub_ms = tokio::time::timeout(PUBLISH_ACK_TIMEOUT, rx)
            .await
            .map_err(|_| BrokerError::Unavailable("ping timeout".into()))?
            .map_err(|_| BrokerError::Closed)?;
        let received_at = unix_now_ms();
        Ok(hub_ms - (sent_at + received_at) / 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    async fn hub_and_client(id: u32, hub: &BrokerHub) -> BrokerClient {
        BrokerClient::connect(hub.addr(), id, NetCounters::default())
            .await
            .unwrap()
    }

    #[tokio::test]
    async fn publish_reaches_current_subscribers() {
        let hub = BrokerHub::bind().await.unwrap();
        let publisher = hub_and_client(1, &hub).await;
        let subscriber = hub_and_client(11, &hub).await;
        let mut stream = subscriber.subscribe("accounts");
        // Give the hub a beat to register the subscription.
        tokio::time::sleep(Duration::from_millis(20)).await;
        publisher.publish("accounts", b"creds".to_vec()).await.unwrap();
        let frame = stream.recv().await.unwrap();
        assert_eq!(frame.payload, b"creds");
        assert_eq!(frame.sender, 1);
    }

    #[tokio::test]
    async fn retained_messages_reach_late_subscribers() {
        let hub = BrokerHub::bind().await.unwrap();
        let publisher = hub_and_client(1, &hub).await;
        publisher.publish("topic", b"early".to_vec()).await.unwrap();

        let late = hub_and_client(12, &hub).await;
        let mut stream = late.subscribe("topic");
        let frame = tokio::time::timeout(Duration::from_secs(2), stream.recv())
            .await
            .unwrap()
            .unwrap();
        assert_eq!(frame.payload, b"early");
    }

    #[tokio::test]
    async fn per_sender_order_is_preserved() {
        let hub = BrokerHub::bind().await.unwrap();
        let a = hub_and_client(1, &hub).await;
        let b = hub_and_client(2, &hub).await;
        let subscriber = hub_and_client(13, &hub).await;
        let mut stream = subscriber.subscribe("seq");
        tokio::time::sleep(Duration::from_millis(20)).await;

        for i in 0..20u8 {
            a.publish("seq", vec![i]).await.unwrap();
            b.publish("seq", vec![100 + i]).await.unwrap();
        }
        let mut per_sender: HashMap<u32, Vec<u64>> = HashMap::new();
        for _ in 0..40 {
            let frame = tokio::time::timeout(Duration::from_secs(2), stream.recv())
                .await
                .unwrap()
                .unwrap();
            per_sender.entry(frame.sender).or_default().push(frame.sequence);
        }
        // The merge may interleave senders, but each sender's sequence
        // numbers must arrive strictly increasing.
        for (_, seqs) in per_sender {
            assert_eq!(seqs.len(), 20);
            assert!(seqs.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[tokio::test]
    async fn duplicate_retained_and_live_frames_dedup() {
        let hub = BrokerHub::bind().await.unwrap();
        let publisher = hub_and_client(1, &hub).await;
        publisher.publish("t", b"x".to_vec()).await.unwrap();
        let client = hub_and_client(14, &hub).await;
        // Subscribing twice replays the retained frame twice on the wire;
        // the client must still deliver it once.
        let mut first = client.subscribe("t");
        tokio::time::sleep(Duration::from_millis(20)).await;
        let _second = client.subscribe("t");
        let frame = first.recv().await.unwrap();
        assert_eq!(frame.payload, b"x");
        tokio::time::sleep(Duration::from_millis(50)).await;
        assert!(first.try_recv().is_err());
    }

    #[tokio::test]
    async fn clock_offset_is_small_on_same_host() {
        let hub = BrokerHub::bind().await.unwrap();
        let client = hub_and_client(1, &hub).await;
        let offset = client.clock_offset_ms().await.unwrap();
        assert!(offset.abs() < 1000, "offset = {offset}");
    }

    #[tokio::test]
    async fn unreachable_hub_reports_unavailable() {
        let result = BrokerClient::connect_with_retries(
            "127.0.0.1:9".parse().unwrap(),
            1,
            NetCounters::default(),
            2,
        )
        .await;
        assert!(matches!(result, Err(BrokerError::Unavailable(_))));
    }
}
