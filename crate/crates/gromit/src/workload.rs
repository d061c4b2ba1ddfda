//! Open-loop client transaction generator.
//!
//! Each client submits fixed-amount transfers to its assigned validator at a
//! fixed per-client rate for the issue window, on a deterministic schedule
//! that never waits for confirmations. Every submission is logged; the
//! submission log is the ground truth later joined against the ledger.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::model::{Credential, InstanceId, Ms, Transaction};
use crate::reffabric::wallet::WalletClient;
use crate::reffabric::WalletStatus;
use crate::runtime::clock::EpochClock;

pub const SUBMISSIONS_CSV_HEADER: &str = "tx_id,client_id,validator_id,submit_ts_ms,status";
pub const POLLS_CSV_HEADER: &str = "tx_id,confirm_ts_ms,status";

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("client has no wallet connection; start_client must run first")]
    NotConnected,
}

/// One row of the submission log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmissionRecord {
    pub tx_id: String,
    pub client_id: u32,
    pub validator_id: u32,
    pub submit_ts_ms: Ms,
    /// `ok`, `rejected:<reason>`, or `failed:<diagnostic>`.
    pub status: String,
}

impl SubmissionRecord {
    pub fn accepted(&self) -> bool {
        self.status == "ok"
    }
}

pub fn submission_csv_row(r: &SubmissionRecord) -> String {
    format!(
        "{},{},{},{},{}",
        r.tx_id, r.client_id, r.validator_id, r.submit_ts_ms, r.status
    )
}

pub fn parse_submissions_csv(text: &str) -> Vec<SubmissionRecord> {
    let mut records = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.splitn(5, ',').collect();
        if fields.len() != 5 {
            continue;
        }
        records.push(SubmissionRecord {
            tx_id: fields[0].to_string(),
            client_id: fields[1].parse().unwrap_or(0),
            validator_id: fields[2].parse().unwrap_or(0),
            submit_ts_ms: fields[3].parse().unwrap_or(0),
            status: fields[4].to_string(),
        });
    }
    records
}

/// One row of the poll log: when client-side polling first saw the
/// transaction confirmed (resolution = one poll interval).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PollRecord {
    pub tx_id: String,
    pub confirm_ts_ms: Option<Ms>,
    pub status: String,
}

pub fn parse_polls_csv(text: &str) -> Vec<PollRecord> {
    let mut records = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.splitn(3, ',').collect();
        if fields.len() != 3 {
            continue;
        }
        records.push(PollRecord {
            tx_id: fields[0].to_string(),
            confirm_ts_ms: fields[1].parse().ok(),
            status: fields[2].to_string(),
        });
    }
    records
}

/// The fixed counterparty of a client: the next client cyclically, mapped
/// into the shared id namespace (`((c - n) mod m) + n + 1`). A lone client
/// transfers to itself.
pub fn counterparty_client(client: InstanceId, n_validators: u32, n_clients: u32) -> InstanceId {
    let index = client.get() - n_validators; // 1-based client index
    let next = (index % n_clients) + n_validators + 1;
    InstanceId::new(next).expect("client ids are positive")
}

/// Deterministic submission schedule: tick k fires at `k / rate` seconds
/// after load start, for every tick strictly inside the issue window.
pub fn tick_offsets_ms(rate_per_client: f64, issue_duration_s: f64) -> Vec<Ms> {
    if rate_per_client <= 0.0 || issue_duration_s <= 0.0 {
        return Vec::new();
    }
    let interval_ms = 1000.0 / rate_per_client;
    let window_ms = issue_duration_s * 1000.0;
    let mut offsets = Vec::new();
    let mut k = 0u64;
    loop {
        let at = k as f64 * interval_ms;
        if at >= window_ms {
            break;
        }
        offsets.push(at.round() as Ms);
        k += 1;
    }
    offsets
}

/// Everything one client needs to run its load.
pub struct LoadContext {
    pub client: InstanceId,
    pub validator: InstanceId,
    pub credential: Credential,
    pub counterparty_account: String,
    pub rate_per_client: f64,
    pub issue_duration_s: f64,
    pub transfer_amount: u64,
    pub clock: EpochClock,
    pub out_dir: PathBuf,
}

/// Outcome counters of one client's issue window.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LoadSummary {
    pub submitted: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub failed: u64,
    pub max_lateness_ms: Ms,
}

/// Runs the open-loop load against an established wallet connection,
/// streaming the submission log to disk as it goes.
///
/// Submission failures are logged per transaction and the generator keeps
/// pacing; ticks are never skipped, only late. Newly submitted ids are pushed
/// to `poll_feed` when polling is active.
pub async fn start_load(
    ctx: &LoadContext,
    wallet: &mut WalletClient,
    poll_feed: Option<&tokio::sync::mpsc::UnboundedSender<(String, Ms)>>,
) -> Result<LoadSummary, WorkloadError> {
    let path = ctx.out_dir.join(crate::adapter::SUBMISSIONS_FILE);
    let mut log = std::fs::File::create(&path).map_err(|e| WorkloadError::Io(path.clone(), e))?;
    writeln!(log, "{SUBMISSIONS_CSV_HEADER}").map_err(|e| WorkloadError::Io(path.clone(), e))?;

    let offsets = tick_offsets_ms(ctx.rate_per_client, ctx.issue_duration_s);
    let mut summary = LoadSummary::default();
    let load_start = ctx.clock.now_ms();
    for (k, offset) in offsets.iter().enumerate() {
        tokio::time::sleep_until(ctx.clock.instant_at(load_start + offset)).await;
        let nonce = (k + 1) as u64;
        let submit_ts = ctx.clock.now_ms();
        summary.max_lateness_ms = summary.max_lateness_ms.max(submit_ts - (load_start + offset));
        let tx = build_transfer(ctx, nonce, submit_ts);
        let tx_id = tx.tx_id.clone();
        summary.submitted += 1;
        let status = match wallet.submit(&tx).await {
            Ok(receipt) if receipt.accepted => {
                summary.accepted += 1;
                if let Some(feed) = poll_feed {
                    let _ = feed.send((tx_id.clone(), submit_ts));
                }
                "ok".to_string()
            }
            Ok(receipt) => {
                summary.rejected += 1;
                match receipt.reject_reason {
                    Some(reason) => format!("rejected:{reason}"),
                    None => "rejected:unknown".to_string(),
                }
            }
            Err(e) => {
                summary.failed += 1;
                log::warn!("client {}: submit {tx_id} failed: {e}", ctx.client);
                format!("failed:{}", compact(&e.to_string()))
            }
        };
        let record = SubmissionRecord {
            tx_id,
            client_id: ctx.client.get(),
            validator_id: ctx.validator.get(),
            submit_ts_ms: submit_ts,
            status,
        };
        writeln!(log, "{}", submission_csv_row(&record))
            .map_err(|e| WorkloadError::Io(path.clone(), e))?;
    }
    log.flush().map_err(|e| WorkloadError::Io(path.clone(), e))?;
    Ok(summary)
}

fn compact(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

/// Blocks for the configured drain window after issuing ends, giving
/// in-flight transactions time to settle before the scenario's stop fires.
pub async fn drain_wait(drain_duration_s: f64) {
    if drain_duration_s > 0.0 {
        tokio::time::sleep(Duration::from_secs_f64(drain_duration_s)).await;
    }
}

fn build_transfer(ctx: &LoadContext, nonce: u64, submit_ts: Ms) -> Transaction {
    let sender = ctx.credential.account.clone();
    let receiver = ctx.counterparty_account.clone();
    let amount = ctx.transfer_amount;
    let auth_tag = ctx.credential.tag(&sender, &receiver, amount, nonce);
    Transaction {
        tx_id: format!("t{}-{}", ctx.client.get(), nonce),
        sender,
        receiver,
        amount,
        nonce,
        auth_tag,
        submit_ts,
    }
}

/// Client-side confirmation poller: queries the wallet for every outstanding
/// transaction once per interval and records the first poll at which each
/// reports confirmed. Runs until stopped, then flushes unresolved ids as
/// unconfirmed.
pub async fn poll_loop(
    mut wallet: WalletClient,
    clock: EpochClock,
    interval_ms: u64,
    out_path: PathBuf,
    mut feed: tokio::sync::mpsc::UnboundedReceiver<(String, Ms)>,
    mut stop: tokio::sync::watch::Receiver<bool>,
) {
    let mut pending: VecDeque<(String, Ms)> = VecDeque::new();
    let mut resolved: Vec<PollRecord> = Vec::new();
    let mut ticker = tokio::time::interval(Duration::from_millis(interval_ms.max(10)));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    'outer: loop {
        tokio::select! {
            _ = ticker.tick() => {}
            _ = stop.changed() => {
                if *stop.borrow() {
                    break 'outer;
                }
                continue;
            }
        }
        while let Ok(pair) = feed.try_recv() {
            pending.push_back(pair);
        }
        let mut still_pending = VecDeque::with_capacity(pending.len());
        while let Some((tx_id, submit_ts)) = pending.pop_front() {
            if *stop.borrow() {
                pending.push_front((tx_id, submit_ts));
                break 'outer;
            }
            match wallet.status(&tx_id).await {
                Ok(WalletStatus::Confirmed { .. }) => {
                    resolved.push(PollRecord {
                        tx_id,
                        confirm_ts_ms: Some(clock.now_ms()),
                        status: "confirmed".to_string(),
                    });
                }
                Ok(WalletStatus::Rejected(reason)) => {
                    resolved.push(PollRecord {
                        tx_id,
                        confirm_ts_ms: None,
                        status: format!("rejected:{reason}"),
                    });
                }
                Ok(_) => still_pending.push_back((tx_id, submit_ts)),
                Err(e) => {
                    log::warn!("poll of {tx_id} failed: {e}");
                    still_pending.push_back((tx_id, submit_ts));
                }
            }
        }
        pending = still_pending;
        write_poll_log(&out_path, &resolved, &pending);
    }
    while let Ok(pair) = feed.try_recv() {
        pending.push_back(pair);
    }
    write_poll_log(&out_path, &resolved, &pending);
}

fn write_poll_log(path: &Path, resolved: &[PollRecord], pending: &VecDeque<(String, Ms)>) {
    let mut out = String::from(POLLS_CSV_HEADER);
    out.push('\n');
    for r in resolved {
        let confirm = r.confirm_ts_ms.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.tx_id, confirm, r.status);
    }
    for (tx_id, _) in pending {
        let _ = writeln!(out, "{tx_id},,unconfirmed");
    }
    if let Err(e) = std::fs::write(path, out) {
        log::warn!("cannot write poll log: {e}");
    }
}
