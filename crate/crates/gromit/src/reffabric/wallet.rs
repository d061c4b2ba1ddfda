//! The wallet API clients submit transactions through: a line-delimited
//! request/response protocol over a local TCP socket.
//!
//! ```text
//! SUBMIT <transaction json>   ->  OK <tx_id>
//!                                 REJECTED <tx_id> <reason>
//! STATUS <tx_id>              ->  PENDING
//!                                 CONFIRMED <height> <timestamp_ms>
//!                                 UNKNOWN
//!                                 REJECTED <reason>
//! ```

use std::net::SocketAddr;

use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, BufWriter};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use crate::model::{Ms, Transaction};
use crate::telemetry::NetCounters;

use super::types::{RejectReason, WalletStatus};

#[derive(Debug, Error)]
pub enum WalletError {
    #[error("wallet connection failed: {0}")]
    Connect(std::io::Error),
    #[error("submit failed: {0}")]
    SubmitFailed(String),
    #[error("malformed wallet response `{0}`")]
    BadResponse(String),
    #[error("wallet connection closed")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WalletRequest {
    Submit(Transaction),
    Status(String),
}

pub fn parse_request(line: &str) -> Option<WalletRequest> {
    let line = line.trim_end();
    if let Some(json) = line.strip_prefix("SUBMIT ") {
        let tx: Transaction = serde_json::from_str(json).ok()?;
        return Some(WalletRequest::Submit(tx));
    }
    if let Some(tx_id) = line.strip_prefix("STATUS ") {
        return Some(WalletRequest::Status(tx_id.trim().to_string()));
    }
    None
}

pub fn encode_submit(tx: &Transaction) -> String {
    format!(
        "SUBMIT {}\n",
        serde_json::to_string(tx).expect("transaction serializes")
    )
}

pub fn encode_status_request(tx_id: &str) -> String {
    format!("STATUS {tx_id}\n")
}

pub fn encode_submit_ok(tx_id: &str) -> String {
    format!("OK {tx_id}\n")
}

pub fn encode_submit_rejected(tx_id: &str, reason: RejectReason) -> String {
    format!("REJECTED {tx_id} {reason}\n")
}

pub fn encode_status(status: &WalletStatus) -> String {
    match status {
        WalletStatus::Pending => "PENDING\n".to_string(),
        WalletStatus::Confirmed { height, timestamp } => {
            format!("CONFIRMED {height} {timestamp}\n")
        }
        WalletStatus::Unknown => "UNKNOWN\n".to_string(),
        WalletStatus::Rejected(reason) => format!("REJECTED {reason}\n"),
    }
}

/// Result of one submission as seen by the submitting client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmitReceipt {
    pub tx_id: String,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
}

fn parse_submit_response(line: &str) -> Result<SubmitReceipt, WalletError> {
    let mut parts = line.trim_end().split_whitespace();
    match parts.next() {
        Some("OK") => Ok(SubmitReceipt {
            tx_id: parts.next().unwrap_or("").to_string(),
            accepted: true,
            reject_reason: None,
        }),
        Some("REJECTED") => {
            let tx_id = parts.next().unwrap_or("").to_string();
            let reason = parts
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| WalletError::BadResponse(line.to_string()))?;
            Ok(SubmitReceipt {
                tx_id,
                accepted: false,
                reject_reason: Some(reason),
            })
        }
        _ => Err(WalletError::BadResponse(line.to_string())),
    }
}

fn parse_status_response(line: &str) -> Result<WalletStatus, WalletError> {
    let line = line.trim_end();
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some("PENDING") => Ok(WalletStatus::Pending),
        Some("UNKNOWN") => Ok(WalletStatus::Unknown),
        Some("CONFIRMED") => {
            let height: u64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| WalletError::BadResponse(line.to_string()))?;
            let timestamp: Ms = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| WalletError::BadResponse(line.to_string()))?;
            Ok(WalletStatus::Confirmed { height, timestamp })
        }
        Some("REJECTED") => {
            let reason = parts
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| WalletError::BadResponse(line.to_string()))?;
            Ok(WalletStatus::Rejected(reason))
        }
        _ => Err(WalletError::BadResponse(line.to_string())),
    }
}

/// Client side of the wallet API. One request in flight at a time.
pub struct WalletClient {
    reader: BufReader<OwnedReadHalf>,
    writer: BufWriter<OwnedWriteHalf>,
    counters: NetCounters,
}

impl WalletClient {
    pub async fn connect(addr: SocketAddr, counters: NetCounters) -> Result<Self, WalletError> {
        let stream = TcpStream::connect(addr).await.map_err(WalletError::Connect)?;
        let _ = stream.set_nodelay(true);
        let (read_half, write_half) = stream.into_split();
        Ok(WalletClient {
            reader: BufReader::new(read_half),
            writer: BufWriter::new(write_half),
            counters,
        })
    }

    async fn roundtrip(&mut self, request: String) -> Result<String, WalletError> {
        self.writer
            .write_all(request.as_bytes())
            .await
            .map_err(|e| WalletError::SubmitFailed(e.to_string()))?;
        self.writer
            .flush()
            .await
            .map_err(|e| WalletError::SubmitFailed(e.to_string()))?;
        self.counters.add_out(request.len() as u64);
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .await
            .map_err(|e| WalletError::SubmitFailed(e.to_string()))?;
        if n == 0 {
            return Err(WalletError::Closed);
        }
        self.counters.add_in(n as u64);
        Ok(line)
    }

    pub async fn submit(&mut self, tx: &Transaction) -> Result<SubmitReceipt, WalletError> {
        let line = self.roundtrip(encode_submit(tx)).await?;
        parse_submit_response(&line)
    }

    pub async fn status(&mut self, tx_id: &str) -> Result<WalletStatus, WalletError> {
        let line = self.roundtrip(encode_status_request(tx_id)).await?;
        parse_status_response(&line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx() -> Transaction {
        Transaction {
            tx_id: "t5-1".into(),
            sender: "acct-5".into(),
            receiver: "acct-6".into(),
            amount: 1,
            nonce: 1,
            auth_tag: "aa".into(),
            submit_ts: 42,
        }
    }

    #[test]
    fn request_lines_roundtrip() {
        let submit = encode_submit(&tx());
        assert!(submit.starts_with("SUBMIT {"));
        match parse_request(&submit) {
            Some(WalletRequest::Submit(parsed)) => assert_eq!(parsed, tx()),
            other => panic!("unexpected {other:?}"),
        }
        match parse_request("STATUS t5-1\n") {
            Some(WalletRequest::Status(id)) => assert_eq!(id, "t5-1"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_request("NOPE x").is_none());
    }

    #[test]
    fn response_lines_roundtrip() {
        let ok = parse_submit_response(&encode_submit_ok("t5-1")).unwrap();
        assert!(ok.accepted);
        let rejected =
            parse_submit_response(&encode_submit_rejected("t5-1", RejectReason::BadNonce)).unwrap();
        assert_eq!(rejected.reject_reason, Some(RejectReason::BadNonce));

        for status in [
            WalletStatus::Pending,
            WalletStatus::Unknown,
            WalletStatus::Confirmed { height: 4, timestamp: 2000 },
            WalletStatus::Rejected(RejectReason::InsufficientFunds),
        ] {
            assert_eq!(parse_status_response(&encode_status(&status)).unwrap(), status);
        }
        assert!(parse_status_response("CONFIRMED x\n").is_err());
    }
}
