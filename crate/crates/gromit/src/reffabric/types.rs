//! Core data types of the reference fabric.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Ms, Transaction};
use crate::netshape::LinkDelays;

/// Tuning knobs of the reference fabric.
///
/// The fabric settles transactions in fixed rounds of `round_duration_ms`
/// (R); each round the leader drains at most `block_capacity` (B) pooled
/// transactions into one block, so sustained confirmed throughput is bounded
/// by B/R and, below that bound, every accepted transaction confirms at the
/// next round boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabricParams {
    pub round_duration_ms: u64,
    pub block_capacity: usize,
    /// Optional one-way delays per validator pair, injected in-process.
    pub link_delay_matrix: Option<LinkDelays>,
}

impl Default for FabricParams {
    fn default() -> Self {
        FabricParams {
            round_duration_ms: 1000,
            block_capacity: 100,
            link_delay_matrix: None,
        }
    }
}

/// Transaction pools hold at most this many blocks' worth of transactions;
/// arrivals beyond that are dropped (and stay unconfirmed), which is what
/// makes saturation observable instead of being absorbed by the drain window.
pub const POOL_CAPACITY_BLOCKS: usize = 4;

impl FabricParams {
    pub fn pool_capacity(&self) -> usize {
        POOL_CAPACITY_BLOCKS * self.block_capacity
    }

    /// Analytic sustained-throughput bound B/R in tx/s.
    pub fn capacity_tx_per_s(&self) -> f64 {
        self.block_capacity as f64 * 1000.0 / self.round_duration_ms as f64
    }
}

/// A timestamped, hash-chained batch of transactions.
///
/// The canonical serialization (and the ledger file line format) is the JSON
/// object with fields in declaration order: height, prev_hash, timestamp,
/// proposer, txs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    /// Hex digest of the previous block's canonical serialization; the
    /// genesis block carries the zero digest.
    pub prev_hash: String,
    pub timestamp: Ms,
    /// Proposing validator; 0 for the genesis block.
    pub proposer: u32,
    pub txs: Vec<Transaction>,
}

pub const ZERO_DIGEST: &str = "0000000000000000000000000000000000000000000000000000000000000000";

impl Block {
    pub fn genesis() -> Block {
        Block {
            height: 0,
            prev_hash: ZERO_DIGEST.to_string(),
            timestamp: 0,
            proposer: 0,
            txs: Vec::new(),
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("block serialization cannot fail")
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Why the wallet refused a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    BadAuth,
    BadNonce,
    InsufficientFunds,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::BadAuth => write!(f, "bad_auth"),
            RejectReason::BadNonce => write!(f, "bad_nonce"),
            RejectReason::InsufficientFunds => write!(f, "insufficient_funds"),
        }
    }
}

impl std::str::FromStr for RejectReason {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bad_auth" => Ok(RejectReason::BadAuth),
            "bad_nonce" => Ok(RejectReason::BadNonce),
            "insufficient_funds" => Ok(RejectReason::InsufficientFunds),
            _ => Err(()),
        }
    }
}

/// Wallet view of one transaction's settlement state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalletStatus {
    Pending,
    Confirmed { height: u64, timestamp: Ms },
    Unknown,
    Rejected(RejectReason),
}
