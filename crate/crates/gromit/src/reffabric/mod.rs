//! The built-in reference transaction fabric: a leader-rotating, round-based
//! replicated ledger with a wallet API.
//!
//! Performance is analytically predictable, which is what makes it useful as
//! a measurement-pipeline oracle:
//!
//! - Latency law: below capacity and with zero link delay, an accepted
//!   transaction confirms at the next round boundary after it reaches the
//!   leader, so end-to-end latency lies in (0, R + g] for gossip bound g.
//! - Capacity law: sustained confirmed throughput never exceeds B/R; offered
//!   load above it grows the pool until the bound drops the excess.

mod adapter;
pub mod ledger;
mod node;
mod state;
mod types;
pub mod wallet;

pub use adapter::{
    parse_ledger_artifacts, ClientCredentialRecord, EndpointRecord, RefFabricAdapter,
    ACCOUNTS_TOPIC, ENDPOINTS_TOPIC,
};
pub use node::{FabricNode, NodeConfig, NodeEndpointHandle, NodeError};
pub use state::{ApplyError, ApplyOutcome, GossipAction, SubmitOutcome, ValidatorState};
pub use types::{Block, FabricParams, RejectReason, WalletStatus, POOL_CAPACITY_BLOCKS, ZERO_DIGEST};
