//! [`SystemAdapter`] implementation for the reference fabric.
//!
//! The validator node runs in-process inside the instance agent; endpoints
//! and pre-funded account credentials are shared through the broker so
//! clients can find their validator and sign transfers.

use std::collections::HashMap;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterContext, AdapterError, ArtifactBundle, SystemAdapter};
use crate::model::{Credential, InstanceId, Role, TxOutcome};

use super::ledger;
use super::node::{FabricNode, NodeConfig};

/// Broker topic validators publish their socket addresses on.
pub const ENDPOINTS_TOPIC: &str = "fabric/endpoints";
/// Broker topic the pre-funded account credentials are shared on.
pub const ACCOUNTS_TOPIC: &str = "accounts";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointRecord {
    pub id: u32,
    pub wallet: String,
    pub peer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientCredentialRecord {
    pub client: u32,
    pub credential: Credential,
}

pub struct RefFabricAdapter {
    ctx: Option<Arc<AdapterContext>>,
    node: Option<FabricNode>,
    feeder: Option<tokio::task::JoinHandle<()>>,
}

impl RefFabricAdapter {
    pub fn new() -> Self {
        RefFabricAdapter {
            ctx: None,
            node: None,
            feeder: None,
        }
    }

    fn ctx(&self) -> Result<&Arc<AdapterContext>, AdapterError> {
        self.ctx.as_ref().ok_or(AdapterError::NotInitialized)
    }
}

impl Default for RefFabricAdapter {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl SystemAdapter for RefFabricAdapter {
    async fn init_configuration(&mut self, ctx: Arc<AdapterContext>) -> Result<(), AdapterError> {
        // The lowest-numbered validator shares everyone's credentials; the
        // retained topic makes them available to clients joining later.
        if ctx.role == Role::Validator && ctx.self_id.get() == 1 {
            let records: Vec<ClientCredentialRecord> = ctx
                .genesis
                .credentials
                .iter()
                .map(|(client, credential)| ClientCredentialRecord {
                    client: *client,
                    credential: credential.clone(),
                })
                .collect();
            let payload = serde_json::to_vec(&records).expect("credentials serialize");
            ctx.broker
                .publish(ACCOUNTS_TOPIC, payload)
                .await
                .map_err(|e| AdapterError::Fabric(format!("credential publish failed: {e}")))?;
        }
        self.ctx = Some(ctx);
        Ok(())
    }

    async fn start_validator(&mut self, id: InstanceId) -> Result<(), AdapterError> {
        let ctx = self.ctx()?.clone();
        if ctx.self_id != id {
            return Err(AdapterError::Fabric(format!(
                "instance {} cannot start validator {id}",
                ctx.self_id
            )));
        }
        if self.node.is_some() {
            return Ok(());
        }

        // Wallet-side delays for client links, when enabled: the delay
        // between the client's city and this validator's city.
        let mut client_submit_delay_ms = HashMap::new();
        if ctx.config.delay_clients {
            if let Some(matrix) = &ctx.latency_matrix {
                let cities = matrix.n_cities();
                let self_city = (ctx.self_id.get() as usize - 1) % cities;
                for (client, cred) in &ctx.genesis.credentials {
                    let client_city = (*client as usize - 1) % cities;
                    let delay = (matrix.rtt(client_city, self_city) / 2.0).round() as u64;
                    client_submit_delay_ms.insert(cred.account.clone(), delay);
                }
            }
        }

        let node = FabricNode::start(NodeConfig {
            self_id: ctx.self_id,
            n_validators: ctx.config.n_validators,
            params: ctx.config.fabric_params.clone(),
            genesis: ctx.genesis.clone(),
            neighbors: ctx.topology.neighbors(ctx.self_id),
            link_delays: ctx.link_delays.clone(),
            client_submit_delay_ms,
            clock: ctx.clock,
            counters: ctx.net_counters.clone(),
            export_dir: ctx.instance_dir.clone(),
            production_cutoff_ms: ctx.stop_offset_ms,
            bind_host: ctx.bind_host.clone(),
        })
        .await
        .map_err(|e| AdapterError::Fabric(e.to_string()))?;

        let record = EndpointRecord {
            id: ctx.self_id.get(),
            wallet: node.wallet_addr().to_string(),
            peer: node.peer_addr().to_string(),
        };
        ctx.broker
            .publish(
                ENDPOINTS_TOPIC,
                serde_json::to_vec(&record).expect("record serializes"),
            )
            .await
            .map_err(|e| AdapterError::Fabric(format!("endpoint publish failed: {e}")))?;

        // Feed peer endpoints into the node as other validators come up.
        let mut endpoints = ctx.broker.subscribe(ENDPOINTS_TOPIC);
        let peers = node.endpoint_handle();
        self.feeder = Some(tokio::spawn(async move {
            while let Some(frame) = endpoints.recv().await {
                if let Ok(record) = serde_json::from_slice::<EndpointRecord>(&frame.payload) {
                    if let Ok(addr) = record.peer.parse() {
                        peers.set_peer_endpoint(record.id, addr);
                    }
                }
            }
        }));

        self.node = Some(node);
        Ok(())
    }

    async fn stop_validator(&mut self, _id: InstanceId) -> Result<(), AdapterError> {
        if let Some(node) = self.node.as_mut() {
            node.stop()
                .await
                .map_err(|e| AdapterError::Fabric(e.to_string()))?;
        }
        if let Some(feeder) = self.feeder.take() {
            feeder.abort();
        }
        Ok(())
    }

    fn parse_ledger(&self, artifacts: &ArtifactBundle) -> Result<Vec<TxOutcome>, AdapterError> {
        parse_ledger_artifacts(artifacts)
    }
}

/// Shared ledger-parsing path: reads every collected validator chain, keeps
/// the longest, and emits one confirmed outcome per ledger transaction.
pub fn parse_ledger_artifacts(artifacts: &ArtifactBundle) -> Result<Vec<TxOutcome>, AdapterError> {
    let mut best: Vec<super::types::Block> = Vec::new();
    for path in crate::adapter::ledger_paths(artifacts) {
        let chain = ledger::read_chain(&path)
            .map_err(|e| AdapterError::LedgerParse(path.clone(), e.to_string()))?;
        if chain.len() > best.len() {
            best = chain;
        }
    }
    Ok(ledger::outcomes_from_chain(&best))
}
