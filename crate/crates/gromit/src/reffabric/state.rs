//! The replicated-ledger state machine of one validator: account balances,
//! the transaction pool, and the hash chain. Pure logic, no IO; the node
//! layer drives it from network and round-clock tasks.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use crate::model::{Credential, GenesisFile, Ms, Transaction};

use super::types::{Block, FabricParams, RejectReason, WalletStatus};

/// What to do with a gossiped transaction after local processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GossipAction {
    /// Newly pooled: forward once to all neighbors except the origin.
    Forward,
    /// Duplicate, invalid, or dropped: do not propagate further.
    Ignore,
}

#[derive(Debug, PartialEq)]
pub enum ApplyOutcome {
    Applied,
    /// Height at or below our head: duplicate delivery, ignore.
    AlreadyHave,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ApplyError {
    /// The block skips ahead of our chain; resync needed.
    #[error("block height {got} but local head is {local_head}")]
    HeightGap { local_head: u64, got: u64 },
    /// prev_hash mismatch at the expected next height.
    #[error("fork detected: expected prev {expected_prev}, block carries {got_prev}")]
    ForkDetected { expected_prev: String, got_prev: String },
    #[error("block timestamp {got} does not advance past head timestamp {head}")]
    NonMonotonicTimestamp { head: Ms, got: Ms },
    #[error("invalid transaction {tx_id} in block: {reason}")]
    InvalidTx { tx_id: String, reason: String },
}

/// Outcome of a wallet submission that was not rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubmitOutcome {
    /// False when the pool was full and the transaction was discarded; the
    /// wallet still acknowledges receipt, the transaction just never settles.
    pub pooled: bool,
}

pub struct ValidatorState {
    self_id: u32,
    n_validators: u32,
    params: FabricParams,
    balances: BTreeMap<String, u64>,
    /// Sum of pooled outgoing amounts per sender; projected balance
    /// = committed balance - pending outgoing.
    pending_out: HashMap<String, u64>,
    committed_nonce: HashMap<String, u64>,
    /// Highest nonce ever admitted to the pool per sender.
    pool_nonce_high: HashMap<String, u64>,
    chain: Vec<Block>,
    head_digest: String,
    pool: VecDeque<Transaction>,
    pool_ids: HashSet<String>,
    /// Every transaction id ever seen, including dropped ones; the gossip
    /// dedup set.
    seen: HashSet<String>,
    confirmed: HashMap<String, (u64, Ms)>,
    rejected: HashMap<String, RejectReason>,
    credentials: HashMap<String, Credential>,
    /// Transactions discarded because the pool was at capacity.
    pub dropped_overflow: u64,
    /// Gossiped transactions that failed validation.
    pub invalid_gossip: u64,
}

impl ValidatorState {
    pub fn new(self_id: u32, n_validators: u32, params: FabricParams, genesis: &GenesisFile) -> Self {
        let genesis_block = Block::genesis();
        let head_digest = genesis_block.digest();
        ValidatorState {
            self_id,
            n_validators,
            params,
            balances: genesis.balances.clone(),
            pending_out: HashMap::new(),
            committed_nonce: HashMap::new(),
            pool_nonce_high: HashMap::new(),
            chain: vec![genesis_block],
            head_digest,
            pool: VecDeque::new(),
            pool_ids: HashSet::new(),
            seen: HashSet::new(),
            confirmed: HashMap::new(),
            rejected: HashMap::new(),
            credentials: genesis
                .credentials
                .values()
                .map(|c| (c.account.clone(), c.clone()))
                .collect(),
            dropped_overflow: 0,
            invalid_gossip: 0,
        }
    }

    pub fn params(&self) -> &FabricParams {
        &self.params
    }

    pub fn height(&self) -> u64 {
        (self.chain.len() - 1) as u64
    }

    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn balances(&self) -> &BTreeMap<String, u64> {
        &self.balances
    }

    /// Round index covering `now` and the leader owning it. Round `r` spans
    /// `[r*R, (r+1)*R)` from the epoch; its leader is `(r mod n) + 1`.
    pub fn leader_of(&self, round: i64) -> u32 {
        (round.rem_euclid(self.n_validators as i64)) as u32 + 1
    }

    pub fn round_at(&self, now: Ms) -> i64 {
        now.div_euclid(self.params.round_duration_ms as i64)
    }

    fn validate(&self, tx: &Transaction) -> Result<(), RejectReason> {
        let Some(cred) = self.credentials.get(&tx.sender) else {
            return Err(RejectReason::BadAuth);
        };
        if tx.amount == 0 || !cred.verify(tx) {
            return Err(RejectReason::BadAuth);
        }
        let floor = self
            .committed_nonce
            .get(&tx.sender)
            .copied()
            .max(self.pool_nonce_high.get(&tx.sender).copied())
            .unwrap_or(0);
        if tx.nonce <= floor {
            return Err(RejectReason::BadNonce);
        }
        let committed = self.balances.get(&tx.sender).copied().unwrap_or(0);
        let reserved = self.pending_out.get(&tx.sender).copied().unwrap_or(0);
        if committed.saturating_sub(reserved) < tx.amount {
            return Err(RejectReason::InsufficientFunds);
        }
        Ok(())
    }

    fn admit(&mut self, tx: Transaction) -> bool {
        self.seen.insert(tx.tx_id.clone());
        if self.pool.len() >= self.params.pool_capacity() {
            self.dropped_overflow += 1;
            return false;
        }
        *self.pending_out.entry(tx.sender.clone()).or_insert(0) += tx.amount;
        let high = self.pool_nonce_high.entry(tx.sender.clone()).or_insert(0);
        *high = (*high).max(tx.nonce);
        self.pool_ids.insert(tx.tx_id.clone());
        self.pool.push_back(tx);
        true
    }

    /// Processes a wallet submission: verify, then queue and gossip.
    ///
    /// Rejections are recorded so a later status query reports the reason.
    pub fn wallet_submit(&mut self, tx: Transaction) -> Result<SubmitOutcome, RejectReason> {
        if self.confirmed.contains_key(&tx.tx_id) || self.pool_ids.contains(&tx.tx_id) {
            // Idempotent resubmission of a known transaction.
            return Ok(SubmitOutcome { pooled: false });
        }
        if let Err(reason) = self.validate(&tx) {
            self.rejected.insert(tx.tx_id.clone(), reason);
            return Err(reason);
        }
        let pooled = self.admit(tx);
        Ok(SubmitOutcome { pooled })
    }

    /// Processes a transaction received via gossip. Invalid transactions are
    /// dropped and counted, never propagated.
    pub fn accept_gossip(&mut self, tx: Transaction) -> GossipAction {
        if self.seen.contains(&tx.tx_id)
            || self.confirmed.contains_key(&tx.tx_id)
            || self.pool_ids.contains(&tx.tx_id)
        {
            return GossipAction::Ignore;
        }
        if self.validate(&tx).is_err() {
            self.invalid_gossip += 1;
            self.seen.insert(tx.tx_id);
            return GossipAction::Ignore;
        }
        if self.admit(tx) {
            GossipAction::Forward
        } else {
            GossipAction::Ignore
        }
    }

    /// Leader path: drains up to `block_capacity` pooled transactions in FIFO
    /// order into a block stamped with the current wall clock, and commits it.
    ///
    /// An empty pool still produces an (empty) block so ledger timestamps
    /// keep advancing every round.
    pub fn drain_block(&mut self, now: Ms) -> Block {
        let mut txs = Vec::new();
        while txs.len() < self.params.block_capacity {
            let Some(tx) = self.pool.pop_front() else { break };
            self.pool_ids.remove(&tx.tx_id);
            self.release_reservation(&tx);
            txs.push(tx);
        }
        let head = self.chain.last().expect("chain never empty");
        let block = Block {
            height: head.height + 1,
            prev_hash: self.head_digest.clone(),
            timestamp: now.max(head.timestamp + 1),
            proposer: self.self_id,
            txs,
        };
        self.commit(&block);
        block
    }

    fn release_reservation(&mut self, tx: &Transaction) {
        if let Some(reserved) = self.pending_out.get_mut(&tx.sender) {
            *reserved = reserved.saturating_sub(tx.amount);
            if *reserved == 0 {
                self.pending_out.remove(&tx.sender);
            }
        }
    }

    /// Validates and appends a block received from the proposer.
    pub fn apply_block(&mut self, block: Block) -> Result<ApplyOutcome, ApplyError> {
        let head = self.chain.last().expect("chain never empty");
        if block.height <= head.height {
            return Ok(ApplyOutcome::AlreadyHave);
        }
        if block.height > head.height + 1 {
            return Err(ApplyError::HeightGap {
                local_head: head.height,
                got: block.height,
            });
        }
        if block.prev_hash != self.head_digest {
            return Err(ApplyError::ForkDetected {
                expected_prev: self.head_digest.clone(),
                got_prev: block.prev_hash.clone(),
            });
        }
        if block.timestamp <= head.timestamp {
            return Err(ApplyError::NonMonotonicTimestamp {
                head: head.timestamp,
                got: block.timestamp,
            });
        }
        self.check_block_txs(&block)?;
        // Remove committed transactions from our own pool.
        let ids: HashSet<&String> = block.txs.iter().map(|t| &t.tx_id).collect();
        if !ids.is_empty() && !self.pool.is_empty() {
            let mut kept = VecDeque::with_capacity(self.pool.len());
            for tx in std::mem::take(&mut self.pool) {
                if ids.contains(&tx.tx_id) {
                    self.pool_ids.remove(&tx.tx_id);
                    self.release_reservation(&tx);
                } else {
                    kept.push_back(tx);
                }
            }
            self.pool = kept;
        }
        self.commit(&block);
        Ok(ApplyOutcome::Applied)
    }

    /// Signature, nonce, and balance checks over the whole batch with running
    /// balances, without mutating state.
    fn check_block_txs(&self, block: &Block) -> Result<(), ApplyError> {
        let mut balances: HashMap<&str, u64> = HashMap::new();
        let mut nonces: HashMap<&str, u64> = HashMap::new();
        for tx in &block.txs {
            let invalid = |reason: String| ApplyError::InvalidTx {
                tx_id: tx.tx_id.clone(),
                reason,
            };
            let cred = self
                .credentials
                .get(&tx.sender)
                .ok_or_else(|| invalid("unknown sender".into()))?;
            if tx.amount == 0 || !cred.verify(tx) {
                return Err(invalid("bad auth tag".into()));
            }
            let nonce_floor = nonces
                .get(tx.sender.as_str())
                .copied()
                .unwrap_or_else(|| self.committed_nonce.get(&tx.sender).copied().unwrap_or(0));
            if tx.nonce <= nonce_floor {
                return Err(invalid(format!(
                    "nonce {} does not advance past {nonce_floor}",
                    tx.nonce
                )));
            }
            nonces.insert(&tx.sender, tx.nonce);
            let sender_balance = balances
                .get(tx.sender.as_str())
                .copied()
                .unwrap_or_else(|| self.balances.get(&tx.sender).copied().unwrap_or(0));
            if sender_balance < tx.amount {
                return Err(invalid("insufficient funds".into()));
            }
            balances.insert(&tx.sender, sender_balance - tx.amount);
            let receiver_balance = balances
                .get(tx.receiver.as_str())
                .copied()
                .unwrap_or_else(|| self.balances.get(&tx.receiver).copied().unwrap_or(0));
            balances.insert(&tx.receiver, receiver_balance + tx.amount);
        }
        Ok(())
    }

    /// Moves balances, advances nonces, indexes confirmations, extends the
    /// chain. The block is assumed validated.
    fn commit(&mut self, block: &Block) {
        for tx in &block.txs {
            let sender_balance = self.balances.entry(tx.sender.clone()).or_insert(0);
            *sender_balance = sender_balance
                .checked_sub(tx.amount)
                .expect("validated block cannot overdraw");
            *self.balances.entry(tx.receiver.clone()).or_insert(0) += tx.amount;
            let nonce = self.committed_nonce.entry(tx.sender.clone()).or_insert(0);
            *nonce = (*nonce).max(tx.nonce);
            self.confirmed
                .insert(tx.tx_id.clone(), (block.height, block.timestamp));
            self.seen.insert(tx.tx_id.clone());
        }
        self.head_digest = block.digest();
        self.chain.push(block.clone());
    }

    /// Chain suffix starting at `from_height`, for resync responses.
    pub fn blocks_from(&self, from_height: u64) -> Vec<Block> {
        self.chain
            .iter()
            .filter(|b| b.height >= from_height)
            .cloned()
            .collect()
    }

    /// Applies a resync response: every block that extends the local chain.
    pub fn apply_resync(&mut self, blocks: Vec<Block>) -> usize {
        let mut applied = 0;
        for block in blocks {
            match self.apply_block(block) {
                Ok(ApplyOutcome::Applied) => applied += 1,
                Ok(ApplyOutcome::AlreadyHave) => {}
                Err(e) => {
                    log::warn!("validator {}: resync block rejected: {e}", self.self_id);
                    break;
                }
            }
        }
        applied
    }

    pub fn status(&self, tx_id: &str) -> WalletStatus {
        if let Some(&(height, timestamp)) = self.confirmed.get(tx_id) {
            return WalletStatus::Confirmed { height, timestamp };
        }
        if self.pool_ids.contains(tx_id) {
            return WalletStatus::Pending;
        }
        if let Some(&reason) = self.rejected.get(tx_id) {
            return WalletStatus::Rejected(reason);
        }
        WalletStatus::Unknown
    }

    pub fn total_balance(&self) -> u64 {
        self.balances.values().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InstanceId;

    fn genesis_two_accounts() -> GenesisFile {
        let mut balances = BTreeMap::new();
        let mut credentials = BTreeMap::new();
        for client in [5u32, 6u32] {
            let account = GenesisFile::account_for(InstanceId::new(client).unwrap());
            balances.insert(account.clone(), 100);
            credentials.insert(
                client,
                Credential {
                    account,
                    secret: format!("{client:064x}"),
                },
            );
        }
        GenesisFile {
            balances,
            credentials,
        }
    }

    fn params(r: u64, b: usize) -> FabricParams {
        FabricParams {
            round_duration_ms: r,
            block_capacity: b,
            link_delay_matrix: None,
        }
    }

    fn make_tx(genesis: &GenesisFile, from: u32, to: u32, amount: u64, nonce: u64, ts: Ms) -> Transaction {
        let cred = &genesis.credentials[&from];
        let sender = cred.account.clone();
        let receiver = GenesisFile::account_for(InstanceId::new(to).unwrap());
        let auth_tag = cred.tag(&sender, &receiver, amount, nonce);
        Transaction {
            tx_id: format!("t{from}-{nonce}"),
            sender,
            receiver,
            amount,
            nonce,
            auth_tag,
            submit_ts: ts,
        }
    }

    fn fresh_state() -> (ValidatorState, GenesisFile) {
        let genesis = genesis_two_accounts();
        (ValidatorState::new(1, 4, params(500, 3), &genesis), genesis)
    }

    #[test]
    fn leader_schedule_rotates_round_robin() {
        let (state, _) = fresh_state();
        // (r mod n) + 1 for n = 4.
        assert_eq!(state.leader_of(0), 1);
        assert_eq!(state.leader_of(5), 2);
        assert_eq!(state.leader_of(3), 4);
        assert_eq!(state.round_at(1499), 2);
    }

    #[test]
    fn happy_path_transfer_confirms_in_next_block() {
        let (mut state, genesis) = fresh_state();
        let tx = make_tx(&genesis, 5, 6, 1, 1, 100);
        let outcome = state.wallet_submit(tx.clone()).unwrap();
        assert!(outcome.pooled);
        assert_eq!(state.status(&tx.tx_id), WalletStatus::Pending);

        let block = state.drain_block(500);
        assert_eq!(block.height, 1);
        assert_eq!(block.txs.len(), 1);
        assert_eq!(
            state.status(&tx.tx_id),
            WalletStatus::Confirmed { height: 1, timestamp: 500 }
        );
        assert_eq!(state.balances()["acct-5"], 99);
        assert_eq!(state.balances()["acct-6"], 101);
        assert_eq!(state.total_balance(), 200);
    }

    #[test]
    fn tampered_auth_tag_is_rejected() {
        let (mut state, genesis) = fresh_state();
        let mut tx = make_tx(&genesis, 5, 6, 1, 1, 0);
        tx.amount = 50; // tag no longer matches
        assert_eq!(state.wallet_submit(tx.clone()), Err(RejectReason::BadAuth));
        assert_eq!(state.status(&tx.tx_id), WalletStatus::Rejected(RejectReason::BadAuth));
    }

    #[test]
    fn nonce_replay_is_rejected() {
        let (mut state, genesis) = fresh_state();
        let first = make_tx(&genesis, 5, 6, 1, 7, 0);
        state.wallet_submit(first).unwrap();
        // Second transaction reusing nonce 7 from the same sender.
        let mut replay = make_tx(&genesis, 5, 6, 2, 7, 1);
        replay.tx_id = "t5-7b".into();
        assert_eq!(state.wallet_submit(replay), Err(RejectReason::BadNonce));
    }

    #[test]
    fn overspending_is_rejected_including_pooled_reservations() {
        let (mut state, genesis) = fresh_state();
        state.wallet_submit(make_tx(&genesis, 5, 6, 60, 1, 0)).unwrap();
        // Committed balance is still 100, but 60 is reserved in the pool.
        let over = make_tx(&genesis, 5, 6, 50, 2, 1);
        assert_eq!(state.wallet_submit(over), Err(RejectReason::InsufficientFunds));
    }

    #[test]
    fn fifo_drain_takes_oldest_up_to_capacity() {
        let (mut state, genesis) = fresh_state();
        // Pool capacity is 4 * B = 12; submit 6 one-unit transfers, capacity 3.
        for nonce in 1..=6 {
            state.wallet_submit(make_tx(&genesis, 5, 6, 1, nonce, nonce as Ms)).unwrap();
        }
        let block = state.drain_block(500);
        let ids: Vec<_> = block.txs.iter().map(|t| t.tx_id.as_str()).collect();
        assert_eq!(ids, ["t5-1", "t5-2", "t5-3"]);
        let next = state.drain_block(1000);
        let ids: Vec<_> = next.txs.iter().map(|t| t.tx_id.as_str()).collect();
        assert_eq!(ids, ["t5-4", "t5-5", "t5-6"]);
    }

    #[test]
    fn empty_pool_still_produces_blocks_with_advancing_timestamps() {
        let (mut state, _) = fresh_state();
        let b1 = state.drain_block(500);
        let b2 = state.drain_block(500); // same wall ms: timestamp must still advance
        assert!(b1.txs.is_empty() && b2.txs.is_empty());
        assert_eq!(b1.height, 1);
        assert_eq!(b2.height, 2);
        assert!(b2.timestamp > b1.timestamp);
        assert_eq!(b2.prev_hash, b1.digest());
    }

    #[test]
    fn pool_overflow_drops_but_acks() {
        let (mut state, genesis) = fresh_state();
        let capacity = state.params().pool_capacity();
        for nonce in 1..=(capacity as u64) {
            let out = state.wallet_submit(make_tx(&genesis, 5, 6, 1, nonce, 0)).unwrap();
            assert!(out.pooled);
        }
        let overflow = make_tx(&genesis, 6, 5, 1, 1, 0);
        let out = state.wallet_submit(overflow.clone()).unwrap();
        assert!(!out.pooled);
        assert_eq!(state.dropped_overflow, 1);
        // Dropped transactions never settle and are also never re-admitted.
        assert_eq!(state.accept_gossip(overflow.clone()), GossipAction::Ignore);
        assert_eq!(state.status(&overflow.tx_id), WalletStatus::Unknown);
    }

    #[test]
    fn gossip_dedups_and_rejects_invalid() {
        let (mut state, genesis) = fresh_state();
        let tx = make_tx(&genesis, 5, 6, 1, 1, 0);
        assert_eq!(state.accept_gossip(tx.clone()), GossipAction::Forward);
        assert_eq!(state.accept_gossip(tx.clone()), GossipAction::Ignore);

        let mut bogus = make_tx(&genesis, 6, 5, 1, 1, 0);
        bogus.auth_tag = "ffff".into();
        assert_eq!(state.accept_gossip(bogus), GossipAction::Ignore);
        assert_eq!(state.invalid_gossip, 1);
    }

    #[test]
    fn followers_apply_blocks_and_detect_gaps_and_forks() {
        let (mut leader, genesis) = fresh_state();
        let mut follower = ValidatorState::new(2, 4, params(500, 3), &genesis);

        leader.wallet_submit(make_tx(&genesis, 5, 6, 2, 1, 10)).unwrap();
        let b1 = leader.drain_block(500);
        let b2 = leader.drain_block(1000);

        // Applying out of order: height gap triggers resync.
        assert_eq!(
            follower.apply_block(b2.clone()),
            Err(ApplyError::HeightGap { local_head: 0, got: 2 })
        );
        assert_eq!(follower.apply_block(b1.clone()), Ok(ApplyOutcome::Applied));
        assert_eq!(follower.apply_block(b2.clone()), Ok(ApplyOutcome::Applied));
        assert_eq!(follower.apply_block(b2.clone()), Ok(ApplyOutcome::AlreadyHave));
        assert_eq!(follower.balances()["acct-6"], 102);
        assert_eq!(follower.total_balance(), leader.total_balance());

        // A block with a mismatched parent digest is a fork.
        let mut fork = b2.clone();
        fork.height = 3;
        fork.prev_hash = Block::genesis().digest();
        fork.timestamp = b2.timestamp + 1;
        assert!(matches!(
            follower.apply_block(fork),
            Err(ApplyError::ForkDetected { .. })
        ));
    }

    #[test]
    fn resync_catches_a_lagging_follower_up() {
        let (mut leader, genesis) = fresh_state();
        let mut follower = ValidatorState::new(3, 4, params(500, 3), &genesis);
        leader.wallet_submit(make_tx(&genesis, 5, 6, 1, 1, 0)).unwrap();
        for i in 0..4 {
            leader.drain_block(500 * (i + 1));
        }
        let blocks = leader.blocks_from(follower.height() + 1);
        assert_eq!(follower.apply_resync(blocks), 4);
        assert_eq!(follower.height(), 4);
        assert_eq!(follower.chain().last().unwrap().digest(), leader.chain().last().unwrap().digest());
    }

    #[test]
    fn block_with_invalid_tx_is_rejected_whole() {
        let (mut leader, genesis) = fresh_state();
        let mut follower = ValidatorState::new(2, 4, params(500, 3), &genesis);
        leader.wallet_submit(make_tx(&genesis, 5, 6, 1, 1, 0)).unwrap();
        let mut block = leader.drain_block(500);
        block.txs[0].amount = 1000; // breaks both the tag and the balance rule
        assert!(matches!(
            follower.apply_block(block),
            Err(ApplyError::InvalidTx { .. })
        ));
        assert_eq!(follower.height(), 0);
    }

    #[test]
    fn conservation_holds_across_random_batches() {
        use rand::Rng;
        use rand::SeedableRng;
        let genesis = genesis_two_accounts();
        let mut state = ValidatorState::new(1, 4, params(500, 10), &genesis);
        let total = genesis.balances.values().sum::<u64>();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut nonces = [0u64; 2];
        for round in 1..=50i64 {
            for _ in 0..rng.gen_range(0..5) {
                let who = rng.gen_range(0..2usize);
                let (from, to) = if who == 0 { (5, 6) } else { (6, 5) };
                nonces[who] += 1;
                let amount = rng.gen_range(1..4);
                let _ = state.wallet_submit(make_tx(&genesis, from, to, amount, nonces[who], round as Ms));
            }
            state.drain_block(round * 500);
            assert_eq!(state.total_balance(), total, "conservation after round {round}");
        }
    }
}
