//! Ledger files: exporting a validator's chain and parsing collected chains
//! back into per-transaction outcomes.
//!
//! The ledger file is newline-delimited: one block per line in canonical
//! field order (height, prev_hash, timestamp, proposer, txs). The exported
//! `accounts.json` carries the final balance map for cross-checking against
//! a replay of the chain.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::model::{TxOutcome, TxStatus};

use super::types::Block;

pub const LEDGER_FILE: &str = crate::adapter::LEDGER_FILE;
pub const ACCOUNTS_FILE: &str = crate::adapter::ACCOUNTS_FILE;

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("cannot read ledger {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("ledger {path} line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

pub fn export_chain(dir: &Path, chain: &[Block]) -> Result<(), (PathBuf, std::io::Error)> {
    let path = dir.join(LEDGER_FILE);
    let mut out = String::new();
    for block in chain {
        out.push_str(&block.canonical_json());
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(|e| (path, e))
}

pub fn export_accounts(
    dir: &Path,
    balances: &BTreeMap<String, u64>,
) -> Result<(), (PathBuf, std::io::Error)> {
    let path = dir.join(ACCOUNTS_FILE);
    let json = serde_json::to_string_pretty(balances).expect("balances serialize");
    std::fs::write(&path, json).map_err(|e| (path, e))
}

/// Reads and structurally verifies one exported chain: consecutive heights
/// from zero and an intact hash chain.
pub fn read_chain(path: &Path) -> Result<Vec<Block>, LedgerError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| LedgerError::Io(path.to_path_buf(), e))?;
    let mut chain: Vec<Block> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let block: Block = serde_json::from_str(line).map_err(|e| LedgerError::Corrupt {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        let corrupt = |reason: String| LedgerError::Corrupt {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        if block.height != chain.len() as u64 {
            return Err(corrupt(format!(
                "height {} out of sequence (expected {})",
                block.height,
                chain.len()
            )));
        }
        if let Some(prev) = chain.last() {
            if block.prev_hash != prev.digest() {
                return Err(corrupt("hash chain broken".to_string()));
            }
            if block.timestamp <= prev.timestamp {
                return Err(corrupt("timestamps do not increase".to_string()));
            }
        }
        chain.push(block);
    }
    Ok(chain)
}

pub fn read_accounts(path: &Path) -> Result<BTreeMap<String, u64>, LedgerError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| LedgerError::Io(path.to_path_buf(), e))?;
    serde_json::from_str(&text).map_err(|e| LedgerError::Corrupt {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })
}

/// Confirmed outcomes of every transaction in a chain; `confirm_ts` is the
/// containing block's timestamp. Duplicates are passed through so the join
/// stage can flag them as a data-integrity failure.
pub fn outcomes_from_chain(chain: &[Block]) -> Vec<TxOutcome> {
    chain
        .iter()
        .flat_map(|block| {
            block.txs.iter().map(|tx| TxOutcome {
                tx_id: tx.tx_id.clone(),
                submit_ts: tx.submit_ts,
                confirm_ts: Some(block.timestamp),
                status: TxStatus::Confirmed,
            })
        })
        .collect()
}

/// Replays a chain over genesis balances; the independent route for the
/// conservation check (the exported `accounts.json` is the other).
pub fn replay_balances(
    genesis_balances: &BTreeMap<String, u64>,
    chain: &[Block],
) -> BTreeMap<String, u64> {
    let mut balances = genesis_balances.clone();
    for block in chain {
        for tx in &block.txs {
            if let Some(balance) = balances.get_mut(&tx.sender) {
                *balance = balance.saturating_sub(tx.amount);
            }
            *balances.entry(tx.receiver.clone()).or_insert(0) += tx.amount;
        }
    }
    balances
}

pub fn chains_equal(a: &[Block], b: &[Block]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Transaction;

    fn block_with_txs(height: u64, prev: &Block, ts: i64, txs: Vec<Transaction>) -> Block {
        Block {
            height,
            prev_hash: prev.digest(),
            timestamp: ts,
            proposer: 1,
            txs,
        }
    }

    fn tx(id: &str, from: &str, to: &str, amount: u64, submit_ts: i64) -> Transaction {
        Transaction {
            tx_id: id.into(),
            sender: from.into(),
            receiver: to.into(),
            amount,
            nonce: 1,
            auth_tag: "00".into(),
            submit_ts,
        }
    }

    #[test]
    fn export_read_roundtrip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        let genesis = Block::genesis();
        let b1 = block_with_txs(1, &genesis, 500, vec![tx("a", "x", "y", 1, 100)]);
        let b2 = block_with_txs(2, &b1, 1000, vec![]);
        let chain = vec![genesis, b1, b2];
        export_chain(dir.path(), &chain).unwrap();
        let read = read_chain(&dir.path().join(LEDGER_FILE)).unwrap();
        assert!(chains_equal(&read, &chain));

        // Corrupting a line breaks the hash chain check.
        let path = dir.path().join(LEDGER_FILE);
        let tampered = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"amount\":1", "\"amount\":7");
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(
            read_chain(&path),
            Err(LedgerError::Corrupt { .. })
        ));
    }

    #[test]
    fn outcomes_carry_block_timestamps() {
        // A one-block ledger with three transactions all confirmed at t=5000.
        let genesis = Block::genesis();
        let b1 = block_with_txs(
            1,
            &genesis,
            5000,
            vec![
                tx("t1", "a", "b", 1, 400),
                tx("t2", "a", "b", 1, 900),
                tx("t3", "b", "a", 1, 1400),
            ],
        );
        let outcomes = outcomes_from_chain(&[genesis, b1]);
        assert_eq!(outcomes.len(), 3);
        for o in &outcomes {
            assert_eq!(o.confirm_ts, Some(5000));
            assert_eq!(o.status, TxStatus::Confirmed);
        }
        assert_eq!(outcomes[0].latency_ms(), Some(4600));
    }

    #[test]
    fn empty_chain_has_no_outcomes() {
        assert!(outcomes_from_chain(&[Block::genesis()]).is_empty());
        assert!(outcomes_from_chain(&[]).is_empty());
    }

    #[test]
    fn replay_conserves_total_balance() {
        let mut genesis_balances = BTreeMap::new();
        genesis_balances.insert("a".to_string(), 10u64);
        genesis_balances.insert("b".to_string(), 5u64);
        let genesis = Block::genesis();
        let b1 = block_with_txs(1, &genesis, 500, vec![tx("t1", "a", "b", 3, 0)]);
        let replayed = replay_balances(&genesis_balances, &[genesis, b1]);
        assert_eq!(replayed["a"], 7);
        assert_eq!(replayed["b"], 8);
        assert_eq!(replayed.values().sum::<u64>(), 15);
    }
}
