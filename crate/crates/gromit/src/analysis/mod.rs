//! Post-hoc analysis: joining submission logs against ledgers, latency and
//! throughput metrics, the peak-throughput saturation search, repetition
//! aggregation with confidence intervals, and report emission.

pub mod charts;
pub mod report;
pub mod stats;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Ms, TxOutcome, TxStatus};
use crate::reffabric::wallet::WalletClient;
use crate::reffabric::WalletStatus;
use crate::runtime::clock::EpochClock;
use crate::telemetry::NetCounters;
use crate::workload::SubmissionRecord;

pub use stats::{aggregate_mean_ci, CiEstimate, LatencyStats};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("transaction {0} appears in the ledger more than once; experiment invalid")]
    DuplicateConfirmation(String),
    #[error("io error on {0}: {1}")]
    Io(std::path::PathBuf, std::io::Error),
}

/// Joined view of one run: per-transaction outcomes plus join diagnostics.
#[derive(Debug, Clone, Default)]
pub struct JoinedOutcomes {
    pub outcomes: Vec<TxOutcome>,
    /// Ledger transactions that no client logged; excluded from stats.
    pub foreign: Vec<String>,
}

/// Joins client submission logs against ledger-derived outcomes.
///
/// Every submitted tx_id appears exactly once in the result. Latency uses the
/// client's submit timestamp; `confirm_ts` comes from the ledger where
/// present. Submissions the wallet rejected stay `Rejected`; accepted or
/// failed submissions missing from the ledger are `Unconfirmed`.
pub fn join_outcomes(
    submissions: &[SubmissionRecord],
    ledger_outcomes: &[TxOutcome],
) -> Result<JoinedOutcomes, AnalysisError> {
    let mut by_id: HashMap<&str, &TxOutcome> = HashMap::with_capacity(ledger_outcomes.len());
    for outcome in ledger_outcomes {
        if by_id.insert(outcome.tx_id.as_str(), outcome).is_some() {
            return Err(AnalysisError::DuplicateConfirmation(outcome.tx_id.clone()));
        }
    }
    let mut joined = JoinedOutcomes::default();
    let mut submitted_ids: HashMap<&str, ()> = HashMap::with_capacity(submissions.len());
    for sub in submissions {
        submitted_ids.insert(sub.tx_id.as_str(), ());
        let outcome = match by_id.get(sub.tx_id.as_str()) {
            Some(ledger) => TxOutcome {
                tx_id: sub.tx_id.clone(),
                submit_ts: sub.submit_ts_ms,
                confirm_ts: ledger.confirm_ts,
                status: TxStatus::Confirmed,
            },
            None if sub.status.starts_with("rejected") => TxOutcome {
                tx_id: sub.tx_id.clone(),
                submit_ts: sub.submit_ts_ms,
                confirm_ts: None,
                status: TxStatus::Rejected,
            },
            None => TxOutcome {
                tx_id: sub.tx_id.clone(),
                submit_ts: sub.submit_ts_ms,
                confirm_ts: None,
                status: TxStatus::Unconfirmed,
            },
        };
        joined.outcomes.push(outcome);
    }
    for outcome in ledger_outcomes {
        if !submitted_ids.contains_key(outcome.tx_id.as_str()) {
            log::warn!("foreign transaction in ledger: {}", outcome.tx_id);
            joined.foreign.push(outcome.tx_id.clone());
        }
    }
    Ok(joined)
}

/// The metrics of one experiment run at one offered rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub offered_rate: f64,
    pub confirmed: u64,
    pub unconfirmed: u64,
    pub rejected: u64,
    /// A run is saturated exactly when transactions were left unconfirmed.
    pub saturated: bool,
    pub latency: LatencyStats,
}

impl RunResult {
    pub fn from_outcomes(offered_rate: f64, outcomes: &[TxOutcome], bin_ms: u64) -> RunResult {
        let mut confirmed = 0;
        let mut unconfirmed = 0;
        let mut rejected = 0;
        let mut latencies = Vec::new();
        for outcome in outcomes {
            match outcome.status {
                TxStatus::Confirmed => {
                    confirmed += 1;
                    if let Some(latency) = outcome.latency_ms() {
                        latencies.push(latency);
                    }
                }
                TxStatus::Unconfirmed => unconfirmed += 1,
                TxStatus::Rejected => rejected += 1,
            }
        }
        RunResult {
            offered_rate,
            confirmed,
            unconfirmed,
            rejected,
            saturated: unconfirmed > 0,
            latency: LatencyStats::from_latencies(&latencies, bin_ms),
        }
    }

    pub fn submitted(&self) -> u64 {
        self.confirmed + self.unconfirmed + self.rejected
    }
}

/// Periodically polls the wallet for each transaction until it confirms, the
/// deadline passes, or every id is resolved. `confirm_ts` is the first poll
/// time at which the wallet reported confirmation, so the measurement
/// resolution is one poll interval.
///
/// Hitting the deadline marks the remaining transactions `Unconfirmed`.
pub async fn poll_confirmations(
    tx_ids: &[(String, Ms)],
    wallet_endpoint: SocketAddr,
    clock: &EpochClock,
    interval: Duration,
    deadline: Duration,
) -> Vec<TxOutcome> {
    let started = tokio::time::Instant::now();
    let mut outcomes: HashMap<String, TxOutcome> = HashMap::new();
    let mut pending: Vec<(String, Ms)> = tx_ids.to_vec();
    let mut wallet = match WalletClient::connect(wallet_endpoint, NetCounters::default()).await {
        Ok(wallet) => wallet,
        Err(e) => {
            log::warn!("poll_confirmations cannot reach wallet: {e}");
            return mark_unconfirmed(tx_ids);
        }
    };
    while !pending.is_empty() && started.elapsed() < deadline {
        let mut still = Vec::with_capacity(pending.len());
        for (tx_id, submit_ts) in pending {
            match wallet.status(&tx_id).await {
                Ok(WalletStatus::Confirmed { .. }) => {
                    outcomes.insert(
                        tx_id.clone(),
                        TxOutcome::confirmed(tx_id, submit_ts, clock.now_ms()),
                    );
                }
                Ok(WalletStatus::Rejected(_)) => {
                    outcomes.insert(
                        tx_id.clone(),
                        TxOutcome {
                            tx_id,
                            submit_ts,
                            confirm_ts: None,
                            status: TxStatus::Rejected,
                        },
                    );
                }
                _ => still.push((tx_id, submit_ts)),
            }
        }
        pending = still;
        if !pending.is_empty() {
            tokio::time::sleep(interval).await;
        }
    }
    for (tx_id, submit_ts) in pending {
        outcomes.insert(
            tx_id.clone(),
            TxOutcome {
                tx_id,
                submit_ts,
                confirm_ts: None,
                status: TxStatus::Unconfirmed,
            },
        );
    }
    tx_ids
        .iter()
        .filter_map(|(id, _)| outcomes.remove(id))
        .collect()
}

fn mark_unconfirmed(tx_ids: &[(String, Ms)]) -> Vec<TxOutcome> {
    tx_ids
        .iter()
        .map(|(tx_id, submit_ts)| TxOutcome {
            tx_id: tx_id.clone(),
            submit_ts: *submit_ts,
            confirm_ts: None,
            status: TxStatus::Unconfirmed,
        })
        .collect()
}

/// One step of the saturation search.
#[derive(Debug, Clone)]
pub struct SearchStep {
    pub rate: f64,
    pub result: RunResult,
    pub warning: Option<String>,
}

/// Result of the peak-throughput search.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Highest non-saturated offered rate; 0 when the first step saturates.
    pub peak: f64,
    pub steps: Vec<SearchStep>,
    /// True when the search ran out of budget before finding saturation.
    pub hit_max_rate: bool,
}

/// Linear-step peak-throughput search: offered rates `step, 2*step, ...` until
/// a run saturates or `max_rate` is reached. A failed run is treated as
/// saturated, with a warning.
pub fn saturation_search<E: std::fmt::Display>(
    step: f64,
    max_rate: f64,
    mut run_at: impl FnMut(f64) -> Result<RunResult, E>,
) -> SearchOutcome {
    assert!(step > 0.0, "search step must be positive");
    let mut steps: Vec<SearchStep> = Vec::new();
    let mut peak = 0.0f64;
    let mut rate = step;
    while rate <= max_rate + 1e-9 {
        let (result, warning) = match run_at(rate) {
            Ok(result) => (result, None),
            Err(e) => {
                // A failed run counts as saturated so the search terminates.
                let mut failed = RunResult::from_outcomes(rate, &[], 100);
                failed.saturated = true;
                (failed, Some(format!("run at {rate} tx/s failed: {e}")))
            }
        };
        let saturated = result.saturated;
        steps.push(SearchStep {
            rate,
            result,
            warning,
        });
        if saturated {
            return SearchOutcome {
                peak,
                steps,
                hit_max_rate: false,
            };
        }
        peak = rate;
        rate += step;
    }
    SearchOutcome {
        peak,
        steps,
        hit_max_rate: true,
    }
}

/// Checks the reference-fabric monotonicity property over search steps: once
/// a rate saturates, every higher tested rate must saturate too. A violation
/// indicates flaky infrastructure.
pub fn saturation_monotone(steps: &[SearchStep]) -> bool {
    let mut seen_saturated = false;
    for step in steps {
        if seen_saturated && !step.result.saturated {
            return false;
        }
        seen_saturated |= step.result.saturated;
    }
    true
}

/// Aggregate over repeated runs of one setting: mean and 95% CI per metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunAggregate {
    pub offered_rate: f64,
    pub runs: usize,
    pub mean_latency_ms: CiEstimate,
    pub confirmed: CiEstimate,
    pub unconfirmed: CiEstimate,
    pub any_saturated: bool,
}

pub fn aggregate_runs(results: &[RunResult]) -> RunAggregate {
    assert!(!results.is_empty(), "aggregate needs at least one run");
    let offered = results[0].offered_rate;
    debug_assert!(
        results.iter().all(|r| (r.offered_rate - offered).abs() < 1e-9),
        "all aggregated runs must share a setting"
    );
    RunAggregate {
        offered_rate: offered,
        runs: results.len(),
        mean_latency_ms: aggregate_mean_ci(
            &results.iter().map(|r| r.latency.mean_ms).collect::<Vec<_>>(),
        ),
        confirmed: aggregate_mean_ci(&results.iter().map(|r| r.confirmed as f64).collect::<Vec<_>>()),
        unconfirmed: aggregate_mean_ci(
            &results.iter().map(|r| r.unconfirmed as f64).collect::<Vec<_>>(),
        ),
        any_saturated: results.iter().any(|r| r.saturated),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub(id: &str, ts: Ms, status: &str) -> SubmissionRecord {
        SubmissionRecord {
            tx_id: id.into(),
            client_id: 5,
            validator_id: 1,
            submit_ts_ms: ts,
            status: status.into(),
        }
    }

    fn ledger(id: &str, confirm: Ms) -> TxOutcome {
        TxOutcome {
            tx_id: id.into(),
            submit_ts: 0,
            confirm_ts: Some(confirm),
            status: TxStatus::Confirmed,
        }
    }

    #[test]
    fn full_confirmation_join() {
        let subs = vec![sub("a", 10, "ok"), sub("b", 20, "ok"), sub("c", 30, "ok")];
        let ledger = vec![ledger("a", 500), ledger("b", 500), ledger("c", 1000)];
        let joined = join_outcomes(&subs, &ledger).unwrap();
        assert_eq!(joined.outcomes.len(), 3);
        assert!(joined.outcomes.iter().all(|o| o.status == TxStatus::Confirmed));
        // Latency uses the client's submit timestamp.
        assert_eq!(joined.outcomes[0].latency_ms(), Some(490));
        let result = RunResult::from_outcomes(100.0, &joined.outcomes, 50);
        assert!(!result.saturated);
        assert_eq!(result.submitted(), 3);
    }

    #[test]
    fn missing_ledger_entries_mean_saturation() {
        let subs = vec![sub("a", 10, "ok"), sub("b", 20, "ok"), sub("c", 30, "ok")];
        let ledger = vec![ledger("a", 500), ledger("b", 500)];
        let joined = join_outcomes(&subs, &ledger).unwrap();
        let result = RunResult::from_outcomes(100.0, &joined.outcomes, 50);
        assert_eq!((result.confirmed, result.unconfirmed), (2, 1));
        assert!(result.saturated);
    }

    #[test]
    fn rejected_submissions_do_not_count_as_saturation() {
        let subs = vec![sub("a", 10, "ok"), sub("b", 20, "rejected:bad_nonce")];
        let ledger = vec![ledger("a", 500)];
        let joined = join_outcomes(&subs, &ledger).unwrap();
        let result = RunResult::from_outcomes(100.0, &joined.outcomes, 50);
        assert_eq!((result.confirmed, result.unconfirmed, result.rejected), (1, 0, 1));
        assert!(!result.saturated);
        assert_eq!(result.submitted(), 2);
    }

    #[test]
    fn foreign_ledger_transactions_are_flagged_and_excluded() {
        let subs = vec![sub("a", 10, "ok")];
        let ledger = vec![ledger("a", 500), ledger("ghost", 500)];
        let joined = join_outcomes(&subs, &ledger).unwrap();
        assert_eq!(joined.outcomes.len(), 1);
        assert_eq!(joined.foreign, vec!["ghost".to_string()]);
    }

    #[test]
    fn duplicate_ledger_entries_invalidate_the_experiment() {
        let subs = vec![sub("a", 10, "ok")];
        let twice = vec![ledger("a", 500), ledger("a", 1000)];
        assert!(matches!(
            join_outcomes(&subs, &twice),
            Err(AnalysisError::DuplicateConfirmation(id)) if id == "a"
        ));
    }

    fn run(rate: f64, unconfirmed: u64) -> RunResult {
        RunResult {
            offered_rate: rate,
            confirmed: 100,
            unconfirmed,
            rejected: 0,
            saturated: unconfirmed > 0,
            latency: LatencyStats::empty(100),
        }
    }

    #[test]
    fn search_stops_at_first_saturated_step() {
        // Capacity law oracle: B/R = 400 tx/s saturates first at 500.
        let capacity = 400.0;
        let mut runs = 0;
        let outcome = saturation_search(100.0, 1000.0, |rate| {
            runs += 1;
            Ok::<_, String>(run(rate, if rate > capacity { 50 } else { 0 }))
        });
        assert_eq!(outcome.peak, 400.0);
        assert_eq!(runs, 5, "100..500 then stop");
        assert!(!outcome.hit_max_rate);
        assert!(saturation_monotone(&outcome.steps));
    }

    #[test]
    fn immediate_saturation_yields_zero_peak_after_one_run() {
        let mut runs = 0;
        let outcome = saturation_search(100.0, 1000.0, |rate| {
            runs += 1;
            Ok::<_, String>(run(rate, 10))
        });
        assert_eq!(outcome.peak, 0.0);
        assert_eq!(runs, 1);
    }

    #[test]
    fn unreachable_saturation_flags_bound() {
        let outcome =
            saturation_search(100.0, 300.0, |rate| Ok::<_, String>(run(rate, 0)));
        assert_eq!(outcome.peak, 300.0);
        assert!(outcome.hit_max_rate);
    }

    #[test]
    fn failed_runs_are_treated_as_saturated_with_warning() {
        let outcome = saturation_search(100.0, 1000.0, |rate| {
            if rate > 100.0 {
                Err("spawn failed".to_string())
            } else {
                Ok(run(rate, 0))
            }
        });
        assert_eq!(outcome.peak, 100.0);
        assert!(outcome.steps.last().unwrap().warning.is_some());
    }

    #[test]
    fn monotonicity_violation_is_detected() {
        let steps = vec![
            SearchStep { rate: 100.0, result: run(100.0, 5), warning: None },
            SearchStep { rate: 200.0, result: run(200.0, 0), warning: None },
        ];
        assert!(!saturation_monotone(&steps));
    }

    #[test]
    fn aggregate_runs_reports_mean_and_ci() {
        let mut a = run(100.0, 0);
        a.latency = LatencyStats::from_latencies(&[10], 100);
        let mut b = run(100.0, 0);
        b.latency = LatencyStats::from_latencies(&[12], 100);
        let agg = aggregate_runs(&[a, b]);
        assert_eq!(agg.runs, 2);
        assert_eq!(agg.mean_latency_ms.mean, 11.0);
        let half = agg.mean_latency_ms.ci95_half_width.unwrap();
        assert!((half - 12.7062).abs() < 5e-4);
        assert!(!agg.any_saturated);
    }
}
