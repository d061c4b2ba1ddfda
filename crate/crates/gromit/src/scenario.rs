//! Scenario files: parsing the experiment DSL and scheduling its actions.
//!
//! A scenario is UTF-8 text with one action per line:
//!
//! ```text
//! @8   init_blockchain_config {1-10}
//! @12  start_validator {1-10}
//! @20  start_client {11-20}
//! @80  start_creating_transactions {11-20}
//! @100 stop
//! ```
//!
//! Grammar: `@<seconds> <action-name> [{<id-spec>(,<id-spec>)*}]` where an
//! id-spec is a single id `a` or an inclusive range `a-b`. Offsets may be
//! decimal (`@0.8`). Blank lines and `#` comments are ignored. A missing
//! target clause means "all instances".

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::future::Future;

use thiserror::Error;

use crate::model::{InstanceId, Ms};
use crate::runtime::clock::EpochClock;

/// Instances an action applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetSet {
    /// No target clause in the file: every instance.
    All,
    Ids(BTreeSet<u32>),
}

impl TargetSet {
    pub fn contains(&self, id: InstanceId) -> bool {
        match self {
            TargetSet::All => true,
            TargetSet::Ids(ids) => ids.contains(&id.get()),
        }
    }
}

/// One timestamped action aimed at a subset of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioAction {
    /// Offset in seconds from the experiment epoch.
    pub at: f64,
    pub action: String,
    pub targets: TargetSet,
}

impl ScenarioAction {
    pub fn at_ms(&self) -> Ms {
        (self.at * 1000.0).round() as Ms
    }
}

/// A parsed scenario: actions in non-decreasing offset order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub actions: Vec<ScenarioAction>,
}

pub const STOP_ACTION: &str = "stop";

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("scenario line {line}: syntax error: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("scenario line {line}: bad id range: {reason}")]
    Range { line: usize, reason: String },
    #[error("scenario line {line}: offsets must be non-decreasing")]
    Unsorted { line: usize },
    #[error("scenario is missing a final `stop` action")]
    MissingStop,
    #[error("scenario line {line}: `stop` must be the last action")]
    StopNotLast { line: usize },
}

/// Parses scenario text into actions in file order.
///
/// Syntax and range errors carry the 1-based line number. Offsets must be
/// non-decreasing and at most one `stop` may appear, as the final action.
/// Whether a `stop` is present at all is checked by [`Scenario::require_stop`]
/// so that fragments remain parseable.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut actions: Vec<(usize, ScenarioAction)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        actions.push((line_no, parse_line(line, line_no)?));
    }
    for pair in actions.windows(2) {
        if pair[1].1.at < pair[0].1.at {
            return Err(ScenarioError::Unsorted { line: pair[1].0 });
        }
    }
    if let Some(pos) = actions.iter().position(|(_, a)| a.action == STOP_ACTION) {
        if pos + 1 != actions.len() {
            return Err(ScenarioError::StopNotLast {
                line: actions[pos + 1].0,
            });
        }
    }
    Ok(Scenario {
        actions: actions.into_iter().map(|(_, a)| a).collect(),
    })
}

fn parse_line(line: &str, line_no: usize) -> Result<ScenarioAction, ScenarioError> {
    let syntax = |reason: &str| ScenarioError::Syntax {
        line: line_no,
        reason: reason.to_string(),
    };
    let rest = line
        .strip_prefix('@')
        .ok_or_else(|| syntax("expected line to start with `@<seconds>`"))?;
    let mut parts = rest.splitn(2, char::is_whitespace);
    let at_str = parts.next().unwrap_or("");
    let at: f64 = at_str
        .parse()
        .map_err(|_| syntax(&format!("cannot parse offset `{at_str}`")))?;
    if !(at >= 0.0) || !at.is_finite() {
        return Err(syntax("offset must be a non-negative number of seconds"));
    }
    let rest = parts.next().map(str::trim).unwrap_or("");
    if rest.is_empty() {
        return Err(syntax("missing action name"));
    }
    let (name, targets_str) = match rest.find('{') {
        Some(brace) => {
            let (name, tail) = rest.split_at(brace);
            let tail = tail.trim();
            if !tail.ends_with('}') {
                return Err(syntax("unterminated target set, expected `}`"));
            }
            (name.trim(), Some(&tail[1..tail.len() - 1]))
        }
        None => (rest.trim(), None),
    };
    if name.is_empty() {
        return Err(syntax("missing action name"));
    }
    if name.contains(char::is_whitespace) {
        return Err(syntax("action name must be a single word"));
    }
    let targets = match targets_str {
        None => TargetSet::All,
        Some(spec) => TargetSet::Ids(parse_id_specs(spec, line_no)?),
    };
    Ok(ScenarioAction {
        at,
        action: name.to_string(),
        targets,
    })
}

fn parse_id_specs(spec: &str, line_no: usize) -> Result<BTreeSet<u32>, ScenarioError> {
    let range_err = |reason: String| ScenarioError::Range {
        line: line_no,
        reason,
    };
    let mut ids = BTreeSet::new();
    for item in spec.split(',') {
        let item = item.trim();
        if item.is_empty() {
            return Err(ScenarioError::Syntax {
                line: line_no,
                reason: "empty id entry in target set".to_string(),
            });
        }
        let (lo, hi) = match item.split_once('-') {
            Some((a, b)) => {
                let lo: u32 = a.trim().parse().map_err(|_| {
                    range_err(format!("cannot parse id `{}`", a.trim()))
                })?;
                let hi: u32 = b.trim().parse().map_err(|_| {
                    range_err(format!("cannot parse id `{}`", b.trim()))
                })?;
                (lo, hi)
            }
            None => {
                let id: u32 = item
                    .parse()
                    .map_err(|_| range_err(format!("cannot parse id `{item}`")))?;
                (id, id)
            }
        };
        if lo < 1 {
            return Err(range_err("instance ids start at 1".to_string()));
        }
        if hi < lo {
            return Err(range_err(format!("descending range {lo}-{hi}")));
        }
        ids.extend(lo..=hi);
    }
    Ok(ids)
}

impl Scenario {
    /// Errors unless the scenario ends in exactly one `stop` action.
    pub fn require_stop(&self) -> Result<(), ScenarioError> {
        match self.actions.last() {
            Some(last) if last.action == STOP_ACTION => Ok(()),
            _ => Err(ScenarioError::MissingStop),
        }
    }

    pub fn stop_offset(&self) -> Option<f64> {
        self.actions
            .iter()
            .rev()
            .find(|a| a.action == STOP_ACTION)
            .map(|a| a.at)
    }

    /// Actions targeting one instance, in schedule order.
    pub fn actions_for(&self, id: InstanceId) -> Vec<&ScenarioAction> {
        self.actions.iter().filter(|a| a.targets.contains(id)).collect()
    }

    /// Action names not present in `vocabulary`; warnings at parse time.
    pub fn unknown_actions(&self, vocabulary: &[&str]) -> Vec<String> {
        let mut unknown: Vec<String> = self
            .actions
            .iter()
            .map(|a| a.action.as_str())
            .filter(|name| !vocabulary.contains(name))
            .map(str::to_string)
            .collect();
        unknown.dedup();
        unknown
    }

    /// Renders back to scenario text; `parse(render(parse(x))) == parse(x)`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for action in &self.actions {
            let _ = write!(out, "@{} {}", action.at, action.action);
            if let TargetSet::Ids(ids) = &action.targets {
                out.push_str(" {");
                out.push_str(&render_id_set(ids));
                out.push('}');
            }
            out.push('\n');
        }
        out
    }
}

fn render_id_set(ids: &BTreeSet<u32>) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut run: Option<(u32, u32)> = None;
    for &id in ids {
        run = match run {
            None => Some((id, id)),
            Some((lo, hi)) if id == hi + 1 => Some((lo, id)),
            Some((lo, hi)) => {
                parts.push(render_run(lo, hi));
                Some((id, id))
            }
        };
    }
    if let Some((lo, hi)) = run {
        parts.push(render_run(lo, hi));
    }
    parts.join(",")
}

fn render_run(lo: u32, hi: u32) -> String {
    if lo == hi {
        format!("{lo}")
    } else {
        format!("{lo}-{hi}")
    }
}

/// Outcome of dispatching one scheduled action.
#[derive(Debug, Clone)]
pub struct DispatchRecord {
    pub at: f64,
    pub action: String,
    /// Wall time the dispatch actually started, ms since epoch.
    pub dispatched_at_ms: Ms,
    /// How far behind schedule the dispatch ran.
    pub lateness_ms: Ms,
    pub result: Result<(), String>,
}

/// Per-instance record of everything the scheduler dispatched.
#[derive(Debug, Clone, Default)]
pub struct ScheduleLog {
    pub records: Vec<DispatchRecord>,
    /// Whether the schedule ended via a dispatched `stop`.
    pub stopped: bool,
}

impl ScheduleLog {
    pub fn errors(&self) -> impl Iterator<Item = &DispatchRecord> {
        self.records.iter().filter(|r| r.result.is_err())
    }
}

/// Runs the scenario against one instance.
///
/// Each action targeting `self_id` is dispatched no earlier than its offset
/// and in order. A failing callback is recorded and scheduling continues;
/// dispatching `stop` terminates the schedule.
pub async fn schedule<F, Fut>(
    scenario: &Scenario,
    self_id: InstanceId,
    clock: &EpochClock,
    mut dispatch: F,
) -> ScheduleLog
where
    F: FnMut(ScenarioAction) -> Fut,
    Fut: Future<Output = Result<(), String>>,
{
    let mut log = ScheduleLog::default();
    for action in &scenario.actions {
        if !action.targets.contains(self_id) {
            continue;
        }
        tokio::time::sleep_until(clock.instant_at(action.at_ms())).await;
        let dispatched_at_ms = clock.now_ms();
        let result = dispatch(action.clone()).await;
        if let Err(err) = &result {
            log::warn!("action `{}` at @{} failed: {err}", action.action, action.at);
        }
        log.records.push(DispatchRecord {
            at: action.at,
            action: action.action.clone(),
            dispatched_at_ms,
            lateness_ms: (dispatched_at_ms - action.at_ms()).max(0),
            result,
        });
        if action.action == STOP_ACTION {
            log.stopped = true;
            break;
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LISTING: &str = "\
@8   init_blockchain_config {1-10}
@12  start_validator {1-10}
@20  start_client {11-20}
@80  start_creating_transactions {11-20}
@100 stop
";

    fn ids(range: impl IntoIterator<Item = u32>) -> TargetSet {
        TargetSet::Ids(range.into_iter().collect())
    }

    #[test]
    fn parses_example_lines() {
        let s = parse_scenario("@8 init_blockchain_config {1-10}").unwrap();
        assert_eq!(
            s.actions,
            vec![ScenarioAction {
                at: 8.0,
                action: "init_blockchain_config".into(),
                targets: ids(1..=10),
            }]
        );

        let s = parse_scenario("@0 stop {1-1}").unwrap();
        assert_eq!(
            s.actions,
            vec![ScenarioAction {
                at: 0.0,
                action: "stop".into(),
                targets: ids([1]),
            }]
        );

        // Union of singletons and a range, checked by hand enumeration.
        let s = parse_scenario("@5 start_client {1,3,5-7}").unwrap();
        assert_eq!(s.actions[0].targets, ids([1, 3, 5, 6, 7]));
    }

    #[test]
    fn parses_full_listing() {
        let s = parse_scenario(LISTING).unwrap();
        assert_eq!(s.actions.len(), 5);
        assert!(s.require_stop().is_ok());
        assert_eq!(s.stop_offset(), Some(100.0));
        // The final stop has no target clause: all instances.
        assert_eq!(s.actions[4].targets, TargetSet::All);
    }

    #[test]
    fn parses_decimal_offsets_and_comments() {
        let s = parse_scenario("# scaled\n\n@0.8 init_blockchain_config {1-10}\n@1.2 stop\n")
            .unwrap();
        assert_eq!(s.actions[0].at, 0.8);
        assert_eq!(s.actions[0].at_ms(), 800);
    }

    #[test]
    fn rejects_malformed_lines_with_line_numbers() {
        let err = parse_scenario("@8 init {1-10}\nnot a line\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Syntax { line: 2, .. }), "{err}");

        let err = parse_scenario("@x stop").unwrap_err();
        assert!(matches!(err, ScenarioError::Syntax { line: 1, .. }));

        let err = parse_scenario("@8 start {10-1}").unwrap_err();
        assert!(matches!(err, ScenarioError::Range { line: 1, .. }));

        let err = parse_scenario("@8 start {0-3}").unwrap_err();
        assert!(matches!(err, ScenarioError::Range { line: 1, .. }));

        let err = parse_scenario("@8 start {1-3}\n@4 stop").unwrap_err();
        assert!(matches!(err, ScenarioError::Unsorted { line: 2 }));

        let err = parse_scenario("@1 stop\n@2 start {1}").unwrap_err();
        assert!(matches!(err, ScenarioError::StopNotLast { line: 2 }));
    }

    #[test]
    fn listing_schedule_membership() {
        let s = parse_scenario(LISTING).unwrap();
        let five = InstanceId::new(5).unwrap();
        let names: Vec<_> = s.actions_for(five).iter().map(|a| a.action.as_str()).collect();
        assert_eq!(names, ["init_blockchain_config", "start_validator", "stop"]);

        let fifteen = InstanceId::new(15).unwrap();
        let names: Vec<_> = s.actions_for(fifteen).iter().map(|a| a.action.as_str()).collect();
        assert_eq!(
            names,
            ["start_client", "start_creating_transactions", "stop"]
        );
    }

    #[test]
    fn unknown_actions_are_reported() {
        let s = parse_scenario("@1 warm_caches {1}\n@2 stop").unwrap();
        assert_eq!(s.unknown_actions(&["stop"]), vec!["warm_caches".to_string()]);
        assert!(s.unknown_actions(&["warm_caches", "stop"]).is_empty());
    }

    proptest! {
        #[test]
        fn parse_render_roundtrip(
            offsets in proptest::collection::vec(0u32..1000, 1..8),
            names in proptest::collection::vec("[a-z_]{1,12}", 8),
            targets in proptest::collection::vec(
                proptest::option::of(proptest::collection::btree_set(1u32..40, 1..12)),
                8,
            ),
        ) {
            let mut at = 0.0;
            let mut actions = Vec::new();
            for (i, step) in offsets.iter().enumerate() {
                at += *step as f64 / 10.0;
                let name = &names[i];
                if name == STOP_ACTION { continue; }
                actions.push(ScenarioAction {
                    at,
                    action: name.clone(),
                    targets: match &targets[i] {
                        Some(ids) => TargetSet::Ids(ids.clone()),
                        None => TargetSet::All,
                    },
                });
            }
            actions.push(ScenarioAction { at: at + 1.0, action: STOP_ACTION.into(), targets: TargetSet::All });
            let scenario = Scenario { actions };
            let parsed = parse_scenario(&scenario.render()).unwrap();
            let reparsed = parse_scenario(&parsed.render()).unwrap();
            prop_assert_eq!(&parsed, &reparsed);
            prop_assert_eq!(parsed, scenario);
        }
    }

    #[tokio::test]
    async fn schedule_dispatches_in_order_and_records_errors() {
        let s = parse_scenario(
            "@0.01 alpha {1}\n@0.02 beta {1,2}\n@0.02 gamma {2}\n@0.05 stop",
        )
        .unwrap();
        let clock = EpochClock::starting_now();
        let mut seen = Vec::new();
        let log = schedule(&s, InstanceId::new(1).unwrap(), &clock, |action| {
            seen.push(action.action.clone());
            async move {
                if action.action == "beta" {
                    Err("boom".to_string())
                } else {
                    Ok(())
                }
            }
        })
        .await;
        assert_eq!(seen, ["alpha", "beta", "stop"]);
        assert!(log.stopped);
        assert_eq!(log.errors().count(), 1);
        // Dispatch never runs early.
        for r in &log.records {
            assert!(r.lateness_ms >= 0);
            assert!(r.dispatched_at_ms >= (r.at * 1000.0) as i64);
        }
    }

    #[tokio::test]
    async fn empty_schedule_stops_immediately() {
        let s = parse_scenario("@0 stop").unwrap();
        let clock = EpochClock::starting_now();
        let log = schedule(&s, InstanceId::new(7).unwrap(), &clock, |_| async { Ok(()) }).await;
        assert!(log.stopped);
        assert_eq!(log.records.len(), 1);
    }
}
