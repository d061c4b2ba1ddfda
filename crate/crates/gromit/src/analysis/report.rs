//! Report bundle emission: aggregate CSVs, latency-distribution data, series
//! files, and static SVG charts. All outputs are deterministic functions of
//! the inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::model::{MetricsSample, Ms, Role};

use super::charts::{self, BoxStats};
use super::stats::percentile_nearest_rank;
use super::{aggregate_runs, RunResult};

pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const LATENCY_DISTRIBUTION_CSV: &str = "latency_distribution.csv";
pub const THROUGHPUT_SERIES_CSV: &str = "throughput_vs_validators.csv";
pub const RESOURCES_CSV: &str = "resources_vs_load.csv";

/// Resource usage summary of one instance over one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceSummary {
    pub instance: u32,
    pub role: Role,
    /// Mean utilization over the run: Δcpu_time / Δwall_time, in cores.
    pub cpu_utilization: f64,
    pub net_total_bytes: u64,
    pub peak_rss_bytes: u64,
}

/// Derives a resource summary from a samples log.
pub fn summarize_resources(samples: &[MetricsSample], role: Role) -> Option<ResourceSummary> {
    let first = samples.first()?;
    let last = samples.last()?;
    let wall_s = (last.ts - first.ts) as f64 / 1000.0;
    let cpu_utilization = if wall_s > 0.0 {
        (last.cpu_time - first.cpu_time) / wall_s
    } else {
        0.0
    };
    Some(ResourceSummary {
        instance: first.instance.get(),
        role,
        cpu_utilization,
        net_total_bytes: (last.net_in - first.net_in) + (last.net_out - first.net_out),
        peak_rss_bytes: samples.iter().map(|s| s.mem_rss).max().unwrap_or(0),
    })
}

/// One run's inputs to the report.
#[derive(Debug, Clone)]
pub struct ReportRun {
    pub run_result: RunResult,
    pub latencies_ms: Vec<Ms>,
    pub resources: Vec<ResourceSummary>,
}

/// A group of repeated runs of one setting.
#[derive(Debug, Clone)]
pub struct SettingGroup {
    pub setting: String,
    pub offered_rate: f64,
    pub n_validators: u32,
    /// Peak rate from a saturation search, when this group is a search step.
    pub peak: Option<f64>,
    pub runs: Vec<ReportRun>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Writes the full report bundle into `dir`; returns the files written.
pub fn write_report(dir: &Path, groups: &[SettingGroup]) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    std::fs::create_dir_all(dir.join("charts"))?;
    let mut written = Vec::new();

    // Aggregate table, one row per setting.
    let mut aggregate = String::from(
        "setting,offered_rate,runs,peak,mean_latency_ms,ci95_ms,confirmed,unconfirmed,saturated\n",
    );
    for group in groups {
        let results: Vec<RunResult> = group.runs.iter().map(|r| r.run_result.clone()).collect();
        if results.is_empty() {
            continue;
        }
        let agg = aggregate_runs(&results);
        let _ = writeln!(
            aggregate,
            "{},{},{},{},{:.4},{},{:.1},{:.1},{}",
            group.setting,
            group.offered_rate,
            agg.runs,
            fmt_opt(group.peak),
            agg.mean_latency_ms.mean,
            fmt_opt(agg.mean_latency_ms.ci95_half_width),
            agg.confirmed.mean,
            agg.unconfirmed.mean,
            agg.any_saturated
        );
    }
    written.push(write_file(dir.join(AGGREGATE_CSV), aggregate)?);

    // Latency distributions as a percentile grid per setting, violin-ready.
    let mut dist = String::from("setting,percentile,latency_ms\n");
    for group in groups {
        let mut pooled: Vec<f64> = group
            .runs
            .iter()
            .flat_map(|r| r.latencies_ms.iter().map(|&v| v as f64))
            .collect();
        if pooled.is_empty() {
            continue;
        }
        pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        for pct in 0..=100u32 {
            let v = if pct == 0 {
                pooled[0]
            } else {
                percentile_nearest_rank(&pooled, pct as f64)
            };
            let _ = writeln!(dist, "{},{pct},{v:.1}", group.setting);
        }
    }
    written.push(write_file(dir.join(LATENCY_DISTRIBUTION_CSV), dist)?);

    // Throughput / latency versus validator count and offered rate.
    let mut series = String::from(
        "setting,n_validators,offered_rate,confirmed_mean,mean_latency_ms,latency_ci95_ms,saturated\n",
    );
    for group in groups {
        let results: Vec<RunResult> = group.runs.iter().map(|r| r.run_result.clone()).collect();
        if results.is_empty() {
            continue;
        }
        let agg = aggregate_runs(&results);
        let _ = writeln!(
            series,
            "{},{},{},{:.1},{:.4},{},{}",
            group.setting,
            group.n_validators,
            group.offered_rate,
            agg.confirmed.mean,
            agg.mean_latency_ms.mean,
            fmt_opt(agg.mean_latency_ms.ci95_half_width),
            agg.any_saturated
        );
    }
    written.push(write_file(dir.join(THROUGHPUT_SERIES_CSV), series)?);

    // Resource usage per role versus offered load.
    let mut resources = String::from(
        "setting,offered_rate,role,instances,mean_cpu_utilization,mean_net_total_bytes\n",
    );
    for group in groups {
        for role in [Role::Validator, Role::Client] {
            let summaries: Vec<&ResourceSummary> = group
                .runs
                .iter()
                .flat_map(|r| r.resources.iter())
                .filter(|r| r.role == role)
                .collect();
            if summaries.is_empty() {
                continue;
            }
            let cpu =
                summaries.iter().map(|r| r.cpu_utilization).sum::<f64>() / summaries.len() as f64;
            let net = summaries.iter().map(|r| r.net_total_bytes).sum::<u64>() as f64
                / summaries.len() as f64;
            let _ = writeln!(
                resources,
                "{},{},{role},{},{cpu:.4},{net:.0}",
                group.setting,
                group.offered_rate,
                summaries.len()
            );
        }
    }
    written.push(write_file(dir.join(RESOURCES_CSV), resources)?);

    // Charts.
    let boxes: Vec<(String, BoxStats)> = groups
        .iter()
        .filter_map(|group| {
            let mut pooled: Vec<f64> = group
                .runs
                .iter()
                .flat_map(|r| r.latencies_ms.iter().map(|&v| v as f64))
                .collect();
            if pooled.is_empty() {
                return None;
            }
            pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            Some((
                group.setting.clone(),
                BoxStats {
                    min: pooled[0],
                    q1: percentile_nearest_rank(&pooled, 25.0),
                    median: percentile_nearest_rank(&pooled, 50.0),
                    q3: percentile_nearest_rank(&pooled, 75.0),
                    max: *pooled.last().expect("non-empty"),
                },
            ))
        })
        .collect();
    written.push(write_file(
        dir.join("charts/latency_box.svg"),
        charts::box_plot("Transaction latency distribution", "latency (ms)", &boxes),
    )?);

    let throughput_points: Vec<(f64, f64, Option<f64>)> = groups
        .iter()
        .filter(|g| !g.runs.is_empty())
        .map(|group| {
            let results: Vec<RunResult> =
                group.runs.iter().map(|r| r.run_result.clone()).collect();
            let agg = aggregate_runs(&results);
            (
                group.offered_rate,
                agg.confirmed.mean,
                agg.confirmed.ci95_half_width,
            )
        })
        .collect();
    written.push(write_file(
        dir.join("charts/throughput.svg"),
        charts::line_chart(
            "Confirmed transactions vs offered rate",
            "offered rate (tx/s)",
            "confirmed transactions",
            &[("confirmed".to_string(), throughput_points)],
        ),
    )?);

    let latency_points: Vec<(f64, f64, Option<f64>)> = groups
        .iter()
        .filter(|g| !g.runs.is_empty())
        .map(|group| {
            let results: Vec<RunResult> =
                group.runs.iter().map(|r| r.run_result.clone()).collect();
            let agg = aggregate_runs(&results);
            (
                group.offered_rate,
                agg.mean_latency_ms.mean,
                agg.mean_latency_ms.ci95_half_width,
            )
        })
        .collect();
    written.push(write_file(
        dir.join("charts/latency.svg"),
        charts::line_chart(
            "Mean latency vs offered rate",
            "offered rate (tx/s)",
            "mean latency (ms)",
            &[("mean latency".to_string(), latency_points)],
        ),
    )?);

    let mut resource_series = Vec::new();
    for role in [Role::Validator, Role::Client] {
        let points: Vec<(f64, f64, Option<f64>)> = groups
            .iter()
            .filter_map(|group| {
                let summaries: Vec<&ResourceSummary> = group
                    .runs
                    .iter()
                    .flat_map(|r| r.resources.iter())
                    .filter(|r| r.role == role)
                    .collect();
                if summaries.is_empty() {
                    return None;
                }
                let cpu = summaries.iter().map(|r| r.cpu_utilization).sum::<f64>()
                    / summaries.len() as f64;
                Some((group.offered_rate, cpu, None))
            })
            .collect();
        if !points.is_empty() {
            resource_series.push((format!("{role} cpu"), points));
        }
    }
    written.push(write_file(
        dir.join("charts/resources.svg"),
        charts::line_chart(
            "CPU utilization vs offered rate",
            "offered rate (tx/s)",
            "cpu utilization (cores)",
            &resource_series,
        ),
    )?);

    Ok(written)
}

fn write_file(path: PathBuf, contents: String) -> std::io::Result<PathBuf> {
    std::fs::write(&path, contents)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InstanceId;

    fn group(setting: &str, rate: f64, latencies: Vec<Ms>) -> SettingGroup {
        let outcomes: Vec<crate::model::TxOutcome> = latencies
            .iter()
            .enumerate()
            .map(|(i, &l)| crate::model::TxOutcome::confirmed(format!("t{i}"), 0, l))
            .collect();
        SettingGroup {
            setting: setting.to_string(),
            offered_rate: rate,
            n_validators: 4,
            peak: None,
            runs: vec![ReportRun {
                run_result: RunResult::from_outcomes(rate, &outcomes, 50),
                latencies_ms: latencies,
                resources: vec![ResourceSummary {
                    instance: 1,
                    role: Role::Validator,
                    cpu_utilization: 0.25,
                    net_total_bytes: 1000,
                    peak_rss_bytes: 1 << 20,
                }],
            }],
        }
    }

    #[test]
    fn report_bundle_is_complete_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let groups = vec![
            group("rate100", 100.0, vec![50, 150, 250, 350, 450]),
            group("rate200", 200.0, vec![60, 160, 260, 360, 460]),
        ];
        let files = write_report(dir.path(), &groups).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let aggregate = std::fs::read_to_string(dir.path().join(AGGREGATE_CSV)).unwrap();
        assert!(aggregate.starts_with(
            "setting,offered_rate,runs,peak,mean_latency_ms,ci95_ms,confirmed,unconfirmed,saturated"
        ));
        assert!(aggregate.contains("rate100,100,1,"));

        // Byte-identical on re-emission.
        let dir2 = tempfile::tempdir().unwrap();
        write_report(dir2.path(), &groups).unwrap();
        for name in [AGGREGATE_CSV, LATENCY_DISTRIBUTION_CSV, THROUGHPUT_SERIES_CSV, RESOURCES_CSV] {
            let a = std::fs::read_to_string(dir.path().join(name)).unwrap();
            let b = std::fs::read_to_string(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} must be deterministic");
        }
        let chart_a = std::fs::read_to_string(dir.path().join("charts/latency_box.svg")).unwrap();
        let chart_b = std::fs::read_to_string(dir2.path().join("charts/latency_box.svg")).unwrap();
        assert_eq!(chart_a, chart_b);
    }

    #[test]
    fn resource_summary_from_samples() {
        let mk = |ts, cpu, net_in, net_out| MetricsSample {
            instance: InstanceId::new(3).unwrap(),
            ts,
            cpu_time: cpu,
            mem_rss: 2048,
            disk_used: 0,
            net_in,
            net_out,
        };
        let samples = vec![mk(0, 1.0, 100, 50), mk(10_000, 3.5, 1100, 950)];
        let summary = summarize_resources(&samples, Role::Validator).unwrap();
        assert!((summary.cpu_utilization - 0.25).abs() < 1e-9);
        assert_eq!(summary.net_total_bytes, 1900);
        assert_eq!(summary.peak_rss_bytes, 2048);
        assert!(summarize_resources(&[], Role::Client).is_none());
    }
}
