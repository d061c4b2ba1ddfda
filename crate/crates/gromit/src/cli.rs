//! Command-line entry points: `run`, `search`, `report`, `netem`, and the
//! hidden `instance` subcommand the orchestrator spawns per instance.
//!
//! Flag precedence: command-line overrides (`--set key=value`) beat config
//! file keys, which beat defaults. `GROMIT_RESULTS_DIR` overrides the default
//! results root but yields to an explicit `--results-dir`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::adapter::{random_topology, AdapterRegistry};
use crate::analysis::report::{write_report, ReportRun, SettingGroup};
use crate::analysis::{saturation_monotone, saturation_search, RunResult};
use crate::model::ExperimentConfig;
use crate::netshape::{assign_cities, emit_netem_script, LatencyMatrix, MatrixError, PlacementRow};
use crate::orchestrator::{
    self, fresh_run_dir, plan_placements, run_experiment, standard_scenario, LaunchOptions,
    RunAnalysis,
};
use crate::runtime::{run_instance, InstanceArgs};
use crate::scenario::parse_scenario;

const EXIT_OK: u8 = 0;
const EXIT_EXPERIMENT: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "gromit",
    version,
    about = "Benchmarking harness for transaction fabrics",
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run one experiment from a config file and a scenario file
    Run {
        /// Experiment config (`key = value` lines)
        #[arg(short = 'c', long)]
        config: PathBuf,
        /// Scenario file driving the experiment
        #[arg(short = 's', long)]
        scenario: PathBuf,
        /// Print the deployment plan and exit without launching anything
        #[arg(long)]
        dry_run: bool,
        /// Results root; overrides GROMIT_RESULTS_DIR and the config key
        #[arg(long)]
        results_dir: Option<PathBuf>,
        /// Override a config key, e.g. --set tx_rate=200 (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Label used in run directory names
        #[arg(long, default_value = "run")]
        label: String,
    },
    /// Find peak throughput by stepping the offered rate until saturation
    Search {
        #[arg(short = 'c', long)]
        config: PathBuf,
        /// Rate increment per step, tx/s
        #[arg(long, default_value_t = 100.0)]
        step: f64,
        /// Stop searching past this offered rate
        #[arg(long, default_value_t = 1000.0)]
        max_rate: f64,
        #[arg(long)]
        results_dir: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Regenerate the report bundle from collected run directories
    Report {
        /// Run directories (or parents of run directories)
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write the report bundle
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a delay-installation shell script from a city RTT matrix
    Netem {
        #[arg(short = 'c', long)]
        config: PathBuf,
        /// Latency matrix CSV (first row and column are city names)
        #[arg(short = 'm', long)]
        matrix: PathBuf,
        /// Output script path
        #[arg(long)]
        out: PathBuf,
        /// Network device the script configures
        #[arg(long, default_value = "eth0")]
        device: String,
    },
    /// Internal: run one instance agent (spawned by the orchestrator)
    #[command(hide = true)]
    Instance {
        #[arg(long)]
        id: u32,
        #[arg(long)]
        role: String,
        #[arg(long)]
        broker: String,
        #[arg(long)]
        epoch_ms: i64,
        #[arg(long)]
        run_dir: PathBuf,
    },
}

pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version with success, usage errors with 2.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let code = match cli.command {
        Command::Run {
            config,
            scenario,
            dry_run,
            results_dir,
            overrides,
            label,
        } => cmd_run(&config, &scenario, dry_run, results_dir.as_deref(), &overrides, &label),
        Command::Search {
            config,
            step,
            max_rate,
            results_dir,
            overrides,
        } => cmd_search(&config, step, max_rate, results_dir.as_deref(), &overrides),
        Command::Report { dirs, out } => cmd_report(&dirs, out.as_deref()),
        Command::Netem {
            config,
            matrix,
            out,
            device,
        } => cmd_netem(&config, &matrix, &out, &device),
        Command::Instance {
            id,
            role,
            broker,
            epoch_ms,
            run_dir,
        } => cmd_instance(id, &role, &broker, epoch_ms, run_dir),
    };
    ExitCode::from(code)
}

fn load_config(
    path: &Path,
    overrides: &[String],
    results_dir: Option<&Path>,
) -> Result<ExperimentConfig, u8> {
    if !path.exists() {
        eprintln!("config file not found: {}", path.display());
        return Err(EXIT_USAGE);
    }
    let mut config = ExperimentConfig::parse_file(path).map_err(|e| {
        eprintln!("{e}");
        EXIT_USAGE
    })?;
    for pair in overrides {
        let Some((key, value)) = pair.split_once('=') else {
            eprintln!("--set expects KEY=VALUE, got `{pair}`");
            return Err(EXIT_USAGE);
        };
        config.apply(key.trim(), value.trim()).map_err(|e| {
            eprintln!("--set {pair}: {e}");
            EXIT_USAGE
        })?;
    }
    if let Ok(dir) = std::env::var("GROMIT_RESULTS_DIR") {
        if !dir.is_empty() {
            config.results_dir = PathBuf::from(dir);
        }
    }
    if let Some(dir) = results_dir {
        config.results_dir = dir.to_path_buf();
    }
    config.validate().map_err(|e| {
        eprintln!("{e}");
        EXIT_USAGE
    })?;
    Ok(config)
}

fn multi_thread_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("tokio runtime")
}

fn print_run_line(analysis: &RunAnalysis) {
    let r = &analysis.run_result;
    println!(
        "run: rate={} confirmed={} unconfirmed={} rejected={} saturated={} mean_latency_ms={:.2}",
        r.offered_rate, r.confirmed, r.unconfirmed, r.rejected, r.saturated, r.latency.mean_ms
    );
    if !analysis.conservation_ok {
        println!("warning: balance conservation check failed");
    }
    if !analysis.chains_consistent {
        println!("warning: validator chains disagree");
    }
    for w in &analysis.warnings {
        println!("warning: {w}");
    }
}

fn cmd_run(
    config_path: &Path,
    scenario_path: &Path,
    dry_run: bool,
    results_dir: Option<&Path>,
    overrides: &[String],
    label: &str,
) -> u8 {
    let config = match load_config(config_path, overrides, results_dir) {
        Ok(config) => config,
        Err(code) => return code,
    };
    if !scenario_path.exists() {
        eprintln!("scenario file not found: {}", scenario_path.display());
        return EXIT_USAGE;
    }
    let scenario_text = match std::fs::read_to_string(scenario_path) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("cannot read scenario: {e}");
            return EXIT_USAGE;
        }
    };
    let scenario = match parse_scenario(&scenario_text) {
        Ok(scenario) => scenario,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    for unknown in scenario.unknown_actions(&crate::adapter::scenario_action_vocabulary()) {
        println!("warning: scenario uses unregistered action `{unknown}`");
    }

    if dry_run {
        let placements = plan_placements(&config);
        let degree = config.topology_degree.min(config.n_validators.saturating_sub(1));
        match random_topology(config.n_validators, degree, config.rng_seed) {
            Ok(topology) => {
                println!("dry run; nothing will be launched");
                println!("instances: {}", placements.len());
                for p in &placements {
                    println!(
                        "  instance {:>3}  {:<9} host {}",
                        p.instance.to_string(),
                        p.role.to_string(),
                        config.hosts[p.host_idx].address
                    );
                }
                println!("topology edges: {}", topology.edges.len());
                println!(
                    "scenario: {} actions, stop at @{}",
                    scenario.actions.len(),
                    scenario.stop_offset().unwrap_or(0.0)
                );
                return EXIT_OK;
            }
            Err(e) => {
                eprintln!("{e}");
                return EXIT_EXPERIMENT;
            }
        }
    }

    let rt = multi_thread_runtime();
    let registry = AdapterRegistry::builtin();
    let options = LaunchOptions::with_current_exe();
    let mut results: Vec<RunResult> = Vec::new();
    let mut groups_runs: Vec<ReportRun> = Vec::new();
    for rep in 1..=config.repetitions {
        let run_dir = fresh_run_dir(&config.results_dir, &format!("{label}-rep{rep}"));
        println!("run-dir: {}", run_dir.display());
        match rt.block_on(run_experiment(&config, &scenario, run_dir, &options, &registry)) {
            Ok(outcome) => {
                print_run_line(&outcome.analysis);
                if !outcome.clean_exit {
                    println!("warning: some instances exited uncleanly");
                }
                results.push(outcome.analysis.run_result.clone());
                groups_runs.push(ReportRun {
                    run_result: outcome.analysis.run_result,
                    latencies_ms: outcome.analysis.latencies_ms,
                    resources: outcome.analysis.resources,
                });
            }
            Err(e) => {
                eprintln!("experiment failed: {e}");
                return EXIT_EXPERIMENT;
            }
        }
    }

    if results.len() > 1 {
        let agg = crate::analysis::aggregate_runs(&results);
        println!(
            "aggregate: rate={} runs={} mean_latency_ms={:.2} ci95_ms={} saturated={}",
            agg.offered_rate,
            agg.runs,
            agg.mean_latency_ms.mean,
            agg.mean_latency_ms
                .ci95_half_width
                .map(|v| format!("{v:.2}"))
                .unwrap_or_default(),
            agg.any_saturated
        );
    }

    let report_dir = fresh_run_dir(&config.results_dir, &format!("{label}-report"));
    let group = SettingGroup {
        setting: format!("rate{}", config.tx_rate),
        offered_rate: config.tx_rate,
        n_validators: config.n_validators,
        peak: None,
        runs: groups_runs,
    };
    match write_report(&report_dir, &[group]) {
        Ok(_) => println!("report-dir: {}", report_dir.display()),
        Err(e) => {
            eprintln!("report emission failed: {e}");
            return EXIT_EXPERIMENT;
        }
    }
    EXIT_OK
}

fn cmd_search(
    config_path: &Path,
    step: f64,
    max_rate: f64,
    results_dir: Option<&Path>,
    overrides: &[String],
) -> u8 {
    if step <= 0.0 || max_rate < step {
        eprintln!("--step must be positive and --max-rate at least one step");
        return EXIT_USAGE;
    }
    let config = match load_config(config_path, overrides, results_dir) {
        Ok(config) => config,
        Err(code) => return code,
    };
    let rt = multi_thread_runtime();
    let registry = AdapterRegistry::builtin();
    let options = LaunchOptions::with_current_exe();
    let search_dir = fresh_run_dir(&config.results_dir, &format!("search-step{step}"));
    if let Err(e) = std::fs::create_dir_all(&search_dir) {
        eprintln!("cannot create {}: {e}", search_dir.display());
        return EXIT_EXPERIMENT;
    }
    println!("search-dir: {}", search_dir.display());

    let mut groups: Vec<SettingGroup> = Vec::new();
    let outcome = saturation_search(step, max_rate, |rate| {
        let mut step_config = config.clone();
        step_config.tx_rate = rate;
        let scenario = standard_scenario(&step_config);
        let run_dir = search_dir.join(format!("rate{rate}"));
        println!("run-dir: {}", run_dir.display());
        rt.block_on(run_experiment(&step_config, &scenario, run_dir, &options, &registry))
            .map(|outcome| {
                print_run_line(&outcome.analysis);
                groups.push(SettingGroup {
                    setting: format!("rate{rate}"),
                    offered_rate: rate,
                    n_validators: step_config.n_validators,
                    peak: None,
                    runs: vec![ReportRun {
                        run_result: outcome.analysis.run_result.clone(),
                        latencies_ms: outcome.analysis.latencies_ms,
                        resources: outcome.analysis.resources,
                    }],
                });
                outcome.analysis.run_result
            })
            .map_err(|e| e.to_string())
    });

    use std::fmt::Write as _;
    let mut summary = String::from("rate,confirmed,unconfirmed,rejected,saturated,mean_latency_ms\n");
    for step_result in &outcome.steps {
        let r = &step_result.result;
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{:.2}",
            step_result.rate, r.confirmed, r.unconfirmed, r.rejected, r.saturated, r.latency.mean_ms
        );
        if let Some(w) = &step_result.warning {
            println!("warning: {w}");
        }
    }
    let _ = std::fs::write(search_dir.join("search_summary.csv"), summary);
    if !saturation_monotone(&outcome.steps) {
        println!("warning: saturation was not monotone across steps; infrastructure may be flaky");
    }
    if outcome.hit_max_rate {
        println!("not saturated within bounds (max rate {max_rate} tx/s reached)");
    }
    for group in &mut groups {
        group.peak = Some(outcome.peak);
    }
    let _ = write_report(&search_dir.join("report"), &groups);
    println!("peak: {}", outcome.peak);
    EXIT_OK
}

fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> u8 {
    let mut run_dirs: Vec<PathBuf> = Vec::new();
    for dir in dirs {
        if !dir.exists() {
            eprintln!("no such directory: {}", dir.display());
            return EXIT_USAGE;
        }
        if dir.join(orchestrator::CONFIG_SNAPSHOT_FILE).exists() {
            run_dirs.push(dir.clone());
            continue;
        }
        let Ok(entries) = std::fs::read_dir(dir) else {
            eprintln!("cannot read {}", dir.display());
            return EXIT_USAGE;
        };
        let mut found = Vec::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if path.join(orchestrator::CONFIG_SNAPSHOT_FILE).exists() {
                found.push(path);
            }
        }
        found.sort();
        run_dirs.extend(found);
    }
    if run_dirs.is_empty() {
        eprintln!("no run directories found under the given paths");
        return EXIT_USAGE;
    }

    let registry = AdapterRegistry::builtin();
    let mut by_setting: std::collections::BTreeMap<String, SettingGroup> = Default::default();
    for run_dir in &run_dirs {
        let indexed = match orchestrator::index_run_dir(run_dir) {
            Ok(indexed) => indexed,
            Err(e) => {
                eprintln!("{e}");
                return EXIT_EXPERIMENT;
            }
        };
        if !indexed.bundle.missing.is_empty() {
            eprintln!(
                "missing artifacts in {}: instances {:?}",
                run_dir.display(),
                indexed.bundle.missing
            );
            return EXIT_EXPERIMENT;
        }
        let analysis = match orchestrator::analyze_run(
            &indexed.bundle,
            &indexed.config,
            &indexed.genesis,
            &registry,
        ) {
            Ok(analysis) => analysis,
            Err(e) => {
                eprintln!("analysis of {} failed: {e}", run_dir.display());
                return EXIT_EXPERIMENT;
            }
        };
        let setting = format!("rate{}", indexed.config.tx_rate);
        let entry = by_setting.entry(setting.clone()).or_insert_with(|| SettingGroup {
            setting,
            offered_rate: indexed.config.tx_rate,
            n_validators: indexed.config.n_validators,
            peak: None,
            runs: Vec::new(),
        });
        entry.runs.push(ReportRun {
            run_result: analysis.run_result.clone(),
            latencies_ms: analysis.latencies_ms,
            resources: analysis.resources,
        });
    }
    let groups: Vec<SettingGroup> = by_setting.into_values().collect();
    let report_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dirs[0].join("report"));
    match write_report(&report_dir, &groups) {
        Ok(files) => {
            println!("report-dir: {}", report_dir.display());
            for f in files {
                println!("report-file: {}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("report emission failed: {e}");
            EXIT_EXPERIMENT
        }
    }
}

fn cmd_netem(config_path: &Path, matrix_path: &Path, out: &Path, device: &str) -> u8 {
    let config = match load_config(config_path, &[], None) {
        Ok(config) => config,
        Err(code) => return code,
    };
    if !matrix_path.exists() {
        eprintln!("matrix file not found: {}", matrix_path.display());
        return EXIT_USAGE;
    }
    let matrix = match LatencyMatrix::load(matrix_path) {
        Ok(matrix) => matrix,
        Err(MatrixError::Io(path, e)) => {
            eprintln!("cannot read {}: {e}", path.display());
            return EXIT_USAGE;
        }
        Err(e) => {
            eprintln!("{e}");
            return EXIT_EXPERIMENT;
        }
    };
    let mapping = assign_cities(config.n_validators, &matrix);
    let placements: Vec<PlacementRow> = plan_placements(&config)
        .into_iter()
        .filter(|p| p.role == crate::model::Role::Validator)
        .map(|p| PlacementRow {
            validator: p.instance,
            host_address: config.hosts[p.host_idx].address.clone(),
        })
        .collect();
    let script = emit_netem_script(&mapping, &matrix, &placements, device);
    if let Err(e) = std::fs::write(out, script) {
        eprintln!("cannot write {}: {e}", out.display());
        return EXIT_EXPERIMENT;
    }
    println!("netem-script: {}", out.display());
    EXIT_OK
}

fn cmd_instance(id: u32, role: &str, broker: &str, epoch_ms: i64, run_dir: PathBuf) -> u8 {
    let role = match role.parse() {
        Ok(role) => role,
        Err(_) => {
            eprintln!("--role must be `validator` or `client`");
            return EXIT_USAGE;
        }
    };
    let broker = match broker.parse() {
        Ok(addr) => addr,
        Err(e) => {
            eprintln!("--broker must be a socket address: {e}");
            return EXIT_USAGE;
        }
    };
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    match rt.block_on(run_instance(InstanceArgs {
        id,
        role,
        broker,
        epoch_unix_ms: epoch_ms,
        run_dir,
    })) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("instance {id} failed: {e}");
            EXIT_EXPERIMENT
        }
    }
}
