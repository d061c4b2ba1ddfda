//! Periodic per-instance resource sampling: CPU, memory, disk, network.
//!
//! CPU and memory come from the process filesystem; disk usage is the size of
//! the instance working directory. Network bytes are self-reported by the
//! harness's own socket layer ([`NetCounters`]), which keeps the counters
//! portable across platforms and network namespaces.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::model::{InstanceId, MetricsSample, Ms};
use crate::runtime::clock::EpochClock;

/// Shared in/out byte counters, bumped by every instrumented socket.
#[derive(Debug, Clone, Default)]
pub struct NetCounters(Arc<(AtomicU64, AtomicU64)>);

impl NetCounters {
    pub fn add_in(&self, bytes: u64) {
        self.0 .0.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn add_out(&self, bytes: u64) {
        self.0 .1.fetch_add(bytes, Ordering::Relaxed);
    }

    /// (inbound, outbound) cumulative bytes.
    pub fn read(&self) -> (u64, u64) {
        (self.0 .0.load(Ordering::Relaxed), self.0 .1.load(Ordering::Relaxed))
    }
}

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("process filesystem unavailable: {0}")]
    SampleUnavailable(String),
    #[error("io error sampling {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

/// The set of processes one instance monitors. Processes may be added as the
/// system under test spawns; dead processes contribute their last-known
/// cumulative CPU so the counters stay monotone.
#[derive(Debug, Clone)]
pub struct PidSet {
    pids: Arc<Mutex<Vec<u32>>>,
    last_cpu: Arc<Mutex<std::collections::BTreeMap<u32, f64>>>,
}

impl PidSet {
    pub fn of_self() -> Self {
        PidSet {
            pids: Arc::new(Mutex::new(vec![std::process::id()])),
            last_cpu: Arc::new(Mutex::new(Default::default())),
        }
    }

    pub fn add(&self, pid: u32) {
        self.pids.lock().unwrap().push(pid);
    }

    fn snapshot(&self) -> Vec<u32> {
        self.pids.lock().unwrap().clone()
    }
}

/// Ticks of cumulative CPU (utime + stime) for a pid, from `/proc/<pid>/stat`.
///
/// The command field is parenthesised and may contain spaces, so fields are
/// counted from the closing parenthesis.
fn read_cpu_ticks(pid: u32) -> Option<u64> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let rest = &stat[stat.rfind(')')? + 2..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // Fields after comm: state is index 0, utime index 11, stime index 12.
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some(utime + stime)
}

fn read_rss_bytes(pid: u32) -> Option<u64> {
    let status = std::fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn clock_ticks_per_sec() -> u64 {
    #[cfg(unix)]
    {
        let ticks = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
        if ticks > 0 {
            return ticks as u64;
        }
    }
    100
}

/// Recursively sums file sizes under `dir`.
pub fn dir_size_bytes(dir: &Path) -> u64 {
    let mut total = 0u64;
    let Ok(entries) = std::fs::read_dir(dir) else {
        return 0;
    };
    for entry in entries.flatten() {
        let Ok(meta) = entry.metadata() else { continue };
        if meta.is_dir() {
            total += dir_size_bytes(&entry.path());
        } else {
            total += meta.len();
        }
    }
    total
}

/// One-instance resource sampler.
pub struct Sampler {
    pub instance: InstanceId,
    pub pids: PidSet,
    pub workdir: PathBuf,
    pub net: NetCounters,
}

impl Sampler {
    /// Errors when the process filesystem is missing entirely, in which case
    /// sampling is disabled and the experiment proceeds with a warning.
    pub fn check_available() -> Result<(), TelemetryError> {
        let me = std::process::id();
        if read_cpu_ticks(me).is_none() {
            return Err(TelemetryError::SampleUnavailable(format!(
                "/proc/{me}/stat unreadable"
            )));
        }
        Ok(())
    }

    /// Takes one sample at the current instant.
    pub fn sample(&self, clock: &EpochClock) -> MetricsSample {
        let mut cpu_ticks_total = 0.0f64;
        let mut rss_total = 0u64;
        {
            let mut last = self.pids.last_cpu.lock().unwrap();
            for pid in self.pids.snapshot() {
                let secs = read_cpu_ticks(pid)
                    .map(|t| t as f64 / clock_ticks_per_sec() as f64)
                    .or_else(|| last.get(&pid).copied())
                    .unwrap_or(0.0);
                last.insert(pid, secs);
                cpu_ticks_total += secs;
                rss_total += read_rss_bytes(pid).unwrap_or(0);
            }
        }
        let (net_in, net_out) = self.net.read();
        MetricsSample {
            instance: self.instance,
            ts: clock.now_ms(),
            cpu_time: cpu_ticks_total,
            mem_rss: rss_total,
            disk_used: dir_size_bytes(&self.workdir),
            net_in,
            net_out,
        }
    }
}

pub const METRICS_CSV_HEADER: &str =
    "ts_ms,cpu_time_s,mem_rss_bytes,disk_bytes,net_in_bytes,net_out_bytes";

pub fn metrics_csv_row(s: &MetricsSample) -> String {
    let mut row = String::new();
    let _ = write!(
        row,
        "{},{:.3},{},{},{},{}",
        s.ts, s.cpu_time, s.mem_rss, s.disk_used, s.net_in, s.net_out
    );
    row
}

/// Parses a samples log written by [`monitor_loop`].
pub fn parse_metrics_csv(text: &str, instance: InstanceId) -> Vec<MetricsSample> {
    let mut samples = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            continue;
        }
        let parse = |i: usize| fields[i].parse::<u64>().unwrap_or(0);
        samples.push(MetricsSample {
            instance,
            ts: fields[0].parse::<Ms>().unwrap_or(0),
            cpu_time: fields[1].parse::<f64>().unwrap_or(0.0),
            mem_rss: parse(2),
            disk_used: parse(3),
            net_in: parse(4),
            net_out: parse(5),
        });
    }
    samples
}

/// Appends one sample per interval to `out_path` until `stop` flips.
///
/// Individual sample failures are skipped and logged; the loop itself only
/// ends on shutdown. Default interval is 1000 ms.
pub async fn monitor_loop(
    sampler: Sampler,
    clock: EpochClock,
    interval_ms: u64,
    out_path: PathBuf,
    mut stop: tokio::sync::watch::Receiver<bool>,
) {
    let mut log = String::from(METRICS_CSV_HEADER);
    log.push('\n');
    let mut ticker = tokio::time::interval(Duration::from_millis(interval_ms.max(10)));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = ticker.tick() => {
                let sample = sampler.sample(&clock);
                log.push_str(&metrics_csv_row(&sample));
                log.push('\n');
                if let Err(e) = std::fs::write(&out_path, &log) {
                    log::warn!("failed writing metrics log: {e}");
                }
            }
            _ = stop.changed() => {
                if *stop.borrow() {
                    break;
                }
            }
        }
    }
    let _ = std::fs::write(&out_path, &log);
}

/// Checks the monotonicity invariant of cumulative fields over a log.
pub fn cumulative_fields_monotone(samples: &[MetricsSample]) -> bool {
    samples.windows(2).all(|w| {
        w[1].cpu_time >= w[0].cpu_time && w[1].net_in >= w[0].net_in && w[1].net_out >= w[0].net_out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_sampler(dir: &Path) -> Sampler {
        Sampler {
            instance: InstanceId::new(1).unwrap(),
            pids: PidSet::of_self(),
            workdir: dir.to_path_buf(),
            net: NetCounters::default(),
        }
    }

    #[test]
    fn proc_sampling_is_available_here() {
        Sampler::check_available().unwrap();
    }

    #[test]
    fn idle_process_accrues_no_cpu() {
        let dir = tempfile::tempdir().unwrap();
        let sampler = test_sampler(dir.path());
        let clock = EpochClock::starting_now();
        let a = sampler.sample(&clock);
        std::thread::sleep(Duration::from_millis(300));
        let b = sampler.sample(&clock);
        // Sleeping threads burn no measurable CPU; allow scheduler noise.
        assert!(b.cpu_time - a.cpu_time < 0.25, "Δcpu = {}", b.cpu_time - a.cpu_time);
        assert!(b.ts > a.ts);
    }

    #[test]
    fn busy_loop_registers_cpu_time() {
        let dir = tempfile::tempdir().unwrap();
        let sampler = test_sampler(dir.path());
        let clock = EpochClock::starting_now();
        let before = sampler.sample(&clock);
        let start = std::time::Instant::now();
        let mut x = 0u64;
        while start.elapsed() < Duration::from_millis(1200) {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
        }
        std::hint::black_box(x);
        let after = sampler.sample(&clock);
        let delta = after.cpu_time - before.cpu_time;
        assert!((0.7..=1.8).contains(&delta), "Δcpu = {delta}");
    }

    #[test]
    fn disk_usage_tracks_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let sampler = test_sampler(dir.path());
        let clock = EpochClock::starting_now();
        let before = sampler.sample(&clock);
        std::fs::write(dir.path().join("blob.bin"), vec![0u8; 1 << 20]).unwrap();
        let after = sampler.sample(&clock);
        assert!(after.disk_used >= before.disk_used + (1 << 20));
    }

    #[test]
    fn net_counters_flow_into_samples() {
        let dir = tempfile::tempdir().unwrap();
        let sampler = test_sampler(dir.path());
        let clock = EpochClock::starting_now();
        sampler.net.add_in(100);
        sampler.net.add_out(250);
        let s = sampler.sample(&clock);
        assert_eq!((s.net_in, s.net_out), (100, 250));
    }

    #[test]
    fn metrics_csv_roundtrip_and_monotonicity() {
        let samples = vec![
            MetricsSample {
                instance: InstanceId::new(2).unwrap(),
                ts: 1000,
                cpu_time: 0.5,
                mem_rss: 4096,
                disk_used: 10,
                net_in: 1,
                net_out: 2,
            },
            MetricsSample {
                instance: InstanceId::new(2).unwrap(),
                ts: 2000,
                cpu_time: 0.75,
                mem_rss: 4096,
                disk_used: 10,
                net_in: 5,
                net_out: 6,
            },
        ];
        let mut text = String::from(METRICS_CSV_HEADER);
        text.push('\n');
        for s in &samples {
            text.push_str(&metrics_csv_row(s));
            text.push('\n');
        }
        let parsed = parse_metrics_csv(&text, InstanceId::new(2).unwrap());
        assert_eq!(parsed.len(), 2);
        assert!(cumulative_fields_monotone(&parsed));
        let mut broken = parsed.clone();
        broken[1].net_in = 0;
        assert!(!cumulative_fields_monotone(&broken));
    }
}
