//! Spawning and stopping system-under-test subprocesses.

use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use thiserror::Error;
use tokio::process::{Child, Command};

#[derive(Debug, Error)]
pub enum SubprocError {
    #[error("failed to spawn `{0}`: {1}")]
    Spawn(String, std::io::Error),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

/// How a managed subprocess was brought down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopReport {
    /// True when the deadline expired and the process had to be killed.
    pub forced: bool,
    pub waited_ms: u64,
}

impl StopReport {
    pub fn noop() -> Self {
        StopReport {
            forced: false,
            waited_ms: 0,
        }
    }
}

/// A system-under-test subprocess owned by the instance agent.
pub struct SutProcess {
    name: String,
    child: Option<Child>,
    pid: Option<u32>,
}

impl SutProcess {
    pub async fn spawn(
        name: &str,
        program: &str,
        args: &[String],
        workdir: &Path,
        stdout_path: &Path,
        stderr_path: &Path,
    ) -> Result<SutProcess, SubprocError> {
        let stdout = std::fs::File::create(stdout_path)
            .map_err(|e| SubprocError::Io(stdout_path.to_path_buf(), e))?;
        let stderr = std::fs::File::create(stderr_path)
            .map_err(|e| SubprocError::Io(stderr_path.to_path_buf(), e))?;
        let child = Command::new(program)
            .args(args)
            .current_dir(workdir)
            .stdin(Stdio::null())
            .stdout(Stdio::from(stdout))
            .stderr(Stdio::from(stderr))
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| SubprocError::Spawn(program.to_string(), e))?;
        let pid = child.id();
        Ok(SutProcess {
            name: name.to_string(),
            child: Some(child),
            pid,
        })
    }

    pub fn pid(&self) -> Option<u32> {
        self.pid
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Asks the process to terminate, escalating to a kill at the deadline.
    ///
    /// Best effort and always completes: a never-started or already-reaped
    /// process yields a no-op report.
    pub async fn graceful_stop(&mut self, deadline: Duration) -> StopReport {
        let Some(mut child) = self.child.take() else {
            return StopReport::noop();
        };
        if child.try_wait().ok().flatten().is_some() {
            return StopReport::noop();
        }
        let started = std::time::Instant::now();
        #[cfg(unix)]
        if let Some(pid) = child.id() {
            unsafe {
                libc::kill(pid as i32, libc::SIGTERM);
            }
        }
        let forced = match tokio::time::timeout(deadline, child.wait()).await {
            Ok(_) => false,
            Err(_) => {
                let _ = child.start_kill();
                let _ = child.wait().await;
                true
            }
        };
        StopReport {
            forced,
            waited_ms: started.elapsed().as_millis() as u64,
        }
    }

    /// True while the process has not been waited on.
    pub fn is_running(&mut self) -> bool {
        match self.child.as_mut() {
            Some(child) => matches!(child.try_wait(), Ok(None)),
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    async fn spawn_sh(dir: &Path, name: &str, script: &str) -> SutProcess {
        SutProcess::spawn(
            name,
            "/bin/sh",
            &["-c".to_string(), script.to_string()],
            dir,
            &dir.join(format!("{name}.out")),
            &dir.join(format!("{name}.err")),
        )
        .await
        .unwrap()
    }

    #[tokio::test]
    async fn cooperative_process_stops_without_force() {
        let dir = tempfile::tempdir().unwrap();
        // Exits promptly on SIGTERM.
        let mut proc = spawn_sh(dir.path(), "coop", "sleep 30").await;
        assert!(proc.is_running());
        let report = proc.graceful_stop(Duration::from_secs(10)).await;
        assert!(!report.forced);
        assert!(report.waited_ms < 5_000);
        assert!(!proc.is_running());
    }

    #[tokio::test]
    async fn hung_process_is_killed_at_deadline() {
        let dir = tempfile::tempdir().unwrap();
        // Ignores SIGTERM: the stop must escalate to SIGKILL.
        let mut proc = spawn_sh(dir.path(), "hung", "trap '' TERM; sleep 300").await;
        tokio::time::sleep(Duration::from_millis(100)).await;
        let report = proc.graceful_stop(Duration::from_secs(2)).await;
        assert!(report.forced);
        assert!(
            (1_500..10_000).contains(&report.waited_ms),
            "waited {} ms",
            report.waited_ms
        );
        assert!(!proc.is_running());
    }

    #[tokio::test]
    async fn stopping_twice_is_a_noop() {
        let dir = tempfile::tempdir().unwrap();
        let mut proc = spawn_sh(dir.path(), "twice", "sleep 30").await;
        let first = proc.graceful_stop(Duration::from_secs(5)).await;
        assert!(!first.forced);
        let second = proc.graceful_stop(Duration::from_secs(5)).await;
        assert_eq!(second, StopReport::noop());
    }
}
