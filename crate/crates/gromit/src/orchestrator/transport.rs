//! File sync and remote execution behind a trait so tests can stub it.
//!
//! Local mode (every host is localhost) needs no syncing and spawns
//! instances directly. Remote mode shells out to a delta-sync tool and a
//! remote shell; it is command-compatible with standard `rsync`/`ssh` and is
//! exercised here only at the command-construction level.

use std::path::{Path, PathBuf};

use async_trait::async_trait;
use thiserror::Error;

use crate::model::HostSpec;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("host {0} unreachable: {1}")]
    HostUnreachable(String, String),
    #[error("sync failed for {host}:{path}: {reason}")]
    SyncFailed {
        host: String,
        path: PathBuf,
        reason: String,
    },
    #[error("spawn on {0} failed: {1}")]
    SpawnFailed(String, String),
}

#[async_trait]
pub trait Transport: Send + Sync {
    /// Copies `local_dir` to `remote_dir` on the host.
    async fn sync_to_host(
        &self,
        host: &HostSpec,
        local_dir: &Path,
        remote_dir: &Path,
    ) -> Result<(), TransportError>;

    /// Copies `remote_dir` on the host back into `local_dir`.
    async fn fetch_from_host(
        &self,
        host: &HostSpec,
        remote_dir: &Path,
        local_dir: &Path,
    ) -> Result<(), TransportError>;
}

/// Desk-scale transport: everything lives on this machine already.
pub struct LocalTransport;

#[async_trait]
impl Transport for LocalTransport {
    async fn sync_to_host(
        &self,
        host: &HostSpec,
        _local_dir: &Path,
        _remote_dir: &Path,
    ) -> Result<(), TransportError> {
        if !host.is_local() {
            return Err(TransportError::HostUnreachable(
                host.address.clone(),
                "local transport only reaches localhost".to_string(),
            ));
        }
        Ok(())
    }

    async fn fetch_from_host(
        &self,
        host: &HostSpec,
        _remote_dir: &Path,
        _local_dir: &Path,
    ) -> Result<(), TransportError> {
        if !host.is_local() {
            return Err(TransportError::HostUnreachable(
                host.address.clone(),
                "local transport only reaches localhost".to_string(),
            ));
        }
        Ok(())
    }
}

/// Remote transport over a delta-sync tool and a remote shell.
pub struct SshTransport {
    pub rsync_program: String,
    pub ssh_program: String,
}

impl Default for SshTransport {
    fn default() -> Self {
        SshTransport {
            rsync_program: "rsync".to_string(),
            ssh_program: "ssh".to_string(),
        }
    }
}

impl SshTransport {
    pub fn sync_command(&self, host: &HostSpec, local_dir: &Path, remote_dir: &Path) -> Vec<String> {
        vec![
            self.rsync_program.clone(),
            "-az".to_string(),
            "--delete".to_string(),
            format!("{}/", local_dir.display()),
            format!("{}:{}/", host.address, remote_dir.display()),
        ]
    }

    pub fn fetch_command(&self, host: &HostSpec, remote_dir: &Path, local_dir: &Path) -> Vec<String> {
        vec![
            self.rsync_program.clone(),
            "-az".to_string(),
            format!("{}:{}/", host.address, remote_dir.display()),
            format!("{}/", local_dir.display()),
        ]
    }

    async fn run(&self, host: &HostSpec, command: Vec<String>) -> Result<(), TransportError> {
        let output = tokio::process::Command::new(&command[0])
            .args(&command[1..])
            .output()
            .await
            .map_err(|e| TransportError::HostUnreachable(host.address.clone(), e.to_string()))?;
        if !output.status.success() {
            return Err(TransportError::SyncFailed {
                host: host.address.clone(),
                path: PathBuf::from(command.last().cloned().unwrap_or_default()),
                reason: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        Ok(())
    }
}

#[async_trait]
impl Transport for SshTransport {
    async fn sync_to_host(
        &self,
        host: &HostSpec,
        local_dir: &Path,
        remote_dir: &Path,
    ) -> Result<(), TransportError> {
        self.run(host, self.sync_command(host, local_dir, remote_dir)).await
    }

    async fn fetch_from_host(
        &self,
        host: &HostSpec,
        remote_dir: &Path,
        local_dir: &Path,
    ) -> Result<(), TransportError> {
        self.run(host, self.fetch_command(host, remote_dir, local_dir)).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn local_transport_accepts_localhost_only() {
        let transport = LocalTransport;
        let local = HostSpec::local();
        transport
            .sync_to_host(&local, Path::new("/tmp/a"), Path::new("/tmp/b"))
            .await
            .unwrap();
        let remote = HostSpec {
            address: "203.0.113.7".to_string(),
            workdir: PathBuf::from("/srv"),
        };
        assert!(matches!(
            transport.sync_to_host(&remote, Path::new("/tmp/a"), Path::new("/tmp/b")).await,
            Err(TransportError::HostUnreachable(..))
        ));
    }

    #[test]
    fn ssh_transport_builds_delta_sync_commands() {
        let transport = SshTransport::default();
        let host = HostSpec {
            address: "bench@node1".to_string(),
            workdir: PathBuf::from("/srv/bench"),
        };
        let cmd = transport.sync_command(&host, Path::new("/tmp/run"), Path::new("/srv/bench/run"));
        assert_eq!(cmd[0], "rsync");
        assert!(cmd.contains(&"bench@node1:/srv/bench/run/".to_string()));
        let fetch = transport.fetch_command(&host, Path::new("/srv/bench/run"), Path::new("/tmp/run"));
        assert!(fetch[2].starts_with("bench@node1:"));
    }
}
