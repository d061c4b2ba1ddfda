//! The per-instance runtime: scenario scheduling plumbing (shared epoch
//! clock), the message broker, system-under-test subprocess control, and the
//! instance agent binary entry point.

pub mod agent;
pub mod broker;
pub mod clock;
pub mod subproc;
pub mod wire;

pub use agent::{run_instance, AgentError, InstanceArgs};
pub use subproc::{StopReport, SutProcess};
