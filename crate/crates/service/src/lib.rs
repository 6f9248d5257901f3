//! DidYouMean service: confirmation and selection sessions over HTTP, their
//! append-only event logs, and the plumbing behind the `dym` command line.

pub mod config;
pub mod log;
pub mod server;
pub mod session;
pub mod simulate;
pub mod workbench;

pub use config::Config;
pub use session::{Session, SessionError, SessionMode};
