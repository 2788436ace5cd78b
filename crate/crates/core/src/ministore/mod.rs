//! A small user-space striped data manager.
//!
//! Four daemon kinds cooperate, mirroring a classic parallel file system:
//!
//! * **management** keeps the registry of live services and hands it to
//!   clients; every other daemon registers with it once its socket is bound,
//! * **metadata** services own the namespace, sharded by the hash of each
//!   entry's parent directory,
//! * **storage** targets hold fixed-size chunks as `<data_dir>/chunks/<file_id>.<chunk_index>`,
//! * **monitoring** samples target usage into its data directory.
//!
//! All traffic uses the framed protocol in [`wire`] over Unix stream sockets,
//! one socket per `(host, port)` endpoint inside a shared socket directory.
//! Clients talk to storage targets directly; metadata services never touch
//! chunk data.

pub mod client;
pub mod local;
pub mod namespace;
pub mod server;
pub mod stripe;
pub mod target;
pub mod wire;

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{Client, ClientConfig, StripePolicy};
pub use local::LocalCluster;
pub use namespace::{Entry, FileMeta};
pub use stripe::StripeMap;
pub use wire::{RegistryEntry, Snapshot, TargetStats};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{0}: no such file or directory")]
    NotFound(String),
    #[error("{0}: already exists")]
    Exists(String),
    #[error("{0}: parent directory does not exist")]
    ParentMissing(String),
    #[error("{0}: not a directory")]
    NotADirectory(String),
    #[error("{0}: is a directory")]
    IsADirectory(String),
    #[error("{0}: directory not empty")]
    NotEmpty(String),
    #[error("invalid path `{0}`")]
    InvalidPath(String),
    #[error("storage target {target}: {reason}")]
    TargetDown { target: String, reason: String },
    #[error("storage target {0} is out of space")]
    NoSpace(String),
    #[error("management service at {endpoint} unreachable: {reason}")]
    Unreachable { endpoint: String, reason: String },
    #[error("service `{0}` is already registered")]
    Duplicate(String),
    #[error("no {0} services registered")]
    NoServices(&'static str),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("remote error: {0}")]
    Remote(String),
}

impl StoreError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        StoreError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Logical network address of a service. On a single host every endpoint
/// maps to a socket file named `<host>-<port>.sock`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Endpoint {
            host: host.into(),
            port,
        }
    }

    pub fn socket_path(&self, socket_dir: &Path) -> PathBuf {
        socket_dir.join(format!("{}-{}.sock", self.host, self.port))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}
