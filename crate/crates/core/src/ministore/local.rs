//! In-process deployment: every service runs on threads of the current
//! process. Used by tests and benchmarks that exercise the data path
//! without spawning daemons.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::client::{Client, ClientConfig};
use super::server::{start_service, RunningService, SOCKET_DIR_KEY};
use super::{Endpoint, Result};
use crate::planner::{ServiceConfig, ServiceKind};

#[derive(Debug, Clone)]
pub struct LocalClusterSpec {
    pub metas: usize,
    pub targets: usize,
    pub stripe_size: u64,
    pub target_capacity: u64,
    pub use_xattr: bool,
}

impl LocalClusterSpec {
    pub fn new(metas: usize, targets: usize, stripe_size: u64) -> Self {
        LocalClusterSpec {
            metas,
            targets,
            stripe_size,
            target_capacity: u64::MAX,
            use_xattr: true,
        }
    }
}

pub struct LocalCluster {
    root: PathBuf,
    socket_dir: PathBuf,
    mgmt: Endpoint,
    stripe_size: u64,
    services: Vec<RunningService>,
    target_dirs: Vec<(String, PathBuf)>,
}

impl LocalCluster {
    pub fn start(root: &Path, metas: usize, targets: usize, stripe_size: u64) -> Result<Self> {
        Self::start_with(root, &LocalClusterSpec::new(metas, targets, stripe_size))
    }

    pub fn start_with(root: &Path, spec: &LocalClusterSpec) -> Result<Self> {
        let socket_dir = root.join("sockets");
        std::fs::create_dir_all(&socket_dir).map_err(|e| super::StoreError::io("creating socket dir", e))?;
        let mgmt = Endpoint::new("local", 1);
        let cfg = |service: ServiceKind, id: String, port: u16, dir: PathBuf| {
            let mut options = BTreeMap::new();
            options.insert(SOCKET_DIR_KEY.to_string(), socket_dir.display().to_string());
            ServiceConfig {
                id,
                service,
                node: "local".into(),
                address: "local".into(),
                listen_port: port,
                mgmt_address: mgmt.host.clone(),
                mgmt_port: mgmt.port,
                data_dir: dir,
                stripe_size: spec.stripe_size,
                use_xattr: spec.use_xattr,
                options,
            }
        };
        let mut cluster = LocalCluster {
            root: root.to_path_buf(),
            socket_dir: socket_dir.clone(),
            mgmt: mgmt.clone(),
            stripe_size: spec.stripe_size,
            services: Vec::new(),
            target_dirs: Vec::new(),
        };
        cluster.services.push(start_service(&cfg(
            ServiceKind::Management,
            "mgmt".into(),
            1,
            root.join("mgmt"),
        ))?);
        for m in 0..spec.metas {
            let mut c = cfg(
                ServiceKind::Metadata,
                format!("meta{m}"),
                100 + m as u16,
                root.join(format!("meta{m}")),
            );
            c.options.insert("meta_index".into(), m.to_string());
            cluster.services.push(start_service(&c)?);
        }
        for t in 0..spec.targets {
            let dir = root.join(format!("target{t}"));
            let mut c = cfg(ServiceKind::Storage, format!("target{t}"), 200 + t as u16, dir.clone());
            c.options.insert("target_index".into(), t.to_string());
            c.options
                .insert("capacity_bytes".into(), spec.target_capacity.to_string());
            cluster.services.push(start_service(&c)?);
            cluster.target_dirs.push((c.id, dir));
        }
        Ok(cluster)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            mgmt: self.mgmt.clone(),
            socket_dir: self.socket_dir.clone(),
            stripe_size: self.stripe_size,
        }
    }

    pub fn client(&self) -> Result<Client> {
        Client::connect(&self.client_config())
    }

    /// `(target id, data dir)` per storage target, in target order.
    pub fn target_dirs(&self) -> &[(String, PathBuf)] {
        &self.target_dirs
    }

    /// Stop one service by id, e.g. to simulate a failed target.
    pub fn stop_service(&mut self, id: &str) -> bool {
        match self.services.iter_mut().find(|s| s.id == id) {
            Some(s) => {
                s.shutdown();
                true
            }
            None => false,
        }
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        for s in self.services.iter_mut().rev() {
            s.shutdown();
        }
    }
}
