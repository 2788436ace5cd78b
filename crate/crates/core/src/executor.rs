//! Deployment lifecycle: launch the planned services tier by tier, wait for
//! each tier to register with management, attach clients, copy data in and
//! out, and tear everything down again with the disks scrubbed.
//!
//! The local backend runs one daemon process per service and simulates each
//! (node, disk) pair with a directory under the working root:
//!
//! ```text
//! <root>/disks/<node>/<disk>    data of every service placed on that disk
//! <root>/configs/<node>/*.conf  launch configs (data_dir remapped)
//! <root>/run/sockets            service sockets
//! <root>/logs/<service>.log     daemon stdout/stderr
//! <root>/clients/<node>         attach point with client.conf
//! ```
//!
//! The emit backend only writes configs and an ordered `launch.manifest`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::NodeSpec;
use crate::ministore::client::request;
use crate::ministore::server::SOCKET_DIR_KEY;
use crate::ministore::wire::{op, Decoder, Snapshot};
use crate::ministore::{Client, ClientConfig, Endpoint, Entry, StoreError};
use crate::planner::{render_configs, DeploymentPlan, ServiceConfig, ServiceKind};

pub const ROOT_ENV: &str = "EPHEMSTORE_ROOT";
pub const HANDLE_FILE: &str = "handle.json";
pub const MANIFEST_FILE: &str = "launch.manifest";
pub const CLIENT_CONF: &str = "client.conf";

const HEALTH_TIMEOUT: Duration = Duration::from_secs(20);
const SHUTDOWN_TIMEOUT: Duration = Duration::from_secs(2);
const EXIT_TIMEOUT: Duration = Duration::from_secs(5);
const POLL: Duration = Duration::from_millis(10);
/// Longest socket path accepted by `sockaddr_un`, minus the terminator.
const MAX_SOCKET_PATH: usize = 107;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("working root {path}: {source}")]
    WorkingRoot {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("port collision: {endpoint} is already served ({detail})")]
    PortCollision { endpoint: String, detail: String },
    #[error("service {service} failed to start: {reason}")]
    ServiceFailed {
        service: String,
        reason: String,
        handle: Box<DeploymentHandle>,
    },
    #[error("services are not all running ({0})")]
    NotRunning(String),
    #[error("compute node {0} is already attached")]
    DuplicateAttach(String),
    #[error("stage source {0} does not exist")]
    SourceMissing(String),
    #[error("the {0} backend does not run services")]
    Backend(&'static str),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

fn ioerr(context: impl Into<String>) -> impl FnOnce(io::Error) -> ExecError {
    let context = context.into();
    move |source| ExecError::Io { context, source }
}

pub type Result<T> = std::result::Result<T, ExecError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Daemon processes on this host.
    Local,
    /// Configs and a launch manifest for an external launcher.
    Emit,
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "local" | "local_process" => Ok(Backend::Local),
            "emit" | "external_emit" => Ok(Backend::Emit),
            other => Err(format!("unknown backend `{other}` (expected local or emit)")),
        }
    }
}

/// Program and leading arguments used to start one daemon; the config path
/// is appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaemonCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl DaemonCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        DaemonCommand {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeExecutor {
    pub backend: Backend,
    pub working_root: PathBuf,
    pub daemon: DaemonCommand,
}

/// `EPHEMSTORE_ROOT` wins over the default when set and non-empty.
pub fn resolve_working_root(default: &Path, env: Option<&str>) -> PathBuf {
    match env {
        Some(v) if !v.trim().is_empty() => PathBuf::from(v),
        _ => default.to_path_buf(),
    }
}

impl NodeExecutor {
    pub fn new(backend: Backend, working_root: impl Into<PathBuf>, daemon: DaemonCommand) -> Self {
        NodeExecutor {
            backend,
            working_root: working_root.into(),
            daemon,
        }
    }

    /// Like [`new`](Self::new) with the working root overridable through the
    /// environment.
    pub fn from_env(backend: Backend, default_root: &Path, daemon: DaemonCommand) -> Self {
        let env = std::env::var(ROOT_ENV).ok();
        Self::new(backend, resolve_working_root(default_root, env.as_deref()), daemon)
    }

    pub fn socket_dir(&self) -> PathBuf {
        self.working_root.join("run").join("sockets")
    }

    pub fn disk_dir(&self, node: &str, disk: &str) -> PathBuf {
        self.working_root.join("disks").join(node).join(disk)
    }

    pub fn configs_dir(&self) -> PathBuf {
        self.working_root.join("configs")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.working_root.join("logs")
    }

    pub fn clients_dir(&self) -> PathBuf {
        self.working_root.join("clients")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceState {
    Pending,
    Running,
    Failed,
    Stopped,
}

impl std::fmt::Display for ServiceState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ServiceState::Pending => "pending",
            ServiceState::Running => "running",
            ServiceState::Failed => "failed",
            ServiceState::Stopped => "stopped",
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DeploymentHandle {
    pub plan: DeploymentPlan,
    pub executor: NodeExecutor,
    pub service_states: BTreeMap<String, ServiceState>,
    pub pids: BTreeMap<String, u32>,
    /// Launch config actually handed to each daemon.
    pub launch_configs: BTreeMap<String, PathBuf>,
    /// `node:disk` to its directory.
    pub disk_dirs: BTreeMap<String, PathBuf>,
    pub client_mounts: BTreeMap<String, PathBuf>,
    /// Seconds per phase: `deploy` and one entry per tier.
    pub timings: BTreeMap<String, f64>,
    pub torn_down: bool,
    #[serde(skip)]
    children: HashMap<String, Child>,
}

impl DeploymentHandle {
    fn new(plan: &DeploymentPlan, exec: &NodeExecutor) -> Self {
        let service_states = plan
            .services
            .iter()
            .filter(|s| s.service != ServiceKind::Client)
            .map(|s| (s.id.clone(), ServiceState::Pending))
            .collect();
        DeploymentHandle {
            plan: plan.clone(),
            executor: exec.clone(),
            service_states,
            pids: BTreeMap::new(),
            launch_configs: BTreeMap::new(),
            disk_dirs: BTreeMap::new(),
            client_mounts: BTreeMap::new(),
            timings: BTreeMap::new(),
            torn_down: false,
            children: HashMap::new(),
        }
    }

    pub fn all_running(&self) -> bool {
        !self.service_states.is_empty() && self.service_states.values().all(|s| *s == ServiceState::Running)
    }

    pub fn state(&self, id: &str) -> Option<ServiceState> {
        self.service_states.get(id).copied()
    }

    pub fn client_config(&self) -> ClientConfig {
        let m = self.plan.management();
        ClientConfig {
            mgmt: Endpoint::new(m.address.clone(), m.mgmt_port),
            socket_dir: self.executor.socket_dir(),
            stripe_size: self.plan.policy.stripe_size_bytes,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = serde_json::to_string_pretty(self).map_err(|e| ExecError::Io {
            context: "serializing deployment handle".into(),
            source: e.into(),
        })?;
        write_atomic(path, doc.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = fs::read_to_string(path).map_err(ioerr(format!("reading {}", path.display())))?;
        serde_json::from_str(&doc).map_err(|e| ExecError::Io {
            context: format!("parsing {}", path.display()),
            source: e.into(),
        })
    }

    /// One line per service: `<id> <state> [pid]`.
    pub fn status_table(&self) -> String {
        let mut out = String::new();
        for id in &self.plan.startup_order {
            if let Some(state) = self.service_states.get(id) {
                let pid = self.pids.get(id).map(|p| format!(" pid={p}")).unwrap_or_default();
                out.push_str(&format!("{id:<32} {state}{pid}\n"));
            }
        }
        for (node, mount) in &self.client_mounts {
            out.push_str(&format!("client@{node:<25} attached {}\n", mount.display()));
        }
        out
    }
}

/// Write via a temporary sibling and rename, so readers never see a torn file.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data).map_err(ioerr(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(ioerr(format!("renaming {}", path.display())))
}

fn mgmt_endpoint(plan: &DeploymentPlan) -> Endpoint {
    let m = plan.management();
    Endpoint::new(m.address.clone(), m.listen_port)
}

/// Disk id of the plan disk that hosts `svc`.
fn disk_of<'a>(plan: &'a DeploymentPlan, svc: &ServiceConfig) -> Option<&'a str> {
    plan.assignments
        .iter()
        .find(|a| a.node == svc.node && a.mount_root == svc.data_dir)
        .map(|a| a.disk.as_str())
}

/// The config handed to a local daemon: data on the simulated disk and the
/// socket directory filled in.
pub fn launch_config(plan: &DeploymentPlan, exec: &NodeExecutor, svc: &ServiceConfig) -> ServiceConfig {
    let mut cfg = svc.clone();
    if let Some(disk) = disk_of(plan, svc) {
        cfg.data_dir = exec.disk_dir(&svc.node, disk);
    }
    cfg.options
        .insert(SOCKET_DIR_KEY.into(), exec.socket_dir().display().to_string());
    cfg
}

fn live(endpoint: &Endpoint, socket_dir: &Path) -> bool {
    request(endpoint, socket_dir, op::PING, &[], Some(Duration::from_millis(500))).is_ok()
}

fn snapshot(plan: &DeploymentPlan, socket_dir: &Path) -> crate::ministore::Result<Snapshot> {
    let body = request(
        &mgmt_endpoint(plan),
        socket_dir,
        op::SNAPSHOT,
        &[],
        Some(Duration::from_secs(1)),
    )?;
    Decoder::new(&body).get()
}

fn check_collisions(plan: &DeploymentPlan, exec: &NodeExecutor) -> Result<()> {
    let sockets = exec.socket_dir();
    let mut seen = BTreeSet::new();
    for svc in plan.services.iter().filter(|s| s.service != ServiceKind::Client) {
        let ep = Endpoint::new(svc.address.clone(), svc.listen_port);
        let path = ep.socket_path(&sockets);
        if path.as_os_str().len() > MAX_SOCKET_PATH {
            return Err(ExecError::WorkingRoot {
                path: exec.working_root.clone(),
                source: io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("socket path {} is too long; use a shorter working root", path.display()),
                ),
            });
        }
        if !seen.insert(ep.clone()) {
            return Err(ExecError::PortCollision {
                endpoint: ep.to_string(),
                detail: format!("assigned twice in the plan, second time to {}", svc.id),
            });
        }
        if live(&ep, &sockets) {
            return Err(ExecError::PortCollision {
                endpoint: ep.to_string(),
                detail: format!("a live service answers at {}", path.display()),
            });
        }
    }
    Ok(())
}

fn prepare_root(exec: &NodeExecutor) -> Result<()> {
    let root = &exec.working_root;
    let wrap = |source| ExecError::WorkingRoot {
        path: root.clone(),
        source,
    };
    for d in [exec.socket_dir(), exec.configs_dir(), exec.logs_dir()] {
        fs::create_dir_all(&d).map_err(wrap)?;
    }
    let probe = root.join(".probe");
    fs::write(&probe, b"ok").map_err(wrap)?;
    let _ = fs::remove_file(probe);
    Ok(())
}

/// Launch every service of `plan`. On the local backend the returned handle
/// has all services running; on the emit backend everything stays pending
/// and only configs plus the launch manifest are written.
pub fn deploy(plan: &DeploymentPlan, exec: &NodeExecutor) -> Result<DeploymentHandle> {
    match exec.backend {
        Backend::Local => deploy_local(plan, exec),
        Backend::Emit => emit(plan, exec),
    }
}

fn emit(plan: &DeploymentPlan, exec: &NodeExecutor) -> Result<DeploymentHandle> {
    let configs = exec.configs_dir();
    fs::create_dir_all(&configs).map_err(|source| ExecError::WorkingRoot {
        path: exec.working_root.clone(),
        source,
    })?;
    let mut handle = DeploymentHandle::new(plan, exec);
    for (rel, doc) in render_configs(plan) {
        let path = configs.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(ioerr(format!("creating {}", parent.display())))?;
        }
        fs::write(&path, doc).map_err(ioerr(format!("writing {}", path.display())))?;
    }
    let mut manifest = String::new();
    for (n, tier) in plan.tiers().iter().enumerate() {
        for svc in tier {
            let path = configs.join(svc.config_path());
            manifest.push_str(&format!("tier {n}: {} {} {}\n", svc.node, svc.service, path.display()));
            handle.launch_configs.insert(svc.id.clone(), path);
        }
    }
    write_atomic(&exec.working_root.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(handle)
}

fn spawn(exec: &NodeExecutor, id: &str, config: &Path) -> io::Result<Child> {
    let log = exec.logs_dir().join(format!("{}.log", file_safe(id)));
    let out = File::create(&log)?;
    let err = out.try_clone()?;
    Command::new(&exec.daemon.program)
        .args(&exec.daemon.args)
        .arg(config)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        // own process group: daemons outlive the launching command
        .process_group(0)
        .spawn()
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn last_log_line(exec: &NodeExecutor, id: &str) -> String {
    let log = exec.logs_dir().join(format!("{}.log", file_safe(id)));
    fs::read_to_string(log)
        .ok()
        .and_then(|s| s.lines().rev().find(|l| !l.trim().is_empty()).map(str::to_string))
        .unwrap_or_default()
}

fn deploy_local(plan: &DeploymentPlan, exec: &NodeExecutor) -> Result<DeploymentHandle> {
    prepare_root(exec)?;
    check_collisions(plan, exec)?;
    let mut handle = DeploymentHandle::new(plan, exec);
    for a in &plan.assignments {
        handle
            .disk_dirs
            .insert(format!("{}:{}", a.node, a.disk), exec.disk_dir(&a.node, &a.disk));
    }
    let sockets = exec.socket_dir();
    let started = Instant::now();
    let mut expect = BTreeMap::<ServiceKind, usize>::new();

    for (n, tier) in plan.tiers().iter().enumerate() {
        let tier_start = Instant::now();
        let kind = tier[0].service;
        for svc in tier {
            let cfg = launch_config(plan, exec, svc);
            let path = exec.configs_dir().join(svc.config_path());
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(ioerr(format!("creating {}", parent.display())))?;
            }
            fs::write(&path, cfg.render()).map_err(ioerr(format!("writing {}", path.display())))?;
            handle.launch_configs.insert(svc.id.clone(), path.clone());
            match spawn(exec, &svc.id, &path) {
                Ok(child) => {
                    handle.pids.insert(svc.id.clone(), child.id());
                    handle.children.insert(svc.id.clone(), child);
                }
                Err(e) => {
                    return Err(fail(
                        handle,
                        &svc.id,
                        format!("spawning {}: {e}", exec.daemon.program.display()),
                    ))
                }
            }
        }
        *expect.entry(kind).or_default() += tier.len();

        // health check: the tier is up once management reports it registered
        let deadline = Instant::now() + HEALTH_TIMEOUT;
        loop {
            for svc in tier {
                let child = handle.children.get_mut(&svc.id).expect("spawned above");
                if let Ok(Some(status)) = child.try_wait() {
                    let tail = last_log_line(exec, &svc.id);
                    let reason = format!("daemon exited with {status}: {tail}");
                    return Err(fail(handle, &svc.id, reason));
                }
            }
            let healthy = match kind {
                ServiceKind::Management => snapshot(plan, &sockets).is_ok(),
                _ => snapshot(plan, &sockets).is_ok_and(|s| s.of(kind).len() >= expect[&kind]),
            };
            if healthy {
                break;
            }
            if Instant::now() > deadline {
                let id = tier[0].id.clone();
                return Err(fail(handle, &id, format!("not healthy after {HEALTH_TIMEOUT:?}")));
            }
            thread::sleep(POLL);
        }
        for svc in tier {
            handle.service_states.insert(svc.id.clone(), ServiceState::Running);
        }
        handle
            .timings
            .insert(format!("tier{n}_{}", kind.as_str()), tier_start.elapsed().as_secs_f64());
    }
    let total = started.elapsed().as_secs_f64();
    handle.timings.insert("deploy".into(), total);
    info!("deployed {} services in {total:.3} s", handle.service_states.len());
    Ok(handle)
}

/// Mark `id` failed, stop whatever was already started and hand the handle
/// back inside the error.
fn fail(mut handle: DeploymentHandle, id: &str, reason: String) -> ExecError {
    warn!("{id} failed: {reason}");
    handle.service_states.insert(id.to_string(), ServiceState::Failed);
    if let Some(mut child) = handle.children.remove(id) {
        let _ = child.kill();
        let _ = child.wait();
    }
    handle.pids.remove(id);
    let order: Vec<String> = handle.plan.startup_order.iter().rev().cloned().collect();
    for other in order {
        if handle.pids.contains_key(&other) {
            stop_service(&mut handle, &other);
        }
    }
    ExecError::ServiceFailed {
        service: id.to_string(),
        reason,
        handle: Box::new(handle),
    }
}

/// Give every compute node an attach point bound to the deployment's
/// management service.
pub fn attach_clients(handle: &mut DeploymentHandle, compute_nodes: &[NodeSpec]) -> Result<()> {
    if compute_nodes.is_empty() {
        return Ok(());
    }
    let cfg = handle.client_config();
    Client::connect(&cfg)?;
    if !handle.all_running() {
        let bad: Vec<String> = handle
            .service_states
            .iter()
            .filter(|(_, s)| **s != ServiceState::Running)
            .map(|(id, s)| format!("{id} {s}"))
            .collect();
        return Err(ExecError::NotRunning(bad.join(", ")));
    }
    for node in compute_nodes {
        if handle.client_mounts.contains_key(&node.id) {
            return Err(ExecError::DuplicateAttach(node.id.clone()));
        }
    }
    let template = handle
        .plan
        .services_of(ServiceKind::Client)
        .next()
        .cloned()
        .expect("plan always holds a client config");
    for node in compute_nodes {
        let dir = handle.executor.clients_dir().join(&node.id);
        fs::create_dir_all(&dir).map_err(ioerr(format!("creating {}", dir.display())))?;
        let mut c = template.clone();
        c.node = node.id.clone();
        c.address = node.address.clone();
        c.data_dir = dir.clone();
        c.options.insert(
            SOCKET_DIR_KEY.into(),
            handle.executor.socket_dir().display().to_string(),
        );
        fs::write(dir.join(CLIENT_CONF), c.render()).map_err(ioerr(format!("writing {}", dir.display())))?;
        handle.client_mounts.insert(node.id.clone(), dir);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Teardown

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiskScrub {
    pub disk: String,
    pub residual_entries: u64,
    pub bytes_scrubbed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeardownReport {
    pub disks: Vec<DiskScrub>,
    pub services_stopped: Vec<String>,
    /// Services that ignored the shutdown request and were killed.
    pub unresponsive: Vec<String>,
    pub mounts_removed: Vec<String>,
    pub residual_daemons: Vec<u32>,
    pub actions: usize,
}

impl TeardownReport {
    pub fn clean(&self) -> bool {
        self.residual_daemons.is_empty() && self.disks.iter().all(|d| d.residual_entries == 0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("disk,residual_entries,bytes_scrubbed\n");
        for d in &self.disks {
            out.push_str(&format!("{},{},{}\n", d.disk, d.residual_entries, d.bytes_scrubbed));
        }
        out
    }
}

fn pid_alive(pid: u32) -> bool {
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        // state is the first field after the parenthesised command name
        Ok(stat) => stat
            .rsplit_once(')')
            .and_then(|(_, rest)| rest.split_whitespace().next())
            .is_some_and(|state| state != "Z" && state != "X"),
        Err(_) => false,
    }
}

/// Mark running services whose process has gone away as failed; returns
/// their ids.
pub fn refresh_states(handle: &mut DeploymentHandle) -> Vec<String> {
    let mut lost = Vec::new();
    for (id, pid) in handle.pids.clone() {
        let alive = match handle.children.get_mut(&id) {
            Some(child) => matches!(child.try_wait(), Ok(None)),
            None => pid_alive(pid),
        };
        if !alive && handle.state(&id) == Some(ServiceState::Running) {
            handle.service_states.insert(id.clone(), ServiceState::Failed);
            lost.push(id);
        }
    }
    lost
}

fn wait_exit(handle: &mut DeploymentHandle, id: &str, pid: u32, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        let gone = match handle.children.get_mut(id) {
            Some(child) => !matches!(child.try_wait(), Ok(None)),
            None => !pid_alive(pid),
        };
        if gone {
            return true;
        }
        if Instant::now() > deadline {
            return false;
        }
        thread::sleep(POLL);
    }
}

/// Ask one service to stop, killing it if it does not. Returns false when
/// it had to be killed.
fn stop_service(handle: &mut DeploymentHandle, id: &str) -> bool {
    let Some(pid) = handle.pids.get(id).copied() else {
        return true;
    };
    let svc = handle.plan.service(id).expect("handle services come from the plan");
    let ep = Endpoint::new(svc.address.clone(), svc.listen_port);
    let asked = request(
        &ep,
        &handle.executor.socket_dir(),
        op::SHUTDOWN,
        &[],
        Some(SHUTDOWN_TIMEOUT),
    )
    .is_ok();
    let graceful = asked && wait_exit(handle, id, pid, EXIT_TIMEOUT);
    if !graceful {
        debug!("{id}: killing pid {pid}");
        // SAFETY: kill(2) has no memory-safety preconditions.
        unsafe {
            libc::kill(pid as libc::pid_t, libc::SIGKILL);
        }
        wait_exit(handle, id, pid, EXIT_TIMEOUT);
    }
    if let Some(mut child) = handle.children.remove(id) {
        let _ = child.wait();
    }
    handle.pids.remove(id);
    if handle.service_states.get(id) == Some(&ServiceState::Running) {
        handle.service_states.insert(id.to_string(), ServiceState::Stopped);
    }
    graceful
}

fn walk(dir: &Path) -> (u64, u64) {
    let mut entries = 0;
    let mut bytes = 0;
    if let Ok(rd) = fs::read_dir(dir) {
        for e in rd.flatten() {
            entries += 1;
            match e.file_type() {
                Ok(t) if t.is_dir() => {
                    let (n, b) = walk(&e.path());
                    entries += n;
                    bytes += b;
                }
                _ => bytes += e.metadata().map(|m| m.len()).unwrap_or(0),
            }
        }
    }
    (entries, bytes)
}

fn scrub(dir: &Path) -> u64 {
    let (_, bytes) = walk(dir);
    if let Ok(rd) = fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            let res = match e.file_type() {
                Ok(t) if t.is_dir() => fs::remove_dir_all(&p),
                _ => fs::remove_file(&p),
            };
            if let Err(err) = res {
                warn!("scrubbing {}: {err}", p.display());
            }
        }
    }
    bytes
}

/// Stop clients and services, then delete all data on the disks. Never
/// fails; anything left behind shows up in the report.
pub fn teardown(handle: &mut DeploymentHandle) -> TeardownReport {
    let mut report = TeardownReport::default();
    if !handle.torn_down {
        for (node, mount) in std::mem::take(&mut handle.client_mounts) {
            let _ = fs::remove_dir_all(&mount);
            report.mounts_removed.push(node);
        }
        let order: Vec<String> = handle.plan.startup_order.iter().rev().cloned().collect();
        for id in order {
            if !handle.pids.contains_key(&id) {
                continue;
            }
            if !stop_service(handle, &id) {
                report.unresponsive.push(id.clone());
            }
            report.services_stopped.push(id);
        }
    }
    for (disk, dir) in &handle.disk_dirs {
        let bytes = if handle.torn_down { 0 } else { scrub(dir) };
        let (residual, _) = walk(dir);
        report.disks.push(DiskScrub {
            disk: disk.clone(),
            residual_entries: residual,
            bytes_scrubbed: bytes,
        });
    }
    if !handle.torn_down {
        let _ = fs::remove_dir_all(handle.executor.socket_dir());
        report.actions = report.services_stopped.len() + report.mounts_removed.len() + report.disks.len();
    }
    report.residual_daemons = scan_daemons(&handle.executor.working_root)
        .into_iter()
        .map(|(pid, _)| pid)
        .collect();
    handle.torn_down = true;
    report
}

/// Live processes whose command line references a launch config under
/// `working_root`.
pub fn scan_daemons(working_root: &Path) -> Vec<(u32, String)> {
    let configs = working_root.join("configs");
    let needle = configs.to_string_lossy().into_owned();
    let mut found = Vec::new();
    let Ok(rd) = fs::read_dir("/proc") else {
        return found;
    };
    for e in rd.flatten() {
        let Some(pid) = e.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let Ok(raw) = fs::read(e.path().join("cmdline")) else {
            continue;
        };
        let args: Vec<String> = raw
            .split(|b| *b == 0)
            .filter(|a| !a.is_empty())
            .map(|a| String::from_utf8_lossy(a).into_owned())
            .collect();
        if args.iter().any(|a| a.starts_with(&needle)) && pid_alive(pid) {
            found.push((pid, args.join(" ")));
        }
    }
    found
}

// ---------------------------------------------------------------------------
// Stage in / out

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

const STAGE_BLOCK: usize = 4 << 20;

fn mkdir_p(client: &mut Client, path: &str) -> Result<()> {
    let mut cur = String::new();
    for part in path.split('/').filter(|p| !p.is_empty()) {
        cur.push('/');
        cur.push_str(part);
        match client.mkdir(&cur) {
            Ok(()) | Err(StoreError::Exists(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn stage_in(client: &mut Client, src: &Path, dst: &str) -> Result<u64> {
    let md = fs::metadata(src).map_err(ioerr(format!("stat {}", src.display())))?;
    if md.is_dir() {
        mkdir_p(client, dst)?;
        let mut entries: Vec<_> = fs::read_dir(src)
            .map_err(ioerr(format!("listing {}", src.display())))?
            .flatten()
            .collect();
        entries.sort_by_key(|e| e.file_name());
        let mut total = 0;
        for e in entries {
            let name = e.file_name().to_string_lossy().into_owned();
            total += stage_in(client, &e.path(), &crate::ministore::namespace::join(dst, &name))?;
        }
        return Ok(total);
    }
    if let Some(parent) = crate::ministore::namespace::parent(dst) {
        mkdir_p(client, parent)?;
    }
    client.create(dst)?;
    let f = File::open(src).map_err(ioerr(format!("opening {}", src.display())))?;
    let mut buf = vec![0u8; STAGE_BLOCK];
    let mut off = 0u64;
    loop {
        let n = std::os::unix::fs::FileExt::read_at(&f, &mut buf, off)
            .map_err(ioerr(format!("reading {}", src.display())))?;
        if n == 0 {
            break;
        }
        client.write(dst, off, &buf[..n])?;
        off += n as u64;
    }
    Ok(off)
}

fn stage_out(client: &mut Client, src: &str, dst: &Path) -> Result<u64> {
    match client.stat(src)? {
        Entry::Dir { .. } => {
            fs::create_dir_all(dst).map_err(ioerr(format!("creating {}", dst.display())))?;
            let mut total = 0;
            for name in client.list(src)? {
                total += stage_out(client, &crate::ministore::namespace::join(src, &name), &dst.join(&name))?;
            }
            Ok(total)
        }
        Entry::File(meta) => {
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(ioerr(format!("creating {}", parent.display())))?;
            }
            let f = File::create(dst).map_err(ioerr(format!("creating {}", dst.display())))?;
            let mut off = 0u64;
            while off < meta.size_bytes {
                let n = (meta.size_bytes - off).min(STAGE_BLOCK as u64) as usize;
                let data = client.read(src, off, n)?;
                std::os::unix::fs::FileExt::write_all_at(&f, &data, off)
                    .map_err(ioerr(format!("writing {}", dst.display())))?;
                off += data.len() as u64;
                if data.len() < n {
                    break;
                }
            }
            Ok(off)
        }
    }
}

/// Recursive copy between a host path and the deployed namespace. `In`
/// copies host `src` to namespace `dst`; `Out` the other way round.
pub fn stage(handle: &DeploymentHandle, direction: Direction, src: &str, dst: &str) -> Result<u64> {
    if handle.executor.backend == Backend::Emit {
        return Err(ExecError::Backend("emit"));
    }
    if !handle.all_running() {
        return Err(ExecError::NotRunning("stage needs a running deployment".into()));
    }
    if direction == Direction::In && !Path::new(src).exists() {
        return Err(ExecError::SourceMissing(src.to_string()));
    }
    let mut client = Client::connect(&handle.client_config())?;
    match direction {
        Direction::In => stage_in(&mut client, Path::new(src), dst),
        Direction::Out => match stage_out(&mut client, src, Path::new(dst)) {
            Err(ExecError::Store(StoreError::NotFound(p))) if p == src || client.stat(src).is_err() => {
                Err(ExecError::SourceMissing(src.to_string()))
            }
            other => other,
        },
    }
}
