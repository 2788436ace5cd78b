//! Daemon side: socket serving plus one request handler per service kind.

use std::collections::hash_map::RandomState;
use std::fs::{self, OpenOptions};
use std::hash::BuildHasher;
use std::io::{self, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};

use super::client::Conn;
use super::namespace::MetaShard;
use super::target::TargetStore;
use super::wire::{self, op, Decoder, Encoder, RegistryEntry, Snapshot};
use super::{Endpoint, Result, StoreError};
use crate::planner::{ServiceConfig, ServiceKind};

/// Option key carrying the directory that holds every endpoint socket.
pub const SOCKET_DIR_KEY: &str = "socket_dir";
/// How long a daemon keeps retrying to reach management on startup.
pub const REGISTER_TIMEOUT: Duration = Duration::from_secs(10);
const MONITOR_INTERVAL: Duration = Duration::from_millis(250);

pub trait Handler: Send + Sync + 'static {
    fn handle(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>>;
}

/// Bind a listener for `endpoint`, refusing if a live service already owns
/// the socket. Stale socket files are replaced.
pub fn bind(endpoint: &Endpoint, socket_dir: &Path) -> Result<UnixListener> {
    let path = endpoint.socket_path(socket_dir);
    if path.exists() {
        if UnixStream::connect(&path).is_ok() {
            return Err(StoreError::io(
                format!("port collision on {endpoint}"),
                io::Error::new(io::ErrorKind::AddrInUse, path.display().to_string()),
            ));
        }
        let _ = fs::remove_file(&path);
    }
    UnixListener::bind(&path).map_err(|e| StoreError::io(format!("binding {}", path.display()), e))
}

/// A serving daemon. Dropping it does not stop it; call [`shutdown`](Self::shutdown).
pub struct RunningService {
    pub id: String,
    pub kind: ServiceKind,
    pub endpoint: Endpoint,
    socket_path: PathBuf,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    background: Vec<JoinHandle<()>>,
}

impl RunningService {
    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub fn shutdown(&mut self) {
        if !self.stop.swap(true, Ordering::SeqCst) {
            let _ = UnixStream::connect(&self.socket_path);
        }
        self.wait();
    }

    /// Block until the service stops (after a SHUTDOWN request).
    pub fn wait(&mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for h in self.background.drain(..) {
            let _ = h.join();
        }
    }
}

fn serve(
    id: String,
    kind: ServiceKind,
    endpoint: Endpoint,
    socket_dir: &Path,
    listener: UnixListener,
    handler: Arc<dyn Handler>,
) -> RunningService {
    let stop = Arc::new(AtomicBool::new(false));
    let socket_path = endpoint.socket_path(socket_dir);
    let accept = {
        let stop = stop.clone();
        let socket_path = socket_path.clone();
        let ident = id.clone();
        thread::Builder::new()
            .name(format!("accept-{ident}"))
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let handler = handler.clone();
                    let stop = stop.clone();
                    let socket_path = socket_path.clone();
                    let _ = thread::Builder::new()
                        .name(format!("conn-{ident}"))
                        .spawn(move || connection_loop(stream, handler, stop, socket_path));
                }
                let _ = fs::remove_file(&socket_path);
                debug!("{ident}: accept loop finished");
            })
            .expect("spawning accept thread")
    };
    RunningService {
        id,
        kind,
        endpoint,
        socket_path,
        stop,
        accept: Some(accept),
        background: Vec::new(),
    }
}

fn connection_loop(mut stream: UnixStream, handler: Arc<dyn Handler>, stop: Arc<AtomicBool>, socket_path: PathBuf) {
    loop {
        let (opcode, payload) = match wire::read_frame(&mut stream) {
            Ok(Some(frame)) => frame,
            Ok(None) => return,
            Err(e) => {
                debug!("dropping connection: {e}");
                return;
            }
        };
        if stop.load(Ordering::SeqCst) {
            return;
        }
        if opcode == op::SHUTDOWN {
            let _ = wire::write_frame(&mut stream, op::OK, &[]);
            if !stop.swap(true, Ordering::SeqCst) {
                let _ = UnixStream::connect(&socket_path);
            }
            return;
        }
        let reply = match handler.handle(opcode, &payload) {
            Ok(body) => wire::write_frame(&mut stream, op::OK, &body),
            Err(err) => wire::write_frame(&mut stream, op::ERR, &wire::encode_error(&err)),
        };
        if reply.is_err() {
            return;
        }
    }
}

fn ping_reply(kind: ServiceKind, id: &str) -> Vec<u8> {
    let mut e = Encoder::new();
    e.put(&kind).str(id);
    e.finish()
}

fn unknown(opcode: u8) -> StoreError {
    StoreError::Protocol(format!("unsupported opcode {opcode:#04x}"))
}

struct Management {
    id: String,
    fs_id: u64,
    registry: Mutex<Vec<RegistryEntry>>,
    log: PathBuf,
}

impl Management {
    fn snapshot(&self) -> Snapshot {
        Snapshot {
            fs_id: self.fs_id,
            entries: self.registry.lock().unwrap().clone(),
        }
    }
}

impl Handler for Management {
    fn handle(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let mut d = Decoder::new(payload);
        match opcode {
            op::PING => Ok(ping_reply(ServiceKind::Management, &self.id)),
            op::REGISTER => {
                let entry: RegistryEntry = d.get()?;
                d.end()?;
                {
                    let mut reg = self.registry.lock().unwrap();
                    if reg.iter().any(|e| e.id == entry.id || e.endpoint == entry.endpoint) {
                        return Err(StoreError::Duplicate(entry.id));
                    }
                    if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(&self.log) {
                        let _ = writeln!(f, "{} {} {} {}", entry.kind, entry.id, entry.index, entry.endpoint);
                    }
                    info!("{}: registered {} {}", self.id, entry.kind, entry.id);
                    reg.push(entry);
                }
                let mut e = Encoder::new();
                e.put(&self.snapshot());
                Ok(e.finish())
            }
            op::SNAPSHOT => {
                let mut e = Encoder::new();
                e.put(&self.snapshot());
                Ok(e.finish())
            }
            other => Err(unknown(other)),
        }
    }
}

struct Metadata {
    id: String,
    shard: Mutex<MetaShard>,
}

impl Handler for Metadata {
    fn handle(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let mut d = Decoder::new(payload);
        let mut e = Encoder::new();
        match opcode {
            op::PING => return Ok(ping_reply(ServiceKind::Metadata, &self.id)),
            op::MKDIR => {
                let path = d.str()?;
                self.shard.lock().unwrap().mkdir(&path)?;
            }
            op::RMDIR => {
                let path = d.str()?;
                self.shard.lock().unwrap().rmdir(&path)?;
            }
            op::CREATE => {
                let path = d.str()?;
                let stripe = d.u64()?;
                let targets = d.strs()?;
                let meta = self.shard.lock().unwrap().create(&path, stripe, targets)?;
                e.put(&meta);
            }
            op::STAT => {
                let path = d.str()?;
                let entry = self.shard.lock().unwrap().stat(&path)?;
                e.put(&entry);
            }
            op::UNLINK => {
                let path = d.str()?;
                let meta = self.shard.lock().unwrap().unlink(&path)?;
                e.put(&meta);
            }
            op::EXTEND => {
                let path = d.str()?;
                let size = d.u64()?;
                let (old, new) = self.shard.lock().unwrap().extend(&path, size)?;
                e.u64(old).u64(new);
            }
            op::LIST => {
                let dir = d.str()?;
                let names = self.shard.lock().unwrap().list(&dir)?;
                e.strs(&names);
            }
            other => return Err(unknown(other)),
        }
        d.end()?;
        Ok(e.finish())
    }
}

struct Storage {
    store: TargetStore,
}

impl Handler for Storage {
    fn handle(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let mut d = Decoder::new(payload);
        let mut e = Encoder::new();
        match opcode {
            op::PING => return Ok(ping_reply(ServiceKind::Storage, self.store.target_id())),
            op::WRITE_CHUNK => {
                let (file_id, chunk, offset) = (d.u64()?, d.u64()?, d.u64()?);
                let data = d.bytes()?;
                self.store.write_chunk(file_id, chunk, offset, data)?;
            }
            op::READ_CHUNK => {
                let (file_id, chunk, offset, len) = (d.u64()?, d.u64()?, d.u64()?, d.u64()?);
                let data = self.store.read_chunk(file_id, chunk, offset, len)?;
                e = Encoder::with_capacity(data.len() + 4);
                e.bytes(&data);
            }
            op::EXTEND_CHUNK => {
                let (file_id, chunk, len) = (d.u64()?, d.u64()?, d.u64()?);
                self.store.extend_chunk(file_id, chunk, len)?;
            }
            op::DELETE_FILE => {
                let (chunks, bytes) = self.store.delete_file(d.u64()?)?;
                e.u64(chunks).u64(bytes);
            }
            op::FSYNC_FILE => self.store.fsync_file(d.u64()?)?,
            op::TARGET_STAT => {
                e.put(&self.store.stats());
            }
            op::LIST_CHUNKS => {
                let chunks = self.store.list_chunks(d.u64()?);
                e.u32(chunks.len() as u32);
                for (c, len) in chunks {
                    e.u64(c).u64(len);
                }
            }
            other => return Err(unknown(other)),
        }
        d.end()?;
        Ok(e.finish())
    }
}

struct Monitoring {
    id: String,
}

impl Handler for Monitoring {
    fn handle(&self, opcode: u8, _payload: &[u8]) -> Result<Vec<u8>> {
        match opcode {
            op::PING => Ok(ping_reply(ServiceKind::Monitoring, &self.id)),
            other => Err(unknown(other)),
        }
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| StoreError::io(format!("creating {}", dir.display()), e))?;
    let probe = dir.join(".probe");
    fs::write(&probe, b"ok").map_err(|e| StoreError::io(format!("{} is not writable", dir.display()), e))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn socket_dir(cfg: &ServiceConfig) -> Result<PathBuf> {
    cfg.options
        .get(SOCKET_DIR_KEY)
        .map(PathBuf::from)
        .ok_or_else(|| StoreError::Protocol(format!("service `{}` has no `{SOCKET_DIR_KEY}` option", cfg.id)))
}

/// Register with management, retrying while it is not yet reachable.
pub fn register(mgmt: &Endpoint, socket_dir: &Path, entry: &RegistryEntry, timeout: Duration) -> Result<Snapshot> {
    let deadline = Instant::now() + timeout;
    loop {
        match Conn::connect(mgmt, socket_dir) {
            Ok(mut conn) => {
                let mut e = Encoder::new();
                e.put(entry);
                let reply = conn.call(op::REGISTER, &e.finish())?;
                return Decoder::new(&reply).get();
            }
            Err(err) if Instant::now() < deadline => {
                debug!("waiting for management at {mgmt}: {err}");
                thread::sleep(Duration::from_millis(20));
            }
            Err(err) => {
                return Err(StoreError::Unreachable {
                    endpoint: mgmt.to_string(),
                    reason: err.to_string(),
                })
            }
        }
    }
}

/// Start the service described by `cfg` inside this process. Returns once
/// the socket is bound and, for non-management services, the service is
/// registered with management.
pub fn start_service(cfg: &ServiceConfig) -> Result<RunningService> {
    let sockets = socket_dir(cfg)?;
    let endpoint = Endpoint::new(cfg.address.clone(), cfg.listen_port);
    let mgmt = Endpoint::new(cfg.mgmt_address.clone(), cfg.mgmt_port);
    let (handler, index): (Arc<dyn Handler>, u32) = match cfg.service {
        ServiceKind::Management => {
            let dir = cfg.data_dir.join("mgmt");
            prepare_dir(&dir)?;
            let fs_id = RandomState::new().hash_one(SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default());
            (
                Arc::new(Management {
                    id: cfg.id.clone(),
                    fs_id,
                    registry: Mutex::new(Vec::new()),
                    log: dir.join("registry.log"),
                }),
                0,
            )
        }
        ServiceKind::Metadata => {
            let dir = cfg.data_dir.join("meta");
            prepare_dir(&dir)?;
            let index = cfg.index().unwrap_or(0);
            let shard = MetaShard::persistent(index, dir, cfg.use_xattr)?;
            (
                Arc::new(Metadata {
                    id: cfg.id.clone(),
                    shard: Mutex::new(shard),
                }),
                index as u32,
            )
        }
        ServiceKind::Storage => {
            prepare_dir(&cfg.data_dir.join("chunks"))?;
            let capacity = cfg
                .options
                .get("capacity_bytes")
                .and_then(|v| v.parse().ok())
                .unwrap_or(u64::MAX);
            (
                Arc::new(Storage {
                    store: TargetStore::open(&cfg.id, &cfg.data_dir, capacity)?,
                }),
                cfg.index().unwrap_or(0) as u32,
            )
        }
        ServiceKind::Monitoring => {
            prepare_dir(&cfg.data_dir.join("monitoring"))?;
            (Arc::new(Monitoring { id: cfg.id.clone() }), 0)
        }
        ServiceKind::Client => {
            return Err(StoreError::Protocol("client configs do not describe a daemon".into()));
        }
    };

    let listener = bind(&endpoint, &sockets)?;
    let mut svc = serve(
        cfg.id.clone(),
        cfg.service,
        endpoint.clone(),
        &sockets,
        listener,
        handler,
    );
    if cfg.service != ServiceKind::Management {
        let entry = RegistryEntry {
            kind: cfg.service,
            id: cfg.id.clone(),
            index,
            endpoint,
        };
        if let Err(e) = register(&mgmt, &sockets, &entry, REGISTER_TIMEOUT) {
            svc.shutdown();
            return Err(e);
        }
    }
    if cfg.service == ServiceKind::Monitoring {
        let stop = svc.stop.clone();
        let samples = cfg.data_dir.join("monitoring").join("samples.csv");
        svc.background
            .push(thread::spawn(move || monitor_loop(mgmt, sockets, samples, stop)));
    }
    info!("{} ({}) serving", cfg.id, cfg.service);
    Ok(svc)
}

fn monitor_loop(mgmt: Endpoint, sockets: PathBuf, samples: PathBuf, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        if let Ok(mut conn) = Conn::connect(&mgmt, &sockets) {
            if let Ok(snap) = conn
                .call(op::SNAPSHOT, &[])
                .and_then(|b| Decoder::new(&b).get::<Snapshot>())
            {
                let now = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .unwrap_or_default()
                    .as_millis();
                let mut lines = String::new();
                for t in snap.of(ServiceKind::Storage) {
                    let stats = Conn::connect(&t.endpoint, &sockets)
                        .map_err(|e| StoreError::io("connect", e))
                        .and_then(|mut c| c.call(op::TARGET_STAT, &[]))
                        .and_then(|b| Decoder::new(&b).get::<wire::TargetStats>());
                    if let Ok(s) = stats {
                        lines.push_str(&format!("{now},{},{},{}\n", s.target_id, s.chunks, s.used_bytes));
                    }
                }
                if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(&samples) {
                    let _ = f.write_all(lines.as_bytes());
                }
            }
        }
        let until = Instant::now() + MONITOR_INTERVAL;
        while Instant::now() < until && !stop.load(Ordering::SeqCst) {
            thread::sleep(Duration::from_millis(20));
        }
    }
}

/// Entry point of the daemon binary: serve the config at `path` until a
/// SHUTDOWN request arrives.
pub fn run_daemon(path: &Path) -> Result<()> {
    let doc = fs::read_to_string(path).map_err(|e| StoreError::io(format!("reading {}", path.display()), e))?;
    let cfg = ServiceConfig::parse(&doc).map_err(|e| StoreError::Protocol(e.to_string()))?;
    let mut svc = start_service(&cfg)?;
    svc.wait();
    if !svc.is_stopped() {
        warn!("{}: accept loop ended unexpectedly", cfg.id);
    }
    Ok(())
}
