//! Client library: one `Client` per worker, each holding its own
//! connections.

use std::collections::HashMap;
use std::io;
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::namespace::{self, normalize, Entry, FileMeta};
use super::server::SOCKET_DIR_KEY;
use super::wire::{self, op, Decoder, Encoder, RegistryEntry, Snapshot, TargetStats};
use super::{Endpoint, Result, StoreError};
use crate::planner::{ServiceConfig, ServiceKind};

/// A single request/response stream to one service.
pub(crate) struct Conn {
    stream: UnixStream,
}

impl Conn {
    pub(crate) fn connect(endpoint: &Endpoint, socket_dir: &Path) -> io::Result<Conn> {
        let stream = UnixStream::connect(endpoint.socket_path(socket_dir))?;
        Ok(Conn { stream })
    }

    pub(crate) fn set_timeout(&self, timeout: Option<Duration>) {
        let _ = self.stream.set_read_timeout(timeout);
        let _ = self.stream.set_write_timeout(timeout);
    }

    pub(crate) fn call(&mut self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        wire::write_frame(&mut self.stream, opcode, payload).map_err(|e| StoreError::io("sending request", e))?;
        match wire::read_frame(&mut self.stream)? {
            Some((op::OK, body)) => Ok(body),
            Some((op::ERR, body)) => Err(wire::decode_error(&body)),
            Some((other, _)) => Err(StoreError::Protocol(format!("unexpected reply opcode {other:#04x}"))),
            None => Err(StoreError::io(
                "awaiting reply",
                io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"),
            )),
        }
    }
}

/// Send a single request to `endpoint` on a fresh connection.
pub fn request(
    endpoint: &Endpoint,
    socket_dir: &Path,
    opcode: u8,
    payload: &[u8],
    timeout: Option<Duration>,
) -> Result<Vec<u8>> {
    let mut conn =
        Conn::connect(endpoint, socket_dir).map_err(|e| StoreError::io(format!("connecting to {endpoint}"), e))?;
    conn.set_timeout(timeout);
    conn.call(opcode, payload)
}

/// Where to find the management service, as carried by the client config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientConfig {
    pub mgmt: Endpoint,
    pub socket_dir: PathBuf,
    pub stripe_size: u64,
}

impl ClientConfig {
    pub fn from_service_config(cfg: &ServiceConfig) -> Result<Self> {
        let socket_dir = cfg
            .options
            .get(SOCKET_DIR_KEY)
            .ok_or_else(|| StoreError::Protocol(format!("client config lacks `{SOCKET_DIR_KEY}`")))?;
        Ok(ClientConfig {
            mgmt: Endpoint::new(cfg.mgmt_address.clone(), cfg.mgmt_port),
            socket_dir: PathBuf::from(socket_dir),
            stripe_size: cfg.stripe_size,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc =
            std::fs::read_to_string(path).map_err(|e| StoreError::io(format!("reading {}", path.display()), e))?;
        let cfg = ServiceConfig::parse(&doc).map_err(|e| StoreError::Protocol(e.to_string()))?;
        Self::from_service_config(&cfg)
    }
}

/// Striping parameters for new files. `stripe_count = None` stripes over
/// every registered target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StripePolicy {
    pub stripe_size: u64,
    pub stripe_count: Option<usize>,
}

pub struct Client {
    cfg: ClientConfig,
    snapshot: Snapshot,
    metas: Vec<Endpoint>,
    targets: Vec<RegistryEntry>,
    conns: HashMap<Endpoint, Conn>,
    cache: HashMap<String, FileMeta>,
    policy: StripePolicy,
}

impl Client {
    /// Fetch the registry from management. Fails with
    /// [`StoreError::Unreachable`] when nothing answers there.
    pub fn connect(cfg: &ClientConfig) -> Result<Client> {
        let unreachable = |reason: String| StoreError::Unreachable {
            endpoint: cfg.mgmt.to_string(),
            reason,
        };
        let mut conn = Conn::connect(&cfg.mgmt, &cfg.socket_dir).map_err(|e| unreachable(e.to_string()))?;
        let body = conn.call(op::SNAPSHOT, &[]).map_err(|e| unreachable(e.to_string()))?;
        let snapshot: Snapshot = Decoder::new(&body).get()?;
        let mut client = Client {
            cfg: cfg.clone(),
            snapshot: Snapshot {
                fs_id: 0,
                entries: Vec::new(),
            },
            metas: Vec::new(),
            targets: Vec::new(),
            conns: HashMap::new(),
            cache: HashMap::new(),
            policy: StripePolicy {
                stripe_size: cfg.stripe_size,
                stripe_count: None,
            },
        };
        client.conns.insert(cfg.mgmt.clone(), conn);
        client.apply_snapshot(snapshot)?;
        Ok(client)
    }

    fn apply_snapshot(&mut self, snapshot: Snapshot) -> Result<()> {
        self.metas = snapshot
            .of(ServiceKind::Metadata)
            .into_iter()
            .map(|e| e.endpoint.clone())
            .collect();
        self.targets = snapshot.of(ServiceKind::Storage).into_iter().cloned().collect();
        self.snapshot = snapshot;
        Ok(())
    }

    pub fn refresh(&mut self) -> Result<()> {
        let mgmt = self.cfg.mgmt.clone();
        let body = self.call(&mgmt, op::SNAPSHOT, &[])?;
        let snap = Decoder::new(&body).get()?;
        self.apply_snapshot(snap)
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn fs_id(&self) -> u64 {
        self.snapshot.fs_id
    }

    pub fn set_stripe_policy(&mut self, policy: StripePolicy) {
        self.policy = policy;
    }

    /// Fresh client with its own connections to the same deployment.
    pub fn reconnect(&self) -> Result<Client> {
        let mut c = Client::connect(&self.cfg)?;
        c.policy = self.policy;
        Ok(c)
    }

    fn call(&mut self, ep: &Endpoint, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        if !self.conns.contains_key(ep) {
            let conn = Conn::connect(ep, &self.cfg.socket_dir)
                .map_err(|e| StoreError::io(format!("connecting to {ep}"), e))?;
            self.conns.insert(ep.clone(), conn);
        }
        let res = self.conns.get_mut(ep).unwrap().call(opcode, payload);
        if matches!(res, Err(StoreError::Io { .. }) | Err(StoreError::Protocol(_))) {
            self.conns.remove(ep);
        }
        res
    }

    fn meta_call(&mut self, shard: usize, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let ep = self
            .metas
            .get(shard)
            .cloned()
            .ok_or(StoreError::NoServices("metadata"))?;
        self.call(&ep, opcode, payload)
    }

    fn target_entry(&self, target: &str) -> Result<RegistryEntry> {
        self.targets
            .iter()
            .find(|t| t.id == target)
            .cloned()
            .ok_or_else(|| StoreError::TargetDown {
                target: target.to_string(),
                reason: "not registered".into(),
            })
    }

    fn target_call(&mut self, target: &str, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let entry = self.target_entry(target)?;
        self.call(&entry.endpoint, opcode, payload).map_err(|e| match e {
            StoreError::Io { context, source } => StoreError::TargetDown {
                target: target.to_string(),
                reason: format!("{context}: {source}"),
            },
            other => other,
        })
    }

    fn shards(&self) -> usize {
        self.metas.len().max(1)
    }

    fn entry_shard(&self, path: &str) -> usize {
        namespace::shard_for_entry(path, self.shards())
    }

    fn path_op(&mut self, opcode: u8, path: &str) -> Result<Vec<u8>> {
        let mut e = Encoder::new();
        e.str(path);
        self.meta_call(self.entry_shard(path), opcode, &e.finish())
    }

    /// Parent of `path` must exist and be a directory.
    fn check_parent(&mut self, path: &str) -> Result<()> {
        let Some(parent) = namespace::parent(path) else {
            return Ok(());
        };
        match self.stat(parent) {
            Ok(Entry::Dir { .. }) => Ok(()),
            Ok(Entry::File(_)) => Err(StoreError::NotADirectory(parent.to_string())),
            Err(StoreError::NotFound(_)) => Err(StoreError::ParentMissing(path.to_string())),
            Err(e) => Err(e),
        }
    }

    pub fn stat(&mut self, path: &str) -> Result<Entry> {
        let path = normalize(path)?;
        if path == "/" {
            return Ok(Entry::Dir { path });
        }
        let body = self.path_op(op::STAT, &path)?;
        let entry: Entry = Decoder::new(&body).get()?;
        if let Entry::File(m) = &entry {
            self.cache.insert(path, m.clone());
        }
        Ok(entry)
    }

    pub fn mkdir(&mut self, path: &str) -> Result<()> {
        let path = normalize(path)?;
        if path == "/" {
            return Err(StoreError::Exists(path));
        }
        self.check_parent(&path)?;
        self.path_op(op::MKDIR, &path).map(|_| ())
    }

    pub fn rmdir(&mut self, path: &str) -> Result<()> {
        let path = normalize(path)?;
        if path == "/" {
            return Err(StoreError::InvalidPath(path));
        }
        match self.stat(&path)? {
            Entry::File(_) => return Err(StoreError::NotADirectory(path)),
            Entry::Dir { .. } => {}
        }
        if !self.list(&path)?.is_empty() {
            return Err(StoreError::NotEmpty(path));
        }
        self.path_op(op::RMDIR, &path).map(|_| ())
    }

    /// Names inside directory `dir`, sorted.
    pub fn list(&mut self, dir: &str) -> Result<Vec<String>> {
        let dir = normalize(dir)?;
        let mut e = Encoder::new();
        e.str(&dir);
        let shard = namespace::shard_for_dir(&dir, self.shards());
        let body = self.meta_call(shard, op::LIST, &e.finish())?;
        Decoder::new(&body).strs()
    }

    pub fn create(&mut self, path: &str) -> Result<FileMeta> {
        let policy = self.policy;
        self.create_with(path, policy)
    }

    pub fn create_with(&mut self, path: &str, policy: StripePolicy) -> Result<FileMeta> {
        let path = normalize(path)?;
        if self.targets.is_empty() {
            return Err(StoreError::NoServices("storage"));
        }
        self.check_parent(&path)?;
        let count = policy
            .stripe_count
            .unwrap_or(self.targets.len())
            .clamp(1, self.targets.len());
        let targets: Vec<String> = self.targets.iter().take(count).map(|t| t.id.clone()).collect();
        let mut e = Encoder::new();
        e.str(&path).u64(policy.stripe_size).strs(&targets);
        let body = self.meta_call(self.entry_shard(&path), op::CREATE, &e.finish())?;
        let meta: FileMeta = Decoder::new(&body).get()?;
        self.cache.insert(path, meta.clone());
        Ok(meta)
    }

    /// Fetch fresh file metadata, replacing whatever this client cached.
    pub fn open(&mut self, path: &str) -> Result<FileMeta> {
        let path = normalize(path)?;
        self.cache.remove(&path);
        self.file_meta(&path, 0)
    }

    fn file_meta(&mut self, path: &str, min_size: u64) -> Result<FileMeta> {
        if let Some(m) = self.cache.get(path) {
            if m.size_bytes >= min_size {
                return Ok(m.clone());
            }
        }
        match self.stat(path)? {
            Entry::File(m) => Ok(m),
            Entry::Dir { .. } => Err(StoreError::IsADirectory(path.to_string())),
        }
    }

    /// Write `data` at `offset`. Writes that start past the end of file
    /// zero-fill the gap so every chunk below the end is fully present.
    pub fn write(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<usize> {
        let path = normalize(path)?;
        let meta = self.file_meta(&path, 0)?;
        if data.is_empty() {
            return Ok(0);
        }
        let stripe = meta.stripe.clone();
        for seg in stripe.segments(offset, data.len()) {
            let mut e = Encoder::with_capacity(seg.len + 32);
            e.u64(stripe.file_id)
                .u64(seg.chunk)
                .u64(seg.chunk_offset)
                .bytes(&data[seg.buf_offset..seg.buf_offset + seg.len]);
            self.target_call(stripe.target_for(seg.chunk), op::WRITE_CHUNK, &e.finish())?;
        }
        let end = offset + data.len() as u64;
        if end > meta.size_bytes {
            let mut e = Encoder::new();
            e.str(&path).u64(end);
            let body = self.meta_call(self.entry_shard(&path), op::EXTEND, &e.finish())?;
            let mut d = Decoder::new(&body);
            let (old, new) = (d.u64()?, d.u64()?);
            if let Some(m) = self.cache.get_mut(&path) {
                m.size_bytes = new;
            }
            if offset > old {
                self.fill_gap(&stripe, old, offset)?;
            }
        }
        Ok(data.len())
    }

    fn fill_gap(&mut self, stripe: &super::StripeMap, from: u64, to: u64) -> Result<()> {
        let s = stripe.stripe_size_bytes;
        let first = from / s;
        let last = (to - 1) / s;
        for chunk in first..=last {
            let len = (to.min((chunk + 1) * s)) - chunk * s;
            let mut e = Encoder::new();
            e.u64(stripe.file_id).u64(chunk).u64(len);
            self.target_call(stripe.target_for(chunk), op::EXTEND_CHUNK, &e.finish())?;
        }
        Ok(())
    }

    /// Read up to `len` bytes at `offset`; short at end of file.
    pub fn read(&mut self, path: &str, offset: u64, len: usize) -> Result<Vec<u8>> {
        let path = normalize(path)?;
        let meta = self.file_meta(&path, offset + len as u64)?;
        if offset >= meta.size_bytes {
            return Ok(Vec::new());
        }
        let n = (len as u64).min(meta.size_bytes - offset) as usize;
        let mut out = vec![0u8; n];
        for seg in meta.stripe.segments(offset, n) {
            let mut e = Encoder::new();
            e.u64(meta.stripe.file_id)
                .u64(seg.chunk)
                .u64(seg.chunk_offset)
                .u64(seg.len as u64);
            let body = self.target_call(meta.stripe.target_for(seg.chunk), op::READ_CHUNK, &e.finish())?;
            let data = Decoder::new(&body).bytes()?;
            out[seg.buf_offset..seg.buf_offset + data.len()].copy_from_slice(data);
        }
        Ok(out)
    }

    /// Remove a file and all of its chunks.
    pub fn unlink(&mut self, path: &str) -> Result<FileMeta> {
        let path = normalize(path)?;
        let body = self.path_op(op::UNLINK, &path)?;
        let meta: FileMeta = Decoder::new(&body).get()?;
        self.cache.remove(&path);
        for target in meta.stripe.targets.clone() {
            let mut e = Encoder::new();
            e.u64(meta.file_id);
            self.target_call(&target, op::DELETE_FILE, &e.finish())?;
        }
        Ok(meta)
    }

    pub fn fsync(&mut self, path: &str) -> Result<()> {
        let path = normalize(path)?;
        let meta = self.file_meta(&path, 0)?;
        for target in meta.stripe.targets.clone() {
            let mut e = Encoder::new();
            e.u64(meta.file_id);
            self.target_call(&target, op::FSYNC_FILE, &e.finish())?;
        }
        Ok(())
    }

    pub fn target_stats(&mut self) -> Result<Vec<TargetStats>> {
        let ids: Vec<String> = self.targets.iter().map(|t| t.id.clone()).collect();
        ids.iter()
            .map(|id| {
                let body = self.target_call(id, op::TARGET_STAT, &[])?;
                Decoder::new(&body).get()
            })
            .collect()
    }

    /// `(chunk, length)` pairs a target holds for `file_id`.
    pub fn list_chunks(&mut self, target: &str, file_id: u64) -> Result<Vec<(u64, u64)>> {
        let mut e = Encoder::new();
        e.u64(file_id);
        let body = self.target_call(target, op::LIST_CHUNKS, &e.finish())?;
        let mut d = Decoder::new(&body);
        let n = d.u32()?;
        (0..n).map(|_| Ok((d.u64()?, d.u64()?))).collect()
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.targets.iter().map(|t| t.id.clone()).collect()
    }
}
