//! Benchmark workloads run against an attach point: an IOR-style bandwidth
//! test, an mdtest-style metadata test and the HACC-IO particle kernel, plus
//! the analytic cache-fit and peak-bandwidth predictors.
//!
//! Workers are rank-indexed sessions driven through [`Execution`]. Each phase
//! starts from a common instant; every worker records when it finished and
//! the phase time is the slowest worker. Phases run back to back, so the end
//! of one phase is a barrier for the next.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::DiskSpec;
use crate::ministore::{Client, ClientConfig, Entry, StoreError, StripePolicy};
use crate::parallel::Execution;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("verification failed for {path} at byte offset {offset}: {detail}")]
    Verify { path: String, offset: u64, detail: String },
    #[error("{0} already exists; remove the residue of the previous run first")]
    Residue(String),
    #[error("{0}")]
    Predictor(String),
}

impl BenchError {
    fn io(context: impl Into<String>, source: io::Error) -> Self {
        BenchError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

// ---------------------------------------------------------------------------
// Attach points

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatInfo {
    pub is_dir: bool,
    pub size: u64,
}

/// One worker's view of an attach point. Paths are absolute within the
/// mount (`/a/b`).
pub trait Session: Send {
    /// Create an empty file; fails if it exists.
    fn create(&mut self, path: &str) -> Result<()>;
    /// Open an existing file, dropping anything cached about it.
    fn open(&mut self, path: &str) -> Result<()>;
    fn write_at(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<()>;
    /// Up to `len` bytes; short at end of file.
    fn read_at(&mut self, path: &str, offset: u64, len: usize) -> Result<Vec<u8>>;
    fn fsync(&mut self, path: &str) -> Result<()>;
    fn unlink(&mut self, path: &str) -> Result<()>;
    fn mkdir(&mut self, path: &str) -> Result<()>;
    fn rmdir(&mut self, path: &str) -> Result<()>;
    fn stat(&mut self, path: &str) -> Result<StatInfo>;

    fn exists(&mut self, path: &str) -> Result<bool> {
        match self.stat(path) {
            Ok(_) => Ok(true),
            Err(BenchError::Store(StoreError::NotFound(_))) => Ok(false),
            Err(BenchError::Io { source, .. }) if source.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e),
        }
    }
}

pub trait Mount: Sync {
    type Session: Session;
    fn session(&self) -> Result<Self::Session>;
    fn describe(&self) -> String;
}

/// The deployed store, reached through its client library.
#[derive(Debug, Clone)]
pub struct StoreMount {
    pub config: ClientConfig,
    pub policy: Option<StripePolicy>,
}

impl StoreMount {
    pub fn new(config: ClientConfig) -> Self {
        StoreMount { config, policy: None }
    }
}

pub struct StoreSession(Client);

impl Mount for StoreMount {
    type Session = StoreSession;

    fn session(&self) -> Result<StoreSession> {
        let mut client = Client::connect(&self.config)?;
        if let Some(p) = self.policy {
            client.set_stripe_policy(p);
        }
        Ok(StoreSession(client))
    }

    fn describe(&self) -> String {
        format!("ministore via {}", self.config.mgmt)
    }
}

impl Session for StoreSession {
    fn create(&mut self, path: &str) -> Result<()> {
        self.0.create(path)?;
        Ok(())
    }
    fn open(&mut self, path: &str) -> Result<()> {
        self.0.open(path)?;
        Ok(())
    }
    fn write_at(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<()> {
        self.0.write(path, offset, data)?;
        Ok(())
    }
    fn read_at(&mut self, path: &str, offset: u64, len: usize) -> Result<Vec<u8>> {
        Ok(self.0.read(path, offset, len)?)
    }
    fn fsync(&mut self, path: &str) -> Result<()> {
        Ok(self.0.fsync(path)?)
    }
    fn unlink(&mut self, path: &str) -> Result<()> {
        self.0.unlink(path)?;
        Ok(())
    }
    fn mkdir(&mut self, path: &str) -> Result<()> {
        Ok(self.0.mkdir(path)?)
    }
    fn rmdir(&mut self, path: &str) -> Result<()> {
        Ok(self.0.rmdir(path)?)
    }
    fn stat(&mut self, path: &str) -> Result<StatInfo> {
        Ok(match self.0.stat(path)? {
            Entry::Dir { .. } => StatInfo { is_dir: true, size: 0 },
            Entry::File(m) => StatInfo {
                is_dir: false,
                size: m.size_bytes,
            },
        })
    }
}

/// A plain local directory, used as the comparison baseline.
#[derive(Debug, Clone)]
pub struct DirMount {
    pub root: PathBuf,
}

impl DirMount {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirMount { root: root.into() }
    }
}

pub struct DirSession {
    root: PathBuf,
    files: HashMap<String, File>,
}

impl DirSession {
    fn host(&self, path: &str) -> PathBuf {
        self.root.join(path.trim_start_matches('/'))
    }

    fn handle(&mut self, path: &str) -> Result<&File> {
        if !self.files.contains_key(path) {
            self.open(path)?;
        }
        Ok(&self.files[path])
    }
}

impl Mount for DirMount {
    type Session = DirSession;

    fn session(&self) -> Result<DirSession> {
        if !self.root.is_dir() {
            return Err(BenchError::io(
                format!("baseline directory {}", self.root.display()),
                io::Error::from(io::ErrorKind::NotFound),
            ));
        }
        Ok(DirSession {
            root: self.root.clone(),
            files: HashMap::new(),
        })
    }

    fn describe(&self) -> String {
        format!("directory {}", self.root.display())
    }
}

impl Session for DirSession {
    fn create(&mut self, path: &str) -> Result<()> {
        let host = self.host(path);
        let f = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(&host)
            .map_err(|e| BenchError::io(format!("creating {}", host.display()), e))?;
        self.files.insert(path.to_string(), f);
        Ok(())
    }
    fn open(&mut self, path: &str) -> Result<()> {
        let host = self.host(path);
        let f = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&host)
            .map_err(|e| BenchError::io(format!("opening {}", host.display()), e))?;
        self.files.insert(path.to_string(), f);
        Ok(())
    }
    fn write_at(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<()> {
        self.handle(path)?
            .write_all_at(data, offset)
            .map_err(|e| BenchError::io(format!("writing {path}"), e))
    }
    fn read_at(&mut self, path: &str, offset: u64, len: usize) -> Result<Vec<u8>> {
        let f = self.handle(path)?;
        let mut buf = vec![0u8; len];
        let mut filled = 0;
        while filled < len {
            match f.read_at(&mut buf[filled..], offset + filled as u64) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(BenchError::io(format!("reading {path}"), e)),
            }
        }
        buf.truncate(filled);
        Ok(buf)
    }
    fn fsync(&mut self, path: &str) -> Result<()> {
        self.handle(path)?
            .sync_all()
            .map_err(|e| BenchError::io(format!("syncing {path}"), e))
    }
    fn unlink(&mut self, path: &str) -> Result<()> {
        self.files.remove(path);
        let host = self.host(path);
        fs::remove_file(&host).map_err(|e| BenchError::io(format!("removing {}", host.display()), e))
    }
    fn mkdir(&mut self, path: &str) -> Result<()> {
        let host = self.host(path);
        fs::create_dir(&host).map_err(|e| BenchError::io(format!("creating {}", host.display()), e))
    }
    fn rmdir(&mut self, path: &str) -> Result<()> {
        let host = self.host(path);
        fs::remove_dir(&host).map_err(|e| BenchError::io(format!("removing {}", host.display()), e))
    }
    fn stat(&mut self, path: &str) -> Result<StatInfo> {
        let host = self.host(path);
        let md = fs::metadata(&host).map_err(|e| BenchError::io(format!("stat {}", host.display()), e))?;
        Ok(StatInfo {
            is_dir: md.is_dir(),
            size: md.len(),
        })
    }
}

// ---------------------------------------------------------------------------
// Specs and results

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    Ior,
    Mdtest,
    Hacc,
}

impl Workload {
    pub fn as_str(self) -> &'static str {
        match self {
            Workload::Ior => "ior",
            Workload::Mdtest => "mdtest",
            Workload::Hacc => "hacc",
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SharedFile,
    FilePerProcess,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SharedFile => "shared",
            Mode::FilePerProcess => "fpp",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shared" | "shared_file" => Ok(Mode::SharedFile),
            "fpp" | "file_per_process" => Ok(Mode::FilePerProcess),
            other => Err(format!("unknown mode `{other}` (expected shared or fpp)")),
        }
    }
}

pub const DEFAULT_ITERATIONS: u32 = 10;
pub const DEFAULT_MDTEST_ITEMS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub workload: Workload,
    pub nodes: u32,
    pub ppn: u32,
    pub size_per_proc_bytes: u64,
    pub transfer_size_bytes: u64,
    pub mode: Mode,
    pub particles_per_proc: u64,
    pub items_per_proc: u64,
    pub iterations: u32,
    pub reorder_read_ranks: bool,
    pub seed: u64,
    /// Leave the files of the last iteration in place.
    #[serde(default)]
    pub keep_files: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl BenchSpec {
    fn base(workload: Workload, nodes: u32, ppn: u32) -> Self {
        BenchSpec {
            workload,
            nodes,
            ppn,
            size_per_proc_bytes: 0,
            transfer_size_bytes: 0,
            mode: Mode::SharedFile,
            particles_per_proc: 0,
            items_per_proc: 0,
            iterations: DEFAULT_ITERATIONS,
            reorder_read_ranks: true,
            seed: 0x5eed,
            keep_files: false,
            execution: Execution::default(),
        }
    }

    pub fn ior(nodes: u32, ppn: u32, mode: Mode, size_per_proc: u64, transfer_size: u64) -> Self {
        BenchSpec {
            mode,
            size_per_proc_bytes: size_per_proc,
            transfer_size_bytes: transfer_size,
            ..Self::base(Workload::Ior, nodes, ppn)
        }
    }

    pub fn mdtest(nodes: u32, ppn: u32, items_per_proc: u64) -> Self {
        BenchSpec {
            items_per_proc,
            ..Self::base(Workload::Mdtest, nodes, ppn)
        }
    }

    pub fn hacc(nodes: u32, ppn: u32, particles_per_proc: u64) -> Self {
        BenchSpec {
            particles_per_proc,
            ..Self::base(Workload::Hacc, nodes, ppn)
        }
    }

    pub fn workers(&self) -> usize {
        self.nodes as usize * self.ppn as usize
    }

    /// Rank whose data worker `rank` reads back: one node's worth of ranks
    /// further on, so no worker reads what it wrote itself.
    pub fn read_source(&self, rank: usize) -> usize {
        let w = self.workers();
        if self.reorder_read_ranks {
            (rank + self.ppn as usize) % w
        } else {
            rank
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::InvalidSpec(m));
        if self.workers() == 0 {
            return bad("nodes * ppn must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.workload == Workload::Ior {
            if self.transfer_size_bytes == 0 {
                return bad("transfer size must be positive".into());
            }
            if !self.size_per_proc_bytes.is_multiple_of(self.transfer_size_bytes) {
                return bad(format!(
                    "transfer size {} does not divide size per process {}",
                    self.transfer_size_bytes, self.size_per_proc_bytes
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSample {
    pub iteration: u32,
    pub phase: String,
    pub bytes: u64,
    pub seconds: f64,
}

impl PhaseSample {
    pub fn bandwidth(&self) -> f64 {
        bandwidth(self.bytes, self.seconds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationBw {
    pub write_bw: f64,
    pub read_bw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MdTarget {
    Directory,
    File,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MdOp {
    Creation,
    Stat,
    Read,
    Removal,
}

impl MdTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            MdTarget::Directory => "directory",
            MdTarget::File => "file",
            MdTarget::Tree => "tree",
        }
    }
}

impl MdOp {
    pub fn as_str(self) -> &'static str {
        match self {
            MdOp::Creation => "creation",
            MdOp::Stat => "stat",
            MdOp::Read => "read",
            MdOp::Removal => "removal",
        }
    }
}

/// The nine metadata rows, in report order.
pub const MD_ROWS: [(MdTarget, MdOp); 9] = [
    (MdTarget::Directory, MdOp::Creation),
    (MdTarget::Directory, MdOp::Stat),
    (MdTarget::Directory, MdOp::Removal),
    (MdTarget::File, MdOp::Creation),
    (MdTarget::File, MdOp::Stat),
    (MdTarget::File, MdOp::Read),
    (MdTarget::File, MdOp::Removal),
    (MdTarget::Tree, MdOp::Creation),
    (MdTarget::Tree, MdOp::Removal),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpsRow {
    pub target: MdTarget,
    pub op: MdOp,
    pub ops: u64,
    pub seconds: f64,
    pub ops_per_s: f64,
}

impl OpsRow {
    fn new(target: MdTarget, op: MdOp, ops: u64, seconds: f64) -> Self {
        OpsRow {
            target,
            op,
            ops,
            seconds,
            ops_per_s: rate(ops, seconds),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdSample {
    pub iteration: u32,
    pub row: OpsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub workload: Workload,
    pub mode: Mode,
    pub write_bw: f64,
    pub read_bw: f64,
    pub per_iteration: Vec<IterationBw>,
    pub samples: Vec<PhaseSample>,
    /// Metadata rows summed over iterations (mdtest only).
    pub ops_table: Vec<OpsRow>,
    pub md_samples: Vec<MdSample>,
    /// Seconds per phase, summed over iterations.
    pub elapsed: BTreeMap<String, f64>,
    /// Total size of the files written in the last iteration.
    pub file_bytes: u64,
}

impl BenchResult {
    fn new(spec: &BenchSpec) -> Self {
        BenchResult {
            workload: spec.workload,
            mode: spec.mode,
            write_bw: 0.0,
            read_bw: 0.0,
            per_iteration: Vec::new(),
            samples: Vec::new(),
            ops_table: Vec::new(),
            md_samples: Vec::new(),
            elapsed: BTreeMap::new(),
            file_bytes: 0,
        }
    }

    pub fn ops_row(&self, target: MdTarget, op: MdOp) -> Option<&OpsRow> {
        self.ops_table.iter().find(|r| r.target == target && r.op == op)
    }

    fn record(&mut self, iteration: u32, phase: &str, bytes: u64, seconds: f64) {
        *self.elapsed.entry(phase.to_string()).or_default() += seconds;
        self.samples.push(PhaseSample {
            iteration,
            phase: phase.to_string(),
            bytes,
            seconds,
        });
    }

    fn finish_bandwidth(&mut self) {
        let total = |phase: &str| {
            self.samples
                .iter()
                .filter(|s| s.phase == phase)
                .fold((0u64, 0f64), |(b, t), s| (b + s.bytes, t + s.seconds))
        };
        let (wb, wt) = total("write");
        let (rb, rt) = total("read");
        self.write_bw = bandwidth(wb, wt);
        self.read_bw = bandwidth(rb, rt);
        let phase_bw = |it: u32, phase: &str| {
            self.samples
                .iter()
                .find(|s| s.iteration == it && s.phase == phase)
                .map_or(0.0, PhaseSample::bandwidth)
        };
        let iterations: Vec<u32> = {
            let mut v: Vec<u32> = self.samples.iter().map(|s| s.iteration).collect();
            v.dedup();
            v
        };
        self.per_iteration = iterations
            .into_iter()
            .map(|it| IterationBw {
                write_bw: phase_bw(it, "write"),
                read_bw: phase_bw(it, "read"),
            })
            .collect();
    }
}

/// Bytes per second; zero when nothing moved.
pub fn bandwidth(bytes: u64, seconds: f64) -> f64 {
    if bytes == 0 || seconds <= 0.0 {
        0.0
    } else {
        bytes as f64 / seconds
    }
}

fn rate(ops: u64, seconds: f64) -> f64 {
    bandwidth(ops, seconds)
}

// ---------------------------------------------------------------------------
// Phase driver

/// Run one phase on every worker session. Returns the slowest worker's time
/// measured from the common start, or the first worker error.
fn phase<S, F>(exec: Execution, sessions: &mut [S], work: F) -> Result<f64>
where
    S: Session,
    F: Fn(usize, &mut S) -> Result<()> + Sync + Send,
{
    let start = Instant::now();
    let done = exec.for_each_rank(sessions, |rank, s| work(rank, s).map(|()| start.elapsed()));
    let mut slowest = Duration::ZERO;
    for d in done {
        slowest = slowest.max(d?);
    }
    Ok(slowest.as_secs_f64())
}

fn sessions<M: Mount>(mount: &M, n: usize) -> Result<Vec<M::Session>> {
    (0..n).map(|_| mount.session()).collect()
}

fn verify(path: &str, offset: u64, expected: &[u8], got: &[u8]) -> Result<()> {
    if let Some(i) = expected.iter().zip(got).position(|(a, b)| a != b) {
        return Err(BenchError::Verify {
            path: path.to_string(),
            offset: offset + i as u64,
            detail: format!("expected byte {:#04x}, read {:#04x}", expected[i], got[i]),
        });
    }
    if got.len() != expected.len() {
        return Err(BenchError::Verify {
            path: path.to_string(),
            offset: offset + got.len() as u64,
            detail: format!("short read: {} of {} bytes", got.len(), expected.len()),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// IOR

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic content of file `key` at `offset..offset+buf.len()`: the
/// little-endian bytes of one generated word per 8-byte slot.
pub fn fill_pattern(seed: u64, key: u64, offset: u64, buf: &mut [u8]) {
    let base = splitmix64(seed ^ key.wrapping_mul(0xd6e8_feb8_6659_fd93));
    let mut pos = 0usize;
    while pos < buf.len() {
        let abs = offset + pos as u64;
        let word = splitmix64(base ^ (abs / 8)).to_le_bytes();
        let skip = (abs % 8) as usize;
        let n = (8 - skip).min(buf.len() - pos);
        buf[pos..pos + n].copy_from_slice(&word[skip..skip + n]);
        pos += n;
    }
}

fn ior_path(mode: Mode, rank: usize) -> String {
    match mode {
        Mode::SharedFile => "/ior.shared".to_string(),
        Mode::FilePerProcess => format!("/ior.fpp.{rank:06}"),
    }
}

/// Where rank `rank`'s data lives: `(path, pattern key, base offset)`.
fn ior_region(spec: &BenchSpec, rank: usize) -> (String, u64, u64) {
    match spec.mode {
        Mode::SharedFile => (ior_path(spec.mode, rank), 0, rank as u64 * spec.size_per_proc_bytes),
        Mode::FilePerProcess => (ior_path(spec.mode, rank), rank as u64 + 1, 0),
    }
}

pub fn run_ior<M: Mount>(spec: &BenchSpec, mount: &M) -> Result<BenchResult> {
    if spec.workload != Workload::Ior {
        return Err(BenchError::InvalidSpec(format!(
            "{} spec passed to run_ior",
            spec.workload
        )));
    }
    spec.validate()?;
    let w = spec.workers();
    let mut sessions = sessions(mount, w)?;
    let mut result = BenchResult::new(spec);
    let block = spec.transfer_size_bytes as usize;
    let blocks = spec.size_per_proc_bytes / spec.transfer_size_bytes;

    for it in 0..spec.iterations {
        let seed = spec.seed.wrapping_add(it as u64);
        let files: Vec<String> = match spec.mode {
            Mode::SharedFile => vec![ior_path(spec.mode, 0)],
            Mode::FilePerProcess => (0..w).map(|r| ior_path(spec.mode, r)).collect(),
        };
        for f in &files {
            sessions[0].create(f)?;
        }

        let write_secs = phase(spec.execution, &mut sessions, |rank, s| {
            let (path, key, base) = ior_region(spec, rank);
            s.open(&path)?;
            let mut buf = vec![0u8; block];
            for b in 0..blocks {
                let off = base + b * spec.transfer_size_bytes;
                fill_pattern(seed, key, off, &mut buf);
                s.write_at(&path, off, &buf)?;
            }
            s.fsync(&path)
        })?;
        result.record(it, "write", w as u64 * spec.size_per_proc_bytes, write_secs);

        let read_secs = phase(spec.execution, &mut sessions, |rank, s| {
            let (path, key, base) = ior_region(spec, spec.read_source(rank));
            s.open(&path)?;
            let mut expected = vec![0u8; block];
            for b in 0..blocks {
                let off = base + b * spec.transfer_size_bytes;
                let got = s.read_at(&path, off, block)?;
                fill_pattern(seed, key, off, &mut expected);
                verify(&path, off, &expected, &got)?;
            }
            Ok(())
        })?;
        result.record(it, "read", w as u64 * spec.size_per_proc_bytes, read_secs);

        let mut total = 0;
        for f in &files {
            total += sessions[0].stat(f)?.size;
        }
        result.file_bytes = total;
        if !(spec.keep_files && it + 1 == spec.iterations) {
            for f in &files {
                sessions[0].unlink(f)?;
            }
        }
    }
    result.finish_bandwidth();
    Ok(result)
}

// ---------------------------------------------------------------------------
// mdtest

/// One per-item metadata operation: session, item path stem, item index.
type ItemOp<'a, S> = dyn Fn(&mut S, String, u64) -> Result<()> + 'a;

pub const MDTEST_ROOT: &str = "/mdtest";

fn md_dir(rank: usize) -> String {
    format!("{MDTEST_ROOT}/rank.{rank:06}")
}

pub fn run_mdtest<M: Mount>(spec: &BenchSpec, mount: &M) -> Result<BenchResult> {
    if spec.workload != Workload::Mdtest {
        return Err(BenchError::InvalidSpec(format!(
            "{} spec passed to run_mdtest",
            spec.workload
        )));
    }
    spec.validate()?;
    let w = spec.workers();
    let n = spec.items_per_proc;
    let mut sessions = sessions(mount, w)?;
    if sessions[0].exists(MDTEST_ROOT)? {
        return Err(BenchError::Residue(MDTEST_ROOT.to_string()));
    }
    let mut result = BenchResult::new(spec);
    let payload_len = spec.transfer_size_bytes as usize;
    let mut totals: BTreeMap<(MdTarget, MdOp), (u64, f64)> = BTreeMap::new();
    let per_item = w as u64 * n;
    let tree_ops = if n == 0 { 0 } else { w as u64 };

    for it in 0..spec.iterations {
        let seed = spec.seed.wrapping_add(it as u64);
        sessions[0].mkdir(MDTEST_ROOT)?;
        let mut rows = Vec::with_capacity(MD_ROWS.len());
        let exec = spec.execution;
        let items = |s: &mut M::Session, rank: usize, f: &ItemOp<'_, M::Session>| {
            for i in 0..n {
                f(s, format!("{}/{}", md_dir(rank), i), i)?;
            }
            Ok(())
        };
        let key = |rank: usize, i: u64| ((rank as u64) << 32) | i;

        let t = phase(
            exec,
            &mut sessions,
            |rank, s| if n > 0 { s.mkdir(&md_dir(rank)) } else { Ok(()) },
        )?;
        rows.push(OpsRow::new(MdTarget::Tree, MdOp::Creation, tree_ops, t));

        let t = phase(exec, &mut sessions, |rank, s| {
            items(s, rank, &|s, p, _| s.mkdir(&format!("{p}.d")))
        })?;
        rows.push(OpsRow::new(MdTarget::Directory, MdOp::Creation, per_item, t));
        let t = phase(exec, &mut sessions, |rank, s| {
            items(s, rank, &|s, p, _| {
                let p = format!("{p}.d");
                match s.stat(&p)?.is_dir {
                    true => Ok(()),
                    false => Err(BenchError::Verify {
                        path: p,
                        offset: 0,
                        detail: "expected a directory".into(),
                    }),
                }
            })
        })?;
        rows.push(OpsRow::new(MdTarget::Directory, MdOp::Stat, per_item, t));
        let t = phase(exec, &mut sessions, |rank, s| {
            items(s, rank, &|s, p, _| s.rmdir(&format!("{p}.d")))
        })?;
        rows.push(OpsRow::new(MdTarget::Directory, MdOp::Removal, per_item, t));

        let t = phase(exec, &mut sessions, |rank, s| {
            items(s, rank, &|s, p, i| {
                let p = format!("{p}.f");
                s.create(&p)?;
                if payload_len > 0 {
                    let mut buf = vec![0u8; payload_len];
                    fill_pattern(seed, key(rank, i), 0, &mut buf);
                    s.write_at(&p, 0, &buf)?;
                }
                Ok(())
            })
        })?;
        rows.push(OpsRow::new(MdTarget::File, MdOp::Creation, per_item, t));
        let t = phase(exec, &mut sessions, |rank, s| {
            items(s, rank, &|s, p, _| {
                let p = format!("{p}.f");
                let st = s.stat(&p)?;
                if st.is_dir || st.size != payload_len as u64 {
                    return Err(BenchError::Verify {
                        path: p,
                        offset: st.size,
                        detail: format!("expected a file of {payload_len} bytes"),
                    });
                }
                Ok(())
            })
        })?;
        rows.push(OpsRow::new(MdTarget::File, MdOp::Stat, per_item, t));
        let t = phase(exec, &mut sessions, |rank, s| {
            items(s, rank, &|s, p, i| {
                let p = format!("{p}.f");
                s.open(&p)?;
                let got = s.read_at(&p, 0, payload_len)?;
                let mut expected = vec![0u8; payload_len];
                fill_pattern(seed, key(rank, i), 0, &mut expected);
                verify(&p, 0, &expected, &got)
            })
        })?;
        rows.push(OpsRow::new(MdTarget::File, MdOp::Read, per_item, t));
        let t = phase(exec, &mut sessions, |rank, s| {
            items(s, rank, &|s, p, _| s.unlink(&format!("{p}.f")))
        })?;
        rows.push(OpsRow::new(MdTarget::File, MdOp::Removal, per_item, t));

        let t = phase(
            exec,
            &mut sessions,
            |rank, s| if n > 0 { s.rmdir(&md_dir(rank)) } else { Ok(()) },
        )?;
        rows.push(OpsRow::new(MdTarget::Tree, MdOp::Removal, tree_ops, t));
        sessions[0].rmdir(MDTEST_ROOT)?;

        for row in rows {
            let phase_name = format!("{}_{}", row.target.as_str(), row.op.as_str());
            *result.elapsed.entry(phase_name).or_default() += row.seconds;
            let slot = totals.entry((row.target, row.op)).or_default();
            slot.0 += row.ops;
            slot.1 += row.seconds;
            result.md_samples.push(MdSample { iteration: it, row });
        }
    }
    result.ops_table = MD_ROWS
        .iter()
        .map(|&(target, op)| {
            let (ops, secs) = totals[&(target, op)];
            OpsRow::new(target, op, ops, secs)
        })
        .collect();
    Ok(result)
}

// ---------------------------------------------------------------------------
// HACC-IO

/// One particle in array-of-structures layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub xx: f32,
    pub yy: f32,
    pub zz: f32,
    pub vx: f32,
    pub vy: f32,
    pub vz: f32,
    pub phi: f32,
    pub pid: i64,
    pub mask: u16,
}

impl Particle {
    pub const SIZE: usize = 38;
    pub const FIELDS: [&'static str; 9] = ["xx", "yy", "zz", "vx", "vy", "vz", "phi", "pid", "mask"];

    pub fn to_bytes(&self) -> [u8; Self::SIZE] {
        let mut out = [0u8; Self::SIZE];
        let floats = [self.xx, self.yy, self.zz, self.vx, self.vy, self.vz, self.phi];
        for (i, v) in floats.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(&v.to_le_bytes());
        }
        out[28..36].copy_from_slice(&self.pid.to_le_bytes());
        out[36..38].copy_from_slice(&self.mask.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Particle {
        assert!(b.len() >= Self::SIZE, "particle record needs {} bytes", Self::SIZE);
        let f = |i: usize| f32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap());
        Particle {
            xx: f(0),
            yy: f(1),
            zz: f(2),
            vx: f(3),
            vy: f(4),
            vz: f(5),
            phi: f(6),
            pid: i64::from_le_bytes(b[28..36].try_into().unwrap()),
            mask: u16::from_le_bytes(b[36..38].try_into().unwrap()),
        }
    }

    /// Byte offset within the record and name of the first differing field.
    pub fn first_difference(&self, other: &Particle) -> Option<(usize, &'static str)> {
        let a = self.to_bytes();
        let b = other.to_bytes();
        let starts = [0, 4, 8, 12, 16, 20, 24, 28, 36];
        let ends = [4, 8, 12, 16, 20, 24, 28, 36, 38];
        (0..9)
            .find(|&i| a[starts[i]..ends[i]] != b[starts[i]..ends[i]])
            .map(|i| (starts[i], Self::FIELDS[i]))
    }

    /// Particle `index` of `rank` for a given seed.
    pub fn generate(seed: u64, rank: u64, index: u64, per_rank: u64) -> Particle {
        let mut state = splitmix64(seed ^ (rank << 40) ^ index);
        let mut next = || {
            state = splitmix64(state);
            state
        };
        let unit = |x: u64| (x >> 40) as f32 / (1u64 << 24) as f32;
        let pos = |x: u64| unit(x) * 256.0;
        let vel = |x: u64| unit(x) * 2000.0 - 1000.0;
        Particle {
            xx: pos(next()),
            yy: pos(next()),
            zz: pos(next()),
            vx: vel(next()),
            vy: vel(next()),
            vz: vel(next()),
            phi: -unit(next()) * 100.0,
            pid: (rank * per_rank + index) as i64,
            mask: next() as u16,
        }
    }
}

/// Serialize `rank`'s particles into one contiguous buffer.
pub fn hacc_region(seed: u64, rank: u64, per_rank: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(per_rank as usize * Particle::SIZE);
    for i in 0..per_rank {
        out.extend_from_slice(&Particle::generate(seed, rank, i, per_rank).to_bytes());
    }
    out
}

pub const HACC_PATH: &str = "/hacc.shared";

pub fn run_hacc<M: Mount>(spec: &BenchSpec, mount: &M) -> Result<BenchResult> {
    if spec.workload != Workload::Hacc {
        return Err(BenchError::InvalidSpec(format!(
            "{} spec passed to run_hacc",
            spec.workload
        )));
    }
    spec.validate()?;
    let w = spec.workers();
    let n = spec.particles_per_proc;
    let region = n * Particle::SIZE as u64;
    let mut sessions = sessions(mount, w)?;
    let mut result = BenchResult::new(spec);

    for it in 0..spec.iterations {
        let seed = spec.seed.wrapping_add(it as u64);
        sessions[0].create(HACC_PATH)?;
        let write_secs = phase(spec.execution, &mut sessions, |rank, s| {
            s.open(HACC_PATH)?;
            let buf = hacc_region(seed, rank as u64, n);
            if !buf.is_empty() {
                s.write_at(HACC_PATH, rank as u64 * region, &buf)?;
            }
            s.fsync(HACC_PATH)
        })?;
        result.record(it, "write", w as u64 * region, write_secs);

        let read_secs = phase(spec.execution, &mut sessions, |rank, s| {
            let src = spec.read_source(rank) as u64;
            s.open(HACC_PATH)?;
            let base = src * region;
            let got = s.read_at(HACC_PATH, base, region as usize)?;
            if got.len() as u64 != region {
                return Err(BenchError::Verify {
                    path: HACC_PATH.into(),
                    offset: base + got.len() as u64,
                    detail: format!("short read: {} of {region} bytes", got.len()),
                });
            }
            for (i, rec) in got.chunks_exact(Particle::SIZE).enumerate() {
                let expected = Particle::generate(seed, src, i as u64, n);
                let actual = Particle::from_bytes(rec);
                if let Some((field_off, field)) = expected.first_difference(&actual) {
                    return Err(BenchError::Verify {
                        path: HACC_PATH.into(),
                        offset: base + (i * Particle::SIZE + field_off) as u64,
                        detail: format!("particle {i} of rank {src}: field {field} differs"),
                    });
                }
            }
            Ok(())
        })?;
        result.record(it, "read", w as u64 * region, read_secs);

        result.file_bytes = sessions[0].stat(HACC_PATH)?.size;
        if !(spec.keep_files && it + 1 == spec.iterations) {
            sessions[0].unlink(HACC_PATH)?;
        }
    }
    result.finish_bandwidth();
    Ok(result)
}

pub fn run<M: Mount>(spec: &BenchSpec, mount: &M) -> Result<BenchResult> {
    match spec.workload {
        Workload::Ior => run_ior(spec, mount),
        Workload::Mdtest => run_mdtest(spec, mount),
        Workload::Hacc => run_hacc(spec, mount),
    }
}

// ---------------------------------------------------------------------------
// Predictors

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheFitReport {
    pub per_node_volume_bytes: u64,
    pub dram_bytes: u64,
    pub fits: bool,
}

/// Data each storage node must absorb when every compute process writes
/// `size_per_proc` bytes, and whether that fits in the node's DRAM (i.e.
/// whether the page cache can hide the disks). Rounded up to whole bytes.
pub fn predict_per_node_volume(
    compute_nodes: u64,
    ppn: u64,
    size_per_proc: u64,
    storage_nodes: u64,
    dram_bytes: u64,
) -> Result<CacheFitReport> {
    if storage_nodes == 0 {
        return Err(BenchError::Predictor("storage node count must be at least 1".into()));
    }
    let total = compute_nodes as u128 * ppn as u128 * size_per_proc as u128;
    let per_node = total.div_ceil(storage_nodes as u128);
    let per_node = u64::try_from(per_node)
        .map_err(|_| BenchError::Predictor(format!("per-node volume {per_node} bytes overflows")))?;
    Ok(CacheFitReport {
        per_node_volume_bytes: per_node,
        dram_bytes,
        fits: per_node <= dram_bytes,
    })
}

/// Sum of the disks' nominal write bandwidths, bytes/second.
pub fn aggregate_peak_bw(disks: &[DiskSpec]) -> Result<u64> {
    sum_bw(disks, |d| d.nominal_write_bw)
}

/// Sum of the disks' nominal read bandwidths, bytes/second.
pub fn aggregate_peak_read_bw(disks: &[DiskSpec]) -> Result<u64> {
    sum_bw(disks, |d| d.nominal_read_bw)
}

fn sum_bw(disks: &[DiskSpec], f: impl Fn(&DiskSpec) -> u64) -> Result<u64> {
    if disks.is_empty() {
        return Err(BenchError::Predictor("no storage disks given".into()));
    }
    disks
        .iter()
        .try_fold(0u64, |acc, d| acc.checked_add(f(d)))
        .ok_or_else(|| BenchError::Predictor("aggregate bandwidth overflows".into()))
}

// ---------------------------------------------------------------------------
// Reporting

pub const RESULTS_CSV_HEADER: &str =
    "workload,mode,nodes,ppn,size_per_proc,iteration,phase,bytes,seconds,bandwidth_bytes_per_s";
pub const MDTEST_CSV_HEADER: &str = "iteration,target,operation,ops,seconds,ops_per_s";

/// Bytes per process as reported in the results CSV for each workload.
fn reported_size(spec: &BenchSpec) -> u64 {
    match spec.workload {
        Workload::Ior => spec.size_per_proc_bytes,
        Workload::Hacc => spec.particles_per_proc * Particle::SIZE as u64,
        Workload::Mdtest => spec.transfer_size_bytes * spec.items_per_proc,
    }
}

pub fn write_results_csv<W: Write>(
    out: &mut W,
    spec: &BenchSpec,
    result: &BenchResult,
    header: bool,
) -> io::Result<()> {
    if header {
        writeln!(out, "{RESULTS_CSV_HEADER}")?;
    }
    for s in &result.samples {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.9},{:.3}",
            spec.workload,
            spec.mode,
            spec.nodes,
            spec.ppn,
            reported_size(spec),
            s.iteration,
            s.phase,
            s.bytes,
            s.seconds,
            s.bandwidth()
        )?;
    }
    Ok(())
}

pub fn write_mdtest_csv<W: Write>(out: &mut W, result: &BenchResult) -> io::Result<()> {
    writeln!(out, "{MDTEST_CSV_HEADER}")?;
    for s in &result.md_samples {
        let r = &s.row;
        writeln!(
            out,
            "{},{},{},{},{:.9},{:.3}",
            s.iteration,
            r.target.as_str(),
            r.op.as_str(),
            r.ops,
            r.seconds,
            r.ops_per_s
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

/// Min, median and max of `v`; all zero when empty.
pub fn min_median_max(phase: &str, mut v: Vec<f64>) -> PhaseSummary {
    v.sort_by(f64::total_cmp);
    let median = match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    };
    PhaseSummary {
        phase: phase.to_string(),
        min: v.first().copied().unwrap_or(0.0),
        median,
        max: v.last().copied().unwrap_or(0.0),
    }
}

/// Min/median/max over iterations: bandwidth per phase, or ops/second per
/// metadata row.
pub fn summarize(result: &BenchResult) -> Vec<PhaseSummary> {
    if result.workload == Workload::Mdtest {
        return MD_ROWS
            .iter()
            .map(|&(t, o)| {
                let v = result
                    .md_samples
                    .iter()
                    .filter(|s| s.row.target == t && s.row.op == o)
                    .map(|s| s.row.ops_per_s)
                    .collect();
                min_median_max(&format!("{}_{}", t.as_str(), o.as_str()), v)
            })
            .collect();
    }
    ["write", "read"]
        .iter()
        .map(|p| {
            let v = result
                .samples
                .iter()
                .filter(|s| s.phase == *p)
                .map(PhaseSample::bandwidth)
                .collect();
            min_median_max(p, v)
        })
        .collect()
}

/// Human-readable summary table.
pub fn render_summary(spec: &BenchSpec, result: &BenchResult, target: &str) -> String {
    let mut out = String::new();
    let unit = if spec.workload == Workload::Mdtest {
        "ops/s"
    } else {
        "MiB/s"
    };
    let scale = if spec.workload == Workload::Mdtest {
        1.0
    } else {
        crate::MIB as f64
    };
    out.push_str(&format!(
        "{} ({}) on {}: {} workers ({} nodes x {} ppn), {} iterations\n",
        spec.workload,
        spec.mode,
        target,
        spec.workers(),
        spec.nodes,
        spec.ppn,
        spec.iterations
    ));
    if spec.workload != Workload::Mdtest {
        out.push_str(&format!("file size: {} B\n", result.file_bytes));
    }
    if spec.workload == Workload::Hacc {
        out.push_str(&format!(
            "region per worker: {} B\n",
            spec.particles_per_proc * Particle::SIZE as u64
        ));
    }
    out.push_str(&format!(
        "{:<20} {:>14} {:>14} {:>14}\n",
        "phase",
        format!("min {unit}"),
        "median",
        "max"
    ));
    for s in summarize(result) {
        out.push_str(&format!(
            "{:<20} {:>14.2} {:>14.2} {:>14.2}\n",
            s.phase,
            s.min / scale,
            s.median / scale,
            s.max / scale
        ));
    }
    out
}

/// Write the summary rows as CSV.
pub fn write_summary_csv<W: Write>(out: &mut W, result: &BenchResult) -> io::Result<()> {
    writeln!(out, "phase,min,median,max")?;
    for s in summarize(result) {
        writeln!(out, "{},{:.3},{:.3},{:.3}", s.phase, s.min, s.median, s.max)?;
    }
    Ok(())
}

/// Baseline mount over an existing directory.
pub fn baseline(dir: &Path) -> Result<DirMount> {
    if !dir.is_dir() {
        return Err(BenchError::io(
            format!("baseline directory {}", dir.display()),
            io::Error::from(io::ErrorKind::NotFound),
        ));
    }
    Ok(DirMount::new(dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inventory::presets;

    fn tmp() -> (tempfile::TempDir, DirMount) {
        let d = tempfile::tempdir().unwrap();
        let m = DirMount::new(d.path());
        (d, m)
    }

    #[test]
    fn cache_fit_example() {
        let r = predict_per_node_volume(8, 36, 512_000_000, 2, 64_000_000_000).unwrap();
        assert_eq!(r.per_node_volume_bytes, 73_728_000_000);
        assert!(!r.fits);
        assert_eq!(
            predict_per_node_volume(4, 8, 1_000_000, 4, 0)
                .unwrap()
                .per_node_volume_bytes,
            8_000_000
        );
        let zero = predict_per_node_volume(8, 36, 0, 2, 0).unwrap();
        assert_eq!(zero.per_node_volume_bytes, 0);
        assert!(zero.fits);
        assert!(predict_per_node_volume(1, 1, 1, 0, 0).is_err());
    }

    #[test]
    fn peak_bandwidth() {
        let dom = presets::dom();
        let disks: Vec<DiskSpec> = dom
            .iter()
            .filter(|n| n.id.starts_with("dw"))
            .map(|n| n.disks[0].clone())
            .collect();
        assert_eq!(aggregate_peak_bw(&disks).unwrap(), 12_800_000_000);
        assert_eq!(aggregate_peak_read_bw(&disks).unwrap(), 25_360_000_000);
        assert_eq!(aggregate_peak_bw(&disks[..1]).unwrap(), 3_200_000_000);
        assert!(aggregate_peak_bw(&[]).is_err());
    }

    #[test]
    fn particle_layout() {
        let p = Particle {
            xx: 1.0,
            yy: 2.0,
            zz: 3.0,
            vx: 4.0,
            vy: 5.0,
            vz: 6.0,
            phi: 7.0,
            pid: -2,
            mask: 0xbeef,
        };
        let b = p.to_bytes();
        assert_eq!(b.len(), 38);
        assert_eq!(&b[0..4], &1.0f32.to_le_bytes());
        assert_eq!(&b[24..28], &7.0f32.to_le_bytes());
        assert_eq!(&b[28..36], &(-2i64).to_le_bytes());
        assert_eq!(&b[36..38], &[0xef, 0xbe]);
        assert_eq!(Particle::from_bytes(&b), p);
        let mut q = p;
        q.pid = 3;
        assert_eq!(p.first_difference(&q), Some((28, "pid")));
    }

    #[test]
    fn pattern_is_offset_consistent() {
        let mut whole = vec![0u8; 100];
        fill_pattern(1, 2, 3, &mut whole);
        let mut part = vec![0u8; 17];
        fill_pattern(1, 2, 3 + 41, &mut part);
        assert_eq!(&whole[41..58], &part[..]);
        let mut other = vec![0u8; 100];
        fill_pattern(1, 3, 3, &mut other);
        assert_ne!(whole, other);
    }

    #[test]
    fn ior_on_directory() {
        let (_d, m) = tmp();
        let mut spec = BenchSpec::ior(2, 2, Mode::FilePerProcess, 64 * 1024, 16 * 1024);
        spec.iterations = 2;
        spec.keep_files = true;
        let r = run_ior(&spec, &m).unwrap();
        assert_eq!(r.samples.len(), 4);
        assert_eq!(r.file_bytes, 4 * 64 * 1024);
        for rank in 0..4 {
            assert_eq!(
                fs::metadata(m.root.join(format!("ior.fpp.{rank:06}"))).unwrap().len(),
                64 * 1024
            );
        }
        for s in &r.samples {
            assert_eq!(s.bytes, 4 * 64 * 1024);
            let rel = (s.bandwidth() * s.seconds - s.bytes as f64).abs() / s.bytes as f64;
            assert!(rel < 1e-12);
        }
    }

    #[test]
    fn ior_zero_size() {
        let (_d, m) = tmp();
        let spec = BenchSpec::ior(1, 2, Mode::SharedFile, 0, 4096);
        let r = run_ior(&spec, &m).unwrap();
        assert_eq!(r.write_bw, 0.0);
        assert_eq!(r.read_bw, 0.0);
    }

    #[test]
    fn ior_detects_corruption() {
        struct Flaky(DirMount);
        struct FlakySession(DirSession);
        impl Mount for Flaky {
            type Session = FlakySession;
            fn session(&self) -> Result<FlakySession> {
                Ok(FlakySession(self.0.session()?))
            }
            fn describe(&self) -> String {
                "flaky".into()
            }
        }
        impl Session for FlakySession {
            fn create(&mut self, p: &str) -> Result<()> {
                self.0.create(p)
            }
            fn open(&mut self, p: &str) -> Result<()> {
                self.0.open(p)
            }
            fn write_at(&mut self, p: &str, off: u64, data: &[u8]) -> Result<()> {
                let mut d = data.to_vec();
                if off == 4096 {
                    d[5] ^= 1;
                }
                self.0.write_at(p, off, &d)
            }
            fn read_at(&mut self, p: &str, off: u64, len: usize) -> Result<Vec<u8>> {
                self.0.read_at(p, off, len)
            }
            fn fsync(&mut self, p: &str) -> Result<()> {
                self.0.fsync(p)
            }
            fn unlink(&mut self, p: &str) -> Result<()> {
                self.0.unlink(p)
            }
            fn mkdir(&mut self, p: &str) -> Result<()> {
                self.0.mkdir(p)
            }
            fn rmdir(&mut self, p: &str) -> Result<()> {
                self.0.rmdir(p)
            }
            fn stat(&mut self, p: &str) -> Result<StatInfo> {
                self.0.stat(p)
            }
        }
        let (_d, m) = tmp();
        let spec = BenchSpec::ior(1, 1, Mode::SharedFile, 8192, 4096);
        match run_ior(&spec, &Flaky(m)) {
            Err(BenchError::Verify { offset, .. }) => assert_eq!(offset, 4101),
            other => panic!("expected verification failure, got {other:?}"),
        }
    }

    #[test]
    fn mdtest_rows_and_residue() {
        let (_d, m) = tmp();
        let mut spec = BenchSpec::mdtest(1, 2, 10);
        spec.iterations = 1;
        spec.transfer_size_bytes = 100;
        let r = run_mdtest(&spec, &m).unwrap();
        let rows: Vec<_> = r.ops_table.iter().map(|r| (r.target, r.op)).collect();
        assert_eq!(rows, MD_ROWS.to_vec());
        assert_eq!(r.ops_row(MdTarget::Directory, MdOp::Creation).unwrap().ops, 20);
        assert_eq!(r.ops_row(MdTarget::Tree, MdOp::Creation).unwrap().ops, 2);
        assert!(fs::read_dir(&m.root).unwrap().next().is_none());

        fs::create_dir(m.root.join("mdtest")).unwrap();
        assert!(matches!(run_mdtest(&spec, &m), Err(BenchError::Residue(_))));
    }

    #[test]
    fn mdtest_zero_items() {
        let (_d, m) = tmp();
        let mut spec = BenchSpec::mdtest(1, 3, 0);
        spec.iterations = 2;
        let r = run_mdtest(&spec, &m).unwrap();
        assert!(r.ops_table.iter().all(|row| row.ops == 0 && row.ops_per_s == 0.0));
    }

    #[test]
    fn hacc_single_worker_size() {
        let (_d, m) = tmp();
        let mut spec = BenchSpec::hacc(1, 1, 25_000);
        spec.iterations = 1;
        let r = run_hacc(&spec, &m).unwrap();
        assert_eq!(r.file_bytes, 950_000);
    }

    #[test]
    fn summary_median() {
        let s = min_median_max("x", vec![3.0, 1.0, 2.0, 10.0]);
        assert_eq!((s.min, s.median, s.max), (1.0, 2.5, 10.0));
    }

    #[test]
    fn spec_validation() {
        assert!(BenchSpec::ior(0, 4, Mode::SharedFile, 4, 4).validate().is_err());
        assert!(BenchSpec::ior(1, 1, Mode::SharedFile, 10, 4).validate().is_err());
        let mut s = BenchSpec::hacc(1, 1, 1);
        s.iterations = 0;
        assert!(s.validate().is_err());
        assert_eq!(BenchSpec::hacc(2, 3, 1).read_source(5), 2);
    }
}
