//! Binary framing shared by every ministore service.
//!
//! Each frame is
//!
//! ```text
//! +-----------+--------+----------------+-------------------+
//! | magic (4) | op (1) | length (u32le) | payload (length)  |
//! +-----------+--------+----------------+-------------------+
//! ```
//!
//! The magic `EPS1` carries the protocol version. Requests use the opcodes
//! below; every request is answered by exactly one [`op::OK`] or [`op::ERR`]
//! frame on the same stream. Integers inside payloads are little-endian,
//! strings and byte blobs are `u32` length-prefixed, lists are a `u32`
//! count followed by the items.
//!
//! | op     | name          | request payload                              | OK payload            |
//! |--------|---------------|----------------------------------------------|-----------------------|
//! | `0x01` | PING          | -                                            | kind u8, id str       |
//! | `0x02` | REGISTER      | [`RegistryEntry`]                            | [`Snapshot`]          |
//! | `0x03` | SNAPSHOT      | -                                            | [`Snapshot`]          |
//! | `0x0f` | SHUTDOWN      | -                                            | -                     |
//! | `0x10` | MKDIR         | path                                         | -                     |
//! | `0x11` | RMDIR         | path                                         | -                     |
//! | `0x12` | CREATE        | path, stripe u64, targets list<str>          | [`FileMeta`]          |
//! | `0x13` | STAT          | path                                         | [`Entry`]             |
//! | `0x14` | UNLINK        | path                                         | [`FileMeta`]          |
//! | `0x15` | EXTEND        | path, size u64                               | old u64, new u64      |
//! | `0x16` | LIST          | dir                                          | list<str> names       |
//! | `0x20` | WRITE_CHUNK   | file_id u64, chunk u64, offset u64, bytes    | -                     |
//! | `0x21` | READ_CHUNK    | file_id u64, chunk u64, offset u64, len u64  | bytes                 |
//! | `0x22` | EXTEND_CHUNK  | file_id u64, chunk u64, len u64              | -                     |
//! | `0x23` | DELETE_FILE   | file_id u64                                  | chunks u64, bytes u64 |
//! | `0x24` | FSYNC_FILE    | file_id u64                                  | -                     |
//! | `0x25` | TARGET_STAT   | -                                            | [`TargetStats`]       |
//! | `0x26` | LIST_CHUNKS   | file_id u64                                  | list<(u64, u64)>      |
//! | `0x80` | OK            | response                                     |                       |
//! | `0x81` | ERR           | code u16, a str, b str                       |                       |

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::namespace::{Entry, FileMeta};
use super::stripe::StripeMap;
use super::{Endpoint, Result, StoreError};
use crate::planner::ServiceKind;

pub const MAGIC: [u8; 4] = *b"EPS1";
pub const HEADER_LEN: usize = 9;
/// Upper bound on a frame payload.
pub const MAX_PAYLOAD: u32 = 256 << 20;

pub mod op {
    pub const PING: u8 = 0x01;
    pub const REGISTER: u8 = 0x02;
    pub const SNAPSHOT: u8 = 0x03;
    pub const SHUTDOWN: u8 = 0x0f;
    pub const MKDIR: u8 = 0x10;
    pub const RMDIR: u8 = 0x11;
    pub const CREATE: u8 = 0x12;
    pub const STAT: u8 = 0x13;
    pub const UNLINK: u8 = 0x14;
    pub const EXTEND: u8 = 0x15;
    pub const LIST: u8 = 0x16;
    pub const WRITE_CHUNK: u8 = 0x20;
    pub const READ_CHUNK: u8 = 0x21;
    pub const EXTEND_CHUNK: u8 = 0x22;
    pub const DELETE_FILE: u8 = 0x23;
    pub const FSYNC_FILE: u8 = 0x24;
    pub const TARGET_STAT: u8 = 0x25;
    pub const LIST_CHUNKS: u8 = 0x26;
    pub const OK: u8 = 0x80;
    pub const ERR: u8 = 0x81;
}

pub fn write_frame<W: Write>(w: &mut W, opcode: u8, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|l| *l <= MAX_PAYLOAD)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "payload too large"))?;
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4] = opcode;
    header[5..].copy_from_slice(&len.to_le_bytes());
    if payload.len() <= 4096 {
        let mut buf = Vec::with_capacity(HEADER_LEN + payload.len());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(payload);
        w.write_all(&buf)?;
    } else {
        w.write_all(&header)?;
        w.write_all(payload)?;
    }
    w.flush()
}

/// Read one frame. `Ok(None)` means the peer closed the stream cleanly
/// between frames.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<(u8, Vec<u8>)>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(StoreError::Protocol("truncated frame header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(StoreError::io("reading frame", e)),
        }
    }
    if header[..4] != MAGIC {
        return Err(StoreError::Protocol(format!("bad magic {:02x?}", &header[..4])));
    }
    let len = u32::from_le_bytes(header[5..9].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(StoreError::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|e| StoreError::io("reading frame payload", e))?;
    Ok(Some((header[4], payload)))
}

#[derive(Debug, Default)]
pub struct Encoder(Vec<u8>);

impl Encoder {
    pub fn new() -> Self {
        Encoder(Vec::new())
    }

    pub fn with_capacity(n: usize) -> Self {
        Encoder(Vec::with_capacity(n))
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.0.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn strs<S: AsRef<str>>(&mut self, v: &[S]) -> &mut Self {
        self.u32(v.len() as u32);
        for s in v {
            self.str(s.as_ref());
        }
        self
    }

    pub fn put<T: Wire>(&mut self, v: &T) -> &mut Self {
        v.encode(self);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(StoreError::Protocol(format!(
                "payload truncated: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| StoreError::Protocol("invalid utf-8 string".into()))
    }

    pub fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.str()).collect()
    }

    pub fn get<T: Wire>(&mut self) -> Result<T> {
        T::decode(self)
    }

    pub fn end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(StoreError::Protocol(format!(
                "{} trailing bytes in payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub trait Wire: Sized {
    fn encode(&self, e: &mut Encoder);
    fn decode(d: &mut Decoder<'_>) -> Result<Self>;
}

fn kind_code(kind: ServiceKind) -> u8 {
    kind.tier() as u8
}

fn kind_from_code(code: u8) -> Result<ServiceKind> {
    Ok(match code {
        0 => ServiceKind::Management,
        1 => ServiceKind::Metadata,
        2 => ServiceKind::Storage,
        3 => ServiceKind::Monitoring,
        4 => ServiceKind::Client,
        other => return Err(StoreError::Protocol(format!("unknown service kind {other}"))),
    })
}

impl Wire for ServiceKind {
    fn encode(&self, e: &mut Encoder) {
        e.u8(kind_code(*self));
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        kind_from_code(d.u8()?)
    }
}

impl Wire for Endpoint {
    fn encode(&self, e: &mut Encoder) {
        e.str(&self.host).u16(self.port);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        Ok(Endpoint {
            host: d.str()?,
            port: d.u16()?,
        })
    }
}

/// One registered service as known to the management daemon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub kind: ServiceKind,
    pub id: String,
    /// Position within its kind (`meta_index` / `target_index`).
    pub index: u32,
    pub endpoint: Endpoint,
}

impl Wire for RegistryEntry {
    fn encode(&self, e: &mut Encoder) {
        e.put(&self.kind).str(&self.id).u32(self.index).put(&self.endpoint);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        Ok(RegistryEntry {
            kind: d.get()?,
            id: d.str()?,
            index: d.u32()?,
            endpoint: d.get()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Random id chosen by the management daemon at startup; equal ids mean
    /// the same namespace.
    pub fs_id: u64,
    pub entries: Vec<RegistryEntry>,
}

impl Snapshot {
    /// Entries of one kind, ordered by index.
    pub fn of(&self, kind: ServiceKind) -> Vec<&RegistryEntry> {
        let mut v: Vec<&RegistryEntry> = self.entries.iter().filter(|e| e.kind == kind).collect();
        v.sort_by_key(|e| e.index);
        v
    }

    /// (metadata, storage) counts.
    pub fn counts(&self) -> (usize, usize) {
        (
            self.of(ServiceKind::Metadata).len(),
            self.of(ServiceKind::Storage).len(),
        )
    }
}

impl Wire for Snapshot {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.fs_id).u32(self.entries.len() as u32);
        for entry in &self.entries {
            e.put(entry);
        }
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let fs_id = d.u64()?;
        let n = d.u32()?;
        let entries = (0..n).map(|_| d.get()).collect::<Result<_>>()?;
        Ok(Snapshot { fs_id, entries })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetStats {
    pub target_id: String,
    pub chunks: u64,
    pub used_bytes: u64,
    pub capacity_bytes: u64,
}

impl Wire for TargetStats {
    fn encode(&self, e: &mut Encoder) {
        e.str(&self.target_id)
            .u64(self.chunks)
            .u64(self.used_bytes)
            .u64(self.capacity_bytes);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        Ok(TargetStats {
            target_id: d.str()?,
            chunks: d.u64()?,
            used_bytes: d.u64()?,
            capacity_bytes: d.u64()?,
        })
    }
}

impl Wire for StripeMap {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.file_id)
            .u64(self.stripe_size_bytes)
            .strs(&self.targets)
            .u32(self.start_target_index as u32);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let m = StripeMap {
            file_id: d.u64()?,
            stripe_size_bytes: d.u64()?,
            targets: d.strs()?,
            start_target_index: d.u32()? as usize,
        };
        if m.targets.is_empty() || m.start_target_index >= m.targets.len() || m.stripe_size_bytes == 0 {
            return Err(StoreError::Protocol("malformed stripe map".into()));
        }
        Ok(m)
    }
}

impl Wire for FileMeta {
    fn encode(&self, e: &mut Encoder) {
        e.str(&self.path)
            .u64(self.file_id)
            .u64(self.size_bytes)
            .put(&self.stripe);
        e.u32(self.attrs.len() as u32);
        for (k, v) in &self.attrs {
            e.str(k).str(v);
        }
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let path = d.str()?;
        let file_id = d.u64()?;
        let size_bytes = d.u64()?;
        let stripe = d.get()?;
        let n = d.u32()?;
        let mut attrs = BTreeMap::new();
        for _ in 0..n {
            attrs.insert(d.str()?, d.str()?);
        }
        Ok(FileMeta {
            path,
            file_id,
            size_bytes,
            stripe,
            attrs,
        })
    }
}

impl Wire for Entry {
    fn encode(&self, e: &mut Encoder) {
        match self {
            Entry::Dir { path } => {
                e.u8(0).str(path);
            }
            Entry::File(meta) => {
                e.u8(1).put(meta);
            }
        }
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        match d.u8()? {
            0 => Ok(Entry::Dir { path: d.str()? }),
            1 => Ok(Entry::File(d.get()?)),
            other => Err(StoreError::Protocol(format!("unknown entry tag {other}"))),
        }
    }
}

/// Encode an error for an ERR frame.
pub fn encode_error(err: &StoreError) -> Vec<u8> {
    let (code, a, b): (u16, String, String) = match err {
        StoreError::NotFound(p) => (1, p.clone(), String::new()),
        StoreError::Exists(p) => (2, p.clone(), String::new()),
        StoreError::ParentMissing(p) => (3, p.clone(), String::new()),
        StoreError::NotADirectory(p) => (4, p.clone(), String::new()),
        StoreError::IsADirectory(p) => (5, p.clone(), String::new()),
        StoreError::NotEmpty(p) => (6, p.clone(), String::new()),
        StoreError::InvalidPath(p) => (7, p.clone(), String::new()),
        StoreError::TargetDown { target, reason } => (8, target.clone(), reason.clone()),
        StoreError::NoSpace(t) => (9, t.clone(), String::new()),
        StoreError::Duplicate(id) => (10, id.clone(), String::new()),
        StoreError::Protocol(m) => (11, m.clone(), String::new()),
        other => (0, other.to_string(), String::new()),
    };
    let mut e = Encoder::new();
    e.u16(code).str(&a).str(&b);
    e.finish()
}

pub fn decode_error(payload: &[u8]) -> StoreError {
    let mut d = Decoder::new(payload);
    let parsed = (|| -> Result<(u16, String, String)> { Ok((d.u16()?, d.str()?, d.str()?)) })();
    match parsed {
        Ok((code, a, b)) => match code {
            1 => StoreError::NotFound(a),
            2 => StoreError::Exists(a),
            3 => StoreError::ParentMissing(a),
            4 => StoreError::NotADirectory(a),
            5 => StoreError::IsADirectory(a),
            6 => StoreError::NotEmpty(a),
            7 => StoreError::InvalidPath(a),
            8 => StoreError::TargetDown { target: a, reason: b },
            9 => StoreError::NoSpace(a),
            10 => StoreError::Duplicate(a),
            11 => StoreError::Protocol(a),
            _ => StoreError::Remote(a),
        },
        Err(e) => e,
    }
}
