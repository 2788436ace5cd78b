//! Namespace state held by one metadata shard.
//!
//! The namespace is partitioned by parent directory: an entry `/a/b/c`
//! lives on shard `fnv1a("/a/b") % shards`. A shard therefore knows the full
//! listing of every directory that hashes to it, which is what `rmdir`
//! emptiness checks and `LIST` need. Parent existence is checked by the
//! client against the parent's own shard.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::stripe::{fnv1a, StripeMap};
use super::{Result, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub path: String,
    pub file_id: u64,
    pub size_bytes: u64,
    pub stripe: StripeMap,
    pub attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Entry {
    Dir { path: String },
    File(FileMeta),
}

impl Entry {
    pub fn path(&self) -> &str {
        match self {
            Entry::Dir { path } => path,
            Entry::File(m) => &m.path,
        }
    }

    pub fn is_dir(&self) -> bool {
        matches!(self, Entry::Dir { .. })
    }
}

/// Canonical form of an absolute path: leading `/`, no empty, `.` or `..`
/// components, no trailing slash (except the root itself).
pub fn normalize(path: &str) -> Result<String> {
    if !path.starts_with('/') {
        return Err(StoreError::InvalidPath(path.to_string()));
    }
    let mut parts = Vec::new();
    for comp in path.split('/').filter(|c| !c.is_empty()) {
        if comp == "." || comp == ".." || comp.contains('\0') {
            return Err(StoreError::InvalidPath(path.to_string()));
        }
        parts.push(comp);
    }
    Ok(format!("/{}", parts.join("/")))
}

/// Parent of a normalized path; `None` for the root.
pub fn parent(path: &str) -> Option<&str> {
    if path == "/" {
        return None;
    }
    match path.rfind('/') {
        Some(0) => Some("/"),
        Some(i) => Some(&path[..i]),
        None => None,
    }
}

pub fn file_name(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or("")
}

pub fn join(dir: &str, name: &str) -> String {
    if dir == "/" {
        format!("/{name}")
    } else {
        format!("{dir}/{name}")
    }
}

/// Shard owning the entry at `path` (by its parent directory).
pub fn shard_for_entry(path: &str, shards: usize) -> usize {
    shard_for_dir(parent(path).unwrap_or("/"), shards)
}

/// Shard holding the listing of directory `dir`.
pub fn shard_for_dir(dir: &str, shards: usize) -> usize {
    (fnv1a(dir.as_bytes()) % shards.max(1) as u64) as usize
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    entry: Entry,
}

/// In-memory namespace shard with optional write-through persistence of
/// one record file per entry.
#[derive(Debug)]
pub struct MetaShard {
    index: usize,
    next_file: u64,
    entries: BTreeMap<String, Entry>,
    children: BTreeMap<String, BTreeSet<String>>,
    persist: Option<PathBuf>,
    inline_attrs: bool,
}

impl MetaShard {
    pub fn new(index: usize) -> Self {
        MetaShard {
            index,
            next_file: 1,
            entries: BTreeMap::new(),
            children: BTreeMap::new(),
            persist: None,
            inline_attrs: true,
        }
    }

    /// Shard that persists records under `dir`, reloading whatever is there.
    /// With `inline_attrs` file attributes are kept inside the record (the
    /// extended-attribute layout); otherwise they go to a `.attrs` sidecar.
    pub fn persistent(index: usize, dir: PathBuf, inline_attrs: bool) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(format!("creating {}", dir.display()), e))?;
        let mut shard = MetaShard::new(index);
        shard.inline_attrs = inline_attrs;
        for item in fs::read_dir(&dir).map_err(|e| StoreError::io("listing metadata records", e))? {
            let item = item.map_err(|e| StoreError::io("listing metadata records", e))?;
            let p = item.path();
            if p.extension().is_some_and(|x| x == "attrs") {
                continue;
            }
            let text = fs::read_to_string(&p).map_err(|e| StoreError::io(format!("reading {}", p.display()), e))?;
            let rec: Record = serde_json::from_str(&text)
                .map_err(|e| StoreError::Protocol(format!("corrupt record {}: {e}", p.display())))?;
            let mut entry = rec.entry;
            if let Entry::File(meta) = &mut entry {
                if !inline_attrs {
                    if let Ok(a) = fs::read_to_string(p.with_extension("attrs")) {
                        meta.attrs = serde_json::from_str(&a).unwrap_or_default();
                    }
                }
                shard.next_file = shard.next_file.max((meta.file_id & 0xffff_ffff_ffff) + 1);
            }
            shard.insert(entry);
        }
        shard.persist = Some(dir);
        Ok(shard)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, entry: Entry) {
        let path = entry.path().to_string();
        if let Some(p) = parent(&path) {
            self.children
                .entry(p.to_string())
                .or_default()
                .insert(file_name(&path).to_string());
        }
        self.entries.insert(path, entry);
    }

    fn remove(&mut self, path: &str) -> Option<Entry> {
        let entry = self.entries.remove(path)?;
        if let Some(p) = parent(path) {
            if let Some(set) = self.children.get_mut(p) {
                set.remove(file_name(path));
                if set.is_empty() {
                    self.children.remove(p);
                }
            }
        }
        Some(entry)
    }

    fn record_path(&self, path: &str) -> Option<PathBuf> {
        self.persist
            .as_ref()
            .map(|d| d.join(format!("{:016x}", fnv1a(path.as_bytes()))))
    }

    fn save(&self, entry: &Entry) -> Result<()> {
        let Some(rec_path) = self.record_path(entry.path()) else {
            return Ok(());
        };
        let mut stored = entry.clone();
        if let Entry::File(meta) = &mut stored {
            if !self.inline_attrs {
                let attrs = std::mem::take(&mut meta.attrs);
                fs::write(rec_path.with_extension("attrs"), serde_json::to_vec(&attrs).unwrap())
                    .map_err(|e| StoreError::io("writing attribute sidecar", e))?;
            }
        }
        let body = serde_json::to_vec(&Record { entry: stored }).unwrap();
        fs::write(&rec_path, body).map_err(|e| StoreError::io(format!("writing {}", rec_path.display()), e))
    }

    fn erase(&self, path: &str) {
        if let Some(rec_path) = self.record_path(path) {
            let _ = fs::remove_file(rec_path.with_extension("attrs"));
            let _ = fs::remove_file(rec_path);
        }
    }

    pub fn mkdir(&mut self, path: &str) -> Result<()> {
        let path = normalize(path)?;
        if path == "/" || self.entries.contains_key(&path) {
            return Err(StoreError::Exists(path));
        }
        let entry = Entry::Dir { path };
        self.save(&entry)?;
        self.insert(entry);
        Ok(())
    }

    /// Remove a directory entry. Emptiness is checked by the caller against
    /// the shard holding the directory's listing.
    pub fn rmdir(&mut self, path: &str) -> Result<()> {
        let path = normalize(path)?;
        match self.entries.get(&path) {
            None => Err(StoreError::NotFound(path)),
            Some(Entry::File(_)) => Err(StoreError::NotADirectory(path)),
            Some(Entry::Dir { .. }) => {
                self.remove(&path);
                self.erase(&path);
                Ok(())
            }
        }
    }

    pub fn create(&mut self, path: &str, stripe_size: u64, targets: Vec<String>) -> Result<FileMeta> {
        let path = normalize(path)?;
        if path == "/" || self.entries.contains_key(&path) {
            return Err(StoreError::Exists(path));
        }
        let file_id = ((self.index as u64 + 1) << 48) | self.next_file;
        let stripe = StripeMap::for_path(file_id, &path, stripe_size, targets)
            .ok_or_else(|| StoreError::Protocol("invalid stripe policy".into()))?;
        let meta = FileMeta {
            path: path.clone(),
            file_id,
            size_bytes: 0,
            stripe,
            attrs: BTreeMap::new(),
        };
        let entry = Entry::File(meta.clone());
        self.save(&entry)?;
        self.next_file += 1;
        self.insert(entry);
        Ok(meta)
    }

    pub fn stat(&self, path: &str) -> Result<Entry> {
        let path = normalize(path)?;
        if path == "/" {
            return Ok(Entry::Dir { path });
        }
        self.entries.get(&path).cloned().ok_or(StoreError::NotFound(path))
    }

    pub fn unlink(&mut self, path: &str) -> Result<FileMeta> {
        let path = normalize(path)?;
        match self.entries.get(&path) {
            None => Err(StoreError::NotFound(path)),
            Some(Entry::Dir { .. }) => Err(StoreError::IsADirectory(path)),
            Some(Entry::File(_)) => {
                let Some(Entry::File(meta)) = self.remove(&path) else {
                    unreachable!()
                };
                self.erase(&path);
                Ok(meta)
            }
        }
    }

    /// Grow a file to at least `size`; returns `(old, new)` sizes.
    pub fn extend(&mut self, path: &str, size: u64) -> Result<(u64, u64)> {
        let path = normalize(path)?;
        let entry = match self.entries.get_mut(&path) {
            None => return Err(StoreError::NotFound(path)),
            Some(Entry::Dir { .. }) => return Err(StoreError::IsADirectory(path)),
            Some(e) => e,
        };
        let Entry::File(meta) = entry else { unreachable!() };
        let old = meta.size_bytes;
        if size > old {
            meta.size_bytes = size;
            let snapshot = entry.clone();
            self.save(&snapshot)?;
        }
        Ok((old, old.max(size)))
    }

    /// Names of the entries this shard holds under `dir`.
    pub fn list(&self, dir: &str) -> Result<Vec<String>> {
        let dir = normalize(dir)?;
        Ok(self
            .children
            .get(&dir)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default())
    }
}
