//! Chunk store behind one storage target.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::wire::TargetStats;
use super::{Result, StoreError};

const LOCK_STRIPES: usize = 64;

#[derive(Debug, Default)]
struct Index {
    chunks: BTreeMap<(u64, u64), u64>,
    used: u64,
}

/// Chunks live in `<data_dir>/chunks/<file_id>.<chunk_index>`. Writes to the
/// same chunk are serialized by a striped lock; different chunks proceed in
/// parallel.
#[derive(Debug)]
pub struct TargetStore {
    target_id: String,
    dir: PathBuf,
    capacity: u64,
    index: Mutex<Index>,
    locks: Vec<Mutex<()>>,
}

impl TargetStore {
    /// Open (or create) the store under `data_dir`, indexing existing chunks.
    pub fn open(target_id: &str, data_dir: &Path, capacity: u64) -> Result<Self> {
        let dir = data_dir.join("chunks");
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(format!("creating {}", dir.display()), e))?;
        let mut index = Index::default();
        for item in fs::read_dir(&dir).map_err(|e| StoreError::io("listing chunks", e))? {
            let item = item.map_err(|e| StoreError::io("listing chunks", e))?;
            let name = item.file_name();
            let Some(key) = name.to_str().and_then(parse_chunk_name) else {
                continue;
            };
            let len = item.metadata().map(|m| m.len()).unwrap_or(0);
            index.used += len;
            index.chunks.insert(key, len);
        }
        Ok(TargetStore {
            target_id: target_id.to_string(),
            dir,
            capacity,
            index: Mutex::new(index),
            locks: (0..LOCK_STRIPES).map(|_| Mutex::new(())).collect(),
        })
    }

    pub fn target_id(&self) -> &str {
        &self.target_id
    }

    pub fn chunk_path(&self, file_id: u64, chunk: u64) -> PathBuf {
        self.dir.join(format!("{file_id}.{chunk}"))
    }

    fn lock_for(&self, file_id: u64, chunk: u64) -> &Mutex<()> {
        let h = file_id.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ chunk;
        &self.locks[(h % LOCK_STRIPES as u64) as usize]
    }

    fn chunk_len(&self, file_id: u64, chunk: u64) -> u64 {
        let idx = self.index.lock().unwrap();
        idx.chunks.get(&(file_id, chunk)).copied().unwrap_or(0)
    }

    /// Reserve growth of one chunk from `old` to `new` bytes.
    fn reserve(&self, file_id: u64, chunk: u64, old: u64, new: u64) -> Result<()> {
        let mut idx = self.index.lock().unwrap();
        let growth = new.saturating_sub(old);
        if idx.used + growth > self.capacity {
            return Err(StoreError::NoSpace(self.target_id.clone()));
        }
        idx.used += growth;
        idx.chunks.insert((file_id, chunk), old.max(new));
        Ok(())
    }

    fn unreserve(&self, file_id: u64, chunk: u64, old: u64, new: u64) {
        let mut idx = self.index.lock().unwrap();
        idx.used -= new.saturating_sub(old);
        if old == 0 {
            idx.chunks.remove(&(file_id, chunk));
        } else {
            idx.chunks.insert((file_id, chunk), old);
        }
    }

    pub fn write_chunk(&self, file_id: u64, chunk: u64, offset: u64, data: &[u8]) -> Result<()> {
        let _g = self.lock_for(file_id, chunk).lock().unwrap();
        let old = self.chunk_len(file_id, chunk);
        let new = old.max(offset + data.len() as u64);
        self.reserve(file_id, chunk, old, new)?;
        let path = self.chunk_path(file_id, chunk);
        let res = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .and_then(|f| f.write_all_at(data, offset));
        if let Err(e) = res {
            self.unreserve(file_id, chunk, old, new);
            return Err(StoreError::io(format!("writing {}", path.display()), e));
        }
        Ok(())
    }

    /// Bytes stored in `[offset, offset + len)` of a chunk; short (possibly
    /// empty) when the chunk ends earlier or was never written.
    pub fn read_chunk(&self, file_id: u64, chunk: u64, offset: u64, len: u64) -> Result<Vec<u8>> {
        let stored = self.chunk_len(file_id, chunk);
        if offset >= stored {
            return Ok(Vec::new());
        }
        let n = len.min(stored - offset) as usize;
        let path = self.chunk_path(file_id, chunk);
        let mut buf = vec![0u8; n];
        let f = File::open(&path).map_err(|e| StoreError::io(format!("opening {}", path.display()), e))?;
        let mut filled = 0;
        while filled < n {
            let got = f
                .read_at(&mut buf[filled..], offset + filled as u64)
                .map_err(|e| StoreError::io(format!("reading {}", path.display()), e))?;
            if got == 0 {
                break;
            }
            filled += got;
        }
        buf.truncate(filled);
        Ok(buf)
    }

    /// Grow a chunk to at least `len` bytes; new bytes read as zeros.
    pub fn extend_chunk(&self, file_id: u64, chunk: u64, len: u64) -> Result<()> {
        let _g = self.lock_for(file_id, chunk).lock().unwrap();
        let old = self.chunk_len(file_id, chunk);
        if old >= len {
            return Ok(());
        }
        self.reserve(file_id, chunk, old, len)?;
        let path = self.chunk_path(file_id, chunk);
        let res = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .and_then(|f| f.set_len(len));
        if let Err(e) = res {
            self.unreserve(file_id, chunk, old, len);
            return Err(StoreError::io(format!("extending {}", path.display()), e));
        }
        Ok(())
    }

    /// Drop every chunk of a file; returns `(chunks, bytes)` removed.
    pub fn delete_file(&self, file_id: u64) -> Result<(u64, u64)> {
        let victims: Vec<(u64, u64)> = {
            let idx = self.index.lock().unwrap();
            idx.chunks
                .range((file_id, 0)..=(file_id, u64::MAX))
                .map(|(k, v)| (k.1, *v))
                .collect()
        };
        let mut bytes = 0;
        for (chunk, _) in &victims {
            let _g = self.lock_for(file_id, *chunk).lock().unwrap();
            let path = self.chunk_path(file_id, *chunk);
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(StoreError::io(format!("removing {}", path.display()), e)),
            }
            let mut idx = self.index.lock().unwrap();
            if let Some(len) = idx.chunks.remove(&(file_id, *chunk)) {
                idx.used -= len;
                bytes += len;
            }
        }
        Ok((victims.len() as u64, bytes))
    }

    pub fn fsync_file(&self, file_id: u64) -> Result<()> {
        for (chunk, _) in self.list_chunks(file_id) {
            let path = self.chunk_path(file_id, chunk);
            if let Ok(f) = File::open(&path) {
                f.sync_all()
                    .map_err(|e| StoreError::io(format!("syncing {}", path.display()), e))?;
            }
        }
        Ok(())
    }

    /// `(chunk_index, length)` of every chunk stored for a file.
    pub fn list_chunks(&self, file_id: u64) -> Vec<(u64, u64)> {
        let idx = self.index.lock().unwrap();
        idx.chunks
            .range((file_id, 0)..=(file_id, u64::MAX))
            .map(|(k, v)| (k.1, *v))
            .collect()
    }

    pub fn stats(&self) -> TargetStats {
        let idx = self.index.lock().unwrap();
        TargetStats {
            target_id: self.target_id.clone(),
            chunks: idx.chunks.len() as u64,
            used_bytes: idx.used,
            capacity_bytes: self.capacity,
        }
    }
}

fn parse_chunk_name(name: &str) -> Option<(u64, u64)> {
    let (a, b) = name.split_once('.')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_extend_delete() {
        let dir = tempfile::tempdir().unwrap();
        let t = TargetStore::open("t0", dir.path(), 1 << 20).unwrap();
        t.write_chunk(7, 0, 0, b"hello").unwrap();
        t.write_chunk(7, 0, 10, b"world").unwrap();
        assert_eq!(t.read_chunk(7, 0, 0, 100).unwrap(), b"hello\0\0\0\0\0world");
        assert!(t.read_chunk(7, 1, 0, 10).unwrap().is_empty());
        t.extend_chunk(7, 1, 32).unwrap();
        assert_eq!(t.read_chunk(7, 1, 0, 64).unwrap(), vec![0u8; 32]);
        assert_eq!(t.list_chunks(7), vec![(0, 15), (1, 32)]);
        assert!(dir.path().join("chunks/7.0").is_file());
        assert_eq!(t.stats().used_bytes, 47);
        assert_eq!(t.delete_file(7).unwrap(), (2, 47));
        assert_eq!(t.stats().used_bytes, 0);
        assert_eq!(fs::read_dir(dir.path().join("chunks")).unwrap().count(), 0);
    }

    #[test]
    fn capacity_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let t = TargetStore::open("t0", dir.path(), 8).unwrap();
        t.write_chunk(1, 0, 0, b"12345678").unwrap();
        assert!(matches!(t.write_chunk(1, 1, 0, b"x"), Err(StoreError::NoSpace(_))));
        // rewriting in place needs no extra space
        t.write_chunk(1, 0, 0, b"abcd").unwrap();
        assert_eq!(t.stats().chunks, 1);
    }

    #[test]
    fn reopen_rebuilds_index() {
        let dir = tempfile::tempdir().unwrap();
        {
            let t = TargetStore::open("t0", dir.path(), 1 << 20).unwrap();
            t.write_chunk(3, 2, 0, &[1; 100]).unwrap();
        }
        let t = TargetStore::open("t0", dir.path(), 1 << 20).unwrap();
        assert_eq!(t.list_chunks(3), vec![(2, 100)]);
        assert_eq!(t.stats().used_bytes, 100);
    }
}
