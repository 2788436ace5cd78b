//! Round-robin chunk placement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// 64-bit FNV-1a. Used for start-target selection and metadata sharding, so
/// the value must stay stable across releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripeMap {
    pub file_id: u64,
    pub stripe_size_bytes: u64,
    pub targets: Vec<String>,
    pub start_target_index: usize,
}

/// Piece of a byte range that falls inside a single chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub chunk: u64,
    /// Offset inside the chunk.
    pub chunk_offset: u64,
    /// Offset inside the caller's buffer.
    pub buf_offset: usize,
    pub len: usize,
}

impl StripeMap {
    /// Build a map whose start target is derived from the path hash.
    /// Returns `None` for an empty or duplicated target list or a zero stripe.
    pub fn for_path(file_id: u64, path: &str, stripe_size_bytes: u64, targets: Vec<String>) -> Option<StripeMap> {
        if targets.is_empty() || stripe_size_bytes == 0 {
            return None;
        }
        let mut seen = std::collections::BTreeSet::new();
        if !targets.iter().all(|t| seen.insert(t)) {
            return None;
        }
        let start = (fnv1a(path.as_bytes()) % targets.len() as u64) as usize;
        Some(StripeMap {
            file_id,
            stripe_size_bytes,
            targets,
            start_target_index: start,
        })
    }

    pub fn target_index(&self, chunk: u64) -> usize {
        ((self.start_target_index as u64 + chunk) % self.targets.len() as u64) as usize
    }

    pub fn target_for(&self, chunk: u64) -> &str {
        &self.targets[self.target_index(chunk)]
    }

    /// Split `[offset, offset + len)` at stripe boundaries.
    pub fn segments(&self, offset: u64, len: usize) -> Vec<Segment> {
        let stripe = self.stripe_size_bytes;
        let mut out = Vec::new();
        let mut pos = offset;
        let end = offset + len as u64;
        while pos < end {
            let chunk = pos / stripe;
            let chunk_offset = pos % stripe;
            let n = (stripe - chunk_offset).min(end - pos);
            out.push(Segment {
                chunk,
                chunk_offset,
                buf_offset: (pos - offset) as usize,
                len: n as usize,
            });
            pos += n;
        }
        out
    }

    /// Length chunk `chunk` must have in a fully written file of `size` bytes.
    pub fn chunk_len_for_size(&self, chunk: u64, size: u64) -> u64 {
        let start = chunk * self.stripe_size_bytes;
        size.saturating_sub(start).min(self.stripe_size_bytes)
    }

    /// Bytes each target holds for a fully written file of `size` bytes.
    pub fn bytes_per_target(&self, size: u64) -> BTreeMap<&str, u64> {
        let mut out: BTreeMap<&str, u64> = self.targets.iter().map(|t| (t.as_str(), 0)).collect();
        let chunks = size.div_ceil(self.stripe_size_bytes);
        for k in 0..chunks {
            *out.get_mut(self.target_for(k)).unwrap() += self.chunk_len_for_size(k, size);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::MIB;
    use proptest::prelude::*;

    fn targets(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn map(t: usize, stripe: u64, start: usize) -> StripeMap {
        StripeMap {
            file_id: 1,
            stripe_size_bytes: stripe,
            targets: targets(t),
            start_target_index: start,
        }
    }

    #[test]
    fn four_mib_over_four_targets() {
        let m = map(4, MIB, 0);
        let segs = m.segments(0, 4 * MIB as usize);
        assert_eq!(segs.len(), 4);
        for (k, s) in segs.iter().enumerate() {
            assert_eq!(s.chunk, k as u64);
            assert_eq!(s.len as u64, MIB);
            assert_eq!(m.target_index(s.chunk), k);
        }
    }

    #[test]
    fn boundary_split() {
        let m = map(4, MIB, 0);
        let segs = m.segments(MIB - 1, 3);
        assert_eq!(
            segs,
            vec![
                Segment {
                    chunk: 0,
                    chunk_offset: MIB - 1,
                    buf_offset: 0,
                    len: 1
                },
                Segment {
                    chunk: 1,
                    chunk_offset: 0,
                    buf_offset: 1,
                    len: 2
                },
            ]
        );
    }

    #[test]
    fn start_index_is_deterministic() {
        let a = StripeMap::for_path(1, "/a", MIB, targets(4)).unwrap();
        let b = StripeMap::for_path(99, "/a", MIB, targets(4)).unwrap();
        assert_eq!(a.start_target_index, b.start_target_index);
        assert!(StripeMap::for_path(1, "/a", MIB, vec![]).is_none());
        assert!(StripeMap::for_path(1, "/a", MIB, vec!["x".into(), "x".into()]).is_none());
        assert!(StripeMap::for_path(1, "/a", 0, targets(2)).is_none());
    }

    #[test]
    fn start_index_covers_all_targets() {
        let mut hits = [0usize; 4];
        for i in 0..1000 {
            let m = StripeMap::for_path(i, &format!("/file.{i}"), MIB, targets(4)).unwrap();
            hits[m.start_target_index] += 1;
        }
        assert!(hits.iter().all(|h| *h > 0), "{hits:?}");
    }

    proptest! {
        #[test]
        fn segments_tile_the_range(off in 0u64..10_000_000, len in 0usize..5_000_000, stripe_pow in 12u32..21) {
            let m = map(3, 1 << stripe_pow, 1);
            let segs = m.segments(off, len);
            let total: usize = segs.iter().map(|s| s.len).sum();
            prop_assert_eq!(total, len);
            let mut expect_buf = 0usize;
            for s in &segs {
                prop_assert_eq!(s.buf_offset, expect_buf);
                prop_assert!(s.chunk_offset + s.len as u64 <= m.stripe_size_bytes);
                prop_assert_eq!(s.chunk * m.stripe_size_bytes + s.chunk_offset, off + s.buf_offset as u64);
                expect_buf += s.len;
            }
        }

        #[test]
        fn sequential_file_is_balanced(size in 0u64..50_000_000, t in 1usize..9, start in 0usize..8) {
            let m = map(t, MIB, start % t);
            let per = m.bytes_per_target(size);
            let max = per.values().max().copied().unwrap_or(0);
            let min = per.values().min().copied().unwrap_or(0);
            prop_assert!(max - min <= MIB);
            prop_assert_eq!(per.values().sum::<u64>(), size);
        }
    }
}
