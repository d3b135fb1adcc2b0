//! Content-addressed store of compressed segments.
//!
//! Keys cover the segment's token ids, the compressor version (base and
//! compressor weights) and the compression rate, so a hit always returns the
//! CEs a fresh compression would produce. Entries live in memory with LRU
//! eviction; an optional directory keeps one `<key>.ceblob` file per entry.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorBundle;
use crate::compressor::{CompressedSegment, Compressor};
use crate::error::{Error, Result};
use crate::segmenter::{segment, Segment, SegmentationConfig, TokenId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: u64,
    pub bytes: u64,
    pub evictions: u64,
}

impl CacheStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictionPolicy {
    /// Least recently used entries go first until at most this many remain.
    Lru { capacity: usize },
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    pub hit: bool,
    /// Attention pairs spent compressing; zero on a hit.
    pub pairs: u64,
}

struct Entry {
    segment: CompressedSegment<f32>,
    last_used: u64,
}

#[derive(Default)]
struct Inner {
    map: HashMap<String, Entry>,
    clock: u64,
    stats: CacheStats,
}

impl Inner {
    fn touch(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn insert(&mut self, key: String, segment: CompressedSegment<f32>) {
        let bytes = entry_bytes(&segment);
        let last_used = self.touch();
        if let Some(old) = self.map.insert(key, Entry { segment, last_used }) {
            self.stats.bytes -= entry_bytes(&old.segment);
        } else {
            self.stats.entries += 1;
        }
        self.stats.bytes += bytes;
    }

    fn evict_to(&mut self, capacity: usize) -> usize {
        let mut evicted = 0;
        while self.map.len() > capacity {
            let oldest = self
                .map
                .iter()
                .min_by_key(|(_, e)| e.last_used)
                .map(|(k, _)| k.clone())
                .expect("nonempty map");
            let e = self.map.remove(&oldest).expect("present");
            self.stats.entries -= 1;
            self.stats.bytes -= entry_bytes(&e.segment);
            self.stats.evictions += 1;
            evicted += 1;
        }
        evicted
    }
}

fn entry_bytes(seg: &CompressedSegment<f32>) -> u64 {
    std::mem::size_of_val(seg.concept_embeddings.data()) as u64
}

pub struct CeCache {
    inner: Mutex<Inner>,
    policy: EvictionPolicy,
    dir: Option<PathBuf>,
}

impl CeCache {
    pub fn in_memory(policy: EvictionPolicy) -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            policy,
            dir: None,
        }
    }

    /// Directory-backed cache; the directory is created if missing.
    pub fn with_dir(dir: impl Into<PathBuf>, policy: EvictionPolicy) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            inner: Mutex::new(Inner::default()),
            policy,
            dir: Some(dir),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn stats(&self) -> CacheStats {
        self.inner.lock().expect("cache lock").stats
    }

    pub fn contains(&self, key: &str) -> bool {
        self.inner.lock().expect("cache lock").map.contains_key(key)
    }

    fn blob_path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.ceblob")))
    }

    fn load_from_disk(&self, key: &str) -> Option<CompressedSegment<f32>> {
        let path = self.blob_path(key)?;
        if !path.exists() {
            return None;
        }
        match TensorBundle::read_single(&path).and_then(|b| CompressedSegment::from_bundle(&b)) {
            Ok(seg) if seg.source_hash == key => Some(seg),
            Ok(_) => {
                warn!("cache file {} does not match its key; ignoring", path.display());
                None
            }
            Err(e) => {
                warn!("unreadable cache file {}: {e}", path.display());
                None
            }
        }
    }

    fn store_to_disk(&self, seg: &CompressedSegment<f32>) {
        if let Some(path) = self.blob_path(&seg.source_hash) {
            if let Err(e) = seg.to_bundle().write_single(&path) {
                warn!("cache store failed, continuing without persistence: {e}");
            }
        }
    }

    /// Returns the segment's CEs, compressing only on a miss.
    pub fn get_or_compress(
        &self,
        compressor: &Compressor<'_, f32>,
        seg: &Segment,
    ) -> Result<(CompressedSegment<f32>, Lookup)> {
        let key = compressor.key(&seg.token_ids);
        {
            let mut inner = self.inner.lock().expect("cache lock");
            let now = inner.touch();
            if let Some(e) = inner.map.get_mut(&key) {
                e.last_used = now;
                let out = e.segment.clone();
                inner.stats.hits += 1;
                return Ok((out, Lookup { hit: true, pairs: 0 }));
            }
        }
        if let Some(seg) = self.load_from_disk(&key) {
            let mut inner = self.inner.lock().expect("cache lock");
            inner.stats.hits += 1;
            inner.insert(key, seg.clone());
            self.apply_policy(&mut inner);
            return Ok((seg, Lookup { hit: true, pairs: 0 }));
        }

        // Concurrent misses on one key may both compute; results are identical.
        let (compressed, pairs) = compressor.compress_segment(seg)?;
        self.store_to_disk(&compressed);
        let mut inner = self.inner.lock().expect("cache lock");
        inner.stats.misses += 1;
        inner.insert(key, compressed.clone());
        self.apply_policy(&mut inner);
        Ok((compressed, Lookup { hit: false, pairs }))
    }

    fn apply_policy(&self, inner: &mut Inner) {
        if let EvictionPolicy::Lru { capacity } = self.policy {
            inner.evict_to(capacity);
        }
    }

    /// Evicts in-memory entries down to the policy's capacity. Files in the
    /// cache directory are kept.
    pub fn evict(&self, policy: EvictionPolicy) -> usize {
        let mut inner = self.inner.lock().expect("cache lock");
        match policy {
            EvictionPolicy::Unbounded => 0,
            EvictionPolicy::Lru { capacity } => inner.evict_to(capacity),
        }
    }

    /// Segments a context and resolves every segment through the cache.
    pub fn compress_context(
        &self,
        compressor: &Compressor<'_, f32>,
        token_ids: &[TokenId],
        seg_cfg: &SegmentationConfig,
    ) -> Result<(Vec<CompressedSegment<f32>>, Vec<Lookup>)> {
        let segments = segment(token_ids, seg_cfg)?;
        let mut out = Vec::with_capacity(segments.len());
        let mut lookups = Vec::with_capacity(segments.len());
        for s in &segments {
            let (c, l) = self.get_or_compress(compressor, s)?;
            out.push(c);
            lookups.push(l);
        }
        Ok((out, lookups))
    }
}
