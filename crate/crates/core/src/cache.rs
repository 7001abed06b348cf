//! In-memory store of per-slice embeddings with byte-capacity LRU eviction,
//! and the order in which slices get precomputed.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::backend::Embedding;
use crate::volume::{Axis, SliceRef, VolumeId, WindowLevel};

pub const DEFAULT_CAPACITY_BYTES: u64 = 8 << 30;

/// 64-bit FNV-1a over `(window, level)` rounded to 1e-6.
pub fn wl_hash(wl: WindowLevel) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let quantize = |v: f64| (v * 1e6).round() as i64;
    let mut h = OFFSET;
    for part in [quantize(wl.window()), quantize(wl.level())] {
        for byte in part.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EmbeddingKey {
    pub volume_id: VolumeId,
    pub model_id: Arc<str>,
    pub axis: Axis,
    pub slice_index: usize,
    pub wl_hash: u64,
}

impl EmbeddingKey {
    pub fn new(volume_id: VolumeId, model_id: &str, slice: SliceRef, wl: WindowLevel) -> Self {
        EmbeddingKey {
            volume_id,
            model_id: Arc::from(model_id),
            axis: slice.axis,
            slice_index: slice.index,
            wl_hash: wl_hash(wl),
        }
    }

    fn group(&self) -> GroupKey {
        (self.volume_id, self.model_id.clone(), self.wl_hash)
    }
}

type GroupKey = (VolumeId, Arc<str>, u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub entries: usize,
    pub total_bytes: u64,
    /// Cached slices per axis, over every volume and model.
    pub per_axis: [usize; 3],
    pub capacity_bytes: u64,
}

struct Entry {
    embedding: Embedding,
    bytes: u64,
    tick: u64,
}

#[derive(Default)]
struct Inner {
    map: HashMap<EmbeddingKey, Entry>,
    recency: BTreeMap<u64, EmbeddingKey>,
    tick: u64,
    total_bytes: u64,
    per_axis: [usize; 3],
    groups: HashMap<GroupKey, [usize; 3]>,
}

impl Inner {
    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    fn remove(&mut self, key: &EmbeddingKey) -> Option<Entry> {
        let entry = self.map.remove(key)?;
        self.recency.remove(&entry.tick);
        self.total_bytes -= entry.bytes;
        self.per_axis[key.axis.index()] -= 1;
        let group = key.group();
        if let Some(counts) = self.groups.get_mut(&group) {
            counts[key.axis.index()] -= 1;
            if counts.iter().all(|&c| c == 0) {
                self.groups.remove(&group);
            }
        }
        Some(entry)
    }
}

/// Thread-safe embedding store. Every operation is atomic.
pub struct EmbeddingCache {
    capacity_bytes: u64,
    inner: Mutex<Inner>,
}

impl EmbeddingCache {
    pub fn new(capacity_bytes: u64) -> Self {
        EmbeddingCache { capacity_bytes, inner: Mutex::new(Inner::default()) }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    /// Inserts or replaces an entry, evicting least-recently-used entries
    /// until the total fits. An embedding larger than the whole capacity is
    /// not stored.
    pub fn put(&self, key: EmbeddingKey, embedding: Embedding) {
        debug_assert_eq!(&*key.model_id, embedding.model_id.as_str());
        let bytes = embedding.byte_len() as u64;
        let mut inner = self.inner.lock();
        inner.remove(&key);
        if bytes > self.capacity_bytes {
            return;
        }
        while inner.total_bytes + bytes > self.capacity_bytes {
            let Some(oldest) = inner.recency.values().next().cloned() else { break };
            inner.remove(&oldest);
        }
        let tick = inner.next_tick();
        inner.recency.insert(tick, key.clone());
        inner.total_bytes += bytes;
        inner.per_axis[key.axis.index()] += 1;
        inner.groups.entry(key.group()).or_default()[key.axis.index()] += 1;
        inner.map.insert(key, Entry { embedding, bytes, tick });
    }

    /// Returns the embedding and marks it most recently used.
    pub fn get(&self, key: &EmbeddingKey) -> Option<Embedding> {
        let mut inner = self.inner.lock();
        let tick = inner.next_tick();
        let inner = &mut *inner;
        let entry = inner.map.get_mut(key)?;
        inner.recency.remove(&entry.tick);
        entry.tick = tick;
        inner.recency.insert(tick, key.clone());
        Some(entry.embedding.clone())
    }

    /// Presence check that does not affect recency.
    pub fn contains(&self, key: &EmbeddingKey) -> bool {
        self.inner.lock().map.contains_key(key)
    }

    /// Removes every entry of `volume_id`, optionally only for one model.
    pub fn invalidate(&self, volume_id: VolumeId, model_id: Option<&str>) -> usize {
        let mut inner = self.inner.lock();
        let doomed: Vec<EmbeddingKey> = inner
            .map
            .keys()
            .filter(|k| k.volume_id == volume_id && model_id.is_none_or(|m| &*k.model_id == m))
            .cloned()
            .collect();
        for k in &doomed {
            inner.remove(k);
        }
        doomed.len()
    }

    /// Fraction of each axis's slices that are cached.
    pub fn status(&self, volume_id: VolumeId, model_id: &str, wl_hash: u64, dims: [usize; 3]) -> [f64; 3] {
        let inner = self.inner.lock();
        let counts = inner.groups.get(&(volume_id, Arc::from(model_id), wl_hash)).copied().unwrap_or_default();
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = counts[a] as f64 / dims[a] as f64;
        }
        out
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.inner.lock();
        CacheStats {
            entries: inner.map.len(),
            total_bytes: inner.total_bytes,
            per_axis: inner.per_axis,
            capacity_bytes: self.capacity_bytes,
        }
    }

    /// Keys from least to most recently used.
    pub fn lru_order(&self) -> Vec<EmbeddingKey> {
        self.inner.lock().recency.values().cloned().collect()
    }
}

/// Every slice of every axis, in the order they should be encoded: the
/// current axis first, outward from the current index (ties to the lower
/// index), then the remaining axes in axis order, ascending.
pub fn precompute_plan(dims: [usize; 3], current: SliceRef) -> Vec<SliceRef> {
    let len = dims[current.axis.index()];
    let mut plan = Vec::with_capacity(dims.iter().sum());
    plan.push(SliceRef::new(current.axis, current.index.min(len.saturating_sub(1))));
    for d in 1..len {
        if let Some(lo) = current.index.checked_sub(d) {
            plan.push(SliceRef::new(current.axis, lo));
        }
        if current.index + d < len {
            plan.push(SliceRef::new(current.axis, current.index + d));
        }
    }
    for axis in Axis::ALL {
        if axis != current.axis {
            plan.extend((0..dims[axis.index()]).map(|i| SliceRef::new(axis, i)));
        }
    }
    plan
}
