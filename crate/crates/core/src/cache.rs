//! Two-tier block KV cache with bounded LRU scratch caches.
//!
//! Tier 1 holds quantized blocks plus their metadata and annotations. Tier 2
//! holds the full-precision originals of every completed block. Tokens that
//! have not yet filled a block sit in a trailing partial block at reference
//! precision and are never quantized.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{quantize_key_block, quantize_value_block, BlockAnnotations, KeyBlockQuant, ValueBlockQuant};

/// Bytes per element of a reference-precision (FP16) payload.
pub const REFERENCE_ELEMENT_BYTES: usize = 2;

/// Tier-1 payload of a completed block. Immutable once built.
#[derive(Debug, Clone)]
pub struct QuantizedBlock {
    pub keys: KeyBlockQuant,
    pub values: ValueBlockQuant,
    pub annotations: BlockAnnotations,
}

#[derive(Debug, Clone, Default)]
struct Tier2 {
    keys: Vec<Arc<[f32]>>,
    values: Vec<Arc<[f32]>>,
}

/// One KV head's cache.
#[derive(Debug, Clone)]
pub struct TieredCache {
    block_size: usize,
    head_dim: usize,
    group_size: usize,
    ingest_binary16: bool,
    blocks: Vec<QuantizedBlock>,
    tier2: Option<Tier2>,
    partial_keys: Vec<f32>,
    partial_values: Vec<f32>,
    v_max: f64,
}

impl TieredCache {
    pub fn new(block_size: usize, head_dim: usize, group_size: usize) -> Result<Self> {
        if block_size == 0 || head_dim == 0 {
            return Err(Error::InvalidConfig(
                "block size and head dimension must be positive".into(),
            ));
        }
        if group_size == 0 || head_dim % group_size != 0 {
            return Err(Error::GroupSize { group_size, head_dim });
        }
        Ok(Self {
            block_size,
            head_dim,
            group_size,
            ingest_binary16: false,
            blocks: Vec::new(),
            tier2: Some(Tier2::default()),
            partial_keys: Vec::with_capacity(block_size * head_dim),
            partial_values: Vec::with_capacity(block_size * head_dim),
            v_max: 0.0,
        })
    }

    /// Round every appended element through binary16 before storing it.
    pub fn with_binary16_ingest(mut self, enabled: bool) -> Self {
        self.ingest_binary16 = enabled;
        self
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn full_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn partial_len(&self) -> usize {
        self.partial_keys.len() / self.head_dim
    }

    pub fn len(&self) -> usize {
        self.blocks.len() * self.block_size + self.partial_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> &[QuantizedBlock] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> Result<&QuantizedBlock> {
        self.blocks.get(index).ok_or(Error::BlockOutOfRange {
            index,
            full_blocks: self.blocks.len(),
        })
    }

    pub fn partial_keys(&self) -> &[f32] {
        &self.partial_keys
    }

    pub fn partial_values(&self) -> &[f32] {
        &self.partial_values
    }

    /// `max_b ν_b` over completed blocks.
    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Largest value norm over every cached token, partial block included.
    /// This is the `V_max` the key-error certificate needs.
    pub fn v_max_all(&self) -> f64 {
        self.partial_values
            .chunks(self.head_dim)
            .map(|v| v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt())
            .fold(self.v_max, f64::max)
    }

    pub fn tier2_available(&self) -> bool {
        self.tier2.is_some()
    }

    fn tier2(&self) -> Result<&Tier2> {
        self.tier2
            .as_ref()
            .ok_or_else(|| Error::Tier2Unavailable("originals were released".into()))
    }

    pub fn tier2_keys(&self, block: usize) -> Result<&Arc<[f32]>> {
        self.block(block)?;
        Ok(&self.tier2()?.keys[block])
    }

    pub fn tier2_values(&self, block: usize) -> Result<&Arc<[f32]>> {
        self.block(block)?;
        Ok(&self.tier2()?.values[block])
    }

    /// Every cached key at reference precision, in token order.
    pub fn original_keys(&self) -> Result<Vec<f32>> {
        let t2 = self.tier2()?;
        let mut out = Vec::with_capacity(self.len() * self.head_dim);
        for k in &t2.keys {
            out.extend_from_slice(k);
        }
        out.extend_from_slice(&self.partial_keys);
        Ok(out)
    }

    pub fn original_values(&self) -> Result<Vec<f32>> {
        let t2 = self.tier2()?;
        let mut out = Vec::with_capacity(self.len() * self.head_dim);
        for v in &t2.values {
            out.extend_from_slice(v);
        }
        out.extend_from_slice(&self.partial_values);
        Ok(out)
    }

    /// Add one token. When the partial block reaches `block_size` tokens it
    /// is quantized atomically and its originals move to Tier 2.
    pub fn append_token(&mut self, key: &[f32], value: &[f32]) -> Result<()> {
        let d = self.head_dim;
        for (what, v) in [("key", key), ("value", value)] {
            if v.len() != d {
                return Err(Error::Shape {
                    context: what,
                    expected: d,
                    actual: v.len(),
                });
            }
            if let Some(c) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what,
                    row: self.len(),
                    channel: c,
                });
            }
        }
        let t2 = self
            .tier2
            .as_mut()
            .ok_or_else(|| Error::Tier2Unavailable("cannot retain originals for new tokens".into()))?;

        if self.ingest_binary16 {
            let round = |x: &f32| half::f16::from_f32(*x).to_f32();
            self.partial_keys.extend(key.iter().map(round));
            self.partial_values.extend(value.iter().map(round));
        } else {
            self.partial_keys.extend_from_slice(key);
            self.partial_values.extend_from_slice(value);
        }

        if self.partial_keys.len() == self.block_size * d {
            let index = self.blocks.len();
            let keys = quantize_key_block(&self.partial_keys, d, index)?;
            let (values, annotations) = quantize_value_block(&self.partial_values, d, self.group_size)?;
            t2.keys.push(Arc::from(std::mem::take(&mut self.partial_keys)));
            t2.values.push(Arc::from(std::mem::take(&mut self.partial_values)));
            self.partial_keys.reserve(self.block_size * d);
            self.partial_values.reserve(self.block_size * d);
            self.v_max = self.v_max.max(annotations.nu);
            self.blocks.push(QuantizedBlock {
                keys,
                values,
                annotations,
            });
        }
        Ok(())
    }

    /// Release the Tier-2 originals. Fault injection for precondition P4.
    #[doc(hidden)]
    pub fn drop_tier2(&mut self) {
        self.tier2 = None;
    }

    /// Corrupt one stored key code of a completed block. Fault injection.
    #[doc(hidden)]
    pub fn inject_key_code_fault(&mut self, block: usize, row: usize, channel: usize, code: i8) -> Result<()> {
        let full_blocks = self.blocks.len();
        let b = self.blocks.get_mut(block).ok_or(Error::BlockOutOfRange {
            index: block,
            full_blocks,
        })?;
        b.keys.inject_code_fault(row, channel, code);
        Ok(())
    }

    pub fn storage_report(&self) -> StorageReport {
        StorageReport::new(self.head_dim, self.block_size, self.group_size)
    }

    /// Reference-precision bytes of one block's key (or value) payload.
    pub fn block_payload_bytes(&self) -> u64 {
        (self.block_size * self.head_dim * REFERENCE_ELEMENT_BYTES) as u64
    }
}

/// Which half of a block a scratch cache holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Keys,
    Values,
}

impl PayloadKind {
    fn label(self) -> &'static str {
        match self {
            PayloadKind::Keys => "key",
            PayloadKind::Values => "value",
        }
    }
}

/// Outcome of one promotion request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageInReport {
    pub hits: u64,
    pub misses: u64,
    pub bytes: u64,
}

impl std::ops::AddAssign for PageInReport {
    fn add_assign(&mut self, rhs: Self) {
        self.hits += rhs.hits;
        self.misses += rhs.misses;
        self.bytes += rhs.bytes;
    }
}

impl PageInReport {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            1.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Bounded LRU store of promoted full-precision payloads for one cache.
#[derive(Debug, Clone)]
pub struct ScratchCache {
    kind: PayloadKind,
    capacity: usize,
    resident: HashMap<usize, (Arc<[f32]>, u64)>,
    recency: BTreeMap<u64, usize>,
    clock: u64,
    totals: PageInReport,
}

impl ScratchCache {
    pub fn new(kind: PayloadKind, capacity: usize) -> Self {
        Self {
            kind,
            capacity,
            resident: HashMap::new(),
            recency: BTreeMap::new(),
            clock: 0,
            totals: PageInReport::default(),
        }
    }

    pub fn kind(&self) -> PayloadKind {
        self.kind
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn contains(&self, block: usize) -> bool {
        self.resident.contains_key(&block)
    }

    /// Look up a resident payload without touching recency.
    pub fn get(&self, block: usize) -> Option<&Arc<[f32]>> {
        self.resident.get(&block).map(|(p, _)| p)
    }

    /// Cumulative hits, misses and bytes since construction.
    pub fn totals(&self) -> PageInReport {
        self.totals
    }

    /// Resident block indices from least to most recently used.
    pub fn lru_order(&self) -> Vec<usize> {
        self.recency.values().copied().collect()
    }

    fn touch(&mut self, block: usize) {
        self.clock += 1;
        if let Some((_, stamp)) = self.resident.get_mut(&block) {
            self.recency.remove(stamp);
            *stamp = self.clock;
            self.recency.insert(self.clock, block);
        }
    }

    /// Make every requested block resident, paging misses in from Tier 2
    /// and evicting least-recently-used blocks to stay within capacity.
    pub fn promote(&mut self, cache: &TieredCache, indices: &[usize]) -> Result<PageInReport> {
        for &b in indices {
            cache.block(b)?;
        }
        let mut report = PageInReport::default();
        let per_miss = cache.block_payload_bytes();
        for &b in indices {
            if self.resident.contains_key(&b) {
                report.hits += 1;
                self.touch(b);
                continue;
            }
            let payload = match self.kind {
                PayloadKind::Keys => cache.tier2_keys(b)?,
                PayloadKind::Values => cache.tier2_values(b)?,
            }
            .clone();
            report.misses += 1;
            report.bytes += per_miss;
            if self.capacity == 0 {
                continue;
            }
            while self.resident.len() >= self.capacity {
                let (_, victim) = self.recency.pop_first().expect("non-empty scratch has a recency entry");
                self.resident.remove(&victim);
            }
            self.clock += 1;
            self.resident.insert(b, (payload, self.clock));
            self.recency.insert(self.clock, b);
        }
        self.totals += report;
        Ok(report)
    }

    pub(crate) fn require(&self, block: usize) -> Result<&Arc<[f32]>> {
        self.get(block).ok_or(Error::ScratchMiss {
            kind: self.kind.label(),
            index: block,
        })
    }
}

/// Per-token storage cost of one KV head, in bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub head_dim: usize,
    pub block_size: usize,
    pub group_size: usize,
    pub dense_keys: f64,
    pub dense_values: f64,
    pub dense_total: f64,
    pub keys_int8: f64,
    pub key_metadata: f64,
    pub values_int4: f64,
    pub value_metadata: f64,
    pub annotations: f64,
    /// Exact sum of the Tier-1 components.
    pub tier1_total: f64,
    /// Tier-1 total rounded to whole bytes, as tabulated.
    pub tier1_total_rounded: f64,
    /// `tier1_total_rounded / dense_total`.
    pub ratio_vs_dense: f64,
    /// Tier-2 originals (system memory), equal to the dense cost.
    pub tier2_total: f64,
}

impl StorageReport {
    pub fn new(head_dim: usize, block_size: usize, group_size: usize) -> Self {
        let d = head_dim as f64;
        let b = block_size as f64;
        let g = group_size as f64;
        let dense_keys = 2.0 * d;
        let dense_values = 2.0 * d;
        let dense_total = dense_keys + dense_values;
        // FP32 scale + offset per channel, amortised over the block.
        let key_metadata = 2.0 * d * 4.0 / b;
        // FP16 scale + offset per value group.
        let value_metadata = 2.0 * (d / g) * 2.0;
        // One FP32 eta per block.
        let annotations = 4.0 / b;
        let keys_int8 = d;
        let values_int4 = d / 2.0;
        let tier1_total = keys_int8 + key_metadata + values_int4 + value_metadata + annotations;
        let tier1_total_rounded = tier1_total.round();
        Self {
            head_dim,
            block_size,
            group_size,
            dense_keys,
            dense_values,
            dense_total,
            keys_int8,
            key_metadata,
            values_int4,
            value_metadata,
            annotations,
            tier1_total,
            tier1_total_rounded,
            ratio_vs_dense: tier1_total_rounded / dense_total,
            tier2_total: dense_total,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token(i: usize, d: usize) -> Vec<f32> {
        (0..d).map(|c| ((i * 31 + c * 7) % 13) as f32 - 6.0).collect()
    }

    fn filled(n: usize, b: usize, d: usize) -> TieredCache {
        let mut cache = TieredCache::new(b, d, 4).unwrap();
        for i in 0..n {
            cache.append_token(&token(i, d), &token(i + 1, d)).unwrap();
        }
        cache
    }

    #[test]
    fn partial_block_below_boundary() {
        let cache = filled(15, 16, 8);
        assert_eq!(cache.full_blocks(), 0);
        assert_eq!(cache.partial_len(), 15);
    }

    #[test]
    fn block_fills_at_boundary() {
        let cache = filled(16, 16, 8);
        assert_eq!(cache.full_blocks(), 1);
        assert_eq!(cache.partial_len(), 0);
        let ann = cache.blocks()[0].annotations;
        assert!(ann.nu > 0.0 && ann.eta >= 0.0);
        assert_eq!(cache.v_max(), ann.nu);
    }

    #[test]
    fn earlier_blocks_never_change() {
        let mut cache = filled(16, 16, 8);
        let k0 = cache.blocks()[0].keys.fingerprint();
        let v0 = cache.blocks()[0].values.fingerprint();
        for i in 16..33 {
            cache.append_token(&token(i, 8), &token(i + 1, 8)).unwrap();
        }
        assert_eq!(cache.full_blocks(), 2);
        assert_eq!(cache.partial_len(), 1);
        assert_eq!(cache.blocks()[0].keys.fingerprint(), k0);
        assert_eq!(cache.blocks()[0].values.fingerprint(), v0);
    }

    #[test]
    fn tier2_returns_exact_originals() {
        let cache = filled(40, 16, 8);
        let keys = cache.original_keys().unwrap();
        for i in 0..40 {
            assert_eq!(&keys[i * 8..(i + 1) * 8], token(i, 8).as_slice());
        }
    }

    #[test]
    fn binary16_ingest_rounds_before_storage() {
        let mut cache = TieredCache::new(2, 4, 4).unwrap().with_binary16_ingest(true);
        let k = [0.1f32, 1.0 / 3.0, 2.0, -7.123_456];
        cache.append_token(&k, &k).unwrap();
        for (stored, orig) in cache.partial_keys().iter().zip(k) {
            assert_eq!(*stored, half::f16::from_f32(orig).to_f32());
        }
    }

    #[test]
    fn rejects_non_finite_tokens() {
        let mut cache = TieredCache::new(4, 2, 2).unwrap();
        assert!(matches!(
            cache.append_token(&[0.0, f32::INFINITY], &[0.0, 0.0]),
            Err(Error::NonFinite { what: "key", .. })
        ));
        assert!(cache.is_empty());
    }

    #[test]
    fn warm_scratch_hits_everything() {
        let cache = filled(64, 16, 8);
        let mut scratch = ScratchCache::new(PayloadKind::Keys, 8);
        let all: Vec<usize> = (0..4).collect();
        let first = scratch.promote(&cache, &all).unwrap();
        assert_eq!(first.misses, 4);
        let second = scratch.promote(&cache, &all).unwrap();
        assert_eq!(
            second,
            PageInReport {
                hits: 4,
                misses: 0,
                bytes: 0
            }
        );
    }

    #[test]
    fn lru_evicts_least_recent() {
        let cache = filled(48, 16, 8);
        let mut scratch = ScratchCache::new(PayloadKind::Keys, 2);
        scratch.promote(&cache, &[0, 1]).unwrap();
        scratch.promote(&cache, &[2]).unwrap();
        assert_eq!(scratch.lru_order(), vec![1, 2]);
        let last = scratch.promote(&cache, &[0]).unwrap();
        assert_eq!(last.misses, 1);
        assert!(scratch.len() <= 2);
    }

    #[test]
    fn miss_charges_reference_payload_bytes() {
        let mut cache = TieredCache::new(16, 128, 16).unwrap();
        for i in 0..16 {
            cache.append_token(&token(i, 128), &token(i, 128)).unwrap();
        }
        let mut scratch = ScratchCache::new(PayloadKind::Values, 4);
        let r = scratch.promote(&cache, &[0]).unwrap();
        assert_eq!(r.bytes, 4096);
        assert_eq!(scratch.totals().bytes, 4096);
    }

    #[test]
    fn promote_rejects_partial_or_missing_blocks() {
        let cache = filled(20, 16, 8);
        let mut scratch = ScratchCache::new(PayloadKind::Keys, 4);
        assert_eq!(
            scratch.promote(&cache, &[1]).unwrap_err(),
            Error::BlockOutOfRange {
                index: 1,
                full_blocks: 1
            }
        );
    }

    #[test]
    fn storage_table_components() {
        let r = StorageReport::new(128, 16, 16);
        assert_eq!(r.keys_int8, 128.0);
        assert_eq!(r.key_metadata, 64.0);
        assert_eq!(r.values_int4, 64.0);
        assert_eq!(r.value_metadata, 32.0);
        assert!(r.annotations < 1.0);
        assert_eq!(r.tier1_total, 288.25);
        assert_eq!(r.tier1_total_rounded, 288.0);
        assert_eq!(r.dense_total, 512.0);
        assert_eq!(r.ratio_vs_dense, 0.5625);

        let small = StorageReport::new(64, 16, 16);
        assert_eq!(
            (
                small.keys_int8,
                small.key_metadata,
                small.values_int4,
                small.value_metadata
            ),
            (64.0, 32.0, 32.0, 16.0)
        );
        assert_eq!(small.tier1_total_rounded, 144.0);
    }
}
