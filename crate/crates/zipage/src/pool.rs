//! Pre-allocated paged K/V storage, the query-window cache, and block
//! bookkeeping (free list, reference counts, prefix index, block tables).
//!
//! Layout follows the usual paged-attention scheme:
//!
//! ```text
//! K, V : [layers][total_blocks][block_size][kv_heads][head_dim]
//! F    : [layers][total_blocks][block_size][kv_heads]      (global scores)
//! Q    : [layers][max_concurrency][window][query_heads][head_dim]
//! ```
//!
//! A block id spans all layers: the same id addresses one `[block_size]`
//! slab in every layer. Blocks with reference count greater than 1 are
//! shared (prefix cache) and immutable; every write path rejects them.
//!
//! Pool metadata mutation is single-owner: the scheduler serializes all
//! allocation, free, and table updates. Tensor slices for different
//! (layer, head) pairs or different blocks are disjoint, so the engine's
//! block-exclusivity contract (a request under compression never appears
//! in a decode batch) makes concurrent tensor access safe.

use std::collections::HashMap;

use thiserror::Error;

use crate::mix;
use crate::Scalar;

/// Pool dimensions. `window` is the observation-window length `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    pub num_layers: usize,
    pub total_blocks: usize,
    pub block_size: usize,
    pub kv_heads: usize,
    pub query_heads: usize,
    pub head_dim: usize,
    pub max_concurrency: usize,
    pub window: usize,
    pub global_score_enabled: bool,
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        if self.num_layers == 0
            || self.total_blocks == 0
            || self.block_size == 0
            || self.kv_heads == 0
            || self.query_heads == 0
            || self.head_dim == 0
            || self.max_concurrency == 0
        {
            return Err(PoolError::InvalidConfig("all pool dimensions must be positive"));
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(PoolError::InvalidConfig(
                "query_heads must be a positive multiple of kv_heads",
            ));
        }
        if self.window == 0 || self.window >= self.block_size {
            return Err(PoolError::InvalidConfig("window must satisfy 1 <= w < block_size"));
        }
        Ok(())
    }

    /// Query heads covered by one KV head under grouped-query attention.
    pub fn group_size(&self) -> usize {
        self.query_heads / self.kv_heads
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("invalid pool config: {0}")]
    InvalidConfig(&'static str),
    #[error("no free blocks")]
    NoFreeBlocks,
    #[error("double free of block {0}")]
    DoubleFree(usize),
    #[error("write to shared block {0} (ref_count > 1)")]
    SharedBlockWrite(usize),
    #[error("block {0} is not owned")]
    BlockNotOwned(usize),
    #[error("slot index {slot} out of range (block_size {block_size})")]
    SlotOutOfRange { slot: usize, block_size: usize },
    #[error("query slot {0} is not bound to a request")]
    UnboundSlot(usize),
    #[error("unknown request {0}")]
    UnknownRequest(u64),
}

/// Ordered block list plus logical token length for one request.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockTable {
    blocks: Vec<usize>,
    logical_len: usize,
}

impl BlockTable {
    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Logical sequence length in tokens.
    pub fn len_tokens(&self) -> usize {
        self.logical_len
    }

    pub fn is_empty(&self) -> bool {
        self.logical_len == 0
    }

    /// Tokens currently sitting in the last block.
    pub fn last_block_fill(&self, block_size: usize) -> usize {
        if self.blocks.is_empty() {
            return 0;
        }
        let rem = self.logical_len % block_size;
        if rem == 0 && self.logical_len > 0 {
            // Logical length landing exactly on a block boundary means the
            // last block is full unless an empty block was just appended.
            if self.logical_len == self.blocks.len() * block_size {
                block_size
            } else {
                0
            }
        } else {
            rem
        }
    }

    pub fn is_last_block_full(&self, block_size: usize) -> bool {
        !self.blocks.is_empty() && self.last_block_fill(block_size) == block_size
    }

    /// (block id, slot) holding a logical position.
    pub fn locate(&self, position: usize, block_size: usize) -> (usize, usize) {
        debug_assert!(position < self.logical_len);
        (self.blocks[position / block_size], position % block_size)
    }
}

/// The paged K/V/F store plus allocation metadata.
#[derive(Debug)]
pub struct PagedPool {
    config: PoolConfig,
    keys: Vec<Scalar>,
    values: Vec<Scalar>,
    global_scores: Option<Vec<Scalar>>,
    free_list: Vec<usize>,
    ref_counts: Vec<u32>,
    owned_blocks: usize,
    tables: HashMap<u64, BlockTable>,
    // Prefix cache: chained content hash -> block id, plus the reverse
    // link so mutation/free can invalidate stale entries.
    prefix_index: HashMap<u64, usize>,
    block_hash: Vec<Option<u64>>,
}

/// Pre-allocated observation-window query states, one slot per concurrent
/// request. Each (slot, layer) pair is an independent ring buffer of the
/// most recent `window` query states.
#[derive(Debug)]
pub struct QuerySlotCache {
    num_layers: usize,
    window: usize,
    query_heads: usize,
    head_dim: usize,
    num_slots: usize,
    data: Vec<Scalar>,
    free_slots: Vec<usize>,
    bound_to: Vec<Option<u64>>,
    cursor: Vec<usize>,
    fill: Vec<usize>,
}

/// Builds the pool and the query-slot cache from one config.
pub fn init_pool(config: PoolConfig) -> Result<(PagedPool, QuerySlotCache), PoolError> {
    config.validate()?;
    Ok((PagedPool::new(config), QuerySlotCache::new(&config)))
}

impl PagedPool {
    fn new(config: PoolConfig) -> Self {
        let kv_len = config.num_layers
            * config.total_blocks
            * config.block_size
            * config.kv_heads
            * config.head_dim;
        let f_len = config.num_layers * config.total_blocks * config.block_size * config.kv_heads;
        // Free list is a LIFO stack; reversed so low ids come out first.
        let free_list: Vec<usize> = (0..config.total_blocks).rev().collect();
        Self {
            config,
            keys: vec![0.0; kv_len],
            values: vec![0.0; kv_len],
            global_scores: config.global_score_enabled.then(|| vec![0.0; f_len]),
            free_list,
            ref_counts: vec![0; config.total_blocks],
            owned_blocks: 0,
            tables: HashMap::new(),
            prefix_index: HashMap::new(),
            block_hash: vec![None; config.total_blocks],
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn num_free_blocks(&self) -> usize {
        self.free_list.len()
    }

    pub fn ref_count(&self, block: usize) -> u32 {
        self.ref_counts[block]
    }

    pub fn is_shared(&self, block: usize) -> bool {
        self.ref_counts[block] > 1
    }

    pub fn table(&self, request: u64) -> Option<&BlockTable> {
        self.tables.get(&request)
    }

    fn table_mut(&mut self, request: u64) -> Result<&mut BlockTable, PoolError> {
        self.tables.get_mut(&request).ok_or(PoolError::UnknownRequest(request))
    }

    /// Pops a free block, gives the request exclusive ownership, and
    /// appends it to the request's block table.
    pub fn allocate_block(&mut self, request: u64) -> Result<usize, PoolError> {
        let block = self.allocate_raw()?;
        self.tables.entry(request).or_default().blocks.push(block);
        Ok(block)
    }

    /// Allocates a block owned by the request but not yet part of its
    /// table (compression targets and the reserved decode block).
    pub fn allocate_detached(&mut self) -> Result<usize, PoolError> {
        self.allocate_raw()
    }

    fn allocate_raw(&mut self) -> Result<usize, PoolError> {
        let block = self.free_list.pop().ok_or(PoolError::NoFreeBlocks)?;
        debug_assert_eq!(self.ref_counts[block], 0);
        self.ref_counts[block] = 1;
        self.owned_blocks += 1;
        self.unregister(block);
        Ok(block)
    }

    /// Decrements each block's reference count; a block returns to the
    /// free list only when its count reaches zero.
    pub fn free_blocks(&mut self, blocks: &[usize]) -> Result<(), PoolError> {
        for &block in blocks {
            if self.ref_counts[block] == 0 {
                return Err(PoolError::DoubleFree(block));
            }
            self.ref_counts[block] -= 1;
            if self.ref_counts[block] == 0 {
                self.owned_blocks -= 1;
                self.unregister(block);
                self.free_list.push(block);
            }
        }
        Ok(())
    }

    /// Releases every block in the request's table and drops the table.
    pub fn release_request(&mut self, request: u64) -> Result<(), PoolError> {
        let table = self.tables.remove(&request).ok_or(PoolError::UnknownRequest(request))?;
        self.free_blocks(&table.blocks)
    }

    /// Appends `tokens` logical tokens to the request's table. The blocks
    /// backing them must already exist.
    pub fn extend_logical_len(&mut self, request: u64, tokens: usize) -> Result<(), PoolError> {
        let block_size = self.config.block_size;
        let table = self.table_mut(request)?;
        let new_len = table.logical_len + tokens;
        debug_assert!(new_len <= table.blocks.len() * block_size, "logical length outruns blocks");
        table.logical_len = new_len;
        Ok(())
    }

    /// Replaces the request's table wholesale (used when compression
    /// finishes). Blocks present in the old table but absent from the new
    /// one are freed (shared blocks are decremented, not zeroed). Returns
    /// the released block ids.
    pub fn swap_table(
        &mut self,
        request: u64,
        new_blocks: Vec<usize>,
        logical_len: usize,
    ) -> Result<Vec<usize>, PoolError> {
        let old = self.tables.remove(&request).ok_or(PoolError::UnknownRequest(request))?;
        let released: Vec<usize> =
            old.blocks.iter().copied().filter(|b| !new_blocks.contains(b)).collect();
        debug_assert!(new_blocks.iter().all(|&b| self.ref_counts[b] >= 1));
        debug_assert!(logical_len <= new_blocks.len() * self.config.block_size);
        self.tables.insert(request, BlockTable { blocks: new_blocks, logical_len });
        self.free_blocks(&released)?;
        Ok(released)
    }

    // ---- tensor access ----------------------------------------------------

    fn kv_index(&self, layer: usize, block: usize, slot: usize, head: usize) -> usize {
        let c = &self.config;
        debug_assert!(layer < c.num_layers && block < c.total_blocks);
        debug_assert!(slot < c.block_size && head < c.kv_heads);
        (((layer * c.total_blocks + block) * c.block_size + slot) * c.kv_heads + head)
            * c.head_dim
    }

    fn f_index(&self, layer: usize, block: usize, slot: usize, head: usize) -> usize {
        let c = &self.config;
        ((layer * c.total_blocks + block) * c.block_size + slot) * c.kv_heads + head
    }

    /// Writes one token's K/V vectors for a single (layer, head). The
    /// block must be exclusively owned; shared blocks are immutable.
    pub fn write_kv(
        &mut self,
        layer: usize,
        block: usize,
        slot: usize,
        head: usize,
        key: &[Scalar],
        value: &[Scalar],
    ) -> Result<(), PoolError> {
        if slot >= self.config.block_size {
            return Err(PoolError::SlotOutOfRange { slot, block_size: self.config.block_size });
        }
        match self.ref_counts[block] {
            0 => return Err(PoolError::BlockNotOwned(block)),
            1 => {}
            _ => return Err(PoolError::SharedBlockWrite(block)),
        }
        debug_assert_eq!(key.len(), self.config.head_dim);
        debug_assert_eq!(value.len(), self.config.head_dim);
        self.unregister(block);
        let idx = self.kv_index(layer, block, slot, head);
        let d = self.config.head_dim;
        self.keys[idx..idx + d].copy_from_slice(key);
        self.values[idx..idx + d].copy_from_slice(value);
        Ok(())
    }

    pub fn read_key(&self, layer: usize, block: usize, slot: usize, head: usize) -> &[Scalar] {
        let idx = self.kv_index(layer, block, slot, head);
        &self.keys[idx..idx + self.config.head_dim]
    }

    pub fn read_value(&self, layer: usize, block: usize, slot: usize, head: usize) -> &[Scalar] {
        let idx = self.kv_index(layer, block, slot, head);
        &self.values[idx..idx + self.config.head_dim]
    }

    pub fn global_score_enabled(&self) -> bool {
        self.global_scores.is_some()
    }

    pub fn read_global(&self, layer: usize, block: usize, slot: usize, head: usize) -> Scalar {
        let idx = self.f_index(layer, block, slot, head);
        self.global_scores.as_ref().expect("global scores disabled")[idx]
    }

    pub fn write_global(
        &mut self,
        layer: usize,
        block: usize,
        slot: usize,
        head: usize,
        score: Scalar,
    ) {
        let idx = self.f_index(layer, block, slot, head);
        self.global_scores.as_mut().expect("global scores disabled")[idx] = score;
    }

    /// Moves one retained entry (K, V, and the global score if enabled)
    /// during compaction. Destination must be exclusively owned.
    pub fn copy_entry(
        &mut self,
        layer: usize,
        head: usize,
        src: (usize, usize),
        dst: (usize, usize),
    ) {
        debug_assert_eq!(self.ref_counts[dst.0], 1, "compaction target must be exclusive");
        self.unregister(dst.0);
        let d = self.config.head_dim;
        let src_idx = self.kv_index(layer, src.0, src.1, head);
        let dst_idx = self.kv_index(layer, dst.0, dst.1, head);
        self.keys.copy_within(src_idx..src_idx + d, dst_idx);
        self.values.copy_within(src_idx..src_idx + d, dst_idx);
        if self.global_scores.is_some() {
            let f = self.read_global(layer, src.0, src.1, head);
            self.write_global(layer, dst.0, dst.1, head, f);
        }
    }

    /// Gathers the logically ordered K and V entries of one (layer, head)
    /// into dense `[len_tokens][head_dim]` arrays. Oracle support.
    pub fn gather_contiguous(
        &self,
        table: &BlockTable,
        layer: usize,
        head: usize,
    ) -> (Vec<Scalar>, Vec<Scalar>) {
        let d = self.config.head_dim;
        let len = table.len_tokens();
        let mut keys = Vec::with_capacity(len * d);
        let mut values = Vec::with_capacity(len * d);
        for pos in 0..len {
            let (block, slot) = table.locate(pos, self.config.block_size);
            keys.extend_from_slice(self.read_key(layer, block, slot, head));
            values.extend_from_slice(self.read_value(layer, block, slot, head));
        }
        (keys, values)
    }

    // ---- prefix cache -----------------------------------------------------

    /// Chains a raw per-block content id onto the parent's chained hash.
    pub fn chain_hash(parent: Option<u64>, raw: u64) -> u64 {
        mix::mix(parent.unwrap_or(0x7061_6765), &[raw])
    }

    /// Finds the longest chain of cached full blocks matching the prompt's
    /// per-block content ids and takes a reference on each. Returns the
    /// shared block ids and the matched token count.
    pub fn match_prefix(&mut self, raw_chain: &[u64]) -> (Vec<usize>, usize) {
        let mut matched = Vec::new();
        let mut parent = None;
        for &raw in raw_chain {
            let chained = Self::chain_hash(parent, raw);
            match self.prefix_index.get(&chained) {
                Some(&block) => {
                    debug_assert!(self.ref_counts[block] >= 1);
                    matched.push(block);
                    parent = Some(chained);
                }
                None => break,
            }
        }
        for &block in &matched {
            self.ref_counts[block] += 1;
        }
        let tokens = matched.len() * self.config.block_size;
        (matched, tokens)
    }

    /// Counts how many leading blocks of the chain are cached, without
    /// taking references. Admission uses this to estimate how many fresh
    /// blocks a prefill needs.
    pub fn probe_prefix(&self, raw_chain: &[u64]) -> usize {
        let mut parent = None;
        let mut count = 0;
        for &raw in raw_chain {
            let chained = Self::chain_hash(parent, raw);
            if self.prefix_index.contains_key(&chained) {
                count += 1;
                parent = Some(chained);
            } else {
                break;
            }
        }
        count
    }

    /// Registers a freshly written full prompt block under its chained
    /// hash so later requests can share it. First registration wins.
    pub fn register_prefix_block(&mut self, block: usize, chained_hash: u64) {
        debug_assert!(self.ref_counts[block] >= 1);
        if self.block_hash[block].is_some() {
            return;
        }
        if let std::collections::hash_map::Entry::Vacant(e) = self.prefix_index.entry(chained_hash)
        {
            e.insert(block);
            self.block_hash[block] = Some(chained_hash);
        }
    }

    /// Appends already-owned shared blocks (from `match_prefix`) to the
    /// request's table.
    pub fn adopt_shared_blocks(&mut self, request: u64, blocks: &[usize]) {
        let table = self.tables.entry(request).or_default();
        debug_assert!(table.blocks.is_empty(), "shared prefix must come first");
        table.blocks.extend_from_slice(blocks);
        table.logical_len = blocks.len() * self.config.block_size;
    }

    /// Test-only: add a phantom reference, marking the block shared.
    #[cfg(test)]
    pub(crate) fn adopt_shared_manual(&mut self, block: usize) {
        assert!(self.ref_counts[block] >= 1);
        self.ref_counts[block] += 1;
    }

    // Content changed or block recycled: the cached hash no longer
    // describes the block.
    fn unregister(&mut self, block: usize) {
        if let Some(h) = self.block_hash[block].take() {
            self.prefix_index.remove(&h);
        }
    }

    // ---- invariants ---------------------------------------------------------

    /// O(1) block-conservation check: free + owned == total.
    pub fn check_conservation(&self) -> bool {
        self.free_list.len() + self.owned_blocks == self.config.total_blocks
    }

    /// Full structural validation. `extra_owned` lists blocks held outside
    /// any table (in-flight compression targets), grouped per request.
    pub fn validate(&self, extra_owned: &[&[usize]]) -> Result<(), String> {
        let mut counts = vec![0u32; self.config.total_blocks];
        for table in self.tables.values() {
            let mut seen = std::collections::HashSet::new();
            for &b in &table.blocks {
                if !seen.insert(b) {
                    return Err(format!("table contains duplicate block {b}"));
                }
                counts[b] += 1;
            }
            if table.logical_len > table.blocks.len() * self.config.block_size {
                return Err("logical length exceeds table capacity".into());
            }
        }
        for owned in extra_owned {
            for &b in *owned {
                counts[b] += 1;
            }
        }
        for (b, (&expected, &actual)) in counts.iter().zip(&self.ref_counts).enumerate() {
            if expected != actual {
                return Err(format!(
                    "block {b}: ref_count {actual} but {expected} table/plan references"
                ));
            }
        }
        let mut free_seen = std::collections::HashSet::new();
        for &b in &self.free_list {
            if self.ref_counts[b] != 0 {
                return Err(format!("free block {b} has nonzero ref_count"));
            }
            if !free_seen.insert(b) {
                return Err(format!("block {b} appears twice in free list"));
            }
        }
        let owned = self.ref_counts.iter().filter(|&&c| c > 0).count();
        if owned != self.owned_blocks {
            return Err("owned-block counter out of sync".into());
        }
        if !self.check_conservation() {
            return Err(format!(
                "conservation violated: {} free + {} owned != {}",
                self.free_list.len(),
                self.owned_blocks,
                self.config.total_blocks
            ));
        }
        Ok(())
    }
}

impl QuerySlotCache {
    fn new(config: &PoolConfig) -> Self {
        let num_slots = config.max_concurrency;
        let len = config.num_layers * num_slots * config.window * config.query_heads * config.head_dim;
        Self {
            num_layers: config.num_layers,
            window: config.window,
            query_heads: config.query_heads,
            head_dim: config.head_dim,
            num_slots,
            data: vec![0.0; len],
            free_slots: (0..num_slots).rev().collect(),
            bound_to: vec![None; num_slots],
            cursor: vec![0; num_slots * config.num_layers],
            fill: vec![0; num_slots * config.num_layers],
        }
    }

    pub fn num_free_slots(&self) -> usize {
        self.free_slots.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Binds a free slot to the request, or `None` when all slots are
    /// taken (a valid scheduling outcome, not an error).
    pub fn acquire(&mut self, request: u64) -> Option<usize> {
        let slot = self.free_slots.pop()?;
        self.bound_to[slot] = Some(request);
        for layer in 0..self.num_layers {
            self.cursor[slot * self.num_layers + layer] = 0;
            self.fill[slot * self.num_layers + layer] = 0;
        }
        Some(slot)
    }

    pub fn release(&mut self, slot: usize) {
        debug_assert!(self.bound_to[slot].is_some(), "releasing unbound slot");
        self.bound_to[slot] = None;
        self.free_slots.push(slot);
    }

    pub fn bound_request(&self, slot: usize) -> Option<u64> {
        self.bound_to[slot]
    }

    /// Number of query states currently buffered for (slot, layer).
    pub fn fill_count(&self, slot: usize, layer: usize) -> usize {
        self.fill[slot * self.num_layers + layer]
    }

    fn q_index(&self, slot: usize, layer: usize, pos: usize, head: usize) -> usize {
        debug_assert!(slot < self.num_slots && layer < self.num_layers);
        debug_assert!(pos < self.window && head < self.query_heads);
        (((layer * self.num_slots + slot) * self.window + pos) * self.query_heads + head)
            * self.head_dim
    }

    /// Pushes one token's query state (`[query_heads * head_dim]`,
    /// head-major) into the ring buffer for (slot, layer), evicting the
    /// oldest entry when full.
    pub fn push(&mut self, slot: usize, layer: usize, query: &[Scalar]) -> Result<(), PoolError> {
        if self.bound_to[slot].is_none() {
            return Err(PoolError::UnboundSlot(slot));
        }
        debug_assert_eq!(query.len(), self.query_heads * self.head_dim);
        let ring = slot * self.num_layers + layer;
        let pos = self.cursor[ring];
        for head in 0..self.query_heads {
            let dst = self.q_index(slot, layer, pos, head);
            let src = head * self.head_dim;
            self.data[dst..dst + self.head_dim].copy_from_slice(&query[src..src + self.head_dim]);
        }
        self.cursor[ring] = (pos + 1) % self.window;
        if self.fill[ring] < self.window {
            self.fill[ring] += 1;
        }
        Ok(())
    }

    /// The buffered query states for one (slot, layer, head), oldest
    /// first, flattened to `[fill][head_dim]`.
    pub fn ordered_window(&self, slot: usize, layer: usize, head: usize) -> Vec<Scalar> {
        let ring = slot * self.num_layers + layer;
        let fill = self.fill[ring];
        let start = if fill < self.window { 0 } else { self.cursor[ring] };
        let mut out = Vec::with_capacity(fill * self.head_dim);
        for i in 0..fill {
            let pos = (start + i) % self.window;
            let idx = self.q_index(slot, layer, pos, head);
            out.extend_from_slice(&self.data[idx..idx + self.head_dim]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> PoolConfig {
        PoolConfig {
            num_layers: 2,
            total_blocks: 8,
            block_size: 4,
            kv_heads: 2,
            query_heads: 4,
            head_dim: 4,
            max_concurrency: 3,
            window: 2,
            global_score_enabled: false,
        }
    }

    #[test]
    fn init_all_free() {
        let (pool, slots) = init_pool(small_config()).unwrap();
        assert_eq!(pool.num_free_blocks(), 8);
        assert_eq!(slots.num_free_slots(), 3);
        assert!(pool.check_conservation());
    }

    #[test]
    fn global_tensor_only_when_enabled() {
        let (pool, _) = init_pool(small_config()).unwrap();
        assert!(!pool.global_score_enabled());
        let mut cfg = small_config();
        cfg.global_score_enabled = true;
        let (pool, _) = init_pool(cfg).unwrap();
        assert!(pool.global_score_enabled());
    }

    #[test]
    fn allocate_distinct_until_exhausted() {
        let mut cfg = small_config();
        cfg.total_blocks = 2;
        let (mut pool, _) = init_pool(cfg).unwrap();
        let a = pool.allocate_block(1).unwrap();
        let b = pool.allocate_block(1).unwrap();
        assert_ne!(a, b);
        assert_eq!(pool.allocate_block(1), Err(PoolError::NoFreeBlocks));
        assert_eq!(pool.table(1).unwrap().num_blocks(), 2);
    }

    #[test]
    fn shared_block_free_decrements() {
        let (mut pool, _) = init_pool(small_config()).unwrap();
        let block = pool.allocate_block(1).unwrap();
        pool.ref_counts[block] += 1; // simulate prefix sharing
        pool.free_blocks(&[block]).unwrap();
        assert_eq!(pool.ref_count(block), 1);
        assert!(!pool.free_list.contains(&block));
        pool.free_blocks(&[block]).unwrap();
        assert_eq!(pool.ref_count(block), 0);
        assert!(pool.free_list.contains(&block));
        assert_eq!(pool.free_blocks(&[block]), Err(PoolError::DoubleFree(block)));
    }

    #[test]
    fn write_read_roundtrip_and_guards() {
        let (mut pool, _) = init_pool(small_config()).unwrap();
        let block = pool.allocate_block(1).unwrap();
        let key = [1.0, 2.0, 3.0, 4.0];
        let value = [5.0, 6.0, 7.0, 8.0];
        pool.write_kv(1, block, 2, 1, &key, &value).unwrap();
        assert_eq!(pool.read_key(1, block, 2, 1), &key);
        assert_eq!(pool.read_value(1, block, 2, 1), &value);

        assert_eq!(
            pool.write_kv(0, block, 4, 0, &key, &value),
            Err(PoolError::SlotOutOfRange { slot: 4, block_size: 4 })
        );
        pool.ref_counts[block] += 1;
        assert_eq!(pool.write_kv(0, block, 0, 0, &key, &value), Err(PoolError::SharedBlockWrite(block)));
    }

    #[test]
    fn slot_acquire_release_reuse() {
        let mut cfg = small_config();
        cfg.max_concurrency = 1;
        let (_, mut slots) = init_pool(cfg).unwrap();
        let s = slots.acquire(7).unwrap();
        assert_eq!(s, 0);
        assert!(slots.acquire(8).is_none());
        slots.release(s);
        assert_eq!(slots.acquire(8), Some(s));
    }

    #[test]
    fn ring_buffer_keeps_last_w() {
        let (_, mut slots) = init_pool(small_config()).unwrap();
        let s = slots.acquire(1).unwrap();
        let q_len = 4 * 4; // query_heads * head_dim
        // window = 2: push 3, expect queries 2 and 3 in order.
        for token in 1..=3 {
            let q: Vec<Scalar> = (0..q_len).map(|i| (token * 100 + i) as Scalar).collect();
            slots.push(s, 0, &q).unwrap();
        }
        assert_eq!(slots.fill_count(s, 0), 2);
        let head0 = slots.ordered_window(s, 0, 0);
        assert_eq!(&head0[..4], &[200.0, 201.0, 202.0, 203.0]);
        assert_eq!(&head0[4..], &[300.0, 301.0, 302.0, 303.0]);
    }

    #[test]
    fn push_single_fill_one() {
        let (_, mut slots) = init_pool(small_config()).unwrap();
        let s = slots.acquire(1).unwrap();
        slots.push(s, 1, &vec![0.5; 16]).unwrap();
        assert_eq!(slots.fill_count(s, 1), 1);
        assert_eq!(slots.fill_count(s, 0), 0);
    }

    #[test]
    fn push_unbound_slot_fails() {
        let (_, mut slots) = init_pool(small_config()).unwrap();
        assert_eq!(slots.push(0, 0, &vec![0.0; 16]), Err(PoolError::UnboundSlot(0)));
    }

    #[test]
    fn prefix_match_and_refcounts() {
        let (mut pool, _) = init_pool(small_config()).unwrap();
        // Request 1 writes a 2-block prompt and registers it.
        let b0 = pool.allocate_block(1).unwrap();
        let b1 = pool.allocate_block(1).unwrap();
        let h0 = PagedPool::chain_hash(None, 11);
        let h1 = PagedPool::chain_hash(Some(h0), 22);
        pool.register_prefix_block(b0, h0);
        pool.register_prefix_block(b1, h1);

        let (matched, tokens) = pool.match_prefix(&[11, 22, 33]);
        assert_eq!(matched, vec![b0, b1]);
        assert_eq!(tokens, 8);
        assert_eq!(pool.ref_count(b0), 2);
        assert_eq!(pool.ref_count(b1), 2);

        // Diverging first block: no match at all.
        let (matched, tokens) = pool.match_prefix(&[99, 22]);
        assert!(matched.is_empty());
        assert_eq!(tokens, 0);
    }

    #[test]
    fn prefix_entry_dropped_on_write() {
        let (mut pool, _) = init_pool(small_config()).unwrap();
        let b0 = pool.allocate_block(1).unwrap();
        let h0 = PagedPool::chain_hash(None, 11);
        pool.register_prefix_block(b0, h0);
        pool.write_kv(0, b0, 0, 0, &[1.0; 4], &[2.0; 4]).unwrap();
        let (matched, _) = pool.match_prefix(&[11]);
        assert!(matched.is_empty(), "mutated block must leave the prefix index");
    }

    #[test]
    fn gather_roundtrip() {
        let (mut pool, _) = init_pool(small_config()).unwrap();
        for _ in 0..2 {
            pool.allocate_block(5).unwrap();
        }
        pool.extend_logical_len(5, 6).unwrap();
        let table = pool.table(5).unwrap().clone();
        for pos in 0..6 {
            let (block, slot) = table.locate(pos, 4);
            let k: Vec<Scalar> = (0..4).map(|i| (pos * 10 + i) as Scalar).collect();
            let v: Vec<Scalar> = (0..4).map(|i| (pos * 10 + i + 5) as Scalar).collect();
            pool.write_kv(0, block, slot, 0, &k, &v).unwrap();
        }
        let (keys, values) = pool.gather_contiguous(&table, 0, 0);
        assert_eq!(keys.len(), 24);
        assert_eq!(values.len(), 24);
        for pos in 0..6 {
            assert_eq!(keys[pos * 4], (pos * 10) as Scalar);
            assert_eq!(values[pos * 4], (pos * 10 + 5) as Scalar);
        }
    }

    #[test]
    fn swap_table_releases_difference() {
        let (mut pool, _) = init_pool(small_config()).unwrap();
        let a = pool.allocate_block(1).unwrap();
        let b = pool.allocate_block(1).unwrap();
        let c = pool.allocate_block(1).unwrap();
        pool.extend_logical_len(1, 12).unwrap();
        let fresh = pool.allocate_detached().unwrap();
        let released = pool.swap_table(1, vec![a, fresh], 8).unwrap();
        assert_eq!(released, vec![b, c]);
        assert_eq!(pool.table(1).unwrap().blocks(), &[a, fresh]);
        assert!(pool.check_conservation());
        assert!(pool.validate(&[]).is_ok());
    }

    #[test]
    fn last_block_fill_accounting() {
        let mut table = BlockTable::default();
        table.blocks = vec![0, 1];
        table.logical_len = 6;
        assert_eq!(table.last_block_fill(4), 2);
        table.logical_len = 8;
        assert!(table.is_last_block_full(4));
        table.blocks.push(2);
        assert_eq!(table.last_block_fill(4), 0);
        assert!(!table.is_last_block_full(4));
    }
}
