//! Compression of one request's KV cache: pin the observation window,
//! tag the top-k entries, compact them into the target blocks (in place
//! or into prefix-safe fresh blocks), relocate global scores, and
//! release what remains.
//!
//! Compaction is a two-pointer sweep: the read pointer walks logical
//! positions block by block, the write pointer advances one slot per
//! retained entry. Writes never pass the read pointer as long as every
//! reused target keeps a target index no smaller than its index in the
//! source table, which the planner guarantees.

use thiserror::Error;

use crate::pool::{BlockTable, PagedPool, PoolError, QuerySlotCache};
use crate::scoring::{self, ScoreConfig, ScoreError, ScoreGrid, ScoreSubject};
use crate::Scalar;

/// Retention mask over a score grid: exactly k bits set, the last
/// `window` logical positions always among them.
#[derive(Debug, Clone)]
pub struct TopKTag {
    bits: Vec<bool>,
    blocks: usize,
    block_size: usize,
}

impl TopKTag {
    pub fn is_set(&self, position: usize) -> bool {
        self.bits[position]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Logical positions of the retained entries, in order.
    pub fn retained_positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &set)| set.then_some(i))
            .collect()
    }
}

/// Where a compression writes and what it frees afterwards.
#[derive(Debug, Clone)]
pub struct CompressionPlan {
    /// Ordered compaction destinations, exactly `n_max - 1` blocks.
    pub target_blocks: Vec<usize>,
    /// The empty block reserved for subsequent decoding.
    pub reserve_block: usize,
    /// How many targets were reused from the request's own table.
    pub reuse_count: usize,
    /// Blocks leaving the request's view once compaction finishes
    /// (shared blocks are decremented, exclusive ones freed).
    pub release_list: Vec<usize>,
    /// Blocks newly allocated for this plan (targets and/or reserve).
    pub fresh_blocks: Vec<usize>,
}

/// Summary of one `compress_request` run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressionReport {
    /// Entries written per (layer, kv-head); always `(n_max - 1) * b`.
    pub entries_moved: usize,
    pub blocks_released: usize,
    pub layer_chunks: usize,
    /// Peak intermediate-activation estimate for one chunk, scaling as
    /// `stride * query_heads * blocks * block_size * window`.
    pub peak_activation_estimate: u64,
}

/// Per-request inputs the compressor needs from the scheduler.
#[derive(Debug, Clone, Copy)]
pub struct CompressJob {
    pub request: u64,
    pub slot: usize,
    /// Whether the request has been compressed before.
    pub compressed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressorConfig {
    /// Per-request block cap `N_max` (>= 2).
    pub n_max: usize,
    /// Layers compressed per chunk; bounds peak intermediate memory.
    pub layer_stride: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompressError {
    #[error("top-k budget {k} exceeds logical length {len}")]
    BudgetExceedsLength { k: usize, len: usize },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Pins the last `window` logical positions to +inf so they survive any
/// top-k selection.
pub fn pin_window(scores: &mut ScoreGrid, window: usize) {
    let n = scores.len();
    assert!(n >= window, "logical length shorter than observation window");
    for v in &mut scores.flat_mut()[n - window..] {
        *v = Scalar::INFINITY;
    }
}

/// Tags the k highest-scoring positions. Ties prefer later logical
/// positions (retain newer tokens).
pub fn topk_tag(scores: &ScoreGrid, k: usize) -> Result<TopKTag, CompressError> {
    let n = scores.len();
    if k > n {
        return Err(CompressError::BudgetExceedsLength { k, len: n });
    }
    let flat = scores.flat();
    let mut order: Vec<usize> = (0..n).collect();
    // Ascending by (score, position): the last k are the winners, and
    // equal scores resolve toward larger positions.
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));
    let mut bits = vec![false; n];
    for &pos in &order[n - k..] {
        bits[pos] = true;
    }
    Ok(TopKTag { bits, blocks: scores.num_blocks(), block_size: scores.block_size() })
}

/// Picks the compaction targets for one request.
///
/// With prefix sharing off (or no shared blocks) the request compacts in
/// place into its own first `n_max - 1` blocks. Shared prefix blocks are
/// immutable, so each one forces a fresh target; the remaining targets
/// reuse the request's own non-shared blocks at their original table
/// positions, keeping the two-pointer sweep overlap-safe.
pub fn plan_targets(
    pool: &mut PagedPool,
    request: u64,
    n_max: usize,
    prefix_sharing: bool,
) -> Result<CompressionPlan, CompressError> {
    let table = pool
        .table(request)
        .ok_or(PoolError::UnknownRequest(request))?
        .clone();
    let blocks = table.blocks();
    let n = blocks.len();
    assert!(n >= n_max, "compression requires at least n_max blocks");

    let n_prefix = blocks.iter().take_while(|&&b| pool.is_shared(b)).count();
    debug_assert!(
        blocks[n_prefix..].iter().all(|&b| !pool.is_shared(b)),
        "shared blocks must form a prefix of the table"
    );

    if !prefix_sharing || n_prefix == 0 {
        // In place: first n_max - 1 blocks are the targets, the n_max-th
        // stays as the reserved decode block, the rest are released.
        return Ok(CompressionPlan {
            target_blocks: blocks[..n_max - 1].to_vec(),
            reserve_block: blocks[n_max - 1],
            reuse_count: n_max - 1,
            release_list: blocks[n_max..].to_vec(),
            fresh_blocks: Vec::new(),
        });
    }

    let fresh_targets = n_prefix.min(n_max - 1);
    let mut fresh = Vec::with_capacity(fresh_targets + 1);
    for _ in 0..fresh_targets + 1 {
        match pool.allocate_detached() {
            Ok(b) => fresh.push(b),
            Err(e) => {
                // Roll back partial allocation before surfacing the
                // failure to the scheduler.
                pool.free_blocks(&fresh).expect("fresh blocks are exclusively owned");
                return Err(e.into());
            }
        }
    }
    let reserve_block = fresh.pop().expect("reserve allocated above");

    let mut target_blocks = fresh.clone();
    let reuse_count = n_max - 1 - fresh_targets;
    // Reused own blocks keep their table positions (indices n_prefix..),
    // which always lands them at a target index >= source index.
    target_blocks.extend_from_slice(&blocks[n_prefix..n_prefix + reuse_count]);

    let mut release_list: Vec<usize> = blocks[..n_prefix].to_vec();
    release_list.extend_from_slice(&blocks[n_prefix + reuse_count..]);

    fresh.push(reserve_block);
    Ok(CompressionPlan {
        target_blocks,
        reserve_block,
        reuse_count,
        release_list,
        fresh_blocks: fresh,
    })
}

/// Two-pointer compaction of one (layer, kv-head): every tagged entry's
/// K and V vectors (and global score, when enabled) move to the next
/// slot of the target sequence, preserving logical order. Returns the
/// number of entries written.
pub fn compact(
    pool: &mut PagedPool,
    table: &BlockTable,
    tag: &TopKTag,
    plan: &CompressionPlan,
    layer: usize,
    kv_head: usize,
) -> usize {
    let b = tag.block_size();
    let blocks = table.blocks();
    debug_assert_eq!(tag.num_blocks(), blocks.len());
    let mut written = 0usize;
    for (i, &src_block) in blocks.iter().enumerate() {
        for slot in 0..b {
            if !tag.is_set(i * b + slot) {
                continue;
            }
            let dst_block = plan.target_blocks[written / b];
            let dst_slot = written % b;
            pool.copy_entry(layer, kv_head, (src_block, slot), (dst_block, dst_slot));
            written += 1;
        }
    }
    debug_assert_eq!(written, plan.target_blocks.len() * b);
    written
}

/// Everything a finished compression hands back to the scheduler: the
/// new table plus the report. Splitting execution from the table swap
/// lets the engine apply the swap at an async completion boundary.
#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    pub new_blocks: Vec<usize>,
    pub logical_len: usize,
    pub report: CompressionReport,
}

/// Scores, tags, and compacts every (layer, kv-head) of the request in
/// layer-stride chunks. The block table is left untouched; apply the
/// outcome with [`finish_compression`].
pub fn run_compression(
    pool: &mut PagedPool,
    slots: &QuerySlotCache,
    job: &CompressJob,
    score_config: &ScoreConfig,
    config: &CompressorConfig,
    prefix_sharing: bool,
) -> Result<CompressionOutcome, CompressError> {
    let cfg = *pool.config();
    let table = pool
        .table(job.request)
        .ok_or(PoolError::UnknownRequest(job.request))?
        .clone();
    assert!(
        table.is_last_block_full(cfg.block_size),
        "compression trigger requires a fully occupied last block"
    );
    assert!(table.num_blocks() >= config.n_max);

    let k = (config.n_max - 1) * cfg.block_size;
    let plan = plan_targets(pool, job.request, config.n_max, prefix_sharing)?;

    let stride = config.layer_stride.clamp(1, cfg.num_layers);
    let layer_chunks = cfg.num_layers.div_ceil(stride);
    let mut entries_moved = 0;
    for chunk in 0..layer_chunks {
        let layer_end = ((chunk + 1) * stride).min(cfg.num_layers);
        for layer in chunk * stride..layer_end {
            for kv_head in 0..cfg.kv_heads {
                let subject = ScoreSubject {
                    slots,
                    slot: job.slot,
                    table: &table,
                    layer,
                    kv_head,
                    compressed: job.compressed,
                    first_compression: !job.compressed,
                };
                let mut grid = scoring::score(pool, &subject, score_config)?;
                pin_window(&mut grid, cfg.window);
                let tag = topk_tag(&grid, k)?;
                entries_moved = compact(pool, &table, &tag, &plan, layer, kv_head);
            }
        }
    }

    let mut new_blocks = plan.target_blocks.clone();
    new_blocks.push(plan.reserve_block);
    let report = CompressionReport {
        entries_moved,
        blocks_released: plan.release_list.len(),
        layer_chunks,
        peak_activation_estimate: (stride * cfg.query_heads * table.num_blocks() * cfg.block_size
            * cfg.window) as u64,
    };
    Ok(CompressionOutcome { new_blocks, logical_len: k, report })
}

/// Applies a finished compression: swaps the table to the targets plus
/// the reserved decode block and releases everything else.
pub fn finish_compression(
    pool: &mut PagedPool,
    request: u64,
    outcome: &CompressionOutcome,
) -> Result<(), CompressError> {
    pool.swap_table(request, outcome.new_blocks.clone(), outcome.logical_len)?;
    Ok(())
}

/// Synchronous compression: run and apply in one call.
pub fn compress_request(
    pool: &mut PagedPool,
    slots: &QuerySlotCache,
    job: &CompressJob,
    score_config: &ScoreConfig,
    config: &CompressorConfig,
    prefix_sharing: bool,
) -> Result<CompressionReport, CompressError> {
    let outcome = run_compression(pool, slots, job, score_config, config, prefix_sharing)?;
    finish_compression(pool, job.request, &outcome)?;
    Ok(outcome.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{init_pool, PoolConfig};
    use crate::scoring::PoolingPolicy;

    fn pool_config(total_blocks: usize) -> PoolConfig {
        PoolConfig {
            num_layers: 2,
            total_blocks,
            block_size: 4,
            kv_heads: 2,
            query_heads: 2,
            head_dim: 4,
            max_concurrency: 2,
            window: 2,
            global_score_enabled: true,
        }
    }

    fn content(request: u64, pos: usize, layer: usize, head: usize, role: u64) -> Vec<Scalar> {
        let h = crate::mix::mix(request, &[pos as u64, layer as u64, head as u64, role]);
        (0..4)
            .map(|i| crate::mix::unit_interval(crate::mix::splitmix64(h ^ i as u64)))
            .collect()
    }

    /// Writes `tokens` synthetic tokens for a request across all layers
    /// and heads.
    fn fill_request(pool: &mut PagedPool, request: u64, tokens: usize) {
        let cfg = *pool.config();
        let blocks_needed = tokens.div_ceil(cfg.block_size);
        let existing = pool.table(request).map_or(0, |t| t.num_blocks());
        for _ in existing..blocks_needed {
            pool.allocate_block(request).unwrap();
        }
        let start = pool.table(request).unwrap().len_tokens();
        pool.extend_logical_len(request, tokens - start).unwrap();
        let table = pool.table(request).unwrap().clone();
        for pos in start..tokens {
            let (block, slot) = table.locate(pos, cfg.block_size);
            for layer in 0..cfg.num_layers {
                for head in 0..cfg.kv_heads {
                    let k = content(request, pos, layer, head, 1);
                    let v = content(request, pos, layer, head, 2);
                    pool.write_kv(layer, block, slot, head, &k, &v).unwrap();
                }
            }
        }
    }

    fn full_window(slots: &mut QuerySlotCache, slot: usize, request: u64, num_layers: usize) {
        for layer in 0..num_layers {
            for t in 0..2 {
                let q: Vec<Scalar> = (0..2)
                    .flat_map(|head| content(request, 1000 + t, layer, head, 3))
                    .collect();
                slots.push(slot, layer, &q).unwrap();
            }
        }
    }

    #[test]
    fn pin_window_sets_tail_to_infinity() {
        let mut g = ScoreGrid::from_values(vec![0.4, 0.3, 0.1, 0.2], 2, 2);
        pin_window(&mut g, 2);
        assert_eq!(&g.flat()[..2], &[0.4, 0.3]);
        assert!(g.flat()[2].is_infinite() && g.flat()[3].is_infinite());
    }

    #[test]
    fn pinned_entries_always_selected() {
        // Any k >= w must keep the pinned tail.
        for k in 2..=6 {
            let mut g = ScoreGrid::from_values(vec![0.9, 0.8, 0.7, 0.6, 0.1, 0.2], 3, 2);
            pin_window(&mut g, 2);
            let tag = topk_tag(&g, k).unwrap();
            assert!(tag.is_set(4) && tag.is_set(5), "k={k}");
        }
    }

    #[test]
    fn topk_reference_case() {
        let g = ScoreGrid::from_values(vec![0.1, 0.9, 0.2, Scalar::INFINITY], 2, 2);
        let tag = topk_tag(&g, 2).unwrap();
        assert_eq!(tag.retained_positions(), vec![1, 3]);
    }

    #[test]
    fn topk_ties_prefer_later_positions() {
        let g = ScoreGrid::from_values(vec![0.5; 4], 2, 2);
        let tag = topk_tag(&g, 2).unwrap();
        assert_eq!(tag.retained_positions(), vec![2, 3]);
    }

    #[test]
    fn topk_full_budget_and_overflow() {
        let g = ScoreGrid::from_values(vec![0.1, 0.2, 0.3], 1, 3);
        assert_eq!(topk_tag(&g, 3).unwrap().retained_positions(), vec![0, 1, 2]);
        assert_eq!(
            topk_tag(&g, 4).unwrap_err(),
            CompressError::BudgetExceedsLength { k: 4, len: 3 }
        );
    }

    #[test]
    fn compact_hand_trace() {
        // b = 2, retained logical positions {1, 3} end up dense in the
        // first target block.
        let mut cfg = pool_config(8);
        cfg.block_size = 2;
        cfg.window = 1;
        let (mut pool, _) = init_pool(cfg).unwrap();
        fill_request(&mut pool, 1, 4);
        let table = pool.table(1).unwrap().clone();
        let expected_k1 = pool.read_key(0, table.blocks()[0], 1, 0).to_vec();
        let expected_k3 = pool.read_key(0, table.blocks()[1], 1, 0).to_vec();

        let tag = TopKTag { bits: vec![false, true, false, true], blocks: 2, block_size: 2 };
        let plan = CompressionPlan {
            target_blocks: vec![table.blocks()[0]],
            reserve_block: table.blocks()[1],
            reuse_count: 1,
            release_list: vec![],
            fresh_blocks: vec![],
        };
        let written = compact(&mut pool, &table, &tag, &plan, 0, 0);
        assert_eq!(written, 2);
        assert_eq!(pool.read_key(0, plan.target_blocks[0], 0, 0), &expected_k1[..]);
        assert_eq!(pool.read_key(0, plan.target_blocks[0], 1, 0), &expected_k3[..]);
    }

    #[test]
    fn compact_identity_keeps_bytes() {
        let (mut pool, _) = init_pool(pool_config(8)).unwrap();
        fill_request(&mut pool, 1, 12); // 3 full blocks
        let table = pool.table(1).unwrap().clone();
        let before: Vec<Vec<Scalar>> = (0..12)
            .map(|pos| {
                let (block, slot) = table.locate(pos, 4);
                pool.read_key(1, block, slot, 1).to_vec()
            })
            .collect();

        let tag = TopKTag { bits: vec![true; 12], blocks: 3, block_size: 4 };
        let plan = CompressionPlan {
            target_blocks: table.blocks().to_vec(),
            reserve_block: table.blocks()[2],
            reuse_count: 3,
            release_list: vec![],
            fresh_blocks: vec![],
        };
        for layer in 0..2 {
            for head in 0..2 {
                compact(&mut pool, &table, &tag, &plan, layer, head);
            }
        }
        for (pos, expected) in before.iter().enumerate() {
            let (block, slot) = table.locate(pos, 4);
            assert_eq!(pool.read_key(1, block, slot, 1), &expected[..]);
        }
    }

    #[test]
    fn plan_in_place_without_sharing() {
        let (mut pool, _) = init_pool(pool_config(16)).unwrap();
        fill_request(&mut pool, 1, 24); // 6 blocks
        let table = pool.table(1).unwrap().clone();
        let plan = plan_targets(&mut pool, 1, 4, false).unwrap();
        assert_eq!(plan.target_blocks, table.blocks()[..3].to_vec());
        assert_eq!(plan.reserve_block, table.blocks()[3]);
        assert_eq!(plan.reuse_count, 3);
        assert_eq!(plan.release_list, table.blocks()[4..].to_vec());
        assert!(plan.fresh_blocks.is_empty());
    }

    #[test]
    fn plan_all_shared_prefix_allocates_fresh() {
        let (mut pool, _) = init_pool(pool_config(16)).unwrap();
        fill_request(&mut pool, 1, 24); // 6 blocks
        let table = pool.table(1).unwrap().clone();
        // Mark the first 5 blocks shared via a second reference.
        for &b in &table.blocks()[..5] {
            pool.adopt_shared_manual(b);
        }
        let plan = plan_targets(&mut pool, 1, 4, true).unwrap();
        assert_eq!(plan.target_blocks.len(), 3);
        assert!(plan.target_blocks.iter().all(|b| !table.blocks().contains(b)));
        assert_eq!(plan.reuse_count, 0);
        // All six old blocks leave the request's view.
        assert_eq!(plan.release_list, table.blocks().to_vec());
        assert_eq!(plan.fresh_blocks.len(), 4); // 3 targets + reserve
    }

    #[test]
    fn plan_partial_prefix_mixes_fresh_and_reused() {
        let (mut pool, _) = init_pool(pool_config(16)).unwrap();
        fill_request(&mut pool, 1, 20); // 5 blocks
        let table = pool.table(1).unwrap().clone();
        for &b in &table.blocks()[..2] {
            pool.adopt_shared_manual(b);
        }
        let plan = plan_targets(&mut pool, 1, 4, true).unwrap();
        assert_eq!(plan.target_blocks.len(), 3);
        assert_eq!(plan.reuse_count, 1);
        // Reused block keeps its table position: index 2 -> target 2.
        assert_eq!(plan.target_blocks[2], table.blocks()[2]);
        assert!(!table.blocks().contains(&plan.target_blocks[0]));
        assert!(!table.blocks().contains(&plan.target_blocks[1]));
        // Shared prefix and the tail blocks get released.
        assert_eq!(plan.release_list, vec![table.blocks()[0], table.blocks()[1], table.blocks()[3], table.blocks()[4]]);
    }

    #[test]
    fn plan_rolls_back_on_allocation_failure() {
        let (mut pool, _) = init_pool(pool_config(6)).unwrap();
        fill_request(&mut pool, 1, 24); // uses all 6 blocks
        let table = pool.table(1).unwrap().clone();
        for &b in table.blocks() {
            pool.adopt_shared_manual(b);
        }
        let free_before = pool.num_free_blocks();
        let err = plan_targets(&mut pool, 1, 4, true).unwrap_err();
        assert_eq!(err, CompressError::Pool(PoolError::NoFreeBlocks));
        assert_eq!(pool.num_free_blocks(), free_before, "partial allocation rolled back");
    }

    fn run_end_to_end(tokens: usize, n_max: usize) -> (PagedPool, CompressionReport) {
        let (mut pool, mut slots) = init_pool(pool_config(16)).unwrap();
        fill_request(&mut pool, 1, tokens);
        let slot = slots.acquire(1).unwrap();
        full_window(&mut slots, slot, 1, 2);
        let job = CompressJob { request: 1, slot, compressed: false };
        let score_cfg = ScoreConfig {
            use_global: true,
            pooling: PoolingPolicy::FirstOnly,
            ..ScoreConfig::default()
        };
        let comp_cfg = CompressorConfig { n_max, layer_stride: 1 };
        let report =
            compress_request(&mut pool, &slots, &job, &score_cfg, &comp_cfg, false).unwrap();
        (pool, report)
    }

    #[test]
    fn compress_exact_n_max_keeps_table_shape() {
        let (pool, report) = run_end_to_end(16, 4); // 4 full blocks
        let table = pool.table(1).unwrap();
        assert_eq!(table.num_blocks(), 4);
        assert_eq!(table.len_tokens(), 12, "k = 3 * 4 retained, reserve empty");
        assert_eq!(report.entries_moved, 12);
        assert_eq!(report.blocks_released, 0);
        assert!(pool.validate(&[]).is_ok());
    }

    #[test]
    fn compress_prefill_overflow_releases_excess() {
        let (pool, report) = run_end_to_end(28, 4); // 7 full blocks
        let table = pool.table(1).unwrap();
        assert_eq!(table.num_blocks(), 4);
        assert_eq!(report.blocks_released, 3);
        assert_eq!(pool.num_free_blocks(), 16 - 4);
        assert!(pool.validate(&[]).is_ok());
    }

    #[test]
    fn report_counts_layer_chunks() {
        let (mut pool, mut slots) = init_pool(pool_config(16)).unwrap();
        fill_request(&mut pool, 1, 16);
        let slot = slots.acquire(1).unwrap();
        full_window(&mut slots, slot, 1, 2);
        let job = CompressJob { request: 1, slot, compressed: false };
        let comp_cfg = CompressorConfig { n_max: 4, layer_stride: 2 };
        let report = compress_request(
            &mut pool,
            &slots,
            &job,
            &ScoreConfig::default(),
            &comp_cfg,
            false,
        )
        .unwrap();
        assert_eq!(report.layer_chunks, 1);
        // stride * h_q * N * b * w = 2 * 2 * 4 * 4 * 2
        assert_eq!(report.peak_activation_estimate, 128);
    }
}
