//! The scoring function that decides which KV entries survive a
//! compression: paged attention scores over the observation window,
//! decayed global scores, sequence-dimension max pooling, redundancy
//! scores over key similarity (naive, flash, lightning variants), and
//! the final combination `S - lambda * R`.
//!
//! All operations are pure over immutable inputs except
//! [`update_global_scores`], which rewrites the score cache F for one
//! request's blocks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::{BlockTable, PagedPool, QuerySlotCache};
use crate::Scalar;

/// Importance scores for one (layer, kv-head) of one request, shaped
/// `[blocks][block_size]` over the request's block table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    values: Vec<Scalar>,
    blocks: usize,
    block_size: usize,
}

impl ScoreGrid {
    pub fn zeros(blocks: usize, block_size: usize) -> Self {
        Self { values: vec![0.0; blocks * block_size], blocks, block_size }
    }

    pub fn from_values(values: Vec<Scalar>, blocks: usize, block_size: usize) -> Self {
        assert_eq!(values.len(), blocks * block_size);
        Self { values, blocks, block_size }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Total number of scored positions (`blocks * block_size`).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, block: usize, slot: usize) -> Scalar {
        self.values[block * self.block_size + slot]
    }

    pub fn set(&mut self, block: usize, slot: usize, value: Scalar) {
        self.values[block * self.block_size + slot] = value;
    }

    /// Flattened view in logical order.
    pub fn flat(&self) -> &[Scalar] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [Scalar] {
        &mut self.values
    }
}

/// When max pooling runs during the compression pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingPolicy {
    Never,
    /// Pool only on a request's first compression; later compressions
    /// rely on the global score for the same effect.
    FirstOnly,
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RedundancyVariant {
    /// Full similarity matrix, then masking. O(N^2 b^2) memory.
    Naive,
    /// Streaming block pairs with zero-out tags. O(N^2 b) memory,
    /// numerically equal to naive.
    Flash,
    /// Within-block similarity only. O(N b^2) compute.
    Lightning,
}

/// Knobs of the scoring pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Decay of historical global scores, in [0, 1].
    pub alpha: Scalar,
    /// Weight of the redundancy score, >= 0.
    pub lambda: Scalar,
    /// Softmax temperature for the redundancy distribution, > 0.
    pub tau: Scalar,
    /// Cosine-similarity threshold for redundancy zero-out, in [0, 1].
    pub p: Scalar,
    pub pooling: PoolingPolicy,
    /// Max-pooling kernel width (odd).
    pub kernel: usize,
    pub redundancy: RedundancyVariant,
    pub use_global: bool,
}

impl Default for ScoreConfig {
    /// The recommended configuration: lambda 0.2, tau 0.4, alpha 0.8,
    /// pooling only at first compression.
    fn default() -> Self {
        Self {
            alpha: 0.8,
            lambda: 0.2,
            tau: 0.4,
            p: 0.8,
            pooling: PoolingPolicy::FirstOnly,
            kernel: 7,
            redundancy: RedundancyVariant::Lightning,
            use_global: true,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ScoreError::InvalidConfig("alpha must be in [0, 1]"));
        }
        if self.lambda < 0.0 {
            return Err(ScoreError::InvalidConfig("lambda must be >= 0"));
        }
        if self.tau <= 0.0 {
            return Err(ScoreError::InvalidConfig("tau must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(ScoreError::InvalidConfig("p must be in [0, 1]"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(ScoreError::InvalidConfig("pooling kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("invalid score config: {0}")]
    InvalidConfig(&'static str),
    #[error("observation window not full: {fill} of {window}")]
    WindowNotFull { fill: usize, window: usize },
    #[error("global score cache is disabled")]
    GlobalDisabled,
    #[error("zero-norm key vector at position {0}")]
    ZeroNormKey(usize),
}

/// Inputs identifying whose scores are being computed.
#[derive(Debug, Clone, Copy)]
pub struct ScoreSubject<'a> {
    pub slots: &'a QuerySlotCache,
    pub slot: usize,
    pub table: &'a BlockTable,
    pub layer: usize,
    pub kv_head: usize,
    /// Whether the request has been compressed before (drives the global
    /// score update).
    pub compressed: bool,
    /// Whether this is the request's first compression (drives pooling).
    pub first_compression: bool,
}

// ---- attention scores -------------------------------------------------------

/// Attention logits of the window queries against one block of keys:
/// `Q K^T / sqrt(d)`, shaped `[w][b]`.
///
/// On the last block the window tokens themselves sit at positions
/// `u + b - w`, so a causal mask removes logits for key positions after
/// each window token.
pub fn block_attention_logits(
    window_queries: &[Scalar],
    window: usize,
    block_keys: &[Scalar],
    block_size: usize,
    head_dim: usize,
    is_last_block: bool,
) -> Vec<Scalar> {
    debug_assert_eq!(window_queries.len(), window * head_dim);
    debug_assert_eq!(block_keys.len(), block_size * head_dim);
    let scale = 1.0 / (head_dim as Scalar).sqrt();
    let mut logits = vec![0.0; window * block_size];
    for u in 0..window {
        let q = &window_queries[u * head_dim..(u + 1) * head_dim];
        for v in 0..block_size {
            if is_last_block && v > u + block_size - window {
                logits[u * block_size + v] = Scalar::NEG_INFINITY;
                continue;
            }
            let k = &block_keys[v * head_dim..(v + 1) * head_dim];
            let dot: Scalar = q.iter().zip(k).map(|(a, b)| a * b).sum();
            logits[u * block_size + v] = dot * scale;
        }
    }
    logits
}

fn softmax_in_place(row: &mut [Scalar]) {
    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / sum) as Scalar;
    }
}

fn gather_block_keys(pool: &PagedPool, block: usize, layer: usize, kv_head: usize) -> Vec<Scalar> {
    let b = pool.config().block_size;
    let d = pool.config().head_dim;
    let mut keys = Vec::with_capacity(b * d);
    for slot in 0..b {
        keys.extend_from_slice(pool.read_key(layer, block, slot, kv_head));
    }
    keys
}

/// Paged attention scores for one (layer, kv-head): per query head of
/// the group, softmax the window-vs-sequence logits; max-reduce across
/// the group's query heads; average over the window rows.
pub fn attention_scores(pool: &PagedPool, subject: &ScoreSubject) -> Result<ScoreGrid, ScoreError> {
    let cfg = pool.config();
    let w = subject.slots.window();
    let fill = subject.slots.fill_count(subject.slot, subject.layer);
    if fill < w {
        return Err(ScoreError::WindowNotFull { fill, window: w });
    }
    let num_blocks = subject.table.num_blocks();
    let b = cfg.block_size;
    let n = num_blocks * b;
    assert_eq!(
        subject.table.len_tokens(),
        n,
        "attention scoring requires a full last block"
    );

    let group = cfg.group_size();
    let first_q_head = subject.kv_head * group;
    let block_keys: Vec<Vec<Scalar>> = subject
        .table
        .blocks()
        .iter()
        .map(|&blk| gather_block_keys(pool, blk, subject.layer, subject.kv_head))
        .collect();

    // Max-reduce accumulator over the group's per-head score rows.
    let mut reduced = vec![Scalar::NEG_INFINITY; w * n];
    let mut rows = vec![0.0; w * n];
    for g in 0..group {
        let queries = subject.slots.ordered_window(subject.slot, subject.layer, first_q_head + g);
        for (i, keys) in block_keys.iter().enumerate() {
            let logits =
                block_attention_logits(&queries, w, keys, b, cfg.head_dim, i + 1 == num_blocks);
            for u in 0..w {
                rows[u * n + i * b..u * n + (i + 1) * b]
                    .copy_from_slice(&logits[u * b..(u + 1) * b]);
            }
        }
        for u in 0..w {
            softmax_in_place(&mut rows[u * n..(u + 1) * n]);
        }
        for (acc, &s) in reduced.iter_mut().zip(rows.iter()) {
            *acc = acc.max(s);
        }
    }

    // Average over the window dimension.
    let mut out = vec![0.0; n];
    for u in 0..w {
        for j in 0..n {
            out[j] += reduced[u * n + j] / w as Scalar;
        }
    }
    Ok(ScoreGrid::from_values(out, num_blocks, b))
}

// ---- global score ------------------------------------------------------------

/// Folds the score cache F into fresh attention scores.
///
/// Uncompressed requests have no history: F is simply initialized from
/// the scores. Compressed requests combine each non-last block's scores
/// with the decayed history, `max(alpha * F, S)`; the last block was the
/// reserved decode block and carries no history.
pub fn update_global_scores(
    scores: &mut ScoreGrid,
    pool: &mut PagedPool,
    table: &BlockTable,
    layer: usize,
    kv_head: usize,
    alpha: Scalar,
    is_compressed: bool,
) -> Result<(), ScoreError> {
    if !pool.global_score_enabled() {
        return Err(ScoreError::GlobalDisabled);
    }
    let blocks = table.blocks();
    let b = scores.block_size();
    for (i, &block) in blocks.iter().enumerate() {
        let last = i + 1 == blocks.len();
        for slot in 0..b {
            let mut s = scores.get(i, slot);
            if is_compressed && !last {
                let f = pool.read_global(layer, block, slot, kv_head);
                s = (alpha * f).max(s);
                scores.set(i, slot, s);
            }
            pool.write_global(layer, block, slot, kv_head, s);
        }
    }
    Ok(())
}

// ---- pooling -------------------------------------------------------------------

/// Sliding-window maximum along the flattened sequence, stride 1, odd
/// kernel, edge-replication padding (same-length output).
pub fn max_pool_scores(scores: &ScoreGrid, kernel: usize) -> ScoreGrid {
    assert!(kernel % 2 == 1, "pooling kernel must be odd");
    let n = scores.len();
    let r = kernel / 2;
    let flat = scores.flat();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(n - 1);
        out[i] = flat[lo..=hi].iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    }
    ScoreGrid::from_values(out, scores.num_blocks(), scores.block_size())
}

// ---- redundancy ---------------------------------------------------------------

fn key_norms(keys: &[Scalar], n: usize, d: usize) -> Result<Vec<Scalar>, ScoreError> {
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let k = &keys[i * d..(i + 1) * d];
        let norm = k.iter().map(|x| x * x).sum::<Scalar>().sqrt();
        if norm == 0.0 {
            return Err(ScoreError::ZeroNormKey(i));
        }
        norms.push(norm);
    }
    Ok(norms)
}

fn cosine(keys: &[Scalar], norms: &[Scalar], d: usize, i: usize, j: usize) -> Scalar {
    let a = &keys[i * d..(i + 1) * d];
    let b = &keys[j * d..(j + 1) * d];
    let dot: Scalar = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norms[i] * norms[j])
}

/// Length-normalized row sums of the masked similarity matrix, before
/// the final softmax. Shared by the naive variant and the oracle path.
fn raw_redundancy_naive(
    keys: &[Scalar],
    n: usize,
    d: usize,
    p: Scalar,
) -> Result<Vec<Scalar>, ScoreError> {
    let norms = key_norms(keys, n, d)?;
    let mut sim = vec![0.0 as Scalar; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sim[i * n + j] = cosine(keys, &norms, d, i, j);
            }
        }
    }
    // Per column, zero the last (newest) entry exceeding the threshold:
    // when an old token closely matches a newer one, the newer token is
    // the one whose redundancy is forgiven.
    for j in 0..n {
        for i in (0..n).rev() {
            if sim[i * n + j] > p {
                sim[i * n + j] = 0.0;
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sum: f64 = sim[i * n..(i + 1) * n].iter().map(|&v| v as f64).sum();
        out.push((sum / n as f64) as Scalar);
    }
    Ok(out)
}

/// Naive redundancy score over dense keys `[n][d]`: masked cosine
/// similarity row sums, length-normalized, softmax at temperature 1.
pub fn redundancy_naive(
    keys: &[Scalar],
    n: usize,
    d: usize,
    p: Scalar,
) -> Result<Vec<Scalar>, ScoreError> {
    Ok(softmax_with_temperature(&raw_redundancy_naive(keys, n, d, p)?, 1.0))
}

fn gather_table_keys(pool: &PagedPool, table: &BlockTable, layer: usize, kv_head: usize) -> Vec<Scalar> {
    let mut keys = Vec::new();
    for &block in table.blocks() {
        keys.extend_from_slice(&gather_block_keys(pool, block, layer, kv_head));
    }
    keys
}

fn raw_redundancy_flash(
    pool: &PagedPool,
    table: &BlockTable,
    layer: usize,
    kv_head: usize,
    p: Scalar,
) -> Result<Vec<Scalar>, ScoreError> {
    let num_blocks = table.num_blocks();
    let b = pool.config().block_size;
    let d = pool.config().head_dim;
    let n = num_blocks * b;

    let keys = gather_table_keys(pool, table, layer, kv_head);
    let norms = key_norms(&keys, n, d)?;

    // accum[i][m][row]: row sums of the (row block i, column block m) pair.
    let mut accum = vec![0.0f64; num_blocks * num_blocks * b];
    let mut pair = vec![0.0 as Scalar; b * b];
    for m in 0..num_blocks {
        // One zero-out tag per column of block m; each column may zero
        // at most one entry globally.
        let mut zeroed = vec![false; b];
        for i in (0..num_blocks).rev() {
            for r in 0..b {
                for c in 0..b {
                    let gi = i * b + r;
                    let gj = m * b + c;
                    pair[r * b + c] = if gi == gj { 0.0 } else { cosine(&keys, &norms, d, gi, gj) };
                }
            }
            for c in 0..b {
                if zeroed[c] {
                    continue;
                }
                for r in (0..b).rev() {
                    if pair[r * b + c] > p {
                        pair[r * b + c] = 0.0;
                        zeroed[c] = true;
                        break;
                    }
                }
            }
            for r in 0..b {
                let sum: f64 = pair[r * b..(r + 1) * b].iter().map(|&v| v as f64).sum();
                accum[(i * num_blocks + m) * b + r] = sum;
            }
        }
    }

    // Sequential accumulation across column blocks, then length
    // normalization.
    let mut out = Vec::with_capacity(n);
    for i in 0..num_blocks {
        for r in 0..b {
            let mut total = 0.0f64;
            for m in 0..num_blocks {
                total += accum[(i * num_blocks + m) * b + r];
            }
            out.push((total / n as f64) as Scalar);
        }
    }
    Ok(out)
}

/// Streaming redundancy score over the paged keys; numerically equal to
/// [`redundancy_naive`] without materializing the full matrix.
pub fn redundancy_flash(
    pool: &PagedPool,
    table: &BlockTable,
    layer: usize,
    kv_head: usize,
    p: Scalar,
) -> Result<Vec<Scalar>, ScoreError> {
    Ok(softmax_with_temperature(&raw_redundancy_flash(pool, table, layer, kv_head, p)?, 1.0))
}

fn raw_redundancy_lightning(
    pool: &PagedPool,
    table: &BlockTable,
    layer: usize,
    kv_head: usize,
    p: Scalar,
) -> Result<Vec<Scalar>, ScoreError> {
    let num_blocks = table.num_blocks();
    let b = pool.config().block_size;
    let d = pool.config().head_dim;
    let n = num_blocks * b;

    let mut out = Vec::with_capacity(n);
    let mut sim = vec![0.0 as Scalar; b * b];
    for &block in table.blocks() {
        let keys = gather_block_keys(pool, block, layer, kv_head);
        let norms = key_norms(&keys, b, d).map_err(|e| match e {
            ScoreError::ZeroNormKey(i) => ScoreError::ZeroNormKey(out.len() + i),
            other => other,
        })?;
        for r in 0..b {
            for c in 0..b {
                sim[r * b + c] = if r == c { 0.0 } else { cosine(&keys, &norms, d, r, c) };
            }
        }
        for c in 0..b {
            for r in (0..b).rev() {
                if sim[r * b + c] > p {
                    sim[r * b + c] = 0.0;
                    break;
                }
            }
        }
        for r in 0..b {
            let sum: f64 = sim[r * b..(r + 1) * b].iter().map(|&v| v as f64).sum();
            out.push((sum / n as f64) as Scalar);
        }
    }
    Ok(out)
}

/// Within-block redundancy score. Similar keys cluster locally in the
/// sequence, so restricting the similarity to each block keeps most of
/// the signal at O(N b^2) cost.
pub fn redundancy_lightning(
    pool: &PagedPool,
    table: &BlockTable,
    layer: usize,
    kv_head: usize,
    p: Scalar,
) -> Result<Vec<Scalar>, ScoreError> {
    Ok(softmax_with_temperature(&raw_redundancy_lightning(pool, table, layer, kv_head, p)?, 1.0))
}

// ---- softmax and combination ---------------------------------------------------

/// Numerically stabilized `softmax(x / tau)`.
pub fn softmax_with_temperature(x: &[Scalar], tau: Scalar) -> Vec<Scalar> {
    assert!(tau > 0.0, "temperature must be positive");
    let mut out: Vec<Scalar> = x.iter().map(|&v| v / tau).collect();
    softmax_in_place(&mut out);
    out
}

/// `S - lambda * R`, elementwise.
pub fn combine_scores(scores: &mut ScoreGrid, redundancy: &[Scalar], lambda: Scalar) {
    debug_assert_eq!(scores.len(), redundancy.len());
    for (s, &r) in scores.flat_mut().iter_mut().zip(redundancy) {
        *s -= lambda * r;
    }
}

// ---- full pipeline ----------------------------------------------------------------

/// Runs the whole scoring pipeline for one (layer, kv-head):
/// attention scores, then the global-score update, then max pooling
/// (per policy), then the redundancy penalty at temperature tau.
pub fn score(
    pool: &mut PagedPool,
    subject: &ScoreSubject,
    config: &ScoreConfig,
) -> Result<ScoreGrid, ScoreError> {
    let mut scores = attention_scores(pool, subject)?;
    if config.use_global {
        update_global_scores(
            &mut scores,
            pool,
            subject.table,
            subject.layer,
            subject.kv_head,
            config.alpha,
            subject.compressed,
        )?;
    }
    let pool_now = match config.pooling {
        PoolingPolicy::Always => true,
        PoolingPolicy::FirstOnly => subject.first_compression,
        PoolingPolicy::Never => false,
    };
    if pool_now {
        scores = max_pool_scores(&scores, config.kernel);
    }
    if config.lambda > 0.0 {
        let raw = match config.redundancy {
            RedundancyVariant::Naive => {
                let keys = gather_table_keys(pool, subject.table, subject.layer, subject.kv_head);
                raw_redundancy_naive(&keys, scores.len(), pool.config().head_dim, config.p)?
            }
            RedundancyVariant::Flash => {
                raw_redundancy_flash(pool, subject.table, subject.layer, subject.kv_head, config.p)?
            }
            RedundancyVariant::Lightning => {
                raw_redundancy_lightning(pool, subject.table, subject.layer, subject.kv_head, config.p)?
            }
        };
        let redundancy = softmax_with_temperature(&raw, config.tau);
        combine_scores(&mut scores, &redundancy, config.lambda);
    }
    Ok(scores)
}
