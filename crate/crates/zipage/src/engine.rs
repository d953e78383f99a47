//! The decode driver: runs a workload over the paged pool with a
//! deterministic synthetic model standing in for the LLM forward pass.
//!
//! Each step is either a prefill step (waiting requests admitted and
//! their prompt K/V written) or a decode step (every decodable running
//! request produces one token). After a decode fills a request's last
//! block at the block cap, the request enters the compression set on the
//! next step and skips decoding until its compression completes. With
//! asynchronous compression the compaction is computed at launch but the
//! table swap and block releases apply at a deterministic later step
//! boundary, so identical seeds yield identical runs.
//!
//! Token identity is a position counter; attention output never feeds
//! back into scheduling, so the forward pass is optional and exists to
//! validate paged layouts against dense oracles.

use std::collections::VecDeque;

use thiserror::Error;

use crate::compress::{self, CompressError, CompressJob, CompressionOutcome, CompressorConfig};
use crate::metrics::{EngineMetrics, MetricsSeries, StageShares};
use crate::mix;
use crate::pool::{init_pool, BlockTable, PagedPool, PoolConfig, PoolError, QuerySlotCache};
use crate::sched::{AdmissionInfo, RequestState, Scheduler, SchedulerConfig, SchedulerMode};
use crate::scoring::ScoreConfig;
use crate::workload::WorkloadRequest;
use crate::Scalar;

/// Simulated time costs, in abstract ticks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Fixed cost of a step.
    pub decode_base: f64,
    /// Additional cost per decoded request in the batch.
    pub decode_per_request: f64,
    /// Cost of a (batched) compression: stall ticks when synchronous,
    /// completion delay in steps (rounded up) when asynchronous.
    pub compress_ticks: f64,
    /// Prefill cost per prompt token written.
    pub prefill_per_token: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            decode_base: 1.0,
            decode_per_request: 0.05,
            compress_ticks: 4.0,
            prefill_per_token: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Deterministic tick accumulation from the cost model.
    Simulated,
    /// Wall-clock seconds; scheduling stays deterministic but timing
    /// metrics are not reproducible.
    Wallclock,
}

/// Runtime knobs of the engine.
#[derive(Debug, Clone, Copy)]
pub struct EngineOptions {
    pub seed: u64,
    pub clock: ClockMode,
    pub async_compression: bool,
    /// Run the attention forward per decoded token (validation hook;
    /// scheduling does not depend on it).
    pub compute_attention: bool,
    pub max_steps: Option<u64>,
    pub cost: CostModel,
    /// Check pool invariants every step (tests and simulations).
    pub validate_each_step: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            clock: ClockMode::Simulated,
            async_compression: true,
            compute_attention: false,
            max_steps: None,
            cost: CostModel::default(),
            validate_each_step: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error("deadlock detected at step {step}: no request can make progress")]
    Deadlock { step: u64 },
    #[error("workload infeasible: {0}")]
    Infeasible(String),
    #[error("invariant violation at step {step}: {message}")]
    Invariant { step: u64, message: String },
}

// ---- synthetic model ---------------------------------------------------------

const ROLE_Q: u64 = 1;
const ROLE_K: u64 = 2;
const ROLE_V: u64 = 3;

/// Deterministic counter-based stand-in for the model forward pass:
/// every (seed, position, layer, head, role) tuple maps to a unit-norm
/// vector, with no state shared across tuples.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticModel {
    seed: u64,
    head_dim: usize,
}

impl SyntheticModel {
    pub fn new(seed: u64, head_dim: usize) -> Self {
        Self { seed, head_dim }
    }

    /// Unit-norm vector for one (content seed, layer, head, role).
    pub fn vector(&self, content_seed: u64, layer: usize, head: usize, role: u64) -> Vec<Scalar> {
        let base = mix::mix(self.seed, &[content_seed, layer as u64, head as u64, role]);
        let mut v: Vec<Scalar> = (0..self.head_dim)
            .map(|i| {
                mix::unit_interval(mix::splitmix64(
                    base ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ))
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<Scalar>().sqrt();
        // Components are nonzero by construction, so the norm is too.
        for x in &mut v {
            *x /= norm;
        }
        v
    }

    /// The (q, k, v) triple for one head at one position.
    pub fn states(
        &self,
        request_seed: u64,
        position: u64,
        layer: usize,
        head: usize,
    ) -> (Vec<Scalar>, Vec<Scalar>, Vec<Scalar>) {
        let content = mix::mix(request_seed, &[position]);
        (
            self.vector(content, layer, head, ROLE_Q),
            self.vector(content, layer, head, ROLE_K),
            self.vector(content, layer, head, ROLE_V),
        )
    }
}

// ---- paged attention forward ----------------------------------------------------

/// Standard decode attention over the paged entries in logical order:
/// `softmax(q K^T / sqrt(d)) V` for one (layer, kv-head).
pub fn paged_attention_forward(
    pool: &PagedPool,
    query: &[Scalar],
    table: &BlockTable,
    logical_len: usize,
    layer: usize,
    kv_head: usize,
) -> Vec<Scalar> {
    let d = pool.config().head_dim;
    let b = pool.config().block_size;
    debug_assert!(logical_len >= 1);
    debug_assert!(logical_len <= table.num_blocks() * b);
    let scale = 1.0 / (d as Scalar).sqrt();

    let mut logits = Vec::with_capacity(logical_len);
    let mut max_logit = Scalar::NEG_INFINITY;
    for pos in 0..logical_len {
        let (block, slot) = (table.blocks()[pos / b], pos % b);
        let k = pool.read_key(layer, block, slot, kv_head);
        let dot: Scalar = query.iter().zip(k).map(|(a, b)| a * b).sum();
        let logit = dot * scale;
        max_logit = max_logit.max(logit);
        logits.push(logit);
    }
    let mut denom = 0.0f64;
    for l in &mut logits {
        *l = (*l - max_logit).exp();
        denom += *l as f64;
    }
    let mut out = vec![0.0f64; d];
    for pos in 0..logical_len {
        let (block, slot) = (table.blocks()[pos / b], pos % b);
        let v = pool.read_value(layer, block, slot, kv_head);
        let weight = logits[pos] as f64 / denom;
        for (o, &x) in out.iter_mut().zip(v) {
            *o += weight * x as f64;
        }
    }
    out.into_iter().map(|x| x as Scalar).collect()
}

// ---- per-request runtime state ---------------------------------------------------

#[derive(Debug)]
struct RequestRt {
    spec: WorkloadRequest,
    seed: u64,
    generated: usize,
    first_token_tick: Option<f64>,
    last_token_tick: f64,
}

impl RequestRt {
    /// Raw content id of one prompt block: from the explicit hash chain,
    /// from the shared prefix group when the block lies fully inside the
    /// prefix, or unique to the request.
    fn content_block_id(&self, block_size: usize, block_idx: usize) -> u64 {
        if let Some(chain) = &self.spec.prompt_hash_chain {
            return chain[block_idx];
        }
        if let Some(group) = self.spec.prefix_group {
            if (block_idx + 1) * block_size <= self.spec.prefix_len {
                return mix::mix(group, &[block_idx as u64]);
            }
        }
        mix::mix(self.seed, &[0x626c_6f63_6b, block_idx as u64])
    }

    /// Content seed for one token position. Prompt tokens derive from
    /// their block's content id so shared prefixes agree bit-exactly;
    /// generated tokens are unique to the request and stable across
    /// preemption.
    fn token_seed(&self, block_size: usize, pos: usize) -> u64 {
        if pos < self.spec.prompt_len {
            mix::mix(self.content_block_id(block_size, pos / block_size), &[(pos % block_size) as u64])
        } else {
            mix::mix(self.seed, &[0x6f75_7470_7574, pos as u64])
        }
    }

    /// Raw content ids of the full original-prompt blocks (the part that
    /// participates in prefix matching).
    fn matchable_chain(&self, block_size: usize) -> Vec<u64> {
        (0..self.spec.prompt_len / block_size)
            .map(|i| self.content_block_id(block_size, i))
            .collect()
    }

    /// Tokens the next prefill must cover: the prompt plus anything
    /// generated before a preemption (token text survives preemption and
    /// is re-prefilled).
    fn prefill_len(&self) -> usize {
        self.spec.prompt_len + self.generated
    }
}

fn slotless_eligible(cfg: &SchedulerConfig, num_blocks: usize, last_block_fill: usize) -> bool {
    num_blocks < cfg.n_max || last_block_fill < cfg.block_size - cfg.window
}

fn admission_info_for(
    pool: &PagedPool,
    scfg: &SchedulerConfig,
    request: &RequestRt,
) -> AdmissionInfo {
    let b = scfg.block_size;
    let len = request.prefill_len();
    let total_blocks = len.div_ceil(b);
    let matched = if scfg.prefix_sharing {
        pool.probe_prefix(&request.matchable_chain(b)).min(total_blocks)
    } else {
        0
    };
    let last_fill = if len % b == 0 { b } else { len % b };
    AdmissionInfo {
        blocks_needed: total_blocks - matched,
        eligible_slotless: slotless_eligible(scfg, total_blocks, last_fill),
    }
}

// ---- engine -------------------------------------------------------------------------

#[derive(Debug)]
struct PendingCompression {
    due_step: u64,
    request: u64,
    outcome: CompressionOutcome,
}

enum AllocOutcome {
    Allocated,
    Blocked,
    SelfPreempted,
}

enum DecodeOutcome {
    Decoded { finished: bool },
    Blocked,
    SelfPreempted,
}

pub struct Engine {
    pool: PagedPool,
    slots: QuerySlotCache,
    sched: Scheduler,
    model: SyntheticModel,
    score_config: ScoreConfig,
    compressor: CompressorConfig,
    opts: EngineOptions,
    requests: Vec<RequestRt>,
    pending: VecDeque<PendingCompression>,
    step: u64,
    clock: f64,
    wall_start: Option<std::time::Instant>,
    // metrics accumulation
    total_tokens: u64,
    prefill_ticks: f64,
    decode_ticks: f64,
    compression_ticks: f64,
    compressions: u64,
    prefill_tokens_written: u64,
    frac_sum: f64,
    frac_steps: u64,
    histogram: std::collections::BTreeMap<u32, u64>,
    series: MetricsSeries,
}

impl Engine {
    pub fn new(
        pool_config: PoolConfig,
        sched_config: SchedulerConfig,
        compressor: CompressorConfig,
        score_config: ScoreConfig,
        opts: EngineOptions,
    ) -> Result<Self, EngineError> {
        let (pool, slots) = init_pool(pool_config)?;
        let model = SyntheticModel::new(opts.seed, pool_config.head_dim);
        Ok(Self {
            pool,
            slots,
            sched: Scheduler::new(sched_config),
            model,
            score_config,
            compressor,
            opts,
            requests: Vec::new(),
            pending: VecDeque::new(),
            step: 0,
            clock: 0.0,
            wall_start: None,
            total_tokens: 0,
            prefill_ticks: 0.0,
            decode_ticks: 0.0,
            compression_ticks: 0.0,
            compressions: 0,
            prefill_tokens_written: 0,
            frac_sum: 0.0,
            frac_steps: 0,
            histogram: std::collections::BTreeMap::new(),
            series: MetricsSeries::default(),
        })
    }

    pub fn pool(&self) -> &PagedPool {
        &self.pool
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    fn compression_enabled(&self) -> bool {
        self.sched.config().mode != SchedulerMode::FullKv
    }

    fn block_size(&self) -> usize {
        self.pool.config().block_size
    }

    // ---- prefill ---------------------------------------------------------------

    /// Writes the prompt K/V (skipping matched shared blocks), binds the
    /// slot, pushes the window queries, and registers new full prompt
    /// blocks in the prefix cache. Returns tokens written.
    fn prefill(&mut self, id: u64, with_slot: bool) -> Result<usize, EngineError> {
        let cfg = *self.pool.config();
        let b = cfg.block_size;
        let r = &self.requests[id as usize];
        let len = r.prefill_len();
        let prompt_len = r.spec.prompt_len;

        let matched_tokens = if self.sched.config().prefix_sharing {
            let chain = r.matchable_chain(b);
            let (blocks, tokens) = self.pool.match_prefix(&chain);
            if !blocks.is_empty() {
                self.pool.adopt_shared_blocks(id, &blocks);
            }
            tokens
        } else {
            0
        };

        for pos in matched_tokens..len {
            let block = if pos % b == 0 {
                self.pool.allocate_block(id)?
            } else {
                let table = self.pool.table(id).expect("table exists during prefill");
                table.blocks()[pos / b]
            };
            let slot = pos % b;
            let seed = self.requests[id as usize].token_seed(b, pos);
            for layer in 0..cfg.num_layers {
                for head in 0..cfg.kv_heads {
                    let k = self.model.vector(seed, layer, head, ROLE_K);
                    let v = self.model.vector(seed, layer, head, ROLE_V);
                    self.pool.write_kv(layer, block, slot, head, &k, &v)?;
                }
            }
            self.pool.extend_logical_len(id, 1)?;
            self.prefill_tokens_written += 1;
        }

        // Register full original-prompt blocks for future sharing.
        if self.sched.config().prefix_sharing {
            let blocks: Vec<usize> =
                self.pool.table(id).expect("prefilled").blocks().to_vec();
            let mut parent = None;
            for i in 0..prompt_len / b {
                let raw = self.requests[id as usize].content_block_id(b, i);
                let chained = PagedPool::chain_hash(parent, raw);
                if i * b >= matched_tokens {
                    self.pool.register_prefix_block(blocks[i], chained);
                }
                parent = Some(chained);
            }
        }

        if with_slot {
            let slot = self.slots.acquire(id).expect("admission reserved a slot");
            self.sched.bind_slot(id, slot);
        }
        if let Some(slot) = self.sched.slot(id) {
            // Push the last w prompt query states, oldest first.
            let start = len.saturating_sub(cfg.window);
            for pos in start..len {
                let seed = self.requests[id as usize].token_seed(b, pos);
                for layer in 0..cfg.num_layers {
                    let q: Vec<Scalar> = (0..cfg.query_heads)
                        .flat_map(|h| self.model.vector(seed, layer, h, ROLE_Q))
                        .collect();
                    self.slots.push(slot, layer, &q)?;
                }
            }
        }
        Ok(len - matched_tokens)
    }

    // ---- decode ---------------------------------------------------------------

    fn allocate_with_preemption(&mut self, id: u64) -> Result<AllocOutcome, EngineError> {
        loop {
            match self.pool.allocate_block(id) {
                Ok(_) => return Ok(AllocOutcome::Allocated),
                Err(PoolError::NoFreeBlocks) => match self.sched.choose_victim() {
                    None => return Ok(AllocOutcome::Blocked),
                    Some(victim) if victim == id => {
                        self.preempt(victim);
                        return Ok(AllocOutcome::SelfPreempted);
                    }
                    Some(victim) => self.preempt(victim),
                },
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn preempt(&mut self, victim: u64) {
        let slot = self.sched.apply_preemption(victim);
        if let Some(s) = slot {
            self.slots.release(s);
        }
        self.pool.release_request(victim).expect("victim owns its blocks");
        // A freed slot can serve a slotless request immediately.
        self.sched.assign_freed_slots(&mut self.slots);
    }

    fn decode_one(&mut self, id: u64) -> Result<DecodeOutcome, EngineError> {
        let b = self.block_size();
        let cfg = *self.pool.config();
        if self.pool.table(id).expect("running request has a table").is_last_block_full(b) {
            debug_assert!(
                !self.compression_enabled()
                    || self.pool.table(id).unwrap().num_blocks() < self.compressor.n_max,
                "a triggered request must compress before it decodes again"
            );
            match self.allocate_with_preemption(id)? {
                AllocOutcome::Allocated => {}
                AllocOutcome::Blocked => return Ok(DecodeOutcome::Blocked),
                AllocOutcome::SelfPreempted => return Ok(DecodeOutcome::SelfPreempted),
            }
        }

        let (block, slot_idx, write_pos) = {
            let table = self.pool.table(id).expect("table");
            let wp = table.len_tokens();
            (table.blocks()[wp / b], wp % b, wp)
        };
        let r = &self.requests[id as usize];
        let content_pos = r.spec.prompt_len + r.generated;
        let seed = r.token_seed(b, content_pos);

        for layer in 0..cfg.num_layers {
            for head in 0..cfg.kv_heads {
                let k = self.model.vector(seed, layer, head, ROLE_K);
                let v = self.model.vector(seed, layer, head, ROLE_V);
                self.pool.write_kv(layer, block, slot_idx, head, &k, &v)?;
            }
        }
        if let Some(slot) = self.sched.slot(id) {
            for layer in 0..cfg.num_layers {
                let q: Vec<Scalar> = (0..cfg.query_heads)
                    .flat_map(|h| self.model.vector(seed, layer, h, ROLE_Q))
                    .collect();
                self.slots.push(slot, layer, &q)?;
            }
        }
        if self.opts.compute_attention {
            let table = self.pool.table(id).expect("table").clone();
            let group = cfg.group_size();
            for layer in 0..cfg.num_layers {
                for q_head in 0..cfg.query_heads {
                    let q = self.model.vector(seed, layer, q_head, ROLE_Q);
                    let _ = paged_attention_forward(
                        &self.pool,
                        &q,
                        &table,
                        write_pos + 1,
                        layer,
                        q_head / group,
                    );
                }
            }
        }
        self.pool.extend_logical_len(id, 1)?;

        let r = &mut self.requests[id as usize];
        r.generated += 1;
        let finished = r.generated >= r.spec.output_len;
        Ok(DecodeOutcome::Decoded { finished })
    }

    fn finish_request(&mut self, id: u64) {
        // Slot released before blocks so reassignment happens this step.
        if let Some(slot) = self.sched.finish(id) {
            self.slots.release(slot);
            self.sched.assign_freed_slots(&mut self.slots);
        }
        self.pool.release_request(id).expect("finished request owns its blocks");
    }

    // ---- compression ------------------------------------------------------------

    fn compression_trigger(&self, id: u64) -> bool {
        if !self.compression_enabled() || self.sched.is_compressing(id) {
            return false;
        }
        let table = self.pool.table(id).expect("running request has a table");
        table.num_blocks() >= self.compressor.n_max && table.is_last_block_full(self.block_size())
    }

    /// Returns true when the compression launched (false: blocked on
    /// target allocation or the request preempted itself).
    fn launch_compression(&mut self, id: u64) -> Result<bool, EngineError> {
        let prefix_sharing = self.sched.config().prefix_sharing;
        loop {
            let job = CompressJob {
                request: id,
                slot: self.sched.slot(id).expect("triggered request holds a slot"),
                compressed: self.sched.is_compressed(id),
            };
            match compress::run_compression(
                &mut self.pool,
                &self.slots,
                &job,
                &self.score_config,
                &self.compressor,
                prefix_sharing,
            ) {
                Ok(outcome) => {
                    if self.opts.async_compression {
                        let delay = (self.opts.cost.compress_ticks.ceil() as u64).max(1);
                        self.sched.set_compressing(id, true);
                        self.pending.push_back(PendingCompression {
                            due_step: self.step + delay,
                            request: id,
                            outcome,
                        });
                    } else {
                        compress::finish_compression(&mut self.pool, id, &outcome)?;
                        self.sched.mark_compressed(id);
                    }
                    return Ok(true);
                }
                Err(CompressError::Pool(PoolError::NoFreeBlocks)) => {
                    match self.sched.choose_victim() {
                        None => {
                            // Wait for blocks; the trigger re-fires next step.
                            self.sched.mark_blocked(id);
                            return Ok(false);
                        }
                        Some(victim) if victim == id => {
                            self.preempt(victim);
                            return Ok(false);
                        }
                        Some(victim) => self.preempt(victim),
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn apply_due_completions(&mut self) -> Result<(), EngineError> {
        while let Some(front) = self.pending.front() {
            if front.due_step > self.step {
                break;
            }
            let p = self.pending.pop_front().expect("peeked");
            compress::finish_compression(&mut self.pool, p.request, &p.outcome)?;
            self.sched.set_compressing(p.request, false);
            self.sched.mark_compressed(p.request);
        }
        Ok(())
    }

    // ---- main loop -------------------------------------------------------------

    fn validate_workload(&self, workload: &[WorkloadRequest]) -> Result<(), EngineError> {
        let b = self.block_size();
        let total = self.pool.config().total_blocks;
        for (i, r) in workload.iter().enumerate() {
            let peak_blocks = (r.prompt_len + r.output_len).div_ceil(b);
            if peak_blocks > total {
                return Err(EngineError::Infeasible(format!(
                    "requests[{i}] can reach {peak_blocks} blocks but the pool has {total}; \
                     a preempted request could never be re-admitted"
                )));
            }
            if let Some(chain) = &r.prompt_hash_chain {
                let needed = r.prompt_len.div_ceil(b);
                if chain.len() != needed {
                    return Err(EngineError::Infeasible(format!(
                        "requests[{i}].prompt_hash_chain has {} entries, prompt needs {needed}",
                        chain.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn record_step(
        &mut self,
        step_ticks: f64,
        tokens_this_step: u64,
        triggered: usize,
        is_decode_step: bool,
    ) {
        let running = self.sched.running_ids().len() as u32;
        let waiting = self.sched.waiting_count() as u32;
        let total = self.pool.config().total_blocks;
        let owned = total - self.pool.num_free_blocks();
        self.series.running.push(running);
        self.series.waiting.push(waiting);
        self.series.utilization.push(owned as f64 / total as f64);
        self.series
            .throughput
            .push(if step_ticks > 0.0 { tokens_this_step as f64 / step_ticks } else { 0.0 });
        *self.histogram.entry(running).or_insert(0) += 1;
        if is_decode_step && running > 0 {
            self.frac_sum += triggered as f64 / running as f64;
            self.frac_steps += 1;
        }
    }

    fn check_invariants(&self) -> Result<(), EngineError> {
        if !self.pool.check_conservation() {
            return Err(EngineError::Invariant {
                step: self.step,
                message: "block conservation violated".into(),
            });
        }
        // Full structural validation is O(total blocks); sample it.
        if self.step % 1024 == 0 {
            let extras: Vec<&[usize]> =
                self.pending.iter().map(|p| p.outcome.new_blocks.as_slice()).collect();
            self.pool
                .validate(&extras)
                .map_err(|message| EngineError::Invariant { step: self.step, message })?;
        }
        Ok(())
    }

    /// Runs the workload to completion (or `max_steps`) and reports
    /// metrics.
    pub fn run(&mut self, workload: &[WorkloadRequest]) -> Result<EngineMetrics, EngineError> {
        self.validate_workload(workload)?;
        self.requests = workload
            .iter()
            .enumerate()
            .map(|(i, spec)| RequestRt {
                spec: spec.clone(),
                seed: mix::mix(self.opts.seed, &[0x7265_71, i as u64]),
                generated: 0,
                first_token_tick: None,
                last_token_tick: 0.0,
            })
            .collect();
        self.wall_start = Some(std::time::Instant::now());
        let mut arrival_cursor = 0usize;
        let mut completed = true;

        loop {
            while arrival_cursor < self.requests.len()
                && self.requests[arrival_cursor].spec.arrival_step <= self.step
            {
                self.sched.enqueue_arrival(arrival_cursor as u64);
                arrival_cursor += 1;
            }
            if arrival_cursor == self.requests.len() && self.sched.all_finished() {
                break;
            }
            if let Some(max) = self.opts.max_steps {
                if self.step >= max {
                    completed = false;
                    break;
                }
            }

            self.apply_due_completions()?;
            self.sched.assign_freed_slots(&mut self.slots);

            // Admission decisions come from the scheduler; the engine
            // supplies prefill footprints through disjoint borrows.
            let admissions = {
                let slots_free = self.slots.num_free_slots();
                let free_blocks = self.pool.num_free_blocks();
                let scfg = *self.sched.config();
                let (pool, requests) = (&self.pool, &self.requests);
                self.sched.admit(slots_free, free_blocks, |id| {
                    admission_info_for(pool, &scfg, &requests[id as usize])
                })
            };

            let mut step_ticks;
            let mut tokens_this_step = 0u64;
            let mut decoded_ids: Vec<u64> = Vec::new();
            let mut launches: Vec<u64> = Vec::new();
            let is_prefill_step = !admissions.is_empty();

            if is_prefill_step {
                let mut written = 0usize;
                for adm in &admissions {
                    written += self.prefill(adm.id, adm.with_slot)?;
                    // A long prompt can land exactly on the trigger.
                    if self.compression_trigger(adm.id) {
                        launches.push(adm.id);
                    }
                }
                step_ticks =
                    self.opts.cost.decode_base + self.opts.cost.prefill_per_token * written as f64;
                self.prefill_ticks += step_ticks;
            } else {
                // Triggered requests form the compression set and leave
                // the decode batch; blocked slotless requests stay out.
                let candidates: Vec<u64> = self.sched.running_ids().to_vec();
                let mut batch: Vec<u64> = Vec::new();
                for id in candidates {
                    if self.sched.is_compressing(id) {
                        continue;
                    }
                    if self.compression_trigger(id) {
                        launches.push(id);
                        continue;
                    }
                    if self.sched.slot(id).is_none() && self.compression_enabled() {
                        let (blocks, fill) = {
                            let t = self.pool.table(id).expect("running request has a table");
                            (t.num_blocks(), t.last_block_fill(self.block_size()))
                        };
                        if !slotless_eligible(self.sched.config(), blocks, fill) {
                            self.sched.mark_blocked(id);
                            continue;
                        }
                    }
                    batch.push(id);
                }

                for id in batch {
                    // A preemption earlier in this batch may have evicted it.
                    if !matches!(
                        self.sched.state(id),
                        RequestState::RunningWithSlot
                            | RequestState::RunningNoSlot
                            | RequestState::Blocked
                    ) {
                        continue;
                    }
                    match self.decode_one(id)? {
                        DecodeOutcome::Decoded { finished } => {
                            self.sched.mark_running(id);
                            decoded_ids.push(id);
                            tokens_this_step += 1;
                            if finished {
                                self.finish_request(id);
                            }
                        }
                        DecodeOutcome::Blocked => self.sched.mark_blocked(id),
                        DecodeOutcome::SelfPreempted => {}
                    }
                }
                step_ticks = self.opts.cost.decode_base
                    + self.opts.cost.decode_per_request * decoded_ids.len() as f64;
                self.decode_ticks += step_ticks;
            }

            // Launch this step's compression set.
            let mut launched = 0usize;
            for &id in &launches {
                let state = self.sched.state(id);
                let launchable = matches!(
                    state,
                    RequestState::RunningWithSlot | RequestState::Blocked
                ) && !self.sched.is_compressing(id);
                if launchable && self.launch_compression(id)? {
                    launched += 1;
                }
            }
            if launched > 0 {
                self.compressions += launched as u64;
                self.compression_ticks += self.opts.cost.compress_ticks;
                if !self.opts.async_compression {
                    step_ticks += self.opts.cost.compress_ticks;
                }
            }

            // Advance the clock, then stamp this step's tokens.
            match self.opts.clock {
                ClockMode::Simulated => self.clock += step_ticks,
                ClockMode::Wallclock => {
                    self.clock = self.wall_start.expect("set at run start").elapsed().as_secs_f64()
                }
            }
            for id in &decoded_ids {
                let r = &mut self.requests[*id as usize];
                r.first_token_tick.get_or_insert(self.clock);
                r.last_token_tick = self.clock;
            }
            self.total_tokens += tokens_this_step;

            self.record_step(step_ticks, tokens_this_step, launched, !is_prefill_step);
            if self.opts.validate_each_step {
                self.check_invariants()?;
            }

            // Deadlock: a decode step where nothing moved and nothing is
            // scheduled to change the picture.
            let stuck = !is_prefill_step
                && decoded_ids.is_empty()
                && launched == 0
                && self.pending.is_empty()
                && !self.sched.running_ids().is_empty()
                && arrival_cursor == self.requests.len();
            if stuck {
                return Err(EngineError::Deadlock { step: self.step });
            }

            self.step += 1;
        }

        Ok(self.assemble_metrics(completed))
    }

    fn assemble_metrics(&self, completed: bool) -> EngineMetrics {
        let tpot_per_request: Vec<f64> = self
            .requests
            .iter()
            .map(|r| match (r.first_token_tick, r.generated) {
                (Some(first), g) if g > 0 => (r.last_token_tick - first) / g as f64,
                _ => 0.0,
            })
            .collect();
        let finished_tpots: Vec<f64> = self
            .requests
            .iter()
            .zip(&tpot_per_request)
            .filter(|(r, _)| r.generated >= r.spec.output_len)
            .map(|(_, &t)| t)
            .collect();
        let mean_tpot = if finished_tpots.is_empty() {
            0.0
        } else {
            finished_tpots.iter().sum::<f64>() / finished_tpots.len() as f64
        };
        let total_ticks = self.clock;
        EngineMetrics {
            total_steps: self.step,
            total_ticks,
            total_tokens: self.total_tokens,
            tps: if total_ticks > 0.0 { self.total_tokens as f64 / total_ticks } else { 0.0 },
            mean_tpot,
            tpot_per_request,
            stage_shares: StageShares {
                prefill: share(self.prefill_ticks, total_ticks),
                decode: share(self.decode_ticks, total_ticks),
                compression: share(self.compression_ticks, total_ticks),
            },
            concurrency_histogram: self.histogram.iter().map(|(&k, &v)| (k, v)).collect(),
            preemptions: self.sched.preemptions(),
            compressions: self.compressions,
            prefill_tokens_written: self.prefill_tokens_written,
            mean_compression_fraction: if self.frac_steps > 0 {
                self.frac_sum / self.frac_steps as f64
            } else {
                0.0
            },
            completed,
            series: self.series.clone(),
        }
    }
}

fn share(part: f64, total: f64) -> f64 {
    if total > 0.0 {
        part / total
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::PoolConfig;
    use crate::scoring::{PoolingPolicy, RedundancyVariant};

    fn pool_cfg() -> PoolConfig {
        PoolConfig {
            num_layers: 2,
            total_blocks: 32,
            block_size: 4,
            kv_heads: 2,
            query_heads: 4,
            head_dim: 4,
            max_concurrency: 2,
            window: 2,
            global_score_enabled: true,
        }
    }

    fn sched_cfg(mode: SchedulerMode, prefix: bool) -> SchedulerConfig {
        SchedulerConfig {
            mode,
            prefix_sharing: prefix,
            max_concurrency: 2,
            n_max: 4,
            block_size: 4,
            window: 2,
        }
    }

    fn score_cfg() -> ScoreConfig {
        ScoreConfig {
            pooling: PoolingPolicy::FirstOnly,
            redundancy: RedundancyVariant::Lightning,
            ..ScoreConfig::default()
        }
    }

    fn engine(mode: SchedulerMode, prefix: bool, opts: EngineOptions) -> Engine {
        let mut pc = pool_cfg();
        if mode == SchedulerMode::FullKv {
            pc.global_score_enabled = false;
        }
        Engine::new(
            pc,
            sched_cfg(mode, prefix),
            CompressorConfig { n_max: 4, layer_stride: 1 },
            score_cfg(),
            opts,
        )
        .unwrap()
    }

    fn req(prompt: usize, output: usize) -> WorkloadRequest {
        WorkloadRequest {
            arrival_step: 0,
            prompt_len: prompt,
            output_len: output,
            prompt_hash_chain: None,
            prefix_group: None,
            prefix_len: 0,
        }
    }

    #[test]
    fn synthetic_states_are_deterministic_and_unit_norm() {
        let m = SyntheticModel::new(7, 8);
        let (q1, k1, v1) = m.states(3, 10, 1, 0);
        let (q2, k2, v2) = m.states(3, 10, 1, 0);
        assert_eq!(q1, q2);
        assert_eq!(k1, k2);
        assert_eq!(v1, v2);
        for v in [&q1, &k1, &v1] {
            let norm: Scalar = v.iter().map(|x| x * x).sum::<Scalar>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn synthetic_states_collide_rarely() {
        let m = SyntheticModel::new(1, 4);
        let mut seen = std::collections::HashSet::new();
        for pos in 0..10_000u64 {
            let (_, k, _) = m.states(5, pos, 0, 0);
            let bits: Vec<u32> = k.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(bits), "collision at position {pos}");
        }
    }

    #[test]
    fn forward_single_entry_returns_its_value() {
        let (mut pool, _) = init_pool(pool_cfg()).unwrap();
        pool.allocate_block(1).unwrap();
        pool.extend_logical_len(1, 1).unwrap();
        let table = pool.table(1).unwrap().clone();
        let block = table.blocks()[0];
        pool.write_kv(0, block, 0, 0, &[1.0, 0.0, 0.0, 0.0], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        let out = paged_attention_forward(&pool, &[1.0, 0.0, 0.0, 0.0], &table, 1, 0, 0);
        assert_eq!(out, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn forward_equal_keys_average_values() {
        let (mut pool, _) = init_pool(pool_cfg()).unwrap();
        pool.allocate_block(1).unwrap();
        pool.extend_logical_len(1, 2).unwrap();
        let table = pool.table(1).unwrap().clone();
        let block = table.blocks()[0];
        pool.write_kv(0, block, 0, 0, &[1.0, 0.0, 0.0, 0.0], &[2.0, 0.0, 0.0, 0.0]).unwrap();
        pool.write_kv(0, block, 1, 0, &[1.0, 0.0, 0.0, 0.0], &[4.0, 0.0, 0.0, 0.0]).unwrap();
        let out = paged_attention_forward(&pool, &[0.5, 0.5, 0.0, 0.0], &table, 2, 0, 0);
        assert!((out[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn single_request_runs_to_completion() {
        let mut e = engine(SchedulerMode::Constrained, false, EngineOptions {
            validate_each_step: true,
            ..EngineOptions::default()
        });
        let metrics = e.run(&[req(10, 30)]).unwrap();
        assert!(metrics.completed);
        assert_eq!(metrics.total_tokens, 30);
        assert!(metrics.tps > 0.0);
        assert!(metrics.compressions > 0, "30 tokens over n_max*b=16 must compress");
        assert_eq!(metrics.preemptions, 0);
        assert!(e.pool().num_free_blocks() == e.pool().config().total_blocks);
    }

    #[test]
    fn prompt_blocks_ceiling_division() {
        let mut e = engine(SchedulerMode::Constrained, false, EngineOptions::default());
        // 10 tokens / b=4 -> 3 blocks, last holds 2.
        e.requests = vec![RequestRt {
            spec: req(10, 5),
            seed: 1,
            generated: 0,
            first_token_tick: None,
            last_token_tick: 0.0,
        }];
        e.sched.enqueue_arrival(0);
        e.sched.admit(1, 100, |_| AdmissionInfo { blocks_needed: 3, eligible_slotless: true });
        e.prefill(0, true).unwrap();
        let table = e.pool.table(0).unwrap();
        assert_eq!(table.num_blocks(), 3);
        assert_eq!(table.last_block_fill(4), 2);
    }

    #[test]
    fn empty_workload_terminates_immediately() {
        let mut e = engine(SchedulerMode::Constrained, false, EngineOptions::default());
        let metrics = e.run(&[]).unwrap();
        assert_eq!(metrics.total_steps, 0);
        assert_eq!(metrics.total_tokens, 0);
        assert!(metrics.completed);
        assert!(metrics.series.running.is_empty());
    }

    #[test]
    fn infeasible_request_rejected() {
        let mut e = engine(SchedulerMode::Hybrid, false, EngineOptions::default());
        // 32 blocks * 4 slots = 128 tokens max; this request wants more.
        let err = e.run(&[req(10, 1000)]).unwrap_err();
        assert!(matches!(err, EngineError::Infeasible(_)));
    }

    #[test]
    fn deterministic_across_runs() {
        let workload = vec![req(10, 40), req(6, 25), req(13, 33)];
        let run = |seed| {
            let mut e = engine(SchedulerMode::Hybrid, false, EngineOptions {
                seed,
                ..EngineOptions::default()
            });
            e.run(&workload).unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = run(43);
        assert_eq!(a.total_tokens, c.total_tokens, "token counts agree across seeds");
    }

    #[test]
    fn full_kv_baseline_runs_without_compression() {
        let mut e = engine(SchedulerMode::FullKv, false, EngineOptions {
            validate_each_step: true,
            ..EngineOptions::default()
        });
        let metrics = e.run(&[req(10, 30), req(8, 20)]).unwrap();
        assert!(metrics.completed);
        assert_eq!(metrics.compressions, 0);
        assert_eq!(metrics.total_tokens, 50);
    }

    #[test]
    fn sync_and_async_agree_on_final_state() {
        let workload = vec![req(9, 35), req(7, 28)];
        let run = |async_compression| {
            let mut e = engine(SchedulerMode::Constrained, false, EngineOptions {
                async_compression,
                validate_each_step: true,
                ..EngineOptions::default()
            });
            let m = e.run(&workload).unwrap();
            (m.total_tokens, m.compressions, m.total_ticks)
        };
        let (sync_tokens, sync_comps, sync_ticks) = run(false);
        let (async_tokens, async_comps, async_ticks) = run(true);
        assert_eq!(sync_tokens, async_tokens);
        assert_eq!(sync_comps, async_comps);
        assert!(async_ticks <= sync_ticks, "async {async_ticks} vs sync {sync_ticks}");
    }

    #[test]
    fn prefix_sharing_skips_shared_prefill_writes() {
        let shared = |id: u64| WorkloadRequest {
            arrival_step: 0,
            prompt_len: 10,
            output_len: 12,
            prompt_hash_chain: None,
            prefix_group: Some(99),
            prefix_len: 8,
            ..req(10, 12 + id as usize * 0)
        };
        let run = |prefix: bool| {
            let mut e = engine(SchedulerMode::Hybrid, prefix, EngineOptions {
                validate_each_step: true,
                ..EngineOptions::default()
            });
            e.run(&[shared(0), shared(1), shared(2)]).unwrap()
        };
        let with = run(true);
        let without = run(false);
        assert!(
            with.prefill_tokens_written < without.prefill_tokens_written,
            "sharing {} vs no sharing {}",
            with.prefill_tokens_written,
            without.prefill_tokens_written
        );
        assert_eq!(with.total_tokens, without.total_tokens);
    }
}
