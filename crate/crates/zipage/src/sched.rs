//! Request lifecycle and scheduling: FCFS admission, query-slot
//! assignment, slotless decoding under hybrid scheduling, blocking, and
//! preemption victim selection.
//!
//! Two scheduling modes exist for the compression engine:
//!
//! - constrained: at most `max_concurrency` requests run, each with a
//!   query slot, and (without prefix sharing) nothing is ever preempted;
//! - hybrid: extra requests run without slots while they are far enough
//!   from their next compression, and the last slotless request is
//!   preempted when blocks run out.
//!
//! With prefix sharing enabled, compression itself may need fresh blocks
//! before it can release anything, so blocking alone can deadlock; the
//! last uncompressed request (slot or not) is preempted instead.
//! Compressed requests are never preempted. A third mode backs the
//! full-KV baseline: no slots, no compression, preempt the most recently
//! added request.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::pool::QuerySlotCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerMode {
    Constrained,
    Hybrid,
    /// Full-KV baseline: no query slots, no compression, vLLM-style
    /// preemption of the most recent request.
    FullKv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub mode: SchedulerMode,
    pub prefix_sharing: bool,
    pub max_concurrency: usize,
    pub n_max: usize,
    pub block_size: usize,
    pub window: usize,
}

/// Lifecycle states. `Blocked` covers both a slotless request that hit
/// its slot deadline and any request stuck on block allocation; the
/// distinguishing context lives in the slot binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestState {
    Waiting,
    RunningWithSlot,
    RunningNoSlot,
    Blocked,
    Finished,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    state: RequestState,
    slot: Option<usize>,
    compressed: bool,
    compressing: bool,
}

/// An admission decision for one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Admission {
    pub id: u64,
    pub with_slot: bool,
}

/// What the scheduler needs to know about a waiting request to admit it.
#[derive(Debug, Clone, Copy)]
pub struct AdmissionInfo {
    /// Fresh blocks the prefill would allocate (after prefix matching).
    pub blocks_needed: usize,
    /// Whether the post-prefill shape can decode without a slot.
    pub eligible_slotless: bool,
}

#[derive(Debug)]
pub struct Scheduler {
    cfg: SchedulerConfig,
    waiting: VecDeque<u64>,
    running: Vec<u64>,
    entries: HashMap<u64, Entry>,
    preemptions: u64,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Self {
        Self {
            cfg,
            waiting: VecDeque::new(),
            running: Vec::new(),
            entries: HashMap::new(),
            preemptions: 0,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn waiting_count(&self) -> usize {
        self.waiting.len()
    }

    pub fn running_ids(&self) -> &[u64] {
        &self.running
    }

    pub fn preemptions(&self) -> u64 {
        self.preemptions
    }

    pub fn state(&self, id: u64) -> RequestState {
        self.entries.get(&id).map_or(RequestState::Waiting, |e| e.state)
    }

    pub fn slot(&self, id: u64) -> Option<usize> {
        self.entries.get(&id).and_then(|e| e.slot)
    }

    pub fn is_compressed(&self, id: u64) -> bool {
        self.entries.get(&id).is_some_and(|e| e.compressed)
    }

    pub fn is_compressing(&self, id: u64) -> bool {
        self.entries.get(&id).is_some_and(|e| e.compressing)
    }

    pub fn slotted_running_count(&self) -> usize {
        self.running
            .iter()
            .filter(|id| self.entries[id].slot.is_some())
            .count()
    }

    /// New arrival joins the back of the waiting queue.
    pub fn enqueue_arrival(&mut self, id: u64) {
        self.waiting.push_back(id);
        self.entries.insert(
            id,
            Entry { state: RequestState::Waiting, slot: None, compressed: false, compressing: false },
        );
    }

    /// A slotless request can decode while it occupies fewer than
    /// `n_max` blocks or its last block holds fewer than
    /// `block_size - window` tokens; past that point it needs the window
    /// queries a slot provides.
    pub fn check_slotless_eligibility(&self, num_blocks: usize, last_block_fill: usize) -> bool {
        num_blocks < self.cfg.n_max || last_block_fill < self.cfg.block_size - self.cfg.window
    }

    /// FCFS admission scan. `free_blocks` is the pool's current free
    /// count; `info` describes each candidate's prefill. Returns the
    /// admitted requests in order; the engine performs the prefills.
    pub fn admit(
        &mut self,
        slots_free: usize,
        free_blocks: usize,
        mut info: impl FnMut(u64) -> AdmissionInfo,
    ) -> Vec<Admission> {
        let mut admitted = Vec::new();
        let mut slots_left = slots_free;
        let mut blocks_left = free_blocks;
        while let Some(&id) = self.waiting.front() {
            let inf = info(id);
            let with_slot = match self.cfg.mode {
                SchedulerMode::Constrained => {
                    if slots_left == 0 || inf.blocks_needed > blocks_left {
                        break;
                    }
                    true
                }
                SchedulerMode::Hybrid => {
                    if inf.blocks_needed > blocks_left {
                        break;
                    }
                    if slots_left > 0 {
                        true
                    } else if inf.eligible_slotless {
                        false
                    } else {
                        break;
                    }
                }
                SchedulerMode::FullKv => {
                    if inf.blocks_needed > blocks_left {
                        break;
                    }
                    false
                }
            };
            self.waiting.pop_front();
            blocks_left -= inf.blocks_needed;
            if with_slot {
                slots_left -= 1;
            }
            let entry = self.entries.get_mut(&id).expect("waiting request has an entry");
            entry.state =
                if with_slot { RequestState::RunningWithSlot } else { RequestState::RunningNoSlot };
            self.running.push(id);
            admitted.push(Admission { id, with_slot });
        }
        admitted
    }

    /// Binds a slot acquired by the engine during admission.
    pub fn bind_slot(&mut self, id: u64, slot: usize) {
        let entry = self.entries.get_mut(&id).expect("unknown request");
        debug_assert!(entry.slot.is_none());
        entry.slot = Some(slot);
        entry.state = RequestState::RunningWithSlot;
    }

    /// Hands free slots to the foremost slotless running requests, in
    /// queue order. Blocked slotless requests resume with the slot.
    pub fn assign_freed_slots(&mut self, slots: &mut QuerySlotCache) -> Vec<(u64, usize)> {
        if self.cfg.mode == SchedulerMode::FullKv {
            return Vec::new();
        }
        let mut assigned = Vec::new();
        for &id in &self.running {
            if slots.num_free_slots() == 0 {
                break;
            }
            let entry = self.entries.get_mut(&id).expect("running request has an entry");
            if entry.slot.is_none() {
                let slot = slots.acquire(id).expect("free slot available");
                entry.slot = Some(slot);
                if entry.state != RequestState::Finished {
                    entry.state = RequestState::RunningWithSlot;
                }
                assigned.push((id, slot));
            }
        }
        assigned
    }

    /// Marks a running request blocked (slot deadline or failed
    /// allocation). Blocked requests keep their blocks.
    pub fn mark_blocked(&mut self, id: u64) {
        let entry = self.entries.get_mut(&id).expect("unknown request");
        debug_assert!(matches!(
            entry.state,
            RequestState::RunningWithSlot | RequestState::RunningNoSlot | RequestState::Blocked
        ));
        entry.state = RequestState::Blocked;
    }

    /// Marks a request decodable again after a successful step.
    pub fn mark_running(&mut self, id: u64) {
        let entry = self.entries.get_mut(&id).expect("unknown request");
        entry.state = if entry.slot.is_some() {
            RequestState::RunningWithSlot
        } else {
            RequestState::RunningNoSlot
        };
    }

    pub fn set_compressing(&mut self, id: u64, compressing: bool) {
        self.entries.get_mut(&id).expect("unknown request").compressing = compressing;
    }

    pub fn mark_compressed(&mut self, id: u64) {
        self.entries.get_mut(&id).expect("unknown request").compressed = true;
    }

    /// Picks the preemption victim after a failed block allocation, or
    /// `None` when blocking is the correct response.
    ///
    /// - full-KV baseline: the most recently added running request;
    /// - prefix sharing off: the last slotless request (when none are
    ///   left the system reverts to constrained blocking);
    /// - prefix sharing on: the last uncompressed request, slotted or
    ///   not (compressed requests are never preempted).
    ///
    /// Requests currently compressing are never victims.
    pub fn choose_victim(&self) -> Option<u64> {
        let candidates = self.running.iter().rev();
        match (self.cfg.mode, self.cfg.prefix_sharing) {
            (SchedulerMode::FullKv, _) => self
                .running
                .last()
                .copied(),
            (_, false) => candidates
                .map(|&id| (id, &self.entries[&id]))
                .find(|(_, e)| e.slot.is_none() && !e.compressing)
                .map(|(id, _)| id),
            (_, true) => candidates
                .map(|&id| (id, &self.entries[&id]))
                .find(|(_, e)| !e.compressed && !e.compressing)
                .map(|(id, _)| id),
        }
    }

    /// Applies a preemption: the victim leaves the running queue and
    /// re-enters the waiting queue at the front. The engine releases its
    /// slot and blocks. Returns the victim's slot, if any.
    pub fn apply_preemption(&mut self, id: u64) -> Option<usize> {
        let pos = self.running.iter().position(|&r| r == id).expect("victim is running");
        self.running.remove(pos);
        self.waiting.push_front(id);
        self.preemptions += 1;
        let entry = self.entries.get_mut(&id).expect("unknown request");
        debug_assert!(!entry.compressing, "compressing requests are not preemptable");
        entry.state = RequestState::Waiting;
        entry.compressed = false;
        entry.slot.take()
    }

    /// Removes a finished request from the running queue. Returns its
    /// slot for the engine to release.
    pub fn finish(&mut self, id: u64) -> Option<usize> {
        let pos = self.running.iter().position(|&r| r == id).expect("finished request is running");
        self.running.remove(pos);
        let entry = self.entries.get_mut(&id).expect("unknown request");
        entry.state = RequestState::Finished;
        entry.compressing = false;
        entry.slot.take()
    }

    /// True when every request known to the scheduler has finished.
    pub fn all_finished(&self) -> bool {
        self.waiting.is_empty() && self.running.is_empty()
    }
}
