//! A composed memory manager: allocators partitioning the size axis, the
//! pool of live blocks, and the bump-pointer arena standing in for virtual
//! memory.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocators::{AllocStats, Allocator, AllocatorClass, AllocatorError, AllocatorSpec, MallocOutcome};
use crate::freelist::{Block, CostDelta, DataStructure, Mechanism, Policy, SizeRange};
use crate::metrics::Metrics;
use crate::trace::ObjectId;

/// Size lookup: one hashed level for the allocator, one for its list.
pub const INDEX_COST: CostDelta = CostDelta::new(2, 2);
pub const ARENA_COST: CostDelta = CostDelta::new(1, 1);
pub const DEFAULT_WORD_BYTES: u64 = 8;

fn is_default_word(w: &u64) -> bool {
    *w == DEFAULT_WORD_BYTES
}

fn default_word() -> u64 {
    DEFAULT_WORD_BYTES
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DmmSpec {
    pub allocators: Vec<AllocatorSpec>,
    /// Bytes per header word; headers span one to three words depending on
    /// the free-list data structure.
    #[serde(default = "default_word", skip_serializing_if = "is_default_word")]
    pub header_word_bytes: u64,
}

impl DmmSpec {
    pub fn new(allocators: Vec<AllocatorSpec>) -> Self {
        Self { allocators, header_word_bytes: DEFAULT_WORD_BYTES }
    }

    pub fn with_word_bytes(mut self, bytes: u64) -> Self {
        self.header_word_bytes = bytes;
        self
    }

    /// Largest request the composition serves.
    pub fn max_size(&self) -> u64 {
        self.allocators.iter().map(|a| a.range.hi).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), DmmError> {
        self.sorted_indices().map(|_| ())
    }

    /// Allocator indices by ascending range, after checking that the
    /// ranges tile `(0, max]`.
    fn sorted_indices(&self) -> Result<Vec<usize>, DmmError> {
        if self.allocators.is_empty() {
            return Err(DmmError::Empty);
        }
        let mut order: Vec<usize> = (0..self.allocators.len()).collect();
        order.sort_by_key(|&i| (self.allocators[i].range.lo, self.allocators[i].range.hi));
        let mut prev_hi = 0;
        for (n, &i) in order.iter().enumerate() {
            let r = self.allocators[i].range;
            if !r.is_valid() {
                return Err(DmmError::Allocator { index: i, source: AllocatorError::InvalidRange(r) });
            }
            if r.lo < prev_hi {
                return Err(DmmError::Overlap { first: self.allocators[order[n - 1]].range, second: r });
            }
            if r.lo > prev_hi {
                return Err(DmmError::Gap { from: prev_hi, to: r.lo });
            }
            prev_hi = r.hi;
        }
        Ok(order)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Per-allocator table of free lists: data structure, mechanism with
    /// policy, and the size range each list serves.
    pub fn render_table(&self) -> Result<String, DmmError> {
        let dmm = Dmm::new(self)?;
        let mut out = String::new();
        for a in &dmm.allocators {
            let s = a.spec();
            let _ = writeln!(out, "{}, split={}, coalesce={}", s.klass, s.split, s.coalesce);
            let _ = writeln!(out, "{:<16}{:<20}Range (bytes)", "Data Structure", "Mechanism(Policy)");
            for l in a.lists() {
                let mech = format!("{}({})", s.mechanism, s.policy);
                let _ = writeln!(out, "{:<16}{:<20}{}", s.data_structure.to_string(), mech, l.range());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DmmError {
    #[error("a manager needs at least one allocator")]
    Empty,
    #[error("ranges {first} and {second} overlap")]
    Overlap { first: SizeRange, second: SizeRange },
    #[error("no allocator covers sizes ({from}, {to}]")]
    Gap { from: u64, to: u64 },
    #[error("allocator {index}: {source}")]
    Allocator {
        index: usize,
        #[source]
        source: AllocatorError,
    },
    #[error("request of {size} bytes exceeds the largest served size {max}")]
    TooLarge { size: u64, max: u64 },
    #[error("zero-byte request")]
    ZeroSize,
}

#[derive(Debug, Clone, Copy)]
struct LiveEntry {
    block: Block,
    requested: u64,
    allocator: u16,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ListUsage {
    pub blocks: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ListMap {
    pub data_structure: DataStructure,
    pub mechanism: Mechanism,
    pub policy: Policy,
    pub range: SizeRange,
    pub free_blocks: u64,
    pub free_bytes: u64,
    pub live_blocks: u64,
    pub live_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AllocatorMap {
    pub klass: AllocatorClass,
    pub split: bool,
    pub coalesce: bool,
    pub range: SizeRange,
    pub stats: AllocStats,
    pub lists: Vec<ListMap>,
}

/// Occupancy of every list, for reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DmmMap {
    pub arena_top: u64,
    pub live_bytes: u64,
    pub free_bytes: u64,
    pub slack_bytes: u64,
    pub allocators: Vec<AllocatorMap>,
}

impl fmt::Display for DmmMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "arena {} B: live {} B, free {} B, slack {} B",
            self.arena_top, self.live_bytes, self.free_bytes, self.slack_bytes
        )?;
        for a in &self.allocators {
            writeln!(f, "{} {} split={} coalesce={}", a.klass, a.range, a.split, a.coalesce)?;
            for l in &a.lists {
                writeln!(
                    f,
                    "  {:<12} {:>6} free ({:>10} B) {:>6} live ({:>10} B)",
                    l.range.to_string(),
                    l.free_blocks,
                    l.free_bytes,
                    l.live_blocks,
                    l.live_bytes
                )?;
            }
        }
        Ok(())
    }
}

/// Result of one malloc.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub block: Block,
    pub allocator: usize,
    pub from_arena: bool,
    pub cost: CostDelta,
}

#[derive(Debug, Clone)]
pub struct Dmm {
    allocators: Vec<Allocator>,
    /// Upper range bounds in allocator order.
    bounds: Vec<u64>,
    live: Vec<Vec<LiveEntry>>,
    live_count: u64,
    list_live: Vec<Vec<ListUsage>>,
    arena_top: u64,
    live_bytes: u64,
    live_frag: u64,
    metrics: Metrics,
    hot: Option<Hotspot>,
}

/// Most frequently touched block position, for FARTHEST fit.
#[derive(Debug, Clone, Default)]
struct Hotspot {
    touches: std::collections::HashMap<u64, u64>,
    best: Option<(u64, u64)>,
}

impl Hotspot {
    fn touch(&mut self, position: u64) {
        let n = self.touches.entry(position).or_insert(0);
        *n += 1;
        let n = *n;
        let better = match self.best {
            None => true,
            Some((bn, bp)) => n > bn || (n == bn && position < bp),
        };
        if better {
            self.best = Some((n, position));
        }
    }
}

impl Dmm {
    pub fn new(spec: &DmmSpec) -> Result<Self, DmmError> {
        let order = spec.sorted_indices()?;
        let mut allocators = Vec::with_capacity(order.len());
        for (n, &i) in order.iter().enumerate() {
            let a = Allocator::build(&spec.allocators[i], n as u16, spec.header_word_bytes)
                .map_err(|source| DmmError::Allocator { index: i, source })?;
            allocators.push(a);
        }
        let bounds = allocators.iter().map(|a| a.range().hi).collect();
        let list_live = allocators.iter().map(|a| vec![ListUsage::default(); a.lists().len()]).collect();
        let hot = allocators.iter().any(Allocator::uses_farthest).then(Hotspot::default);
        Ok(Self {
            allocators,
            bounds,
            live: Vec::new(),
            live_count: 0,
            list_live,
            arena_top: 0,
            live_bytes: 0,
            live_frag: 0,
            metrics: Metrics::default(),
            hot,
        })
    }

    /// Reserves live-pool slots for ids below `count`.
    pub fn reserve_ids(&mut self, count: usize) {
        if self.live.len() < count {
            self.live.resize_with(count, Vec::new);
        }
    }

    pub fn allocators(&self) -> &[Allocator] {
        &self.allocators
    }

    pub fn max_size(&self) -> u64 {
        *self.bounds.last().unwrap()
    }

    pub fn arena_top(&self) -> u64 {
        self.arena_top
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn slack_bytes(&self) -> u64 {
        self.allocators.iter().map(|a| a.stats().slack_bytes).sum()
    }

    pub fn free_bytes(&self) -> u64 {
        self.arena_top - self.live_bytes - self.slack_bytes()
    }

    /// Free bytes counted list by list, independent of the running totals.
    pub fn listed_free_bytes(&self) -> u64 {
        self.allocators.iter().map(Allocator::free_bytes).sum()
    }

    pub fn live_objects(&self) -> u64 {
        self.live_count
    }

    pub fn allocator_for(&self, size: u64) -> Result<usize, DmmError> {
        if size == 0 {
            return Err(DmmError::ZeroSize);
        }
        if size > self.max_size() {
            return Err(DmmError::TooLarge { size, max: self.max_size() });
        }
        Ok(self.bounds.partition_point(|&b| b < size))
    }

    fn charge(&mut self, cost: CostDelta) {
        self.metrics.time_units += cost.time_units;
        self.metrics.mem_accesses += cost.mem_accesses;
    }

    fn internal_frag_now(&self) -> u64 {
        self.live_frag + self.slack_bytes()
    }

    pub fn malloc(&mut self, id: ObjectId, size: u64, now: u64) -> Result<Placement, DmmError> {
        let ai = self.allocator_for(size)?;
        let mut cost = INDEX_COST;
        let hottest = self.hot.as_ref().and_then(|h| h.best.map(|(_, p)| p));
        let free_before = self.free_bytes();
        let outcome = self.allocators[ai]
            .malloc(size, hottest, &mut cost)
            .map_err(|source| DmmError::Allocator { index: ai, source })?;
        let (block, from_arena) = match outcome {
            MallocOutcome::Found(b) => (b, false),
            MallocOutcome::NeedArena { class } => {
                if free_before >= size {
                    self.metrics.external_frag_events += 1;
                    self.metrics.external_frag_wasted_bytes += free_before;
                }
                let b = self.allocators[ai].adopt(self.arena_top, class, size, now);
                self.arena_top += b.size;
                cost += ARENA_COST;
                (b, true)
            }
        };

        self.live_bytes += block.size;
        self.live_frag += block.payload() - size;
        let usage = &mut self.list_live[ai][block.owner.list as usize];
        usage.blocks += 1;
        usage.bytes += block.size;
        self.reserve_ids(id.index() + 1);
        self.live[id.index()].push(LiveEntry { block, requested: size, allocator: ai as u16 });
        self.live_count += 1;
        if let Some(h) = &mut self.hot {
            h.touch(block.position);
        }

        self.metrics.malloc_count += 1;
        self.metrics.internal_frag_bytes = self.metrics.internal_frag_bytes.max(self.internal_frag_now());
        self.charge(cost);
        Ok(Placement { block, allocator: ai, from_arena, cost })
    }

    /// Frees the newest live block of `id`. Freeing an id with nothing
    /// live is counted and otherwise ignored; `Ok(None)` reports it.
    pub fn free(&mut self, id: ObjectId) -> Result<Option<Block>, DmmError> {
        let Some(entry) = self.live.get_mut(id.index()).and_then(Vec::pop) else {
            self.metrics.invalid_frees += 1;
            return Ok(None);
        };
        let ai = entry.allocator as usize;
        let mut cost = INDEX_COST;
        let block = entry.block;
        self.live_count -= 1;
        self.live_bytes -= block.size;
        self.live_frag -= block.payload() - entry.requested;
        let usage = &mut self.list_live[ai][block.owner.list as usize];
        usage.blocks -= 1;
        usage.bytes -= block.size;
        if let Some(h) = &mut self.hot {
            h.touch(block.position);
        }
        self.allocators[ai]
            .free(block, &mut cost)
            .map_err(|source| DmmError::Allocator { index: ai, source })?;
        self.metrics.free_count += 1;
        self.charge(cost);
        Ok(Some(block))
    }

    /// Counters so far, with end-of-run figures filled in.
    pub fn metrics(&self) -> Metrics {
        let mut m = self.metrics;
        for a in &self.allocators {
            let s = a.stats();
            m.split_count += s.splits;
            m.coalesce_count += s.coalesces;
            m.farthest_fallbacks += s.farthest_fallbacks;
        }
        m.hwm_bytes = self.arena_top;
        m.invalid_mallocs = self.live_count;
        m
    }

    pub fn snapshot(&self) -> DmmMap {
        let allocators = self
            .allocators
            .iter()
            .zip(&self.list_live)
            .map(|(a, usage)| {
                let s = a.spec();
                AllocatorMap {
                    klass: s.klass,
                    split: s.split,
                    coalesce: s.coalesce,
                    range: s.range,
                    stats: a.stats(),
                    lists: a
                        .lists()
                        .iter()
                        .zip(usage)
                        .map(|(l, u)| ListMap {
                            data_structure: s.data_structure,
                            mechanism: s.mechanism,
                            policy: s.policy,
                            range: l.range(),
                            free_blocks: l.len() as u64,
                            free_bytes: l.free_bytes(),
                            live_blocks: u.blocks,
                            live_bytes: u.bytes,
                        })
                        .collect(),
                }
            })
            .collect();
        DmmMap {
            arena_top: self.arena_top,
            live_bytes: self.live_bytes,
            free_bytes: self.listed_free_bytes(),
            slack_bytes: self.slack_bytes(),
            allocators,
        }
    }
}
