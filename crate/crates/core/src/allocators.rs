//! Allocators: a size range served by one or more free lists, with
//! class-specific rounding, splitting and coalescing.
//!
//! Two list layouts exist. *Class* layouts (exact, strict and buddy
//! allocators) keep one list per block size and round requests up to the
//! next class. *Range* layouts (segregated lists, segregated fit, simple
//! segregated storage) keep lists over size intervals and serve the request
//! size as is.
//!
//! Buddy blocks carry no header: their free-list links live inside the free
//! block and sizes are implied by the class index, so buddy geometry stays
//! exact. Every other allocator adds one header per block, sized by the
//! list's data structure.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::freelist::{
    Block, BuddyTag, CostDelta, DataStructure, Extracted, FreeList, FreeListConfig, ListId,
    Mechanism, Policy, SizeRange,
};

pub const SPLIT_COST: CostDelta = CostDelta::new(1, 2);
pub const MERGE_COST: CostDelta = CostDelta::new(1, 2);

const MAX_CLASSES: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AllocatorClass {
    SegregatedFreeList,
    SimpleSegregatedStorage,
    SegregatedFit,
    ExactSegregatedFit,
    StrictSegregatedFit,
    BuddySystemBinary,
    BuddySystemFibonacci,
    /// Every request is drawn fresh from the arena and freed bytes are
    /// parked on a list that is never searched again (direct mapping of
    /// large objects).
    VirtualMemory,
}

impl AllocatorClass {
    pub fn is_buddy(self) -> bool {
        matches!(self, AllocatorClass::BuddySystemBinary | AllocatorClass::BuddySystemFibonacci)
    }

}

impl fmt::Display for AllocatorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AllocatorSpec {
    pub klass: AllocatorClass,
    pub split: bool,
    pub coalesce: bool,
    pub data_structure: DataStructure,
    pub mechanism: Mechanism,
    pub policy: Policy,
    pub range: SizeRange,
    /// Class sizes for exact and strict segregated fit. Derived for buddies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_series: Option<Vec<u64>>,
    /// Upper bounds of the sub-lists of a range layout; the last one must be
    /// `range.hi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_ranges: Option<Vec<u64>>,
}

impl AllocatorSpec {
    pub fn new(klass: AllocatorClass, range: SizeRange, config: FreeListConfig) -> Self {
        Self {
            klass,
            split: false,
            coalesce: false,
            data_structure: config.data_structure,
            mechanism: config.mechanism,
            policy: config.policy,
            range,
            size_series: None,
            sub_ranges: None,
        }
    }

    pub fn with_split(mut self, split: bool) -> Self {
        self.split = split;
        self
    }

    pub fn with_coalesce(mut self, coalesce: bool) -> Self {
        self.coalesce = coalesce;
        self
    }

    pub fn with_series(mut self, series: Vec<u64>) -> Self {
        self.size_series = Some(series);
        self
    }

    pub fn with_sub_ranges(mut self, bounds: Vec<u64>) -> Self {
        self.sub_ranges = Some(bounds);
        self
    }

    pub fn list_config(&self) -> FreeListConfig {
        FreeListConfig::new(self.data_structure, self.mechanism, self.policy)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocatorError {
    #[error("invalid range {0}")]
    InvalidRange(SizeRange),
    #[error("{0} needs a non-empty size series")]
    EmptySeries(AllocatorClass),
    #[error("size series of {klass} tops out at {top}, below the range end {hi}")]
    SeriesDoesNotCover { klass: AllocatorClass, top: u64, hi: u64 },
    #[error("{klass} size series does not match the derived series")]
    SeriesMismatch { klass: AllocatorClass },
    #[error("too many size classes for {0}")]
    TooManyClasses(AllocatorClass),
    #[error("bad sub-ranges for {range}: {reason}")]
    BadSubRanges { range: SizeRange, reason: String },
    #[error("SimpleSegregatedStorage cannot split or coalesce")]
    SplitNotAllowed,
    #[error("request {request} outside allocator range {range}")]
    OutOfRange { request: u64, range: SizeRange },
    #[error("block of {size} bytes at {position} cannot be held by this allocator")]
    NotRepresentable { position: u64, size: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MallocOutcome {
    Found(Block),
    /// No free block could serve the request; the caller draws `class`
    /// payload bytes from the arena.
    NeedArena { class: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AllocStats {
    pub splits: u64,
    pub coalesces: u64,
    pub farthest_fallbacks: u64,
    pub slack_bytes: u64,
    /// Bytes this allocator has drawn from the arena.
    pub owned_bytes: u64,
    /// Bytes currently handed out to the program.
    pub live_bytes: u64,
}

#[derive(Debug, Clone)]
enum Layout {
    /// Sorted class sizes, one per list.
    Classes(Vec<u64>),
    /// Sorted upper bounds, one per list.
    Ranges(Vec<u64>),
}

#[derive(Debug, Clone)]
struct Buddy {
    /// Full series from its smallest member up to the top class.
    series: Vec<u64>,
    /// `series` index of each list's class.
    first_listed: usize,
    fibonacci: bool,
}

impl Buddy {
    fn index_of(&self, size: u64) -> Option<usize> {
        self.series.binary_search(&size).ok()
    }

    fn children(&self, k: usize) -> (usize, usize) {
        if self.fibonacci {
            (k - 1, k.saturating_sub(2))
        } else {
            (k - 1, k - 1)
        }
    }

    fn class_index(&self, tag: &BuddyTag) -> usize {
        let mut k = tag.root_class as usize;
        for level in 0..tag.depth {
            let (l, r) = self.children(k);
            k = if (tag.path >> level) & 1 == 1 { r } else { l };
        }
        k
    }

    fn list_of(&self, k: usize) -> Option<usize> {
        k.checked_sub(self.first_listed)
    }
}

#[derive(Debug, Clone, Copy)]
struct FreeEntry {
    list: u16,
    size: u64,
    tag: Option<BuddyTag>,
}

/// Address index over free blocks, kept only when coalescing is enabled.
#[derive(Debug, Clone, Default)]
struct FreeIndex {
    by_start: HashMap<u64, FreeEntry>,
    by_end: HashMap<u64, u64>,
}

#[derive(Debug, Clone)]
pub struct Allocator {
    spec: AllocatorSpec,
    header: u64,
    layout: Layout,
    lists: Vec<FreeList>,
    buddy: Option<Buddy>,
    free_index: Option<FreeIndex>,
    stats: AllocStats,
}

fn binary_series(hi: u64) -> Vec<u64> {
    let mut s = vec![1u64];
    while *s.last().unwrap() < hi {
        s.push(s.last().unwrap() * 2);
    }
    s
}

fn fibonacci_series(hi: u64) -> Vec<u64> {
    let mut s = vec![1u64, 2];
    while *s.last().unwrap() < hi {
        let n = s.len();
        s.push(s[n - 1] + s[n - 2]);
    }
    if hi <= 1 {
        s.truncate(1);
    }
    s
}

/// Powers of two strictly inside `(lo, hi)` followed by `hi`.
pub fn geometric_bounds(range: SizeRange) -> Vec<u64> {
    let mut bounds = Vec::new();
    let mut p = 1u64;
    while p < range.hi {
        if p > range.lo {
            bounds.push(p);
        }
        p *= 2;
    }
    bounds.push(range.hi);
    bounds
}

impl Allocator {
    pub fn build(spec: &AllocatorSpec, index: u16, word_bytes: u64) -> Result<Self, AllocatorError> {
        let range = spec.range;
        if !range.is_valid() {
            return Err(AllocatorError::InvalidRange(range));
        }
        let klass = spec.klass;
        if klass == AllocatorClass::SimpleSegregatedStorage && (spec.split || spec.coalesce) {
            return Err(AllocatorError::SplitNotAllowed);
        }

        let mut buddy = None;
        let layout = match klass {
            AllocatorClass::ExactSegregatedFit | AllocatorClass::StrictSegregatedFit => {
                let mut series = spec.size_series.clone().unwrap_or_default();
                series.sort_unstable();
                series.dedup();
                series.retain(|&c| c > 0);
                if series.is_empty() {
                    return Err(AllocatorError::EmptySeries(klass));
                }
                let top = *series.last().unwrap();
                if top < range.hi {
                    return Err(AllocatorError::SeriesDoesNotCover { klass, top, hi: range.hi });
                }
                Layout::Classes(clip_classes(&series, range))
            }
            AllocatorClass::BuddySystemBinary | AllocatorClass::BuddySystemFibonacci => {
                let fibonacci = klass == AllocatorClass::BuddySystemFibonacci;
                let series = if fibonacci { fibonacci_series(range.hi) } else { binary_series(range.hi) };
                if series.len() > MAX_CLASSES {
                    return Err(AllocatorError::TooManyClasses(klass));
                }
                let classes = clip_classes(&series, range);
                if let Some(given) = &spec.size_series {
                    if *given != classes {
                        return Err(AllocatorError::SeriesMismatch { klass });
                    }
                }
                let first_listed = series.len() - classes.len();
                buddy = Some(Buddy { series, first_listed, fibonacci });
                Layout::Classes(classes)
            }
            AllocatorClass::SegregatedFit => Layout::Ranges(match &spec.sub_ranges {
                Some(b) => check_bounds(b, range)?,
                None => geometric_bounds(range),
            }),
            AllocatorClass::SegregatedFreeList | AllocatorClass::SimpleSegregatedStorage => {
                Layout::Ranges(match &spec.sub_ranges {
                    Some(b) => check_bounds(b, range)?,
                    None => vec![range.hi],
                })
            }
            AllocatorClass::VirtualMemory => Layout::Ranges(vec![range.hi]),
        };

        let config = spec.list_config();
        let mut lists = Vec::new();
        let mut lo = range.lo;
        match &layout {
            Layout::Classes(classes) => {
                if classes.len() > u16::MAX as usize {
                    return Err(AllocatorError::TooManyClasses(klass));
                }
                for (i, &c) in classes.iter().enumerate() {
                    let hi = c.min(range.hi);
                    let id = ListId { allocator: index, list: i as u16 };
                    lists.push(FreeList::new(config, SizeRange::new(lo, hi), Some(c), id));
                    lo = hi;
                }
            }
            Layout::Ranges(bounds) => {
                if bounds.len() > u16::MAX as usize {
                    return Err(AllocatorError::TooManyClasses(klass));
                }
                for (i, &hi) in bounds.iter().enumerate() {
                    let id = ListId { allocator: index, list: i as u16 };
                    lists.push(FreeList::new(config, SizeRange::new(lo, hi), None, id));
                    lo = hi;
                }
            }
        }

        let header = if klass.is_buddy() { 0 } else { config.data_structure.header_words() * word_bytes };
        Ok(Self {
            spec: spec.clone(),
            header,
            layout,
            lists,
            buddy,
            free_index: spec.coalesce.then(FreeIndex::default),
            stats: AllocStats::default(),
        })
    }

    pub fn spec(&self) -> &AllocatorSpec {
        &self.spec
    }

    pub fn range(&self) -> SizeRange {
        self.spec.range
    }

    pub fn header(&self) -> u64 {
        self.header
    }

    pub fn lists(&self) -> &[FreeList] {
        &self.lists
    }

    pub fn stats(&self) -> AllocStats {
        self.stats
    }

    pub fn free_bytes(&self) -> u64 {
        self.lists.iter().map(FreeList::free_bytes).sum()
    }

    pub fn uses_farthest(&self) -> bool {
        self.spec.mechanism == Mechanism::Farthest
    }

    /// Class sizes for class layouts.
    pub fn classes(&self) -> Option<&[u64]> {
        match &self.layout {
            Layout::Classes(c) => Some(c),
            Layout::Ranges(_) => None,
        }
    }

    /// Smallest class at least `request`; range layouts serve the request
    /// size unchanged.
    pub fn class_of(&self, request: u64) -> Result<u64, AllocatorError> {
        let range = self.spec.range;
        if !range.contains(request) {
            return Err(AllocatorError::OutOfRange { request, range });
        }
        Ok(match &self.layout {
            Layout::Classes(classes) => classes[classes.partition_point(|&c| c < request)],
            Layout::Ranges(_) => request,
        })
    }

    /// List that serves `request` (which must lie in range).
    pub fn list_for_request(&self, request: u64) -> usize {
        match &self.layout {
            Layout::Classes(classes) => classes.partition_point(|&c| c < request),
            Layout::Ranges(bounds) => bounds.partition_point(|&b| b < request),
        }
    }

    /// List that can hold a free block with this payload.
    fn covering_list(&self, payload: u64) -> Option<usize> {
        match &self.layout {
            Layout::Classes(classes) => {
                if payload > *classes.last().unwrap() {
                    return None;
                }
                classes.partition_point(|&c| c <= payload).checked_sub(1)
            }
            Layout::Ranges(_) => {
                let range = self.spec.range;
                range.contains(payload).then(|| self.list_for_request(payload))
            }
        }
    }

    fn insert(&mut self, li: usize, block: Block, cost: &mut CostDelta) {
        *cost += self.lists[li].insert(block).expect("covering list accepts block");
        if let Some(idx) = &mut self.free_index {
            idx.by_start
                .insert(block.position, FreeEntry { list: li as u16, size: block.size, tag: block.buddy });
            idx.by_end.insert(block.end(), block.position);
        }
    }

    fn forget(&mut self, block: &Block) {
        if let Some(idx) = &mut self.free_index {
            idx.by_start.remove(&block.position);
            idx.by_end.remove(&block.end());
        }
    }

    fn extract(&mut self, li: usize, mechanism: Mechanism, needed: u64, hottest: Option<u64>, cost: &mut CostDelta) -> Option<Block> {
        let Extracted { block, cost: c, fallback } = self.lists[li].extract_as(mechanism, needed, hottest);
        *cost += c;
        if fallback {
            self.stats.farthest_fallbacks += 1;
        }
        if let Some(b) = &block {
            self.forget(b);
        }
        block
    }

    fn remove_free_at(&mut self, li: usize, position: u64, cost: &mut CostDelta) -> Block {
        let (block, c) = self.lists[li].remove_at(position).expect("indexed free block present");
        *cost += c;
        self.forget(&block);
        block
    }

    /// Serves `request` from the free lists, splitting larger blocks when
    /// allowed. `now` is the current event index.
    pub fn malloc(
        &mut self,
        request: u64,
        hottest: Option<u64>,
        cost: &mut CostDelta,
    ) -> Result<MallocOutcome, AllocatorError> {
        let class = self.class_of(request)?;
        if self.spec.klass == AllocatorClass::VirtualMemory {
            return Ok(MallocOutcome::NeedArena { class });
        }
        let li = self.list_for_request(request);
        let owner = self.lists[li].id();
        let mechanism = self.spec.mechanism;

        if let Some(mut block) = self.extract(li, mechanism, class, hottest, cost) {
            if self.spec.split && self.buddy.is_none() && block.payload() > class {
                block = self.split_plain(block, class, cost);
            }
            self.stats.live_bytes += block.size;
            block.owner = owner;
            return Ok(MallocOutcome::Found(block));
        }

        if self.spec.split {
            // exactness means nothing when borrowing a bigger block
            let borrow = if mechanism == Mechanism::Exact { Mechanism::First } else { mechanism };
            for lj in li + 1..self.lists.len() {
                if self.lists[lj].is_empty() {
                    continue;
                }
                if let Some(big) = self.extract(lj, borrow, class, hottest, cost) {
                    let mut block = if self.buddy.is_some() {
                        self.split_buddy(big, class, cost)
                    } else {
                        self.split_plain(big, class, cost)
                    };
                    self.stats.live_bytes += block.size;
                    block.owner = owner;
                    return Ok(MallocOutcome::Found(block));
                }
            }
        }
        Ok(MallocOutcome::NeedArena { class })
    }

    /// Wraps a fresh arena draw of `class` payload bytes at `position`.
    pub fn adopt(&mut self, position: u64, class: u64, request: u64, now: u64) -> Block {
        let mut block = Block::new(position, class + self.header, self.header, now);
        if let Some(b) = &self.buddy {
            let k = b.index_of(class).expect("buddy class in series");
            block.buddy = Some(BuddyTag::root(k as u8));
        }
        block.owner = self.lists[self.list_for_request(request)].id();
        self.stats.owned_bytes += block.size;
        self.stats.live_bytes += block.size;
        block
    }

    /// Cuts `block` to `class` payload, returning the remainder to its list.
    /// A remainder that no list can hold stays attached to the block.
    fn split_plain(&mut self, mut block: Block, class: u64, cost: &mut CostDelta) -> Block {
        let keep = class + self.header;
        let rest = block.size - keep;
        if rest <= self.header {
            return block;
        }
        let Some(li) = self.covering_list(rest - self.header) else {
            return block;
        };
        let remainder = Block::new(block.position + keep, rest, self.header, block.created);
        block.size = keep;
        self.insert(li, remainder, cost);
        self.stats.splits += 1;
        *cost += SPLIT_COST;
        block
    }

    fn split_buddy(&mut self, mut block: Block, class: u64, cost: &mut CostDelta) -> Block {
        let buddy = self.buddy.clone().expect("buddy allocator");
        let target = buddy.index_of(class).expect("class in series");
        let mut k = buddy.index_of(block.size).expect("buddy block size in series");
        let mut tag = block.buddy.expect("buddy block carries tag");
        while k > target {
            let (l, r) = buddy.children(k);
            let left_size = buddy.series[l];
            let right_size = buddy.series[r];
            // continue into the smaller half whenever it still fits
            let go_right = r < l && right_size >= class;
            let left = Block { size: left_size, buddy: Some(tag.child(false)), ..block };
            let right = Block {
                position: block.position + left_size,
                size: right_size,
                buddy: Some(tag.child(true)),
                ..block
            };
            let (keep, spare, kk, sk) = if go_right { (right, left, r, l) } else { (left, right, l, r) };
            match buddy.list_of(sk) {
                Some(li) => self.insert(li, spare, cost),
                None => self.stats.slack_bytes += spare.size,
            }
            self.stats.splits += 1;
            *cost += SPLIT_COST;
            block = keep;
            tag = keep.buddy.unwrap();
            k = kk;
        }
        block
    }

    /// Returns a block to the free lists, coalescing first when enabled.
    pub fn free(&mut self, mut block: Block, cost: &mut CostDelta) -> Result<(), AllocatorError> {
        let not_repr = AllocatorError::NotRepresentable { position: block.position, size: block.size };
        self.stats.live_bytes = self.stats.live_bytes.checked_sub(block.size).ok_or(not_repr.clone())?;
        block.buddy = block.buddy.filter(|_| self.buddy.is_some());

        if self.spec.klass == AllocatorClass::VirtualMemory {
            self.insert(0, block, cost);
            return Ok(());
        }

        let li = if let Some(buddy) = self.buddy.clone() {
            let tag = block.buddy.ok_or(not_repr.clone())?;
            if buddy.series.get(buddy.class_index(&tag)) != Some(&block.size) {
                return Err(not_repr);
            }
            if self.spec.coalesce {
                block = self.coalesce_buddy(&buddy, block, cost);
            }
            let k = buddy.class_index(block.buddy.as_ref().unwrap());
            buddy.list_of(k).ok_or(not_repr)?
        } else {
            if block.size < self.header {
                return Err(not_repr);
            }
            let li = self.covering_list(block.payload()).ok_or(not_repr)?;
            if self.spec.coalesce {
                block = self.coalesce_plain(block, cost);
                self.covering_list(block.payload()).expect("merge limited to covered sizes")
            } else {
                li
            }
        };
        self.insert(li, block, cost);
        Ok(())
    }

    fn coalesce_buddy(&mut self, buddy: &Buddy, mut block: Block, cost: &mut CostDelta) -> Block {
        loop {
            let tag = block.buddy.unwrap();
            if tag.depth == 0 {
                return block;
            }
            let parent = tag.parent();
            let pk = buddy.class_index(&parent);
            let parent_size = buddy.series[pk];
            let (left_size, parent_pos) = if tag.is_right() {
                let l = parent_size - block.size;
                (l, block.position - l)
            } else {
                (block.size, block.position)
            };
            let sib_pos = if tag.is_right() { parent_pos } else { parent_pos + left_size };
            let sib_size = parent_size - block.size;
            let idx = self.free_index.as_ref().unwrap();
            let Some(entry) = idx.by_start.get(&sib_pos).copied() else {
                return block;
            };
            if entry.size != sib_size || entry.tag != Some(tag.sibling()) {
                return block;
            }
            self.remove_free_at(entry.list as usize, sib_pos, cost);
            block = Block { position: parent_pos, size: parent_size, buddy: Some(parent), ..block };
            self.stats.coalesces += 1;
            *cost += MERGE_COST;
        }
    }

    fn coalesce_plain(&mut self, mut block: Block, cost: &mut CostDelta) -> Block {
        loop {
            let idx = self.free_index.as_ref().unwrap();
            let right = idx.by_start.get(&block.end()).copied().map(|e| (block.end(), e));
            let left = idx
                .by_end
                .get(&block.position)
                .and_then(|p| idx.by_start.get(p).map(|e| (*p, *e)));
            let mut merged = false;
            for (pos, entry) in [right, left].into_iter().flatten() {
                let payload = block.size + entry.size - self.header;
                if self.covering_list(payload).is_none() {
                    continue;
                }
                let n = self.remove_free_at(entry.list as usize, pos, cost);
                block.position = block.position.min(n.position);
                block.size += n.size;
                block.created = block.created.min(n.created);
                self.stats.coalesces += 1;
                *cost += MERGE_COST;
                merged = true;
                break;
            }
            if !merged {
                return block;
            }
        }
    }
}

/// Classes above `lo`, up to and including the first class reaching `hi`.
fn clip_classes(series: &[u64], range: SizeRange) -> Vec<u64> {
    let mut out = Vec::new();
    for &c in series {
        if c <= range.lo {
            continue;
        }
        out.push(c);
        if c >= range.hi {
            break;
        }
    }
    out
}

fn check_bounds(bounds: &[u64], range: SizeRange) -> Result<Vec<u64>, AllocatorError> {
    let fail = |reason: &str| Err(AllocatorError::BadSubRanges { range, reason: reason.to_owned() });
    if bounds.is_empty() {
        return fail("empty");
    }
    if *bounds.last().unwrap() != range.hi {
        return fail("last bound must equal the range end");
    }
    let mut prev = range.lo;
    for &b in bounds {
        if b <= prev {
            return fail("bounds must be strictly increasing above the range start");
        }
        prev = b;
    }
    Ok(bounds.to_vec())
}
