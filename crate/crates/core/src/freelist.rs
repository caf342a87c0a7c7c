//! A single free list: container, fit mechanism, ordering policy and the
//! cost accounting charged for every operation.
//!
//! Cost table (time units / memory accesses):
//!
//! | operation                     | SLL   | DLL   | BTREE |
//! |-------------------------------|-------|-------|-------|
//! | node visit                    | 1 / 2 | 1 / 2 | 1 / 2 |
//! | insert (link)                 | 1 / 2 | 1 / 4 | 1 / 3 |
//! | unlink a located node         | 1 / 2 | 1 / 4 | 1 / 3 |
//!
//! Linked lists insert at the head (LIFO) or the tail (FIFO) in constant
//! time. The tree is an unbalanced binary search tree keyed by payload size,
//! with equal sizes ordered oldest-first (FIFO) or newest-first (LIFO); its
//! insert and extract pay one visit per node on the descent path.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataStructure {
    #[serde(rename = "SLL")]
    Sll,
    #[serde(rename = "DLL")]
    Dll,
    #[serde(rename = "BTREE")]
    Btree,
}

impl DataStructure {
    pub const ALL: [DataStructure; 3] = [DataStructure::Sll, DataStructure::Dll, DataStructure::Btree];

    /// Bookkeeping words carried by a block on this structure.
    pub fn header_words(self) -> u64 {
        match self {
            DataStructure::Sll => 1,
            DataStructure::Dll => 2,
            DataStructure::Btree => 3,
        }
    }

    fn link_cost(self) -> CostDelta {
        match self {
            DataStructure::Sll => CostDelta::new(1, 2),
            DataStructure::Dll => CostDelta::new(1, 4),
            DataStructure::Btree => CostDelta::new(1, 3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "FIRST")]
    First,
    #[serde(rename = "BEST")]
    Best,
    #[serde(rename = "EXACT")]
    Exact,
    #[serde(rename = "FARTHEST")]
    Farthest,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] =
        [Mechanism::First, Mechanism::Best, Mechanism::Exact, Mechanism::Farthest];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "FIFO")]
    Fifo,
    #[serde(rename = "LIFO")]
    Lifo,
}

impl Policy {
    pub const ALL: [Policy; 2] = [Policy::Fifo, Policy::Lifo];
}

macro_rules! display_as_serde {
    ($($t:ty => { $($v:path => $s:expr),* $(,)? })*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),* })
            }
        }
    )*};
}

display_as_serde! {
    DataStructure => { DataStructure::Sll => "SLL", DataStructure::Dll => "DLL", DataStructure::Btree => "BTREE" }
    Mechanism => {
        Mechanism::First => "FIRST",
        Mechanism::Best => "BEST",
        Mechanism::Exact => "EXACT",
        Mechanism::Farthest => "FARTHEST",
    }
    Policy => { Policy::Fifo => "FIFO", Policy::Lifo => "LIFO" }
}

/// Half-open size interval `(lo, hi]` in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u64; 2]", into = "[u64; 2]")]
pub struct SizeRange {
    pub lo: u64,
    pub hi: u64,
}

impl SizeRange {
    pub fn new(lo: u64, hi: u64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, size: u64) -> bool {
        size > self.lo && size <= self.hi
    }

    pub fn is_valid(&self) -> bool {
        self.lo < self.hi
    }
}

impl From<[u64; 2]> for SizeRange {
    fn from([lo, hi]: [u64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<SizeRange> for [u64; 2] {
    fn from(r: SizeRange) -> Self {
        [r.lo, r.hi]
    }
}

impl fmt::Display for SizeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}]", self.lo, self.hi)
    }
}

/// Abstract cost of an operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CostDelta {
    pub time_units: u64,
    pub mem_accesses: u64,
}

impl CostDelta {
    pub const ZERO: CostDelta = CostDelta { time_units: 0, mem_accesses: 0 };

    pub const fn new(time_units: u64, mem_accesses: u64) -> Self {
        Self { time_units, mem_accesses }
    }

    /// One node visited during a traversal.
    pub const fn visits(n: u64) -> Self {
        Self { time_units: n, mem_accesses: 2 * n }
    }
}

impl Add for CostDelta {
    type Output = CostDelta;
    fn add(self, rhs: CostDelta) -> CostDelta {
        CostDelta::new(self.time_units + rhs.time_units, self.mem_accesses + rhs.mem_accesses)
    }
}

impl AddAssign for CostDelta {
    fn add_assign(&mut self, rhs: CostDelta) {
        self.time_units += rhs.time_units;
        self.mem_accesses += rhs.mem_accesses;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ListId {
    pub allocator: u16,
    pub list: u16,
}

/// Position of a block inside the buddy tree rooted at an arena draw.
///
/// `path` holds one bit per split below the root, most recent split in bit
/// `depth - 1`; a set bit marks the right (higher address) child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BuddyTag {
    pub root_class: u8,
    pub depth: u8,
    pub path: u64,
}

impl BuddyTag {
    pub fn root(root_class: u8) -> Self {
        Self { root_class, depth: 0, path: 0 }
    }

    pub fn is_right(&self) -> bool {
        self.depth > 0 && (self.path >> (self.depth - 1)) & 1 == 1
    }

    pub fn child(&self, right: bool) -> Self {
        assert!(self.depth < 64, "buddy tree deeper than 64 levels");
        Self {
            root_class: self.root_class,
            depth: self.depth + 1,
            path: self.path | ((right as u64) << self.depth),
        }
    }

    pub fn parent(&self) -> Self {
        assert!(self.depth > 0);
        let depth = self.depth - 1;
        Self { root_class: self.root_class, depth, path: self.path & !(1u64 << depth) }
    }

    pub fn sibling(&self) -> Self {
        assert!(self.depth > 0);
        Self { path: self.path ^ (1u64 << (self.depth - 1)), ..*self }
    }
}

/// A simulated block. `size` includes `header`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub position: u64,
    pub size: u64,
    pub header: u64,
    pub created: u64,
    pub owner: ListId,
    pub buddy: Option<BuddyTag>,
}

impl Block {
    pub fn new(position: u64, size: u64, header: u64, created: u64) -> Self {
        assert!(size >= header);
        Self { position, size, header, created, owner: ListId::default(), buddy: None }
    }

    /// Usable bytes.
    pub fn payload(&self) -> u64 {
        self.size - self.header
    }

    pub fn end(&self) -> u64 {
        self.position + self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FreeListConfig {
    pub data_structure: DataStructure,
    pub mechanism: Mechanism,
    pub policy: Policy,
}

impl FreeListConfig {
    pub fn new(data_structure: DataStructure, mechanism: Mechanism, policy: Policy) -> Self {
        Self { data_structure, mechanism, policy }
    }
}

impl fmt::Display for FreeListConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}({})", self.data_structure, self.mechanism, self.policy)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FreeListError {
    #[error("block payload {payload} does not belong to list {range}")]
    OutOfRange { payload: u64, range: SizeRange },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extracted {
    pub block: Option<Block>,
    pub cost: CostDelta,
    /// FARTHEST was requested without a hottest position and ran as FIRST.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct FreeList {
    config: FreeListConfig,
    range: SizeRange,
    class: Option<u64>,
    id: ListId,
    free_bytes: u64,
    container: Container,
}

#[derive(Debug, Clone)]
enum Container {
    Linked(VecDeque<Block>),
    Tree(Tree),
}

impl FreeList {
    /// `class` is `Some` for a single-size list: it then accepts blocks whose
    /// payload is at least the class size, and serves requests in `range`.
    pub fn new(config: FreeListConfig, range: SizeRange, class: Option<u64>, id: ListId) -> Self {
        let container = match config.data_structure {
            DataStructure::Btree => Container::Tree(Tree::new(config.policy)),
            _ => Container::Linked(VecDeque::new()),
        };
        Self { config, range, class, id, free_bytes: 0, container }
    }

    pub fn config(&self) -> FreeListConfig {
        self.config
    }

    pub fn range(&self) -> SizeRange {
        self.range
    }

    pub fn class(&self) -> Option<u64> {
        self.class
    }

    pub fn id(&self) -> ListId {
        self.id
    }

    pub fn len(&self) -> usize {
        match &self.container {
            Container::Linked(l) => l.len(),
            Container::Tree(t) => t.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of block sizes (headers included) held by the list.
    pub fn free_bytes(&self) -> u64 {
        self.free_bytes
    }

    pub fn accepts(&self, payload: u64) -> bool {
        match self.class {
            Some(c) => payload >= c,
            None => self.range.contains(payload),
        }
    }

    /// Blocks in traversal order (head first; in-order for trees).
    pub fn blocks(&self) -> Vec<Block> {
        match &self.container {
            Container::Linked(l) => l.iter().copied().collect(),
            Container::Tree(t) => t.blocks(),
        }
    }

    pub fn insert(&mut self, mut block: Block) -> Result<CostDelta, FreeListError> {
        if !self.accepts(block.payload()) {
            return Err(FreeListError::OutOfRange { payload: block.payload(), range: self.range });
        }
        block.owner = self.id;
        self.free_bytes += block.size;
        let link = self.config.data_structure.link_cost();
        Ok(match &mut self.container {
            Container::Linked(l) => {
                match self.config.policy {
                    Policy::Fifo => l.push_back(block),
                    Policy::Lifo => l.push_front(block),
                }
                link
            }
            Container::Tree(t) => CostDelta::visits(t.insert(block)) + link,
        })
    }

    /// Takes a block able to hold `needed` payload bytes. `hottest` is only
    /// consulted by FARTHEST.
    pub fn extract(&mut self, needed: u64, hottest: Option<u64>) -> Extracted {
        self.extract_as(self.config.mechanism, needed, hottest)
    }

    /// [`FreeList::extract`] with the list's mechanism overridden.
    pub fn extract_as(&mut self, mut mechanism: Mechanism, needed: u64, hottest: Option<u64>) -> Extracted {
        let mut fallback = false;
        if mechanism == Mechanism::Farthest && hottest.is_none() {
            mechanism = Mechanism::First;
            fallback = true;
        }
        let unlink = self.config.data_structure.link_cost();
        let (block, visited) = match &mut self.container {
            Container::Linked(list) => {
                let (found, visited) = scan_list(list, mechanism, needed, hottest);
                (found.map(|i| list.remove(i).unwrap()), visited)
            }
            Container::Tree(tree) => {
                let (found, visited) = tree.search(mechanism, needed, hottest);
                (found.map(|(node, pos)| tree.take(node, pos)), visited)
            }
        };
        let mut cost = CostDelta::visits(visited);
        if let Some(b) = &block {
            cost += unlink;
            self.free_bytes -= b.size;
        }
        Extracted { block, cost, fallback }
    }

    /// Removes the block starting at `position`, as coalescing does once it
    /// has located a free neighbour. A singly linked list has to walk to the
    /// node to find its predecessor; the other structures reach it directly
    /// or by descent.
    pub fn remove_at(&mut self, position: u64) -> Option<(Block, CostDelta)> {
        let ds = self.config.data_structure;
        let (block, cost) = match &mut self.container {
            Container::Linked(list) => {
                let idx = list.iter().position(|b| b.position == position)?;
                let block = list.remove(idx).unwrap();
                let walk = match ds {
                    DataStructure::Sll => CostDelta::visits(idx as u64 + 1),
                    _ => CostDelta::ZERO,
                };
                (block, walk + ds.link_cost())
            }
            Container::Tree(tree) => {
                let idx = *tree.by_position.get(&position)?;
                let depth = tree.depth(idx);
                (tree.take(idx, position), CostDelta::visits(depth) + ds.link_cost())
            }
        };
        self.free_bytes -= block.size;
        Some((block, cost))
    }
}

/// Returns the chosen index and the number of nodes visited.
fn scan_list(
    list: &VecDeque<Block>,
    mechanism: Mechanism,
    needed: u64,
    hottest: Option<u64>,
) -> (Option<usize>, u64) {
    match mechanism {
        Mechanism::First => match list.iter().position(|b| b.payload() >= needed) {
            Some(i) => (Some(i), i as u64 + 1),
            None => (None, list.len() as u64),
        },
        Mechanism::Exact => match list.iter().position(|b| b.payload() == needed) {
            Some(i) => (Some(i), i as u64 + 1),
            None => (None, list.len() as u64),
        },
        Mechanism::Best => {
            let mut best: Option<(usize, u64)> = None;
            for (i, b) in list.iter().enumerate() {
                let p = b.payload();
                if p >= needed && best.is_none_or(|(_, bp)| p < bp) {
                    best = Some((i, p));
                }
            }
            (best.map(|(i, _)| i), list.len() as u64)
        }
        Mechanism::Farthest => {
            let hot = hottest.expect("FARTHEST without hottest position");
            let mut best: Option<(usize, u64)> = None;
            for (i, b) in list.iter().enumerate() {
                if b.payload() >= needed {
                    let d = b.position.abs_diff(hot);
                    if best.is_none_or(|(_, bd)| d > bd) {
                        best = Some((i, d));
                    }
                }
            }
            (best.map(|(i, _)| i), list.len() as u64)
        }
    }
}

const NIL: usize = usize::MAX;

#[derive(Debug, Clone)]
struct Node {
    payload: u64,
    /// Equal-sized blocks in policy order, next to leave at the front.
    bucket: VecDeque<Block>,
    left: usize,
    right: usize,
    parent: usize,
}

/// Unbalanced binary search tree keyed by payload size over an index
/// arena. Blocks of equal size share a node.
#[derive(Debug, Clone)]
struct Tree {
    policy: Policy,
    nodes: Vec<Node>,
    vacant: Vec<usize>,
    root: usize,
    len: usize,
    by_position: HashMap<u64, usize>,
}

impl Tree {
    fn new(policy: Policy) -> Self {
        Self { policy, nodes: Vec::new(), vacant: Vec::new(), root: NIL, len: 0, by_position: HashMap::new() }
    }

    /// Returns the number of nodes compared on the way down.
    fn insert(&mut self, block: Block) -> u64 {
        let key = block.payload();
        let mut visited = 0;
        let mut parent = NIL;
        let mut cur = self.root;
        let mut go_left = false;
        while cur != NIL {
            visited += 1;
            let node = &mut self.nodes[cur];
            if key == node.payload {
                match self.policy {
                    Policy::Fifo => node.bucket.push_back(block),
                    Policy::Lifo => node.bucket.push_front(block),
                }
                self.by_position.insert(block.position, cur);
                self.len += 1;
                return visited;
            }
            parent = cur;
            go_left = key < node.payload;
            cur = if go_left { node.left } else { node.right };
        }
        let node = Node { payload: key, bucket: VecDeque::from([block]), left: NIL, right: NIL, parent };
        let idx = match self.vacant.pop() {
            Some(i) => {
                self.nodes[i] = node;
                i
            }
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        };
        if parent == NIL {
            self.root = idx;
        } else if go_left {
            self.nodes[parent].left = idx;
        } else {
            self.nodes[parent].right = idx;
        }
        self.by_position.insert(block.position, idx);
        self.len += 1;
        visited
    }

    fn depth(&self, mut idx: usize) -> u64 {
        let mut d = 0;
        while idx != NIL {
            d += 1;
            idx = self.nodes[idx].parent;
        }
        d
    }

    fn in_order(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = Vec::new();
        let mut cur = self.root;
        while cur != NIL || !stack.is_empty() {
            while cur != NIL {
                stack.push(cur);
                cur = self.nodes[cur].left;
            }
            let n = stack.pop().unwrap();
            out.push(n);
            cur = self.nodes[n].right;
        }
        out
    }

    fn blocks(&self) -> Vec<Block> {
        self.in_order().into_iter().flat_map(|i| self.nodes[i].bucket.iter().copied()).collect()
    }

    /// Smallest node whose payload is at least `needed`.
    fn lower_bound(&self, needed: u64) -> (Option<usize>, u64) {
        let mut visited = 0;
        let mut cand = None;
        let mut cur = self.root;
        while cur != NIL {
            visited += 1;
            let node = &self.nodes[cur];
            if node.payload == needed {
                return (Some(cur), visited);
            }
            if node.payload > needed {
                cand = Some(cur);
                cur = node.left;
            } else {
                cur = node.right;
            }
        }
        (cand, visited)
    }

    /// Chosen node and block position, and the number of nodes visited.
    fn search(&self, mechanism: Mechanism, needed: u64, hottest: Option<u64>) -> (Option<(usize, u64)>, u64) {
        let front = |i: usize| (i, self.nodes[i].bucket[0].position);
        match mechanism {
            // in a size-ordered tree the first fitting node in traversal
            // order is also the best fit
            Mechanism::First | Mechanism::Best => {
                let (cand, visited) = self.lower_bound(needed);
                (cand.map(front), visited)
            }
            Mechanism::Exact => {
                let (cand, visited) = self.lower_bound(needed);
                (cand.filter(|&i| self.nodes[i].payload == needed).map(front), visited)
            }
            Mechanism::Farthest => {
                let hot = hottest.expect("FARTHEST without hottest position");
                let mut best: Option<((usize, u64), u64)> = None;
                for i in self.in_order() {
                    if self.nodes[i].payload < needed {
                        continue;
                    }
                    for b in &self.nodes[i].bucket {
                        let d = b.position.abs_diff(hot);
                        if best.is_none_or(|(_, bd)| d > bd) {
                            best = Some(((i, b.position), d));
                        }
                    }
                }
                (best.map(|(c, _)| c), self.len as u64)
            }
        }
    }

    fn replace_child(&mut self, parent: usize, old: usize, new: usize) {
        if parent == NIL {
            self.root = new;
        } else if self.nodes[parent].left == old {
            self.nodes[parent].left = new;
        } else {
            self.nodes[parent].right = new;
        }
        if new != NIL {
            self.nodes[new].parent = parent;
        }
    }

    /// Takes the block at `position` out of node `idx`, dropping the node
    /// once its bucket empties.
    fn take(&mut self, idx: usize, position: u64) -> Block {
        let bucket = &mut self.nodes[idx].bucket;
        let at = bucket.iter().position(|b| b.position == position).expect("block in its node");
        let block = bucket.remove(at).unwrap();
        self.by_position.remove(&position);
        self.len -= 1;
        if self.nodes[idx].bucket.is_empty() {
            self.unlink_node(idx);
        }
        block
    }

    fn unlink_node(&mut self, idx: usize) {
        let Node { left, right, parent, .. } = self.nodes[idx];
        if left == NIL {
            self.replace_child(parent, idx, right);
        } else if right == NIL {
            self.replace_child(parent, idx, left);
        } else {
            // splice in the in-order successor
            let mut succ = right;
            while self.nodes[succ].left != NIL {
                succ = self.nodes[succ].left;
            }
            if succ != right {
                let succ_right = self.nodes[succ].right;
                let succ_parent = self.nodes[succ].parent;
                self.replace_child(succ_parent, succ, succ_right);
                self.nodes[succ].right = right;
                self.nodes[right].parent = succ;
            }
            self.replace_child(parent, idx, succ);
            self.nodes[succ].left = left;
            self.nodes[left].parent = succ;
        }
        self.vacant.push(idx);
    }
}
