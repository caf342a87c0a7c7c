//! Allocation traces: parsing, emission, statistics and synthetic generation.
//!
//! The on-disk format is line oriented UTF-8:
//!
//! ```text
//! # comment
//! M <id> <size>
//! F <id>
//! ```
//!
//! `<id>` is any whitespace-free token (usually the hex address the capture
//! shim observed) and is only ever used as a label. `<size>` is a decimal
//! byte count of at least one.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: zero-size allocation")]
    ZeroSize { line: usize },
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Interned object label. Indexes into [`Trace::labels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(pub u32);

impl ObjectId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Malloc { id: ObjectId, size: u64 },
    Free { id: ObjectId },
}

impl TraceEvent {
    pub fn id(&self) -> ObjectId {
        match *self {
            TraceEvent::Malloc { id, .. } | TraceEvent::Free { id } => id,
        }
    }
}

/// An ordered malloc/free stream. Event order is replay semantics and is
/// never altered after construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
    labels: Vec<String>,
    lookup: HashMap<String, ObjectId>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of distinct labels seen, which bounds every [`ObjectId`].
    pub fn id_count(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, id: ObjectId) -> &str {
        &self.labels[id.index()]
    }

    fn intern(&mut self, label: &str) -> ObjectId {
        if let Some(&id) = self.lookup.get(label) {
            return id;
        }
        let id = ObjectId(self.labels.len() as u32);
        self.labels.push(label.to_owned());
        self.lookup.insert(label.to_owned(), id);
        id
    }

    /// Appends a malloc. Panics on a zero size or an empty label.
    pub fn push_malloc(&mut self, label: &str, size: u64) {
        assert!(size >= 1, "malloc size must be at least one byte");
        assert!(!label.is_empty() && !label.contains(char::is_whitespace));
        let id = self.intern(label);
        self.events.push(TraceEvent::Malloc { id, size });
    }

    pub fn push_free(&mut self, label: &str) {
        assert!(!label.is_empty() && !label.contains(char::is_whitespace));
        let id = self.intern(label);
        self.events.push(TraceEvent::Free { id });
    }

    /// Largest requested size, or 0 for a trace without mallocs.
    pub fn max_size(&self) -> u64 {
        self.events
            .iter()
            .filter_map(|e| match *e {
                TraceEvent::Malloc { size, .. } => Some(size),
                TraceEvent::Free { .. } => None,
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Drop `M <id> 0` lines with a warning instead of failing.
    pub permissive: bool,
}

pub fn parse_trace<R: BufRead>(source: R) -> Result<Trace, TraceError> {
    parse_trace_with(source, ParseOptions::default())
}

pub fn parse_trace_str(source: &str) -> Result<Trace, TraceError> {
    parse_trace(source.as_bytes())
}

pub fn parse_trace_with<R: BufRead>(source: R, opts: ParseOptions) -> Result<Trace, TraceError> {
    let mut trace = Trace::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let syntax = |msg: &str| TraceError::Syntax { line: lineno, msg: msg.to_owned() };
        let mut tokens = text.split_whitespace();
        let op = tokens.next().ok_or_else(|| syntax("empty event"))?;
        match op {
            "M" => {
                let id = tokens.next().ok_or_else(|| syntax("missing object id"))?;
                let size = tokens.next().ok_or_else(|| syntax("missing size"))?;
                if tokens.next().is_some() {
                    return Err(syntax("trailing tokens after malloc"));
                }
                let size: u64 = size
                    .parse()
                    .map_err(|_| syntax(&format!("non-numeric size `{size}`")))?;
                if size == 0 {
                    if opts.permissive {
                        log::warn!("line {lineno}: dropping zero-size allocation of {id}");
                        continue;
                    }
                    return Err(TraceError::ZeroSize { line: lineno });
                }
                trace.push_malloc(id, size);
            }
            "F" => {
                let id = tokens.next().ok_or_else(|| syntax("missing object id"))?;
                if tokens.next().is_some() {
                    return Err(syntax("trailing tokens after free"));
                }
                trace.push_free(id);
            }
            other => return Err(syntax(&format!("unknown opcode `{other}`"))),
        }
    }
    Ok(trace)
}

pub fn emit_trace<W: Write>(trace: &Trace, mut out: W) -> io::Result<()> {
    for ev in trace.events() {
        match *ev {
            TraceEvent::Malloc { id, size } => writeln!(out, "M {} {}", trace.label(id), size)?,
            TraceEvent::Free { id } => writeln!(out, "F {}", trace.label(id))?,
        }
    }
    out.flush()
}

pub fn emit_trace_string(trace: &Trace) -> String {
    let mut buf = Vec::new();
    emit_trace(trace, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("trace labels are UTF-8")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceStats {
    pub objects: u64,
    pub total_bytes: u64,
    pub max_in_use_bytes: u64,
    pub avg_size_in_b: f64,
    pub memory_ops: u64,
    pub free_events: u64,
    pub distinct_sizes: BTreeSet<u64>,
    pub max_size_in_b: u64,
    pub invalid_mallocs: u64,
    pub invalid_frees: u64,
}

impl fmt::Display for TraceStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "objects          {}", self.objects)?;
        writeln!(f, "total bytes      {}", self.total_bytes)?;
        writeln!(f, "max in use bytes {}", self.max_in_use_bytes)?;
        writeln!(f, "average size     {:.2}", self.avg_size_in_b)?;
        writeln!(f, "memory ops       {}", self.memory_ops)?;
        writeln!(f, "distinct sizes   {}", self.distinct_sizes.len())?;
        writeln!(f, "max size         {}", self.max_size_in_b)?;
        writeln!(f, "invalid mallocs  {}", self.invalid_mallocs)?;
        write!(f, "invalid frees    {}", self.invalid_frees)
    }
}

/// One pass over the trace. Duplicate live ids stack up and a free always
/// matches the newest live malloc under that id.
pub fn trace_stats(trace: &Trace) -> TraceStats {
    let mut live: Vec<Vec<u64>> = vec![Vec::new(); trace.id_count()];
    let mut stats = TraceStats {
        objects: 0,
        total_bytes: 0,
        max_in_use_bytes: 0,
        avg_size_in_b: 0.0,
        memory_ops: trace.len() as u64,
        free_events: 0,
        distinct_sizes: BTreeSet::new(),
        max_size_in_b: 0,
        invalid_mallocs: 0,
        invalid_frees: 0,
    };
    let mut in_use = 0u64;
    for ev in trace.events() {
        match *ev {
            TraceEvent::Malloc { id, size } => {
                stats.objects += 1;
                stats.total_bytes += size;
                stats.distinct_sizes.insert(size);
                stats.max_size_in_b = stats.max_size_in_b.max(size);
                live[id.index()].push(size);
                in_use += size;
                stats.max_in_use_bytes = stats.max_in_use_bytes.max(in_use);
            }
            TraceEvent::Free { id } => {
                stats.free_events += 1;
                match live[id.index()].pop() {
                    Some(size) => in_use -= size,
                    None => stats.invalid_frees += 1,
                }
            }
        }
    }
    stats.invalid_mallocs = live.iter().map(|s| s.len() as u64).sum();
    if stats.objects > 0 {
        stats.avg_size_in_b = stats.total_bytes as f64 / stats.objects as f64;
    }
    stats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum LifetimeModel {
    /// Bursts of `1..=max_burst` mallocs, each burst freed in reverse order
    /// before the next one starts.
    #[serde(rename_all = "camelCase")]
    LifoBurst { max_burst: u64 },
    /// Lifetime drawn uniformly from `1..=max_life_ops` allocation steps.
    #[serde(rename_all = "camelCase")]
    UniformRandom { max_life_ops: u64 },
    /// Short lifetimes drawn from `1..=short_life_ops`, long ones from
    /// `1..=long_life_ops`. Objects are short-lived with probability
    /// `short_frac`, or, when `short_max_size` is set, exactly when their
    /// size does not exceed it.
    #[serde(rename_all = "camelCase")]
    Bimodal {
        short_frac: f64,
        short_life_ops: u64,
        long_life_ops: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        short_max_size: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GeneratorSpec {
    pub object_count: u64,
    /// `(size, weight)` pairs.
    pub size_distribution: Vec<(u64, f64)>,
    pub lifetime_model: LifetimeModel,
    #[serde(default)]
    pub leak_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::InvalidSpec(m.to_owned()));
        if self.size_distribution.is_empty() {
            return bad("empty size distribution");
        }
        for &(size, w) in &self.size_distribution {
            if size == 0 {
                return bad("size 0 in distribution");
            }
            if !(w.is_finite() && w > 0.0) {
                return bad("weights must be positive and finite");
            }
        }
        if !(0.0..=1.0).contains(&self.leak_fraction) {
            return bad("leakFraction outside [0, 1]");
        }
        match self.lifetime_model {
            LifetimeModel::LifoBurst { max_burst: 0 } => bad("maxBurst must be >= 1"),
            LifetimeModel::UniformRandom { max_life_ops: 0 } => {
                bad("maxLifeOps must be >= 1")
            }
            LifetimeModel::Bimodal { short_frac, short_life_ops, long_life_ops, .. } => {
                if !(0.0..=1.0).contains(&short_frac) {
                    bad("shortFrac outside [0, 1]")
                } else if short_life_ops == 0 || long_life_ops == 0 {
                    bad("lifetimes must be >= 1")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Largest-remainder apportionment of `n` items over `weights`.
fn apportion(n: u64, weights: &[f64]) -> Vec<u64> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable on index so ties are deterministic
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take((n - assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// Builds a synthetic trace. Size frequencies follow the weights exactly
/// (largest-remainder rounding) in a seeded random order, and exactly
/// `round(leak_fraction * object_count)` objects are never freed.
pub fn generate_trace(spec: &GeneratorSpec) -> Result<Trace, TraceError> {
    spec.validate()?;
    let n = spec.object_count as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let weights: Vec<f64> = spec.size_distribution.iter().map(|&(_, w)| w).collect();
    let counts = apportion(spec.object_count, &weights);
    let mut sizes = Vec::with_capacity(n);
    for (&(size, _), &count) in spec.size_distribution.iter().zip(&counts) {
        sizes.extend(std::iter::repeat_n(size, count as usize));
    }
    sizes.shuffle(&mut rng);

    let leaks = (spec.leak_fraction * n as f64).round() as usize;
    let mut leaked = vec![false; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(leaks) {
        leaked[i] = true;
    }

    // frees_at[s] lists objects freed just before allocation step s
    // (s == n is the tail after the last malloc)
    let mut frees_at: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    match spec.lifetime_model {
        LifetimeModel::LifoBurst { max_burst } => {
            let mut start = 0usize;
            while start < n {
                let len = rng.gen_range(1..=max_burst) as usize;
                let end = (start + len).min(n);
                frees_at[end].extend((start..end).rev());
                start = end;
            }
        }
        LifetimeModel::UniformRandom { max_life_ops } => {
            for i in 0..n {
                let life = rng.gen_range(1..=max_life_ops) as usize;
                frees_at[(i + life).min(n)].push(i);
            }
        }
        LifetimeModel::Bimodal { short_frac, short_life_ops, long_life_ops, short_max_size } => {
            for i in 0..n {
                let short = match short_max_size {
                    Some(limit) => sizes[i] <= limit,
                    None => rng.gen_bool(short_frac),
                };
                let max = if short { short_life_ops } else { long_life_ops };
                let life = rng.gen_range(1..=max) as usize;
                frees_at[(i + life).min(n)].push(i);
            }
        }
    }

    let label = |i: usize| format!("0x{:x}", 0x1000 + 16 * i);
    let mut trace = Trace::new();
    for step in 0..=n {
        for &obj in &frees_at[step] {
            if !leaked[obj] {
                trace.push_free(&label(obj));
            }
        }
        if step < n {
            trace.push_malloc(&label(step), sizes[step]);
        }
    }
    Ok(trace)
}
