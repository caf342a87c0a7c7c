//! Reference managers: Kingsley, Lea, Fibonacci buddy, ten segregated
//! lists, and exact segregated fit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocators::{AllocatorClass, AllocatorSpec};
use crate::freelist::{DataStructure, FreeListConfig, Mechanism, Policy, SizeRange};
use crate::manager::DmmSpec;
use crate::trace::TraceStats;

pub const LEA_SMALL_MAX: u64 = 63;
pub const LEA_MEDIUM_MAX: u64 = 131_071;
pub const S10_LISTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Kng,
    Lea,
    Fib,
    S10,
    Exa,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Kng, Preset::Lea, Preset::Fib, Preset::S10, Preset::Exa];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Kng => "kng",
            Preset::Lea => "lea",
            Preset::Fib => "fib",
            Preset::S10 => "s10",
            Preset::Exa => "exa",
        }
    }

    /// Builds the preset for a trace; all but EXA only need its largest size.
    pub fn spec(self, stats: &TraceStats) -> DmmSpec {
        let max = stats.max_size_in_b.max(1);
        match self {
            Preset::Kng => kingsley(max),
            Preset::Lea => lea(max),
            Preset::Fib => fibonacci_buddy(max),
            Preset::S10 => segregated10(max),
            Preset::Exa => exact_segregated(stats),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown preset {0:?} (expected kng, lea, fib, s10 or exa)")]
pub struct UnknownPreset(pub String);

impl FromStr for Preset {
    type Err = UnknownPreset;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownPreset(s.to_owned()))
    }
}

fn config(ds: DataStructure, mechanism: Mechanism, policy: Policy) -> FreeListConfig {
    FreeListConfig::new(ds, mechanism, policy)
}

/// Power-of-two classes with constant-time lists and no splitting or
/// coalescing.
pub fn kingsley(max_size: u64) -> DmmSpec {
    let top = max_size.max(1).next_power_of_two();
    let classes: Vec<u64> = std::iter::successors(Some(1u64), |c| (*c < top).then(|| c * 2)).collect();
    DmmSpec::new(vec![AllocatorSpec::new(
        AllocatorClass::StrictSegregatedFit,
        SizeRange::new(0, top),
        config(DataStructure::Sll, Mechanism::Exact, Policy::Lifo),
    )
    .with_series(classes)])
}

/// Exact multiples of 8 for small objects, coalescing best fit for medium
/// ones, and direct arena draws for large ones. Regions beyond `max_size`
/// are dropped and the last one kept is cut at `max_size`.
pub fn lea(max_size: u64) -> DmmSpec {
    let max = max_size.max(1);
    let small_hi = max.min(LEA_SMALL_MAX);
    let small_classes: Vec<u64> = (1..=small_hi.div_ceil(8)).map(|k| k * 8).collect();
    let mut allocators = vec![AllocatorSpec::new(
        AllocatorClass::ExactSegregatedFit,
        SizeRange::new(0, small_hi),
        config(DataStructure::Sll, Mechanism::Exact, Policy::Fifo),
    )
    .with_series(small_classes)];
    if max > LEA_SMALL_MAX {
        allocators.push(
            AllocatorSpec::new(
                AllocatorClass::SegregatedFit,
                SizeRange::new(LEA_SMALL_MAX, max.min(LEA_MEDIUM_MAX)),
                config(DataStructure::Dll, Mechanism::Best, Policy::Fifo),
            )
            .with_split(true)
            .with_coalesce(true),
        );
    }
    if max > LEA_MEDIUM_MAX {
        allocators.push(AllocatorSpec::new(
            AllocatorClass::VirtualMemory,
            SizeRange::new(LEA_MEDIUM_MAX, max),
            config(DataStructure::Sll, Mechanism::First, Policy::Fifo),
        ));
    }
    DmmSpec::new(allocators)
}

pub fn fibonacci_buddy(max_size: u64) -> DmmSpec {
    DmmSpec::new(vec![AllocatorSpec::new(
        AllocatorClass::BuddySystemFibonacci,
        SizeRange::new(0, max_size.max(1)),
        config(DataStructure::Sll, Mechanism::First, Policy::Fifo),
    )
    .with_split(true)
    .with_coalesce(true)])
}

/// Upper bounds of ten geometric lists over `(0, max]`: the i-th is
/// `ceil(max^(i/10))`, nudged to stay strictly increasing.
pub fn s10_bounds(max_size: u64) -> Vec<u64> {
    let max = max_size.max(S10_LISTS as u64);
    let n = S10_LISTS;
    let mut bounds: Vec<u64> = (1..=n)
        .map(|i| {
            let x = (max as f64).powf(i as f64 / n as f64);
            (x - x * 1e-12).ceil() as u64
        })
        .collect();
    bounds[n - 1] = max;
    let mut prev = 0;
    for b in bounds.iter_mut() {
        *b = (*b).max(prev + 1);
        prev = *b;
    }
    bounds[n - 1] = max;
    for i in (0..n - 1).rev() {
        bounds[i] = bounds[i].min(bounds[i + 1] - 1);
    }
    bounds
}

pub fn segregated10(max_size: u64) -> DmmSpec {
    let bounds = s10_bounds(max_size);
    DmmSpec::new(vec![AllocatorSpec::new(
        AllocatorClass::SegregatedFit,
        SizeRange::new(0, *bounds.last().unwrap()),
        config(DataStructure::Sll, Mechanism::First, Policy::Fifo),
    )
    .with_sub_ranges(bounds)])
}

/// One exact list per distinct size seen in the trace.
pub fn exact_segregated(stats: &TraceStats) -> DmmSpec {
    let max = stats.max_size_in_b.max(1);
    let mut sizes: Vec<u64> = stats.distinct_sizes.iter().copied().collect();
    if sizes.is_empty() {
        sizes.push(max);
    }
    DmmSpec::new(vec![AllocatorSpec::new(
        AllocatorClass::ExactSegregatedFit,
        SizeRange::new(0, max),
        config(DataStructure::Sll, Mechanism::Exact, Policy::Lifo),
    )
    .with_series(sizes)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manager::Dmm;
    use crate::trace::{trace_stats, ObjectId, Trace};

    fn stats_of(sizes: &[u64]) -> TraceStats {
        let mut t = Trace::new();
        for (i, &s) in sizes.iter().enumerate() {
            t.push_malloc(&format!("o{i}"), s);
        }
        trace_stats(&t)
    }

    #[test]
    fn kingsley_classes() {
        let dmm = Dmm::new(&kingsley(4096)).unwrap();
        let classes = dmm.allocators()[0].classes().unwrap().to_vec();
        assert_eq!(classes.len(), 13);
        assert_eq!(classes[0], 1);
        assert_eq!(*classes.last().unwrap(), 4096);
        assert_eq!(kingsley(3000).max_size(), 4096);
    }

    #[test]
    fn kingsley_request_33() {
        let mut dmm = Dmm::new(&kingsley(4096)).unwrap();
        let p = dmm.malloc(ObjectId(0), 33, 0).unwrap();
        assert_eq!(p.block.payload(), 64);
        assert_eq!(dmm.metrics().internal_frag_bytes, 31);
        assert_eq!(p.block.header, 8);
    }

    #[test]
    fn lea_regions() {
        let spec = lea(1 << 20);
        let dmm = Dmm::new(&spec).unwrap();
        let a = dmm.allocators();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].class_of(20).unwrap(), 24);
        assert_eq!(a[0].class_of(63).unwrap(), 64);
        assert_eq!(dmm.allocator_for(4096).unwrap(), 1);
        assert_eq!(dmm.allocator_for(200_000).unwrap(), 2);
        assert_eq!(a[1].spec().mechanism, Mechanism::Best);
        assert!(a[1].spec().split && a[1].spec().coalesce);
    }

    #[test]
    fn lea_small_max_drops_regions() {
        assert_eq!(lea(40).allocators.len(), 1);
        assert_eq!(lea(40).max_size(), 40);
        assert_eq!(lea(2048).allocators.len(), 2);
    }

    #[test]
    fn fibonacci_preset() {
        let dmm = Dmm::new(&fibonacci_buddy(13)).unwrap();
        assert_eq!(dmm.allocators()[0].classes().unwrap(), &[1, 2, 3, 5, 8, 13]);
        assert_eq!(dmm.allocators()[0].class_of(6).unwrap(), 8);
    }

    #[test]
    fn s10_has_ten_lists() {
        for max in [1, 2, 9, 10, 11, 64, 1000, 4096, 1 << 20, 1_490_944] {
            let spec = segregated10(max);
            let dmm = Dmm::new(&spec).unwrap();
            assert_eq!(dmm.allocators()[0].lists().len(), 10, "max {max}");
            assert!(spec.max_size() >= max);
        }
        assert_eq!(s10_bounds(1 << 20), vec![4, 16, 64, 256, 1024, 4096, 16384, 65536, 262144, 1 << 20]);
    }

    #[test]
    fn s10_median_list_matches_scan() {
        let bounds = s10_bounds(4096);
        let dmm = Dmm::new(&segregated10(4096)).unwrap();
        for size in [1u64, 3, 7, 100, 2048, 4096] {
            let scan = bounds.iter().position(|&b| size <= b).unwrap();
            assert_eq!(dmm.allocators()[0].list_for_request(size), scan);
        }
    }

    #[test]
    fn exa_lists_per_distinct_size() {
        let stats = stats_of(&[2, 4, 40, 40, 3616]);
        let dmm = Dmm::new(&exact_segregated(&stats)).unwrap();
        assert_eq!(dmm.allocators()[0].classes().unwrap(), &[2, 4, 40, 3616]);
        let mut dmm = dmm;
        assert!(dmm.malloc(ObjectId(0), 3617, 0).is_err());
    }

    #[test]
    fn presets_validate_for_any_max() {
        for max in [1u64, 2, 3, 7, 8, 63, 64, 65, 1000, 131_071, 131_072, 1 << 22] {
            let stats = stats_of(&[max]);
            for p in Preset::ALL {
                let spec = p.spec(&stats);
                Dmm::new(&spec).unwrap_or_else(|e| panic!("{p} at {max}: {e}"));
                assert!(spec.max_size() >= max);
            }
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!("KNG".parse::<Preset>().unwrap(), Preset::Kng);
        assert_eq!("s10".parse::<Preset>().unwrap(), Preset::S10);
        assert!("dl".parse::<Preset>().is_err());
    }
}
