//! Grammatical evolution over manager designs: integer genomes are mapped
//! through a fixed grammar into [`DmmSpec`]s, scored by replay, and evolved
//! with a generational genetic algorithm.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocators::{AllocatorClass, AllocatorSpec};
use crate::freelist::{DataStructure, FreeListConfig, Mechanism, Policy, SizeRange};
use crate::manager::DmmSpec;
use crate::metrics::{fitness, EnergyModel, FitnessWeights, Metrics};
use crate::simulator::replay;
use crate::trace::{Trace, TraceStats};

pub const MIN_GENOME_LENGTH: usize = 16;
pub const MAX_ALLOCATORS: usize = 4;

/// Allocator classes in grammar order.
pub const GRAMMAR_CLASSES: [AllocatorClass; 7] = [
    AllocatorClass::SegregatedFreeList,
    AllocatorClass::SimpleSegregatedStorage,
    AllocatorClass::SegregatedFit,
    AllocatorClass::ExactSegregatedFit,
    AllocatorClass::StrictSegregatedFit,
    AllocatorClass::BuddySystemBinary,
    AllocatorClass::BuddySystemFibonacci,
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome {
    pub codons: Vec<u16>,
}

impl Genome {
    pub fn random<R: Rng>(len: usize, rng: &mut R) -> Self {
        Self { codons: (0..len).map(|_| rng.gen()).collect() }
    }
}

/// Production rules for one trace: the largest size and the boundary
/// vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    max_size: u64,
    sizes: BTreeSet<u64>,
    boundaries: Vec<u64>,
}

impl Grammar {
    /// Boundaries are powers of two and observed sizes strictly inside
    /// `(0, max_size)`.
    pub fn new(max_size: u64, sizes: &BTreeSet<u64>) -> Self {
        let max_size = max_size.max(1);
        let mut boundaries: BTreeSet<u64> = sizes.iter().copied().filter(|&s| s > 0 && s < max_size).collect();
        let mut p = 1u64;
        while p < max_size {
            boundaries.insert(p);
            p *= 2;
        }
        Self { max_size, sizes: sizes.clone(), boundaries: boundaries.into_iter().collect() }
    }

    pub fn from_stats(stats: &TraceStats) -> Self {
        Self::new(stats.max_size_in_b, &stats.distinct_sizes)
    }

    pub fn max_size(&self) -> u64 {
        self.max_size
    }

    pub fn boundaries(&self) -> &[u64] {
        &self.boundaries
    }

    fn allocator(&self, klass: AllocatorClass, range: SizeRange, config: FreeListConfig) -> AllocatorSpec {
        let spec = AllocatorSpec::new(klass, range, config);
        match klass {
            AllocatorClass::ExactSegregatedFit => {
                let mut series: Vec<u64> = self.sizes.range(range.lo + 1..range.hi).copied().collect();
                series.push(range.hi);
                spec.with_series(series)
            }
            AllocatorClass::StrictSegregatedFit => {
                let top = range.hi.next_power_of_two();
                let series = std::iter::successors(Some(1u64), |p| (*p < top).then(|| p * 2))
                    .filter(|&p| p > range.lo)
                    .collect();
                spec.with_series(series)
            }
            _ => spec,
        }
    }
}

/// Reads codons left to right, wrapping at most `max_wraps` times. A
/// decision with a single option consumes nothing.
struct CodonReader<'a> {
    codons: &'a [u16],
    pos: usize,
    wraps: u32,
    max_wraps: u32,
}

impl CodonReader<'_> {
    fn choose(&mut self, options: usize) -> Option<usize> {
        if options <= 1 {
            return Some(0);
        }
        if self.pos == self.codons.len() {
            if self.wraps == self.max_wraps || self.codons.is_empty() {
                return None;
            }
            self.wraps += 1;
            self.pos = 0;
        }
        let c = self.codons[self.pos] as usize;
        self.pos += 1;
        Some(c % options)
    }

    fn pick<T: Copy>(&mut self, options: &[T]) -> Option<T> {
        self.choose(options.len()).map(|i| options[i])
    }
}

/// Derives a manager from a genome, or `None` when the codons run out.
pub fn map_genome(genome: &Genome, grammar: &Grammar, max_wraps: u32) -> Option<DmmSpec> {
    let mut r = CodonReader { codons: &genome.codons, pos: 0, wraps: 0, max_wraps };
    let count = r.choose(MAX_ALLOCATORS)? + 1;
    let mut cuts = Vec::with_capacity(count - 1);
    for _ in 1..count {
        if grammar.boundaries.is_empty() {
            break;
        }
        cuts.push(r.pick(&grammar.boundaries)?);
    }
    cuts.sort_unstable();
    cuts.dedup();
    cuts.push(grammar.max_size);

    let mut allocators = Vec::with_capacity(cuts.len());
    let mut lo = 0;
    for hi in cuts {
        let klass = r.pick(&GRAMMAR_CLASSES)?;
        let (split, coalesce) = if klass == AllocatorClass::SimpleSegregatedStorage {
            (false, false)
        } else {
            (r.choose(2)? == 1, r.choose(2)? == 1)
        };
        let config = FreeListConfig::new(r.pick(&DataStructure::ALL)?, r.pick(&Mechanism::ALL)?, r.pick(&Policy::ALL)?);
        let spec = grammar
            .allocator(klass, SizeRange::new(lo, hi), config)
            .with_split(split)
            .with_coalesce(coalesce);
        allocators.push(spec);
        lo = hi;
    }
    Some(DmmSpec::new(allocators))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GeParams {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub tournament_size: usize,
    pub elite_count: usize,
    pub max_wraps: u32,
    pub genome_length: usize,
    pub invalid_penalty: f64,
    pub seed: u64,
}

impl Default for GeParams {
    fn default() -> Self {
        Self {
            population_size: 60,
            generations: 100,
            crossover_rate: 0.8,
            mutation_rate: 0.01,
            tournament_size: 2,
            elite_count: 1,
            max_wraps: 2,
            genome_length: 64,
            invalid_penalty: 1e12,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("invalid search parameter: {0}")]
    Params(String),
}

impl GeParams {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::Params(m));
        if self.population_size == 0 || self.generations == 0 {
            return bad("population and generations must be positive".into());
        }
        for (name, rate) in [("crossover", self.crossover_rate), ("mutation", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} rate {rate} outside [0, 1]"));
            }
        }
        if self.elite_count == 0 || self.elite_count > self.population_size {
            return bad(format!("elite count {} must be in 1..={}", self.elite_count, self.population_size));
        }
        if self.tournament_size == 0 {
            return bad("tournament size must be positive".into());
        }
        if self.genome_length < MIN_GENOME_LENGTH {
            return bad(format!("genome length must be at least {MIN_GENOME_LENGTH}"));
        }
        if !(self.invalid_penalty.is_finite() && self.invalid_penalty > 0.0) {
            return bad("invalid penalty must be positive and finite".into());
        }
        Ok(())
    }
}

/// Scoring context shared by every candidate.
pub struct Evaluator<'t> {
    pub trace: &'t Trace,
    pub baseline: Metrics,
    pub weights: FitnessWeights,
    pub model: EnergyModel,
    pub invalid_penalty: f64,
}

impl Evaluator<'_> {
    /// Fitness of a full replay; a failed composition or replay scores the
    /// penalty.
    pub fn evaluate(&self, spec: &DmmSpec) -> f64 {
        match replay(self.trace, spec) {
            Ok(dmm) => fitness(&dmm.metrics(), &self.baseline, &self.weights, &self.model)
                .unwrap_or(self.invalid_penalty),
            Err(_) => self.invalid_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    /// Mean over candidates that mapped and replayed.
    pub mean_fitness: f64,
    pub invalid: usize,
    pub distinct_specs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SearchOutcome {
    pub best_spec: DmmSpec,
    pub best_fitness: f64,
    pub best_genome: Genome,
    pub history: Vec<GenerationStats>,
    /// Distinct designs replayed.
    pub evaluations: usize,
}

impl SearchOutcome {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("generation,best_fitness,mean_fitness,invalid,distinct_specs\n");
        for g in &self.history {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{}",
                g.generation, g.best_fitness, g.mean_fitness, g.invalid, g.distinct_specs
            );
        }
        out
    }
}

struct Population {
    genomes: Vec<Genome>,
    fitness: Vec<f64>,
    specs: Vec<Option<DmmSpec>>,
}

fn tournament<R: Rng>(fitness: &[f64], size: usize, rng: &mut R) -> usize {
    let mut best = rng.gen_range(0..fitness.len());
    for _ in 1..size {
        let c = rng.gen_range(0..fitness.len());
        if fitness[c].total_cmp(&fitness[best]).then(c.cmp(&best)).is_lt() {
            best = c;
        }
    }
    best
}

fn mutate<R: Rng>(g: &mut Genome, rate: f64, rng: &mut R) {
    for c in g.codons.iter_mut() {
        if rng.gen_bool(rate) {
            *c = rng.gen();
        }
    }
}

fn evaluate_population(
    genomes: Vec<Genome>,
    grammar: &Grammar,
    params: &GeParams,
    eval: &Evaluator<'_>,
    cache: &mut HashMap<String, f64>,
) -> Population {
    let specs: Vec<Option<DmmSpec>> = genomes.iter().map(|g| map_genome(g, grammar, params.max_wraps)).collect();
    let keys: Vec<Option<String>> = specs
        .iter()
        .map(|s| s.as_ref().map(|s| serde_json::to_string(s).expect("spec serializes")))
        .collect();
    let mut pending: Vec<(&String, &DmmSpec)> = Vec::new();
    let mut queued = BTreeSet::new();
    for (k, s) in keys.iter().zip(&specs) {
        if let (Some(k), Some(s)) = (k, s) {
            if !cache.contains_key(k) && queued.insert(k) {
                pending.push((k, s));
            }
        }
    }
    let scored: Vec<f64> = pending.par_iter().map(|(_, s)| eval.evaluate(s)).collect();
    for ((k, _), f) in pending.iter().zip(scored) {
        cache.insert((*k).clone(), f);
    }
    let fitness = keys
        .iter()
        .map(|k| k.as_ref().map_or(params.invalid_penalty, |k| cache[k]))
        .collect();
    Population { genomes, fitness, specs }
}

/// Runs the generational search. Deterministic for a fixed seed whatever
/// the thread count.
pub fn evolve(
    grammar: &Grammar,
    params: &GeParams,
    eval: &Evaluator<'_>,
) -> Result<SearchOutcome, SearchError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut cache = HashMap::new();
    let initial = (0..params.population_size).map(|_| Genome::random(params.genome_length, &mut rng)).collect();
    let mut pop = evaluate_population(initial, grammar, params, eval, &mut cache);
    let mut history = Vec::with_capacity(params.generations);

    for generation in 0..params.generations {
        let mut ranked: Vec<usize> = (0..pop.genomes.len()).collect();
        ranked.sort_by(|&a, &b| pop.fitness[a].total_cmp(&pop.fitness[b]).then(a.cmp(&b)));
        let feasible: Vec<f64> = pop.fitness.iter().copied().filter(|&f| f < params.invalid_penalty).collect();
        let distinct: BTreeSet<String> =
            pop.specs.iter().flatten().map(|s| serde_json::to_string(s).unwrap()).collect();
        history.push(GenerationStats {
            generation,
            best_fitness: pop.fitness[ranked[0]],
            mean_fitness: if feasible.is_empty() {
                params.invalid_penalty
            } else {
                feasible.iter().sum::<f64>() / feasible.len() as f64
            },
            invalid: pop.specs.iter().filter(|s| s.is_none()).count(),
            distinct_specs: distinct.len(),
        });
        log::info!("generation {generation}: best {:.6}", pop.fitness[ranked[0]]);
        if generation + 1 == params.generations {
            let best = ranked[0];
            let Some(best_spec) = pop.specs[best].clone() else {
                break;
            };
            return Ok(SearchOutcome {
                best_spec,
                best_fitness: pop.fitness[best],
                best_genome: pop.genomes[best].clone(),
                history,
                evaluations: cache.len(),
            });
        }

        let mut next: Vec<Genome> = ranked[..params.elite_count].iter().map(|&i| pop.genomes[i].clone()).collect();
        while next.len() < params.population_size {
            let mut a = pop.genomes[tournament(&pop.fitness, params.tournament_size, &mut rng)].clone();
            let mut b = pop.genomes[tournament(&pop.fitness, params.tournament_size, &mut rng)].clone();
            if rng.gen_bool(params.crossover_rate) {
                let cut = rng.gen_range(1..params.genome_length);
                a.codons[cut..].swap_with_slice(&mut b.codons[cut..]);
            }
            mutate(&mut a, params.mutation_rate, &mut rng);
            mutate(&mut b, params.mutation_rate, &mut rng);
            next.push(a);
            if next.len() < params.population_size {
                next.push(b);
            }
        }
        pop = evaluate_population(next, grammar, params, eval, &mut cache);
    }
    Err(SearchError::Params("no valid design found; try more generations or a longer genome".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manager::Dmm;
    use crate::presets::kingsley;
    use crate::trace::{parse_trace_str, trace_stats};

    fn grammar() -> Grammar {
        Grammar::new(4096, &[2u64, 4, 40, 3616].into_iter().collect())
    }

    #[test]
    fn vocabulary_is_sorted_and_inside() {
        let g = grammar();
        assert_eq!(g.boundaries()[..4], [1, 2, 4, 8]);
        assert!(g.boundaries().contains(&40));
        assert!(g.boundaries().contains(&3616));
        assert!(!g.boundaries().contains(&4096));
        assert!(g.boundaries().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_genome_maps_to_first_options() {
        let spec = map_genome(&Genome { codons: vec![0; 16] }, &grammar(), 0).unwrap();
        assert_eq!(spec.allocators.len(), 1);
        let a = &spec.allocators[0];
        assert_eq!(a.klass, AllocatorClass::SegregatedFreeList);
        assert_eq!(a.range, SizeRange::new(0, 4096));
        assert!(!a.split && !a.coalesce);
        assert_eq!(
            (a.data_structure, a.mechanism, a.policy),
            (DataStructure::Sll, Mechanism::First, Policy::Fifo)
        );
    }

    #[test]
    fn codon_modulo_choice() {
        let mut r = CodonReader { codons: &[7], pos: 0, wraps: 0, max_wraps: 0 };
        assert_eq!(r.choose(3), Some(1));
    }

    #[test]
    fn running_out_of_codons_is_invalid() {
        // four allocators: 1 + 3 boundary codons and 6 codons each
        let mut codons = vec![0u16; 16];
        codons[..4].copy_from_slice(&[3, 0, 1, 2]);
        assert!(map_genome(&Genome { codons: codons.clone() }, &grammar(), 0).is_none());
        assert!(map_genome(&Genome { codons }, &grammar(), 2).is_some());
    }

    #[test]
    fn mapping_is_pure_and_valid() {
        let g = grammar();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let genome = Genome::random(16, &mut rng);
            let a = map_genome(&genome, &g, 2);
            assert_eq!(a, map_genome(&genome, &g, 2));
            if let Some(spec) = a {
                Dmm::new(&spec).unwrap_or_else(|e| panic!("{e}: {spec:?}"));
                assert_eq!(spec.max_size(), 4096);
            }
        }
    }

    #[test]
    fn params_validation() {
        assert!(GeParams::default().validate().is_ok());
        let p = GeParams { elite_count: 0, ..GeParams::default() };
        assert!(p.validate().is_err());
        let p = GeParams { genome_length: 8, ..GeParams::default() };
        assert!(p.validate().is_err());
        let p = GeParams { mutation_rate: 1.5, ..GeParams::default() };
        assert!(p.validate().is_err());
    }

    fn small_trace() -> Trace {
        let mut text = String::new();
        for i in 0..300 {
            let size = [8, 24, 40, 100, 700][i % 5];
            text.push_str(&format!("M o{i} {size}\n"));
            if i % 3 == 2 {
                text.push_str(&format!("F o{}\n", i - 2));
            }
        }
        parse_trace_str(&text).unwrap()
    }

    #[test]
    fn kingsley_scores_one_against_itself() {
        let t = small_trace();
        let spec = kingsley(trace_stats(&t).max_size_in_b);
        let baseline = replay(&t, &spec).unwrap().metrics();
        let eval = Evaluator {
            trace: &t,
            baseline,
            weights: FitnessWeights::default(),
            model: EnergyModel::default(),
            invalid_penalty: 1e12,
        };
        assert!((eval.evaluate(&spec) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evolution_is_deterministic_and_elitist() {
        let t = small_trace();
        let stats = trace_stats(&t);
        let baseline = replay(&t, &kingsley(stats.max_size_in_b)).unwrap().metrics();
        let eval = Evaluator {
            trace: &t,
            baseline,
            weights: FitnessWeights::default(),
            model: EnergyModel::default(),
            invalid_penalty: 1e12,
        };
        let params = GeParams { population_size: 12, generations: 6, seed: 9, ..GeParams::default() };
        let g = Grammar::from_stats(&stats);
        let a = evolve(&g, &params, &eval).unwrap();
        let b = evolve(&g, &params, &eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 6);
        assert!(a.history.windows(2).all(|w| w[1].best_fitness <= w[0].best_fitness));
        assert_eq!(a.best_fitness, a.history.last().unwrap().best_fitness);
    }
}
