//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each. Exits non-zero on any failure that is not a
//! documented known failure.

mod common;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{kingsley_model, Fit, ListModel};
use dmmsim::allocators::{Allocator, AllocatorClass, AllocatorSpec, MallocOutcome};
use dmmsim::freelist::{Block, CostDelta, DataStructure, FreeList, FreeListConfig, ListId, Mechanism, Policy, SizeRange};
use dmmsim::manager::{Dmm, DmmSpec};
use dmmsim::metrics::{EnergyModel, FitnessWeights};
use dmmsim::presets::{kingsley, Preset};
use dmmsim::search::{evolve, Evaluator, GeParams, Grammar};
use dmmsim::simulator::{compare, replay, Replayer, Step};
use dmmsim::trace::{generate_trace, trace_stats, GeneratorSpec, LifetimeModel, ObjectId, Trace};

type Verdict = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn generator(name: &str) -> GeneratorSpec {
    serde_json::from_str(&read_fixture(name)).expect("generator fixture parses")
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    check(elapsed < budget, format!("took {elapsed:.2?}, budget {budget:?}"))
}

fn ranges(a: &Allocator) -> Vec<(u64, u64)> {
    a.lists().iter().map(|l| (l.range().lo, l.range().hi)).collect()
}

fn two_allocator_fixture() -> Verdict {
    let start = Instant::now();
    let text = read_fixture("two_allocator.json");
    let spec = DmmSpec::from_json(&text).map_err(|e| e.to_string())?;
    spec.validate().map_err(|e| e.to_string())?;
    check(spec.to_json() == text, "re-serialized config differs from the file")?;
    let dmm = Dmm::new(&spec).map_err(|e| e.to_string())?;
    let buddy = &dmm.allocators()[0];
    check(buddy.spec().klass == AllocatorClass::BuddySystemBinary, "first allocator is not the binary buddy")?;
    check(ranges(buddy) == vec![(0, 1), (1, 2), (2, 4), (4, 8)], format!("buddy lists {:?}", ranges(buddy)))?;
    check(dmm.allocators()[1].lists().len() == 1, "segregated side should have one list")?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("4 + 1 lists, byte-identical round trip in {:.2?}", start.elapsed()))
}

fn cfrac_custom_fixture() -> Verdict {
    let start = Instant::now();
    let spec = DmmSpec::from_json(&read_fixture("cfrac_custom.json")).map_err(|e| e.to_string())?;
    spec.validate().map_err(|e| e.to_string())?;
    let dmm = Dmm::new(&spec).map_err(|e| e.to_string())?;
    let alloc_ranges: Vec<(u64, u64)> = dmm.allocators().iter().map(|a| (a.range().lo, a.range().hi)).collect();
    check(alloc_ranges == vec![(0, 64), (64, 1724), (1724, 4096)], format!("allocator ranges {alloc_ranges:?}"))?;
    let lists: usize = dmm.allocators().iter().map(|a| a.lists().len()).sum();
    check(lists == 10, format!("{lists} lists"))?;

    let mut traces = vec![generate_trace(&generator("cfrac_like.json")).map_err(|e| e.to_string())?];
    for seed in 0..4 {
        traces.push(random_trace(seed, 2_000, 2..=3616, 300));
    }
    let mut events = 0;
    for t in &traces {
        replay(t, &spec).map_err(|e| format!("replay aborted: {e}"))?;
        events += t.len();
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("3 allocators, 10 lists, {events} events replayed without abort in {:.2?}", start.elapsed()))
}

/// Random trace with `objects` mallocs of sizes in `sizes`, each freed
/// after up to `max_life` later mallocs (or never).
fn random_trace(seed: u64, objects: usize, sizes: std::ops::RangeInclusive<u64>, max_life: usize) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frees: Vec<Vec<usize>> = vec![Vec::new(); objects + 1];
    let mut t = Trace::new();
    for i in 0..=objects {
        for &o in &frees[i] {
            t.push_free(&format!("o{o}"));
        }
        if i == objects {
            break;
        }
        t.push_malloc(&format!("o{i}"), rng.gen_range(sizes.clone()));
        if rng.gen_bool(0.97) {
            frees[(i + rng.gen_range(1..=max_life)).min(objects)].push(i);
        }
    }
    t
}

fn kingsley_bound() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut dmm = Dmm::new(&kingsley(1 << 20)).map_err(|e| e.to_string())?;
    let mut live = Vec::new();
    for i in 0..100_000u32 {
        let request = rng.gen_range(2..=1u64 << 20);
        let p = dmm.malloc(ObjectId(i), request, i as u64).map_err(|e| e.to_string())?;
        let class = p.block.payload();
        check(class < 2 * request, format!("request {request} got class {class}"))?;
        live.push(ObjectId(i));
        if rng.gen_bool(0.5) {
            let victim = live.swap_remove(rng.gen_range(0..live.len()));
            dmm.free(victim).map_err(|e| e.to_string())?;
        }
    }
    let m = dmm.metrics();
    check(m.split_count == 0 && m.coalesce_count == 0, format!("splits {} coalesces {}", m.split_count, m.coalesce_count))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1e5 requests, every class < 2x request, 0 splits, 0 coalesces in {:.2?}", start.elapsed()))
}

fn first_fit_cost() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let policy = if rng.gen_bool(0.5) { Policy::Fifo } else { Policy::Lifo };
        let config = FreeListConfig::new(DataStructure::Sll, Mechanism::First, policy);
        let mut list = FreeList::new(config, SizeRange::new(0, 1 << 20), None, ListId::default());
        let n = rng.gen_range(0..60);
        let mut order: Vec<u64> = Vec::new();
        for i in 0..n {
            let payload = rng.gen_range(1..=512);
            list.insert(Block::new(i * 4096, payload, 0, 0)).map_err(|e| e.to_string())?;
            match policy {
                Policy::Fifo => order.push(payload),
                Policy::Lifo => order.insert(0, payload),
            }
        }
        let needed = rng.gen_range(1..=600);
        // brute-force oracle: walk until the first fit
        let mut visited = 0u64;
        let mut hit = None;
        for &p in &order {
            visited += 1;
            if p >= needed {
                hit = Some(p);
                break;
            }
        }
        let expected = CostDelta::new(visited, 2 * visited)
            + if hit.is_some() { CostDelta::new(1, 2) } else { CostDelta::ZERO };
        let got = list.extract(needed, None);
        check(got.block.map(|b| b.payload()) == hit, format!("case {case}: wrong block"))?;
        check(got.cost == expected, format!("case {case}: cost {:?}, oracle {:?}", got.cost, expected))?;
    }
    Ok("1000 random lists, cost equals (visits, 2*visits) + unlink exactly".into())
}

fn conservation() -> Verdict {
    let mut sizes: Vec<(u64, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..60 {
        sizes.push((rng.gen_range(1..=4096), rng.gen_range(1.0..20.0)));
    }
    for s in [6000, 50_000, 140_000, 200_000] {
        sizes.push((s, 0.3));
    }
    let spec = GeneratorSpec {
        object_count: 50_000,
        size_distribution: sizes,
        lifetime_model: LifetimeModel::UniformRandom { max_life_ops: 1500 },
        leak_fraction: 0.0,
        seed: 3,
    };
    let trace = generate_trace(&spec).map_err(|e| e.to_string())?;
    check(trace.len() == 100_000, format!("trace has {} events", trace.len()))?;
    let stats = trace_stats(&trace);
    for preset in Preset::ALL {
        let mut r = Replayer::new(&trace, &preset.spec(&stats)).map_err(|e| e.to_string())?;
        let mut live: HashMap<ObjectId, Vec<u64>> = HashMap::new();
        let mut live_bytes = 0u64;
        let mut prev_top = 0;
        let mut i = 0usize;
        while let Some(step) = r.step() {
            let id = trace.events()[i].id();
            match step.map_err(|e| format!("{preset}: {e}"))? {
                Step::Malloc(p) => {
                    live.entry(id).or_default().push(p.block.size);
                    live_bytes += p.block.size;
                }
                Step::Free(Some(b)) => {
                    let size = live.get_mut(&id).and_then(Vec::pop).expect("freed block was live");
                    check(size == b.size, format!("{preset}: freed size mismatch at event {i}"))?;
                    live_bytes -= size;
                }
                Step::Free(None) => {}
            }
            let dmm = r.dmm();
            let top = dmm.arena_top();
            let total = live_bytes + dmm.listed_free_bytes() + dmm.slack_bytes();
            check(total == top, format!("{preset}: event {i}: live+free+slack {total} != arena {top}"))?;
            check(top >= prev_top, format!("{preset}: arena shrank at event {i}"))?;
            prev_top = top;
            i += 1;
        }
    }
    Ok("1e5 events x 5 presets, identity exact after every event, arena monotone".into())
}

fn buddy_algebra() -> Verdict {
    const ROOT: u64 = 1 << 12;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = AllocatorSpec::new(
        AllocatorClass::BuddySystemBinary,
        SizeRange::new(0, ROOT),
        FreeListConfig::new(DataStructure::Sll, Mechanism::First, Policy::Fifo),
    )
    .with_split(true)
    .with_coalesce(true);
    let aligned = |b: &Block| b.size.is_power_of_two() && b.position.is_multiple_of(b.size);
    for seq in 0..10_000 {
        let mut a = Allocator::build(&spec, 0, 8).map_err(|e| e.to_string())?;
        let mut cost = CostDelta::default();
        let root = a.adopt(0, ROOT, ROOT, 0);
        a.free(root, &mut cost).map_err(|e| e.to_string())?;
        let mut live: Vec<Block> = Vec::new();
        for _ in 0..rng.gen_range(1..24) {
            if live.is_empty() || rng.gen_bool(0.6) {
                let request = 1u64 << rng.gen_range(0..12);
                let request = rng.gen_range(request / 2 + 1..=request);
                match a.malloc(request, None, &mut cost).map_err(|e| e.to_string())? {
                    MallocOutcome::Found(b) => {
                        check(aligned(&b), format!("seq {seq}: misaligned {b:?}"))?;
                        check(b.size == request.next_power_of_two(), format!("seq {seq}: size {} for {request}", b.size))?;
                        live.push(b);
                    }
                    MallocOutcome::NeedArena { .. } => {}
                }
            } else {
                let b = live.swap_remove(rng.gen_range(0..live.len()));
                a.free(b, &mut cost).map_err(|e| e.to_string())?;
            }
            for l in a.lists() {
                for b in l.blocks() {
                    check(aligned(&b), format!("seq {seq}: free block {b:?} misaligned"))?;
                }
            }
        }
        while let Some(b) = live.pop() {
            a.free(b, &mut cost).map_err(|e| e.to_string())?;
        }
        let free: Vec<(u64, u64)> = a.lists().iter().flat_map(|l| l.blocks()).map(|b| (b.position, b.size)).collect();
        check(free == vec![(0, ROOT)], format!("seq {seq}: after freeing everything {free:?}"))?;
        check(a.stats().splits == a.stats().coalesces, format!("seq {seq}: splits and merges differ"))?;
    }
    Ok("1e4 sequences, power-of-two aligned throughout, root restored every time".into())
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let fits = [(Fit::First, Mechanism::First), (Fit::Best, Mechanism::Best), (Fit::Exact, Mechanism::Exact)];
    for case in 0..100 {
        let objects = rng.gen_range(1..=500);
        let max_size = [16, 64, 512][case % 3];
        let trace = random_trace(case as u64, objects, 1..=max_size, rng.gen_range(1..50));
        let result = if case % 4 == 3 {
            let m = replay(&trace, &kingsley(max_size)).map_err(|e| e.to_string())?;
            let placed = placements(&trace, &kingsley(max_size))?;
            let oracle = kingsley_model(&trace, 8);
            (placed, m.metrics(), oracle)
        } else {
            let (fit, mechanism) = fits[rng.gen_range(0..3)];
            let policy = if rng.gen_bool(0.5) { Policy::Fifo } else { Policy::Lifo };
            let ds = if rng.gen_bool(0.5) { DataStructure::Sll } else { DataStructure::Dll };
            let split = rng.gen_bool(0.5);
            let coalesce = rng.gen_bool(0.5);
            let spec = DmmSpec::new(vec![AllocatorSpec::new(
                AllocatorClass::SegregatedFreeList,
                SizeRange::new(0, 1 << 30),
                FreeListConfig::new(ds, mechanism, policy),
            )
            .with_split(split)
            .with_coalesce(coalesce)]);
            let model = ListModel {
                header: ds.header_words() * 8,
                fit,
                lifo: policy == Policy::Lifo,
                split,
                coalesce,
            };
            let m = replay(&trace, &spec).map_err(|e| e.to_string())?;
            (placements(&trace, &spec)?, m.metrics(), model.run(&trace))
        };
        let (placed, m, oracle) = result;
        check(placed == oracle.chosen, format!("case {case}: chosen blocks differ"))?;
        check(m.hwm_bytes == oracle.hwm, format!("case {case}: hwm {} vs {}", m.hwm_bytes, oracle.hwm))?;
        check(
            (m.malloc_count, m.free_count, m.invalid_frees) == (oracle.mallocs, oracle.frees, oracle.invalid_frees),
            format!("case {case}: counters differ"),
        )?;
    }
    Ok("100 random traces: chosen blocks, hwm and counters identical".into())
}

fn placements(trace: &Trace, spec: &DmmSpec) -> Result<Vec<(u64, u64)>, String> {
    let mut r = Replayer::new(trace, spec).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    while let Some(step) = r.step() {
        if let Step::Malloc(p) = step.map_err(|e| e.to_string())? {
            out.push((p.block.position, p.block.size));
        }
    }
    Ok(out)
}

fn cfrac_calibration() -> Verdict {
    let spec = generator("cfrac_like.json");
    let trace = generate_trace(&spec).map_err(|e| e.to_string())?;
    let s = trace_stats(&trace);
    check(s.objects == 10_000, format!("objects {}", s.objects))?;
    check((s.avg_size_in_b - 4.24).abs() <= 0.05, format!("average size {}", s.avg_size_in_b))?;
    check(s.avg_size_in_b * s.objects as f64 == s.total_bytes as f64, "average x objects != total")?;
    check(s.memory_ops == s.objects + s.free_events, "ops != mallocs + frees")?;
    check(s.distinct_sizes.len() == 22, format!("{} distinct sizes", s.distinct_sizes.len()))?;
    Ok(format!(
        "objects {}, average {:.4} B, total {} B, ops {}, max in use {} B",
        s.objects, s.avg_size_in_b, s.total_bytes, s.memory_ops, s.max_in_use_bytes
    ))
}

fn bimodal_trace() -> Trace {
    generate_trace(&generator("bimodal.json")).expect("bimodal trace generates")
}

fn bimodal_lea_memory(trace: &Trace) -> Verdict {
    let stats = trace_stats(trace);
    let specs: Vec<(String, DmmSpec)> = Preset::ALL.iter().map(|p| (p.name().to_owned(), p.spec(&stats))).collect();
    let c = compare(trace, &specs, "kng", &EnergyModel::default(), &FitnessWeights::default(), false)
        .map_err(|e| e.to_string())?;
    let memory = |name: &str| {
        c.report.rows.iter().find(|r| r.name == name).and_then(|r| r.ratios.as_ref()).map(|r| r.memory.0).unwrap()
    };
    let (lea, kng) = (memory("lea"), memory("kng"));
    let detail = format!("{} events, memory ratio lea {lea:.4} vs kng {kng:.4}", trace.len());
    check(lea > kng, detail.clone())?;
    Ok(detail)
}

fn bimodal_search(trace: &Trace) -> Verdict {
    let start = Instant::now();
    let stats = trace_stats(trace);
    let model = EnergyModel::default();
    let weights = FitnessWeights::default();
    let baseline = replay(trace, &kingsley(stats.max_size_in_b)).map_err(|e| e.to_string())?.metrics();
    let eval = Evaluator { trace, baseline, weights, model, invalid_penalty: GeParams::default().invalid_penalty };
    let mut best_preset = (f64::INFINITY, "");
    for p in Preset::ALL {
        let f = eval.evaluate(&p.spec(&stats));
        if f < best_preset.0 {
            best_preset = (f, p.name());
        }
    }
    let params = GeParams { seed: 1, ..GeParams::default() };
    let outcome = evolve(&Grammar::from_stats(&stats), &params, &eval).map_err(|e| e.to_string())?;
    let detail = format!(
        "evolved {:.6} vs best preset {} {:.6}, {} designs replayed in {:.1?}",
        outcome.best_fitness,
        best_preset.1,
        best_preset.0,
        outcome.evaluations,
        start.elapsed()
    );
    check(outcome.best_fitness <= best_preset.0, detail.clone())?;
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(detail)
}

fn throughput() -> Verdict {
    let spec = GeneratorSpec {
        object_count: 500_000,
        size_distribution: vec![(8, 30.0), (16, 25.0), (24, 10.0), (40, 15.0), (100, 10.0), (1000, 8.0), (5000, 2.0)],
        lifetime_model: LifetimeModel::UniformRandom { max_life_ops: 1000 },
        leak_fraction: 0.0,
        seed: 4,
    };
    let trace = generate_trace(&spec).map_err(|e| e.to_string())?;
    check(trace.len() == 1_000_000, format!("{} events", trace.len()))?;
    let kng = kingsley(trace.max_size());
    let start = Instant::now();
    let dmm = replay(&trace, &kng).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let rate = trace.len() as f64 / secs;
    check(dmm.metrics().malloc_count == 500_000, "not every malloc replayed")?;
    let detail = format!("{:.2e} events/s ({} events in {secs:.3} s)", rate, trace.len());
    check(rate >= 1e5, detail.clone())?;
    Ok(detail)
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dmmsim")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("dmmsim {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    let gen_spec = fixture("cfrac_like.json").to_string_lossy().into_owned();
    let custom = fixture("cfrac_custom.json").to_string_lossy().into_owned();
    let mut runs: Vec<Vec<Vec<u8>>> = Vec::new();
    for round in 0..2 {
        let trace = p(&format!("t{round}.mem"));
        let out_dir = p(&format!("search{round}"));
        let plot = p(&format!("plot{round}.csv"));
        let mut outputs = Vec::new();
        run_cli(&["gen", &gen_spec, "-o", &trace, "--seed", "42"])?;
        outputs.push(std::fs::read(&trace).map_err(|e| e.to_string())?);
        for format in ["text", "json", "csv"] {
            outputs.push(run_cli(&["stats", &trace, "--format", format])?);
            outputs.push(run_cli(&["sim", &trace, "--dmm", "lea", "--baseline", "kng", "--format", format])?);
            outputs.push(run_cli(&["compare", &trace, "--dmms", &format!("kng,lea,fib,s10,exa,{custom}"), "--format", format])?);
        }
        outputs.push(run_cli(&["compare", &trace, "--parallel", "--format", "json", "--plot-csv", &plot])?);
        outputs.push(std::fs::read(&plot).map_err(|e| e.to_string())?);
        outputs.push(run_cli(&[
            "search", &trace, "--seed", "7", "--generations", "8", "--population", "20", "--out-dir", &out_dir, "--format", "json",
        ])?);
        for f in ["best.json", "history.csv", "best.txt"] {
            outputs.push(std::fs::read(Path::new(&out_dir).join(f)).map_err(|e| e.to_string())?);
        }
        outputs.push(run_cli(&["map", &custom])?);
        runs.push(outputs);
    }
    for (i, (a, b)) in runs[0].iter().zip(&runs[1]).enumerate() {
        check(a == b, format!("output {i} differs between runs"))?;
    }
    Ok(format!("{} outputs across gen, stats, sim, compare, search, map identical", runs[0].len()))
}

/// Criteria that fail for a documented reason rather than a defect.
const KNOWN_FAILURES: &[&str] = &["bimodal lea memory"];

fn main() {
    let bimodal = bimodal_trace();
    let criteria: Vec<Criterion> = vec![
        ("two-allocator config", Box::new(two_allocator_fixture)),
        ("cfrac custom config", Box::new(cfrac_custom_fixture)),
        ("kingsley bound", Box::new(kingsley_bound)),
        ("first-fit cost rule", Box::new(first_fit_cost)),
        ("conservation", Box::new(conservation)),
        ("buddy algebra", Box::new(buddy_algebra)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("cfrac calibration", Box::new(cfrac_calibration)),
        ("bimodal lea memory", Box::new(|| bimodal_lea_memory(&bimodal))),
        ("bimodal search", Box::new(|| bimodal_search(&bimodal))),
        ("throughput", Box::new(throughput)),
        ("determinism", Box::new(determinism)),
    ];
    let mut unexpected = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) if KNOWN_FAILURES.contains(name) => println!("FAIL {name}: {detail} (known failure)"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                unexpected += 1;
            }
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
