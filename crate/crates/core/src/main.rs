use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dmmsim::manager::DmmSpec;
use dmmsim::metrics::{EnergyModel, FitnessWeights, Metrics};
use dmmsim::presets::Preset;
use dmmsim::search::{evolve, Evaluator, GeParams, Grammar};
use dmmsim::simulator::{compare, replay, simulate};
use dmmsim::trace::{emit_trace, generate_trace, parse_trace_with, trace_stats, GeneratorSpec, ParseOptions, Trace, TraceStats};

#[derive(Parser)]
#[command(name = "dmmsim", version, about = "Replay malloc/free traces through composed memory managers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(clap::Args)]
struct TraceArgs {
    /// Trace file (`M <id> <size>` / `F <id>` lines).
    trace: PathBuf,
    /// Drop zero-size mallocs with a warning instead of failing.
    #[arg(long)]
    permissive: bool,
}

#[derive(clap::Args)]
struct ScoreArgs {
    /// Fitness weights for time, memory and energy.
    #[arg(long, default_value = "1,1,1")]
    weights: FitnessWeights,
    /// Energy per access, per time unit and per high-water byte.
    #[arg(long, default_value = "1,0.5,0.0001")]
    energy_model: EnergyModel,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a trace.
    Stats {
        #[command(flatten)]
        input: TraceArgs,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Generate a synthetic trace from a generator spec.
    Gen {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay a trace through one manager.
    Sim {
        #[command(flatten)]
        input: TraceArgs,
        /// Preset name (kng, lea, fib, s10, exa) or manager JSON file.
        #[arg(long)]
        dmm: String,
        /// Manager to normalize fitness against.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[command(flatten)]
        score: ScoreArgs,
    },
    /// Replay a trace through several managers and normalize to a baseline.
    Compare {
        #[command(flatten)]
        input: TraceArgs,
        #[arg(long, value_delimiter = ',', default_value = "kng,lea,fib,s10,exa")]
        dmms: Vec<String>,
        #[arg(long, default_value = "kng")]
        baseline: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Run candidates concurrently.
        #[arg(long)]
        parallel: bool,
        /// Also write long-form `name,metric,ratio` rows for plotting.
        #[arg(long)]
        plot_csv: Option<PathBuf>,
        #[command(flatten)]
        score: ScoreArgs,
    },
    /// Evolve a custom manager for a trace.
    Search {
        #[command(flatten)]
        input: TraceArgs,
        #[arg(long, default_value_t = GeParams::default().population_size)]
        population: usize,
        #[arg(long, default_value_t = GeParams::default().generations)]
        generations: usize,
        #[arg(long, default_value_t = GeParams::default().crossover_rate)]
        crossover: f64,
        #[arg(long, default_value_t = GeParams::default().mutation_rate)]
        mutation: f64,
        #[arg(long, default_value_t = GeParams::default().tournament_size)]
        tournament: usize,
        #[arg(long, default_value_t = GeParams::default().elite_count)]
        elite: usize,
        #[arg(long, default_value_t = GeParams::default().max_wraps)]
        max_wraps: u32,
        #[arg(long, default_value_t = GeParams::default().genome_length)]
        genome_length: usize,
        #[arg(long, default_value_t = GeParams::default().invalid_penalty)]
        invalid_penalty: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manager used to normalize fitness.
        #[arg(long, default_value = "kng")]
        baseline: String,
        /// Directory for best.json, history.csv and best.txt.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[command(flatten)]
        score: ScoreArgs,
    },
    /// Print a manager's free-list layout.
    Map {
        /// Preset name or manager JSON file.
        dmm: String,
        /// Trace that sizes the preset (required for presets).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn load_trace(args: &TraceArgs) -> Result<Trace> {
    let file = fs::File::open(&args.trace).with_context(|| format!("opening {}", args.trace.display()))?;
    parse_trace_with(BufReader::new(file), ParseOptions { permissive: args.permissive })
        .with_context(|| format!("reading {}", args.trace.display()))
}

/// Resolves a preset name or config path to a display name and spec.
fn resolve_dmm(arg: &str, stats: &TraceStats) -> Result<(String, DmmSpec)> {
    if let Ok(p) = arg.parse::<Preset>() {
        return Ok((p.name().to_owned(), p.spec(stats)));
    }
    let path = Path::new(arg);
    if !path.exists() {
        bail!("{arg:?} is neither a preset (kng, lea, fib, s10, exa) nor a readable file");
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
    let spec = DmmSpec::from_json(&text).with_context(|| format!("parsing {arg}"))?;
    spec.validate().with_context(|| format!("validating {arg}"))?;
    let name = path.file_stem().map_or_else(|| arg.to_owned(), |s| s.to_string_lossy().into_owned());
    Ok((name, spec))
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn stats_csv(s: &TraceStats) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "objects",
        "total_bytes",
        "max_in_use_bytes",
        "avg_size",
        "memory_ops",
        "free_events",
        "distinct_sizes",
        "max_size",
        "invalid_mallocs",
        "invalid_frees",
    ])?;
    w.write_record([
        s.objects.to_string(),
        s.total_bytes.to_string(),
        s.max_in_use_bytes.to_string(),
        format!("{:.6}", s.avg_size_in_b),
        s.memory_ops.to_string(),
        s.free_events.to_string(),
        s.distinct_sizes.len().to_string(),
        s.max_size_in_b.to_string(),
        s.invalid_mallocs.to_string(),
        s.invalid_frees.to_string(),
    ])?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn metrics_csv(m: &Metrics, energy: f64, fitness: Option<f64>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let value = serde_json::to_value(m)?;
    let obj = value.as_object().expect("metrics serialize to an object");
    let mut header: Vec<String> = obj.keys().cloned().collect();
    let mut row: Vec<String> = obj.values().map(|v| v.to_string()).collect();
    header.push("energy".into());
    row.push(format!("{energy:.6}"));
    header.push("fitness".into());
    row.push(fitness.map(|f| format!("{f:.6}")).unwrap_or_default());
    w.write_record(&header)?;
    w.write_record(&row)?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn metrics_text(m: &Metrics) -> String {
    let value = serde_json::to_value(m).expect("metrics serialize");
    let mut out = String::new();
    for (k, v) in value.as_object().unwrap() {
        out.push_str(&format!("{k:<26}{v}\n"));
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Stats { input, format } => {
            let stats = trace_stats(&load_trace(&input)?);
            let text = match format {
                Format::Text => format!("{stats}\n"),
                Format::Json => json(&stats)?,
                Format::Csv => stats_csv(&stats)?,
            };
            out.write_all(text.as_bytes())?;
        }
        Command::Gen { spec, output, seed } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let mut g: GeneratorSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            if let Some(seed) = seed {
                g.seed = seed;
            }
            let trace = generate_trace(&g)?;
            let file = fs::File::create(&output).with_context(|| format!("creating {}", output.display()))?;
            let mut w = io::BufWriter::new(file);
            emit_trace(&trace, &mut w)?;
            w.flush()?;
        }
        Command::Sim { input, dmm, baseline, format, score } => {
            let trace = load_trace(&input)?;
            let stats = trace_stats(&trace);
            let (_, spec) = resolve_dmm(&dmm, &stats)?;
            let base = match baseline {
                Some(b) => Some(replay(&trace, &resolve_dmm(&b, &stats)?.1)?.metrics()),
                None => None,
            };
            let r = simulate(&trace, &spec, &score.energy_model, &score.weights, base.as_ref())?;
            let text = match format {
                Format::Json => json(&r)?,
                Format::Csv => metrics_csv(&r.metrics, r.energy, r.fitness_vs_baseline)?,
                Format::Text => {
                    let mut s = metrics_text(&r.metrics);
                    s.push_str(&format!("{:<26}{:.6}\n", "energy", r.energy));
                    if let Some(f) = r.fitness_vs_baseline {
                        s.push_str(&format!("{:<26}{:.6}\n", "fitness", f));
                    }
                    s.push('\n');
                    s.push_str(&r.final_snapshot.to_string());
                    s
                }
            };
            out.write_all(text.as_bytes())?;
        }
        Command::Compare { input, dmms, baseline, format, parallel, plot_csv, score } => {
            let trace = load_trace(&input)?;
            let stats = trace_stats(&trace);
            let specs = dmms.iter().map(|d| resolve_dmm(d, &stats)).collect::<Result<Vec<_>>>()?;
            let cmp = compare(&trace, &specs, &baseline, &score.energy_model, &score.weights, parallel)?;
            if let Some(path) = plot_csv {
                fs::write(&path, cmp.report.to_plot_csv_string()).with_context(|| format!("writing {}", path.display()))?;
            }
            let text = match format {
                Format::Json => json(&cmp)?,
                Format::Csv => cmp.report.to_csv_string(),
                Format::Text => cmp.report.to_text(),
            };
            out.write_all(text.as_bytes())?;
        }
        Command::Search {
            input,
            population,
            generations,
            crossover,
            mutation,
            tournament,
            elite,
            max_wraps,
            genome_length,
            invalid_penalty,
            seed,
            baseline,
            out_dir,
            format,
            score,
        } => {
            let trace = load_trace(&input)?;
            let stats = trace_stats(&trace);
            let params = GeParams {
                population_size: population,
                generations,
                crossover_rate: crossover,
                mutation_rate: mutation,
                tournament_size: tournament,
                elite_count: elite,
                max_wraps,
                genome_length,
                invalid_penalty,
                seed,
            };
            let (_, base_spec) = resolve_dmm(&baseline, &stats)?;
            let eval = Evaluator {
                trace: &trace,
                baseline: replay(&trace, &base_spec)?.metrics(),
                weights: score.weights,
                model: score.energy_model,
                invalid_penalty,
            };
            let outcome = evolve(&Grammar::from_stats(&stats), &params, &eval)?;
            let table = outcome.best_spec.render_table()?;
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("best.json"), outcome.best_spec.to_json())?;
                fs::write(dir.join("history.csv"), outcome.history_csv())?;
                fs::write(dir.join("best.txt"), &table)?;
            }
            let text = match format {
                Format::Json => json(&outcome)?,
                Format::Csv => outcome.history_csv(),
                Format::Text => format!("best fitness {:.6}\n\n{table}", outcome.best_fitness),
            };
            out.write_all(text.as_bytes())?;
        }
        Command::Map { dmm, trace } => {
            let stats = match trace {
                Some(path) => trace_stats(&load_trace(&TraceArgs { trace: path, permissive: false })?),
                None if dmm.parse::<Preset>().is_ok() => bail!("presets are sized by a trace; pass --trace"),
                None => TraceStats::default(),
            };
            let (_, spec) = resolve_dmm(&dmm, &stats)?;
            out.write_all(spec.render_table()?.as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
