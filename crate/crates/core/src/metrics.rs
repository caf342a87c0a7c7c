//! Simulation counters, the derived energy and fitness figures, and
//! baseline-normalized reports.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Metrics {
    pub time_units: u64,
    pub mem_accesses: u64,
    pub malloc_count: u64,
    pub free_count: u64,
    pub split_count: u64,
    pub coalesce_count: u64,
    /// Objects still live when the trace ends.
    pub invalid_mallocs: u64,
    pub invalid_frees: u64,
    /// Final arena top: the peak bytes ever drawn.
    pub hwm_bytes: u64,
    /// Peak of rounding and header slack over the live set, plus unusable
    /// split remainders.
    pub internal_frag_bytes: u64,
    pub external_frag_events: u64,
    /// Free bytes summed over every arena draw that happened while at
    /// least the requested amount was free.
    pub external_frag_wasted_bytes: u64,
    pub farthest_fallbacks: u64,
}

impl Metrics {
    /// Combines accumulators from independent runs: counters add, peaks
    /// take the maximum.
    pub fn merge(&self, other: &Metrics) -> Metrics {
        Metrics {
            time_units: self.time_units + other.time_units,
            mem_accesses: self.mem_accesses + other.mem_accesses,
            malloc_count: self.malloc_count + other.malloc_count,
            free_count: self.free_count + other.free_count,
            split_count: self.split_count + other.split_count,
            coalesce_count: self.coalesce_count + other.coalesce_count,
            invalid_mallocs: self.invalid_mallocs + other.invalid_mallocs,
            invalid_frees: self.invalid_frees + other.invalid_frees,
            hwm_bytes: self.hwm_bytes.max(other.hwm_bytes),
            internal_frag_bytes: self.internal_frag_bytes.max(other.internal_frag_bytes),
            external_frag_events: self.external_frag_events + other.external_frag_events,
            external_frag_wasted_bytes: self.external_frag_wasted_bytes + other.external_frag_wasted_bytes,
            farthest_fallbacks: self.farthest_fallbacks + other.farthest_fallbacks,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("baseline {0} is zero")]
    ZeroBaseline(&'static str),
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
}

fn parse_triple(what: &'static str, s: &str) -> Result<[f64; 3], MetricsError> {
    let bad = |reason: String| MetricsError::Invalid { what, reason };
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad(format!("expected three comma-separated numbers, got {s:?}")));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse::<f64>().map_err(|e| bad(format!("{p:?}: {e}")))?;
    }
    Ok(out)
}

/// Linear energy model over accesses, time and footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnergyModel {
    pub e_access: f64,
    pub e_per_time_unit: f64,
    pub e_per_byte: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_access: 1.0, e_per_time_unit: 0.5, e_per_byte: 1e-4 }
    }
}

impl EnergyModel {
    pub fn new(e_access: f64, e_per_time_unit: f64, e_per_byte: f64) -> Result<Self, MetricsError> {
        for v in [e_access, e_per_time_unit, e_per_byte] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MetricsError::Invalid {
                    what: "energy model",
                    reason: format!("coefficient {v} must be finite and non-negative"),
                });
            }
        }
        Ok(Self { e_access, e_per_time_unit, e_per_byte })
    }
}

impl FromStr for EnergyModel {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let [a, t, b] = parse_triple("energy model", s)?;
        Self::new(a, t, b)
    }
}

/// Weights of time, memory and energy in the aggregate fitness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessWeights {
    pub time: f64,
    pub memory: f64,
    pub energy: f64,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        Self { time: 1.0 / 3.0, memory: 1.0 / 3.0, energy: 1.0 / 3.0 }
    }
}

impl FitnessWeights {
    /// Scales non-negative weights so they sum to one.
    pub fn new(time: f64, memory: f64, energy: f64) -> Result<Self, MetricsError> {
        let sum = time + memory + energy;
        let ok = [time, memory, energy].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !ok || !(sum > 0.0) {
            return Err(MetricsError::Invalid {
                what: "weights",
                reason: "weights must be non-negative with a positive sum".into(),
            });
        }
        Ok(Self { time: time / sum, memory: memory / sum, energy: energy / sum })
    }
}

impl FromStr for FitnessWeights {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let [t, m, e] = parse_triple("weights", s)?;
        Self::new(t, m, e)
    }
}

pub fn energy(m: &Metrics, model: &EnergyModel) -> f64 {
    model.e_access * m.mem_accesses as f64
        + model.e_per_time_unit * m.time_units as f64
        + model.e_per_byte * m.hwm_bytes as f64
}

/// Weighted sum of time, memory and energy, each relative to `baseline`.
/// Lower is better; the baseline itself scores 1.
pub fn fitness(
    m: &Metrics,
    baseline: &Metrics,
    weights: &FitnessWeights,
    model: &EnergyModel,
) -> Result<f64, MetricsError> {
    let eb = energy(baseline, model);
    if baseline.time_units == 0 {
        return Err(MetricsError::ZeroBaseline("time"));
    }
    if baseline.hwm_bytes == 0 {
        return Err(MetricsError::ZeroBaseline("memory"));
    }
    if !(eb > 0.0) {
        return Err(MetricsError::ZeroBaseline("energy"));
    }
    Ok(weights.time * (m.time_units as f64 / baseline.time_units as f64)
        + weights.memory * (m.hwm_bytes as f64 / baseline.hwm_bytes as f64)
        + weights.energy * (energy(m, model) / eb))
}

/// Percentage saved relative to the baseline value.
pub fn improvement_percent(candidate: f64, baseline: f64) -> f64 {
    (1.0 - candidate / baseline) * 100.0
}

/// A baseline-over-candidate ratio; greater than one is better. Division by
/// zero yields infinity, serialized as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct Ratio(pub f64);

impl Ratio {
    pub fn of(baseline: f64, candidate: f64) -> Ratio {
        if candidate == 0.0 {
            Ratio(if baseline == 0.0 { 1.0 } else { f64::INFINITY })
        } else {
            Ratio(baseline / candidate)
        }
    }

    pub fn is_infinite(&self) -> bool {
        self.0.is_infinite()
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_finite() {
            write!(f, "{:.6}", self.0)
        } else {
            f.write_str("inf")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Ratios {
    pub performance: Ratio,
    pub accesses: Ratio,
    pub memory: Ratio,
    pub energy: Ratio,
    /// `1 / fitness`, oriented like the other ratios.
    pub fitness: Ratio,
    /// Set when any ratio divided by zero.
    pub infinite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ReportRow {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Ratios>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct NormalizedReport {
    pub baseline: String,
    pub energy_model: EnergyModel,
    pub weights: FitnessWeights,
    pub rows: Vec<ReportRow>,
}

/// A named candidate outcome: metrics, or the reason the run aborted.
pub type Candidate = (String, Result<Metrics, String>);

pub fn normalized_report(
    baseline_name: &str,
    baseline: &Metrics,
    candidates: &[Candidate],
    model: &EnergyModel,
    weights: &FitnessWeights,
) -> Result<NormalizedReport, MetricsError> {
    let eb = energy(baseline, model);
    // validates the baseline once for every row
    fitness(baseline, baseline, weights, model)?;
    let rows = candidates
        .iter()
        .map(|(name, outcome)| match outcome {
            Ok(m) => {
                let e = energy(m, model);
                let f = fitness(m, baseline, weights, model).expect("baseline validated");
                let ratios = [
                    Ratio::of(baseline.time_units as f64, m.time_units as f64),
                    Ratio::of(baseline.mem_accesses as f64, m.mem_accesses as f64),
                    Ratio::of(baseline.hwm_bytes as f64, m.hwm_bytes as f64),
                    Ratio::of(eb, e),
                    Ratio::of(1.0, f),
                ];
                let infinite = ratios.iter().any(Ratio::is_infinite);
                let [performance, accesses, memory, energy, fitness] = ratios;
                ReportRow {
                    name: name.clone(),
                    metrics: Some(*m),
                    energy: Some(e),
                    fitness: Some(f),
                    ratios: Some(Ratios { performance, accesses, memory, energy, fitness, infinite }),
                    error: None,
                }
            }
            Err(msg) => ReportRow {
                name: name.clone(),
                metrics: None,
                energy: None,
                fitness: None,
                ratios: None,
                error: Some(msg.clone()),
            },
        })
        .collect();
    Ok(NormalizedReport {
        baseline: baseline_name.to_owned(),
        energy_model: *model,
        weights: *weights,
        rows,
    })
}

pub const CSV_COLUMNS: [&str; 12] = [
    "name",
    "time",
    "accesses",
    "hwm",
    "energy",
    "fitness",
    "perf_ratio",
    "accesses_ratio",
    "memory_ratio",
    "energy_ratio",
    "fitness_ratio",
    "error",
];

impl NormalizedReport {
    /// One row per candidate in [`CSV_COLUMNS`] order; floats use six
    /// decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for row in &self.rows {
            let mut rec: Vec<String> = vec![row.name.clone()];
            match (&row.metrics, &row.ratios) {
                (Some(m), Some(r)) => {
                    rec.push(m.time_units.to_string());
                    rec.push(m.mem_accesses.to_string());
                    rec.push(m.hwm_bytes.to_string());
                    rec.push(format!("{:.6}", row.energy.unwrap_or_default()));
                    rec.push(format!("{:.6}", row.fitness.unwrap_or_default()));
                    for ratio in [r.performance, r.accesses, r.memory, r.energy, r.fitness] {
                        rec.push(ratio.to_string());
                    }
                }
                _ => rec.extend(std::iter::repeat_n(String::new(), 10)),
            }
            rec.push(row.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Long-form `name,metric,ratio` rows, one per candidate and ratio.
    pub fn to_plot_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "metric", "ratio"]).expect("writing to memory");
        for row in &self.rows {
            let Some(r) = &row.ratios else { continue };
            for (metric, ratio) in [
                ("performance", r.performance),
                ("memory", r.memory),
                ("energy", r.energy),
                ("fitness", r.fitness),
            ] {
                w.write_record([row.name.as_str(), metric, &ratio.to_string()]).expect("writing to memory");
            }
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
    }

    /// Aligned table for terminals.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10}{:>14}{:>14}{:>12}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            "name", "time", "accesses", "hwm", "fitness", "perf", "memory", "energy", "global"
        );
        for row in &self.rows {
            match (&row.metrics, &row.ratios) {
                (Some(m), Some(r)) => out.push_str(&format!(
                    "{:<10}{:>14}{:>14}{:>12}{:>10.4}{:>10}{:>10}{:>10}{:>10}\n",
                    row.name,
                    m.time_units,
                    m.mem_accesses,
                    m.hwm_bytes,
                    row.fitness.unwrap_or_default(),
                    short(r.performance),
                    short(r.memory),
                    short(r.energy),
                    short(r.fitness),
                )),
                _ => out.push_str(&format!("{:<10}error: {}\n", row.name, row.error.as_deref().unwrap_or(""))),
            }
        }
        out.push_str(&format!("ratios are {} / candidate; greater than 1 is better\n", self.baseline));
        out
    }
}

fn short(r: Ratio) -> String {
    if r.is_infinite() {
        "inf".into()
    } else {
        format!("{:.4}", r.0)
    }
}
