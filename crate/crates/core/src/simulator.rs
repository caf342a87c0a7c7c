//! The replay loop: feeds trace events to a manager in order, using the
//! event index as the clock.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::freelist::Block;
use crate::manager::{Dmm, DmmError, DmmMap, DmmSpec, Placement};
use crate::metrics::{energy, fitness, normalized_report, EnergyModel, FitnessWeights, Metrics, MetricsError, NormalizedReport};
use crate::trace::{Trace, TraceEvent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid manager: {0}")]
    Compose(#[from] DmmError),
    #[error("aborted at event {event}: {source}")]
    Abort {
        event: usize,
        #[source]
        source: DmmError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("baseline {name:?} failed: {reason}")]
    Baseline { name: String, reason: String },
    #[error("baseline {0:?} is not among the candidates")]
    UnknownBaseline(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Malloc(Placement),
    /// The freed block, or `None` for a free of an id with nothing live.
    Free(Option<Block>),
}

/// Event-at-a-time replay, for callers that inspect the manager between
/// events.
pub struct Replayer<'t> {
    trace: &'t Trace,
    dmm: Dmm,
    next: usize,
}

impl<'t> Replayer<'t> {
    pub fn new(trace: &'t Trace, spec: &DmmSpec) -> Result<Self, SimError> {
        let mut dmm = Dmm::new(spec)?;
        dmm.reserve_ids(trace.id_count());
        Ok(Self { trace, dmm, next: 0 })
    }

    pub fn dmm(&self) -> &Dmm {
        &self.dmm
    }

    /// Index of the next event to replay.
    pub fn position(&self) -> usize {
        self.next
    }

    pub fn step(&mut self) -> Option<Result<Step, SimError>> {
        let event = *self.trace.events().get(self.next)?;
        let now = self.next;
        self.next += 1;
        let out = match event {
            TraceEvent::Malloc { id, size } => self.dmm.malloc(id, size, now as u64).map(Step::Malloc),
            TraceEvent::Free { id } => self.dmm.free(id).map(Step::Free),
        };
        Some(out.map_err(|source| SimError::Abort { event: now, source }))
    }

    pub fn run(mut self) -> Result<Dmm, SimError> {
        while let Some(r) = self.step() {
            r?;
        }
        Ok(self.dmm)
    }
}

/// Replays the whole trace and returns the final manager.
pub fn replay(trace: &Trace, spec: &DmmSpec) -> Result<Dmm, SimError> {
    Replayer::new(trace, spec)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SimulationResult {
    pub metrics: Metrics,
    pub energy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitness_vs_baseline: Option<f64>,
    pub final_snapshot: DmmMap,
}

pub fn simulate(
    trace: &Trace,
    spec: &DmmSpec,
    model: &EnergyModel,
    weights: &FitnessWeights,
    baseline: Option<&Metrics>,
) -> Result<SimulationResult, SimError> {
    let dmm = replay(trace, spec)?;
    let metrics = dmm.metrics();
    let fitness_vs_baseline = baseline.map(|b| fitness(&metrics, b, weights, model)).transpose()?;
    Ok(SimulationResult {
        metrics,
        energy: energy(&metrics, model),
        fitness_vs_baseline,
        final_snapshot: dmm.snapshot(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedSnapshot {
    pub name: String,
    pub snapshot: DmmMap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    #[serde(flatten)]
    pub report: NormalizedReport,
    pub snapshots: Vec<NamedSnapshot>,
}

/// Runs every candidate once and normalizes against the one named
/// `baseline`. A candidate that aborts is reported as an error row.
pub fn compare(
    trace: &Trace,
    specs: &[(String, DmmSpec)],
    baseline: &str,
    model: &EnergyModel,
    weights: &FitnessWeights,
    parallel: bool,
) -> Result<Comparison, SimError> {
    let base_idx = specs
        .iter()
        .position(|(n, _)| n == baseline)
        .ok_or_else(|| SimError::UnknownBaseline(baseline.to_owned()))?;
    let run = |(_, spec): &(String, DmmSpec)| replay(trace, spec).map(|d| (d.metrics(), d.snapshot()));
    let outcomes: Vec<Result<(Metrics, DmmMap), SimError>> = if parallel {
        specs.par_iter().map(run).collect()
    } else {
        specs.iter().map(run).collect()
    };
    let base = match &outcomes[base_idx] {
        Ok((m, _)) => *m,
        Err(e) => return Err(SimError::Baseline { name: baseline.to_owned(), reason: e.to_string() }),
    };
    let candidates: Vec<(String, Result<Metrics, String>)> = specs
        .iter()
        .zip(&outcomes)
        .map(|((name, _), o)| (name.clone(), o.as_ref().map(|(m, _)| *m).map_err(|e| e.to_string())))
        .collect();
    let report = normalized_report(baseline, &base, &candidates, model, weights)?;
    let snapshots = specs
        .iter()
        .zip(outcomes)
        .filter_map(|((name, _), o)| o.ok().map(|(_, snapshot)| NamedSnapshot { name: name.clone(), snapshot }))
        .collect();
    Ok(Comparison { report, snapshots })
}
