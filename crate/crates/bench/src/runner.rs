//! Runs one spec over one trace in several execution modes, checks that all
//! modes agree, and aggregates their counters.

use std::time::Instant;

use fexgraph::{
    CompKind, CostMode, Engine, ExecError, ExecMode, ExtractionResult, FeatureValue, LogReader,
    ModelSpec, OpStats,
};
use serde::Serialize;

/// Relative tolerance for SUM and AVG across modes.
pub const FLOAT_TOLERANCE: f64 = 1e-9;

/// Abstract per-operation costs used for op-count speedups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OpWeights {
    pub retrieve: u64,
    pub decode: u64,
    pub filter_comparison: u64,
    pub compute_call: u64,
}

impl Default for OpWeights {
    fn default() -> Self {
        Self {
            retrieve: 8,
            decode: 7,
            filter_comparison: 1,
            compute_call: 1,
        }
    }
}

impl OpWeights {
    pub fn cost(&self, s: &OpStats) -> u64 {
        self.retrieve * s.rows_retrieved
            + self.decode * s.decode_calls
            + self.filter_comparison * s.filter_threshold_comparisons
            + self.compute_call * s.compute_calls
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub cost_mode: CostMode,
    pub weights: OpWeights,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            cost_mode: CostMode::from_env(),
            weights: OpWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceFailure {
    pub request_index: usize,
    pub request_time_ms: i64,
    pub feature_id: String,
    pub reference_mode: ExecMode,
    pub mode: ExecMode,
    pub expected: FeatureValue,
    pub got: FeatureValue,
}

impl std::fmt::Display for EquivalenceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "feature `{}` differs at request {} (t = {} ms)\n  {:>5}: {}\n  {:>5}: {}",
            self.feature_id,
            self.request_index,
            self.request_time_ms,
            self.reference_mode,
            self.expected,
            self.mode,
            self.got
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("equivalence failure: {0}")]
    Equivalence(Box<EquivalenceFailure>),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Spec(#[from] fexgraph::SpecError),
    #[error("no execution modes selected")]
    NoModes,
}

/// One request of one mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub mode: ExecMode,
    pub request_index: usize,
    pub request_time_ms: i64,
    pub wall_ns: u64,
    pub op_cost: u64,
    pub cache_bytes: u64,
    pub cache_evictions: u64,
    pub stats: OpStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: ExecMode,
    pub requests: usize,
    /// Counters over all requests.
    pub totals: OpStats,
    /// Counters over all requests but the first.
    pub steady: OpStats,
    pub wall_ns: u64,
    pub steady_wall_ns: u64,
    pub op_cost: u64,
    pub steady_op_cost: u64,
    /// Fraction of in-window rows served from the cache after the first
    /// request; absent without a cache.
    pub reused_row_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Speedup {
    pub mode: ExecMode,
    pub op_count: f64,
    pub wall_clock: f64,
    /// Wall clock with the simulated inference stub added to every request.
    pub end_to_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub model_id: String,
    pub features: usize,
    pub event_types: usize,
    pub inference_stub_ms: f64,
    pub equivalence: &'static str,
    pub modes: Vec<ModeSummary>,
    /// Relative to the first mode.
    pub speedups: Vec<Speedup>,
    #[serde(skip)]
    pub records: Vec<RequestRecord>,
}

impl BenchReport {
    pub fn mode(&self, mode: ExecMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn speedup(&self, mode: ExecMode) -> Option<&Speedup> {
        self.speedups.iter().find(|s| s.mode == mode)
    }
}

fn same_value(kind: CompKind, a: &FeatureValue, b: &FeatureValue) -> bool {
    match kind {
        CompKind::Sum | CompKind::Avg => a.approx_eq(b, FLOAT_TOLERANCE),
        _ => a == b,
    }
}

/// First feature where `got` differs from `reference`.
pub fn compare_results(
    spec: &ModelSpec,
    request_index: usize,
    reference: (ExecMode, &ExtractionResult),
    other: (ExecMode, &ExtractionResult),
) -> Option<EquivalenceFailure> {
    spec.features.iter().find_map(|f| {
        let missing = FeatureValue::Error {
            error: "feature absent from result".into(),
        };
        let expected = reference.1.values.get(&f.feature_id).unwrap_or(&missing);
        let got = other.1.values.get(&f.feature_id).unwrap_or(&missing);
        (!same_value(f.comp_func.kind, expected, got)).then(|| EquivalenceFailure {
            request_index,
            request_time_ms: reference.1.request_time_ms,
            feature_id: f.feature_id.clone(),
            reference_mode: reference.0,
            mode: other.0,
            expected: expected.clone(),
            got: got.clone(),
        })
    })
}

/// Every feature extracted independently for every request.
pub fn run_naive_baseline(
    spec: &ModelSpec,
    log: &LogReader,
    schedule: &[i64],
) -> Result<Vec<ExtractionResult>, BenchError> {
    let mut engine = Engine::new(spec, ExecMode::Naive)?;
    schedule
        .iter()
        .map(|&t| engine.execute(log, t).map_err(BenchError::from))
        .collect()
}

fn summarize(mode: ExecMode, records: &[RequestRecord], weights: &OpWeights) -> ModeSummary {
    let mut totals = OpStats::default();
    let mut steady = OpStats::default();
    let (mut wall, mut steady_wall) = (0, 0);
    for (i, r) in records.iter().enumerate() {
        totals.add(&r.stats);
        wall += r.wall_ns;
        if i > 0 {
            steady.add(&r.stats);
            steady_wall += r.wall_ns;
        }
    }
    let reused = mode.cached().then(|| {
        let seen = steady.cache_hit_rows + steady.cache_miss_rows;
        if seen == 0 {
            0.0
        } else {
            steady.cache_hit_rows as f64 / seen as f64
        }
    });
    ModeSummary {
        mode,
        requests: records.len(),
        totals,
        steady,
        wall_ns: wall,
        steady_wall_ns: steady_wall,
        op_cost: weights.cost(&totals),
        steady_op_cost: weights.cost(&steady),
        reused_row_fraction: reused,
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// Runs `modes` in order over the same log and schedule. Values of every mode
/// are checked against the first mode after each request.
pub fn run_benchmark(
    spec: &ModelSpec,
    log: &LogReader,
    schedule: &[i64],
    modes: &[ExecMode],
    opts: &BenchOptions,
) -> Result<BenchReport, BenchError> {
    let (&reference_mode, _) = modes.split_first().ok_or(BenchError::NoModes)?;
    let mut reference: Vec<ExtractionResult> = Vec::new();
    let mut summaries = Vec::new();
    let mut records = Vec::new();
    let mut checked_spec = None;
    for &mode in modes {
        let mut engine = Engine::new(spec, mode)?;
        if mode.cached() {
            engine.profile(log, opts.cost_mode);
        }
        let spec = checked_spec.get_or_insert_with(|| engine.spec().clone());
        let mut mode_records = Vec::with_capacity(schedule.len());
        for (i, &t) in schedule.iter().enumerate() {
            let start = Instant::now();
            let result = engine.execute(log, t)?;
            let wall_ns = start.elapsed().as_nanos() as u64;
            if mode == reference_mode {
                reference.push(result.clone());
            } else if let Some(fail) =
                compare_results(spec, i, (reference_mode, &reference[i]), (mode, &result))
            {
                return Err(BenchError::Equivalence(Box::new(fail)));
            }
            mode_records.push(RequestRecord {
                mode,
                request_index: i,
                request_time_ms: t,
                wall_ns,
                op_cost: opts.weights.cost(&result.stats),
                cache_bytes: engine.cache().accounted_bytes(),
                cache_evictions: engine.cache().evictions(),
                stats: result.stats,
            });
        }
        summaries.push(summarize(mode, &mode_records, &opts.weights));
        records.extend(mode_records);
    }
    let stub_ns = spec.inference_stub_ms * 1e6 * schedule.len() as f64;
    let base = &summaries[0];
    let speedups = summaries
        .iter()
        .map(|m| Speedup {
            mode: m.mode,
            op_count: ratio(base.op_cost as f64, m.op_cost as f64),
            wall_clock: ratio(base.wall_ns as f64, m.wall_ns as f64),
            end_to_end: ratio(base.wall_ns as f64 + stub_ns, m.wall_ns as f64 + stub_ns),
        })
        .collect();
    Ok(BenchReport {
        model_id: spec.model_id.clone(),
        features: spec.features.len(),
        event_types: spec.event_names().len(),
        inference_stub_ms: spec.inference_stub_ms,
        equivalence: "PASS",
        modes: summaries,
        speedups,
        records,
    })
}
