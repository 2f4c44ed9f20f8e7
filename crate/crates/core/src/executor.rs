//! Online feature extraction.
//!
//! An [`Engine`] owns one model's compiled graphs and cache. Each request
//! fetches cached decoded rows, retrieves and decodes only the residual part
//! of each window, routes rows to features through the filter stage, computes
//! feature values, and finally refreshes the cache.
//!
//! Four execution modes share the same operators and instrumentation:
//!
//! | mode        | graph                   | cache |
//! |-------------|-------------------------|-------|
//! | `Naive`     | one chain per feature   | no    |
//! | `Fused`     | fused per-event chains  | no    |
//! | `CacheOnly` | one chain per feature   | yes   |
//! | `Full`      | fused per-event chains  | yes   |
//!
//! Feature values never depend on the mode or the cache contents.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{self, CacheState, CostMode, EventTypeProfile, TypeObservation};
use crate::event_log::{BehaviorEvent, EventQuery, LogError, LogReader, TimeWindow};
use crate::feature_spec::{normalize, CompFunc, CompKind, FeatureSpec, ModelSpec, SpecError};
use crate::graph::{build_naive_graph, FeGraph};
use crate::optimizer::{optimize, HierarchicalFilterPlan, OptimizedGraph};
use crate::payload::{self, AttrValue, AttributeMap, PayloadError};

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("filter input for `{event_name}` is not in chronological order")]
    UnsortedInput { event_name: String },
}

/// A value routed to a feature: one attribute, or a tuple of attributes for
/// multi-attribute CONCAT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Number(f64),
    Text(String),
    List(Vec<Value>),
}

impl From<&AttrValue> for Value {
    fn from(v: &AttrValue) -> Self {
        match v {
            AttrValue::Bool(b) => Value::Bool(*b),
            AttrValue::Number(n) => Value::Number(*n),
            AttrValue::Text(s) => Value::Text(s.clone()),
            AttrValue::NumberList(l) => Value::List(l.iter().map(|n| Value::Number(*n)).collect()),
            AttrValue::TextList(l) => {
                Value::List(l.iter().map(|s| Value::Text(s.clone())).collect())
            }
        }
    }
}

impl Value {
    fn kind_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Number(_) => "number",
            Value::Text(_) => "text",
            Value::List(_) => "list",
        }
    }
}

/// Computed value of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Number(f64),
    List(Vec<Value>),
    /// No qualifying input for AVG, MIN or MAX.
    Missing,
    /// The feature could not be computed, e.g. SUM over text.
    Error {
        error: String,
    },
}

impl FeatureValue {
    /// Equality with a relative tolerance on numbers.
    pub fn approx_eq(&self, other: &FeatureValue, rel_tol: f64) -> bool {
        match (self, other) {
            (FeatureValue::Number(a), FeatureValue::Number(b)) => {
                a == b || (a - b).abs() <= rel_tol * a.abs().max(b.abs())
            }
            _ => self == other,
        }
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serde_json::to_string(self).map_err(|_| fmt::Error)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ComputeError {
    #[error("{func} expects numbers, found {found}")]
    TypeMismatch { func: CompKind, found: &'static str },
}

/// Operation counters and per-stage wall time of one or more requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpStats {
    pub rows_retrieved: u64,
    pub decode_calls: u64,
    pub malformed_rows: u64,
    pub filter_threshold_comparisons: u64,
    pub compute_calls: u64,
    pub computed_values: u64,
    pub cache_hit_rows: u64,
    pub cache_miss_rows: u64,
    pub retrieve_ns: u64,
    pub decode_ns: u64,
    pub filter_ns: u64,
    pub compute_ns: u64,
    pub cache_ns: u64,
}

impl OpStats {
    pub fn add(&mut self, o: &OpStats) {
        self.rows_retrieved += o.rows_retrieved;
        self.decode_calls += o.decode_calls;
        self.malformed_rows += o.malformed_rows;
        self.filter_threshold_comparisons += o.filter_threshold_comparisons;
        self.compute_calls += o.compute_calls;
        self.computed_values += o.computed_values;
        self.cache_hit_rows += o.cache_hit_rows;
        self.cache_miss_rows += o.cache_miss_rows;
        self.retrieve_ns += o.retrieve_ns;
        self.decode_ns += o.decode_ns;
        self.filter_ns += o.filter_ns;
        self.compute_ns += o.compute_ns;
        self.cache_ns += o.cache_ns;
    }

    /// Wall time of all stages.
    pub fn total_ns(&self) -> u64 {
        self.retrieve_ns + self.decode_ns + self.filter_ns + self.compute_ns + self.cache_ns
    }

    /// Rows that went through decode or came out of the cache.
    pub fn rows_processed(&self) -> u64 {
        self.decode_calls + self.cache_hit_rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub model_id: String,
    pub request_time_ms: i64,
    pub values: BTreeMap<String, FeatureValue>,
    pub stats: OpStats,
}

/// An event whose payload has been decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedRow {
    pub event_id: u64,
    pub timestamp_ms: i64,
    pub attrs: Arc<AttributeMap>,
}

impl DecodedRow {
    pub fn position(&self) -> (i64, u64) {
        (self.timestamp_ms, self.event_id)
    }
}

/// A value on its way to a feature's COMPUTE, tagged with its row position.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedValue {
    pub timestamp_ms: i64,
    pub event_id: u64,
    pub value: Value,
}

/// Decodes one payload, counting the call.
pub fn decode(payload: &[u8], stats: &mut OpStats) -> Result<AttributeMap, PayloadError> {
    stats.decode_calls += 1;
    let r = payload::decode(payload);
    if r.is_err() {
        stats.malformed_rows += 1;
    }
    r
}

fn decode_events(events: Vec<BehaviorEvent>, stats: &mut OpStats) -> Vec<DecodedRow> {
    let t = Instant::now();
    let rows = events
        .into_iter()
        .filter_map(|e| {
            decode(&e.payload, stats).ok().map(|attrs| DecodedRow {
                event_id: e.event_id,
                timestamp_ms: e.timestamp_ms,
                attrs: Arc::new(attrs),
            })
        })
        .collect();
    stats.decode_ns += t.elapsed().as_nanos() as u64;
    rows
}

fn extract(attrs: &AttributeMap, attr_names: &[String]) -> Option<Value> {
    if let [name] = attr_names {
        return attrs.get(name).map(Value::from);
    }
    attr_names
        .iter()
        .map(|n| attrs.get(n).map(Value::from))
        .collect::<Option<Vec<_>>>()
        .map(Value::List)
}

fn routed(row: &DecodedRow, value: Value) -> RoutedValue {
    RoutedValue {
        timestamp_ms: row.timestamp_ms,
        event_id: row.event_id,
        value,
    }
}

/// Routes a chronologically ordered stream to every feature of `plan`.
///
/// Each row goes to the cumulative bucket of the smallest range that still
/// contains it (`age < range`). Ages never increase along the stream, so the
/// bucket pointer only moves forward and at most `rows + ranges` threshold
/// comparisons are made. Output is aligned with `plan.targets`.
pub fn hierarchical_filter(
    plan: &HierarchicalFilterPlan,
    rows: &[DecodedRow],
    request_time_ms: i64,
    stats: &mut OpStats,
) -> Result<Vec<Vec<RoutedValue>>, ExecError> {
    let thresholds: Vec<i64> = plan
        .ranges_desc
        .iter()
        .map(|r| i64::try_from(r.saturating_mul(1000)).unwrap_or(i64::MAX))
        .collect();
    let mut out = vec![Vec::new(); plan.targets.len()];
    let mut bucket: Option<usize> = None;
    let mut comparisons = 0u64;
    let mut prev = None;
    for row in rows {
        if prev.is_some_and(|p| row.position() < p) {
            return Err(ExecError::UnsortedInput {
                event_name: plan.event_name.clone(),
            });
        }
        prev = Some(row.position());
        let age = request_time_ms - row.timestamp_ms;
        loop {
            let next = bucket.map_or(0, |k| k + 1);
            if next >= thresholds.len() {
                break;
            }
            comparisons += 1;
            if age < thresholds[next] {
                bucket = Some(next);
            } else {
                break;
            }
        }
        let Some(k) = bucket else { continue };
        for (slot, target) in plan.cumulative_targets(k).iter().enumerate() {
            if let Some(v) = extract(&row.attrs, &target.attr_names) {
                out[slot].push(routed(row, v));
            }
        }
    }
    stats.filter_threshold_comparisons += comparisons;
    Ok(out)
}

/// Single-feature filter: one age test per row.
pub fn select_filter(
    time_range_s: u64,
    attr_names: &[String],
    rows: &[DecodedRow],
    request_time_ms: i64,
    stats: &mut OpStats,
) -> Vec<RoutedValue> {
    let range_ms = i64::try_from(time_range_s.saturating_mul(1000)).unwrap_or(i64::MAX);
    stats.filter_threshold_comparisons += rows.len() as u64;
    rows.iter()
        .filter(|r| request_time_ms - r.timestamp_ms < range_ms)
        .filter_map(|r| extract(&r.attrs, attr_names).map(|v| routed(r, v)))
        .collect()
}

fn numbers(func: CompKind, values: &[Value]) -> Result<Vec<f64>, ComputeError> {
    values
        .iter()
        .map(|v| match v {
            Value::Number(n) => Ok(*n),
            other => Err(ComputeError::TypeMismatch {
                func,
                found: other.kind_name(),
            }),
        })
        .collect()
}

/// Summarizes a feature's chronologically ordered inputs.
pub fn compute(func: CompFunc, values: &[Value]) -> Result<FeatureValue, ComputeError> {
    let kind = func.kind;
    Ok(match kind {
        CompKind::Count => FeatureValue::Number(values.len() as f64),
        CompKind::DistinctCount => {
            let distinct: BTreeSet<String> = values
                .iter()
                .map(|v| serde_json::to_string(v).expect("values always serialize"))
                .collect();
            FeatureValue::Number(distinct.len() as f64)
        }
        CompKind::Concat => {
            let keep = func
                .concat_limit
                .map_or(values.len(), |n| values.len().min(n as usize));
            FeatureValue::List(values[values.len() - keep..].to_vec())
        }
        CompKind::Sum => FeatureValue::Number(numbers(kind, values)?.iter().sum()),
        CompKind::Avg | CompKind::Min | CompKind::Max => {
            let nums = numbers(kind, values)?;
            if nums.is_empty() {
                return Ok(FeatureValue::Missing);
            }
            FeatureValue::Number(match kind {
                CompKind::Avg => nums.iter().sum::<f64>() / nums.len() as f64,
                CompKind::Min => nums.iter().copied().fold(f64::INFINITY, f64::min),
                _ => nums.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        }
    })
}

fn compute_feature(func: CompFunc, inputs: &[RoutedValue], stats: &mut OpStats) -> FeatureValue {
    stats.compute_calls += 1;
    stats.computed_values += inputs.len() as u64;
    let values: Vec<Value> = inputs.iter().map(|r| r.value.clone()).collect();
    compute(func, &values).unwrap_or_else(|e| FeatureValue::Error {
        error: e.to_string(),
    })
}

/// Merges per-event streams by `(timestamp, event_id)`.
fn merge_routed(mut parts: Vec<Vec<RoutedValue>>) -> Vec<RoutedValue> {
    if parts.len() == 1 {
        return parts.pop().unwrap();
    }
    let mut all: Vec<RoutedValue> = parts.into_iter().flatten().collect();
    all.sort_by_key(|r| (r.timestamp_ms, r.event_id));
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Naive,
    Fused,
    CacheOnly,
    Full,
}

impl ExecMode {
    pub const ALL: [ExecMode; 4] = [
        ExecMode::Naive,
        ExecMode::Fused,
        ExecMode::CacheOnly,
        ExecMode::Full,
    ];

    pub fn fused(self) -> bool {
        matches!(self, ExecMode::Fused | ExecMode::Full)
    }

    pub fn cached(self) -> bool {
        matches!(self, ExecMode::CacheOnly | ExecMode::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExecMode::Naive => "naive",
            ExecMode::Fused => "fused",
            ExecMode::CacheOnly => "cache",
            ExecMode::Full => "full",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(ExecMode::Naive),
            "fused" => Ok(ExecMode::Fused),
            "cache" | "cache_only" => Ok(ExecMode::CacheOnly),
            "full" => Ok(ExecMode::Full),
            other => Err(format!(
                "unknown mode `{other}` (expected naive, fused, cache or full)"
            )),
        }
    }
}

/// Rows of one event type for one window, plus what the cache needs to
/// absorb them afterwards.
struct Fetched {
    rows: Vec<DecodedRow>,
    observation: TypeObservation,
}

/// One model's extraction engine.
#[derive(Debug)]
pub struct Engine {
    spec: ModelSpec,
    naive: FeGraph,
    optimized: OptimizedGraph,
    mode: ExecMode,
    cache: CacheState,
    profiles: BTreeMap<String, EventTypeProfile>,
    union_attrs: HashMap<String, Vec<String>>,
    max_range_s: HashMap<String, u64>,
}

impl Engine {
    /// Validates and normalizes `spec`, builds both graphs, and profiles
    /// event types from synthetic rows in abstract-cost mode.
    pub fn new(spec: &ModelSpec, mode: ExecMode) -> Result<Self, SpecError> {
        spec.validate()?;
        let spec = normalize(spec);
        let naive = build_naive_graph(&spec);
        let optimized = optimize(&naive);
        let union_attrs = optimized
            .groups()
            .iter()
            .map(|g| (g.event_name.clone(), g.plan.union_attrs.clone()))
            .collect();
        let max_range_s = optimized
            .groups()
            .iter()
            .map(|g| (g.event_name.clone(), g.time_range_s))
            .collect();
        let profiles = cache::profile_event_types(&spec, None, CostMode::Abstract)
            .into_iter()
            .map(|p| (p.event_name.clone(), p))
            .collect();
        Ok(Self {
            cache: CacheState::new(spec.cache_budget_bytes),
            spec,
            naive,
            optimized,
            mode,
            profiles,
            union_attrs,
            max_range_s,
        })
    }

    /// Re-profiles event types from rows in `log`.
    pub fn profile(&mut self, log: &LogReader, mode: CostMode) {
        self.profiles = cache::profile_event_types(&self.spec, Some(log), mode)
            .into_iter()
            .map(|p| (p.event_name.clone(), p))
            .collect();
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn naive_graph(&self) -> &FeGraph {
        &self.naive
    }

    pub fn optimized_graph(&self) -> &OptimizedGraph {
        &self.optimized
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn cache(&self) -> &CacheState {
        &self.cache
    }

    pub fn profiles(&self) -> impl Iterator<Item = &EventTypeProfile> {
        self.profiles.values()
    }

    /// Applies a new memory budget, evicting whole event types if needed.
    pub fn set_cache_budget(&mut self, budget_bytes: u64) {
        self.cache.evict_to_budget(budget_bytes);
    }

    /// Runs one extraction request.
    pub fn execute<L: EventQuery>(
        &mut self,
        log: &L,
        request_time_ms: i64,
    ) -> Result<ExtractionResult, ExecError> {
        let mut stats = OpStats::default();
        if self.mode.cached() {
            self.cache.observe_request(request_time_ms);
        }
        let (values, observations) = if self.mode.fused() {
            self.run_fused(log, request_time_ms, &mut stats)?
        } else {
            self.run_per_feature(log, request_time_ms, &mut stats)?
        };
        if self.mode.cached() {
            let t = Instant::now();
            self.refresh_cache(observations, request_time_ms);
            stats.cache_ns += t.elapsed().as_nanos() as u64;
        }
        Ok(ExtractionResult {
            model_id: self.spec.model_id.clone(),
            request_time_ms,
            values,
            stats,
        })
    }

    /// Rows of `event_name` in `(start_ms, request_time_ms]`: cache hits
    /// first, then decoded residual rows from the log.
    fn fetch<L: EventQuery>(
        &self,
        log: &L,
        event_name: &str,
        start_ms: i64,
        request_time_ms: i64,
        stats: &mut OpStats,
    ) -> Result<Fetched, ExecError> {
        let mut rows = Vec::new();
        let mut after = (start_ms, u64::MAX);
        let mut from_cache = false;
        if self.mode.cached() {
            let t = Instant::now();
            if let Some(entry) = self.cache.entry(event_name).filter(|e| e.covers(start_ms)) {
                let first = entry
                    .rows
                    .partition_point(|r| r.row.timestamp_ms <= start_ms);
                let last = entry
                    .rows
                    .partition_point(|r| r.row.timestamp_ms <= request_time_ms);
                rows.extend(
                    entry.rows[first..last.max(first)]
                        .iter()
                        .map(|r| r.row.clone()),
                );
                stats.cache_hit_rows += rows.len() as u64;
                after = after.max(entry.position);
                from_cache = true;
            }
            stats.cache_ns += t.elapsed().as_nanos() as u64;
        }
        let t = Instant::now();
        let events = log.query_since(event_name, after.0, after.1, request_time_ms)?;
        stats.retrieve_ns += t.elapsed().as_nanos() as u64;
        stats.rows_retrieved += events.len() as u64;
        if self.mode.cached() {
            stats.cache_miss_rows += events.len() as u64;
        }
        let position = events.last().map_or(after, |e| e.position().max(after));
        let fresh = decode_events(events, stats);
        rows.extend(fresh.iter().cloned());
        Ok(Fetched {
            observation: TypeObservation {
                window_start_ms: start_ms,
                position,
                fresh,
                rows_in_window: rows.len() as u64,
                extends_entry: from_cache,
            },
            rows,
        })
    }

    #[allow(clippy::type_complexity)]
    fn run_fused<L: EventQuery>(
        &self,
        log: &L,
        request_time_ms: i64,
        stats: &mut OpStats,
    ) -> Result<
        (
            BTreeMap<String, FeatureValue>,
            Vec<(String, TypeObservation)>,
        ),
        ExecError,
    > {
        let mut routed = Vec::with_capacity(self.optimized.groups().len());
        let mut observations = Vec::new();
        for group in self.optimized.groups() {
            let window = TimeWindow::trailing(request_time_ms, group.time_range_s)?;
            let fetched = self.fetch(
                log,
                &group.event_name,
                window.start_ms(),
                request_time_ms,
                stats,
            )?;
            let t = Instant::now();
            let out = hierarchical_filter(&group.plan, &fetched.rows, request_time_ms, stats)?;
            stats.filter_ns += t.elapsed().as_nanos() as u64;
            routed.push(out);
            observations.push((group.event_name.clone(), fetched.observation));
        }
        let t = Instant::now();
        let mut values = BTreeMap::new();
        for route in self.optimized.features() {
            let parts = route
                .inputs
                .iter()
                .map(|&(g, slot)| std::mem::take(&mut routed[g][slot]))
                .collect();
            let inputs = merge_routed(parts);
            values.insert(
                route.feature_id.clone(),
                compute_feature(route.comp_func, &inputs, stats),
            );
        }
        stats.compute_ns += t.elapsed().as_nanos() as u64;
        Ok((values, observations))
    }

    #[allow(clippy::type_complexity)]
    fn run_per_feature<L: EventQuery>(
        &self,
        log: &L,
        request_time_ms: i64,
        stats: &mut OpStats,
    ) -> Result<
        (
            BTreeMap<String, FeatureValue>,
            Vec<(String, TypeObservation)>,
        ),
        ExecError,
    > {
        let mut values = BTreeMap::new();
        let mut observations: BTreeMap<String, TypeObservation> = BTreeMap::new();
        for f in &self.spec.features {
            let inputs = self.run_chain(log, f, request_time_ms, stats, &mut observations)?;
            let t = Instant::now();
            values.insert(
                f.feature_id.clone(),
                compute_feature(f.comp_func, &inputs, stats),
            );
            stats.compute_ns += t.elapsed().as_nanos() as u64;
        }
        Ok((values, observations.into_iter().collect()))
    }

    /// RETRIEVE, DECODE and FILTER for a single feature.
    fn run_chain<L: EventQuery>(
        &self,
        log: &L,
        f: &FeatureSpec,
        request_time_ms: i64,
        stats: &mut OpStats,
        observations: &mut BTreeMap<String, TypeObservation>,
    ) -> Result<Vec<RoutedValue>, ExecError> {
        let window = TimeWindow::trailing(request_time_ms, f.time_range_s)?;
        let mut rows = Vec::new();
        for e in &f.event_names {
            let fetched = self.fetch(log, e, window.start_ms(), request_time_ms, stats)?;
            // The widest feature's fetch covers the whole window the cache keeps.
            if self.mode.cached() && self.max_range_s[e] == f.time_range_s {
                observations.entry(e.clone()).or_insert(fetched.observation);
            }
            rows.extend(fetched.rows);
        }
        if f.event_names.len() > 1 {
            rows.sort_by_key(DecodedRow::position);
        }
        let t = Instant::now();
        let out = select_filter(f.time_range_s, &f.attr_names, &rows, request_time_ms, stats);
        stats.filter_ns += t.elapsed().as_nanos() as u64;
        Ok(out)
    }

    fn refresh_cache(
        &mut self,
        observations: Vec<(String, TypeObservation)>,
        request_time_ms: i64,
    ) {
        for (event_name, obs) in &observations {
            if let Some(p) = self.profiles.get_mut(event_name) {
                p.rate_per_s = obs.rows_in_window as f64 / p.max_time_range_s as f64;
            }
        }
        let profiles: Vec<EventTypeProfile> = self.profiles.values().cloned().collect();
        let plan = cache::plan_cache_greedy(
            &profiles,
            self.cache.interval_estimate_ms(),
            self.cache.budget_bytes(),
        );
        self.cache
            .update_after_execution(&plan, observations, &self.union_attrs, request_time_ms);
    }
}
