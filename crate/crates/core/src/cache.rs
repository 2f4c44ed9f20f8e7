//! Cross-request caching of decoded event rows.
//!
//! Consecutive requests look at heavily overlapping windows. Caching the
//! decoded, pruned rows of an event type saves retrieving and decoding the
//! overlap again, at the price of memory. Whether a type is worth caching is a
//! 0/1 knapsack over event types:
//!
//! ```text
//! U(e) = rate(e) * max(0, range(e) - interval) * cost(e)
//! C(e) = rate(e) * range(e) * size(e)
//! U/C  = overlap/range * cost/size
//! ```
//!
//! The first factor of `U/C` depends on how often the model runs, the second
//! is a static property of the type measured once by profiling. Types are
//! cached or evicted as a whole.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::event_log::{EventQuery, LogReader, TimeWindow};
use crate::executor::DecodedRow;
use crate::feature_spec::ModelSpec;
use crate::payload::{self, AttrValue, AttributeMap};

/// Fixed per-row bookkeeping charged on top of the encoded attributes.
pub const ROW_OVERHEAD_BYTES: u64 = 32;
/// Rows sampled per event type when profiling.
pub const PROFILE_SAMPLE_ROWS: usize = 100;
/// Cost granularity of [`dp_oracle`].
pub const DP_UNIT_BYTES: u64 = 64;
/// Weight of the newest gap in the request-interval estimate.
pub const INTERVAL_ALPHA: f64 = 0.3;
/// Interval assumed before two requests have been seen.
pub const DEFAULT_INTERVAL_MS: f64 = 60_000.0;

const DP_MAX_ITEMS: usize = 64;
const DP_MAX_UNITS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CacheError {
    #[error(
        "knapsack instance too large for the exact solver: {items} items, {units} budget units"
    )]
    InstanceTooLarge { items: usize, units: u64 },
}

/// How profiling measures per-row retrieve and decode cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostMode {
    /// Measured wall time on this machine.
    #[default]
    WallClock,
    /// `200 + 3 * payload_bytes`, independent of the host.
    Abstract,
}

impl CostMode {
    /// Reads `FEXGRAPH_COST_MODE` (`wallclock` or `abstract`).
    pub fn from_env() -> Self {
        match std::env::var("FEXGRAPH_COST_MODE").as_deref() {
            Ok("abstract") => CostMode::Abstract,
            _ => CostMode::WallClock,
        }
    }

    fn abstract_cost(payload_bytes: usize) -> f64 {
        200.0 + 3.0 * payload_bytes as f64
    }
}

/// Offline measurements of one event type plus its current event rate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventTypeProfile {
    pub event_name: String,
    pub cost_opt_per_event_ns: f64,
    pub size_per_event_bytes: f64,
    pub max_time_range_s: u64,
    pub static_ratio: f64,
    /// Observed events per second, refreshed at planning time.
    pub rate_per_s: f64,
}

impl EventTypeProfile {
    pub fn new(
        event_name: &str,
        cost_ns: f64,
        size_bytes: f64,
        max_time_range_s: u64,
        rate_per_s: f64,
    ) -> Self {
        Self {
            event_name: event_name.to_string(),
            cost_opt_per_event_ns: cost_ns,
            size_per_event_bytes: size_bytes,
            max_time_range_s,
            static_ratio: cost_ns / size_bytes,
            rate_per_s,
        }
    }
}

/// Profiles every event type referenced by `spec`.
///
/// Samples up to [`PROFILE_SAMPLE_ROWS`] recent rows per type from `log`.
/// Types without rows, or profiled without a log, use one synthetic row that
/// carries every needed attribute.
pub fn profile_event_types(
    spec: &ModelSpec,
    log: Option<&LogReader>,
    mode: CostMode,
) -> Vec<EventTypeProfile> {
    let mut needs: BTreeMap<&str, (BTreeSet<&String>, u64)> = BTreeMap::new();
    for f in &spec.features {
        for e in &f.event_names {
            let slot = needs.entry(e).or_default();
            slot.0.extend(&f.attr_names);
            slot.1 = slot.1.max(f.time_range_s);
        }
    }
    let log_end = log.and_then(|l| l.time_bounds()).map(|(_, end)| end);
    needs
        .into_iter()
        .map(|(event_name, (attrs, range_s))| {
            let mut payloads: Vec<Vec<u8>> = log
                .map(|l| l.sample(event_name, PROFILE_SAMPLE_ROWS))
                .unwrap_or_default()
                .into_iter()
                .map(|e| e.payload)
                .collect();
            if payloads.is_empty() {
                let synthetic: AttributeMap = attrs
                    .iter()
                    .map(|a| ((*a).clone(), AttrValue::Number(0.0)))
                    .collect();
                payloads.push(payload::encode(&synthetic));
            }
            let cost = match mode {
                CostMode::Abstract => {
                    payloads
                        .iter()
                        .map(|p| CostMode::abstract_cost(p.len()))
                        .sum::<f64>()
                        / payloads.len() as f64
                }
                CostMode::WallClock => {
                    let t = Instant::now();
                    for p in &payloads {
                        let copy = std::hint::black_box(p.clone());
                        let _ = std::hint::black_box(payload::decode(&copy));
                    }
                    (t.elapsed().as_nanos() as f64 / payloads.len() as f64).max(1.0)
                }
            };
            let sizes: Vec<u64> = payloads
                .iter()
                .filter_map(|p| payload::decode(p).ok())
                .map(|m| payload::encode(&payload::prune(&m, attrs.iter().copied())).len() as u64)
                .collect();
            let size = if sizes.is_empty() {
                ROW_OVERHEAD_BYTES as f64
            } else {
                sizes.iter().sum::<u64>() as f64 / sizes.len() as f64 + ROW_OVERHEAD_BYTES as f64
            };
            let in_window = match (log, log_end) {
                (Some(l), Some(end)) => TimeWindow::trailing(end, range_s)
                    .and_then(|w| l.query(event_name, w))
                    .map_or(0, |rows| rows.len()),
                _ => 0,
            };
            let rate = in_window.max(1) as f64 / range_s as f64;
            EventTypeProfile::new(event_name, cost, size, range_s, rate)
        })
        .collect()
}

/// Retrieve and decode time saved by caching the type, per request.
pub fn utility(profile: &EventTypeProfile, interval_ms: f64) -> f64 {
    let overlap_s = (profile.max_time_range_s as f64 * 1000.0 - interval_ms).max(0.0) / 1000.0;
    profile.rate_per_s * overlap_s * profile.cost_opt_per_event_ns
}

/// Bytes the type's cached window occupies.
pub fn cache_cost(profile: &EventTypeProfile) -> f64 {
    profile.rate_per_s * profile.max_time_range_s as f64 * profile.size_per_event_bytes
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnapsackItem {
    pub name: String,
    pub utility: f64,
    pub cost_bytes: u64,
}

impl KnapsackItem {
    pub fn new(name: impl Into<String>, utility: f64, cost_bytes: u64) -> Self {
        Self {
            name: name.into(),
            utility,
            cost_bytes,
        }
    }

    pub fn from_profile(profile: &EventTypeProfile, interval_ms: f64) -> Self {
        Self::new(
            profile.event_name.clone(),
            utility(profile, interval_ms),
            cache_cost(profile).ceil() as u64,
        )
    }

    /// Utility per byte; items that cost nothing rank first.
    pub fn ratio(&self) -> f64 {
        if self.cost_bytes == 0 {
            f64::INFINITY
        } else {
            self.utility / self.cost_bytes as f64
        }
    }
}

/// Event types chosen for caching.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CachePlan {
    pub keep: BTreeSet<String>,
    pub predicted_utility: f64,
    pub predicted_cost_bytes: u64,
    /// Utility/cost of every candidate, kept or not.
    pub ratios: BTreeMap<String, f64>,
}

impl CachePlan {
    fn from_chosen(items: &[KnapsackItem], chosen: impl IntoIterator<Item = usize>) -> Self {
        let mut plan = CachePlan {
            ratios: items.iter().map(|i| (i.name.clone(), i.ratio())).collect(),
            ..CachePlan::default()
        };
        for idx in chosen {
            let it = &items[idx];
            plan.keep.insert(it.name.clone());
            plan.predicted_utility += it.utility;
            plan.predicted_cost_bytes += it.cost_bytes;
        }
        plan
    }
}

/// Ratio-greedy with the best-single-item fallback, a 2-approximation.
///
/// Items are visited by utility/cost descending, ties by name; each is added
/// if it still fits. Items without positive utility are never chosen.
pub fn greedy_knapsack(items: &[KnapsackItem], budget_bytes: u64) -> CachePlan {
    let mut order: Vec<usize> = (0..items.len())
        .filter(|&i| items[i].utility > 0.0)
        .collect();
    order.sort_by(|&a, &b| {
        items[b]
            .ratio()
            .total_cmp(&items[a].ratio())
            .then_with(|| items[a].name.cmp(&items[b].name))
    });
    let mut bundle = Vec::new();
    let (mut used, mut bundle_utility) = (0u64, 0.0);
    for &i in &order {
        if items[i].cost_bytes <= budget_bytes - used {
            used += items[i].cost_bytes;
            bundle_utility += items[i].utility;
            bundle.push(i);
        }
    }
    let best_single = order
        .iter()
        .copied()
        .filter(|&i| items[i].cost_bytes <= budget_bytes)
        .fold(None::<usize>, |best, i| match best {
            Some(b) if items[b].utility > items[i].utility => Some(b),
            Some(b) if items[b].utility == items[i].utility && items[b].name <= items[i].name => {
                Some(b)
            }
            _ => Some(i),
        });
    match best_single {
        Some(s) if items[s].utility > bundle_utility => CachePlan::from_chosen(items, [s]),
        _ => CachePlan::from_chosen(items, bundle),
    }
}

/// Exact 0/1 knapsack with costs rounded up to `unit_bytes`.
pub fn dp_knapsack(
    items: &[KnapsackItem],
    budget_bytes: u64,
    unit_bytes: u64,
) -> Result<CachePlan, CacheError> {
    let unit = unit_bytes.max(1);
    let cap = budget_bytes / unit;
    if items.len() > DP_MAX_ITEMS || cap > DP_MAX_UNITS {
        return Err(CacheError::InstanceTooLarge {
            items: items.len(),
            units: cap,
        });
    }
    let cap = cap as usize;
    let width = cap + 1;
    let mut best = vec![0.0f64; width];
    let mut took = vec![false; items.len() * width];
    for (i, it) in items.iter().enumerate() {
        if it.utility <= 0.0 {
            continue;
        }
        let w = it.cost_bytes.div_ceil(unit);
        if w > cap as u64 {
            continue;
        }
        let w = w as usize;
        for c in (w..=cap).rev() {
            let with = best[c - w] + it.utility;
            if with > best[c] {
                best[c] = with;
                took[i * width + c] = true;
            }
        }
    }
    let mut chosen = Vec::new();
    let mut c = cap;
    for i in (0..items.len()).rev() {
        if took[i * width + c] {
            chosen.push(i);
            c -= items[i].cost_bytes.div_ceil(unit) as usize;
        }
    }
    chosen.reverse();
    Ok(CachePlan::from_chosen(items, chosen))
}

fn items_of(profiles: &[EventTypeProfile], interval_ms: f64) -> Vec<KnapsackItem> {
    profiles
        .iter()
        .map(|p| KnapsackItem::from_profile(p, interval_ms))
        .collect()
}

/// Greedy cache plan over event-type profiles.
pub fn plan_cache_greedy(
    profiles: &[EventTypeProfile],
    interval_ms: f64,
    budget_bytes: u64,
) -> CachePlan {
    greedy_knapsack(&items_of(profiles, interval_ms), budget_bytes)
}

/// Exact cache plan, for small instances and tests.
pub fn dp_oracle(
    profiles: &[EventTypeProfile],
    interval_ms: f64,
    budget_bytes: u64,
) -> Result<CachePlan, CacheError> {
    dp_knapsack(
        &items_of(profiles, interval_ms),
        budget_bytes,
        DP_UNIT_BYTES,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedRow {
    pub row: DecodedRow,
    pub size_bytes: u64,
}

impl CachedRow {
    fn new(row: &DecodedRow, keep: &[String]) -> Self {
        let attrs = payload::prune(&row.attrs, keep);
        let size_bytes = payload::encode(&attrs).len() as u64 + ROW_OVERHEAD_BYTES;
        Self {
            row: DecodedRow {
                event_id: row.event_id,
                timestamp_ms: row.timestamp_ms,
                attrs: Arc::new(attrs),
            },
            size_bytes,
        }
    }
}

/// Cached rows of one event type.
///
/// Holds every decodable row of the type in `(covered_from_ms, position]`,
/// ascending by position.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub rows: Vec<CachedRow>,
    pub covered_from_ms: i64,
    pub position: (i64, u64),
    pub bytes: u64,
    pub ratio: f64,
}

impl CacheEntry {
    /// Whether the entry is complete for windows starting at `start_ms`.
    pub fn covers(&self, start_ms: i64) -> bool {
        self.covered_from_ms <= start_ms
    }
}

/// What one request saw of an event type.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeObservation {
    /// Start of the type's widest window at this request.
    pub window_start_ms: i64,
    /// Last position read from the log.
    pub position: (i64, u64),
    /// Rows decoded from the log in this request.
    pub fresh: Vec<DecodedRow>,
    /// All rows in the window, cached and fresh.
    pub rows_in_window: u64,
    /// Whether `fresh` continues the existing cache entry.
    pub extends_entry: bool,
}

/// One line of the cache report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheSummaryRow {
    pub event_name: String,
    pub ratio: f64,
    pub kept: bool,
    pub rows: usize,
    pub bytes: u64,
}

/// Per-engine cache of decoded rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState {
    entries: BTreeMap<String, CacheEntry>,
    accounted_bytes: u64,
    budget_bytes: u64,
    last_request_ms: Option<i64>,
    interval_ms: Option<f64>,
    last_ratios: BTreeMap<String, f64>,
    evictions: u64,
}

impl CacheState {
    pub fn new(budget_bytes: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            accounted_bytes: 0,
            budget_bytes,
            last_request_ms: None,
            interval_ms: None,
            last_ratios: BTreeMap::new(),
            evictions: 0,
        }
    }

    pub fn entry(&self, event_name: &str) -> Option<&CacheEntry> {
        self.entries.get(event_name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &CacheEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn accounted_bytes(&self) -> u64 {
        self.accounted_bytes
    }

    pub fn budget_bytes(&self) -> u64 {
        self.budget_bytes
    }

    /// Whole event types evicted so far because of the budget.
    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    /// Current estimate of the gap between requests.
    pub fn interval_estimate_ms(&self) -> f64 {
        self.interval_ms.unwrap_or(DEFAULT_INTERVAL_MS)
    }

    /// Feeds a request time into the interval estimate. Repeated times are
    /// ignored; a time earlier than the last one restarts the gap.
    pub fn observe_request(&mut self, request_time_ms: i64) {
        if let Some(last) = self.last_request_ms {
            if request_time_ms == last {
                return;
            }
            if request_time_ms > last {
                let gap = (request_time_ms - last) as f64;
                self.interval_ms = Some(match self.interval_ms {
                    None => gap,
                    Some(est) => INTERVAL_ALPHA * gap + (1.0 - INTERVAL_ALPHA) * est,
                });
            }
        }
        self.last_request_ms = Some(request_time_ms);
    }

    /// Applies a plan after a request: drops types outside it, merges fresh
    /// rows of kept types, expires rows before each window, and evicts
    /// whole types if the actual size exceeds the budget.
    pub fn update_after_execution(
        &mut self,
        plan: &CachePlan,
        observations: Vec<(String, TypeObservation)>,
        union_attrs: &HashMap<String, Vec<String>>,
        request_time_ms: i64,
    ) {
        self.observe_request(request_time_ms);
        self.last_ratios = plan.ratios.clone();
        self.entries.retain(|name, _| plan.keep.contains(name));
        for (name, obs) in observations {
            if !plan.keep.contains(&name) {
                continue;
            }
            let keep_attrs = union_attrs.get(&name).map(Vec::as_slice).unwrap_or(&[]);
            let mut entry = match self.entries.remove(&name) {
                Some(e) if obs.extends_entry => e,
                _ => CacheEntry {
                    rows: Vec::new(),
                    covered_from_ms: obs.window_start_ms,
                    position: obs.position,
                    bytes: 0,
                    ratio: 0.0,
                },
            };
            let expired = entry
                .rows
                .partition_point(|r| r.row.timestamp_ms <= obs.window_start_ms);
            entry.rows.drain(..expired);
            entry
                .rows
                .extend(obs.fresh.iter().map(|r| CachedRow::new(r, keep_attrs)));
            entry.covered_from_ms = obs.window_start_ms;
            entry.position = obs.position;
            entry.bytes = entry.rows.iter().map(|r| r.size_bytes).sum();
            entry.ratio = plan.ratios.get(&name).copied().unwrap_or(0.0);
            self.entries.insert(name, entry);
        }
        self.accounted_bytes = self.entries.values().map(|e| e.bytes).sum();
        if self.accounted_bytes > self.budget_bytes {
            self.evict_to_budget(self.budget_bytes);
        }
    }

    /// Sets a new budget and evicts whole types, lowest utility/cost first,
    /// until the cache fits.
    pub fn evict_to_budget(&mut self, budget_bytes: u64) {
        self.budget_bytes = budget_bytes;
        while self.accounted_bytes > self.budget_bytes {
            let victim = self
                .entries
                .iter()
                .min_by(|a, b| a.1.ratio.total_cmp(&b.1.ratio).then_with(|| b.0.cmp(a.0)))
                .map(|(k, _)| k.clone())
                .expect("non-zero usage implies an entry");
            let gone = self.entries.remove(&victim).expect("victim exists");
            self.accounted_bytes -= gone.bytes;
            self.evictions += 1;
        }
    }

    /// One row per event type seen by the last plan, plus any cached type.
    pub fn summary_rows(&self) -> Vec<CacheSummaryRow> {
        let names: BTreeSet<&String> = self.last_ratios.keys().chain(self.entries.keys()).collect();
        names
            .into_iter()
            .map(|name| {
                let entry = self.entries.get(name);
                CacheSummaryRow {
                    event_name: name.clone(),
                    ratio: entry
                        .map(|e| e.ratio)
                        .or_else(|| self.last_ratios.get(name).copied())
                        .unwrap_or(0.0),
                    kept: entry.is_some(),
                    rows: entry.map_or(0, |e| e.rows.len()),
                    bytes: entry.map_or(0, |e| e.bytes),
                }
            })
            .collect()
    }
}
