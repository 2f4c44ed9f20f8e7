//! Feature extraction engine for user-behavior features.
//!
//! Declarative feature definitions ([`feature_spec`]) compile into an
//! extraction graph ([`graph`]) that is optimized once per model
//! ([`optimizer`]): per-event partitioning, cross-feature fusion, and
//! hierarchical filtering. Requests run over an append-only event log
//! ([`event_log`]) through the [`executor`], which reuses decoded rows between
//! requests under a memory budget chosen by the [`cache`] evaluator.

pub mod cache;
pub mod event_log;
pub mod executor;
pub mod feature_spec;
pub mod graph;
pub mod optimizer;
pub mod payload;

pub use cache::{dp_oracle, plan_cache_greedy, CachePlan, CacheState, CostMode, EventTypeProfile};
pub use event_log::{BehaviorEvent, EventLog, EventQuery, LogError, LogReader, TimeWindow};
pub use executor::{Engine, ExecError, ExecMode, ExtractionResult, FeatureValue, OpStats, Value};
pub use feature_spec::{
    normalize, parse_model_spec, serialize_model_spec, CompFunc, CompKind, FeatureSpec, ModelSpec,
    SpecError,
};
pub use graph::{
    build_naive_graph, identify_redundancy, FeGraph, RedundancyLevel, RedundancyReport,
};
pub use optimizer::{
    dump_dot, dump_graph, load_graph, optimize, HierarchicalFilterPlan, OptimizedGraph,
};
pub use payload::{AttrValue, AttributeMap};
