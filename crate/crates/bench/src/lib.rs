//! Workload generation and benchmark harness for `fexgraph`.
//!
//! A [`scenario::WorkloadScenario`] describes event types, a feature-set
//! generator and a request schedule. From it the harness generates a trace
//! ([`trace`]) and a model spec ([`specgen`]), runs the spec in every
//! execution mode over the same requests ([`runner`]), insists that all modes
//! agree, and writes reports ([`report`]) and parameter sweeps ([`sweep`]).

pub mod report;
pub mod runner;
pub mod scenario;
pub mod specgen;
pub mod sweep;
pub mod trace;

pub use runner::{
    run_benchmark, run_naive_baseline, BenchError, BenchOptions, BenchReport, OpWeights,
};
pub use scenario::WorkloadScenario;
pub use specgen::generate_spec;
pub use trace::generate_trace;
