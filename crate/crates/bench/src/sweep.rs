//! Parameter sweeps over redundancy level and request interval.

use std::fmt;
use std::str::FromStr;

use fexgraph::ExecMode;
use serde::Serialize;

use crate::runner::{run_benchmark, BenchError, BenchOptions};
use crate::scenario::{Schedule, WorkloadScenario};
use crate::specgen::generate_spec;
use crate::trace::{generate_trace, to_log};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Redundancy,
    /// Request interval in seconds.
    Interval,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "redundancy" => Ok(SweepParam::Redundancy),
            "interval" => Ok(SweepParam::Interval),
            other => Err(format!(
                "unknown sweep parameter `{other}` (expected redundancy or interval)"
            )),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Redundancy => "redundancy",
            SweepParam::Interval => "interval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub naive_op_cost: u64,
    pub full_op_cost: u64,
    pub op_speedup: f64,
    pub wall_speedup: f64,
    pub reused_row_fraction: f64,
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_values(text: &str) -> Result<Vec<f64>, String> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| format!("bad number `{s}`: {e}"))
    };
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step.is_nan() || step <= 0.0 || stop < start {
                return Err("range needs start <= stop and a positive step".into());
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            // round away accumulated binary noise, e.g. 0.30000000000000004
            Ok((0..=n)
                .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                .collect())
        }
        [_] => text.split(',').map(num).collect(),
        _ => Err(format!(
            "cannot parse `{text}` as start:stop:step or a list"
        )),
    }
}

/// `base` with a new request interval and as many requests as needed to
/// cover the same stretch of trace.
fn same_span(base: &WorkloadScenario, interval_s: f64) -> WorkloadScenario {
    let mut s = base.clone().with_interval(interval_s);
    if let (
        Schedule::Fixed {
            interval_s: old,
            count: Some(n),
            ..
        },
        Schedule::Fixed { count, .. },
    ) = (&base.schedule, &mut s.schedule)
    {
        *count = Some(((*n as f64 * old) / interval_s).ceil().max(1.0) as usize);
    }
    s
}

fn ratio(base: f64, x: f64) -> f64 {
    if x > 0.0 {
        base / x
    } else {
        f64::INFINITY
    }
}

/// Runs naive and full modes once per value. The trace is generated once;
/// only the swept parameter changes between points. Costs and speedups
/// leave out the first, cold request.
pub fn run_sweep(
    base: &WorkloadScenario,
    param: SweepParam,
    values: &[f64],
    opts: &BenchOptions,
) -> Result<Vec<SweepPoint>, BenchError> {
    let log = to_log(&generate_trace(base))
        .expect("generated traces are ordered")
        .reader();
    values
        .iter()
        .map(|&v| {
            let scenario = match param {
                SweepParam::Redundancy => base.clone().with_redundancy(v),
                SweepParam::Interval => same_span(base, v),
            };
            let spec = generate_spec(&scenario);
            let r = run_benchmark(
                &spec,
                &log,
                &scenario.request_times(),
                &[ExecMode::Naive, ExecMode::Full],
                opts,
            )?;
            let (naive, full) = (&r.modes[0], &r.modes[1]);
            Ok(SweepPoint {
                value: v,
                naive_op_cost: naive.steady_op_cost,
                full_op_cost: full.steady_op_cost,
                op_speedup: ratio(naive.steady_op_cost as f64, full.steady_op_cost as f64),
                wall_speedup: ratio(naive.steady_wall_ns as f64, full.steady_wall_ns as f64),
                reused_row_fraction: full.reused_row_fraction.unwrap_or(0.0),
            })
        })
        .collect()
}

pub fn render_sweep(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut out = format!(
        "{:>10} {:>14} {:>14} {:>10} {:>10} {:>8}\n",
        param.to_string(),
        "naive_ops",
        "full_ops",
        "op_x",
        "wall_x",
        "reuse"
    );
    for p in points {
        out += &format!(
            "{:>10} {:>14} {:>14} {:>10.2} {:>10.2} {:>8.3}\n",
            p.value,
            p.naive_op_cost,
            p.full_op_cost,
            p.op_speedup,
            p.wall_speedup,
            p.reused_row_fraction
        );
    }
    out
}
