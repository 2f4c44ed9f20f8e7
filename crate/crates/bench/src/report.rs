//! Human-readable and machine-readable benchmark reports.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::runner::BenchReport;

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

/// Fixed-width summary table.
pub fn render_table(r: &BenchReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "model {}: {} features over {} event types, {} requests, equivalence {}",
        r.model_id,
        r.features,
        r.event_types,
        r.modes.first().map_or(0, |m| m.requests),
        r.equivalence
    );
    let _ = writeln!(
        out,
        "{:<6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10} {:>8} {:>9} {:>9}",
        "mode",
        "retrieved",
        "decoded",
        "filter_cmp",
        "cache_hits",
        "op_cost",
        "wall_ms",
        "reuse",
        "op_x",
        "wall_x"
    );
    for (m, s) in r.modes.iter().zip(&r.speedups) {
        let reuse = m
            .reused_row_fraction
            .map_or("-".to_string(), |f| format!("{f:.3}"));
        let _ = writeln!(
            out,
            "{:<6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10.2} {:>8} {:>9.2} {:>9.2}",
            m.mode.as_str(),
            m.totals.rows_retrieved,
            m.totals.decode_calls,
            m.totals.filter_threshold_comparisons,
            m.totals.cache_hit_rows,
            m.op_cost,
            ms(m.wall_ns),
            reuse,
            s.op_count,
            s.wall_clock
        );
    }
    if r.inference_stub_ms > 0.0 {
        let _ = writeln!(
            out,
            "end-to-end speedups include a simulated inference stub of {} ms per request:",
            r.inference_stub_ms
        );
        for s in &r.speedups {
            let _ = writeln!(out, "  {:<6} {:.2}x", s.mode.as_str(), s.end_to_end);
        }
    }
    out
}

/// Writes `summary.txt`, `summary.json` and `requests.jsonl` into `dir`.
pub fn write_report(r: &BenchReport, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.txt"), render_table(r))?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(r)? + "\n",
    )?;
    let mut jsonl = BufWriter::new(fs::File::create(dir.join("requests.jsonl"))?);
    for rec in &r.records {
        serde_json::to_writer(&mut jsonl, rec)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()
}
