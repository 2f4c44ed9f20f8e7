//! `fexgraph` command-line tool: trace generation, graph dumps, benchmarks
//! and sweeps.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fexgraph::{
    dump_dot, dump_graph, identify_redundancy, optimize, parse_model_spec, serialize_model_spec,
    EventLog, ExecMode, ModelSpec,
};
use fexgraph_bench::report::{render_table, write_report};
use fexgraph_bench::scenario::Schedule;
use fexgraph_bench::sweep::{parse_values, render_sweep, run_sweep, SweepParam};
use fexgraph_bench::trace::{generate_trace, import_ndjson, write_trace};
use fexgraph_bench::{generate_spec, run_benchmark, BenchError, BenchOptions, WorkloadScenario};

#[derive(Parser)]
#[command(
    name = "fexgraph",
    version,
    about = "Feature extraction graph optimizer and benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace (and optionally its model spec).
    Gen {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generated model spec here.
        #[arg(long)]
        spec_out: Option<PathBuf>,
        /// Also write the scenario itself here, e.g. to edit a preset.
        #[arg(long)]
        scenario_out: Option<PathBuf>,
    },
    /// Dump the naive and optimized graphs (JSON for `.json` paths, DOT otherwise).
    Optimize {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        dump_before: Option<PathBuf>,
        #[arg(long)]
        dump_after: Option<PathBuf>,
    },
    /// Run a spec over a trace in several modes and report.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "naive,fused,cache,full", value_delimiter = ',')]
        modes: Vec<ExecMode>,
        /// Request interval, e.g. `60s`, `5m`, `500ms`.
        #[arg(long, default_value = "60s", value_parser = parse_duration_ms)]
        interval: i64,
        /// First request time in ms; defaults to one widest range after the trace start.
        #[arg(long)]
        start: Option<i64>,
        #[arg(long)]
        requests: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep redundancy level or request interval (seconds).
    Sweep {
        #[arg(long)]
        param: SweepParam,
        /// `start:stop:step` or a comma-separated list.
        #[arg(long)]
        values: String,
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Pairwise redundancy between a spec's features.
    Redundancy {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Import NDJSON events into a log file.
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct ScenarioArg {
    /// Scenario TOML file.
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    /// Built-in scenario: `video_app`, `heavy_user` or `vr_like`.
    #[arg(long, default_value = "video_app")]
    preset: String,
}

impl ScenarioArg {
    fn load(&self) -> Result<WorkloadScenario> {
        match &self.scenario {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(WorkloadScenario::from_toml(&text)?)
            }
            None => match self.preset.as_str() {
                "video_app" => Ok(WorkloadScenario::video_app()),
                "vr_like" => Ok(WorkloadScenario::vr_like()),
                "heavy_user" => Ok(WorkloadScenario::heavy_user()),
                other => {
                    bail!("unknown preset `{other}` (expected video_app, heavy_user or vr_like)")
                }
            },
        }
    }
}

fn parse_duration_ms(text: &str) -> Result<i64, String> {
    let t = text.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let value: f64 = num.parse().map_err(|_| format!("bad duration `{text}`"))?;
    let scale = match unit {
        "ms" => 1.0,
        "" | "s" => 1_000.0,
        "m" => 60_000.0,
        "h" => 3_600_000.0,
        _ => return Err(format!("unknown unit in `{text}` (use ms, s, m or h)")),
    };
    let ms = (value * scale).round();
    if ms < 1.0 {
        return Err("duration must be at least 1 ms".into());
    }
    Ok(ms as i64)
}

fn load_spec(path: &Path) -> Result<ModelSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_model_spec(&text)?)
}

fn write_graph(graph: &fexgraph::FeGraph, path: &Path) -> Result<()> {
    let text = if path.extension().is_some_and(|e| e == "json") {
        dump_graph(graph)
    } else {
        dump_dot(graph)
    };
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen {
            scenario,
            out,
            spec_out,
            scenario_out,
        } => {
            let scenario = scenario.load()?;
            if let Some(p) = scenario_out {
                fs::write(&p, scenario.to_toml())?;
            }
            let events = generate_trace(&scenario);
            write_trace(&events, &out)?;
            println!("wrote {} events to {}", events.len(), out.display());
            if let Some(p) = spec_out {
                fs::write(&p, serialize_model_spec(&generate_spec(&scenario)))?;
                println!("wrote spec to {}", p.display());
            }
        }
        Command::Optimize {
            spec,
            dump_before,
            dump_after,
        } => {
            let spec = load_spec(&spec)?;
            let naive = fexgraph::build_naive_graph(&fexgraph::normalize(&spec));
            let optimized = optimize(&naive);
            println!(
                "{} nodes before, {} after; {} fused event groups",
                naive.nodes.len(),
                optimized.graph().nodes.len(),
                optimized.groups().len()
            );
            if let Some(p) = dump_before {
                write_graph(&naive, &p)?;
            }
            if let Some(p) = dump_after {
                write_graph(optimized.graph(), &p)?;
            }
        }
        Command::Bench {
            spec,
            trace,
            modes,
            interval,
            start,
            requests,
            report,
        } => {
            let spec = load_spec(&spec)?;
            let log =
                EventLog::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
            let reader = log.reader();
            let Some((lo, hi)) = reader.time_bounds() else {
                bail!("trace {} is empty", trace.display())
            };
            let widest = spec
                .features
                .iter()
                .map(|f| f.time_range_ms())
                .max()
                .unwrap_or(0);
            let first = start.unwrap_or(if lo + widest <= hi {
                lo + widest
            } else {
                lo + interval
            });
            let times: Vec<i64> = (0..)
                .map(|i| first + i * interval)
                .take_while(|t| *t <= hi)
                .take(requests.unwrap_or(usize::MAX))
                .collect();
            if times.is_empty() {
                bail!("no request times fall inside the trace");
            }
            let r = match run_benchmark(&spec, &reader, &times, &modes, &BenchOptions::default()) {
                Err(BenchError::Equivalence(fail)) => bail!("equivalence failure: {fail}"),
                other => other?,
            };
            print!("{}", render_table(&r));
            if let Some(dir) = report {
                write_report(&r, &dir)?;
                println!("report written to {}", dir.display());
            }
        }
        Command::Sweep {
            param,
            values,
            scenario,
            report,
        } => {
            let mut base = scenario.load()?;
            let values = parse_values(&values).map_err(anyhow::Error::msg)?;
            if values.is_empty()
                || (param == SweepParam::Interval && values.iter().any(|v| v.is_nan() || *v <= 0.0))
            {
                bail!("sweep values must be non-empty, and intervals positive");
            }
            if scenario.scenario.is_none() {
                base = match param {
                    SweepParam::Redundancy => base.with_interval(10.0),
                    SweepParam::Interval => {
                        base.with_interval(values.iter().copied().fold(f64::INFINITY, f64::min))
                    }
                };
            }
            if let Schedule::Fixed {
                interval_s,
                count: count @ None,
                ..
            } = &mut base.schedule
            {
                // at least 30 requests at every point of an interval sweep
                let widest = values.iter().copied().fold(0.0, f64::max);
                *count = Some(match param {
                    SweepParam::Redundancy => 30,
                    SweepParam::Interval => (30.0 * widest / *interval_s).ceil().max(30.0) as usize,
                });
            }
            let points = run_sweep(&base, param, &values, &BenchOptions::default())?;
            print!("{}", render_sweep(param, &points));
            if let Some(dir) = report {
                fs::create_dir_all(&dir)?;
                fs::write(
                    dir.join("sweep.json"),
                    serde_json::to_string_pretty(&points)? + "\n",
                )?;
            }
        }
        Command::Redundancy { spec, csv } => {
            let r = identify_redundancy(&load_spec(&spec)?);
            print!("{}", r.summary_table());
            if let Some(p) = csv {
                r.write_csv(fs::File::create(&p)?)?;
            }
        }
        Command::Import { input, out } => {
            let f =
                fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let n = import_ndjson(BufReader::new(f), &out)?;
            println!("imported {n} events into {}", out.display());
        }
    }
    Ok(())
}
