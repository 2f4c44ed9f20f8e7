//! Synthetic behavior traces and trace files.

use std::io::BufRead;
use std::path::Path;

use fexgraph::{EventLog, LogError};
use rand::distr::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Deserialize;
use serde_json::{json, Map};

use crate::scenario::{Arrival, EventTypeSpec, WorkloadScenario};

/// Distinct values per text attribute.
const TAG_VOCABULARY: u32 = 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub event_name: String,
    pub timestamp_ms: i64,
    pub payload: Vec<u8>,
}

fn payload(t: &EventTypeSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut obj = Map::new();
    for i in 0..t.numeric_attrs {
        if !rng.random_bool(t.missing_prob) {
            obj.insert(
                EventTypeSpec::numeric_attr(i),
                json!(rng.random_range(0..100_000) as f64 / 100.0),
            );
        }
    }
    for i in 0..t.text_attrs {
        if !rng.random_bool(t.missing_prob) {
            obj.insert(
                EventTypeSpec::text_attr(i),
                json!(format!("v{}", rng.random_range(0..TAG_VOCABULARY))),
            );
        }
    }
    let pad = rng.random_range(t.pad_bytes[0]..=t.pad_bytes[1]) as usize;
    if pad > 0 {
        let blob: String = (0..pad).map(|_| rng.sample(Alphanumeric) as char).collect();
        obj.insert("blob".into(), json!(blob));
    }
    let mut bytes = serde_json::to_vec(&obj).expect("payload serializes");
    if rng.random_bool(t.malformed_prob) {
        bytes.pop();
    }
    bytes
}

fn arrivals(t: &EventTypeSpec, duration_s: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = t.rate_per_s();
    let mut out = Vec::new();
    match t.arrival {
        Arrival::Poisson => {
            let gap = Exp::new(rate).expect("rate is positive");
            let mut at = gap.sample(rng);
            while at < duration_s {
                out.push(at);
                at += gap.sample(rng);
            }
        }
        Arrival::Uniform => {
            let step = 1.0 / rate;
            let mut at = rng.random_range(0.0..step);
            while at < duration_s {
                out.push(at);
                at += step;
            }
        }
    }
    out
}

/// Generates the scenario's trace, time-ordered.
///
/// Every event type draws from its own seeded stream, so adding a type does
/// not perturb the others.
pub fn generate_trace(scenario: &WorkloadScenario) -> Vec<TraceEvent> {
    let mut all: Vec<(i64, usize, usize, TraceEvent)> = Vec::new();
    for (ti, t) in scenario.event_types.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(ti as u64 + 1);
        for (seq, at) in arrivals(t, scenario.duration_s as f64, &mut rng)
            .into_iter()
            .enumerate()
        {
            let ts = scenario.start_ms + (at * 1000.0).floor() as i64;
            let event = TraceEvent {
                event_name: t.name.clone(),
                timestamp_ms: ts,
                payload: payload(t, &mut rng),
            };
            all.push((ts, ti, seq, event));
        }
    }
    all.sort_by_key(|(ts, ti, seq, _)| (*ts, *ti, *seq));
    all.into_iter().map(|(.., e)| e).collect()
}

/// Loads events into a fresh in-memory log.
pub fn to_log(events: &[TraceEvent]) -> Result<EventLog, LogError> {
    let mut log = EventLog::in_memory();
    log.set_validate_payloads(false);
    for e in events {
        log.append(&e.event_name, e.timestamp_ms, &e.payload)?;
    }
    Ok(log)
}

/// Writes events to a new log file, replacing any existing file.
pub fn write_trace(events: &[TraceEvent], path: &Path) -> Result<(), LogError> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    let mut log = EventLog::open(path)?;
    log.set_validate_payloads(false);
    for e in events {
        log.append(&e.event_name, e.timestamp_ms, &e.payload)?;
    }
    log.sync()
}

#[derive(Debug, thiserror::Error)]
pub enum ImportError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Log { line: usize, source: LogError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Deserialize)]
struct NdjsonEvent {
    timestamp_ms: i64,
    event_name: String,
    payload: serde_json::Value,
}

/// Appends NDJSON events (`{"timestamp_ms", "event_name", "payload"}`, one
/// per line, chronological) to the log at `out`. Returns the number of
/// events written.
pub fn import_ndjson<R: BufRead>(input: R, out: &Path) -> Result<usize, ImportError> {
    let mut log = EventLog::open(out).map_err(|source| ImportError::Log { line: 0, source })?;
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: NdjsonEvent = serde_json::from_str(&line).map_err(|source| ImportError::Json {
            line: i + 1,
            source,
        })?;
        let payload = serde_json::to_vec(&ev.payload).map_err(|source| ImportError::Json {
            line: i + 1,
            source,
        })?;
        log.append(&ev.event_name, ev.timestamp_ms, &payload)
            .map_err(|source| ImportError::Log {
                line: i + 1,
                source,
            })?;
        n += 1;
    }
    log.sync()
        .map_err(|source| ImportError::Log { line: 0, source })?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Schedule;
    use fexgraph::EventQuery;

    fn one_type(rate_per_10min: f64, seed: u64, duration_s: u64) -> WorkloadScenario {
        let mut s = WorkloadScenario::video_app();
        s.seed = seed;
        s.duration_s = duration_s;
        s.event_types.truncate(1);
        s.event_types[0].rate_per_10min = rate_per_10min;
        s.schedule = Schedule::Fixed {
            interval_s: 60.0,
            start_offset_s: 0.0,
            count: None,
        };
        s
    }

    #[test]
    fn poisson_counts_within_five_sigma() {
        let expected = 5.0f64 / 600.0 * 3600.0;
        let sigma = expected.sqrt();
        for seed in 0..50 {
            let n = generate_trace(&one_type(5.0, seed, 3600)).len() as f64;
            assert!((n - expected).abs() <= 5.0 * sigma, "seed {seed}: {n}");
        }
        // the mean over many seeds is much tighter
        let total: usize = (0..400)
            .map(|s| generate_trace(&one_type(5.0, s, 3600)).len())
            .sum();
        let mean = total as f64 / 400.0;
        assert!((mean - expected).abs() <= 5.0 * sigma / 20.0, "{mean}");
    }

    #[test]
    fn same_seed_same_file() {
        let s = WorkloadScenario::video_app();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.log"), dir.path().join("b.log"));
        write_trace(&generate_trace(&s), &a).unwrap();
        write_trace(&generate_trace(&s), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(generate_trace(&other), generate_trace(&s));
    }

    #[test]
    fn trace_is_sorted_and_schema_conformant() {
        let s = WorkloadScenario::video_app();
        let events = generate_trace(&s);
        assert!(events
            .windows(2)
            .all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
        for e in &events {
            let t = s
                .event_types
                .iter()
                .find(|t| t.name == e.event_name)
                .unwrap();
            let attrs = fexgraph::payload::decode(&e.payload).unwrap();
            for (k, v) in &attrs {
                match k.as_str() {
                    "blob" => {}
                    k if k.starts_with("num_") => assert!(v.as_number().is_some()),
                    k if k.starts_with("tag_") => {
                        assert!(matches!(v, fexgraph::AttrValue::Text(_)))
                    }
                    other => panic!("unexpected attribute {other}"),
                }
            }
            assert!(attrs.len() <= (t.numeric_attrs + t.text_attrs + 1) as usize);
        }
    }

    #[test]
    fn uniform_arrivals_are_evenly_spaced() {
        let mut s = one_type(600.0, 3, 600);
        s.event_types[0].arrival = Arrival::Uniform;
        let ts: Vec<i64> = generate_trace(&s).iter().map(|e| e.timestamp_ms).collect();
        assert!((599..=600).contains(&ts.len()));
        assert!(ts.windows(2).all(|w| (999..=1001).contains(&(w[1] - w[0]))));
    }

    #[test]
    fn video_app_rates_inside_observed_bands() {
        let bands = [
            ("short_video_play", 4.02, 6.15),
            ("live_stream_view", 1.50, 4.62),
            ("show_view", 2.72, 7.05),
            ("homepage_visit", 0.52, 2.40),
        ];
        let s = WorkloadScenario::video_app();
        for (name, lo, hi) in bands {
            let t = s.event_types.iter().find(|t| t.name == name).unwrap();
            assert!((lo..=hi).contains(&t.rate_per_10min), "{name}");
        }
        // the generated trace realizes them
        let mut long = s.clone();
        long.duration_s = 200 * 3600;
        let events = generate_trace(&long);
        for (name, lo, hi) in bands {
            let n = events.iter().filter(|e| e.event_name == name).count() as f64;
            let per_10min = n / (long.duration_s as f64 / 600.0);
            assert!((lo..=hi).contains(&per_10min), "{name}: {per_10min}");
        }
    }

    #[test]
    fn malformed_probability_is_honored() {
        let mut s = one_type(600.0, 9, 600);
        s.event_types[0].malformed_prob = 1.0;
        assert!(generate_trace(&s)
            .iter()
            .all(|e| fexgraph::payload::decode(&e.payload).is_err()));
    }

    #[test]
    fn ndjson_import() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("t.log");
        let input = "{\"timestamp_ms\":1,\"event_name\":\"a\",\"payload\":{\"x\":1}}\n\n{\"timestamp_ms\":2,\"event_name\":\"b\",\"payload\":{\"y\":\"z\"}}\n";
        assert_eq!(import_ndjson(input.as_bytes(), &out).unwrap(), 2);
        let log = EventLog::open(&out).unwrap();
        let rows = log
            .query("b", fexgraph::TimeWindow::new(0, 10).unwrap())
            .unwrap();
        assert_eq!(rows[0].payload, br#"{"y":"z"}"#);
        let bad = "{\"timestamp_ms\":0,\"event_name\":\"a\",\"payload\":{}}\n";
        assert!(matches!(
            import_ndjson(bad.as_bytes(), &out),
            Err(ImportError::Log { line: 1, .. })
        ));
    }
}
