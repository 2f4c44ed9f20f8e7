//! Workload scenarios: event-type mix, feature-set generator settings and
//! request schedule, loadable from TOML.
//!
//! ```toml
//! seed = 7
//! duration_s = 7200
//!
//! [[event_types]]
//! name = "short_video_play"
//! rate_per_10min = 5.0
//! numeric_attrs = 3
//! text_attrs = 2
//! pad_bytes = [32, 256]
//!
//! [features]
//! num_features = 20
//! redundancy = 0.5
//! ranges_s = [60, 300, 3600]
//!
//! [schedule]
//! kind = "fixed"
//! interval_s = 60
//! start_offset_s = 3600
//! ```

use serde::{Deserialize, Serialize};

pub const DEFAULT_START_MS: i64 = 1_700_000_000_000;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    /// Exponential gaps at the configured rate.
    #[default]
    Poisson,
    /// Evenly spaced events with a random phase.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTypeSpec {
    pub name: String,
    /// Mean events per 10 minutes.
    pub rate_per_10min: f64,
    #[serde(default = "one")]
    pub numeric_attrs: u32,
    #[serde(default)]
    pub text_attrs: u32,
    /// Inclusive range of opaque padding bytes added to every payload.
    #[serde(default)]
    pub pad_bytes: [u32; 2],
    /// Chance that any one attribute is left out of a payload.
    #[serde(default)]
    pub missing_prob: f64,
    /// Chance that a payload is not decodable at all.
    #[serde(default)]
    pub malformed_prob: f64,
    #[serde(default)]
    pub arrival: Arrival,
}

fn one() -> u32 {
    1
}

impl EventTypeSpec {
    pub fn rate_per_s(&self) -> f64 {
        self.rate_per_10min / 600.0
    }

    pub fn numeric_attr(i: u32) -> String {
        format!("num_{i}")
    }

    pub fn text_attr(i: u32) -> String {
        format!("tag_{i}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGenParams {
    pub num_features: usize,
    /// Use only the first N event types; all when absent.
    #[serde(default)]
    pub num_event_types: Option<usize>,
    /// Probability that a feature reuses its event type's shared range.
    pub redundancy: f64,
    pub ranges_s: Vec<u64>,
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    #[serde(default = "default_concat_limit")]
    pub concat_limit: u32,
    #[serde(default = "default_budget")]
    pub cache_budget_bytes: u64,
    #[serde(default)]
    pub inference_stub_ms: f64,
}

fn default_zipf() -> f64 {
    1.1
}

fn default_concat_limit() -> u32 {
    10
}

fn default_budget() -> u64 {
    8 << 20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// One request every `interval_s`, from `start_offset_s` after the trace
    /// start until its end or `count` requests.
    Fixed {
        interval_s: f64,
        #[serde(default)]
        start_offset_s: f64,
        #[serde(default)]
        count: Option<usize>,
    },
    /// Bursts of `burst_len` requests `interval_s` apart, separated by `gap_s`.
    Burst {
        interval_s: f64,
        burst_len: usize,
        gap_s: f64,
        #[serde(default)]
        start_offset_s: f64,
        #[serde(default)]
        count: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadScenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub duration_s: u64,
    #[serde(default = "default_start")]
    pub start_ms: i64,
    pub event_types: Vec<EventTypeSpec>,
    pub features: FeatureGenParams,
    pub schedule: Schedule,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_start() -> i64 {
    DEFAULT_START_MS
}

impl WorkloadScenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios always serialize")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.event_types.is_empty() {
            return bad("no event types".into());
        }
        if self.duration_s == 0 {
            return bad("duration_s must be positive".into());
        }
        for (i, t) in self.event_types.iter().enumerate() {
            if t.name.is_empty() || self.event_types[..i].iter().any(|o| o.name == t.name) {
                return bad(format!(
                    "event type names must be non-empty and unique (`{}`)",
                    t.name
                ));
            }
            if !(t.rate_per_10min.is_finite() && t.rate_per_10min > 0.0) {
                return bad(format!("rate of `{}` must be positive", t.name));
            }
            if t.pad_bytes[0] > t.pad_bytes[1] {
                return bad(format!("pad_bytes of `{}` must be [min, max]", t.name));
            }
            for p in [t.missing_prob, t.malformed_prob] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("probabilities of `{}` must lie in [0, 1]", t.name));
                }
            }
            if t.numeric_attrs + t.text_attrs == 0 {
                return bad(format!("`{}` has no attributes", t.name));
            }
        }
        let f = &self.features;
        if !(0.0..=1.0).contains(&f.redundancy) {
            return bad("redundancy must lie in [0, 1]".into());
        }
        if f.ranges_s.is_empty() || f.ranges_s.contains(&0) {
            return bad("ranges_s must be non-empty and positive".into());
        }
        if f.num_event_types
            .is_some_and(|n| n == 0 || n > self.event_types.len())
        {
            return bad("num_event_types out of range".into());
        }
        if f.num_features == 0 || f.concat_limit == 0 {
            return bad("num_features and concat_limit must be positive".into());
        }
        if f.zipf_exponent.is_nan() || f.zipf_exponent <= 0.0 {
            return bad("zipf_exponent must be positive".into());
        }
        let (interval, offset) = match &self.schedule {
            Schedule::Fixed {
                interval_s,
                start_offset_s,
                ..
            } => (*interval_s, *start_offset_s),
            Schedule::Burst {
                interval_s,
                start_offset_s,
                burst_len,
                gap_s,
                ..
            } => {
                if *burst_len == 0 || gap_s.is_nan() || *gap_s < 0.0 {
                    return bad("burst_len must be positive and gap_s non-negative".into());
                }
                (*interval_s, *start_offset_s)
            }
        };
        if interval.is_nan() || interval <= 0.0 || offset.is_nan() || offset < 0.0 {
            return bad("schedule interval must be positive and offset non-negative".into());
        }
        Ok(())
    }

    /// Event types the feature generator draws from.
    pub fn active_types(&self) -> &[EventTypeSpec] {
        let n = self
            .features
            .num_event_types
            .unwrap_or(self.event_types.len());
        &self.event_types[..n]
    }

    pub fn end_ms(&self) -> i64 {
        self.start_ms + self.duration_s as i64 * 1000
    }

    /// Request times in milliseconds.
    pub fn request_times(&self) -> Vec<i64> {
        let end = self.end_ms();
        let to_ms = |s: f64| (s * 1000.0).round() as i64;
        let mut out = Vec::new();
        match &self.schedule {
            Schedule::Fixed {
                interval_s,
                start_offset_s,
                count,
            } => {
                let mut t = self.start_ms + to_ms(*start_offset_s);
                while t <= end && count.is_none_or(|c| out.len() < c) {
                    out.push(t);
                    t += to_ms(*interval_s).max(1);
                }
            }
            Schedule::Burst {
                interval_s,
                burst_len,
                gap_s,
                start_offset_s,
                count,
            } => {
                let mut t = self.start_ms + to_ms(*start_offset_s);
                let mut in_burst = 0;
                while t <= end && count.is_none_or(|c| out.len() < c) {
                    out.push(t);
                    in_burst += 1;
                    if in_burst == *burst_len {
                        in_burst = 0;
                        t += to_ms(*gap_s).max(1);
                    } else {
                        t += to_ms(*interval_s).max(1);
                    }
                }
            }
        }
        out
    }

    /// Replaces the request interval, keeping everything else.
    pub fn with_interval(mut self, seconds: f64) -> Self {
        match &mut self.schedule {
            Schedule::Fixed { interval_s, .. } | Schedule::Burst { interval_s, .. } => {
                *interval_s = seconds
            }
        }
        self
    }

    pub fn with_redundancy(mut self, level: f64) -> Self {
        self.features.redundancy = level;
        self
    }

    /// Four video-app behaviors at mid-band rates.
    pub fn video_app() -> Self {
        let t = |name: &str, rate: f64, n: u32, s: u32, pad: [u32; 2]| EventTypeSpec {
            name: name.into(),
            rate_per_10min: rate,
            numeric_attrs: n,
            text_attrs: s,
            pad_bytes: pad,
            missing_prob: 0.02,
            malformed_prob: 0.0,
            arrival: Arrival::Poisson,
        };
        Self {
            name: "video_app".into(),
            seed: 7,
            duration_s: 4 * 3600,
            start_ms: DEFAULT_START_MS,
            event_types: vec![
                t("short_video_play", 5.0, 3, 2, [64, 256]),
                t("live_stream_view", 3.0, 2, 2, [64, 256]),
                t("show_view", 4.5, 3, 1, [64, 256]),
                t("homepage_visit", 1.5, 1, 2, [32, 128]),
            ],
            features: FeatureGenParams {
                num_features: 24,
                num_event_types: None,
                redundancy: 0.5,
                ranges_s: vec![60, 300, 900, 3600],
                zipf_exponent: 1.1,
                concat_limit: 10,
                cache_budget_bytes: 8 << 20,
                inference_stub_ms: 0.0,
            },
            schedule: Schedule::Fixed {
                interval_s: 60.0,
                start_offset_s: 3600.0,
                count: None,
            },
        }
    }

    /// The video-app mix at the activity of a very active user, about 56
    /// behaviors per 10 minutes.
    pub fn heavy_user() -> Self {
        let mut s = Self::video_app();
        s.name = "heavy_user".into();
        for t in &mut s.event_types {
            t.rate_per_10min *= 4.0;
        }
        s
    }

    /// A production-sized model: 134 features over 24 behavior types with
    /// ranges up to a day.
    pub fn vr_like() -> Self {
        const TYPES: [(&str, f64); 24] = [
            ("short_video_play", 5.0),
            ("show_view", 4.5),
            ("live_stream_view", 3.0),
            ("video_like", 2.4),
            ("homepage_visit", 1.5),
            ("video_share", 0.6),
            ("comment_post", 0.9),
            ("comment_like", 1.2),
            ("follow", 0.3),
            ("search_query", 1.0),
            ("search_click", 1.4),
            ("feed_refresh", 3.5),
            ("ad_impression", 4.0),
            ("ad_click", 0.4),
            ("product_view", 1.1),
            ("cart_add", 0.2),
            ("gift_send", 0.25),
            ("danmaku_post", 0.8),
            ("playlist_add", 0.35),
            ("download", 0.15),
            ("notification_open", 0.7),
            ("profile_edit", 0.1),
            ("music_play", 2.0),
            ("settings_change", 0.12),
        ];
        let event_types = TYPES
            .iter()
            .enumerate()
            .map(|(i, (name, rate))| EventTypeSpec {
                name: name.to_string(),
                rate_per_10min: *rate,
                numeric_attrs: 2 + (i % 3) as u32,
                text_attrs: 1 + (i % 2) as u32,
                pad_bytes: [128, 512],
                missing_prob: 0.02,
                malformed_prob: 0.001,
                arrival: Arrival::Poisson,
            })
            .collect();
        Self {
            name: "vr_like".into(),
            seed: 134,
            duration_s: 86_400 + 3_600,
            start_ms: DEFAULT_START_MS,
            event_types,
            features: FeatureGenParams {
                num_features: 134,
                num_event_types: None,
                redundancy: 0.6,
                ranges_s: vec![60, 300, 3600, 86_400],
                zipf_exponent: 1.1,
                concat_limit: 10,
                cache_budget_bytes: 16 << 20,
                inference_stub_ms: 0.0,
            },
            schedule: Schedule::Fixed {
                interval_s: 60.0,
                start_offset_s: 86_400.0,
                count: Some(60),
            },
        }
    }

    /// One busy event type with a single 300 s feature range.
    pub fn steady_single_range(seed: u64) -> Self {
        Self {
            name: "steady".into(),
            seed,
            duration_s: 1_800,
            start_ms: DEFAULT_START_MS,
            event_types: vec![EventTypeSpec {
                name: "tick".into(),
                rate_per_10min: 600.0,
                numeric_attrs: 2,
                text_attrs: 1,
                pad_bytes: [16, 64],
                missing_prob: 0.0,
                malformed_prob: 0.0,
                arrival: Arrival::Poisson,
            }],
            features: FeatureGenParams {
                num_features: 4,
                num_event_types: None,
                redundancy: 1.0,
                ranges_s: vec![300],
                zipf_exponent: 1.1,
                concat_limit: 10,
                cache_budget_bytes: 64 << 20,
                inference_stub_ms: 0.0,
            },
            schedule: Schedule::Fixed {
                interval_s: 60.0,
                start_offset_s: 300.0,
                count: Some(21),
            },
        }
    }
}
