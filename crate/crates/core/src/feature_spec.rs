//! Declarative feature definitions and the model spec file.
//!
//! A spec file is TOML:
//!
//! ```toml
//! model_id = "vr_like"
//! cache_budget_bytes = 262144
//! inference_stub_ms = 2.0
//!
//! [[features]]
//! id = "avg_play_duration_1h"
//! events = ["video_play"]
//! range_s = 3600
//! attrs = ["duration"]
//! func = "AVG"
//!
//! [[features]]
//! id = "recent_genres"
//! events = ["video_play", "live_play"]
//! range_s = 86400
//! attrs = ["genre"]
//! func = "CONCAT"
//! concat_limit = 20
//! ```

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("invalid feature `{feature_id}`: {reason}")]
    Validation { feature_id: String, reason: String },
}

fn invalid(feature_id: &str, reason: impl Into<String>) -> SpecError {
    SpecError::Validation {
        feature_id: feature_id.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompKind {
    Count,
    Sum,
    Avg,
    Min,
    Max,
    DistinctCount,
    Concat,
}

impl CompKind {
    pub const ALL: [CompKind; 7] = [
        CompKind::Count,
        CompKind::Sum,
        CompKind::Avg,
        CompKind::Min,
        CompKind::Max,
        CompKind::DistinctCount,
        CompKind::Concat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompKind::Count => "COUNT",
            CompKind::Sum => "SUM",
            CompKind::Avg => "AVG",
            CompKind::Min => "MIN",
            CompKind::Max => "MAX",
            CompKind::DistinctCount => "DISTINCT_COUNT",
            CompKind::Concat => "CONCAT",
        }
    }

    /// Whether the function needs numeric inputs.
    pub fn is_numeric(self) -> bool {
        matches!(
            self,
            CompKind::Sum | CompKind::Avg | CompKind::Min | CompKind::Max
        )
    }
}

impl fmt::Display for CompKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CompKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown comp_func `{s}`"))
    }
}

/// Summarizing function of a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompFunc {
    pub kind: CompKind,
    /// Keep only the last N values (CONCAT only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concat_limit: Option<u32>,
}

impl CompFunc {
    pub fn new(kind: CompKind) -> Self {
        Self {
            kind,
            concat_limit: None,
        }
    }

    pub fn concat(limit: Option<u32>) -> Self {
        Self {
            kind: CompKind::Concat,
            concat_limit: limit,
        }
    }
}

impl fmt::Display for CompFunc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.concat_limit {
            Some(n) => write!(f, "{}({n})", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

/// One user feature: which events, how far back, which attributes, and how
/// to summarize them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub feature_id: String,
    pub event_names: Vec<String>,
    pub time_range_s: u64,
    pub attr_names: Vec<String>,
    pub comp_func: CompFunc,
}

impl FeatureSpec {
    pub fn time_range_ms(&self) -> i64 {
        i64::try_from(self.time_range_s.saturating_mul(1000)).unwrap_or(i64::MAX)
    }

    fn validate(&self) -> Result<(), SpecError> {
        let id = self.feature_id.as_str();
        if id.is_empty() {
            return Err(invalid(id, "feature id is empty"));
        }
        if self.event_names.is_empty() {
            return Err(invalid(id, "no event names"));
        }
        if self.event_names.iter().any(String::is_empty) {
            return Err(invalid(id, "empty event name"));
        }
        if self.time_range_s == 0 {
            return Err(invalid(id, "time range must be positive"));
        }
        if self.attr_names.is_empty() {
            return Err(invalid(id, "no attribute names"));
        }
        if self.attr_names.iter().any(String::is_empty) {
            return Err(invalid(id, "empty attribute name"));
        }
        let distinct: HashSet<&String> = self.attr_names.iter().collect();
        if distinct.len() != self.attr_names.len() {
            return Err(invalid(id, "duplicate attribute name"));
        }
        if self.attr_names.len() > 1 && self.comp_func.kind != CompKind::Concat {
            return Err(invalid(
                id,
                format!("{} takes exactly one attribute", self.comp_func.kind),
            ));
        }
        match (self.comp_func.kind, self.comp_func.concat_limit) {
            (CompKind::Concat, Some(0)) => Err(invalid(id, "concat_limit must be positive")),
            (CompKind::Concat, _) | (_, None) => Ok(()),
            (kind, Some(_)) => Err(invalid(
                id,
                format!("concat_limit is not allowed for {kind}"),
            )),
        }
    }
}

/// All features consumed by one deployed model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model_id: String,
    pub features: Vec<FeatureSpec>,
    pub cache_budget_bytes: u64,
    pub inference_stub_ms: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if !(self.inference_stub_ms.is_finite() && self.inference_stub_ms >= 0.0) {
            return Err(invalid(
                "",
                "inference_stub_ms must be a non-negative number",
            ));
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            f.validate()?;
            if !seen.insert(f.feature_id.as_str()) {
                return Err(invalid(&f.feature_id, "duplicate feature id"));
            }
        }
        Ok(())
    }

    pub fn feature(&self, feature_id: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.feature_id == feature_id)
    }

    /// Distinct event names referenced by any feature, sorted.
    pub fn event_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .features
            .iter()
            .flat_map(|f| f.event_names.iter().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    model_id: String,
    #[serde(default)]
    cache_budget_bytes: u64,
    #[serde(default)]
    inference_stub_ms: f64,
    #[serde(default)]
    features: Vec<RawFeature>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeature {
    id: String,
    events: Vec<String>,
    range_s: i64,
    attrs: Vec<String>,
    func: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    concat_limit: Option<i64>,
}

fn line_col(doc: &str, offset: usize) -> (usize, usize) {
    let before = &doc[..offset.min(doc.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Parses and validates a spec document.
pub fn parse_model_spec(document: &str) -> Result<ModelSpec, SpecError> {
    let raw: RawModel = toml::from_str(document).map_err(|e| {
        let location = match e.span() {
            Some(span) => {
                let (line, col) = line_col(document, span.start);
                format!("line {line}, column {col}")
            }
            None => "document".to_string(),
        };
        SpecError::Parse {
            location,
            message: e.message().to_string(),
        }
    })?;

    let mut features = Vec::with_capacity(raw.features.len());
    for f in raw.features {
        let kind: CompKind = f.func.parse().map_err(|r| invalid(&f.id, r))?;
        let time_range_s = u64::try_from(f.range_s)
            .ok()
            .filter(|&r| r > 0)
            .ok_or_else(|| invalid(&f.id, "time range must be positive"))?;
        let concat_limit = match f.concat_limit {
            None => None,
            Some(n) => Some(
                u32::try_from(n)
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| invalid(&f.id, "concat_limit must be positive"))?,
            ),
        };
        features.push(FeatureSpec {
            feature_id: f.id,
            event_names: f.events,
            time_range_s,
            attr_names: f.attrs,
            comp_func: CompFunc { kind, concat_limit },
        });
    }
    let spec = ModelSpec {
        model_id: raw.model_id,
        features,
        cache_budget_bytes: raw.cache_budget_bytes,
        inference_stub_ms: raw.inference_stub_ms,
    };
    spec.validate()?;
    Ok(spec)
}

/// Renders a spec in the document format accepted by [`parse_model_spec`].
pub fn serialize_model_spec(spec: &ModelSpec) -> String {
    let raw = RawModel {
        model_id: spec.model_id.clone(),
        cache_budget_bytes: spec.cache_budget_bytes,
        inference_stub_ms: spec.inference_stub_ms,
        features: spec
            .features
            .iter()
            .map(|f| RawFeature {
                id: f.feature_id.clone(),
                events: f.event_names.clone(),
                range_s: f.time_range_s as i64,
                attrs: f.attr_names.clone(),
                func: f.comp_func.kind.as_str().to_string(),
                concat_limit: f.comp_func.concat_limit.map(i64::from),
            })
            .collect(),
    };
    toml::to_string(&raw).expect("spec always serializes")
}

/// Canonical form: event names sorted and deduplicated, features sorted by id.
///
/// Attribute order is meaningful (it fixes CONCAT tuple layout) and is kept.
pub fn normalize(spec: &ModelSpec) -> ModelSpec {
    let mut out = spec.clone();
    for f in &mut out.features {
        f.event_names.sort();
        f.event_names.dedup();
    }
    out.features.sort_by(|a, b| a.feature_id.cmp(&b.feature_id));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
model_id = "m"
cache_budget_bytes = 1024
inference_stub_ms = 1.5

[[features]]
id = "f1"
events = ["video_play"]
range_s = 300
attrs = ["duration"]
func = "COUNT"
"#;

    #[test]
    fn minimal_document() {
        let s = parse_model_spec(MINIMAL).unwrap();
        assert_eq!(s.features.len(), 1);
        assert_eq!(s.features[0].comp_func, CompFunc::new(CompKind::Count));
        assert_eq!(s.cache_budget_bytes, 1024);
    }

    #[test]
    fn duplicate_feature_id() {
        let doc = format!(
            "{MINIMAL}\n{}",
            &MINIMAL[MINIMAL.find("[[features]]").unwrap()..]
        );
        match parse_model_spec(&doc) {
            Err(SpecError::Validation { feature_id, reason }) => {
                assert_eq!(feature_id, "f1");
                assert!(reason.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_range_and_unknown_func() {
        let zero = MINIMAL.replace("range_s = 300", "range_s = 0");
        assert!(matches!(
            parse_model_spec(&zero),
            Err(SpecError::Validation { .. })
        ));
        let neg = MINIMAL.replace("range_s = 300", "range_s = -5");
        assert!(matches!(
            parse_model_spec(&neg),
            Err(SpecError::Validation { .. })
        ));
        let func = MINIMAL.replace("\"COUNT\"", "\"MEDIAN\"");
        assert!(matches!(
            parse_model_spec(&func),
            Err(SpecError::Validation { .. })
        ));
    }

    #[test]
    fn func_names_are_case_insensitive() {
        let doc = MINIMAL.replace("\"COUNT\"", "\"distinct_count\"");
        assert_eq!(
            parse_model_spec(&doc).unwrap().features[0].comp_func.kind,
            CompKind::DistinctCount
        );
    }

    #[test]
    fn arity_and_concat_limit_rules() {
        let two = MINIMAL.replace("[\"duration\"]", "[\"duration\", \"genre\"]");
        assert!(matches!(
            parse_model_spec(&two),
            Err(SpecError::Validation { .. })
        ));
        let concat = two.replace("\"COUNT\"", "\"CONCAT\"");
        assert!(parse_model_spec(&concat).is_ok());
        let limit = format!("{MINIMAL}concat_limit = 3\n");
        assert!(matches!(
            parse_model_spec(&limit),
            Err(SpecError::Validation { .. })
        ));
        let limited = format!(
            "{}concat_limit = 3\n",
            MINIMAL.replace("\"COUNT\"", "\"CONCAT\"")
        );
        assert_eq!(
            parse_model_spec(&limited).unwrap().features[0]
                .comp_func
                .concat_limit,
            Some(3)
        );
    }

    #[test]
    fn parse_errors_carry_location() {
        let bad = MINIMAL.replace("range_s = 300", "range_s = \"x\"");
        match parse_model_spec(&bad) {
            Err(SpecError::Parse { location, .. }) => {
                assert!(location.starts_with("line 9,"), "{location}")
            }
            other => panic!("{other:?}"),
        }
        let unknown = format!("{MINIMAL}bogus = 1\n");
        assert!(matches!(
            parse_model_spec(&unknown),
            Err(SpecError::Parse { .. })
        ));
    }

    #[test]
    fn normalize_sorts() {
        let mut s = parse_model_spec(MINIMAL).unwrap();
        s.features[0].event_names = vec!["b".into(), "a".into()];
        let n = normalize(&s);
        assert_eq!(n.features[0].event_names, vec!["a", "b"]);
    }

    #[test]
    fn permuted_documents_normalize_equal() {
        let a = r#"
model_id = "m"
[[features]]
id = "x"
events = ["b", "a"]
range_s = 60
attrs = ["v"]
func = "SUM"
[[features]]
id = "w"
events = ["c"]
range_s = 60
attrs = ["v"]
func = "MAX"
"#;
        let b = r#"
model_id = "m"
[[features]]
id = "w"
events = ["c"]
range_s = 60
attrs = ["v"]
func = "MAX"
[[features]]
id = "x"
events = ["a", "b"]
range_s = 60
attrs = ["v"]
func = "SUM"
"#;
        let (a, b) = (parse_model_spec(a).unwrap(), parse_model_spec(b).unwrap());
        assert_ne!(a, b);
        assert_eq!(normalize(&a), normalize(&b));
    }

    fn feature_strategy() -> impl Strategy<Value = FeatureSpec> {
        (
            "[a-z]{1,6}",
            prop::collection::vec("[a-e]", 1..4),
            1u64..100_000,
            prop::sample::select(CompKind::ALL.to_vec()),
            prop::collection::vec("[p-t]{1,3}", 1..4),
            prop::option::of(1u32..50),
        )
            .prop_map(|(id, events, range, kind, mut attrs, limit)| {
                attrs.sort();
                attrs.dedup();
                if kind != CompKind::Concat {
                    attrs.truncate(1);
                }
                FeatureSpec {
                    feature_id: id,
                    event_names: events,
                    time_range_s: range,
                    attr_names: attrs,
                    comp_func: CompFunc {
                        kind,
                        concat_limit: if kind == CompKind::Concat {
                            limit
                        } else {
                            None
                        },
                    },
                }
            })
    }

    fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
        (
            prop::collection::vec(feature_strategy(), 0..12),
            0u64..1_000_000,
            prop::sample::select(vec![0.0, 0.5, 2.0, 13.25]),
        )
            .prop_map(|(features, budget, stub)| {
                let mut seen = HashSet::new();
                let features = features
                    .into_iter()
                    .filter(|f| seen.insert(f.feature_id.clone()))
                    .collect();
                ModelSpec {
                    model_id: "prop".into(),
                    features,
                    cache_budget_bytes: budget,
                    inference_stub_ms: stub,
                }
            })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in spec_strategy()) {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn serialize_parse_round_trip(s in spec_strategy()) {
            let n = normalize(&s);
            prop_assert_eq!(parse_model_spec(&serialize_model_spec(&n)).unwrap(), n);
        }

        #[test]
        fn mutated_specs_are_rejected(s in spec_strategy(), which in 0usize..7) {
            prop_assume!(!s.features.is_empty());
            let mut bad = s.clone();
            let f = &mut bad.features[0];
            match which {
                0 => f.time_range_s = 0,
                1 => f.event_names.clear(),
                2 => f.attr_names.clear(),
                3 => {
                    let dup = bad.features[0].clone();
                    bad.features.push(dup);
                }
                4 => {
                    f.comp_func.kind = CompKind::Sum;
                    f.attr_names = vec!["a".into(), "b".into()];
                }
                5 => {
                    f.comp_func = CompFunc { kind: CompKind::Count, concat_limit: Some(2) };
                }
                _ => f.event_names.push(String::new()),
            }
            prop_assert!(bad.validate().is_err());
            prop_assert!(parse_model_spec(&serialize_model_spec(&bad)).is_err());
        }
    }
}
