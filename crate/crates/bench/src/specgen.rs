//! Synthetic feature sets with a tunable share of overlapping time ranges.
//!
//! Every event type gets a shared range from the scenario's vocabulary. The
//! first feature on a type always uses it; each later one uses it with
//! probability `redundancy` and otherwise gets a narrower random range.
//! Feature-to-type assignment is Zipf-skewed, with the first features
//! covering every type once.
//!
//! All random draws happen whatever the redundancy level, so two specs
//! generated from the same seed differ only in which features take the shared
//! range, and raising the level only ever widens ranges.

use fexgraph::{CompFunc, CompKind, FeatureSpec, ModelSpec};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::scenario::{EventTypeSpec, WorkloadScenario};

const SPEC_STREAM: u64 = 1 << 32;
const MIN_FRESH_RANGE_S: u64 = 30;

fn pick_func(roll: u32, has_numeric: bool, concat_limit: u32) -> CompFunc {
    let kind = match roll {
        0..25 => CompKind::Count,
        25..40 => CompKind::Sum,
        40..55 => CompKind::Avg,
        55..65 => CompKind::Min,
        65..75 => CompKind::Max,
        75..85 => CompKind::DistinctCount,
        _ => return CompFunc::concat(Some(concat_limit)),
    };
    if kind.is_numeric() && !has_numeric {
        CompFunc::new(CompKind::Count)
    } else {
        CompFunc::new(kind)
    }
}

fn attr_name(t: &EventTypeSpec, idx: u32) -> String {
    if idx < t.numeric_attrs {
        EventTypeSpec::numeric_attr(idx)
    } else {
        EventTypeSpec::text_attr(idx - t.numeric_attrs)
    }
}

/// Generates the scenario's model spec.
pub fn generate_spec(scenario: &WorkloadScenario) -> ModelSpec {
    let params = &scenario.features;
    let types = scenario.active_types();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(SPEC_STREAM);
    let shared: Vec<u64> = types
        .iter()
        .map(|_| {
            *params
                .ranges_s
                .choose(&mut rng)
                .expect("validated non-empty")
        })
        .collect();
    let zipf = Zipf::new(types.len() as f64, params.zipf_exponent).expect("validated exponent");
    let mut anchored = vec![false; types.len()];
    let mut features = Vec::with_capacity(params.num_features);
    for i in 0..params.num_features {
        let zipf_pick = zipf.sample(&mut rng) as usize - 1;
        let ti = if i < types.len() {
            i
        } else {
            zipf_pick.min(types.len() - 1)
        };
        let t = &types[ti];
        let u: f64 = rng.random();
        let fresh = rng.random_range(MIN_FRESH_RANGE_S.min(shared[ti])..=shared[ti]);
        let roll = rng.random_range(0..100u32);
        let numeric_pick = rng.random_range(0..t.numeric_attrs.max(1));
        let any_pick = rng.random_range(0..t.numeric_attrs + t.text_attrs);

        let time_range_s = if !anchored[ti] || u < params.redundancy {
            shared[ti]
        } else {
            fresh
        };
        anchored[ti] = true;
        let comp_func = pick_func(roll, t.numeric_attrs > 0, params.concat_limit);
        let attr = if comp_func.kind.is_numeric() {
            EventTypeSpec::numeric_attr(numeric_pick)
        } else {
            attr_name(t, any_pick)
        };
        features.push(FeatureSpec {
            feature_id: format!("f{i:03}"),
            event_names: vec![t.name.clone()],
            time_range_s,
            attr_names: vec![attr],
            comp_func,
        });
    }
    let spec = ModelSpec {
        model_id: scenario.name.clone(),
        features,
        cache_budget_bytes: params.cache_budget_bytes,
        inference_stub_ms: params.inference_stub_ms,
    };
    spec.validate().expect("generated specs are valid");
    spec
}
