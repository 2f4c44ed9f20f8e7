//! Attribute payload codec.
//!
//! Behavior-specific attributes of a logged event are folded into one opaque
//! payload column. The encoding is a flat JSON object whose values are
//! numbers, strings, booleans, or homogeneous arrays of numbers or strings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// A single decoded attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Number(f64),
    Text(String),
    NumberList(Vec<f64>),
    TextList(Vec<String>),
}

impl AttrValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            AttrValue::Number(n) => Some(*n),
            _ => None,
        }
    }
}

/// Decoded attributes of one event, keyed by attribute name.
pub type AttributeMap = BTreeMap<String, AttrValue>;

#[derive(Debug, thiserror::Error)]
#[error("malformed payload: {0}")]
pub struct PayloadError(String);

/// Serializes an attribute map into the payload encoding.
pub fn encode(attrs: &AttributeMap) -> Vec<u8> {
    serde_json::to_vec(attrs).expect("attribute maps always serialize")
}

/// Parses a payload back into its attribute map.
///
/// Rejects anything that is not a flat object of the supported value kinds,
/// including nulls, nested objects, mixed arrays, and non-finite numbers.
pub fn decode(payload: &[u8]) -> Result<AttributeMap, PayloadError> {
    let attrs: AttributeMap =
        serde_json::from_slice(payload).map_err(|e| PayloadError(e.to_string()))?;
    Ok(attrs)
}

/// Restricts `attrs` to the named keys. Missing keys are ignored.
pub fn prune<'a, I>(attrs: &AttributeMap, keep: I) -> AttributeMap
where
    I: IntoIterator<Item = &'a String>,
{
    keep.into_iter()
        .filter_map(|k| attrs.get(k).map(|v| (k.clone(), v.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_two_entry_map() {
        let m = decode(br#"{"duration":12.5,"genre":"comedy"}"#).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m["duration"], AttrValue::Number(12.5));
        assert_eq!(m["genre"], AttrValue::Text("comedy".into()));
    }

    #[test]
    fn empty_object_is_empty_map() {
        assert!(decode(b"{}").unwrap().is_empty());
    }

    #[test]
    fn rejects_unsupported_shapes() {
        for bad in [
            &br#"{"a":null}"#[..],
            br#"{"a":{"b":1}}"#,
            br#"{"a":[1,"x"]}"#,
            br#"[1,2]"#,
            b"not json",
            b"",
        ] {
            assert!(decode(bad).is_err(), "{:?}", std::str::from_utf8(bad));
        }
    }

    #[test]
    fn integers_decode_as_numbers() {
        let m = decode(br#"{"n":3,"l":[1,2]}"#).unwrap();
        assert_eq!(m["n"], AttrValue::Number(3.0));
        assert_eq!(m["l"], AttrValue::NumberList(vec![1.0, 2.0]));
    }

    #[test]
    fn prune_keeps_only_requested() {
        let m = decode(br#"{"a":1,"b":2,"c":3}"#).unwrap();
        let keep = vec!["a".to_string(), "c".to_string(), "zz".to_string()];
        let p = prune(&m, &keep);
        assert_eq!(p.keys().collect::<Vec<_>>(), vec!["a", "c"]);
    }

    fn attr_value() -> impl Strategy<Value = AttrValue> {
        prop_oneof![
            any::<bool>().prop_map(AttrValue::Bool),
            (-1e12f64..1e12).prop_map(AttrValue::Number),
            "[a-z ]{0,12}".prop_map(AttrValue::Text),
            prop::collection::vec(-1e6f64..1e6, 1..5).prop_map(AttrValue::NumberList),
            prop::collection::vec("[a-z]{0,6}", 0..5).prop_map(AttrValue::TextList),
        ]
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(m in prop::collection::btree_map("[a-z_]{1,8}", attr_value(), 0..12)) {
            // An empty text list encodes as `[]`, which decodes as an empty number list.
            let m: AttributeMap = m
                .into_iter()
                .map(|(k, v)| match v {
                    AttrValue::TextList(l) if l.is_empty() => (k, AttrValue::NumberList(vec![])),
                    v => (k, v),
                })
                .collect();
            prop_assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }
}
