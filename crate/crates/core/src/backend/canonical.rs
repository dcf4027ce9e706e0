//! Canonical JSON encoding used for request hashing and cache records.
//!
//! Object keys are sorted bytewise, no whitespace is emitted, strings use
//! serde_json escaping and floats use the shortest round-trip decimal form.

use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn canonical_bytes(value: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    write_value(value, &mut out);
    out
}

fn write_value(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null | Value::Bool(_) | Value::Number(_) | Value::String(_) => {
            // scalar encodings from serde_json are already canonical
            out.extend_from_slice(serde_json::to_string(value).expect("scalar").as_bytes());
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                out.extend_from_slice(serde_json::to_string(k).expect("key").as_bytes());
                out.push(b':');
                write_value(v, out);
            }
            out.push(b'}');
        }
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_compact() {
        let v = json!({"b": 1, "a": [1.5, "x", null], "c": {"z": true, "y": 0.1}});
        assert_eq!(
            String::from_utf8(canonical_bytes(&v)).unwrap(),
            r#"{"a":[1.5,"x",null],"b":1,"c":{"y":0.1,"z":true}}"#
        );
    }

    #[test]
    fn key_order_does_not_change_hash() {
        let a: Value =
            serde_json::from_str(r#"{"model":"m","template":"A <MASK> B","candidates":["before"]}"#).unwrap();
        let b: Value =
            serde_json::from_str(r#"{ "candidates": ["before"], "template": "A <MASK> B", "model": "m" }"#)
                .unwrap();
        assert_eq!(sha256(&canonical_bytes(&a)), sha256(&canonical_bytes(&b)));
    }

    #[test]
    fn floats_shortest_form() {
        assert_eq!(canonical_bytes(&json!(0.9)), b"0.9");
        assert_eq!(canonical_bytes(&json!(1e-5)), b"0.00001");
        assert_eq!(canonical_bytes(&json!(2.5e-12)), b"2.5e-12");
    }

    proptest! {
        #[test]
        fn canonical_is_parseable_and_stable(
            map in proptest::collection::btree_map("[a-z]{1,6}", -1e6f64..1e6, 0..8)
        ) {
            let v = serde_json::to_value(&map).unwrap();
            let bytes = canonical_bytes(&v);
            let reparsed: Value = serde_json::from_slice(&bytes).unwrap();
            prop_assert_eq!(canonical_bytes(&reparsed), bytes);
        }
    }
}
