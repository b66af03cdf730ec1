//! Versioned JSON artifacts.
//!
//! Every file carries a top-level `"schema": "gd/<major>[.<minor>]"` and a
//! `"kind"` naming the payload type. Readers accept any minor version of
//! their major and ignore fields they do not know.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{GdError, Result};

pub const SCHEMA: &str = "gd/1";
const MAJOR: &str = "1";

/// Byte offset of a 1-based (line, column) position as reported by serde_json.
pub fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, e: serde_json::Error) -> GdError {
    GdError::Json {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

/// Serialize `value` with the schema envelope. Struct fields keep their
/// declaration order so output is byte-stable.
pub fn to_json<T: Serialize>(kind: &str, value: &T) -> Result<String> {
    let body = serde_json::to_value(value).map_err(|e| GdError::InvalidArgument(e.to_string()))?;
    let mut out = Map::new();
    out.insert("schema".into(), Value::String(SCHEMA.into()));
    out.insert("kind".into(), Value::String(kind.into()));
    match body {
        Value::Object(fields) => out.extend(fields),
        other => {
            out.insert("data".into(), other);
        }
    }
    let mut s = serde_json::to_string_pretty(&Value::Object(out))
        .map_err(|e| GdError::InvalidArgument(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn check_schema(found: Option<&Value>) -> Result<()> {
    let found = found.and_then(Value::as_str).unwrap_or("");
    let major = found
        .strip_prefix("gd/")
        .map(|v| v.split('.').next().unwrap_or(""));
    if major != Some(MAJOR) {
        return Err(GdError::Schema {
            expected: SCHEMA.into(),
            found: found.into(),
        });
    }
    Ok(())
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let value: Value = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    let Value::Object(mut fields) = value else {
        return Err(GdError::Json {
            offset: 0,
            message: "expected a JSON object".into(),
        });
    };
    check_schema(fields.get("schema"))?;
    let found_kind = fields.get("kind").and_then(Value::as_str).unwrap_or("");
    if found_kind != kind {
        return Err(GdError::Schema {
            expected: format!("{SCHEMA} {kind}"),
            found: format!("kind '{found_kind}'"),
        });
    }
    fields.remove("schema");
    fields.remove("kind");
    let body = match fields.remove("data") {
        Some(data) if fields.is_empty() => data,
        Some(data) => {
            fields.insert("data".into(), data);
            Value::Object(fields)
        }
        None => Value::Object(fields),
    };
    serde_json::from_value(body).map_err(|e| GdError::Json {
        offset: 0,
        message: e.to_string(),
    })
}

pub fn save<T: Serialize>(path: impl AsRef<Path>, kind: &str, value: &T) -> Result<()> {
    std::fs::write(path, to_json(kind, value)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<T> {
    from_json(kind, &std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct V1 {
        alpha: Vec<f32>,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct V2 {
        alpha: Vec<f32>,
        #[serde(default)]
        note: String,
    }

    #[test]
    fn round_trip_keeps_values() {
        let v = V1 {
            alpha: vec![0.1, 0.25, 1.0, 3.4028235e38],
        };
        let s = to_json("alpha", &v).unwrap();
        assert!(s.contains("\"schema\": \"gd/1\""));
        assert_eq!(from_json::<V1>("alpha", &s).unwrap(), v);
    }

    #[test]
    fn older_minor_loads_with_defaults_and_unknown_fields_are_ignored() {
        let text = r#"{"schema":"gd/1.0","kind":"alpha","alpha":[1.0],"extra":7}"#;
        let v: V2 = from_json("alpha", text).unwrap();
        assert_eq!(v, V2 { alpha: vec![1.0], note: String::new() });
    }

    #[test]
    fn major_mismatch_is_an_error() {
        let text = r#"{"schema":"gd/2","kind":"alpha","alpha":[]}"#;
        assert!(matches!(from_json::<V1>("alpha", text), Err(GdError::Schema { .. })));
        let text = r#"{"kind":"alpha","alpha":[]}"#;
        assert!(matches!(from_json::<V1>("alpha", text), Err(GdError::Schema { .. })));
    }

    #[test]
    fn truncated_json_reports_byte_offset() {
        let text = "{\"schema\":\"gd/1\",\n\"kind\":\"alpha\",\n\"alpha\":[1.0,";
        match from_json::<V1>("alpha", text) {
            Err(GdError::Json { offset, .. }) => assert!(offset + 1 >= text.len() && offset <= text.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn offset_of_second_line() {
        assert_eq!(byte_offset("ab\ncd", 2, 2), 4);
        assert_eq!(byte_offset("ab\ncd", 1, 1), 0);
    }

    #[test]
    fn non_object_payload_is_wrapped() {
        let s = to_json("list", &vec![1u32, 2]).unwrap();
        assert_eq!(from_json::<Vec<u32>>("list", &s).unwrap(), vec![1, 2]);
    }
}
