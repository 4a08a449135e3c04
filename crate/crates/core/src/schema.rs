//! Typed module output records.
//!
//! Every module emits a document with four fields: `type`, `content`,
//! `confidence` and `dependencies`. [`validate_output`] turns an untrusted
//! document tree into a [`ModuleOutput`], and [`canonical_form`] renders a
//! validated output into deterministic bytes: object keys sorted
//! lexicographically at every level, reals rendered with the shortest
//! round-trip decimal form, no insignificant whitespace.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;

/// Maximum nesting depth accepted for a raw document.
pub const MAX_DEPTH: usize = 64;
/// Maximum encoded document size in bytes.
pub const MAX_DOCUMENT_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{0}` has the wrong kind")]
    WrongKind(&'static str),
    #[error("confidence {0} is outside [0, 1]")]
    OutOfRange(String),
    #[error("field `type` must be a non-empty string")]
    EmptyTypeTag,
    #[error("module `{0}` lists itself as a dependency")]
    SelfDependency(String),
    #[error("dependency `{0}` is listed more than once")]
    DuplicateDependency(String),
    #[error("document nesting exceeds {MAX_DEPTH} levels")]
    TooDeep,
    #[error("document is {0} bytes, limit is {MAX_DOCUMENT_BYTES}")]
    TooLarge(usize),
    #[error("malformed document: {0}")]
    Parse(String),
}

impl SchemaError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            SchemaError::MissingField(_) => "missing_field",
            SchemaError::WrongKind(_) => "wrong_kind",
            SchemaError::OutOfRange(_) => "out_of_range",
            SchemaError::EmptyTypeTag => "empty_type_tag",
            SchemaError::SelfDependency(_) => "self_dependency",
            SchemaError::DuplicateDependency(_) => "duplicate_dependency",
            SchemaError::TooDeep => "too_deep",
            SchemaError::TooLarge(_) => "too_large",
            SchemaError::Parse(_) => "parse_error",
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            code: self.code().to_string(),
            message: self.to_string(),
        }
    }
}

/// Structured error carried across file and process boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub code: String,
    pub message: String,
}

/// A validated sub-step output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleOutput {
    #[serde(rename = "type")]
    pub type_tag: String,
    pub content: Map<String, Value>,
    pub confidence: f64,
    pub dependencies: Vec<String>,
}

impl ModuleOutput {
    /// Convenience constructor; the result still has to pass [`validate_output`]
    /// through [`ModuleOutput::to_value`] before it is trusted.
    pub fn new(type_tag: impl Into<String>, content: Map<String, Value>, confidence: f64) -> Self {
        Self {
            type_tag: type_tag.into(),
            content,
            confidence,
            dependencies: Vec::new(),
        }
    }

    pub fn with_dependencies(mut self, deps: Vec<String>) -> Self {
        self.dependencies = deps;
        self
    }

    /// Document tree form of this output.
    pub fn to_value(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("type".into(), Value::String(self.type_tag.clone()));
        obj.insert("content".into(), Value::Object(self.content.clone()));
        obj.insert("confidence".into(), float_value(self.confidence));
        obj.insert(
            "dependencies".into(),
            Value::Array(self.dependencies.iter().cloned().map(Value::String).collect()),
        );
        Value::Object(obj)
    }
}

/// Deterministic byte rendering of one module's output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalDocument {
    pub bytes: Vec<u8>,
    pub origin_module: String,
}

impl CanonicalDocument {
    pub fn as_str(&self) -> &str {
        // canonical bytes are always produced from `String`s
        std::str::from_utf8(&self.bytes).unwrap_or_default()
    }
}

/// Parses encoded bytes into a document tree, enforcing the size limit.
pub fn parse_document(bytes: &[u8]) -> Result<Value, SchemaError> {
    if bytes.len() > MAX_DOCUMENT_BYTES {
        return Err(SchemaError::TooLarge(bytes.len()));
    }
    serde_json::from_slice(bytes).map_err(|e| SchemaError::Parse(e.to_string()))
}

/// Nesting depth of a tree; a scalar has depth 1. Iterative so adversarial
/// trees built in memory cannot overflow the stack.
pub fn depth(value: &Value) -> usize {
    let mut max = 0;
    let mut stack = vec![(value, 1usize)];
    while let Some((v, d)) = stack.pop() {
        max = max.max(d);
        match v {
            Value::Array(items) => stack.extend(items.iter().map(|x| (x, d + 1))),
            Value::Object(map) => stack.extend(map.values().map(|x| (x, d + 1))),
            _ => {}
        }
    }
    max
}

/// Validates a raw document emitted by module `emitter`.
pub fn validate_output(raw: &Value, emitter: &str) -> Result<ModuleOutput, SchemaError> {
    if depth(raw) > MAX_DEPTH {
        return Err(SchemaError::TooDeep);
    }
    let obj = raw.as_object().ok_or(SchemaError::WrongKind("document"))?;

    let type_tag = match obj.get("type") {
        None => return Err(SchemaError::MissingField("type")),
        Some(Value::String(s)) if s.is_empty() => return Err(SchemaError::EmptyTypeTag),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(SchemaError::WrongKind("type")),
    };
    let content = match obj.get("content") {
        None => return Err(SchemaError::MissingField("content")),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(SchemaError::WrongKind("content")),
    };
    let confidence = match obj.get("confidence") {
        None => return Err(SchemaError::MissingField("confidence")),
        Some(Value::Number(n)) => n.as_f64().ok_or(SchemaError::WrongKind("confidence"))?,
        Some(_) => return Err(SchemaError::WrongKind("confidence")),
    };
    if !(0.0..=1.0).contains(&confidence) {
        return Err(SchemaError::OutOfRange(confidence.to_string()));
    }
    let deps = match obj.get("dependencies") {
        None => return Err(SchemaError::MissingField("dependencies")),
        Some(Value::Array(items)) => items,
        Some(_) => return Err(SchemaError::WrongKind("dependencies")),
    };
    let mut dependencies: Vec<String> = Vec::with_capacity(deps.len());
    for d in deps {
        let id = d.as_str().ok_or(SchemaError::WrongKind("dependencies"))?;
        if id == emitter {
            return Err(SchemaError::SelfDependency(id.to_string()));
        }
        if dependencies.iter().any(|x| x == id) {
            return Err(SchemaError::DuplicateDependency(id.to_string()));
        }
        dependencies.push(id.to_string());
    }

    Ok(ModuleOutput {
        type_tag,
        content,
        confidence,
        dependencies,
    })
}

/// Canonical bytes for a validated output.
pub fn canonical_form(output: &ModuleOutput, origin_module: &str) -> CanonicalDocument {
    let mut bytes = Vec::with_capacity(128);
    write_canonical(&output.to_value(), &mut bytes);
    CanonicalDocument {
        bytes,
        origin_module: origin_module.to_string(),
    }
}

/// Re-reads canonical bytes as a validated output.
pub fn parse_canonical(doc: &CanonicalDocument) -> Result<ModuleOutput, SchemaError> {
    let value = parse_document(&doc.bytes)?;
    validate_output(&value, &doc.origin_module)
}

/// Canonical encoding of an arbitrary tree.
pub fn canonical_bytes(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(b) => out.extend_from_slice(if *b { b"true" } else { b"false" }),
        // integers print as integers, reals via shortest round-trip (ryu)
        Value::Number(n) => out.extend_from_slice(n.to_string().as_bytes()),
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(key, out);
                out.push(b':');
                write_canonical(&map[key], out);
            }
            out.push(b'}');
        }
    }
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    // serde_json's string escaper is deterministic and locale independent
    let escaped = serde_json::to_string(s).expect("string serialization cannot fail");
    out.extend_from_slice(escaped.as_bytes());
}

fn float_value(x: f64) -> Value {
    Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}
