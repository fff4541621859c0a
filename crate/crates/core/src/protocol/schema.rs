use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde_json::Value;

use super::{ErrorCode, ProtocolError, SCHEMA_JSON};

struct Compiled {
    document: Value,
    validators: BTreeMap<String, jsonschema::Validator>,
}

fn compiled() -> &'static Compiled {
    static COMPILED: OnceLock<Compiled> = OnceLock::new();
    COMPILED.get_or_init(|| {
        let document: Value = serde_json::from_str(SCHEMA_JSON).expect("shipped schema is valid JSON");
        let validators = document["messages"]
            .as_object()
            .expect("schema lists messages")
            .keys()
            .map(|name| {
                let schema = standalone(&document, name).expect("listed message");
                let validator = jsonschema::validator_for(&schema)
                    .unwrap_or_else(|e| panic!("schema for `{name}` does not compile: {e}"));
                (name.clone(), validator)
            })
            .collect();
        Compiled { document, validators }
    })
}

fn standalone(document: &Value, name: &str) -> Option<Value> {
    let mut schema = document["messages"].get(name)?.clone();
    let obj = schema.as_object_mut()?;
    obj.insert("$schema".into(), document["$schema"].clone());
    obj.insert("$defs".into(), document["$defs"].clone());
    Some(schema)
}

/// The parsed schema document.
pub fn schema_document() -> &'static Value {
    &compiled().document
}

/// Every message type the schema defines.
pub fn message_types() -> impl Iterator<Item = &'static str> {
    compiled().validators.keys().map(String::as_str)
}

/// The schema for one message type, with shared definitions inlined so it
/// stands on its own.
pub fn message_schema(name: &str) -> Option<Value> {
    standalone(schema_document(), name)
}

/// Validates a whole frame against the schema for its `type`.
pub fn validate(frame: &Value) -> Result<(), ProtocolError> {
    let kind = frame
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| ProtocolError::new(ErrorCode::Malformed, "missing `type`"))?;
    let validator = compiled()
        .validators
        .get(kind)
        .ok_or_else(|| ProtocolError::new(ErrorCode::UnknownType, format!("unknown message type `{kind}`")))?;
    match validator.iter_errors(frame).next() {
        None => Ok(()),
        Some(e) => Err(ProtocolError::new(
            ErrorCode::Schema,
            format!("{kind} at `{}`: {e}", e.instance_path()),
        )),
    }
}
