//! Protocol corpora: random schema-valid messages generated straight from
//! the shipped JSON schema, and a fixture of malformed frames with the error
//! code each must produce.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Map, Value};

const MAX_DEPTH: usize = 8;
const SAFE_INT: u64 = 9_007_199_254_740_991;

/// Random instances of one schema document's messages.
pub struct Generator<'a, R: Rng> {
    document: &'a Value,
    rng: R,
}

impl<'a, R: Rng> Generator<'a, R> {
    pub fn new(document: &'a Value, rng: R) -> Self {
        Self { document, rng }
    }

    pub fn message_types(&self) -> Vec<&'a str> {
        let doc: &'a Value = self.document;
        doc["messages"]
            .as_object()
            .map(|m| m.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// One message of type `name`, optionally with unknown extra fields.
    pub fn message(&mut self, name: &str, with_extras: bool) -> Value {
        let schema = self.document["messages"][name].clone();
        let mut value = self.value(&schema, 0);
        if with_extras {
            let obj = value.as_object_mut().expect("messages are objects");
            for i in 0..self.rng.random_range(1..=3) {
                let extra = self.arbitrary(2);
                obj.insert(format!("x_ext_{i}"), extra);
            }
        }
        value
    }

    fn resolve(&self, reference: &str) -> Value {
        let pointer = reference.strip_prefix('#').expect("local reference");
        self.document
            .pointer(pointer)
            .unwrap_or_else(|| panic!("dangling reference {reference}"))
            .clone()
    }

    fn value(&mut self, schema: &Value, depth: usize) -> Value {
        if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
            let target = self.resolve(r);
            return self.value(&target, depth);
        }
        if let Some(c) = schema.get("const") {
            return c.clone();
        }
        if let Some(options) = schema.get("enum").and_then(Value::as_array) {
            return options.choose(&mut self.rng).expect("non-empty enum").clone();
        }
        if let Some(branches) = schema.get("oneOf").and_then(Value::as_array) {
            let branch = branches.choose(&mut self.rng).expect("non-empty oneOf").clone();
            return self.value(&branch, depth);
        }
        match schema.get("type").and_then(Value::as_str) {
            Some("object") => self.object(schema, depth),
            Some("array") => {
                let items = schema.get("items").cloned().unwrap_or(json!({}));
                let len = if depth >= MAX_DEPTH { 0 } else { self.rng.random_range(0..=3) };
                Value::Array((0..len).map(|_| self.value(&items, depth + 1)).collect())
            }
            Some("string") => self.string(schema),
            Some("integer") => {
                let min = schema.get("minimum").and_then(Value::as_u64).unwrap_or(0);
                let max = schema.get("maximum").and_then(Value::as_u64).unwrap_or(SAFE_INT);
                let v = match self.rng.random_range(0..4) {
                    0 => min,
                    1 => max,
                    _ => self.rng.random_range(min..=max.min(min + 1000)),
                };
                Value::from(v)
            }
            Some("number") => {
                // multiples of 1/64 are exact in f32, and their shortest f32
                // text is the exact decimal, so the JSON survives verbatim
                let min = schema.get("minimum").and_then(Value::as_f64).unwrap_or(-1e3);
                let max = schema.get("maximum").and_then(Value::as_f64).unwrap_or(1e3);
                let lo = (min * 64.0).ceil() as i64;
                let hi = (max * 64.0).floor() as i64;
                Value::from(self.rng.random_range(lo..=hi) as f64 / 64.0)
            }
            Some("boolean") => Value::Bool(self.rng.random()),
            other => panic!("unsupported schema type {other:?}"),
        }
    }

    fn string(&mut self, schema: &Value) -> Value {
        if schema.get("contentEncoding").and_then(Value::as_str) == Some("base64") {
            let len = self.rng.random_range(0..48);
            let bytes: Vec<u8> = (0..len).map(|_| self.rng.random()).collect();
            return Value::String(STANDARD.encode(bytes));
        }
        if let Some(examples) = schema.get("examples").and_then(Value::as_array) {
            return examples.choose(&mut self.rng).expect("non-empty examples").clone();
        }
        let min = schema.get("minLength").and_then(Value::as_u64).unwrap_or(0) as usize;
        let max = schema.get("maxLength").and_then(Value::as_u64).unwrap_or(24) as usize;
        let len = self.rng.random_range(min..=max.min(min + 24));
        const ALPHABET: &[char] = &[
            'a', 'b', 'z', 'A', 'Q', '0', '9', ' ', '-', '_', '"', '\\', '/', '\n', '\t', 'é', 'ß', '猫', '🦙',
            '\u{7f}', '\u{0}',
        ];
        Value::String((0..len).map(|_| *ALPHABET.choose(&mut self.rng).unwrap()).collect())
    }

    fn object(&mut self, schema: &Value, depth: usize) -> Value {
        let empty = Map::new();
        let props = schema.get("properties").and_then(Value::as_object).unwrap_or(&empty);
        let required: Vec<&str> = string_list(schema.get("required"));
        let mut out = Map::new();
        for (name, sub) in props {
            if required.contains(&name.as_str()) || self.rng.random_bool(0.5) {
                let v = self.value(sub, depth + 1);
                out.insert(name.clone(), v);
            }
        }
        // conditional requirements can cascade, so settle them to a fixpoint
        loop {
            let mut missing: Vec<String> = Vec::new();
            for clause in schema.get("allOf").and_then(Value::as_array).into_iter().flatten() {
                if matches(&clause["if"], &out) {
                    for name in string_list(clause["then"].get("required")) {
                        if !out.contains_key(name) {
                            missing.push(name.to_string());
                        }
                    }
                }
            }
            if let Some(deps) = schema.get("dependentRequired").and_then(Value::as_object) {
                for (key, needs) in deps {
                    if out.contains_key(key) {
                        for name in string_list(Some(needs)) {
                            if !out.contains_key(name) {
                                missing.push(name.to_string());
                            }
                        }
                    }
                }
            }
            if missing.is_empty() {
                break;
            }
            for name in missing {
                let v = self.value(&props[&name], depth + 1);
                out.insert(name, v);
            }
        }
        Value::Object(out)
    }

    /// Any JSON value, for unknown fields.
    fn arbitrary(&mut self, depth: usize) -> Value {
        match self.rng.random_range(0..if depth == 0 { 4 } else { 6 }) {
            0 => Value::Bool(self.rng.random()),
            1 => Value::from(self.rng.random_range(-1000i64..1000)),
            2 => Value::from(self.rng.random_range(-4096i64..4096) as f64 / 64.0),
            3 => self.string(&json!({})),
            4 => Value::Array((0..self.rng.random_range(0..3)).map(|_| self.arbitrary(depth - 1)).collect()),
            _ => {
                let mut m = Map::new();
                for i in 0..self.rng.random_range(0..3) {
                    m.insert(format!("k{i}"), self.arbitrary(depth - 1));
                }
                Value::Object(m)
            }
        }
    }
}

fn string_list(v: Option<&Value>) -> Vec<&str> {
    v.and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default()
}

/// The subset of `if` the schema uses: `const`/`enum` on properties, which
/// only constrain properties that are present, plus `required`.
fn matches(condition: &Value, obj: &Map<String, Value>) -> bool {
    if string_list(condition.get("required")).iter().any(|r| !obj.contains_key(*r)) {
        return false;
    }
    let Some(props) = condition.get("properties").and_then(Value::as_object) else {
        return true;
    };
    props.iter().all(|(name, rule)| match obj.get(name) {
        None => true,
        Some(v) => {
            rule.get("const").is_none_or(|c| c == v)
                && rule
                    .get("enum")
                    .and_then(Value::as_array)
                    .is_none_or(|options| options.contains(v))
        }
    })
}

#[derive(Debug, Clone, Deserialize)]
struct FixtureCase {
    name: String,
    frames: Vec<String>,
    code: String,
}

/// A sequence of inbound frames on one connection; the last must fail with
/// `code` and every earlier one must be accepted.
#[derive(Debug, Clone)]
pub struct MalformedCase {
    pub name: String,
    pub frames: Vec<Vec<u8>>,
    pub code: String,
}

/// The malformed-frame fixture plus cases that cannot be written as JSON
/// text: invalid UTF-8 and a frame one byte over the size cap.
pub fn malformed_corpus(max_frame_bytes: usize) -> Vec<MalformedCase> {
    let fixture: Vec<FixtureCase> =
        serde_json::from_str(include_str!("../fixtures/malformed.json")).expect("fixture is valid JSON");
    let mut cases: Vec<MalformedCase> = fixture
        .into_iter()
        .map(|c| MalformedCase {
            name: c.name,
            frames: c.frames.into_iter().map(String::into_bytes).collect(),
            code: c.code,
        })
        .collect();
    cases.push(MalformedCase {
        name: "invalid utf-8".into(),
        frames: vec![b"{\"type\":\"pause\",\"seq\":1,\"paused\":\"\xff\"}".to_vec()],
        code: "E_MALFORMED".into(),
    });
    let head = br#"{"type":"frame_submit","seq":1,"client_ts":0,"image":""#;
    let tail = br#""}"#;
    let mut big = head.to_vec();
    let fill = max_frame_bytes + 1 - head.len() - tail.len();
    big.extend(std::iter::repeat_n(b'A', fill - fill % 4));
    big.extend(std::iter::repeat_n(b'=', fill % 4));
    big.extend_from_slice(tail);
    assert_eq!(big.len(), max_frame_bytes + 1);
    cases.push(MalformedCase {
        name: "one byte over the frame cap".into(),
        frames: vec![big],
        code: "E_OVERSIZE".into(),
    });
    cases
}

/// Checks one generated frame: it is schema-valid, decodes, and both the
/// typed envelope and the JSON survive another encode/decode.
pub fn check_round_trip(value: &Value) -> Result<(), String> {
    use bm_core::protocol::{decode, encode, validate};

    validate(value).map_err(|e| format!("generator produced an invalid frame: {e}"))?;
    let bytes = serde_json::to_vec(value).map_err(|e| e.to_string())?;
    let envelope = decode(&bytes).map_err(|e| format!("decode: {e}"))?;
    let again = encode(&envelope).map_err(|e| format!("encode: {e}"))?;
    let back = decode(&again).map_err(|e| format!("re-decode: {e}"))?;
    if back != envelope {
        return Err(format!("typed mismatch\n{envelope:?}\n{back:?}"));
    }
    let reparsed: Value = serde_json::from_slice(&again).map_err(|e| e.to_string())?;
    if &reparsed != value {
        return Err(format!("JSON mismatch\n{value}\n{reparsed}"));
    }
    Ok(())
}

/// Feeds a case through a fresh inbound checker; returns the code the last
/// frame produced.
pub fn check_malformed(case: &MalformedCase) -> Result<(), String> {
    use bm_core::protocol::InboundCheck;

    let mut check = InboundCheck::default();
    let (last, earlier) = case.frames.split_last().ok_or("case has no frames")?;
    for (i, frame) in earlier.iter().enumerate() {
        check
            .accept(frame)
            .map_err(|e| format!("frame {i} should be accepted, got {e}"))?;
    }
    match check.accept(last) {
        Ok(_) => Err(format!("accepted, expected {}", case.code)),
        Err(e) if e.code.as_str() == case.code => Ok(()),
        Err(e) => Err(format!("got {e}, expected {}", case.code)),
    }
}
