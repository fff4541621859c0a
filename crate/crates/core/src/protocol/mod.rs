//! The realtime wire protocol.
//!
//! Each frame is one JSON object carrying a `type` discriminator and a
//! per-connection `seq`. [`decode`] checks size, syntax, the message type and
//! the shipped JSON schema, in that order, and reports the first failure as
//! an [`ErrorCode`]. Unknown top-level fields survive a decode/encode round
//! trip in [`Envelope::extra`].

mod audit;
mod convert;
mod schema;
mod view;
mod wire;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::session::SessionError;

pub use audit::{audit_teacher_frame, image_paths, redact_images, TEACHER_IMAGE_PATHS};
pub use convert::{board, event_message, roster_entry, score, snapshot, wire_challenge};
pub use schema::{message_schema, message_types, schema_document, validate};
pub use view::ClientView;
pub use wire::*;

pub const PROTOCOL_VERSION: &str = "1.0";
pub const MAX_FRAME_BYTES: usize = 4 * 1024 * 1024;
/// The machine-readable schema, as shipped.
pub const SCHEMA_JSON: &str = include_str!("../../schema/protocol.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    #[serde(rename = "E_MALFORMED")]
    Malformed,
    #[serde(rename = "E_SCHEMA")]
    Schema,
    #[serde(rename = "E_UNKNOWN_TYPE")]
    UnknownType,
    #[serde(rename = "E_OVERSIZE")]
    Oversize,
    #[serde(rename = "E_VERSION")]
    Version,
    #[serde(rename = "E_SEQUENCE")]
    Sequence,
    #[serde(rename = "E_PAUSED")]
    Paused,
    #[serde(rename = "E_UNKNOWN_TOKEN")]
    UnknownToken,
    #[serde(rename = "E_AUTH")]
    Auth,
    #[serde(rename = "E_CAPACITY")]
    Capacity,
    #[serde(rename = "E_INVALID_NAME")]
    InvalidName,
    #[serde(rename = "E_UNKNOWN_PLAYER")]
    UnknownPlayer,
    #[serde(rename = "E_UNKNOWN_SESSION")]
    UnknownSession,
    #[serde(rename = "E_BAD_FRAME")]
    BadFrame,
    #[serde(rename = "E_INVALID_LABEL")]
    InvalidLabel,
    #[serde(rename = "E_NOT_TEACHER")]
    NotTeacher,
    #[serde(rename = "E_RATE_LIMITED")]
    RateLimited,
    #[serde(rename = "E_DATASET_LOCKED")]
    DatasetLocked,
    #[serde(rename = "E_NOT_FOUND")]
    NotFound,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 19] = [
        ErrorCode::Malformed,
        ErrorCode::Schema,
        ErrorCode::UnknownType,
        ErrorCode::Oversize,
        ErrorCode::Version,
        ErrorCode::Sequence,
        ErrorCode::Paused,
        ErrorCode::UnknownToken,
        ErrorCode::Auth,
        ErrorCode::Capacity,
        ErrorCode::InvalidName,
        ErrorCode::UnknownPlayer,
        ErrorCode::UnknownSession,
        ErrorCode::BadFrame,
        ErrorCode::InvalidLabel,
        ErrorCode::NotTeacher,
        ErrorCode::RateLimited,
        ErrorCode::DatasetLocked,
        ErrorCode::NotFound,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Malformed => "E_MALFORMED",
            ErrorCode::Schema => "E_SCHEMA",
            ErrorCode::UnknownType => "E_UNKNOWN_TYPE",
            ErrorCode::Oversize => "E_OVERSIZE",
            ErrorCode::Version => "E_VERSION",
            ErrorCode::Sequence => "E_SEQUENCE",
            ErrorCode::Paused => "E_PAUSED",
            ErrorCode::UnknownToken => "E_UNKNOWN_TOKEN",
            ErrorCode::Auth => "E_AUTH",
            ErrorCode::Capacity => "E_CAPACITY",
            ErrorCode::InvalidName => "E_INVALID_NAME",
            ErrorCode::UnknownPlayer => "E_UNKNOWN_PLAYER",
            ErrorCode::UnknownSession => "E_UNKNOWN_SESSION",
            ErrorCode::BadFrame => "E_BAD_FRAME",
            ErrorCode::InvalidLabel => "E_INVALID_LABEL",
            ErrorCode::NotTeacher => "E_NOT_TEACHER",
            ErrorCode::RateLimited => "E_RATE_LIMITED",
            ErrorCode::DatasetLocked => "E_DATASET_LOCKED",
            ErrorCode::NotFound => "E_NOT_FOUND",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<&SessionError> for ErrorCode {
    fn from(e: &SessionError) -> Self {
        match e {
            SessionError::UnknownSession => ErrorCode::UnknownSession,
            SessionError::UnknownToken => ErrorCode::UnknownToken,
            SessionError::UnknownCredential => ErrorCode::Auth,
            SessionError::RegistryFull(_) | SessionError::CapacityExceeded(_) => ErrorCode::Capacity,
            SessionError::InvalidName(_) => ErrorCode::InvalidName,
            SessionError::UnknownPlayer => ErrorCode::UnknownPlayer,
            SessionError::Paused => ErrorCode::Paused,
            SessionError::InvalidLabel(_) => ErrorCode::InvalidLabel,
            SessionError::BadFrame(_) | SessionError::Inference(_) => ErrorCode::BadFrame,
            SessionError::InvalidConfig(_) => ErrorCode::Schema,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{code}: {detail}")]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub detail: String,
}

impl ProtocolError {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            detail: detail.into(),
        }
    }

    pub fn notice(&self, in_reply_to: Option<u64>) -> Message {
        Message::Error(ErrorNotice {
            code: self.code,
            detail: self.detail.clone(),
            in_reply_to,
        })
    }
}

impl From<&SessionError> for ProtocolError {
    fn from(e: &SessionError) -> Self {
        ProtocolError::new(e.into(), e.to_string())
    }
}

/// A message with its sequence number and any fields this version does not
/// know about.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub seq: u64,
    pub message: Message,
    pub extra: Map<String, Value>,
}

impl Envelope {
    pub fn new(seq: u64, message: Message) -> Self {
        Self {
            seq,
            message,
            extra: Map::new(),
        }
    }
}

fn message_fields(message: &Message) -> Map<String, Value> {
    match serde_json::to_value(message) {
        Ok(Value::Object(map)) => map,
        other => unreachable!("messages serialize to objects, got {other:?}"),
    }
}

#[derive(Serialize)]
struct Outgoing<'a> {
    #[serde(flatten)]
    message: &'a Message,
    seq: u64,
    #[serde(flatten)]
    extra: &'a Map<String, Value>,
}

/// Serializes an envelope. Extras that collide with a known field are dropped.
pub fn encode(envelope: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    let filtered;
    let extra = if envelope.extra.is_empty() {
        &envelope.extra
    } else {
        let known = message_fields(&envelope.message);
        filtered = envelope
            .extra
            .iter()
            .filter(|(k, _)| !known.contains_key(*k) && k.as_str() != "seq")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        &filtered
    };
    let out = Outgoing {
        message: &envelope.message,
        seq: envelope.seq,
        extra,
    };
    let bytes = serde_json::to_vec(&out).map_err(|e| ProtocolError::new(ErrorCode::Schema, e.to_string()))?;
    if bytes.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::new(
            ErrorCode::Oversize,
            format!("{} byte frame exceeds {MAX_FRAME_BYTES}", bytes.len()),
        ));
    }
    Ok(bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Envelope, ProtocolError> {
    if bytes.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::new(
            ErrorCode::Oversize,
            format!("{} byte frame exceeds {MAX_FRAME_BYTES}", bytes.len()),
        ));
    }
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| ProtocolError::new(ErrorCode::Malformed, e.to_string()))?;
    decode_value(value)
}

/// [`decode`] for an already parsed frame.
pub fn decode_value(value: Value) -> Result<Envelope, ProtocolError> {
    let Value::Object(fields) = value else {
        return Err(ProtocolError::new(ErrorCode::Malformed, "frame is not a JSON object"));
    };
    let kind = match fields.get("type") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ProtocolError::new(ErrorCode::Malformed, "`type` is not a string")),
        None => return Err(ProtocolError::new(ErrorCode::Malformed, "missing `type`")),
    };
    if !message_types().any(|t| t == kind) {
        return Err(ProtocolError::new(ErrorCode::UnknownType, format!("unknown message type `{kind}`")));
    }
    let value = Value::Object(fields);
    validate(&value)?;
    let Value::Object(mut fields) = value else {
        unreachable!("still an object")
    };
    let seq = fields
        .remove("seq")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ProtocolError::new(ErrorCode::Schema, "`seq` must be a non-negative integer"))?;
    let message: Message = serde_json::from_value(Value::Object(fields.clone()))
        .map_err(|e| ProtocolError::new(ErrorCode::Schema, e.to_string()))?;
    let known = message_fields(&message);
    fields.retain(|k, _| !known.contains_key(k));
    Ok(Envelope {
        seq,
        message,
        extra: fields,
    })
}

/// Accepts any minor version of the current major version.
pub fn check_version(version: &str) -> Result<(), ProtocolError> {
    let major = |v: &str| v.split('.').next().map(str::to_owned);
    if major(version) == major(PROTOCOL_VERSION) {
        Ok(())
    } else {
        Err(ProtocolError::new(
            ErrorCode::Version,
            format!("protocol {version} is not compatible with {PROTOCOL_VERSION}"),
        ))
    }
}

/// Enforces strictly increasing `seq` on one direction of one connection.
#[derive(Debug, Default, Clone)]
pub struct SeqCheck {
    last: Option<u64>,
}

impl SeqCheck {
    pub fn accept(&mut self, seq: u64) -> Result<(), ProtocolError> {
        if let Some(last) = self.last {
            if seq <= last {
                return Err(ProtocolError::new(
                    ErrorCode::Sequence,
                    format!("seq {seq} does not follow {last}"),
                ));
            }
        }
        self.last = Some(seq);
        Ok(())
    }
}

/// Validates the client-to-server half of one connection: frames must
/// decode, carry increasing `seq`, be client messages, and start with exactly
/// one `hello` of a compatible version.
#[derive(Debug, Default, Clone)]
pub struct InboundCheck {
    seq: SeqCheck,
    greeted: bool,
}

impl InboundCheck {
    pub fn accept(&mut self, bytes: &[u8]) -> Result<Envelope, ProtocolError> {
        let envelope = decode(bytes)?;
        self.seq.accept(envelope.seq)?;
        let message = &envelope.message;
        if !message.from_client() {
            return Err(ProtocolError::new(
                ErrorCode::Sequence,
                format!("`{}` is sent by the server only", message.type_name()),
            ));
        }
        match (message, self.greeted) {
            (Message::Hello(hello), false) => {
                check_version(&hello.protocol_version)?;
                self.greeted = true;
            }
            (Message::Hello(_), true) => {
                return Err(ProtocolError::new(ErrorCode::Sequence, "repeated hello"));
            }
            (_, false) => {
                return Err(ProtocolError::new(ErrorCode::Sequence, "first message must be hello"));
            }
            _ => {}
        }
        Ok(envelope)
    }
}
