//! Event records and their newline-delimited JSON encoding.
//!
//! Each line is an object `{"v":1,"seq":..,"at":..,"actor":..,"kind":..,"payload":{..}}`
//! with payload keys in sorted order.
//! `actor` is `"system"` or `"staff:<id>"`.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{Decision, ExtensionRequest, RequestId, Student};
use crate::notifier::{JobEffect, JobId, JobSpec};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Actor {
    System,
    Staff(String),
}

impl Actor {
    pub fn staff_id(&self) -> Option<&str> {
        match self {
            Actor::System => None,
            Actor::Staff(id) => Some(id),
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::System => f.write_str("system"),
            Actor::Staff(id) => write!(f, "staff:{id}"),
        }
    }
}

impl Serialize for Actor {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        match text.as_str() {
            "system" => Ok(Actor::System),
            other => other
                .strip_prefix("staff:")
                .filter(|id| !id.is_empty())
                .map(|id| Actor::Staff(id.to_string()))
                .ok_or_else(|| serde::de::Error::custom(format!("bad actor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestReceived {
    pub request: ExtensionRequest,
    pub student: Student,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestInvalid {
    pub request_id: RequestId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionMade {
    pub request_id: RequestId,
    pub decision: Decision,
    pub email: JobSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaffDecision {
    pub request_id: RequestId,
    pub approve: bool,
    pub note: String,
    pub email: JobEffect,
}

/// Staff requeue of a failed email.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmailQueued {
    pub job_id: JobId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmailSent {
    pub job_id: JobId,
    pub message_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmailFailed {
    pub job_id: JobId,
    pub error: String,
    /// No further attempts will be made.
    pub final_attempt: bool,
    pub next_attempt_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmsApplied {
    pub request_id: RequestId,
    pub new_due_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmsFailed {
    pub request_id: RequestId,
    pub error: String,
    pub retryable: bool,
    pub next_attempt_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartnerMirrored {
    pub origin_id: RequestId,
    pub request: ExtensionRequest,
    pub decision: Decision,
    pub email: JobSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub request_id: Option<RequestId>,
    pub message: String,
}

macro_rules! payloads {
    ($($kind:ident),+ $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub enum EventPayload {
            $($kind($kind),)+
        }

        impl EventPayload {
            pub fn kind(&self) -> &'static str {
                match self {
                    $(EventPayload::$kind(_) => stringify!($kind),)+
                }
            }

            fn to_value(&self) -> serde_json::Result<Value> {
                match self {
                    $(EventPayload::$kind(p) => serde_json::to_value(p),)+
                }
            }

            fn from_value(kind: &str, value: Value) -> Result<Self, DecodeError> {
                match kind {
                    $(stringify!($kind) => serde_json::from_value(value)
                        .map(EventPayload::$kind)
                        .map_err(|e| DecodeError::Malformed(e.to_string())),)+
                    other => Err(DecodeError::UnknownKind(other.to_string())),
                }
            }
        }

        $(impl From<$kind> for EventPayload {
            fn from(p: $kind) -> Self {
                EventPayload::$kind(p)
            }
        })+
    };
}

payloads!(
    RequestReceived,
    RequestInvalid,
    DecisionMade,
    StaffDecision,
    EmailQueued,
    EmailSent,
    EmailFailed,
    LmsApplied,
    LmsFailed,
    PartnerMirrored,
    Warning,
);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub actor: Actor,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    UnknownKind(String),
    UnsupportedVersion(u32),
    Malformed(String),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::UnknownKind(kind) => write!(f, "unknown event kind {kind:?}"),
            DecodeError::UnsupportedVersion(v) => write!(f, "unsupported log version {v}"),
            DecodeError::Malformed(msg) => write!(f, "malformed event: {msg}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    v: u32,
    seq: u64,
    at: DateTime<Utc>,
    actor: Actor,
    kind: String,
    payload: Value,
}

impl Event {
    pub fn kind(&self) -> &'static str {
        self.payload.kind()
    }

    /// The JSON object for this event (no trailing newline).
    pub fn to_json(&self) -> String {
        let line = Line {
            v: LOG_VERSION,
            seq: self.seq,
            at: self.at,
            actor: self.actor.clone(),
            kind: self.kind().to_string(),
            payload: self.payload.to_value().expect("event payloads serialize"),
        };
        serde_json::to_string(&line).expect("event lines serialize")
    }

    pub fn to_value(&self) -> Value {
        serde_json::from_str(&self.to_json()).expect("event json round-trips")
    }

    pub fn from_json(text: &str) -> Result<Self, DecodeError> {
        let line: Line =
            serde_json::from_str(text).map_err(|e| DecodeError::Malformed(e.to_string()))?;
        if line.v != LOG_VERSION {
            return Err(DecodeError::UnsupportedVersion(line.v));
        }
        Ok(Self {
            seq: line.seq,
            at: line.at,
            actor: line.actor,
            payload: EventPayload::from_value(&line.kind, line.payload)?,
        })
    }
}
