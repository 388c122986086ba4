//! Domain types shared by every stage of the extension workflow.

use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::machine::RequestStatus;

/// Errors raised when constructing validated domain values.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("student id {0:?} contains no digits")]
    NoDigits(String),
    #[error("student id {0:?} must have 3 to 12 digits")]
    SidLength(String),
    #[error("email {0:?} must contain exactly one '@' with text on both sides")]
    BadEmail(String),
    #[error("student name must not be empty")]
    EmptyName,
}

/// A student identifier: 3 to 12 ASCII digits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StudentId(String);

impl StudentId {
    /// Keeps only the digits of `raw`; fails when nothing (or too much) is left.
    pub fn normalize(raw: &str) -> Result<Self, ModelError> {
        let digits: String = raw.chars().filter(char::is_ascii_digit).collect();
        if digits.is_empty() {
            return Err(ModelError::NoDigits(raw.to_string()));
        }
        if !(3..=12).contains(&digits.len()) {
            return Err(ModelError::SidLength(raw.to_string()));
        }
        Ok(Self(digits))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for StudentId {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        let id = Self::normalize(&value)?;
        if id.0 != value {
            return Err(ModelError::NoDigits(value));
        }
        Ok(id)
    }
}

impl From<StudentId> for String {
    fn from(value: StudentId) -> Self {
        value.0
    }
}

impl fmt::Display for StudentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercased email address with exactly one `@`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EmailAddress(String);

impl EmailAddress {
    pub fn parse(raw: &str) -> Result<Self, ModelError> {
        let lowered = raw.trim().to_lowercase();
        let mut parts = lowered.split('@');
        let ok = match (parts.next(), parts.next(), parts.next()) {
            (Some(local), Some(domain), None) => {
                !local.is_empty()
                    && !domain.is_empty()
                    && !lowered.chars().any(char::is_whitespace)
            }
            _ => false,
        };
        if !ok {
            return Err(ModelError::BadEmail(raw.to_string()));
        }
        Ok(Self(lowered))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for EmailAddress {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<EmailAddress> for String {
    fn from(value: EmailAddress) -> Self {
        value.0
    }
}

impl fmt::Display for EmailAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Student {
    pub id: StudentId,
    pub name: String,
    pub email: EmailAddress,
    pub dsp_registered: bool,
}

impl Student {
    pub fn new(
        id: StudentId,
        name: impl Into<String>,
        email: EmailAddress,
        dsp_registered: bool,
    ) -> Result<Self, ModelError> {
        let name = name.into().trim().to_string();
        if name.is_empty() {
            return Err(ModelError::EmptyName);
        }
        Ok(Self {
            id,
            name,
            email,
            dsp_registered,
        })
    }
}

/// One assignment of the course catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    pub slug: String,
    pub display_name: String,
    pub due_at: DateTime<Utc>,
    /// `None` means no catalog limit.
    #[serde(default)]
    pub max_extension_days: Option<u32>,
}

/// Opaque request identifier, derived from the idempotency key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub String);

impl RequestId {
    pub fn from_key(key: &str) -> Self {
        Self(format!("req-{}", &key[..16]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Partner named on a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartnerLink {
    pub email: EmailAddress,
    pub sid: StudentId,
}

/// Who decided a request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    Policy,
    Staff(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Automatic,
    PendingApproval,
    Deny,
}

/// The policy engine's verdict for one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: Outcome,
    pub granted_days: u32,
    pub rule_fired: String,
}

/// Formats a timestamp the way every artifact of this crate does (RFC 3339, seconds, `Z`).
pub fn format_ts(at: &DateTime<Utc>) -> String {
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Stable hash of (student, assignment, submitted_at), hex encoded.
pub fn idempotency_key(student: &StudentId, assignment: &str, submitted_at: &DateTime<Utc>) -> String {
    hash_parts(&[student.as_str(), assignment, &format_ts(submitted_at)])
}

pub(crate) fn hash_parts(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(part.as_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionRequest {
    pub id: RequestId,
    pub student: StudentId,
    pub assignment: String,
    pub days_requested: u32,
    pub reason: String,
    pub partner: Option<PartnerLink>,
    pub submitted_at: DateTime<Utc>,
    pub status: RequestStatus,
    pub decided_by: Option<DecidedBy>,
    pub idempotency_key: String,
    /// Set on requests mirrored onto a partner.
    #[serde(default)]
    pub mirror_of: Option<RequestId>,
}

impl ExtensionRequest {
    /// A fresh request in `Received` state with its key and id derived.
    pub fn received(
        student: StudentId,
        assignment: impl Into<String>,
        days_requested: u32,
        reason: impl Into<String>,
        partner: Option<PartnerLink>,
        submitted_at: DateTime<Utc>,
    ) -> Self {
        let assignment = assignment.into();
        let key = idempotency_key(&student, &assignment, &submitted_at);
        Self {
            id: RequestId::from_key(&key),
            student,
            assignment,
            days_requested,
            reason: reason.into(),
            partner,
            submitted_at,
            status: RequestStatus::Received,
            decided_by: None,
            idempotency_key: key,
            mirror_of: None,
        }
    }
}

/// What a viewer is allowed to see of sensitive fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewerRole {
    Full,
    Restricted,
}

/// A request as shown to a viewer; `dsp_registered` is `None` when hidden.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestView {
    #[serde(flatten)]
    pub request: ExtensionRequest,
    pub dsp_registered: Option<bool>,
}

impl RequestView {
    pub fn new(request: ExtensionRequest, dsp_registered: bool) -> Self {
        Self {
            request,
            dsp_registered: Some(dsp_registered),
        }
    }
}

/// Blanks the reason and DSP flag for restricted viewers; identity for full viewers.
pub fn redact(view: RequestView, role: ViewerRole) -> RequestView {
    match role {
        ViewerRole::Full => view,
        ViewerRole::Restricted => RequestView {
            request: ExtensionRequest {
                reason: String::new(),
                ..view.request
            },
            dsp_registered: None,
        },
    }
}
