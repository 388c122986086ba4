//! Form-response intake.
//!
//! Rows come from a CSV export of the request form or from JSON submissions.
//! Question texts are matched after trimming, case-folding and collapsing
//! internal whitespace, so cosmetic edits to the form do not break intake.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Assignment, EmailAddress, ExtensionRequest, ModelError, PartnerLink, Student, StudentId,
};

pub const DEFAULT_HARD_CAP_DAYS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalField {
    Sid,
    Name,
    Email,
    Dsp,
    Assignment,
    Days,
    Reason,
    HasPartner,
    PartnerContact,
}

impl CanonicalField {
    pub fn is_mandatory(self) -> bool {
        matches!(
            self,
            CanonicalField::Sid | CanonicalField::Assignment | CanonicalField::Days
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            CanonicalField::Sid => "sid",
            CanonicalField::Name => "name",
            CanonicalField::Email => "email",
            CanonicalField::Dsp => "dsp",
            CanonicalField::Assignment => "assignment",
            CanonicalField::Days => "days",
            CanonicalField::Reason => "reason",
            CanonicalField::HasPartner => "has_partner",
            CanonicalField::PartnerContact => "partner_contact",
        }
    }
}

impl fmt::Display for CanonicalField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("field mapping: {0}")]
    BadMapping(String),
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("unparseable timestamp {0:?}")]
    BadTimestamp(String),
}

/// Compares question texts ignoring case and whitespace differences.
pub fn normalize_question(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Question texts of the default request form.
pub const DEFAULT_QUESTIONS: [(CanonicalField, &str); 9] = [
    (CanonicalField::Sid, "What is your student ID?"),
    (CanonicalField::Name, "What is your name?"),
    (CanonicalField::Email, "Email Address"),
    (
        CanonicalField::Dsp,
        "Are you registered with the disabled students program?",
    ),
    (
        CanonicalField::Assignment,
        "Which assignment would you like an extension on?",
    ),
    (
        CanonicalField::Days,
        "How many days would you like an extension for?",
    ),
    (CanonicalField::Reason, "Why do you need this extension?"),
    (CanonicalField::HasPartner, "Are you working with a partner?"),
    (
        CanonicalField::PartnerContact,
        "What is your partner's email and student ID?",
    ),
];

/// Maps form question texts onto canonical fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMapping {
    questions: BTreeMap<CanonicalField, String>,
    timestamp_header: String,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self::new(
            DEFAULT_QUESTIONS
                .iter()
                .map(|(field, q)| (*field, q.to_string())),
            "Timestamp",
        )
        .expect("default mapping is valid")
    }
}

impl FieldMapping {
    pub fn new(
        questions: impl IntoIterator<Item = (CanonicalField, String)>,
        timestamp_header: impl Into<String>,
    ) -> Result<Self, IngestError> {
        let mut map = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for (field, question) in questions {
            let key = normalize_question(&question);
            if key.is_empty() {
                return Err(IngestError::BadMapping(format!("empty question for {field}")));
            }
            if let Some(other) = seen.insert(key.clone(), field) {
                return Err(IngestError::BadMapping(format!(
                    "question {question:?} mapped to both {other} and {field}"
                )));
            }
            if map.insert(field, key).is_some() {
                return Err(IngestError::BadMapping(format!("{field} mapped twice")));
            }
        }
        for field in [CanonicalField::Sid, CanonicalField::Assignment, CanonicalField::Days] {
            if !map.contains_key(&field) {
                return Err(IngestError::BadMapping(format!("mandatory field {field} is unmapped")));
            }
        }
        Ok(Self {
            questions: map,
            timestamp_header: normalize_question(&timestamp_header.into()),
        })
    }

    /// Default questions with some of them replaced.
    pub fn with_overrides(
        overrides: &BTreeMap<CanonicalField, String>,
        timestamp_header: Option<&str>,
    ) -> Result<Self, IngestError> {
        let mut questions: BTreeMap<CanonicalField, String> = DEFAULT_QUESTIONS
            .iter()
            .map(|(f, q)| (*f, q.to_string()))
            .collect();
        questions.extend(overrides.iter().map(|(f, q)| (*f, q.clone())));
        Self::new(questions, timestamp_header.unwrap_or("Timestamp"))
    }

    pub fn fields(&self) -> impl Iterator<Item = (CanonicalField, &str)> {
        self.questions.iter().map(|(f, q)| (*f, q.as_str()))
    }
}

/// One form response: question text to answer text, in form order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormRow {
    pub submitted_at: DateTime<Utc>,
    pub answers: Vec<(String, String)>,
}

/// Extracted but not yet validated answers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawSubmission {
    pub sid: String,
    pub name: String,
    pub email: String,
    pub dsp: String,
    pub assignment: String,
    pub days: String,
    pub reason: String,
    pub has_partner: String,
    pub partner_contact: String,
    pub submitted_at: Option<DateTime<Utc>>,
}

impl RawSubmission {
    fn slot(&mut self, field: CanonicalField) -> &mut String {
        match field {
            CanonicalField::Sid => &mut self.sid,
            CanonicalField::Name => &mut self.name,
            CanonicalField::Email => &mut self.email,
            CanonicalField::Dsp => &mut self.dsp,
            CanonicalField::Assignment => &mut self.assignment,
            CanonicalField::Days => &mut self.days,
            CanonicalField::Reason => &mut self.reason,
            CanonicalField::HasPartner => &mut self.has_partner,
            CanonicalField::PartnerContact => &mut self.partner_contact,
        }
    }
}

pub fn parse_form_row(row: &FormRow, mapping: &FieldMapping) -> Result<RawSubmission, IngestError> {
    let answers: Vec<(String, &str)> = row
        .answers
        .iter()
        .map(|(q, a)| (normalize_question(q), a.as_str()))
        .collect();
    let mut raw = RawSubmission {
        submitted_at: Some(row.submitted_at),
        ..RawSubmission::default()
    };
    for (field, question) in mapping.fields() {
        match answers.iter().find(|(q, _)| q == question) {
            Some((_, answer)) => *raw.slot(field) = answer.to_string(),
            None if field.is_mandatory() => {
                return Err(IngestError::MissingField(field.name().to_string()))
            }
            None => {}
        }
    }
    Ok(raw)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NormalizeError {
    #[error("days must be a whole number between 1 and {cap}, got {value:?}")]
    BadDays { value: String, cap: u32 },
    #[error("bad student id: {0}")]
    BadSid(ModelError),
    #[error("bad email: {0}")]
    BadEmail(ModelError),
    #[error("name must not be empty")]
    BadName,
    #[error("no assignment given")]
    NoAssignment,
    #[error("unknown assignment {0:?}")]
    UnknownAssignment(String),
    #[error("ambiguous assignment {answer:?}: matches {candidates:?}")]
    AmbiguousAssignment {
        answer: String,
        candidates: Vec<String>,
    },
    #[error("missing submission timestamp")]
    NoTimestamp,
}

impl NormalizeError {
    /// Canonical field the error refers to.
    pub fn field(&self) -> &'static str {
        match self {
            NormalizeError::BadDays { .. } => "days",
            NormalizeError::BadSid(_) => "sid",
            NormalizeError::BadEmail(_) => "email",
            NormalizeError::BadName => "name",
            NormalizeError::NoAssignment
            | NormalizeError::UnknownAssignment(_)
            | NormalizeError::AmbiguousAssignment { .. } => "assignment",
            NormalizeError::NoTimestamp => "submitted_at",
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            NormalizeError::BadDays { .. } => "BadDays",
            NormalizeError::BadSid(_) => "BadSid",
            NormalizeError::BadEmail(_) => "BadEmail",
            NormalizeError::BadName => "BadName",
            NormalizeError::NoAssignment => "NoAssignment",
            NormalizeError::UnknownAssignment(_) => "UnknownAssignment",
            NormalizeError::AmbiguousAssignment { .. } => "AmbiguousAssignment",
            NormalizeError::NoTimestamp => "NoTimestamp",
        }
    }
}

/// A validated submission: the requester plus one draft per named assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub student: Student,
    pub drafts: Vec<ExtensionRequest>,
    pub warnings: Vec<String>,
}

pub fn is_affirmative(answer: &str) -> bool {
    matches!(answer.trim().to_lowercase().as_str(), "yes" | "y" | "true")
}

/// Parses a day count such as `"3"`, `" 3 days "` or `"1 day"`.
pub fn parse_days(raw: &str, hard_cap: u32) -> Result<u32, NormalizeError> {
    let bad = || NormalizeError::BadDays {
        value: raw.to_string(),
        cap: hard_cap,
    };
    let lowered = raw.trim().to_lowercase();
    let number = lowered
        .strip_suffix("days")
        .or_else(|| lowered.strip_suffix("day"))
        .unwrap_or(&lowered)
        .trim();
    let days: i64 = number.parse().map_err(|_| bad())?;
    if days < 1 || days > i64::from(hard_cap) {
        return Err(bad());
    }
    Ok(days as u32)
}

/// Splits a free-text assignment answer on commas and semicolons.
pub fn split_assignments(answer: &str) -> Vec<&str> {
    answer
        .split([',', ';'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Finds the partner's email and student id in free text like `"bo@uni.edu 3034567"`.
pub fn parse_partner_contact(text: &str) -> Option<PartnerLink> {
    let tokens: Vec<&str> = text
        .split(|c: char| c.is_whitespace() || matches!(c, ',' | ';' | '/' | '(' | ')' | '<' | '>'))
        .filter(|t| !t.is_empty())
        .collect();
    let email = tokens
        .iter()
        .find(|t| t.contains('@'))
        .and_then(|t| EmailAddress::parse(t.trim_end_matches('.')).ok())?;
    let sid = tokens
        .iter()
        .filter(|t| !t.contains('@'))
        .find_map(|t| {
            let t = t.trim_matches(|c: char| !c.is_ascii_digit());
            (!t.is_empty() && t.chars().all(|c| c.is_ascii_digit()))
                .then(|| StudentId::normalize(t).ok())
                .flatten()
        })?;
    Some(PartnerLink { email, sid })
}

/// Resolves a free-text answer to a catalog slug.
///
/// Exact slug, then exact display name, then a unique case-insensitive match
/// on either.
pub fn match_assignment(answer: &str, catalog: &[Assignment]) -> Result<String, NormalizeError> {
    let answer = answer.trim();
    if let Some(a) = catalog.iter().find(|a| a.slug == answer) {
        return Ok(a.slug.clone());
    }
    if let Some(a) = catalog.iter().find(|a| a.display_name == answer) {
        return Ok(a.slug.clone());
    }
    let folded = answer.to_lowercase();
    let candidates: Vec<String> = catalog
        .iter()
        .filter(|a| {
            a.slug.to_lowercase() == folded || a.display_name.trim().to_lowercase() == folded
        })
        .map(|a| a.slug.clone())
        .collect();
    match candidates.len() {
        1 => Ok(candidates.into_iter().next().unwrap_or_default()),
        0 => Err(NormalizeError::UnknownAssignment(answer.to_string())),
        _ => Err(NormalizeError::AmbiguousAssignment {
            answer: answer.to_string(),
            candidates,
        }),
    }
}

pub fn normalize_submission(
    raw: &RawSubmission,
    catalog: &[Assignment],
    hard_cap: u32,
) -> Result<Normalized, NormalizeError> {
    let sid = StudentId::normalize(&raw.sid).map_err(NormalizeError::BadSid)?;
    let days = parse_days(&raw.days, hard_cap)?;
    let email = EmailAddress::parse(&raw.email).map_err(NormalizeError::BadEmail)?;
    let student = Student::new(sid.clone(), raw.name.clone(), email, is_affirmative(&raw.dsp))
        .map_err(|_| NormalizeError::BadName)?;
    let submitted_at = raw.submitted_at.ok_or(NormalizeError::NoTimestamp)?;

    let answers = split_assignments(&raw.assignment);
    if answers.is_empty() {
        return Err(NormalizeError::NoAssignment);
    }
    let mut slugs: Vec<String> = Vec::with_capacity(answers.len());
    for answer in answers {
        let slug = match_assignment(answer, catalog)?;
        if !slugs.contains(&slug) {
            slugs.push(slug);
        }
    }

    let mut warnings = Vec::new();
    let partner = if is_affirmative(&raw.has_partner) {
        let parsed = parse_partner_contact(&raw.partner_contact);
        if parsed.is_none() {
            warnings.push(format!(
                "BadPartner: could not read partner email and student id from {:?}; continuing without partner",
                raw.partner_contact
            ));
        }
        parsed
    } else {
        None
    };

    let reason = raw.reason.trim().to_string();
    let drafts = slugs
        .into_iter()
        .map(|slug| {
            ExtensionRequest::received(
                sid.clone(),
                slug,
                days,
                reason.clone(),
                partner.clone(),
                submitted_at,
            )
        })
        .collect();
    Ok(Normalized {
        student,
        drafts,
        warnings,
    })
}

/// Accepts RFC 3339 or the `M/D/YYYY H:MM:SS` form used by spreadsheet exports (as UTC).
pub fn parse_timestamp(raw: &str) -> Result<DateTime<Utc>, IngestError> {
    let raw = raw.trim();
    if let Ok(at) = DateTime::parse_from_rfc3339(raw) {
        return Ok(at.with_timezone(&Utc));
    }
    for format in ["%m/%d/%Y %H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, format) {
            return Ok(naive.and_utc());
        }
    }
    Err(IngestError::BadTimestamp(raw.to_string()))
}

/// A data row of a CSV export; `row` is 1-based and excludes the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvRow {
    pub row: usize,
    pub parsed: Result<FormRow, IngestError>,
}

/// Splits a CSV export into form rows. Only an unreadable file is an error;
/// per-row problems are returned alongside the row number.
pub fn read_csv(bytes: &[u8], mapping: &FieldMapping) -> Result<Vec<CsvRow>, IngestError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| IngestError::MalformedCsv(format!("not UTF-8: {e}")))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| IngestError::MalformedCsv(e.to_string()))?
        .clone();
    if headers.iter().all(|h| h.trim().is_empty()) {
        return Err(IngestError::MalformedCsv("missing header row".into()));
    }
    let timestamp_col = headers
        .iter()
        .position(|h| normalize_question(h) == mapping.timestamp_header);

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let parsed = record
            .map_err(|e| IngestError::MalformedCsv(e.to_string()))
            .and_then(|record| {
                if record.len() != headers.len() {
                    return Err(IngestError::MalformedCsv(format!(
                        "expected {} fields, found {}",
                        headers.len(),
                        record.len()
                    )));
                }
                let stamp = timestamp_col
                    .and_then(|c| record.get(c))
                    .ok_or_else(|| IngestError::MissingField("timestamp".into()))?;
                Ok(FormRow {
                    submitted_at: parse_timestamp(stamp)?,
                    answers: headers
                        .iter()
                        .zip(record.iter())
                        .map(|(h, v)| (h.to_string(), v.to_string()))
                        .collect(),
                })
            });
        rows.push(CsvRow { row, parsed });
    }
    Ok(rows)
}

/// Text or number in a JSON submission.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Scalar {
    fn into_text(self) -> String {
        match self {
            Scalar::Bool(b) => b.to_string(),
            Scalar::Int(n) => n.to_string(),
            Scalar::Float(x) => x.to_string(),
            Scalar::Text(s) => s,
        }
    }
}

/// JSON submission body, keyed by canonical field names.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonSubmission {
    pub sid: Option<Scalar>,
    pub name: Option<String>,
    pub email: Option<String>,
    pub dsp: Option<Scalar>,
    pub assignment: Option<String>,
    pub days: Option<Scalar>,
    pub reason: Option<String>,
    pub has_partner: Option<Scalar>,
    pub partner_email: Option<String>,
    pub partner_sid: Option<Scalar>,
    pub submitted_at: Option<DateTime<Utc>>,
}

impl JsonSubmission {
    /// `now` stands in for a missing `submitted_at`.
    pub fn into_raw(self, now: DateTime<Utc>) -> Result<RawSubmission, IngestError> {
        let text = |v: Option<Scalar>| v.map(Scalar::into_text).unwrap_or_default();
        let sid = self
            .sid
            .map(Scalar::into_text)
            .ok_or_else(|| IngestError::MissingField("sid".into()))?;
        let assignment = self
            .assignment
            .ok_or_else(|| IngestError::MissingField("assignment".into()))?;
        let days = self
            .days
            .map(Scalar::into_text)
            .ok_or_else(|| IngestError::MissingField("days".into()))?;
        let partner_email = self.partner_email.unwrap_or_default();
        let partner_sid = text(self.partner_sid);
        let has_partner = match self.has_partner {
            Some(v) => v.into_text(),
            None if !partner_email.is_empty() || !partner_sid.is_empty() => "yes".into(),
            None => String::new(),
        };
        Ok(RawSubmission {
            sid,
            name: self.name.unwrap_or_default(),
            email: self.email.unwrap_or_default(),
            dsp: text(self.dsp),
            assignment,
            days,
            reason: self.reason.unwrap_or_default(),
            has_partner,
            partner_contact: format!("{partner_email} {partner_sid}").trim().to_string(),
            submitted_at: Some(self.submitted_at.unwrap_or(now)),
        })
    }
}
