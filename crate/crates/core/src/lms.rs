//! Assignment-platform connectors.
//!
//! A connector exposes three operations. `upsert_extension` is keyed by
//! (student email, assignment slug) and must be a no-op when repeated with the
//! same arguments, so callers can retry freely.
//!
//! The fixture connector persists its state as a JSON object mapping each
//! student email to an object of `slug -> new_due_at` (RFC 3339):
//!
//! ```json
//! { "ann@uni.edu": { "hw1": "2025-03-13T23:59:00Z" } }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::RequestStatus;
use crate::model::{format_ts, Assignment, EmailAddress, ExtensionRequest, RequestId};
use crate::store::Snapshot;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConnectorError {
    /// Transport-level failure; the call may be retried.
    #[error("connector unavailable: {0}")]
    ConnectorUnavailable(String),
    /// The platform refused the change; retrying will not help.
    #[error("rejected by LMS: {0}")]
    RejectedByLms(String),
}

impl ConnectorError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ConnectorError::ConnectorUnavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmsExtension {
    pub student_email: EmailAddress,
    pub assignment: String,
    pub new_due_at: DateTime<Utc>,
    pub source_request: Option<RequestId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LmsAssignment {
    pub slug: String,
    pub due_at: DateTime<Utc>,
}

pub trait LmsConnector: Send + Sync {
    fn list_assignments(&self) -> Result<Vec<LmsAssignment>, ConnectorError>;

    fn get_extension(
        &self,
        student: &EmailAddress,
        assignment: &str,
    ) -> Result<Option<LmsExtension>, ConnectorError>;

    /// Sets the extension for (student, assignment), replacing any existing one.
    fn upsert_extension(&self, extension: &LmsExtension) -> Result<(), ConnectorError>;
}

type Key = (EmailAddress, String);

#[derive(Debug, Default)]
struct MockState {
    extensions: BTreeMap<Key, LmsExtension>,
    writes: Vec<LmsExtension>,
}

/// In-memory connector. Records every state-changing write.
#[derive(Debug, Default)]
pub struct MockConnector {
    catalog: Vec<LmsAssignment>,
    state: Mutex<MockState>,
}

impl MockConnector {
    pub fn new(catalog: &[Assignment]) -> Self {
        Self {
            catalog: lms_catalog(catalog),
            state: Mutex::default(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, MockState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn extensions(&self) -> Vec<LmsExtension> {
        self.lock().extensions.values().cloned().collect()
    }

    /// Writes that changed state, oldest first.
    pub fn writes(&self) -> Vec<LmsExtension> {
        self.lock().writes.clone()
    }

    pub fn remove(&self, student: &EmailAddress, assignment: &str) -> Option<LmsExtension> {
        self.lock()
            .extensions
            .remove(&(student.clone(), assignment.to_string()))
    }
}

fn lms_catalog(catalog: &[Assignment]) -> Vec<LmsAssignment> {
    catalog
        .iter()
        .map(|a| LmsAssignment {
            slug: a.slug.clone(),
            due_at: a.due_at,
        })
        .collect()
}

impl LmsConnector for MockConnector {
    fn list_assignments(&self) -> Result<Vec<LmsAssignment>, ConnectorError> {
        Ok(self.catalog.clone())
    }

    fn get_extension(
        &self,
        student: &EmailAddress,
        assignment: &str,
    ) -> Result<Option<LmsExtension>, ConnectorError> {
        Ok(self
            .lock()
            .extensions
            .get(&(student.clone(), assignment.to_string()))
            .cloned())
    }

    fn upsert_extension(&self, extension: &LmsExtension) -> Result<(), ConnectorError> {
        if !self.catalog.iter().any(|a| a.slug == extension.assignment) {
            return Err(ConnectorError::RejectedByLms(format!(
                "no assignment {:?}",
                extension.assignment
            )));
        }
        let mut state = self.lock();
        let key = (extension.student_email.clone(), extension.assignment.clone());
        let unchanged = state
            .extensions
            .get(&key)
            .is_some_and(|e| e.new_due_at == extension.new_due_at);
        if !unchanged {
            state.extensions.insert(key, extension.clone());
            state.writes.push(extension.clone());
        }
        Ok(())
    }
}

type FixtureState = BTreeMap<EmailAddress, BTreeMap<String, DateTime<Utc>>>;

/// Connector whose state lives in a JSON file (see module docs for the format).
#[derive(Debug)]
pub struct FixtureConnector {
    path: PathBuf,
    catalog: Vec<LmsAssignment>,
    lock: Mutex<()>,
}

impl FixtureConnector {
    pub fn new(path: impl Into<PathBuf>, catalog: &[Assignment]) -> Self {
        Self {
            path: path.into(),
            catalog: lms_catalog(catalog),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read(&self) -> Result<FixtureState, ConnectorError> {
        match fs::read_to_string(&self.path) {
            Ok(text) if text.trim().is_empty() => Ok(FixtureState::new()),
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| ConnectorError::ConnectorUnavailable(format!("fixture parse: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(FixtureState::new()),
            Err(e) => Err(ConnectorError::ConnectorUnavailable(e.to_string())),
        }
    }

    fn write(&self, state: &FixtureState) -> Result<(), ConnectorError> {
        let text = serde_json::to_string_pretty(state).expect("fixture state serializes");
        let tmp = self.path.with_extension("tmp");
        fs::write(&tmp, text + "\n")
            .and_then(|()| fs::rename(&tmp, &self.path))
            .map_err(|e| ConnectorError::ConnectorUnavailable(e.to_string()))
    }
}

impl LmsConnector for FixtureConnector {
    fn list_assignments(&self) -> Result<Vec<LmsAssignment>, ConnectorError> {
        Ok(self.catalog.clone())
    }

    fn get_extension(
        &self,
        student: &EmailAddress,
        assignment: &str,
    ) -> Result<Option<LmsExtension>, ConnectorError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        Ok(self
            .read()?
            .get(student)
            .and_then(|m| m.get(assignment))
            .map(|due| LmsExtension {
                student_email: student.clone(),
                assignment: assignment.to_string(),
                new_due_at: *due,
                source_request: None,
            }))
    }

    fn upsert_extension(&self, extension: &LmsExtension) -> Result<(), ConnectorError> {
        if !self.catalog.iter().any(|a| a.slug == extension.assignment) {
            return Err(ConnectorError::RejectedByLms(format!(
                "no assignment {:?}",
                extension.assignment
            )));
        }
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut state = self.read()?;
        let slot = state
            .entry(extension.student_email.clone())
            .or_default()
            .entry(extension.assignment.clone())
            .or_insert(extension.new_due_at);
        if *slot == extension.new_due_at && self.path.exists() {
            return Ok(());
        }
        *slot = extension.new_due_at;
        self.write(&state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyOutcome {
    Upserted,
    /// The platform already holds this exact due date.
    Unchanged,
    /// The platform holds a later due date and shortening is disabled.
    KeptLater,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("request is {0}, only approved requests can be applied")]
    NotApproved(RequestStatus),
    #[error("new due date {new} is not after the original {original}")]
    NotLater { new: String, original: String },
    #[error(transparent)]
    Connector(#[from] ConnectorError),
}

/// Pushes an approved request's new due date to the platform.
///
/// A later due date always replaces an earlier one; an earlier one replaces a
/// later one only with `allow_shorten`.
pub fn apply_extension(
    connector: &dyn LmsConnector,
    request: &ExtensionRequest,
    student_email: &EmailAddress,
    original_due_at: DateTime<Utc>,
    new_due_at: DateTime<Utc>,
    allow_shorten: bool,
) -> Result<ApplyOutcome, ApplyError> {
    if !matches!(
        request.status,
        RequestStatus::AutoApproved | RequestStatus::ManualApproved | RequestStatus::ApplyFailed
    ) {
        return Err(ApplyError::NotApproved(request.status));
    }
    if new_due_at <= original_due_at {
        return Err(ApplyError::NotLater {
            new: format_ts(&new_due_at),
            original: format_ts(&original_due_at),
        });
    }
    if let Some(existing) = connector.get_extension(student_email, &request.assignment)? {
        if existing.new_due_at == new_due_at {
            return Ok(ApplyOutcome::Unchanged);
        }
        if existing.new_due_at > new_due_at && !allow_shorten {
            return Ok(ApplyOutcome::KeptLater);
        }
    }
    connector.upsert_extension(&LmsExtension {
        student_email: student_email.clone(),
        assignment: request.assignment.clone(),
        new_due_at,
        source_request: Some(request.id.clone()),
    })?;
    Ok(ApplyOutcome::Upserted)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DriftEntry {
    pub student_email: EmailAddress,
    pub assignment: String,
    pub expected: Option<DateTime<Utc>>,
    pub actual: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DriftReport {
    /// Applied in the log, absent on the platform.
    pub missing: Vec<DriftEntry>,
    /// Present on both sides with different due dates.
    pub mismatched: Vec<DriftEntry>,
    /// On the platform with no applied request behind it.
    pub orphaned: Vec<DriftEntry>,
}

impl DriftReport {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.mismatched.is_empty() && self.orphaned.is_empty()
    }
}

/// Compares the log's applied extensions with the platform. Read-only.
///
/// Only (known student, catalog assignment) pairs are inspected, since the
/// connector interface has no listing of extensions.
pub fn reconcile(
    connector: &dyn LmsConnector,
    snapshot: &Snapshot,
    catalog: &[Assignment],
) -> Result<DriftReport, ConnectorError> {
    let mut expected: BTreeMap<(EmailAddress, String), DateTime<Utc>> = BTreeMap::new();
    for record in snapshot.requests.values() {
        if record.status() != RequestStatus::Applied {
            continue;
        }
        let (Some(student), Some(due)) = (snapshot.students.get(&record.request.student), record.new_due_at) else {
            continue;
        };
        let slot = expected
            .entry((student.email.clone(), record.request.assignment.clone()))
            .or_insert(due);
        *slot = (*slot).max(due);
    }

    let mut report = DriftReport::default();
    for student in snapshot.students.values() {
        for assignment in catalog {
            let key = (student.email.clone(), assignment.slug.clone());
            let want = expected.get(&key).copied();
            let have = connector
                .get_extension(&student.email, &assignment.slug)?
                .map(|e| e.new_due_at);
            let entry = DriftEntry {
                student_email: key.0,
                assignment: key.1,
                expected: want,
                actual: have,
            };
            match (want, have) {
                (Some(_), None) => report.missing.push(entry),
                (None, Some(_)) => report.orphaned.push(entry),
                (Some(w), Some(h)) if w != h => report.mismatched.push(entry),
                _ => {}
            }
        }
    }
    Ok(report)
}
