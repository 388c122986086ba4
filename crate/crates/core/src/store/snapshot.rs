//! Materialized state: a pure fold over the event log.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::event::{Event, EventPayload};
use crate::machine::{
    transition_email, transition_request, EmailAction, EmailStatus, IllegalTransition,
    RequestAction, RequestStatus,
};
use crate::model::{DecidedBy, Decision, ExtensionRequest, Outcome, RequestId, Student, StudentId};
use crate::notifier::{EmailJob, JobEffect, JobId, JobSpec};
use crate::policy::{counts_in_history, HistoryEntry, RequestHistory};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
    #[error("expected seq {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("unknown email job {0}")]
    UnknownJob(JobId),
    #[error("unknown student {0}")]
    UnknownStudent(StudentId),
    #[error("duplicate idempotency key {0}")]
    DuplicateKey(String),
    #[error("email job {0} already exists")]
    DuplicateJob(JobId),
    #[error("invalid event: {0}")]
    Invalid(String),
    #[error("request {0}: request and email status out of step")]
    Incoherent(RequestId),
}

/// Everything known about one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request: ExtensionRequest,
    pub decision: Option<Decision>,
    /// Days granted by whoever decided; 0 until approved.
    pub granted_days: u32,
    pub staff_note: Option<String>,
    pub invalid_reason: Option<String>,
    pub new_due_at: Option<DateTime<Utc>>,
    pub lms_attempts: u32,
    pub lms_last_error: Option<String>,
    pub lms_retryable: bool,
    pub lms_next_attempt_at: Option<DateTime<Utc>>,
    pub received_seq: u64,
    pub updated_seq: u64,
}

impl RequestRecord {
    pub fn status(&self) -> RequestStatus {
        self.request.status
    }

    pub fn label(&self) -> &'static str {
        self.request.status.label(self.request.decided_by.as_ref())
    }

    /// Short outcome word for API responses.
    pub fn outcome(&self) -> &'static str {
        match self.request.status {
            RequestStatus::Received => "received",
            RequestStatus::Invalid => "invalid",
            RequestStatus::PendingReview => "pending",
            RequestStatus::ManualDenied => "denied",
            _ => "approved",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub last_seq: u64,
    pub requests: BTreeMap<RequestId, RequestRecord>,
    pub jobs: BTreeMap<JobId, EmailJob>,
    pub students: BTreeMap<StudentId, Student>,
    /// Idempotency key to request.
    pub keys: BTreeMap<String, RequestId>,
    pub by_student: BTreeMap<StudentId, BTreeSet<RequestId>>,
    pub jobs_by_request: BTreeMap<RequestId, BTreeSet<JobId>>,
    pub warnings: u64,
}

impl Snapshot {
    pub fn request(&self, id: &RequestId) -> Option<&RequestRecord> {
        self.requests.get(id)
    }

    pub fn jobs_for(&self, id: &RequestId) -> Vec<&EmailJob> {
        self.jobs_by_request
            .get(id)
            .into_iter()
            .flatten()
            .filter_map(|j| self.jobs.get(j))
            .collect()
    }

    /// The request's email job. Decisions create at most one per request.
    pub fn current_job(&self, id: &RequestId) -> Option<&EmailJob> {
        self.jobs_for(id).into_iter().last()
    }

    pub fn requests_of(&self, student: &StudentId) -> Vec<&RequestRecord> {
        self.by_student
            .get(student)
            .into_iter()
            .flatten()
            .filter_map(|id| self.requests.get(id))
            .collect()
    }

    /// Approved and pending requests of `student`, excluding `except`.
    pub fn history_for(&self, student: &StudentId, except: Option<&RequestId>) -> RequestHistory {
        RequestHistory::new(
            self.requests_of(student)
                .into_iter()
                .filter(|r| Some(&r.request.id) != except && counts_in_history(r.status()))
                .map(|r| HistoryEntry {
                    assignment: r.request.assignment.clone(),
                    days: r.request.days_requested,
                    status: r.status(),
                    submitted_at: r.request.submitted_at,
                }),
        )
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("snapshot serializes")
    }

    /// Folds one event into the state. On error the snapshot may be partially
    /// updated; callers apply events to a scratch copy.
    pub fn apply(&mut self, event: &Event) -> Result<(), ApplyError> {
        let expected = self.last_seq + 1;
        if event.seq != expected {
            return Err(ApplyError::OutOfOrder {
                expected,
                got: event.seq,
            });
        }
        let touched = match &event.payload {
            EventPayload::RequestReceived(p) => {
                if p.student.id != p.request.student {
                    return Err(ApplyError::Invalid("student does not match request".into()));
                }
                // A conflicting email never overwrites a known student; such requests get invalidated.
                let conflicting = self
                    .students
                    .get(&p.student.id)
                    .is_some_and(|known| known.email != p.student.email);
                if !conflicting {
                    self.students.insert(p.student.id.clone(), p.student.clone());
                }
                self.insert_request(p.request.clone(), event.seq)?;
                Some(p.request.id.clone())
            }
            EventPayload::RequestInvalid(p) => {
                let record = self.record_mut(&p.request_id)?;
                record.request.status =
                    transition_request(record.request.status, RequestAction::Invalidate, None)?;
                record.invalid_reason = Some(p.reason.clone());
                Some(p.request_id.clone())
            }
            EventPayload::DecisionMade(p) => {
                self.apply_policy_decision(&p.request_id, &p.decision, &p.email)?;
                Some(p.request_id.clone())
            }
            EventPayload::PartnerMirrored(p) => {
                if !self.requests.contains_key(&p.origin_id) {
                    return Err(ApplyError::UnknownRequest(p.origin_id.clone()));
                }
                if p.request.mirror_of.as_ref() != Some(&p.origin_id) {
                    return Err(ApplyError::Invalid("mirror does not link its origin".into()));
                }
                if !self.students.contains_key(&p.request.student) {
                    return Err(ApplyError::UnknownStudent(p.request.student.clone()));
                }
                self.insert_request(p.request.clone(), event.seq)?;
                self.apply_policy_decision(&p.request.id, &p.decision, &p.email)?;
                Some(p.request.id.clone())
            }
            EventPayload::StaffDecision(p) => {
                let staff = event
                    .actor
                    .staff_id()
                    .ok_or_else(|| ApplyError::Invalid("staff decision without staff actor".into()))?
                    .to_string();
                let record = self.record_mut(&p.request_id)?;
                let action = if p.approve {
                    RequestAction::StaffApprove
                } else {
                    RequestAction::StaffDeny
                };
                record.request.status = transition_request(record.request.status, action, None)?;
                record.request.decided_by = Some(DecidedBy::Staff(staff));
                record.granted_days = if p.approve {
                    record.request.days_requested
                } else {
                    0
                };
                record.staff_note = Some(p.note.clone());
                self.apply_job_effect(&p.request_id, &p.email)?;
                Some(p.request_id.clone())
            }
            EventPayload::EmailQueued(p) => {
                let job = self.job_mut(&p.job_id)?;
                job.status = transition_email(job.status, EmailAction::Requeue)?;
                job.attempts = 0;
                job.next_attempt_at = None;
                Some(job.request_id.clone())
            }
            EventPayload::EmailSent(p) => {
                let job = self.job_mut(&p.job_id)?;
                job.status = transition_email(job.status, EmailAction::DeliverOk)?;
                job.attempts += 1;
                job.message_id = Some(p.message_id.clone());
                job.next_attempt_at = None;
                Some(job.request_id.clone())
            }
            EventPayload::EmailFailed(p) => {
                let job = self.job_mut(&p.job_id)?;
                let action = if p.final_attempt {
                    EmailAction::DeliverFail
                } else {
                    EmailAction::Dispatch
                };
                job.status = transition_email(job.status, action)?;
                job.attempts += 1;
                job.last_error = Some(p.error.clone());
                job.next_attempt_at = p.next_attempt_at;
                Some(job.request_id.clone())
            }
            EventPayload::LmsApplied(p) => {
                let record = self.record_for_lms(&p.request_id)?;
                record.request.status =
                    transition_request(record.request.status, RequestAction::LmsApplied, None)?;
                record.lms_attempts += 1;
                record.new_due_at = Some(p.new_due_at);
                record.lms_last_error = None;
                record.lms_retryable = false;
                record.lms_next_attempt_at = None;
                Some(p.request_id.clone())
            }
            EventPayload::LmsFailed(p) => {
                let record = self.record_for_lms(&p.request_id)?;
                record.request.status =
                    transition_request(record.request.status, RequestAction::LmsFailed, None)?;
                record.lms_attempts += 1;
                record.lms_last_error = Some(p.error.clone());
                record.lms_retryable = p.retryable;
                record.lms_next_attempt_at = p.next_attempt_at;
                Some(p.request_id.clone())
            }
            EventPayload::Warning(_) => {
                self.warnings += 1;
                None
            }
        };
        self.last_seq = event.seq;
        if let Some(id) = touched {
            if let Some(record) = self.requests.get_mut(&id) {
                record.updated_seq = event.seq;
            }
            if !self.is_coherent(&id) {
                return Err(ApplyError::Incoherent(id));
            }
        }
        Ok(())
    }

    /// A request is awaiting review exactly when its email is held for approval.
    pub fn is_coherent(&self, id: &RequestId) -> bool {
        let Some(record) = self.requests.get(id) else {
            return true;
        };
        let held = self
            .jobs_for(id)
            .iter()
            .any(|j| j.status == EmailStatus::PendingApproval);
        held == (record.status() == RequestStatus::PendingReview)
    }

    fn insert_request(&mut self, request: ExtensionRequest, seq: u64) -> Result<(), ApplyError> {
        if request.status != RequestStatus::Received {
            return Err(ApplyError::Invalid("new requests start as Received".into()));
        }
        if request.days_requested == 0 {
            return Err(ApplyError::Invalid("days_requested must be >= 1".into()));
        }
        if self.keys.contains_key(&request.idempotency_key) || self.requests.contains_key(&request.id) {
            return Err(ApplyError::DuplicateKey(request.idempotency_key));
        }
        self.keys
            .insert(request.idempotency_key.clone(), request.id.clone());
        self.by_student
            .entry(request.student.clone())
            .or_default()
            .insert(request.id.clone());
        self.requests.insert(
            request.id.clone(),
            RequestRecord {
                request,
                decision: None,
                granted_days: 0,
                staff_note: None,
                invalid_reason: None,
                new_due_at: None,
                lms_attempts: 0,
                lms_last_error: None,
                lms_retryable: false,
                lms_next_attempt_at: None,
                received_seq: seq,
                updated_seq: seq,
            },
        );
        Ok(())
    }

    fn apply_policy_decision(
        &mut self,
        id: &RequestId,
        decision: &Decision,
        email: &JobSpec,
    ) -> Result<(), ApplyError> {
        let record = self.record_mut(id)?;
        let validated =
            transition_request(record.request.status, RequestAction::Validate, None)?;
        let (action, decided_by) = match decision.outcome {
            Outcome::Automatic => (RequestAction::PolicyAuto, Some(DecidedBy::Policy)),
            Outcome::PendingApproval => (RequestAction::PolicyEscalate, None),
            Outcome::Deny => (RequestAction::PolicyDeny, Some(DecidedBy::Policy)),
        };
        let expected_grant = match decision.outcome {
            Outcome::Automatic => record.request.days_requested,
            _ => 0,
        };
        if decision.granted_days != expected_grant {
            return Err(ApplyError::Invalid(format!(
                "decision grants {} days, expected {expected_grant}",
                decision.granted_days
            )));
        }
        record.request.status = transition_request(validated, action, None)?;
        record.request.decided_by = decided_by;
        record.granted_days = decision.granted_days;
        record.decision = Some(decision.clone());
        self.apply_job_effect(id, &JobEffect::Create(email.clone()))
    }

    fn apply_job_effect(&mut self, id: &RequestId, effect: &JobEffect) -> Result<(), ApplyError> {
        match effect {
            JobEffect::Create(spec) => {
                if &spec.request_id != id {
                    return Err(ApplyError::Invalid("email job belongs to another request".into()));
                }
                if self.jobs.contains_key(&spec.id)
                    || self.jobs_for(id).iter().any(|j| j.template == spec.template)
                {
                    return Err(ApplyError::DuplicateJob(spec.id.clone()));
                }
                self.jobs_by_request
                    .entry(id.clone())
                    .or_default()
                    .insert(spec.id.clone());
                self.jobs.insert(spec.id.clone(), EmailJob::from(spec.clone()));
            }
            JobEffect::Release {
                job_id,
                template,
                subject,
                body,
                action,
            } => {
                let job = self.job_mut(job_id)?;
                if &job.request_id != id {
                    return Err(ApplyError::Invalid("email job belongs to another request".into()));
                }
                if !matches!(action, EmailAction::DecisionReady | EmailAction::NeedsHuman) {
                    return Err(ApplyError::Invalid(format!("{action:?} does not release a job")));
                }
                job.status = transition_email(job.status, *action)?;
                job.template = *template;
                job.subject = subject.clone();
                job.body = body.clone();
            }
        }
        Ok(())
    }

    fn record_mut(&mut self, id: &RequestId) -> Result<&mut RequestRecord, ApplyError> {
        self.requests
            .get_mut(id)
            .ok_or_else(|| ApplyError::UnknownRequest(id.clone()))
    }

    /// An LMS outcome on a failed apply is a retry: step back to the approving state first.
    fn record_for_lms(&mut self, id: &RequestId) -> Result<&mut RequestRecord, ApplyError> {
        let record = self.record_mut(id)?;
        if record.request.status == RequestStatus::ApplyFailed {
            record.request.status = transition_request(
                record.request.status,
                RequestAction::Retry,
                record.request.decided_by.as_ref(),
            )?;
        }
        Ok(record)
    }

    fn job_mut(&mut self, id: &JobId) -> Result<&mut EmailJob, ApplyError> {
        self.jobs
            .get_mut(id)
            .ok_or_else(|| ApplyError::UnknownJob(id.clone()))
    }
}
