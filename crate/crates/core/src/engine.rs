//! The request pipeline.
//!
//! A submission is validated, decided and given its email in one store
//! transaction, so a caller sees the final status label as soon as the call
//! returns. Delivery and LMS updates happen later in [`Engine::run_cycle`],
//! which a background worker calls on a timer.

use std::num::NonZeroU32;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::ingestion::{
    normalize_submission, parse_form_row, read_csv, CsvRow, FieldMapping, IngestError,
    JsonSubmission, NormalizeError, Normalized, RawSubmission, DEFAULT_HARD_CAP_DAYS,
};
use crate::lms::{apply_extension, ApplyError as LmsApplyError, LmsConnector};
use crate::machine::{EmailStatus, RequestStatus};
use crate::model::{format_ts, Assignment, EmailAddress, ExtensionRequest, Outcome, RequestId, Student, ViewerRole};
use crate::notifier::{
    backoff_after, enqueue_for_decision, Bindings, EmailJob, JobEffect, JobId, JobSpec, Notice,
    NotifyError, OutgoingEmail, Sender, TemplateSet, DEFAULT_MAX_ATTEMPTS,
};
use crate::policy::{compute_new_due_date, evaluate, propagate_partner, PartnerUnknown, PolicyConfig};
use crate::roster::{project_roster, RosterEntry};
use crate::store::{
    Actor, ApplyError, DecisionMade, EmailFailed, EmailQueued, EmailSent, LmsApplied, LmsFailed,
    PartnerMirrored, RequestInvalid, RequestReceived, RequestRecord, Snapshot, StaffDecision,
    Store, StoreError, Txn, Warning,
};
use crate::views::{pending_items, PendingReviewItem};

/// Everything course-specific the pipeline needs.
#[derive(Debug, Clone)]
pub struct CourseSettings {
    pub course_name: String,
    pub catalog: Vec<Assignment>,
    pub policy: PolicyConfig,
    pub hard_cap_days: u32,
    pub max_attempts: u32,
    pub allow_shorten: bool,
    pub from_address: EmailAddress,
    pub templates: TemplateSet,
    pub mapping: FieldMapping,
}

impl CourseSettings {
    pub fn new(course_name: impl Into<String>, catalog: Vec<Assignment>, from_address: EmailAddress) -> Self {
        Self {
            course_name: course_name.into(),
            catalog,
            policy: PolicyConfig::default(),
            hard_cap_days: DEFAULT_HARD_CAP_DAYS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            allow_shorten: false,
            from_address,
            templates: TemplateSet::default(),
            mapping: FieldMapping::default(),
        }
    }

    pub fn assignment(&self, slug: &str) -> Option<&Assignment> {
        self.catalog.iter().find(|a| a.slug == slug)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("already submitted: {}", ids.iter().map(|i| i.as_str()).collect::<Vec<_>>().join(", "))]
    Duplicate { ids: Vec<RequestId> },
    #[error("unknown request {0}")]
    NotFound(RequestId),
    #[error("unknown email job {0}")]
    UnknownJob(JobId),
    #[error("request {id} is already decided ({status})")]
    AlreadyDecided { id: RequestId, status: RequestStatus },
    #[error("email job {id} is {status}; only failed jobs can be requeued")]
    NotRequeueable { id: JobId, status: EmailStatus },
    #[error(transparent)]
    Notify(#[from] NotifyError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<ApplyError> for EngineError {
    fn from(e: ApplyError) -> Self {
        EngineError::Store(StoreError::Apply(e))
    }
}

/// What a submitter learns about one created request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubmittedRequest {
    pub id: RequestId,
    pub assignment: String,
    pub status: &'static str,
    pub state: RequestStatus,
    pub outcome: &'static str,
    pub rule_fired: Option<String>,
    pub invalid_reason: Option<String>,
    pub email_status: Option<&'static str>,
    /// The partner's mirrored request, if one was created.
    pub mirrored: Option<RequestId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Submission {
    pub requests: Vec<SubmittedRequest>,
    /// Drafts whose idempotency key was already in the log.
    pub duplicates: Vec<RequestId>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub row: usize,
    pub field: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BatchReport {
    pub rows: usize,
    pub accepted: usize,
    pub skipped_duplicates: usize,
    pub errors: Vec<RowError>,
    pub request_ids: Vec<RequestId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DispatchReport {
    pub sent: usize,
    pub retried: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ApplyReport {
    pub applied: usize,
    pub retried: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    pub emails: DispatchReport,
    pub lms: ApplyReport,
}

pub struct Engine {
    store: Store,
    settings: CourseSettings,
    sender: Arc<dyn Sender>,
    connector: Arc<dyn LmsConnector>,
    // One dispatcher at a time, whether started by the timer or by a request.
    cycle: Mutex<()>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("store", &self.store)
            .field("course", &self.settings.course_name)
            .finish_non_exhaustive()
    }
}

fn ingest_problem(row: usize, e: &IngestError) -> RowError {
    let (field, code) = match e {
        IngestError::MissingField(name) => (name.clone(), "MissingField"),
        IngestError::BadMapping(_) => (String::new(), "BadMapping"),
        IngestError::MalformedCsv(_) => (String::new(), "MalformedCsv"),
        IngestError::BadTimestamp(_) => ("submitted_at".to_string(), "BadTimestamp"),
    };
    RowError {
        row,
        field,
        code: code.to_string(),
        message: e.to_string(),
    }
}

impl Engine {
    pub fn new(
        store: Store,
        settings: CourseSettings,
        sender: Arc<dyn Sender>,
        connector: Arc<dyn LmsConnector>,
    ) -> Self {
        Self {
            store,
            settings,
            sender,
            connector,
            cycle: Mutex::new(()),
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn settings(&self) -> &CourseSettings {
        &self.settings
    }

    pub fn connector(&self) -> &dyn LmsConnector {
        self.connector.as_ref()
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.store.snapshot()
    }

    fn now(&self) -> DateTime<Utc> {
        self.store.clock().now()
    }

    pub fn submit_json(&self, body: JsonSubmission) -> Result<Submission, EngineError> {
        let raw = body.into_raw(self.now())?;
        self.submit_raw(&raw)
    }

    pub fn submit_raw(&self, raw: &RawSubmission) -> Result<Submission, EngineError> {
        let normalized = normalize_submission(raw, &self.settings.catalog, self.settings.hard_cap_days)?;
        self.submit_normalized(&normalized)
    }

    /// Runs every draft through the pipeline in one transaction. Fails with
    /// `Duplicate` only when every draft was already submitted.
    pub fn submit_normalized(&self, normalized: &Normalized) -> Result<Submission, EngineError> {
        let (created, duplicates) = self.store.transact(|txn| {
            let mut created = Vec::new();
            let mut duplicates = Vec::new();
            for draft in &normalized.drafts {
                if txn.snapshot().keys.contains_key(&draft.idempotency_key) {
                    duplicates.push(draft.id.clone());
                    continue;
                }
                let mirror = self.process_draft(txn, draft, &normalized.student)?;
                created.push((draft.id.clone(), mirror));
            }
            if created.is_empty() {
                return Err(EngineError::Duplicate { ids: duplicates });
            }
            for message in &normalized.warnings {
                txn.emit(
                    Actor::System,
                    Warning {
                        request_id: Some(created[0].0.clone()),
                        message: message.clone(),
                    },
                )?;
            }
            Ok((created, duplicates))
        })?;

        let snapshot = self.store.snapshot();
        let requests = created
            .into_iter()
            .filter_map(|(id, mirrored)| {
                let record = snapshot.request(&id)?;
                Some(SubmittedRequest {
                    id: id.clone(),
                    assignment: record.request.assignment.clone(),
                    status: record.label(),
                    state: record.status(),
                    outcome: record.outcome(),
                    rule_fired: record.decision.as_ref().map(|d| d.rule_fired.clone()),
                    invalid_reason: record.invalid_reason.clone(),
                    email_status: snapshot.current_job(&id).map(|j| j.status.label()),
                    mirrored,
                })
            })
            .collect();
        Ok(Submission {
            requests,
            duplicates,
            warnings: normalized.warnings.clone(),
        })
    }

    /// Why a received request cannot be decided, if it cannot.
    fn validation_problem(&self, snapshot: &Snapshot, draft: &ExtensionRequest, student: &Student) -> Option<String> {
        let Some(assignment) = self.settings.assignment(&draft.assignment) else {
            return Some(format!("assignment {:?} is not in the catalog", draft.assignment));
        };
        if let Some(known) = snapshot.students.get(&student.id) {
            if known.email != student.email {
                return Some(format!(
                    "student id {} is registered with a different email address",
                    student.id
                ));
            }
        }
        if let Some(max) = assignment.max_extension_days {
            if draft.days_requested > max {
                return Some(format!(
                    "{} days requested, {} allows at most {max}",
                    draft.days_requested, assignment.display_name
                ));
            }
        }
        None
    }

    fn bindings(&self, request: &ExtensionRequest, student: &Student) -> Bindings {
        let (name, due_at) = self
            .settings
            .assignment(&request.assignment)
            .map(|a| (a.display_name.clone(), a.due_at))
            .unwrap_or_else(|| (request.assignment.clone(), request.submitted_at));
        let new_due_at = NonZeroU32::new(request.days_requested)
            .map(|d| compute_new_due_date(due_at, d))
            .unwrap_or(due_at);
        Bindings {
            student_name: student.name.clone(),
            assignment_name: name,
            days: request.days_requested,
            due_at: format_ts(&due_at),
            new_due_at: format_ts(&new_due_at),
            reason_echo: request.reason.clone(),
            course_name: self.settings.course_name.clone(),
        }
    }

    fn email_effect(
        &self,
        request: &ExtensionRequest,
        student: &Student,
        notice: Notice,
        existing: &[&EmailJob],
    ) -> Result<JobEffect, NotifyError> {
        enqueue_for_decision(
            &request.id,
            &student.email,
            notice,
            existing,
            &self.settings.templates,
            &self.bindings(request, student),
            self.settings.policy.manual_denials,
        )
    }

    fn new_job(&self, request: &ExtensionRequest, student: &Student, outcome: Outcome) -> Result<JobSpec, EngineError> {
        let notice = match outcome {
            Outcome::Automatic => Notice::AutoApproved,
            Outcome::PendingApproval => Notice::Escalated,
            Outcome::Deny => Notice::PolicyDenied,
        };
        match self.email_effect(request, student, notice, &[])? {
            JobEffect::Create(spec) => Ok(spec),
            JobEffect::Release { .. } => unreachable!("no held job exists for a new request"),
        }
    }

    /// Receive, validate, decide and mirror one draft. Returns the mirror's id.
    fn process_draft(
        &self,
        txn: &mut Txn<'_>,
        draft: &ExtensionRequest,
        student: &Student,
    ) -> Result<Option<RequestId>, EngineError> {
        let problem = self.validation_problem(txn.snapshot(), draft, student);
        txn.emit(
            Actor::System,
            RequestReceived {
                request: draft.clone(),
                student: student.clone(),
            },
        )?;
        if let Some(reason) = problem {
            txn.emit(
                Actor::System,
                RequestInvalid {
                    request_id: draft.id.clone(),
                    reason,
                },
            )?;
            return Ok(None);
        }

        let history = txn.snapshot().history_for(&draft.student, Some(&draft.id));
        let decision = evaluate(draft, &history, student, &self.settings.policy);
        let email = self.new_job(draft, student, decision.outcome)?;
        txn.emit(
            Actor::System,
            DecisionMade {
                request_id: draft.id.clone(),
                decision,
                email,
            },
        )?;

        let partner = propagate_partner(draft, |sid| txn.snapshot().students.get(sid).cloned());
        match partner {
            Ok(None) => Ok(None),
            Err(PartnerUnknown(sid)) => {
                txn.emit(
                    Actor::System,
                    Warning {
                        request_id: Some(draft.id.clone()),
                        message: format!("partner {sid} is not a known student; no extension mirrored"),
                    },
                )?;
                Ok(None)
            }
            Ok(Some((mirror, partner))) => {
                let history = txn.snapshot().history_for(&partner.id, None);
                let decision = evaluate(&mirror, &history, &partner, &self.settings.policy);
                let email = self.new_job(&mirror, &partner, decision.outcome)?;
                let id = mirror.id.clone();
                txn.emit(
                    Actor::System,
                    PartnerMirrored {
                        origin_id: draft.id.clone(),
                        request: mirror,
                        decision,
                        email,
                    },
                )?;
                Ok(Some(id))
            }
        }
    }

    /// Ingests a form export. Each row commits on its own; a row that fails
    /// leaves no trace in the log.
    pub fn ingest_csv(&self, bytes: &[u8]) -> Result<BatchReport, EngineError> {
        let rows = read_csv(bytes, &self.settings.mapping)?;
        let mut report = BatchReport {
            rows: rows.len(),
            ..BatchReport::default()
        };
        for CsvRow { row, parsed } in rows {
            let raw = match parsed.and_then(|r| parse_form_row(&r, &self.settings.mapping)) {
                Ok(raw) => raw,
                Err(e) => {
                    report.errors.push(ingest_problem(row, &e));
                    continue;
                }
            };
            match self.submit_raw(&raw) {
                Ok(submission) => {
                    report.accepted += 1;
                    report
                        .request_ids
                        .extend(submission.requests.into_iter().map(|r| r.id));
                }
                Err(EngineError::Duplicate { .. }) => report.skipped_duplicates += 1,
                Err(EngineError::Normalize(e)) => report.errors.push(RowError {
                    row,
                    field: e.field().to_string(),
                    code: e.code().to_string(),
                    message: e.to_string(),
                }),
                Err(EngineError::Ingest(e)) => report.errors.push(ingest_problem(row, &e)),
                Err(other) => return Err(other),
            }
        }
        Ok(report)
    }

    /// Records a staff decision on a pending request.
    pub fn decide(&self, id: &RequestId, approve: bool, note: &str, staff: &str) -> Result<RequestRecord, EngineError> {
        self.store.transact(|txn| {
            let snapshot = txn.snapshot();
            let record = snapshot
                .request(id)
                .ok_or_else(|| EngineError::NotFound(id.clone()))?;
            if record.status() != RequestStatus::PendingReview {
                return Err(EngineError::AlreadyDecided {
                    id: id.clone(),
                    status: record.status(),
                });
            }
            let student = snapshot
                .students
                .get(&record.request.student)
                .ok_or_else(|| ApplyError::UnknownStudent(record.request.student.clone()))?;
            let notice = if approve {
                Notice::StaffApproved
            } else {
                Notice::StaffDenied
            };
            let email = self.email_effect(&record.request, student, notice, &snapshot.jobs_for(id))?;
            txn.emit(
                Actor::Staff(staff.to_string()),
                StaffDecision {
                    request_id: id.clone(),
                    approve,
                    note: note.to_string(),
                    email,
                },
            )?;
            Ok(txn.snapshot().requests[id].clone())
        })
    }

    /// Moves a failed email back into the queue with a fresh attempt budget.
    pub fn requeue_email(&self, id: &JobId, staff: &str) -> Result<EmailJob, EngineError> {
        self.store.transact(|txn| {
            let job = txn
                .snapshot()
                .jobs
                .get(id)
                .ok_or_else(|| EngineError::UnknownJob(id.clone()))?;
            if job.status != EmailStatus::Failed {
                return Err(EngineError::NotRequeueable {
                    id: id.clone(),
                    status: job.status,
                });
            }
            txn.emit(Actor::Staff(staff.to_string()), EmailQueued { job_id: id.clone() })?;
            Ok(txn.snapshot().jobs[id].clone())
        })
    }

    pub fn pending(&self, role: ViewerRole) -> Vec<PendingReviewItem> {
        pending_items(&self.snapshot(), role)
    }

    pub fn roster(&self, role: ViewerRole) -> Vec<RosterEntry> {
        project_roster(&self.snapshot(), role)
    }

    /// Attempts every due email once. Send failures are recorded per job.
    pub fn dispatch_outbox(&self, now: DateTime<Utc>) -> Result<DispatchReport, EngineError> {
        let _cycle = self.cycle.lock().unwrap_or_else(|e| e.into_inner());
        self.dispatch_locked(now)
    }

    fn dispatch_locked(&self, now: DateTime<Utc>) -> Result<DispatchReport, EngineError> {
        let snapshot = self.store.snapshot();
        let mut report = DispatchReport::default();
        for job in snapshot.jobs.values().filter(|j| j.is_due(now)) {
            let email = OutgoingEmail::new(job, &self.settings.from_address, now);
            match self.sender.send(&email) {
                Ok(()) => {
                    self.store.append(
                        Actor::System,
                        EmailSent {
                            job_id: job.id.clone(),
                            message_id: email.message_id,
                        },
                    )?;
                    report.sent += 1;
                }
                Err(e) => {
                    let attempts = job.attempts + 1;
                    let final_attempt = attempts >= self.settings.max_attempts;
                    self.store.append(
                        Actor::System,
                        EmailFailed {
                            job_id: job.id.clone(),
                            error: e.0,
                            final_attempt,
                            next_attempt_at: (!final_attempt).then(|| now + backoff_after(attempts)),
                        },
                    )?;
                    if final_attempt {
                        report.failed += 1;
                    } else {
                        report.retried += 1;
                    }
                }
            }
        }
        Ok(report)
    }

    /// Pushes approved extensions to the LMS, retrying transport failures
    /// with the same backoff as email.
    pub fn apply_pending(&self, now: DateTime<Utc>) -> Result<ApplyReport, EngineError> {
        let _cycle = self.cycle.lock().unwrap_or_else(|e| e.into_inner());
        self.apply_locked(now)
    }

    fn apply_locked(&self, now: DateTime<Utc>) -> Result<ApplyReport, EngineError> {
        let snapshot = self.store.snapshot();
        let mut report = ApplyReport::default();
        let due = snapshot.requests.values().filter(|r| match r.status() {
            RequestStatus::AutoApproved | RequestStatus::ManualApproved => true,
            RequestStatus::ApplyFailed => {
                r.lms_retryable && r.lms_next_attempt_at.is_none_or(|at| at <= now)
            }
            _ => false,
        });
        for record in due {
            let id = record.request.id.clone();
            let attempt = self.try_apply(&snapshot, record);
            match attempt {
                Ok(new_due_at) => {
                    self.store
                        .append(Actor::System, LmsApplied { request_id: id, new_due_at })?;
                    report.applied += 1;
                }
                Err(e) => {
                    let attempts = record.lms_attempts + 1;
                    let transient = matches!(&e, LmsApplyError::Connector(c) if c.is_retryable());
                    let retryable = transient && attempts < self.settings.max_attempts;
                    self.store.append(
                        Actor::System,
                        LmsFailed {
                            request_id: id,
                            error: e.to_string(),
                            retryable,
                            next_attempt_at: retryable.then(|| now + backoff_after(attempts)),
                        },
                    )?;
                    if retryable {
                        report.retried += 1;
                    } else {
                        report.failed += 1;
                    }
                }
            }
        }
        Ok(report)
    }

    fn try_apply(&self, snapshot: &Snapshot, record: &RequestRecord) -> Result<DateTime<Utc>, LmsApplyError> {
        let request = &record.request;
        let assignment = self.settings.assignment(&request.assignment).ok_or_else(|| {
            LmsApplyError::Connector(crate::lms::ConnectorError::RejectedByLms(format!(
                "assignment {:?} is not in the catalog",
                request.assignment
            )))
        })?;
        let student = snapshot
            .students
            .get(&request.student)
            .ok_or(LmsApplyError::NotApproved(request.status))?;
        let granted = NonZeroU32::new(record.granted_days).ok_or(LmsApplyError::NotApproved(request.status))?;
        let new_due_at = compute_new_due_date(assignment.due_at, granted);
        apply_extension(
            self.connector.as_ref(),
            request,
            &student.email,
            assignment.due_at,
            new_due_at,
            self.settings.allow_shorten,
        )?;
        Ok(new_due_at)
    }

    /// One dispatch cycle: deliver due email, then apply due extensions.
    pub fn run_cycle(&self, now: DateTime<Utc>) -> Result<CycleReport, EngineError> {
        let _cycle = self.cycle.lock().unwrap_or_else(|e| e.into_inner());
        Ok(CycleReport {
            emails: self.dispatch_locked(now)?,
            lms: self.apply_locked(now)?,
        })
    }

    /// [`run_cycle`](Self::run_cycle) at the store clock's current time.
    pub fn dispatch(&self) -> Result<CycleReport, EngineError> {
        self.run_cycle(self.now())
    }
}
