//! Read models served to course staff. Everything here is derived from a
//! snapshot and already redacted for the viewer.

use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::Value;

use crate::machine::{EmailStatus, RequestStatus};
use crate::model::{DecidedBy, RequestId, StudentId, ViewerRole};
use crate::notifier::{EmailJob, JobId, TemplateKey};
use crate::policy::{RULE_ASSIGNMENT_MAX, RULE_REQUEST_COUNT};
use crate::store::{Event, RequestRecord, Snapshot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestSummary {
    pub id: RequestId,
    pub sid: StudentId,
    pub name: String,
    pub assignment: String,
    pub days_requested: u32,
    pub granted_days: u32,
    pub submitted_at: DateTime<Utc>,
    /// Staff vocabulary: "automatic", "pending approval", "manual", ...
    pub status: &'static str,
    pub state: RequestStatus,
    pub outcome: &'static str,
    pub rule_fired: Option<String>,
    pub decided_by: Option<DecidedBy>,
    pub email_status: Option<&'static str>,
    pub new_due_at: Option<DateTime<Utc>>,
    pub mirror_of: Option<RequestId>,
    pub invalid_reason: Option<String>,
    /// Hidden from restricted viewers.
    pub reason: Option<String>,
    /// Hidden from restricted viewers.
    pub dsp: Option<bool>,
}

impl RequestSummary {
    pub fn new(snapshot: &Snapshot, record: &RequestRecord, role: ViewerRole) -> Self {
        let request = &record.request;
        let student = snapshot.students.get(&request.student);
        let full = role == ViewerRole::Full;
        Self {
            id: request.id.clone(),
            sid: request.student.clone(),
            name: student.map(|s| s.name.clone()).unwrap_or_default(),
            assignment: request.assignment.clone(),
            days_requested: request.days_requested,
            granted_days: record.granted_days,
            submitted_at: request.submitted_at,
            status: record.label(),
            state: record.status(),
            outcome: record.outcome(),
            rule_fired: record.decision.as_ref().map(|d| d.rule_fired.clone()),
            decided_by: request.decided_by.clone(),
            email_status: snapshot.current_job(&request.id).map(|j| j.status.label()),
            new_due_at: record.new_due_at,
            mirror_of: request.mirror_of.clone(),
            invalid_reason: record.invalid_reason.clone(),
            reason: full.then(|| request.reason.clone()),
            dsp: if full { student.map(|s| s.dsp_registered) } else { None },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SuggestedAction {
    Approve,
    Deny,
    None,
}

impl SuggestedAction {
    /// A request held back only by the request-count rule is usually fine;
    /// one over an assignment's own limit usually is not.
    pub fn for_rule(rule: &str) -> Self {
        match rule {
            RULE_REQUEST_COUNT => SuggestedAction::Approve,
            RULE_ASSIGNMENT_MAX => SuggestedAction::Deny,
            _ => SuggestedAction::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HistorySummary {
    /// Other approved or pending requests by the same student.
    pub prior_requests: usize,
    /// Sum over assignments of the largest approved extension.
    pub cumulative_days: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PendingReviewItem {
    #[serde(flatten)]
    pub request: RequestSummary,
    pub history: HistorySummary,
    pub suggested_action: SuggestedAction,
}

/// One item per request awaiting review, oldest first.
pub fn pending_items(snapshot: &Snapshot, role: ViewerRole) -> Vec<PendingReviewItem> {
    let mut records: Vec<&RequestRecord> = snapshot
        .requests
        .values()
        .filter(|r| r.status() == RequestStatus::PendingReview)
        .collect();
    records.sort_by_key(|r| (r.request.submitted_at, r.received_seq));
    records
        .into_iter()
        .map(|record| {
            let history = snapshot.history_for(&record.request.student, Some(&record.request.id));
            let mut slugs: Vec<&str> = history.entries().iter().map(|e| e.assignment.as_str()).collect();
            slugs.sort_unstable();
            slugs.dedup();
            let cumulative_days = slugs.iter().map(|s| history.max_approved_days(s)).sum();
            let rule = record
                .decision
                .as_ref()
                .map(|d| d.rule_fired.as_str())
                .unwrap_or_default();
            PendingReviewItem {
                request: RequestSummary::new(snapshot, record, role),
                history: HistorySummary {
                    prior_requests: history.len(),
                    cumulative_days,
                },
                suggested_action: SuggestedAction::for_rule(rule),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutboxItem {
    pub id: JobId,
    pub request_id: RequestId,
    pub template: TemplateKey,
    pub to: String,
    pub subject: String,
    /// Hidden from restricted viewers: bodies may echo the student's reason.
    pub body: Option<String>,
    pub status: &'static str,
    pub state: EmailStatus,
    pub attempts: u32,
    pub last_error: Option<String>,
    pub next_attempt_at: Option<DateTime<Utc>>,
    pub message_id: Option<String>,
}

impl OutboxItem {
    pub fn new(job: &EmailJob, role: ViewerRole) -> Self {
        Self {
            id: job.id.clone(),
            request_id: job.request_id.clone(),
            template: job.template,
            to: job.to.to_string(),
            subject: job.subject.clone(),
            body: (role == ViewerRole::Full).then(|| job.body.clone()),
            status: job.status.label(),
            state: job.status,
            attempts: job.attempts,
            last_error: job.last_error.clone(),
            next_attempt_at: job.next_attempt_at,
            message_id: job.message_id.clone(),
        }
    }
}

pub fn outbox(snapshot: &Snapshot, role: ViewerRole) -> Vec<OutboxItem> {
    snapshot.jobs.values().map(|j| OutboxItem::new(j, role)).collect()
}

/// An event as JSON, with reasons, DSP flags and email bodies blanked for
/// restricted viewers.
pub fn audit_entry(event: &Event, role: ViewerRole) -> Value {
    let mut value = event.to_value();
    if role == ViewerRole::Restricted {
        if let Some(payload) = value.get_mut("payload") {
            redact_value(payload);
        }
    }
    value
}

fn redact_value(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for (key, field) in map.iter_mut() {
                match key.as_str() {
                    "reason" | "body" => *field = Value::Null,
                    "dsp_registered" => *field = Value::Null,
                    _ => redact_value(field),
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(redact_value),
        _ => {}
    }
}
