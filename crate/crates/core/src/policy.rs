//! Declarative routing of requests to automatic approval, staff review or denial.
//!
//! Denial is reserved for ineligible assignments and requests outside the
//! request window. Every other threshold breach escalates to staff.

use std::collections::BTreeMap;
use std::num::NonZeroU32;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::RequestStatus;
use crate::model::{hash_parts, Decision, ExtensionRequest, Outcome, RequestId, Student, StudentId};

pub const RULE_PASSED: &str = "all_auto_rules_passed";
pub const RULE_INELIGIBLE: &str = "assignment_ineligible";
pub const RULE_WINDOW: &str = "outside_request_window";
pub const RULE_CUMULATIVE: &str = "cumulative";
pub const RULE_PER_REQUEST: &str = "per_request_cap";
pub const RULE_REQUEST_COUNT: &str = "request_count";
pub const RULE_ASSIGNMENT_MAX: &str = "assignment_max_days";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyConfigError {
    #[error("{0} must be a positive integer")]
    NotPositive(&'static str),
    #[error("dsp_auto_max_days_per_request ({dsp}) must be >= auto_max_days_per_request ({auto})")]
    DspBelowAuto { dsp: u32, auto: u32 },
    #[error("request_window.open_at must be before close_at")]
    EmptyWindow,
    #[error("override for {0:?} must set exactly one of `ineligible = true` or `max_days`")]
    BadOverride(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestWindow {
    pub open_at: DateTime<Utc>,
    pub close_at: DateTime<Utc>,
}

impl RequestWindow {
    pub fn contains(&self, at: &DateTime<Utc>) -> bool {
        self.open_at <= *at && *at <= self.close_at
    }
}

/// Per-assignment policy override, written as `{ ineligible = true }` or `{ max_days = 4 }`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentOverride {
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ineligible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_days: Option<u32>,
}

impl AssignmentOverride {
    pub fn ineligible() -> Self {
        Self {
            ineligible: true,
            max_days: None,
        }
    }

    pub fn max_days(days: u32) -> Self {
        Self {
            ineligible: false,
            max_days: Some(days),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub auto_max_days_per_request: u32,
    /// Upper bound on the projected granted days for one student-assignment pair.
    pub auto_max_cumulative_days: u32,
    pub dsp_auto_max_days_per_request: u32,
    pub escalate_after_n_requests: u32,
    pub assignment_overrides: BTreeMap<String, AssignmentOverride>,
    pub request_window: Option<RequestWindow>,
    pub manual_denials: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            auto_max_days_per_request: 3,
            auto_max_cumulative_days: 7,
            dsp_auto_max_days_per_request: 5,
            escalate_after_n_requests: 6,
            assignment_overrides: BTreeMap::new(),
            request_window: None,
            manual_denials: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyConfigError> {
        for (name, value) in [
            ("auto_max_days_per_request", self.auto_max_days_per_request),
            ("auto_max_cumulative_days", self.auto_max_cumulative_days),
            ("dsp_auto_max_days_per_request", self.dsp_auto_max_days_per_request),
            ("escalate_after_n_requests", self.escalate_after_n_requests),
        ] {
            if value == 0 {
                return Err(PolicyConfigError::NotPositive(name));
            }
        }
        if self.dsp_auto_max_days_per_request < self.auto_max_days_per_request {
            return Err(PolicyConfigError::DspBelowAuto {
                dsp: self.dsp_auto_max_days_per_request,
                auto: self.auto_max_days_per_request,
            });
        }
        if let Some(window) = &self.request_window {
            if window.open_at >= window.close_at {
                return Err(PolicyConfigError::EmptyWindow);
            }
        }
        for (slug, o) in &self.assignment_overrides {
            let valid = match (o.ineligible, o.max_days) {
                (true, None) => true,
                (false, Some(days)) => days > 0,
                _ => false,
            };
            if !valid {
                return Err(PolicyConfigError::BadOverride(slug.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub assignment: String,
    pub days: u32,
    pub status: RequestStatus,
    pub submitted_at: DateTime<Utc>,
}

/// A student's prior approved or pending requests, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RequestHistory {
    entries: Vec<HistoryEntry>,
}

impl RequestHistory {
    /// Keeps only approved and pending entries and sorts them by submission time.
    pub fn new(entries: impl IntoIterator<Item = HistoryEntry>) -> Self {
        let mut entries: Vec<_> = entries
            .into_iter()
            .filter(|e| counts_in_history(e.status))
            .collect();
        entries.sort_by(|a, b| a.submitted_at.cmp(&b.submitted_at));
        Self { entries }
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest approved extension on `assignment`, 0 when none.
    pub fn max_approved_days(&self, assignment: &str) -> u32 {
        self.entries
            .iter()
            .filter(|e| e.assignment == assignment && e.status.is_approved())
            .map(|e| e.days)
            .max()
            .unwrap_or(0)
    }
}

pub(crate) fn counts_in_history(status: RequestStatus) -> bool {
    status.is_approved() || status == RequestStatus::PendingReview
}

fn decision(outcome: Outcome, granted_days: u32, rule: &str) -> Decision {
    Decision {
        outcome,
        granted_days,
        rule_fired: rule.to_string(),
    }
}

/// Routes one validated request.
///
/// Rules are checked in a fixed order and `rule_fired` names the first one
/// that fails. Repeat requests on an assignment replace earlier ones, so the
/// projected grant is the maximum of approved days and the new request.
pub fn evaluate(
    request: &ExtensionRequest,
    history: &RequestHistory,
    student: &Student,
    config: &PolicyConfig,
) -> Decision {
    let days = request.days_requested;
    let override_rule = config.assignment_overrides.get(&request.assignment);

    if override_rule.is_some_and(|o| o.ineligible) {
        return decision(Outcome::Deny, 0, RULE_INELIGIBLE);
    }
    if let Some(window) = &config.request_window {
        if !window.contains(&request.submitted_at) {
            return decision(Outcome::Deny, 0, RULE_WINDOW);
        }
    }

    let projected = history.max_approved_days(&request.assignment).max(days);
    let per_request_cap = if student.dsp_registered {
        config.dsp_auto_max_days_per_request
    } else {
        config.auto_max_days_per_request
    };

    let failed = if projected > config.auto_max_cumulative_days {
        Some(RULE_CUMULATIVE)
    } else if days > per_request_cap {
        Some(RULE_PER_REQUEST)
    } else if history.len() >= config.escalate_after_n_requests as usize {
        Some(RULE_REQUEST_COUNT)
    } else if override_rule
        .and_then(|o| o.max_days)
        .is_some_and(|max| days > max)
    {
        Some(RULE_ASSIGNMENT_MAX)
    } else {
        None
    };

    match failed {
        Some(rule) => decision(Outcome::PendingApproval, 0, rule),
        None => decision(Outcome::Automatic, days, RULE_PASSED),
    }
}

/// Shifts a deadline by whole UTC days, keeping the time of day.
pub fn compute_new_due_date(due_at: DateTime<Utc>, granted_days: NonZeroU32) -> DateTime<Utc> {
    due_at + Duration::seconds(i64::from(granted_days.get()) * 86_400)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("partner {0} is not a known student")]
pub struct PartnerUnknown(pub StudentId);

/// Builds the mirrored request for the requester's partner, if any.
///
/// Mirrors carry no partner of their own, so propagation stops after one step.
/// The requester's reason is not copied onto the partner's request.
pub fn propagate_partner(
    request: &ExtensionRequest,
    lookup: impl Fn(&StudentId) -> Option<Student>,
) -> Result<Option<(ExtensionRequest, Student)>, PartnerUnknown> {
    if request.mirror_of.is_some() {
        return Ok(None);
    }
    let Some(partner) = &request.partner else {
        return Ok(None);
    };
    if partner.sid == request.student {
        return Ok(None);
    }
    let student = lookup(&partner.sid).ok_or_else(|| PartnerUnknown(partner.sid.clone()))?;
    let key = hash_parts(&["mirror", &request.idempotency_key, partner.sid.as_str()]);
    let mirror = ExtensionRequest {
        id: RequestId::from_key(&key),
        student: partner.sid.clone(),
        assignment: request.assignment.clone(),
        days_requested: request.days_requested,
        reason: String::new(),
        partner: None,
        submitted_at: request.submitted_at,
        status: RequestStatus::Received,
        decided_by: None,
        idempotency_key: key,
        mirror_of: Some(request.id.clone()),
    };
    Ok(Some((mirror, student)))
}
