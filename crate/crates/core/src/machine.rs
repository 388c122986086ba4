//! Request and email lifecycles.
//!
//! Both machines are fixed tables. Any `(state, action)` pair missing from a
//! table is an [`IllegalTransition`]; callers must surface it rather than
//! ignore it, since it always points at a programming or replay error.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DecidedBy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RequestStatus {
    Received,
    Invalid,
    AutoApproved,
    PendingReview,
    ManualApproved,
    ManualDenied,
    Applied,
    ApplyFailed,
}

impl RequestStatus {
    pub const ALL: [RequestStatus; 8] = [
        RequestStatus::Received,
        RequestStatus::Invalid,
        RequestStatus::AutoApproved,
        RequestStatus::PendingReview,
        RequestStatus::ManualApproved,
        RequestStatus::ManualDenied,
        RequestStatus::Applied,
        RequestStatus::ApplyFailed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RequestStatus::Invalid | RequestStatus::ManualDenied | RequestStatus::Applied
        )
    }

    /// Approved by policy or staff, whether or not the LMS has caught up.
    pub fn is_approved(self) -> bool {
        matches!(
            self,
            RequestStatus::AutoApproved
                | RequestStatus::ManualApproved
                | RequestStatus::Applied
                | RequestStatus::ApplyFailed
        )
    }

    /// Status label in the course-staff vocabulary ("automatic", "pending
    /// approval", "manual"). Whether a decided request reads as automatic or
    /// manual depends on who decided it.
    pub fn label(self, decided_by: Option<&DecidedBy>) -> &'static str {
        match self {
            RequestStatus::Received => "received",
            RequestStatus::Invalid => "invalid",
            RequestStatus::PendingReview => "pending approval",
            RequestStatus::AutoApproved => "automatic",
            RequestStatus::ManualApproved => "manual",
            RequestStatus::ManualDenied
            | RequestStatus::Applied
            | RequestStatus::ApplyFailed => match decided_by {
                Some(DecidedBy::Staff(_)) => "manual",
                _ => "automatic",
            },
        }
    }
}

impl fmt::Display for RequestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestAction {
    Validate,
    Invalidate,
    PolicyAuto,
    PolicyEscalate,
    PolicyDeny,
    StaffApprove,
    StaffDeny,
    LmsApplied,
    LmsFailed,
    Retry,
}

impl RequestAction {
    pub const ALL: [RequestAction; 10] = [
        RequestAction::Validate,
        RequestAction::Invalidate,
        RequestAction::PolicyAuto,
        RequestAction::PolicyEscalate,
        RequestAction::PolicyDeny,
        RequestAction::StaffApprove,
        RequestAction::StaffDeny,
        RequestAction::LmsApplied,
        RequestAction::LmsFailed,
        RequestAction::Retry,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmailStatus {
    Automatic,
    PendingApproval,
    InQueue,
    Manual,
    Sent,
    Failed,
}

impl EmailStatus {
    pub const ALL: [EmailStatus; 6] = [
        EmailStatus::Automatic,
        EmailStatus::PendingApproval,
        EmailStatus::InQueue,
        EmailStatus::Manual,
        EmailStatus::Sent,
        EmailStatus::Failed,
    ];

    /// Jobs the dispatcher may attempt.
    pub fn is_dispatchable(self) -> bool {
        matches!(self, EmailStatus::Automatic | EmailStatus::InQueue)
    }

    /// Terminal for the automated dispatcher. `Failed` may still be requeued by staff.
    pub fn is_terminal(self) -> bool {
        matches!(self, EmailStatus::Sent | EmailStatus::Failed)
    }

    pub fn label(self) -> &'static str {
        match self {
            EmailStatus::Automatic => "automatic",
            EmailStatus::PendingApproval => "pending approval",
            EmailStatus::InQueue => "in queue",
            EmailStatus::Manual => "manual",
            EmailStatus::Sent => "sent",
            EmailStatus::Failed => "failed",
        }
    }
}

impl fmt::Display for EmailStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmailAction {
    /// Creation-only; has no successor in the table.
    DecisionAuto,
    DecisionReady,
    NeedsHuman,
    /// An attempt that failed but may be retried.
    Dispatch,
    DeliverOk,
    /// The final failed attempt.
    DeliverFail,
    Requeue,
}

impl EmailAction {
    pub const ALL: [EmailAction; 7] = [
        EmailAction::DecisionAuto,
        EmailAction::DecisionReady,
        EmailAction::NeedsHuman,
        EmailAction::Dispatch,
        EmailAction::DeliverOk,
        EmailAction::DeliverFail,
        EmailAction::Requeue,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal transition: {action} from {current}")]
pub struct IllegalTransition {
    pub current: String,
    pub action: String,
}

impl IllegalTransition {
    fn new(current: impl fmt::Debug, action: impl fmt::Debug) -> Self {
        Self {
            current: format!("{current:?}"),
            action: format!("{action:?}"),
        }
    }
}

/// Successor of `current` under `action`.
///
/// `decided_by` only matters for `Retry`, which returns a failed apply to the
/// approving state it came from.
pub fn transition_request(
    current: RequestStatus,
    action: RequestAction,
    decided_by: Option<&DecidedBy>,
) -> Result<RequestStatus, IllegalTransition> {
    use RequestAction as A;
    use RequestStatus as S;
    let next = match (current, action) {
        (S::Received, A::Validate) => S::Received,
        (S::Received, A::Invalidate) => S::Invalid,
        (S::Received, A::PolicyAuto) => S::AutoApproved,
        (S::Received, A::PolicyEscalate) => S::PendingReview,
        (S::Received, A::PolicyDeny) => S::ManualDenied,
        (S::PendingReview, A::StaffApprove) => S::ManualApproved,
        (S::PendingReview, A::StaffDeny) => S::ManualDenied,
        (S::AutoApproved | S::ManualApproved, A::LmsApplied) => S::Applied,
        (S::AutoApproved | S::ManualApproved, A::LmsFailed) => S::ApplyFailed,
        (S::ApplyFailed, A::Retry) => match decided_by {
            Some(DecidedBy::Policy) => S::AutoApproved,
            Some(DecidedBy::Staff(_)) => S::ManualApproved,
            None => return Err(IllegalTransition::new(current, action)),
        },
        _ => return Err(IllegalTransition::new(current, action)),
    };
    Ok(next)
}

pub fn transition_email(
    current: EmailStatus,
    action: EmailAction,
) -> Result<EmailStatus, IllegalTransition> {
    use EmailAction as A;
    use EmailStatus as S;
    let next = match (current, action) {
        (S::Automatic | S::InQueue, A::Dispatch) => current,
        (S::Automatic | S::InQueue, A::DeliverOk) => S::Sent,
        (S::Automatic | S::InQueue, A::DeliverFail) => S::Failed,
        (S::PendingApproval, A::DecisionReady) => S::InQueue,
        (S::PendingApproval, A::NeedsHuman) => S::Manual,
        (S::Manual, A::NeedsHuman) => S::Manual,
        (S::Failed, A::Requeue) => S::InQueue,
        _ => return Err(IllegalTransition::new(current, action)),
    };
    Ok(next)
}
