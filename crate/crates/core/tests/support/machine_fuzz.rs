//! Random action sequences checked against a transition table written out
//! independently of the library.

use std::collections::BTreeSet;

use flexext_core::machine::{
    transition_email, transition_request, EmailAction, EmailStatus, RequestAction, RequestStatus,
};
use flexext_core::model::DecidedBy;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

/// (state, action, next). `origin` stands for the approving state a retry returns to.
const REQUEST_TABLE: &[(&str, &str, &str)] = &[
    ("Received", "Validate", "Received"),
    ("Received", "Invalidate", "Invalid"),
    ("Received", "PolicyAuto", "AutoApproved"),
    ("Received", "PolicyEscalate", "PendingReview"),
    ("Received", "PolicyDeny", "ManualDenied"),
    ("PendingReview", "StaffApprove", "ManualApproved"),
    ("PendingReview", "StaffDeny", "ManualDenied"),
    ("AutoApproved", "LmsApplied", "Applied"),
    ("AutoApproved", "LmsFailed", "ApplyFailed"),
    ("ManualApproved", "LmsApplied", "Applied"),
    ("ManualApproved", "LmsFailed", "ApplyFailed"),
    ("ApplyFailed", "Retry", "origin"),
];

const EMAIL_TABLE: &[(&str, &str, &str)] = &[
    ("Automatic", "Dispatch", "Automatic"),
    ("Automatic", "DeliverOk", "Sent"),
    ("Automatic", "DeliverFail", "Failed"),
    ("InQueue", "Dispatch", "InQueue"),
    ("InQueue", "DeliverOk", "Sent"),
    ("InQueue", "DeliverFail", "Failed"),
    ("PendingApproval", "DecisionReady", "InQueue"),
    ("PendingApproval", "NeedsHuman", "Manual"),
    ("Manual", "NeedsHuman", "Manual"),
    ("Failed", "Requeue", "InQueue"),
];

const REQUEST_TERMINAL: &[&str] = &["Invalid", "ManualDenied", "Applied"];

fn name<T: std::fmt::Debug>(value: T) -> String {
    format!("{value:?}")
}

fn expected(table: &[(&str, &str, &str)], state: &str, action: &str) -> Option<String> {
    table
        .iter()
        .find(|(s, a, _)| *s == state && *a == action)
        .map(|(_, _, n)| n.to_string())
}

#[derive(Debug, Default, Clone)]
pub struct FuzzReport {
    pub sequences: usize,
    pub steps: usize,
    pub legal_steps: usize,
    /// Results that disagree with the table (wrong successor, or a missing entry accepted).
    pub undefined: usize,
    /// Exits from a terminal state.
    pub terminal_escapes: usize,
    /// Staff requeues out of `Failed`, the one sanctioned exit.
    pub requeue_exits: usize,
    pub request_states_seen: BTreeSet<String>,
    pub email_states_seen: BTreeSet<String>,
}

impl FuzzReport {
    pub fn sound(&self) -> bool {
        self.undefined == 0 && self.terminal_escapes == 0
    }
}

/// Half of the sequences drive the request machine, half the email machine.
/// Actions are drawn from the table's legal set 70% of the time and
/// uniformly otherwise, so sequences get deep while illegal pairs are still hit.
pub fn fuzz(sequences: usize, seed: u64) -> FuzzReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    for i in 0..sequences {
        report.sequences += 1;
        let len = rng.gen_range(1..=16);
        if i % 2 == 0 {
            fuzz_request(&mut rng, len, &mut report);
        } else {
            fuzz_email(&mut rng, len, &mut report);
        }
    }
    report
}

fn fuzz_request(rng: &mut StdRng, len: usize, report: &mut FuzzReport) {
    let mut state = RequestStatus::Received;
    let mut decided_by: Option<DecidedBy> = None;
    let mut origin: Option<RequestStatus> = None;
    report.request_states_seen.insert(name(state));
    for _ in 0..len {
        let legal: Vec<RequestAction> = RequestAction::ALL
            .into_iter()
            .filter(|a| expected(REQUEST_TABLE, &name(state), &name(*a)).is_some())
            .collect();
        let action = if !legal.is_empty() && rng.gen_bool(0.7) {
            *legal.choose(rng).unwrap()
        } else {
            *RequestAction::ALL.choose(rng).unwrap()
        };
        report.steps += 1;
        let want = expected(REQUEST_TABLE, &name(state), &name(action)).map(|n| {
            if n == "origin" {
                origin.map(name).unwrap_or_default()
            } else {
                n
            }
        });
        let got = transition_request(state, action, decided_by.as_ref());
        match (&want, &got) {
            (Some(w), Ok(g)) if *w == name(*g) => {}
            (None, Err(_)) => {}
            _ => report.undefined += 1,
        }
        if let Ok(next) = got {
            report.legal_steps += 1;
            if REQUEST_TERMINAL.contains(&name(state).as_str()) && next != state {
                report.terminal_escapes += 1;
            }
            match action {
                RequestAction::PolicyAuto | RequestAction::PolicyDeny => decided_by = Some(DecidedBy::Policy),
                RequestAction::StaffApprove | RequestAction::StaffDeny => {
                    decided_by = Some(DecidedBy::Staff("ta".into()))
                }
                _ => {}
            }
            if matches!(next, RequestStatus::AutoApproved | RequestStatus::ManualApproved) {
                origin = Some(next);
            }
            state = next;
            report.request_states_seen.insert(name(state));
        }
    }
}

fn fuzz_email(rng: &mut StdRng, len: usize, report: &mut FuzzReport) {
    let starts = [
        EmailStatus::Automatic,
        EmailStatus::PendingApproval,
        EmailStatus::InQueue,
        EmailStatus::Manual,
    ];
    let mut state = *starts.choose(rng).unwrap();
    report.email_states_seen.insert(name(state));
    for _ in 0..len {
        let legal: Vec<EmailAction> = EmailAction::ALL
            .into_iter()
            .filter(|a| expected(EMAIL_TABLE, &name(state), &name(*a)).is_some())
            .collect();
        let action = if !legal.is_empty() && rng.gen_bool(0.7) {
            *legal.choose(rng).unwrap()
        } else {
            *EmailAction::ALL.choose(rng).unwrap()
        };
        report.steps += 1;
        let want = expected(EMAIL_TABLE, &name(state), &name(action));
        let got = transition_email(state, action);
        match (&want, &got) {
            (Some(w), Ok(g)) if *w == name(*g) => {}
            (None, Err(_)) => {}
            _ => report.undefined += 1,
        }
        if let Ok(next) = got {
            report.legal_steps += 1;
            match state {
                EmailStatus::Sent if next != state => report.terminal_escapes += 1,
                EmailStatus::Failed if action == EmailAction::Requeue => report.requeue_exits += 1,
                EmailStatus::Failed if next != state => report.terminal_escapes += 1,
                _ => {}
            }
            state = next;
            report.email_states_seen.insert(name(state));
        }
    }
}
