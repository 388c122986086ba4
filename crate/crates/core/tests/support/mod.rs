//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code, unused_imports)]

pub mod fault;
pub mod machine_fuzz;
pub mod policy_oracle;
pub mod workload;

use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use flexext_core::engine::{CourseSettings, Engine};
use flexext_core::ingestion::RawSubmission;
use flexext_core::lms::{LmsConnector, MockConnector};
use flexext_core::notifier::Sender;
use flexext_core::{Assignment, EmailAddress, ManualClock, Store};

pub use fault::{FlakyConnector, LedgerSender};

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap()
}

pub fn catalog() -> Vec<Assignment> {
    vec![
        Assignment {
            slug: "hw1".into(),
            display_name: "HW1".into(),
            due_at: Utc.with_ymd_and_hms(2025, 3, 10, 23, 59, 0).unwrap(),
            max_extension_days: None,
        },
        Assignment {
            slug: "hw2".into(),
            display_name: "HW2".into(),
            due_at: Utc.with_ymd_and_hms(2025, 3, 17, 23, 59, 0).unwrap(),
            max_extension_days: None,
        },
        Assignment {
            slug: "proj1".into(),
            display_name: "Project 1".into(),
            due_at: Utc.with_ymd_and_hms(2025, 3, 24, 23, 59, 0).unwrap(),
            max_extension_days: Some(10),
        },
    ]
}

pub fn settings() -> CourseSettings {
    CourseSettings::new("CS 10", catalog(), EmailAddress::parse("staff@cs10.edu").unwrap())
}

pub struct Harness<S, C> {
    pub engine: Arc<Engine>,
    pub clock: Arc<ManualClock>,
    pub sender: Arc<S>,
    pub connector: Arc<C>,
}

pub fn harness_with<S, C>(settings: CourseSettings, store: Store, clock: Arc<ManualClock>, sender: S, connector: C) -> Harness<S, C>
where
    S: Sender + 'static,
    C: LmsConnector + 'static,
{
    let sender = Arc::new(sender);
    let connector = Arc::new(connector);
    let engine = Engine::new(store, settings, sender.clone(), connector.clone());
    Harness {
        engine: Arc::new(engine),
        clock,
        sender,
        connector,
    }
}

/// In-memory store, reliable sender and mock connector.
pub fn harness(settings: CourseSettings) -> Harness<LedgerSender, MockConnector> {
    let clock = Arc::new(ManualClock::new(t0()));
    let store = Store::in_memory(clock.clone());
    let connector = MockConnector::new(&settings.catalog);
    harness_with(settings, store, clock, LedgerSender::reliable(), connector)
}

pub fn student_email(sid: &str) -> String {
    format!("s{sid}@berkeley.edu")
}

/// A distinctive reason string so leaks are easy to scan for.
pub fn reason_for(sid: &str, n: usize) -> String {
    format!("PRIVATE-REASON-{sid}-{n} family emergency")
}

pub fn raw(sid: &str, assignment: &str, days: u32, at: DateTime<Utc>) -> RawSubmission {
    RawSubmission {
        sid: sid.to_string(),
        name: format!("Student {sid}"),
        email: student_email(sid),
        dsp: "No".into(),
        assignment: assignment.to_string(),
        days: days.to_string(),
        reason: reason_for(sid, 0),
        has_partner: "No".into(),
        partner_contact: String::new(),
        submitted_at: Some(at),
    }
}

pub fn with_partner(mut raw: RawSubmission, partner_sid: &str) -> RawSubmission {
    raw.has_partner = "Yes".into();
    raw.partner_contact = format!("{} {partner_sid}", student_email(partner_sid));
    raw
}
