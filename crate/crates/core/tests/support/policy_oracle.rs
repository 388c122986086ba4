//! Brute-force reference for the routing policy, and the exhaustive grid it
//! is compared on.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use chrono::{Duration as Span, TimeZone, Utc};
use flexext_core::machine::RequestStatus;
use flexext_core::model::{EmailAddress, ExtensionRequest, Outcome, Student, StudentId};
use flexext_core::policy::{evaluate, AssignmentOverride, HistoryEntry, PolicyConfig, RequestHistory};

pub const ASSIGNMENTS: [&str; 2] = ["a", "b"];
pub const MAX_DAYS: u32 = 8;
pub const MAX_HISTORY: usize = 4;

/// One prior request: (assignment index, days, approved?). Unapproved means pending.
pub type Prior = (usize, u32, bool);

#[derive(Debug, Clone, Copy)]
pub struct Point {
    pub auto: u32,
    pub cumulative: u32,
    pub escalate_after: u32,
    pub dsp_extra: u32,
    /// Override on assignment "b": None, Some(0) = ineligible, Some(n) = max n days.
    pub b_override: Option<u32>,
}

pub const POINTS: [Point; 8] = [
    Point { auto: 3, cumulative: 7, escalate_after: 6, dsp_extra: 2, b_override: None },
    Point { auto: 2, cumulative: 6, escalate_after: 2, dsp_extra: 2, b_override: Some(4) },
    Point { auto: 3, cumulative: 8, escalate_after: 4, dsp_extra: 2, b_override: Some(5) },
    Point { auto: 2, cumulative: 8, escalate_after: 3, dsp_extra: 3, b_override: Some(0) },
    Point { auto: 3, cumulative: 6, escalate_after: 1, dsp_extra: 2, b_override: None },
    Point { auto: 1, cumulative: 4, escalate_after: 4, dsp_extra: 2, b_override: Some(2) },
    Point { auto: 4, cumulative: 8, escalate_after: 2, dsp_extra: 1, b_override: Some(0) },
    Point { auto: 3, cumulative: 7, escalate_after: 3, dsp_extra: 4, b_override: Some(6) },
];

impl Point {
    pub fn config(&self) -> PolicyConfig {
        let mut config = PolicyConfig {
            auto_max_days_per_request: self.auto,
            auto_max_cumulative_days: self.cumulative,
            dsp_auto_max_days_per_request: self.auto + self.dsp_extra,
            escalate_after_n_requests: self.escalate_after,
            ..PolicyConfig::default()
        };
        match self.b_override {
            None => {}
            Some(0) => {
                config.assignment_overrides.insert("b".into(), AssignmentOverride::ineligible());
            }
            Some(n) => {
                config.assignment_overrides.insert("b".into(), AssignmentOverride::max_days(n));
            }
        }
        config.validate().expect("grid configs are valid");
        config
    }
}

/// The rules as plain arithmetic over the raw history tuples.
pub fn oracle(point: &Point, history: &[Prior], assignment: usize, days: u32, dsp: bool) -> (Outcome, u32, &'static str) {
    let on_b = assignment == 1;
    if on_b && point.b_override == Some(0) {
        return (Outcome::Deny, 0, "assignment_ineligible");
    }
    let mut largest = days;
    for &(a, d, approved) in history {
        if a == assignment && approved && d > largest {
            largest = d;
        }
    }
    let cap = if dsp { point.auto + point.dsp_extra } else { point.auto };
    if largest > point.cumulative {
        return (Outcome::PendingApproval, 0, "cumulative");
    }
    if days > cap {
        return (Outcome::PendingApproval, 0, "per_request_cap");
    }
    if history.len() as u32 >= point.escalate_after {
        return (Outcome::PendingApproval, 0, "request_count");
    }
    if let (true, Some(max)) = (on_b, point.b_override) {
        if days > max {
            return (Outcome::PendingApproval, 0, "assignment_max_days");
        }
    }
    (Outcome::Automatic, days, "all_auto_rules_passed")
}

/// Every multiset of at most `MAX_HISTORY` priors, each as a sorted vector.
pub fn histories() -> Vec<Vec<Prior>> {
    let mut alphabet = Vec::new();
    for a in 0..ASSIGNMENTS.len() {
        for d in 1..=MAX_DAYS {
            for approved in [true, false] {
                alphabet.push((a, d, approved));
            }
        }
    }
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<(Vec<Prior>, usize)> = vec![(Vec::new(), 0)];
    for _ in 0..MAX_HISTORY {
        let mut next = Vec::new();
        for (prefix, start) in &frontier {
            for (i, item) in alphabet.iter().enumerate().skip(*start) {
                let mut h = prefix.clone();
                h.push(*item);
                out.push(h.clone());
                next.push((h, i));
            }
        }
        frontier = next;
    }
    out
}

pub fn to_history(priors: &[Prior]) -> RequestHistory {
    let base = Utc.with_ymd_and_hms(2025, 2, 1, 0, 0, 0).unwrap();
    RequestHistory::new(priors.iter().enumerate().map(|(i, &(a, d, approved))| HistoryEntry {
        assignment: ASSIGNMENTS[a].to_string(),
        days: d,
        status: if approved {
            RequestStatus::AutoApproved
        } else {
            RequestStatus::PendingReview
        },
        submitted_at: base + Span::hours(i as i64),
    }))
}

pub fn student(dsp: bool) -> Student {
    Student::new(
        StudentId::normalize("30345").unwrap(),
        "Ann",
        EmailAddress::parse("ann@berkeley.edu").unwrap(),
        dsp,
    )
    .unwrap()
}

pub fn request(assignment: usize, days: u32) -> ExtensionRequest {
    ExtensionRequest::received(
        StudentId::normalize("30345").unwrap(),
        ASSIGNMENTS[assignment],
        days,
        "",
        None,
        Utc.with_ymd_and_hms(2025, 3, 1, 0, 0, 0).unwrap(),
    )
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub cases: u64,
    pub mismatches: u64,
    pub examples: Vec<String>,
    pub rules_fired: BTreeMap<String, u64>,
    pub elapsed: Duration,
}

pub fn run_grid() -> GridReport {
    let start = Instant::now();
    let configs: Vec<(Point, PolicyConfig)> = POINTS.iter().map(|p| (*p, p.config())).collect();
    let students = [student(false), student(true)];
    let requests: Vec<(usize, u32, ExtensionRequest)> = (0..ASSIGNMENTS.len())
        .flat_map(|a| (1..=MAX_DAYS).map(move |d| (a, d, request(a, d))))
        .collect();
    let mut report = GridReport {
        cases: 0,
        mismatches: 0,
        examples: Vec::new(),
        rules_fired: BTreeMap::new(),
        elapsed: Duration::ZERO,
    };
    let mut fired: BTreeMap<&'static str, u64> = BTreeMap::new();
    for priors in histories() {
        let history = to_history(&priors);
        for (point, config) in &configs {
            for (dsp, student) in [false, true].into_iter().zip(&students) {
                for (a, d, req) in &requests {
                    report.cases += 1;
                    let got = evaluate(req, &history, student, config);
                    let want = oracle(point, &priors, *a, *d, dsp);
                    *fired.entry(want.2).or_insert(0) += 1;
                    if (got.outcome, got.granted_days, got.rule_fired.as_str()) != want {
                        report.mismatches += 1;
                        if report.examples.len() < 5 {
                            report.examples.push(format!(
                                "{point:?} dsp={dsp} history={priors:?} request=({a},{d}): engine {got:?}, oracle {want:?}"
                            ));
                        }
                    }
                }
            }
        }
    }
    report.rules_fired = fired.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    report.elapsed = start.elapsed();
    report
}
