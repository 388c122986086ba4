//! One row per student: extension days, statuses and latest request, per assignment.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::model::{format_ts, Assignment, EmailAddress, StudentId, ViewerRole};
use crate::store::{RequestRecord, Snapshot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssignmentCell {
    pub granted_days: u32,
    pub request_status: String,
    pub email_status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RosterEntry {
    pub sid: StudentId,
    pub name: String,
    pub email: EmailAddress,
    /// `None` when hidden from the viewer.
    pub dsp: Option<bool>,
    /// `None` when hidden from the viewer.
    pub latest_reason: Option<String>,
    pub latest_request_at: DateTime<Utc>,
    pub assignments: BTreeMap<String, AssignmentCell>,
}

fn latest<'a>(records: impl Iterator<Item = &'a RequestRecord>) -> Option<&'a RequestRecord> {
    records.max_by_key(|r| (r.request.submitted_at, r.received_seq))
}

/// Sorted by student id.
pub fn project_roster(snapshot: &Snapshot, role: ViewerRole) -> Vec<RosterEntry> {
    let mut roster = Vec::new();
    for (sid, ids) in &snapshot.by_student {
        let records: Vec<&RequestRecord> = ids.iter().filter_map(|id| snapshot.requests.get(id)).collect();
        let (Some(newest), Some(student)) = (latest(records.iter().copied()), snapshot.students.get(sid)) else {
            continue;
        };

        let mut per_assignment: BTreeMap<&str, Vec<&RequestRecord>> = BTreeMap::new();
        for record in &records {
            per_assignment
                .entry(record.request.assignment.as_str())
                .or_default()
                .push(record);
        }
        let assignments = per_assignment
            .into_iter()
            .map(|(slug, group)| {
                let granted_days = group
                    .iter()
                    .filter(|r| r.status().is_approved())
                    .map(|r| r.granted_days)
                    .max()
                    .unwrap_or(0);
                let current = latest(group.iter().copied()).expect("group is non-empty");
                let email_status = snapshot
                    .current_job(&current.request.id)
                    .map(|j| j.status.label().to_string())
                    .unwrap_or_default();
                (
                    slug.to_string(),
                    AssignmentCell {
                        granted_days,
                        request_status: current.label().to_string(),
                        email_status,
                    },
                )
            })
            .collect();

        let full = role == ViewerRole::Full;
        roster.push(RosterEntry {
            sid: sid.clone(),
            name: student.name.clone(),
            email: student.email.clone(),
            dsp: full.then_some(student.dsp_registered),
            latest_reason: full.then(|| newest.request.reason.clone()),
            latest_request_at: newest.request.submitted_at,
            assignments,
        });
    }
    roster
}

pub const FIXED_COLUMNS: [&str; 6] = ["sid", "name", "email", "dsp", "latest_reason", "latest_request_at"];

pub fn roster_header(catalog: &[Assignment]) -> Vec<String> {
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|c| c.to_string()).collect();
    for a in catalog {
        header.push(format!("{}_days", a.slug));
        header.push(format!("{}_status", a.slug));
        header.push(format!("{}_email_status", a.slug));
    }
    header
}

/// CSV with the fixed columns, then three columns per catalog assignment in
/// catalog order. Hidden values and assignments without requests are empty cells.
pub fn export_roster_csv(roster: &[RosterEntry], catalog: &[Assignment]) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    writer
        .write_record(roster_header(catalog))
        .expect("writing to memory");
    for entry in roster {
        let mut row = vec![
            entry.sid.to_string(),
            entry.name.clone(),
            entry.email.to_string(),
            entry.dsp.map(|d| d.to_string()).unwrap_or_default(),
            entry.latest_reason.clone().unwrap_or_default(),
            format_ts(&entry.latest_request_at),
        ];
        for a in catalog {
            match entry.assignments.get(&a.slug) {
                Some(cell) => {
                    row.push(cell.granted_days.to_string());
                    row.push(cell.request_status.clone());
                    row.push(cell.email_status.clone());
                }
                None => row.extend([String::new(), String::new(), String::new()]),
            }
        }
        writer.write_record(&row).expect("writing to memory");
    }
    writer.into_inner().expect("flushing to memory")
}
