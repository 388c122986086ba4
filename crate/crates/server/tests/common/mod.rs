//! In-process HTTP client and the privacy scan, shared with the acceptance suite.
#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Utc};
use flexext_core::lms::LmsConnector;
use flexext_core::notifier::Sender;
use flexext_server::config::AuthConfig;
use flexext_server::{router, AppState, Auth};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use crate::support::{reason_for, student_email, Harness};

pub const SUBMIT: &str = "submit-token-1";
pub const STAFF: &str = "staff-token-1";
pub const RESTRICTED: &str = "restricted-token-1";

pub fn auth() -> Auth {
    Auth::new(&AuthConfig {
        submission_token: SUBMIT.into(),
        staff_token: STAFF.into(),
        restricted_staff_token: Some(RESTRICTED.into()),
    })
}

pub fn app<S, C>(h: &Harness<S, C>) -> Router {
    router(AppState::new(h.engine.clone(), auth()))
}

#[derive(Debug)]
pub struct Reply {
    pub status: StatusCode,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", self.text()))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, token: Option<&str>, body: Option<(&str, Vec<u8>)>) -> Reply {
    let mut builder = Request::builder().method(method).uri(uri).header("x-staff-id", "ta1");
    if let Some(token) = token {
        builder = builder.header("authorization", format!("Bearer {token}"));
    }
    let request = match body {
        Some((content_type, bytes)) => builder.header("content-type", content_type).body(Body::from(bytes)),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let content_type = response
        .headers()
        .get("content-type")
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let body = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, content_type, body }
}

pub async fn get(app: &Router, uri: &str, token: &str) -> Reply {
    call(app, Method::GET, uri, Some(token), None).await
}

pub async fn post_json(app: &Router, uri: &str, token: &str, body: &Value) -> Reply {
    call(app, Method::POST, uri, Some(token), Some(("application/json", serde_json::to_vec(body).unwrap()))).await
}

pub fn submission(sid: &str, assignment: &str, days: u32, at: DateTime<Utc>) -> Value {
    json!({
        "sid": sid,
        "name": format!("Student {sid}"),
        "email": student_email(sid),
        "dsp": "yes",
        "assignment": assignment,
        "days": days,
        "reason": reason_for(sid, days as usize),
        "submitted_at": at,
    })
}

/// Read endpoints a staff member can reach.
pub const STAFF_READS: [&str; 6] = ["/pending", "/roster", "/roster.json", "/roster.csv", "/outbox", "/audit?since=0"];

/// Keys whose value must be empty in a restricted response.
const SENSITIVE_KEYS: [&str; 5] = ["reason", "latest_reason", "dsp", "dsp_registered", "body"];

/// Every way a restricted response could leak reason or DSP content.
pub fn privacy_violations(reply: &Reply) -> Vec<String> {
    let mut found = Vec::new();
    let text = reply.text();
    if text.contains("PRIVATE-REASON") {
        found.push("reason text present".to_string());
    }
    if reply.content_type.starts_with("text/csv") {
        let mut reader = csv::ReaderBuilder::new().from_reader(reply.body.as_slice());
        let header = reader.headers().unwrap().clone();
        for record in reader.records() {
            let record = record.unwrap();
            for (name, value) in header.iter().zip(record.iter()) {
                if SENSITIVE_KEYS.contains(&name) && !value.is_empty() {
                    found.push(format!("csv column {name} = {value:?}"));
                }
            }
        }
    } else if let Ok(value) = serde_json::from_slice::<Value>(&reply.body) {
        scan(&value, "$", &mut found);
    }
    found
}

fn scan(value: &Value, path: &str, found: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (key, field) in map {
                let here = format!("{path}.{key}");
                if SENSITIVE_KEYS.contains(&key.as_str()) && !field.is_null() {
                    found.push(format!("{here} = {field}"));
                    continue;
                }
                scan(field, &here, found);
            }
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                scan(item, &format!("{path}[{i}]"), found);
            }
        }
        _ => {}
    }
}

pub fn last_seq<S: Sender, C: LmsConnector>(h: &Harness<S, C>) -> u64 {
    h.engine.store().last_seq()
}

/// A form export with `rows` rows: repeat students, a multi-assignment
/// answer every third row and an unparseable day count every eleventh.
pub fn form_export(rows: usize) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["Timestamp".to_string()];
    header.extend(flexext_core::ingestion::DEFAULT_QUESTIONS.iter().map(|(_, q)| q.to_string()));
    w.write_record(&header).unwrap();
    for i in 0..rows {
        let sid = format!("{}", 30_500 + i % 9);
        let days = if i % 11 == 10 { "zero".to_string() } else { (1 + i % 6).to_string() };
        w.write_record([
            format!("3/{}/2025 10:{:02}:00", 1 + i % 5, i % 60),
            sid.clone(),
            format!("Student {sid}"),
            student_email(&sid),
            "No".into(),
            ["HW1", "HW2", "HW1, Project 1"][i % 3].into(),
            days,
            reason_for(&sid, i),
            "No".into(),
            String::new(),
        ])
        .unwrap();
    }
    w.into_inner().unwrap()
}
