//! Decision emails: templates, job lifecycle rules and delivery.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{EmailAction, EmailStatus};
use crate::model::{EmailAddress, RequestId};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;
pub const BACKOFF_BASE_SECS: i64 = 30;
pub const BACKOFF_FACTOR: i64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKey {
    AutoApproved,
    ManualApproved,
    Denied,
    PendingAck,
}

impl TemplateKey {
    pub const ALL: [TemplateKey; 4] = [
        TemplateKey::AutoApproved,
        TemplateKey::ManualApproved,
        TemplateKey::Denied,
        TemplateKey::PendingAck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKey::AutoApproved => "auto_approved",
            TemplateKey::ManualApproved => "manual_approved",
            TemplateKey::Denied => "denied",
            TemplateKey::PendingAck => "pending_ack",
        }
    }
}

impl fmt::Display for TemplateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbound template variable {0:?}")]
    UnboundVariable(String),
    #[error("template {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmailTemplate {
    pub key: TemplateKey,
    pub subject: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub subject: String,
    pub body: String,
}

/// Substitutes `{{name}}` placeholders. Unused bindings are ignored.
pub fn render_text(text: &str, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start + 2..].find("}}") else {
            break;
        };
        out.push_str(&rest[..start]);
        let name = rest[start + 2..start + 2 + len].trim();
        let value = bindings
            .get(name)
            .ok_or_else(|| TemplateError::UnboundVariable(name.to_string()))?;
        out.push_str(value);
        rest = &rest[start + 2 + len + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn render_template(
    template: &EmailTemplate,
    bindings: &BTreeMap<&str, String>,
) -> Result<Rendered, TemplateError> {
    Ok(Rendered {
        subject: render_text(&template.subject, bindings)?,
        body: render_text(&template.body, bindings)?,
    })
}

/// Values available to every template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bindings {
    pub student_name: String,
    pub assignment_name: String,
    pub days: u32,
    pub due_at: String,
    pub new_due_at: String,
    pub reason_echo: String,
    pub course_name: String,
}

impl Bindings {
    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("student_name", self.student_name.clone()),
            ("assignment_name", self.assignment_name.clone()),
            ("days", self.days.to_string()),
            ("due_at", self.due_at.clone()),
            ("new_due_at", self.new_due_at.clone()),
            ("reason_echo", self.reason_echo.clone()),
            ("course_name", self.course_name.clone()),
        ])
    }
}

const DEFAULT_AUTO: &str = "Subject: Extension approved for {{assignment_name}}

Hi {{student_name}},

Your request for a {{days}}-day extension on {{assignment_name}} has been approved.
Your new deadline is {{new_due_at}}.

{{course_name}} course staff
";

const DEFAULT_MANUAL: &str = "Subject: Extension approved for {{assignment_name}}

Hi {{student_name}},

Course staff reviewed and approved your request for a {{days}}-day extension on {{assignment_name}}.
Your new deadline is {{new_due_at}}.

{{course_name}} course staff
";

const DEFAULT_DENIED: &str = "Subject: Extension request for {{assignment_name}}

Hi {{student_name}},

We could not approve your request for a {{days}}-day extension on {{assignment_name}}.
The deadline remains {{due_at}}. Please reach out to course staff if you would like to talk about options.

{{course_name}} course staff
";

const DEFAULT_PENDING: &str = "Subject: Extension request received for {{assignment_name}}

Hi {{student_name}},

We received your request for a {{days}}-day extension on {{assignment_name}}.
It needs a quick review by course staff and you will hear back once it has been decided.

{{course_name}} course staff
";

/// Parses the template file format: a `Subject:` line, an optional blank line, then the body.
fn placeholders(text: &str) -> impl Iterator<Item = &str> {
    text.split("{{")
        .skip(1)
        .filter_map(|part| part.split_once("}}").map(|(name, _)| name.trim()))
}

pub fn parse_template(key: TemplateKey, text: &str) -> Result<EmailTemplate, String> {
    let text = text.replace("\r\n", "\n");
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let subject = first
        .strip_prefix("Subject:")
        .ok_or_else(|| "first line must start with \"Subject:\"".to_string())?
        .trim()
        .to_string();
    // Subjects are shown to restricted staff, so they may not carry the reason.
    if placeholders(&subject).any(|name| name == "reason_echo") {
        return Err("{{reason_echo}} is not allowed in the subject".into());
    }
    let body = rest.strip_prefix('\n').unwrap_or(rest).to_string();
    Ok(EmailTemplate { key, subject, body })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKey, EmailTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = [
            (TemplateKey::AutoApproved, DEFAULT_AUTO),
            (TemplateKey::ManualApproved, DEFAULT_MANUAL),
            (TemplateKey::Denied, DEFAULT_DENIED),
            (TemplateKey::PendingAck, DEFAULT_PENDING),
        ]
        .into_iter()
        .map(|(key, text)| (key, parse_template(key, text).expect("built-in template")))
        .collect();
        Self { templates }
    }
}

impl TemplateSet {
    /// Loads `<key>.txt` files from `dir`; keys without a file keep the built-in text.
    /// Every template is test-rendered so that unknown placeholders fail at load time.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::default();
        for key in TemplateKey::ALL {
            let path = dir.join(format!("{}.txt", key.as_str()));
            match fs::read_to_string(&path) {
                Ok(text) => {
                    let template = parse_template(key, &text).map_err(|message| TemplateError::Load {
                        path: path.display().to_string(),
                        message,
                    })?;
                    set.templates.insert(key, template);
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => {
                    return Err(TemplateError::Load {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })
                }
            }
        }
        set.check()?;
        Ok(set)
    }

    pub fn with_template(mut self, template: EmailTemplate) -> Result<Self, TemplateError> {
        self.templates.insert(template.key, template);
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<(), TemplateError> {
        let probe = Bindings {
            student_name: String::new(),
            assignment_name: String::new(),
            days: 1,
            due_at: String::new(),
            new_due_at: String::new(),
            reason_echo: String::new(),
            course_name: String::new(),
        }
        .to_map();
        for template in self.templates.values() {
            render_template(template, &probe)?;
        }
        Ok(())
    }

    pub fn get(&self, key: TemplateKey) -> &EmailTemplate {
        &self.templates[&key]
    }

    pub fn render(&self, key: TemplateKey, bindings: &Bindings) -> Result<Rendered, TemplateError> {
        render_template(self.get(key), &bindings.to_map())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub String);

impl JobId {
    pub fn for_request(request: &RequestId, template: TemplateKey) -> Self {
        Self(format!("{}-{}", request.as_str(), template.as_str()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A rendered email ready to be created as a job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: JobId,
    pub request_id: RequestId,
    pub template: TemplateKey,
    pub to: EmailAddress,
    pub subject: String,
    pub body: String,
    pub status: EmailStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmailJob {
    pub id: JobId,
    pub request_id: RequestId,
    pub template: TemplateKey,
    pub to: EmailAddress,
    pub subject: String,
    pub body: String,
    pub status: EmailStatus,
    pub attempts: u32,
    pub last_error: Option<String>,
    pub next_attempt_at: Option<DateTime<Utc>>,
    pub message_id: Option<String>,
}

impl From<JobSpec> for EmailJob {
    fn from(spec: JobSpec) -> Self {
        Self {
            id: spec.id,
            request_id: spec.request_id,
            template: spec.template,
            to: spec.to,
            subject: spec.subject,
            body: spec.body,
            status: spec.status,
            attempts: 0,
            last_error: None,
            next_attempt_at: None,
            message_id: None,
        }
    }
}

impl EmailJob {
    pub fn is_due(&self, now: DateTime<Utc>) -> bool {
        self.status.is_dispatchable() && self.next_attempt_at.is_none_or(|at| at <= now)
    }
}

/// How a decision changes the request's email.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobEffect {
    Create(JobSpec),
    /// Re-renders a held job with the decision's template and moves it out of `PendingApproval`.
    Release {
        job_id: JobId,
        template: TemplateKey,
        subject: String,
        body: String,
        action: EmailAction,
    },
}

/// What was decided, from the notifier's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Notice {
    AutoApproved,
    Escalated,
    PolicyDenied,
    StaffApproved,
    StaffDenied,
}

impl Notice {
    pub fn template(self) -> TemplateKey {
        match self {
            Notice::AutoApproved => TemplateKey::AutoApproved,
            Notice::Escalated => TemplateKey::PendingAck,
            Notice::PolicyDenied | Notice::StaffDenied => TemplateKey::Denied,
            Notice::StaffApproved => TemplateKey::ManualApproved,
        }
    }

    /// Initial status of a job created for this notice.
    pub fn initial_status(self, manual_denials: bool) -> EmailStatus {
        match self {
            Notice::AutoApproved => EmailStatus::Automatic,
            Notice::Escalated => EmailStatus::PendingApproval,
            Notice::PolicyDenied | Notice::StaffDenied if manual_denials => EmailStatus::Manual,
            Notice::PolicyDenied | Notice::StaffDenied | Notice::StaffApproved => EmailStatus::InQueue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NotifyError {
    #[error("email job for request {request} with template {template} already exists")]
    DuplicateJob {
        request: RequestId,
        template: TemplateKey,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Decides the email effect of a decision.
///
/// `existing` lists the request's current jobs. A job held in
/// `PendingApproval` is released by a staff decision rather than joined by a
/// second job, which keeps exactly one email per decided request.
pub fn enqueue_for_decision(
    request: &RequestId,
    to: &EmailAddress,
    notice: Notice,
    existing: &[&EmailJob],
    templates: &TemplateSet,
    bindings: &Bindings,
    manual_denials: bool,
) -> Result<JobEffect, NotifyError> {
    let template = notice.template();
    if existing.iter().any(|j| j.template == template) {
        return Err(NotifyError::DuplicateJob {
            request: request.clone(),
            template,
        });
    }
    let rendered = templates.render(template, bindings)?;
    let status = notice.initial_status(manual_denials);
    if let Some(held) = existing
        .iter()
        .find(|j| j.status == EmailStatus::PendingApproval)
    {
        let action = if status == EmailStatus::Manual {
            EmailAction::NeedsHuman
        } else {
            EmailAction::DecisionReady
        };
        return Ok(JobEffect::Release {
            job_id: held.id.clone(),
            template,
            subject: rendered.subject,
            body: rendered.body,
            action,
        });
    }
    Ok(JobEffect::Create(JobSpec {
        id: JobId::for_request(request, template),
        request_id: request.clone(),
        template,
        to: to.clone(),
        subject: rendered.subject,
        body: rendered.body,
        status,
    }))
}

/// Delay before the attempt following `failed_attempts` failures: 30 s, 2 min, 8 min, ...
pub fn backoff_after(failed_attempts: u32) -> Duration {
    let exponent = failed_attempts.saturating_sub(1).min(10);
    Duration::seconds(BACKOFF_BASE_SECS * BACKOFF_FACTOR.pow(exponent))
}

/// A message handed to a [`Sender`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutgoingEmail {
    pub job_id: JobId,
    pub message_id: String,
    pub from: EmailAddress,
    pub to: EmailAddress,
    pub subject: String,
    pub body: String,
    pub date: DateTime<Utc>,
}

impl OutgoingEmail {
    pub fn new(job: &EmailJob, from: &EmailAddress, date: DateTime<Utc>) -> Self {
        let domain = from.as_str().rsplit('@').next().unwrap_or("localhost");
        Self {
            job_id: job.id.clone(),
            message_id: format!("<{}@{}>", job.id, domain),
            from: from.clone(),
            to: job.to.clone(),
            subject: job.subject.clone(),
            body: job.body.clone(),
            date,
        }
    }

    /// RFC 5322 text with CRLF line endings and a UTF-8 plain-text body.
    pub fn to_eml(&self) -> String {
        let mut out = String::new();
        for (name, value) in [
            ("To", self.to.as_str()),
            ("From", self.from.as_str()),
            ("Subject", self.subject.as_str()),
            ("Date", &self.date.to_rfc2822()),
            ("Message-ID", self.message_id.as_str()),
            ("MIME-Version", "1.0"),
            ("Content-Type", "text/plain; charset=utf-8"),
            ("Content-Transfer-Encoding", "8bit"),
        ] {
            out.push_str(name);
            out.push_str(": ");
            out.push_str(&value.replace(['\r', '\n'], " "));
            out.push_str("\r\n");
        }
        out.push_str("\r\n");
        for line in self.body.replace("\r\n", "\n").split_inclusive('\n') {
            out.push_str(line.trim_end_matches('\n'));
            out.push_str("\r\n");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("send failed: {0}")]
pub struct SendError(pub String);

/// Delivery backend. Implementations should treat a repeated `job_id` as already delivered.
pub trait Sender: Send + Sync {
    fn send(&self, email: &OutgoingEmail) -> Result<(), SendError>;
}

/// Writes each message to `<dir>/<job id>.eml`.
#[derive(Debug, Clone)]
pub struct FileSender {
    dir: PathBuf,
}

impl FileSender {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, job: &JobId) -> PathBuf {
        self.dir.join(format!("{}.eml", job.as_str()))
    }
}

impl Sender for FileSender {
    fn send(&self, email: &OutgoingEmail) -> Result<(), SendError> {
        let path = self.path_for(&email.job_id);
        if path.exists() {
            return Ok(());
        }
        let tmp = self.dir.join(format!(".{}.tmp", email.job_id.as_str()));
        let write = || -> io::Result<()> {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(email.to_eml().as_bytes())?;
            file.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| SendError(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use std::collections::BTreeSet;

    fn bindings(days: u32) -> Bindings {
        Bindings {
            student_name: "Ann".into(),
            assignment_name: "HW1".into(),
            days,
            due_at: "2025-03-10T23:59:00Z".into(),
            new_due_at: "2025-03-13T23:59:00Z".into(),
            reason_echo: String::new(),
            course_name: "CS 10".into(),
        }
    }

    #[test]
    fn substitution() {
        let map = BTreeMap::from([("days", "3".to_string()), ("assignment_name", "HW1".to_string())]);
        assert_eq!(
            render_text("Extension of {{days}} days on {{assignment_name}}", &map).unwrap(),
            "Extension of 3 days on HW1"
        );
        assert_eq!(render_text("{{ days }}!", &map).unwrap(), "3!");
        assert_eq!(render_text("open {{ only", &map).unwrap(), "open {{ only");
    }

    #[test]
    fn unbound_variable() {
        let map = BTreeMap::from([("days", "3".to_string())]);
        assert_eq!(
            render_text("hello {{foo}}", &map),
            Err(TemplateError::UnboundVariable("foo".into()))
        );
    }

    #[test]
    fn default_templates_fully_resolve() {
        let set = TemplateSet::default();
        for key in TemplateKey::ALL {
            let r = set.render(key, &bindings(3)).unwrap();
            assert!(!r.body.contains("{{") && !r.subject.contains("{{"), "{key}");
        }
    }

    #[test]
    fn default_bodies_are_injective_in_days() {
        let set = TemplateSet::default();
        for key in TemplateKey::ALL {
            let bodies: BTreeSet<String> = (1..=30)
                .map(|d| set.render(key, &bindings(d)).unwrap().body)
                .collect();
            assert_eq!(bodies.len(), 30, "{key}");
        }
    }

    #[test]
    fn template_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("denied.txt"), "Subject: No ({{days}})\n\nSorry {{student_name}}.\n").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        let r = set.render(TemplateKey::Denied, &bindings(2)).unwrap();
        assert_eq!(r.subject, "No (2)");
        assert_eq!(r.body, "Sorry Ann.\n");

        fs::write(dir.path().join("pending_ack.txt"), "Subject: x\n{{foo}}").unwrap();
        assert_eq!(
            TemplateSet::load_dir(dir.path()),
            Err(TemplateError::UnboundVariable("foo".into()))
        );
        fs::write(dir.path().join("pending_ack.txt"), "no subject line").unwrap();
        assert!(matches!(TemplateSet::load_dir(dir.path()), Err(TemplateError::Load { .. })));
        fs::write(dir.path().join("pending_ack.txt"), "Subject: Re: {{ reason_echo }}\n\nok").unwrap();
        assert!(matches!(TemplateSet::load_dir(dir.path()), Err(TemplateError::Load { .. })));
    }

    fn job(status: EmailStatus, template: TemplateKey) -> EmailJob {
        let request = RequestId("req-1".into());
        EmailJob::from(JobSpec {
            id: JobId::for_request(&request, template),
            request_id: request,
            template,
            to: EmailAddress::parse("ann@uni.edu").unwrap(),
            subject: "s".into(),
            body: "b".into(),
            status,
        })
    }

    #[test]
    fn enqueue_mapping() {
        let set = TemplateSet::default();
        let to = EmailAddress::parse("ann@uni.edu").unwrap();
        let id = RequestId("req-1".into());
        let b = bindings(2);
        let effect = enqueue_for_decision(&id, &to, Notice::AutoApproved, &[], &set, &b, false).unwrap();
        let JobEffect::Create(spec) = effect else { panic!("expected create") };
        assert_eq!((spec.status, spec.template), (EmailStatus::Automatic, TemplateKey::AutoApproved));

        let effect = enqueue_for_decision(&id, &to, Notice::Escalated, &[], &set, &b, false).unwrap();
        let JobEffect::Create(spec) = effect else { panic!("expected create") };
        assert_eq!((spec.status, spec.template), (EmailStatus::PendingApproval, TemplateKey::PendingAck));

        let effect = enqueue_for_decision(&id, &to, Notice::PolicyDenied, &[], &set, &b, true).unwrap();
        let JobEffect::Create(spec) = effect else { panic!("expected create") };
        assert_eq!(spec.status, EmailStatus::Manual);
        let effect = enqueue_for_decision(&id, &to, Notice::PolicyDenied, &[], &set, &b, false).unwrap();
        let JobEffect::Create(spec) = effect else { panic!("expected create") };
        assert_eq!(spec.status, EmailStatus::InQueue);

        let held = job(EmailStatus::PendingApproval, TemplateKey::PendingAck);
        let effect = enqueue_for_decision(&id, &to, Notice::StaffApproved, &[&held], &set, &b, false).unwrap();
        assert!(matches!(
            effect,
            JobEffect::Release { action: EmailAction::DecisionReady, template: TemplateKey::ManualApproved, .. }
        ));
        let effect = enqueue_for_decision(&id, &to, Notice::StaffDenied, &[&held], &set, &b, true).unwrap();
        assert!(matches!(effect, JobEffect::Release { action: EmailAction::NeedsHuman, .. }));
    }

    #[test]
    fn duplicate_job() {
        let set = TemplateSet::default();
        let to = EmailAddress::parse("ann@uni.edu").unwrap();
        let id = RequestId("req-1".into());
        let existing = job(EmailStatus::Automatic, TemplateKey::AutoApproved);
        assert!(matches!(
            enqueue_for_decision(&id, &to, Notice::AutoApproved, &[&existing], &set, &bindings(1), false),
            Err(NotifyError::DuplicateJob { .. })
        ));
    }

    #[test]
    fn backoff_schedule() {
        assert_eq!(backoff_after(1), Duration::seconds(30));
        assert_eq!(backoff_after(2), Duration::seconds(120));
        assert_eq!(backoff_after(3), Duration::seconds(480));
        assert_eq!(backoff_after(4), Duration::seconds(1920));
    }

    #[test]
    fn eml_file_is_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let sender = FileSender::new(dir.path()).unwrap();
        let j = job(EmailStatus::InQueue, TemplateKey::AutoApproved);
        let from = EmailAddress::parse("staff@cs10.edu").unwrap();
        let date = Utc.with_ymd_and_hms(2025, 3, 1, 10, 0, 0).unwrap();
        let mut email = OutgoingEmail::new(&j, &from, date);
        email.body = "line one\nline two\n".into();
        sender.send(&email).unwrap();
        let text = fs::read_to_string(sender.path_for(&j.id)).unwrap();
        assert_eq!(
            text,
            "To: ann@uni.edu\r\nFrom: staff@cs10.edu\r\nSubject: s\r\nDate: Sat, 1 Mar 2025 10:00:00 +0000\r\n\
             Message-ID: <req-1-auto_approved@cs10.edu>\r\nMIME-Version: 1.0\r\n\
             Content-Type: text/plain; charset=utf-8\r\nContent-Transfer-Encoding: 8bit\r\n\r\n\
             line one\r\nline two\r\n"
        );
        email.body = "changed".into();
        sender.send(&email).unwrap();
        assert_eq!(fs::read_to_string(sender.path_for(&j.id)).unwrap(), text);
    }
}
