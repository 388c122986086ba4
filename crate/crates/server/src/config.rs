//! Service configuration, read from one TOML file. Unknown keys are errors.
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flexext_core::engine::CourseSettings;
use flexext_core::ingestion::{CanonicalField, FieldMapping, DEFAULT_HARD_CAP_DAYS};
use flexext_core::lms::{FixtureConnector, LmsConnector, MockConnector};
use flexext_core::notifier::{FileSender, TemplateSet, DEFAULT_MAX_ATTEMPTS};
use flexext_core::policy::PolicyConfig;
use flexext_core::{Assignment, Clock, EmailAddress, Engine, Store};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub service: ServiceConfig,
    pub auth: AuthConfig,
    pub course: CourseConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub assignments: Vec<Assignment>,
    pub paths: PathsConfig,
    #[serde(default)]
    pub connector: ConnectorConfig,
    #[serde(default)]
    pub mapping: MappingConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub dispatch_interval_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            dispatch_interval_secs: 30,
        }
    }
}

#[derive(Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthConfig {
    pub submission_token: String,
    pub staff_token: String,
    /// Staff who may see everything except reasons and DSP status.
    #[serde(default)]
    pub restricted_staff_token: Option<String>,
}

impl std::fmt::Debug for AuthConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AuthConfig(REDACTED)")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CourseConfig {
    pub name: String,
    pub from_address: String,
    #[serde(default = "default_hard_cap")]
    pub hard_cap_days: u32,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default)]
    pub allow_shorten: bool,
}

fn default_hard_cap() -> u32 {
    DEFAULT_HARD_CAP_DAYS
}

fn default_max_attempts() -> u32 {
    DEFAULT_MAX_ATTEMPTS
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub log: PathBuf,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub outbox_dir: PathBuf,
    #[serde(default = "yes")]
    pub fsync: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorKind {
    #[default]
    Mock,
    Fixture,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorConfig {
    #[serde(default)]
    pub kind: ConnectorKind,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

/// Question texts that differ from the default form.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingConfig {
    #[serde(default)]
    pub timestamp_header: Option<String>,
    #[serde(default)]
    pub questions: BTreeMap<CanonicalField, String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.log);
        fix(&mut self.paths.outbox_dir);
        if let Some(dir) = &mut self.paths.templates_dir {
            fix(dir);
        }
        if let Some(p) = &mut self.connector.path {
            fix(p);
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let a = &self.auth;
        let mut tokens = vec![("submission_token", &a.submission_token), ("staff_token", &a.staff_token)];
        if let Some(t) = &a.restricted_staff_token {
            tokens.push(("restricted_staff_token", t));
        }
        for (name, token) in &tokens {
            if token.trim().len() < 8 {
                return invalid(format!("auth.{name} must be at least 8 characters"));
            }
        }
        let distinct: BTreeSet<&String> = tokens.iter().map(|(_, t)| *t).collect();
        if distinct.len() != tokens.len() {
            return invalid("auth tokens must differ from each other".into());
        }
        if self.course.name.trim().is_empty() {
            return invalid("course.name must not be empty".into());
        }
        EmailAddress::parse(&self.course.from_address)
            .map_err(|e| ConfigError::Invalid(format!("course.from_address: {e}")))?;
        if self.course.hard_cap_days == 0 || self.course.max_attempts == 0 {
            return invalid("course.hard_cap_days and course.max_attempts must be positive".into());
        }
        self.policy
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("policy: {e}")))?;
        if self.assignments.is_empty() {
            return invalid("at least one [[assignments]] entry is required".into());
        }
        let mut slugs = BTreeSet::new();
        for assignment in &self.assignments {
            if assignment.slug.trim().is_empty() || assignment.display_name.trim().is_empty() {
                return invalid("assignment slug and display_name must not be empty".into());
            }
            if !slugs.insert(assignment.slug.as_str()) {
                return invalid(format!("assignment {:?} listed twice", assignment.slug));
            }
        }
        for slug in self.policy.assignment_overrides.keys() {
            if !slugs.contains(slug.as_str()) {
                return invalid(format!("policy override for unknown assignment {slug:?}"));
            }
        }
        if self.connector.kind == ConnectorKind::Fixture && self.connector.path.is_none() {
            return invalid("connector.path is required for the fixture connector".into());
        }
        if self.service.dispatch_interval_secs == 0 {
            return invalid("service.dispatch_interval_secs must be positive".into());
        }
        self.field_mapping()?;
        Ok(())
    }

    pub fn field_mapping(&self) -> Result<FieldMapping, ConfigError> {
        FieldMapping::with_overrides(&self.mapping.questions, self.mapping.timestamp_header.as_deref())
            .map_err(|e| ConfigError::Invalid(format!("mapping: {e}")))
    }

    /// Course settings, with templates loaded from disk when configured.
    pub fn course_settings(&self) -> Result<CourseSettings, ConfigError> {
        let from = EmailAddress::parse(&self.course.from_address)
            .map_err(|e| ConfigError::Invalid(format!("course.from_address: {e}")))?;
        let mut settings = CourseSettings::new(&self.course.name, self.assignments.clone(), from);
        settings.policy = self.policy.clone();
        settings.hard_cap_days = self.course.hard_cap_days;
        settings.max_attempts = self.course.max_attempts;
        settings.allow_shorten = self.course.allow_shorten;
        settings.mapping = self.field_mapping()?;
        if let Some(dir) = &self.paths.templates_dir {
            settings.templates = TemplateSet::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(settings)
    }

    pub fn connector(&self) -> Arc<dyn LmsConnector> {
        match (self.connector.kind, &self.connector.path) {
            (ConnectorKind::Fixture, Some(path)) => Arc::new(FixtureConnector::new(path, &self.assignments)),
            _ => Arc::new(MockConnector::new(&self.assignments)),
        }
    }

    /// Opens the log, the outbox directory and the connector and wires up an engine.
    pub fn build_engine(&self, clock: Arc<dyn Clock>) -> Result<Engine, ConfigError> {
        let settings = self.course_settings()?;
        if let Some(dir) = self.paths.log.parent() {
            fs::create_dir_all(dir).map_err(|source| ConfigError::Read {
                path: dir.display().to_string(),
                source,
            })?;
        }
        let store = Store::open(&self.paths.log, self.paths.fsync, clock)
            .map_err(|e| ConfigError::Invalid(format!("event log {}: {e}", self.paths.log.display())))?;
        let sender = FileSender::new(&self.paths.outbox_dir).map_err(|source| ConfigError::Read {
            path: self.paths.outbox_dir.display().to_string(),
            source,
        })?;
        Ok(Engine::new(store, settings, Arc::new(sender), self.connector()))
    }
}
