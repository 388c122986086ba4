//! HTTP front end and configuration for the extension workflow engine.

pub mod api;
pub mod auth;
pub mod config;
pub mod worker;

pub use api::{router, AppState};
pub use auth::Auth;
pub use config::{Config, ConfigError};
