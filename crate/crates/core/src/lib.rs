//! Extension-request workflow for a course.
//!
//! Students submit requests (form export or JSON); each is validated, routed
//! by a declarative policy to automatic approval, staff review or denial, and
//! answered by email. Approved extensions are pushed to the assignment
//! platform through a connector. All state is a fold over an append-only
//! event log, see [`store`].

pub mod clock;
pub mod engine;
pub mod ingestion;
pub mod lms;
pub mod machine;
pub mod model;
pub mod notifier;
pub mod policy;
pub mod roster;
pub mod store;
pub mod views;

pub use clock::{Clock, ManualClock, SystemClock};
pub use engine::{CourseSettings, Engine, EngineError};
pub use machine::{EmailStatus, RequestStatus};
pub use model::{Assignment, EmailAddress, ExtensionRequest, RequestId, Student, StudentId, ViewerRole};
pub use store::{Event, Snapshot, Store};
