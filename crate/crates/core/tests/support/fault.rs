//! Fault-injecting sender and connector that keep a ledger of real effects.

use std::collections::BTreeMap;
use std::sync::Mutex;

use flexext_core::lms::{ConnectorError, LmsAssignment, LmsConnector, LmsExtension, MockConnector};
use flexext_core::notifier::{JobId, OutgoingEmail, SendError, Sender};
use flexext_core::{Assignment, EmailAddress};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Records every message it actually delivers. Fails a configurable share
/// of calls before delivering anything.
pub struct LedgerSender {
    fail_rate: f64,
    rng: Mutex<StdRng>,
    delivered: Mutex<Vec<OutgoingEmail>>,
    calls: Mutex<u64>,
}

impl LedgerSender {
    pub fn reliable() -> Self {
        Self::flaky(0.0, 0)
    }

    pub fn flaky(fail_rate: f64, seed: u64) -> Self {
        Self {
            fail_rate,
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
            delivered: Mutex::new(Vec::new()),
            calls: Mutex::new(0),
        }
    }

    pub fn delivered(&self) -> Vec<OutgoingEmail> {
        self.delivered.lock().unwrap().clone()
    }

    pub fn delivery_counts(&self) -> BTreeMap<JobId, usize> {
        let mut counts = BTreeMap::new();
        for email in self.delivered.lock().unwrap().iter() {
            *counts.entry(email.job_id.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn calls(&self) -> u64 {
        *self.calls.lock().unwrap()
    }
}

impl Sender for LedgerSender {
    fn send(&self, email: &OutgoingEmail) -> Result<(), SendError> {
        *self.calls.lock().unwrap() += 1;
        if self.rng.lock().unwrap().gen_bool(self.fail_rate) {
            return Err(SendError("injected transport failure".into()));
        }
        self.delivered.lock().unwrap().push(email.clone());
        Ok(())
    }
}

/// Wraps the mock connector. Calls fail before touching state with
/// probability `fail_rate`; a successful upsert is reported as a failure with
/// probability `lost_ack_rate` (the write happened, the answer got lost).
pub struct FlakyConnector {
    pub inner: MockConnector,
    fail_rate: f64,
    lost_ack_rate: f64,
    rng: Mutex<StdRng>,
    upsert_calls: Mutex<u64>,
}

impl FlakyConnector {
    pub fn new(catalog: &[Assignment], fail_rate: f64, lost_ack_rate: f64, seed: u64) -> Self {
        Self {
            inner: MockConnector::new(catalog),
            fail_rate,
            lost_ack_rate,
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
            upsert_calls: Mutex::new(0),
        }
    }

    fn roll(&self, p: f64) -> bool {
        self.rng.lock().unwrap().gen_bool(p)
    }

    pub fn upsert_calls(&self) -> u64 {
        *self.upsert_calls.lock().unwrap()
    }
}

impl LmsConnector for FlakyConnector {
    fn list_assignments(&self) -> Result<Vec<LmsAssignment>, ConnectorError> {
        self.inner.list_assignments()
    }

    fn get_extension(&self, student: &EmailAddress, assignment: &str) -> Result<Option<LmsExtension>, ConnectorError> {
        if self.roll(self.fail_rate) {
            return Err(ConnectorError::ConnectorUnavailable("injected read failure".into()));
        }
        self.inner.get_extension(student, assignment)
    }

    fn upsert_extension(&self, extension: &LmsExtension) -> Result<(), ConnectorError> {
        *self.upsert_calls.lock().unwrap() += 1;
        if self.roll(self.fail_rate) {
            return Err(ConnectorError::ConnectorUnavailable("injected write failure".into()));
        }
        self.inner.upsert_extension(extension)?;
        if self.roll(self.lost_ack_rate) {
            return Err(ConnectorError::ConnectorUnavailable("injected lost acknowledgement".into()));
        }
        Ok(())
    }
}
