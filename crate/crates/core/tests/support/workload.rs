//! A random but legal stream of operations against an engine.

use std::sync::Arc;

use chrono::Duration;
use flexext_core::engine::EngineError;
use flexext_core::ingestion::RawSubmission;
use flexext_core::lms::LmsConnector;
use flexext_core::notifier::Sender;
use flexext_core::{EmailStatus, RequestStatus, Snapshot};
use rand::rngs::StdRng;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};

use super::{reason_for, student_email, Harness};

pub struct Workload {
    rng: StdRng,
    pub sids: Vec<String>,
    pub submitted: Vec<RawSubmission>,
    counter: usize,
    pub allow_bad_input: bool,
}

const ASSIGNMENT_ANSWERS: [&str; 5] = ["hw1", "HW2", "Project 1", "hw1, hw2", "HW2; proj1"];

impl Workload {
    pub fn new(seed: u64, students: usize) -> Self {
        Self {
            rng: StdRng::seed_from_u64(seed),
            sids: (0..students).map(|i| format!("{}", 3_034_500 + i)).collect(),
            submitted: Vec::new(),
            counter: 0,
            allow_bad_input: true,
        }
    }

    pub fn submission(&mut self, now: chrono::DateTime<chrono::Utc>) -> RawSubmission {
        self.counter += 1;
        let sid = self.sids.choose(&mut self.rng).unwrap().clone();
        let mut email = student_email(&sid);
        if self.allow_bad_input && self.rng.gen_bool(0.03) {
            email = format!("imposter{}@example.com", self.counter);
        }
        let mut days = self.rng.gen_range(1..=12).to_string();
        if self.allow_bad_input && self.rng.gen_bool(0.03) {
            days = "0".into();
        }
        let partner = self.rng.gen_bool(0.2).then(|| self.sids.choose(&mut self.rng).unwrap().clone());
        let offset = self.rng.gen_range(0..3600);
        RawSubmission {
            sid: format!(" {sid} "),
            name: format!("Student {sid}"),
            email,
            dsp: if self.rng.gen_bool(0.3) { "Yes" } else { "No" }.into(),
            assignment: ASSIGNMENT_ANSWERS.choose(&mut self.rng).unwrap().to_string(),
            days,
            reason: reason_for(&sid, self.counter),
            has_partner: if partner.is_some() { "yes" } else { "no" }.into(),
            partner_contact: partner
                .map(|p| format!("{} / {p}", student_email(&p)))
                .unwrap_or_default(),
            submitted_at: Some(now - Duration::seconds(offset)),
        }
    }

    /// Performs one random operation and names it. Expected rejections
    /// (duplicates, bad input, nothing to do) are not errors.
    pub fn step<S: Sender, C: LmsConnector>(&mut self, h: &Harness<S, C>) -> Result<&'static str, EngineError> {
        let engine = &h.engine;
        let roll = self.rng.gen_range(0..100);
        match roll {
            0..=34 => {
                let raw = self.submission(h.clock_now());
                match engine.submit_raw(&raw) {
                    Ok(_) => {
                        self.submitted.push(raw);
                        Ok("submit")
                    }
                    Err(EngineError::Normalize(_)) => Ok("rejected"),
                    // Same student, assignment and second as an earlier draw.
                    Err(EngineError::Duplicate { .. }) => Ok("collision"),
                    Err(e) => Err(e),
                }
            }
            35..=42 => {
                let Some(raw) = self.submitted.choose(&mut self.rng).cloned() else {
                    return Ok("noop");
                };
                match engine.submit_raw(&raw) {
                    Err(EngineError::Duplicate { .. }) => Ok("duplicate"),
                    Ok(_) => panic!("resubmission was accepted"),
                    Err(e) => Err(e),
                }
            }
            43..=57 => {
                let snapshot = engine.snapshot();
                let Some(id) = snapshot
                    .requests
                    .values()
                    .filter(|r| r.status() == RequestStatus::PendingReview)
                    .map(|r| r.request.id.clone())
                    .choose(&mut self.rng)
                else {
                    return Ok("noop");
                };
                let staff = if self.rng.gen_bool(0.5) { "ta1" } else { "ta2" };
                engine.decide(&id, self.rng.gen_bool(0.6), "reviewed", staff)?;
                Ok("decide")
            }
            58..=77 => {
                engine.run_cycle(h.clock_now())?;
                Ok("cycle")
            }
            78..=82 => {
                let snapshot = engine.snapshot();
                let Some(id) = snapshot
                    .jobs
                    .values()
                    .filter(|j| j.status == EmailStatus::Failed)
                    .map(|j| j.id.clone())
                    .choose(&mut self.rng)
                else {
                    return Ok("noop");
                };
                engine.requeue_email(&id, "ta1")?;
                Ok("requeue")
            }
            _ => {
                h.clock.advance(Duration::seconds(self.rng.gen_range(1..900)));
                Ok("advance")
            }
        }
    }

    /// Steps until the log holds at least `events` events. Returns the
    /// snapshot published after each step.
    pub fn drive<S: Sender, C: LmsConnector>(&mut self, h: &Harness<S, C>, events: u64) -> Vec<Arc<Snapshot>> {
        let mut checkpoints = Vec::new();
        while h.engine.store().last_seq() < events {
            self.step(h).expect("workload step");
            checkpoints.push(h.engine.snapshot());
        }
        checkpoints
    }
}

impl<S, C> Harness<S, C> {
    pub fn clock_now(&self) -> chrono::DateTime<chrono::Utc> {
        use flexext_core::Clock;
        self.clock.now()
    }
}
