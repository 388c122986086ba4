//! Background dispatch: one outbox and LMS cycle per tick, or sooner when nudged.

use std::sync::Arc;
use std::time::Duration;

use flexext_core::Engine;
use tokio::sync::Notify;
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;

pub fn spawn(engine: Arc<Engine>, nudge: Arc<Notify>, every: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut ticks = tokio::time::interval(every);
        ticks.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = ticks.tick() => {}
                _ = nudge.notified() => {}
            }
            let engine = engine.clone();
            match tokio::task::spawn_blocking(move || engine.dispatch()).await {
                Ok(Ok(report)) => {
                    let busy = report.emails.sent + report.emails.retried + report.emails.failed
                        + report.lms.applied + report.lms.retried + report.lms.failed;
                    if busy > 0 {
                        tracing::info!(?report, "dispatch cycle");
                    }
                }
                Ok(Err(e)) => tracing::error!(error = %e, "dispatch cycle failed"),
                Err(e) => tracing::error!(error = %e, "dispatch task panicked"),
            }
        }
    })
}
