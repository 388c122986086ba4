//! Append-only event log with an in-memory snapshot derived from it.
//!
//! All writes go through [`Store::transact`], which runs under a single writer
//! lock: the closure reads the current state, stages events, and the batch is
//! written to the log before the new snapshot is published. Readers take an
//! `Arc` of the published snapshot and never wait on the writer's I/O.

mod event;
mod snapshot;

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use thiserror::Error;

pub use event::{
    Actor, DecisionMade, DecodeError, EmailFailed, EmailQueued, EmailSent, Event, EventPayload,
    LmsApplied, LmsFailed, PartnerMirrored, RequestInvalid, RequestReceived, StaffDecision,
    Warning, LOG_VERSION,
};
pub use snapshot::{ApplyError, RequestRecord, Snapshot};

use crate::clock::Clock;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Apply(#[from] ApplyError),
    #[error("event log I/O: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("line {line}: unknown event kind {kind:?}")]
    UnknownKind { line: usize, kind: String },
    #[error("reading log: {0}")]
    Io(#[from] io::Error),
}

/// Rebuilds state from a log. Any gap, undecodable line, unknown kind or
/// illegal transition aborts the replay.
pub fn replay(reader: impl Read) -> Result<(Vec<Event>, Snapshot), ReplayError> {
    let mut snapshot = Snapshot::default();
    let mut events = Vec::new();
    for (index, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let expected = snapshot.last_seq + 1;
        let event = Event::from_json(&line).map_err(|e| match e {
            DecodeError::UnknownKind(kind) => ReplayError::UnknownKind {
                line: index + 1,
                kind,
            },
            other => ReplayError::CorruptLog {
                seq: expected,
                reason: other.to_string(),
            },
        })?;
        if event.seq != expected {
            return Err(ReplayError::CorruptLog {
                seq: expected,
                reason: format!("found seq {} where {expected} was expected", event.seq),
            });
        }
        snapshot
            .apply(&event)
            .map_err(|e| ReplayError::CorruptLog {
                seq: event.seq,
                reason: e.to_string(),
            })?;
        events.push(event);
    }
    Ok((events, snapshot))
}

/// Replays a list of in-memory events.
pub fn fold(events: &[Event]) -> Result<Snapshot, ApplyError> {
    let mut snapshot = Snapshot::default();
    for event in events {
        snapshot.apply(event)?;
    }
    Ok(snapshot)
}

struct LogFile {
    file: File,
    len: u64,
    fsync: bool,
}

impl LogFile {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        let result = self
            .file
            .write_all(bytes)
            .and_then(|()| self.file.flush())
            .and_then(|()| if self.fsync { self.file.sync_data() } else { Ok(()) });
        match result {
            Ok(()) => {
                self.len += bytes.len() as u64;
                Ok(())
            }
            Err(e) => {
                // Drop whatever part of the batch reached the file.
                let _ = self.file.set_len(self.len);
                let _ = self.file.seek(SeekFrom::Start(self.len));
                Err(e)
            }
        }
    }
}

struct Writer {
    log: Option<LogFile>,
}

pub struct Store {
    writer: Mutex<Writer>,
    snapshot: RwLock<Arc<Snapshot>>,
    events: RwLock<Vec<Arc<Event>>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("last_seq", &self.snapshot().last_seq)
            .finish_non_exhaustive()
    }
}

/// Staged writes of one transaction. Every staged event is already applied to
/// the transaction's working snapshot.
pub struct Txn<'a> {
    working: Snapshot,
    staged: Vec<Event>,
    clock: &'a dyn Clock,
}

impl Txn<'_> {
    pub fn snapshot(&self) -> &Snapshot {
        &self.working
    }

    pub fn now(&self) -> chrono::DateTime<chrono::Utc> {
        self.clock.now()
    }

    /// Stages an event after checking it against the state machines.
    pub fn emit(&mut self, actor: Actor, payload: impl Into<EventPayload>) -> Result<u64, ApplyError> {
        let event = Event {
            seq: self.working.last_seq + 1,
            at: self.clock.now(),
            actor,
            payload: payload.into(),
        };
        // Apply to a scratch copy so a rejected event leaves the working state intact.
        let mut next = self.working.clone();
        next.apply(&event)?;
        self.working = next;
        let seq = event.seq;
        self.staged.push(event);
        Ok(seq)
    }

    pub fn staged(&self) -> &[Event] {
        &self.staged
    }
}

impl Store {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::from_parts(None, Vec::new(), Snapshot::default(), clock)
    }

    /// Opens (or creates) a log file and replays it.
    pub fn open(path: &Path, fsync: bool, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        file.seek(SeekFrom::Start(0))?;
        let (events, snapshot) = replay(&mut file)?;
        let len = file.seek(SeekFrom::End(0))?;
        let log = LogFile { file, len, fsync };
        Ok(Self::from_parts(Some(log), events, snapshot, clock))
    }

    fn from_parts(log: Option<LogFile>, events: Vec<Event>, snapshot: Snapshot, clock: Arc<dyn Clock>) -> Self {
        Self {
            writer: Mutex::new(Writer { log }),
            snapshot: RwLock::new(Arc::new(snapshot)),
            events: RwLock::new(events.into_iter().map(Arc::new).collect()),
            clock,
        }
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn last_seq(&self) -> u64 {
        self.snapshot().last_seq
    }

    /// Events with `seq > since`, in order.
    pub fn events_since(&self, since: u64) -> Vec<Arc<Event>> {
        let events = self.events.read().unwrap_or_else(|e| e.into_inner());
        let start = usize::try_from(since).unwrap_or(usize::MAX).min(events.len());
        events[start..].to_vec()
    }

    fn lock_writer(&self) -> MutexGuard<'_, Writer> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `body` against the latest state and commits what it staged, all or nothing.
    pub fn transact<T, E>(&self, body: impl FnOnce(&mut Txn<'_>) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let mut writer = self.lock_writer();
        let mut txn = Txn {
            working: (*self.snapshot()).clone(),
            staged: Vec::new(),
            clock: self.clock.as_ref(),
        };
        let value = body(&mut txn)?;
        if txn.staged.is_empty() {
            return Ok(value);
        }
        if let Some(log) = writer.log.as_mut() {
            let mut bytes = Vec::new();
            for event in &txn.staged {
                bytes.extend_from_slice(event.to_json().as_bytes());
                bytes.push(b'\n');
            }
            log.append(&bytes).map_err(|e| E::from(StoreError::Io(e)))?;
        }
        let Txn { working, staged, .. } = txn;
        self.events
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .extend(staged.into_iter().map(Arc::new));
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(working);
        Ok(value)
    }

    /// Appends a single event.
    pub fn append(&self, actor: Actor, payload: impl Into<EventPayload>) -> Result<u64, StoreError> {
        let payload = payload.into();
        self.transact(|txn| txn.emit(actor, payload).map_err(StoreError::from))
    }
}
