//! Event-stream ingestion: append-only log, sessionization, and the
//! feedback loop that folds interaction events into the prior store.
//!
//! The log is the write-ahead source of truth: replaying it from offset 0
//! through the same applier configuration reproduces the prior store
//! bit-for-bit. The applier consumes the log in offset order, splits each
//! user's events into sessions at inactivity gaps, dedups to at most one
//! event per (carousel, event type) per session, and applies the Beta
//! updates.
//!
//! Dedup folding has two flavors. `Provisional` (the default) folds the
//! first occurrence of each (carousel, event type) as soon as it is
//! consumed, so a click reaches the rankers within one update interval;
//! repeats within the session stay suppressed, and the final store state is
//! identical to folding whole sessions on close. `OnClose` defers folding
//! until the session's gap has elapsed.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{parse_event, CarouselId, DomainError, EventType, InteractionEvent, UserId};
use crate::priors::PriorStore;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("session gap must be positive, got {0}")]
    InvalidGap(i64),
    #[error("events not sorted by timestamp: {prev} followed by {next}")]
    Unsorted { prev: i64, next: i64 },
    #[error("checkpoint regression: applier is at offset {applier}, log ends at {log_end}")]
    CheckpointRegression { applier: u64, log_end: u64 },
    #[error("checkpoint file {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Session boundary rule: a gap of strictly more than `gap_seconds` between
/// consecutive events of one user starts a new session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRule {
    pub gap_seconds: i64,
}

impl Default for SessionRule {
    fn default() -> Self {
        Self { gap_seconds: 1800 }
    }
}

impl SessionRule {
    pub fn new(gap_seconds: i64) -> Result<Self, IngestError> {
        if gap_seconds <= 0 {
            return Err(IngestError::InvalidGap(gap_seconds));
        }
        Ok(Self { gap_seconds })
    }
}

/// A deduplicated carousel-level event: within one session a carousel emits
/// at most one of each event type, regardless of how many item events fed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CarouselEvent {
    pub user: UserId,
    pub carousel: CarouselId,
    pub event: EventType,
}

/// Splits one user's time-ordered events into sessions and dedups each
/// session to at most one event per (carousel, event type). A carousel may
/// emit all three types in one session; each feeds one prior update.
pub fn sessionize(
    events: &[InteractionEvent],
    rule: SessionRule,
) -> Result<Vec<Vec<CarouselEvent>>, IngestError> {
    let mut sessions: Vec<Vec<CarouselEvent>> = Vec::new();
    let mut current: Vec<CarouselEvent> = Vec::new();
    let mut seen: HashSet<(CarouselId, EventType)> = HashSet::new();
    let mut last_ts: Option<i64> = None;

    for event in events {
        if let Some(prev) = last_ts {
            if event.ts < prev {
                return Err(IngestError::Unsorted {
                    prev,
                    next: event.ts,
                });
            }
            if event.ts - prev > rule.gap_seconds {
                sessions.push(std::mem::take(&mut current));
                seen.clear();
            }
        }
        if seen.insert((event.carousel.clone(), event.event)) {
            current.push(CarouselEvent {
                user: event.user.clone(),
                carousel: event.carousel.clone(),
                event: event.event,
            });
        }
        last_ts = Some(event.ts);
    }
    if !current.is_empty() {
        sessions.push(current);
    }
    Ok(sessions)
}

/// Durability policy for the append path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncPolicy {
    /// Flush to the OS on every append (default).
    #[default]
    Flush,
    /// Flush and fsync on every append.
    Fsync,
}

/// Append-only JSONL event log with strictly increasing line offsets.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    writer: std::io::BufWriter<std::fs::File>,
    next_offset: u64,
    sync: SyncPolicy,
}

/// One log line as read back: either a decoded event or the parse failure
/// for that line (appliers skip failures and count them).
#[derive(Debug)]
pub struct LogRecord {
    pub offset: u64,
    pub parsed: Result<InteractionEvent, DomainError>,
}

impl EventLog {
    /// Opens (creating if needed) a log for appending. Existing lines are
    /// counted so new offsets continue the sequence.
    pub fn open(path: impl Into<PathBuf>, sync: SyncPolicy) -> Result<Self, IngestError> {
        let path = path.into();
        let existing = if path.exists() {
            let file = std::fs::File::open(&path)?;
            std::io::BufReader::new(file).lines().count() as u64
        } else {
            0
        };
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        Ok(Self {
            path,
            writer: std::io::BufWriter::new(file),
            next_offset: existing,
            sync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Number of records in the log; also the offset the next append gets.
    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    /// Durably appends one event and returns its offset. An error means the
    /// event must not be acknowledged.
    pub fn append(&mut self, event: &InteractionEvent) -> Result<u64, IngestError> {
        let line = event.to_json_line();
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        if self.sync == SyncPolicy::Fsync {
            self.writer.get_ref().sync_data()?;
        }
        let offset = self.next_offset;
        self.next_offset += 1;
        Ok(offset)
    }

    /// Reads records starting at `offset` (line index) from a log file.
    pub fn read_from(path: &Path, offset: u64) -> Result<Vec<LogRecord>, IngestError> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            let idx = idx as u64;
            if idx < offset {
                continue;
            }
            records.push(LogRecord {
                offset: idx,
                parsed: parse_event(&line),
            });
        }
        Ok(records)
    }
}

/// How consumed events reach the prior store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeedbackMode {
    /// Session dedup, folding each first occurrence immediately.
    #[default]
    Provisional,
    /// Session dedup, folding a session only once its gap has elapsed.
    OnClose,
    /// No sessionization: every event folds as-is.
    Raw,
}

/// Durable progress marker: everything below `offset` has been consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Checkpoint {
    pub offset: u64,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| IngestError::BadCheckpoint {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(self).expect("checkpoint serializes"))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Default)]
struct OpenSession {
    last_ts: i64,
    seen: HashSet<(CarouselId, EventType)>,
    /// OnClose mode only: deduped events awaiting the session's close.
    pending: Vec<(CarouselId, EventType)>,
}

/// Outcome counters for one applier pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ApplyReport {
    /// Prior updates folded into the store.
    pub folded: u64,
    /// Events consumed from the log.
    pub consumed: u64,
    /// Malformed records skipped.
    pub skipped: u64,
}

/// Consumes the event log in offset order and applies prior updates.
///
/// One applier owns checkpoint advancement for one log; the store it writes
/// may be read concurrently by rankers. Replaying an already-consumed offset
/// range is rejected by the checkpoint: records below the current offset are
/// never re-folded.
#[derive(Debug)]
pub struct FeedbackApplier {
    rule: SessionRule,
    mode: FeedbackMode,
    offset: u64,
    sessions: HashMap<UserId, OpenSession>,
    warn_count: u64,
}

impl FeedbackApplier {
    pub fn new(rule: SessionRule, mode: FeedbackMode) -> Self {
        Self {
            rule,
            mode,
            offset: 0,
            sessions: HashMap::new(),
            warn_count: 0,
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Total malformed records skipped since construction.
    pub fn warn_count(&self) -> u64 {
        self.warn_count
    }

    /// Persists the current offset as the sidecar checkpoint file.
    pub fn save_checkpoint_to(&self, path: &Path) -> Result<(), IngestError> {
        Checkpoint {
            offset: self.offset,
        }
        .save(path)
    }

    /// Resumes from a persisted checkpoint. Only forward moves are allowed.
    pub fn resume_from(&mut self, checkpoint: Checkpoint) -> Result<(), IngestError> {
        if checkpoint.offset < self.offset {
            return Err(IngestError::CheckpointRegression {
                applier: self.offset,
                log_end: checkpoint.offset,
            });
        }
        self.offset = checkpoint.offset;
        Ok(())
    }

    /// Reads new records from the log file and applies them. `now` drives
    /// inactivity-timeout session closure; pass the current wall clock in
    /// live serving or the newest event timestamp in replays.
    pub fn tick(
        &mut self,
        log_path: &Path,
        store: &PriorStore,
        now: i64,
    ) -> Result<ApplyReport, IngestError> {
        let records = EventLog::read_from(log_path, self.offset)?;
        if let Some(first) = records.first() {
            if first.offset > self.offset {
                return Err(IngestError::CheckpointRegression {
                    applier: self.offset,
                    log_end: first.offset,
                });
            }
        }
        let report = self.apply_records(&records, store, now);
        Ok(report)
    }

    /// Applies a batch of records (skipping any below the checkpoint), then
    /// closes sessions whose inactivity gap has elapsed by `now`.
    pub fn apply_records(
        &mut self,
        records: &[LogRecord],
        store: &PriorStore,
        now: i64,
    ) -> ApplyReport {
        let mut report = ApplyReport::default();
        for record in records {
            if record.offset < self.offset {
                continue; // already consumed; idempotent on replay
            }
            self.offset = record.offset + 1;
            report.consumed += 1;
            match &record.parsed {
                Ok(event) => report.folded += self.consume(event, store),
                Err(_) => {
                    self.warn_count += 1;
                    report.skipped += 1;
                }
            }
        }
        report.folded += self.close_idle_sessions(store, now);
        report
    }

    fn consume(&mut self, event: &InteractionEvent, store: &PriorStore) -> u64 {
        if self.mode == FeedbackMode::Raw {
            store.apply(&event.user, &event.carousel, event.event);
            return 1;
        }

        let session = self.sessions.entry(event.user.clone()).or_default();
        // clock skew in a live stream must not split or reorder sessions:
        // clamp the effective timestamp to be monotone per user
        let ts = event.ts.max(session.last_ts);
        let is_new_session =
            !session.seen.is_empty() && ts - session.last_ts > self.rule.gap_seconds;
        let mut folded = 0;
        if is_new_session {
            let closed = std::mem::take(session);
            folded += Self::fold_pending(&event.user, closed.pending, store);
        }
        let session = self.sessions.get_mut(&event.user).expect("entry exists");
        session.last_ts = ts;
        if session.seen.insert((event.carousel.clone(), event.event)) {
            match self.mode {
                FeedbackMode::Provisional => {
                    store.apply(&event.user, &event.carousel, event.event);
                    folded += 1;
                }
                FeedbackMode::OnClose => {
                    session.pending.push((event.carousel.clone(), event.event));
                }
                FeedbackMode::Raw => unreachable!("handled above"),
            }
        }
        folded
    }

    fn fold_pending(
        user: &UserId,
        pending: Vec<(CarouselId, EventType)>,
        store: &PriorStore,
    ) -> u64 {
        let folded = pending.len() as u64;
        for (carousel, event) in pending {
            store.apply(user, &carousel, event);
        }
        folded
    }

    /// Closes every session whose gap has elapsed by `now`, folding pending
    /// updates (OnClose mode) and dropping dedup state.
    pub fn close_idle_sessions(&mut self, store: &PriorStore, now: i64) -> u64 {
        let gap = self.rule.gap_seconds;
        let expired: Vec<UserId> = self
            .sessions
            .iter()
            .filter(|(_, s)| now.saturating_sub(s.last_ts) > gap)
            .map(|(u, _)| u.clone())
            .collect();
        let mut folded = 0;
        for user in expired {
            if let Some(session) = self.sessions.remove(&user) {
                folded += Self::fold_pending(&user, session.pending, store);
            }
        }
        folded
    }

    /// Folds everything still open; used when replaying a finished log.
    pub fn finalize(&mut self, store: &PriorStore) -> u64 {
        self.close_idle_sessions(store, i64::MAX)
    }
}

/// Rebuilds a prior store by replaying a log file from offset 0 through a
/// fresh applier with the same configuration.
pub fn rebuild_from_log(
    log_path: &Path,
    rule: SessionRule,
    mode: FeedbackMode,
    initial: crate::priors::BetaPrior,
) -> Result<(PriorStore, ApplyReport), IngestError> {
    let store = PriorStore::new(initial);
    let mut applier = FeedbackApplier::new(rule, mode);
    let records = EventLog::read_from(log_path, 0)?;
    let mut report = applier.apply_records(&records, &store, i64::MIN);
    report.folded += applier.finalize(&store);
    Ok((store, report))
}
