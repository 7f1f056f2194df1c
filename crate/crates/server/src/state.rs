//! Shared service state: the loaded engine behind a readiness gate, the
//! event log appender, and the background feedback/snapshot tasks.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::SystemTime;

use serde::Serialize;

use crank_core::engine::{Engine, EngineError, ModelArtifacts};
use crank_core::ingestion::{EventLog, FeedbackApplier, IngestError, SessionRule, SyncPolicy};

use crate::config::ServeConfig;

/// What /health reports about the loaded artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct ArtifactsInfo {
    pub created_ts: i64,
    /// file name → sha256 digest, straight from the verified manifest
    pub versions: BTreeMap<String, String>,
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub prior_keys: usize,
}

/// Everything a ready service holds.
pub struct LoadedState {
    pub engine: Engine,
    pub log: Mutex<EventLog>,
    pub info: ArtifactsInfo,
    pub config: ServeConfig,
}

/// Handler-visible state. Requests are refused with 503 until the loader
/// installs a [`LoadedState`]; nothing is served from unverified artifacts.
#[derive(Clone, Default)]
pub struct AppState {
    loaded: Arc<OnceLock<Arc<LoadedState>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> Option<Arc<LoadedState>> {
        self.loaded.get().cloned()
    }

    pub fn install(&self, state: LoadedState) -> Arc<LoadedState> {
        let state = Arc::new(state);
        if self.loaded.set(state.clone()).is_err() {
            panic!("service state installed twice");
        }
        state
    }
}

pub fn now_ts() -> i64 {
    SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Loads and checksum-verifies the model directory, opens the service's own
/// event log, and replays it from offset 0 so a restart reproduces exactly
/// the prior state the log defines.
pub fn load_state(config: ServeConfig) -> Result<(LoadedState, FeedbackApplier), EngineError> {
    let artifacts = ModelArtifacts::load(&config.model_dir, config.initial_prior)?;
    let info = ArtifactsInfo {
        created_ts: artifacts.manifest.created_ts,
        versions: artifacts.manifest.artifacts.clone(),
        users: artifacts.item_model.row_ids().len(),
        items: artifacts.item_model.col_ids().len(),
        categories: artifacts.cat_model.col_ids().len(),
        prior_keys: artifacts.priors.len(),
    };
    let engine = Engine::new(artifacts, config.scoring)?;

    let rule = SessionRule::new(config.session_gap_s).map_err(io_from_ingest)?;
    let mut applier = FeedbackApplier::new(rule, config.feedback_mode);
    let log_path = config.event_log_path();
    applier
        .tick(&log_path, engine.priors(), now_ts())
        .map_err(io_from_ingest)?;
    applier
        .save_checkpoint_to(&config.checkpoint_path())
        .map_err(io_from_ingest)?;

    let log = EventLog::open(&log_path, SyncPolicy::Flush).map_err(io_from_ingest)?;
    Ok((
        LoadedState {
            engine,
            log: Mutex::new(log),
            info,
            config,
        },
        applier,
    ))
}

fn io_from_ingest(e: IngestError) -> EngineError {
    match e {
        IngestError::Io(io) => EngineError::Io(io),
        other => EngineError::Manifest(other.to_string()),
    }
}

/// Periodically folds new log events into the prior store and persists the
/// checkpoint; separately snapshots the priors.
pub async fn run_background_tasks(state: Arc<LoadedState>, mut applier: FeedbackApplier) {
    let log_path = state.config.event_log_path();
    let checkpoint_path = state.config.checkpoint_path();
    let snapshot_path = state.config.snapshot_path();
    let mut update = tokio::time::interval(state.config.update_interval);
    update.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut snapshot = tokio::time::interval(state.config.snapshot_interval);
    snapshot.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);

    loop {
        tokio::select! {
            _ = update.tick() => {
                match applier.tick(&log_path, state.engine.priors(), now_ts()) {
                    Ok(report) => {
                        if report.consumed > 0 {
                            tracing::debug!(
                                consumed = report.consumed,
                                folded = report.folded,
                                skipped = report.skipped,
                                "applied feedback"
                            );
                        }
                        if let Err(e) = applier.save_checkpoint_to(&checkpoint_path) {
                            tracing::warn!(error = %e, "failed to persist checkpoint");
                        }
                    }
                    Err(e) => tracing::warn!(error = %e, "feedback tick failed"),
                }
            }
            _ = snapshot.tick() => {
                if let Err(e) = state.engine.priors().snapshot_to(&snapshot_path) {
                    tracing::warn!(error = %e, "failed to snapshot priors");
                }
            }
        }
    }
}
