//! The offline training pipeline: historical events + catalog in, a
//! checksum-manifested model directory out.
//!
//! Four artifacts are derived from the event log: item and category factor
//! tables from the add-to-cart transaction matrices, the user-category
//! purchase counts behind the discovery term, and the prior seed obtained by
//! replaying the log's sessionized carousel events from the initial prior.

use std::path::Path;

use thiserror::Error;

use crate::domain::CategoryMap;
use crate::engine::{load_eta_jsonl, write_eta_jsonl, EngineError, EtaTable, Manifest};
use crate::factorization::{build_matrix, train_als, FactorizationError, MatrixAxis, TrainConfig};
use crate::ingestion::{rebuild_from_log, FeedbackMode, IngestError, SessionRule};
use crate::priors::{BetaPrior, PriorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Factorization(#[from] FactorizationError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Priors(#[from] PriorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Domain(#[from] crate::domain::DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything the trainer needs besides its input/output paths.
#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub train: TrainConfig,
    pub window_days: u32,
    pub session_rule: SessionRule,
    pub feedback_mode: FeedbackMode,
    pub initial_prior: BetaPrior,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            window_days: 365,
            session_rule: SessionRule::default(),
            feedback_mode: FeedbackMode::default(),
            initial_prior: BetaPrior::UNIFORM,
        }
    }
}

/// Sizes of what training produced, for logs and sanity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSummary {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub prior_keys: usize,
    pub events_consumed: u64,
    pub events_skipped: u64,
}

/// Trains both factor models and writes the five artifacts plus manifest
/// into `out_dir`. Deterministic given identical inputs and params.
pub fn run_training(
    events_path: &Path,
    catalog_path: &Path,
    out_dir: &Path,
    params: &TrainParams,
) -> Result<TrainSummary, PipelineError> {
    params.train.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let catalog = CategoryMap::load_jsonl(catalog_path)?;
    let records = crate::ingestion::EventLog::read_from(events_path, 0)?;
    let mut events = Vec::with_capacity(records.len());
    let mut skipped = 0u64;
    for record in records {
        match record.parsed {
            Ok(event) => events.push(event),
            Err(_) => skipped += 1,
        }
    }

    let item_matrix = build_matrix(&events, MatrixAxis::Item, &catalog, params.window_days)?;
    let item_model = train_als(&item_matrix, params.train)?;
    item_model.write_to(&out_dir.join("user_item.emb"))?;

    let cat_matrix = build_matrix(&events, MatrixAxis::Category, &catalog, params.window_days)?;
    let cat_model = train_als(&cat_matrix, params.train)?;
    cat_model.write_to(&out_dir.join("user_cat.emb"))?;

    // the category matrix's counts are exactly the purchase counts the
    // discovery term reads
    let mut eta: EtaTable = EtaTable::new();
    for (r, c, count) in cat_matrix.iter_cells() {
        let user = crate::domain::UserId::new(cat_matrix.row_ids()[r].clone())
            .map_err(|reason| EngineError::Manifest(format!("bad user id: {reason}")))?;
        let category = crate::domain::CategoryId::new(cat_matrix.col_ids()[c].clone())
            .map_err(|reason| EngineError::Manifest(format!("bad category id: {reason}")))?;
        eta.entry(user).or_default().insert(category, count as u64);
    }
    write_eta_jsonl(&eta, &out_dir.join("eta_uc.jsonl"))?;

    // seed priors by replaying the historical log through the same
    // sessionized fold the online applier uses
    let (priors, report) = rebuild_from_log(
        events_path,
        params.session_rule,
        params.feedback_mode,
        params.initial_prior,
    )?;
    let prior_keys = priors.snapshot_to(&out_dir.join("priors.jsonl"))?;

    std::fs::copy(catalog_path, out_dir.join("catalog.jsonl"))?;

    let created_ts = events.iter().map(|e| e.ts).max().unwrap_or(0);
    Manifest::for_dir(out_dir, created_ts)?.save(out_dir)?;

    Ok(TrainSummary {
        users: item_matrix.n_rows(),
        items: item_matrix.n_cols(),
        categories: cat_matrix.n_cols(),
        prior_keys,
        events_consumed: report.consumed,
        events_skipped: skipped,
    })
}

/// Convenience loader used by tests: reads the eta table back.
pub fn read_eta(dir: &Path) -> Result<EtaTable, PipelineError> {
    Ok(load_eta_jsonl(&dir.join("eta_uc.jsonl"))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CarouselId, EventType, InteractionEvent, ItemId, UserId};
    use crate::engine::{Engine, ModelArtifacts};
    use crate::ingestion::{EventLog, SyncPolicy};
    use crate::scoring::ScoringConfig;

    fn write_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let catalog_path = dir.join("catalog.jsonl");
        let mut catalog = String::new();
        for item in 0..6 {
            let category = if item < 3 { "dairy" } else { "bakery" };
            catalog.push_str(&format!(
                "{{\"item\":\"i{item}\",\"category\":\"{category}\"}}\n"
            ));
        }
        std::fs::write(&catalog_path, catalog).unwrap();

        let events_path = dir.join("events.jsonl");
        let mut log = EventLog::open(&events_path, SyncPolicy::Flush).unwrap();
        let mut ts = 0;
        // u0/u1 buy dairy, u2/u3 buy bakery; everyone views both carousels
        for round in 0..4 {
            for user in 0..4 {
                let user_id = UserId::new(format!("u{user}")).unwrap();
                let item = if user < 2 { round % 3 } else { 3 + round % 3 };
                let carousel = if user < 2 { "dairy-picks" } else { "bakery-picks" };
                ts += 10;
                log.append(&InteractionEvent {
                    ts,
                    user: user_id.clone(),
                    carousel: CarouselId::new(carousel).unwrap(),
                    item: Some(ItemId::new(format!("i{item}")).unwrap()),
                    event: EventType::Atc,
                })
                .unwrap();
                ts += 10;
                log.append(&InteractionEvent {
                    ts,
                    user: user_id,
                    carousel: CarouselId::new("mixed").unwrap(),
                    item: None,
                    event: EventType::View,
                })
                .unwrap();
            }
            ts += 4000; // close the session between rounds
        }
        (events_path, catalog_path)
    }

    #[test]
    fn training_writes_verifiable_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (events_path, catalog_path) = write_fixture(dir.path());
        let out = dir.path().join("model");
        let params = TrainParams {
            train: TrainConfig {
                dim: 4,
                iterations: 5,
                seed: 11,
                ..TrainConfig::default()
            },
            ..TrainParams::default()
        };
        let summary = run_training(&events_path, &catalog_path, &out, &params).unwrap();
        assert_eq!(summary.users, 4);
        assert_eq!(summary.items, 6);
        assert_eq!(summary.categories, 2);
        assert!(summary.prior_keys > 0);
        assert_eq!(summary.events_skipped, 0);

        // loads, checksum-verifies, and can rank
        let artifacts = ModelArtifacts::load(&out, BetaPrior::UNIFORM).unwrap();
        assert_eq!(artifacts.item_model.row_ids().len(), 4);
        let engine = Engine::new(artifacts, ScoringConfig::default()).unwrap();
        let candidates = vec![
            crate::domain::Carousel::new(
                CarouselId::new("dairy-picks").unwrap(),
                vec![
                    ItemId::new("i0").unwrap(),
                    ItemId::new("i1").unwrap(),
                    ItemId::new("i2").unwrap(),
                ],
            )
            .unwrap(),
            crate::domain::Carousel::new(
                CarouselId::new("bakery-picks").unwrap(),
                vec![
                    ItemId::new("i3").unwrap(),
                    ItemId::new("i4").unwrap(),
                    ItemId::new("i5").unwrap(),
                ],
            )
            .unwrap(),
        ];
        let outcome = engine
            .rank(&UserId::new("u0").unwrap(), &candidates, 2)
            .unwrap();
        assert_eq!(outcome.ranking.len(), 2);
        // a dairy buyer sees the dairy carousel first
        assert_eq!(
            outcome.ranking.entries()[0].carousel.as_str(),
            "dairy-picks"
        );
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let (events_path, catalog_path) = write_fixture(dir.path());
        let params = TrainParams {
            train: TrainConfig {
                dim: 3,
                iterations: 4,
                seed: 2,
                ..TrainConfig::default()
            },
            ..TrainParams::default()
        };
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run_training(&events_path, &catalog_path, &out_a, &params).unwrap();
        run_training(&events_path, &catalog_path, &out_b, &params).unwrap();
        for name in crate::engine::ARTIFACT_FILES {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "artifact {name} differs between identical runs");
        }
    }
}
