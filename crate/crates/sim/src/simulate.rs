//! Session replay against static and dynamic ranking policies.
//!
//! Each session shows one user a ranked page. The user scans zones with a
//! logarithmic zone bias, scans items within a carousel with the same
//! positional bias, and interacts Bernoulli-style in proportion to their
//! ground-truth item affinity, so P(interact at zone z, position l) is
//! proportional to affinity / (log(1+z) log(1+l)). The dynamic arm feeds
//! the resulting events back through the same applier the service runs;
//! the static arm serves one global popularity order.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crank_core::domain::{Carousel, EventType, InteractionEvent};
use crank_core::engine::{Engine, EtaTable};
use crank_core::factorization::{build_matrix, train_als, EmbeddingTable, MatrixAxis, TrainConfig};
use crank_core::ingestion::{FeedbackApplier, FeedbackMode, LogRecord, SessionRule};
use crank_core::priors::{BetaPrior, PriorStore};
use crank_core::scoring::{LogBase, ScoringConfig};

use crate::world::SyntheticWorld;
use crate::SimError;

/// Scan/interact propensities of the synthetic shopper.
#[derive(Debug, Clone, Copy)]
pub struct BehaviorParams {
    /// P(view the zone-1 carousel); deeper zones decay logarithmically.
    pub view_rate: f64,
    /// Scales P(click item | carousel viewed).
    pub click_scale: f64,
    /// P(add to cart | click) = atc_base + atc_slope * affinity.
    pub atc_base: f64,
    pub atc_slope: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        Self {
            view_rate: 0.85,
            click_scale: 0.03,
            atc_base: 0.3,
            atc_slope: 0.4,
        }
    }
}

/// Which arm serves the page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// One global ordering by aggregate ground-truth popularity.
    Static,
    /// The trained engine with its feedback loop.
    Dynamic,
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "static" => Ok(Self::Static),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(format!("unknown policy {other:?} (static|dynamic)")),
        }
    }
}

/// Everything one simulation run needs besides the world.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub n_sessions: usize,
    /// Seed for session randomness (interaction draws).
    pub seed: u64,
    pub w: f64,
    pub log_base: LogBase,
    pub behavior: BehaviorParams,
    /// Hyperparameters for the engine trained behind the dynamic arm; the
    /// seed field is overridden by the world seed.
    pub train: TrainConfig,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            n_sessions: 10_000,
            seed: 1,
            w: 0.7,
            log_base: LogBase::E,
            behavior: BehaviorParams::default(),
            train: TrainConfig {
                dim: 8,
                iterations: 10,
                reg: 0.1,
                conf_alpha: 10.0,
                seed: 0,
            },
        }
    }
}

/// Aggregate outcome of one simulated arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// Hash of (world config, world seed, sessions, session seed): compare()
    /// refuses to diff reports from different experiments.
    pub config_hash: String,
    pub policy: Policy,
    pub w: f64,
    pub world_seed: u64,
    pub sessions_seed: u64,
    pub sessions: usize,
    pub atc_per_visit: f64,
    pub item_page_visits_per_visit: f64,
    pub distinct_new_categories_touched: f64,
    pub p50_compute_micros: u64,
    pub p99_compute_micros: u64,
}

impl SimReport {
    /// Equality over the seed-determined fields; the timing percentiles are
    /// wall-clock measurements and excluded.
    pub fn behavioral_eq(&self, other: &Self) -> bool {
        self.config_hash == other.config_hash
            && self.policy == other.policy
            && self.w == other.w
            && self.sessions == other.sessions
            && self.atc_per_visit == other.atc_per_visit
            && self.item_page_visits_per_visit == other.item_page_visits_per_visit
            && self.distinct_new_categories_touched == other.distinct_new_categories_touched
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SimError> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| SimError::BadReport(e.to_string()))
    }
}

fn config_hash(world: &SyntheticWorld, n_sessions: usize, sessions_seed: u64) -> String {
    let payload = serde_json::json!({
        "world": world.config,
        "world_seed": world.seed,
        "sessions": n_sessions,
        "sessions_seed": sessions_seed,
    });
    let digest = Sha256::digest(payload.to_string().as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// The trained model behind the dynamic arm, reusable across w settings.
pub struct TrainedModel {
    pub item_model: EmbeddingTable,
    pub cat_model: EmbeddingTable,
    pub eta: EtaTable,
    pub prior_seed: Vec<((crank_core::domain::UserId, crank_core::domain::CarouselId), BetaPrior)>,
}

/// Trains the engine's models from the world's bootstrap history, exactly
/// like the offline trainer would.
pub fn train_model(world: &SyntheticWorld, opts: &SimOptions) -> Result<TrainedModel, SimError> {
    let history = world.bootstrap_history();
    let train_cfg = TrainConfig {
        seed: world.seed,
        ..opts.train
    };
    let item_matrix = build_matrix(&history, MatrixAxis::Item, &world.catalog, 365)?;
    let item_model = train_als(&item_matrix, train_cfg)?;
    let cat_matrix = build_matrix(&history, MatrixAxis::Category, &world.catalog, 365)?;
    let cat_model = train_als(&cat_matrix, train_cfg)?;

    let mut eta: EtaTable = HashMap::new();
    for (r, c, count) in cat_matrix.iter_cells() {
        let user = crank_core::domain::UserId::new(cat_matrix.row_ids()[r].clone())
            .expect("world ids are valid");
        let category = crank_core::domain::CategoryId::new(cat_matrix.col_ids()[c].clone())
            .expect("world ids are valid");
        eta.entry(user).or_default().insert(category, count as u64);
    }

    let store = PriorStore::new(BetaPrior::UNIFORM);
    let mut applier = FeedbackApplier::new(SessionRule::default(), FeedbackMode::Provisional);
    let records: Vec<LogRecord> = history
        .iter()
        .enumerate()
        .map(|(i, e)| LogRecord {
            offset: i as u64,
            parsed: Ok(e.clone()),
        })
        .collect();
    applier.apply_records(&records, &store, i64::MIN);
    applier.finalize(&store);
    let prior_seed = store.to_sorted_map().into_iter().collect();

    Ok(TrainedModel {
        item_model,
        cat_model,
        eta,
        prior_seed,
    })
}

/// Assembles a ready engine from a trained model at the options' scoring
/// settings, with a fresh copy of the seeded priors.
pub fn build_engine(world: &SyntheticWorld, model: &TrainedModel, opts: &SimOptions) -> Result<Engine, SimError> {
    let priors = PriorStore::new(BetaPrior::UNIFORM);
    for ((user, carousel), prior) in &model.prior_seed {
        priors.set(user.clone(), carousel.clone(), *prior);
    }
    Ok(Engine::from_parts(
        model.item_model.clone(),
        model.cat_model.clone(),
        model.eta.clone(),
        priors,
        world.catalog.clone(),
        ScoringConfig {
            w: opts.w,
            log_base: opts.log_base,
            normalize: false,
        },
    )?)
}

struct SessionOutcome {
    events: Vec<InteractionEvent>,
    clicks: u64,
    atcs: u64,
    new_categories: u64,
}

const LN2: f64 = std::f64::consts::LN_2;

fn log_bias(position: usize) -> f64 {
    LN2 / (1.0 + position as f64).ln()
}

/// One page visit: scan zones, maybe view each carousel, interact with its
/// items by affinity x positional bias, with a curiosity boost on categories
/// the user has not touched yet this run.
fn run_session(
    world: &SyntheticWorld,
    user_idx: usize,
    ranking: &[Carousel],
    touched: &mut [bool],
    base_ts: i64,
    behavior: &BehaviorParams,
    rng: &mut ChaCha8Rng,
) -> SessionOutcome {
    let user = &world.users[user_idx];
    let mut outcome = SessionOutcome {
        events: Vec::new(),
        clicks: 0,
        atcs: 0,
        new_categories: 0,
    };
    let mut ts = base_ts;
    for (zone, carousel) in ranking.iter().enumerate() {
        let zone_bias = log_bias(zone + 1);
        if !rng.gen_bool((behavior.view_rate * zone_bias).min(1.0)) {
            continue;
        }
        outcome.events.push(InteractionEvent {
            ts,
            user: user.clone(),
            carousel: carousel.id().clone(),
            item: None,
            event: EventType::View,
        });
        ts += 1;
        for (pos, item) in carousel.items().iter().enumerate() {
            let item_idx = world.item_index(item).expect("world item");
            let affinity = world.affinity(user_idx, item_idx);
            let cat_idx = world.category_of_item(item_idx);
            // the zone bias already gated the carousel view, so the overall
            // interaction probability is affinity x zone bias x position bias
            let mut p_click = behavior.click_scale * affinity * log_bias(pos + 1);
            if !touched[cat_idx] {
                p_click *= world.curiosity(user_idx);
            }
            if !rng.gen_bool(p_click.clamp(0.0, 1.0)) {
                continue;
            }
            outcome.clicks += 1;
            if !touched[cat_idx] {
                touched[cat_idx] = true;
                outcome.new_categories += 1;
            }
            outcome.events.push(InteractionEvent {
                ts,
                user: user.clone(),
                carousel: carousel.id().clone(),
                item: Some(item.clone()),
                event: EventType::Click,
            });
            ts += 1;
            let p_atc = (behavior.atc_base + behavior.atc_slope * affinity).clamp(0.0, 1.0);
            if rng.gen_bool(p_atc) {
                outcome.atcs += 1;
                outcome.events.push(InteractionEvent {
                    ts,
                    user: user.clone(),
                    carousel: carousel.id().clone(),
                    item: Some(item.clone()),
                    event: EventType::Atc,
                });
                ts += 1;
            }
        }
    }
    outcome
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Replays `n_sessions` page visits against one policy and reports the
/// engagement, discovery, and latency metrics.
pub fn simulate(
    world: &SyntheticWorld,
    policy: Policy,
    opts: &SimOptions,
) -> Result<SimReport, SimError> {
    let mut report = SimReport {
        config_hash: config_hash(world, opts.n_sessions, opts.seed),
        policy,
        w: opts.w,
        world_seed: world.seed,
        sessions_seed: opts.seed,
        sessions: opts.n_sessions,
        atc_per_visit: 0.0,
        item_page_visits_per_visit: 0.0,
        distinct_new_categories_touched: 0.0,
        p50_compute_micros: 0,
        p99_compute_micros: 0,
    };
    if opts.n_sessions == 0 {
        return Ok(report);
    }

    let static_order = world.static_order();
    let mut dynamic = match policy {
        Policy::Static => None,
        Policy::Dynamic => {
            let model = train_model(world, opts)?;
            let engine = build_engine(world, &model, opts)?;
            let applier = FeedbackApplier::new(SessionRule::default(), FeedbackMode::Provisional);
            Some((engine, applier, 0u64))
        }
    };

    let mut touched = vec![vec![false; world.config.categories]; world.users.len()];
    let mut timings = Vec::with_capacity(opts.n_sessions);
    let mut total_clicks = 0u64;
    let mut total_atcs = 0u64;
    let mut total_new_categories = 0u64;
    let session_span = 2_000i64; // longer than the session gap

    for session in 0..opts.n_sessions {
        let user_idx = session % world.users.len();
        let base_ts = session as i64 * session_span;
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed ^ (session as u64).wrapping_mul(0x5851_f42d_4c95_7f2d),
        );

        let ranking: Vec<Carousel> = match &mut dynamic {
            None => {
                let start = Instant::now();
                let order = static_order.clone();
                timings.push(start.elapsed().as_micros() as u64);
                order
            }
            Some((engine, _, _)) => {
                let outcome = engine.rank(
                    &world.users[user_idx],
                    &world.carousels,
                    world.carousels.len(),
                )?;
                timings.push(outcome.compute_micros);
                outcome
                    .ranking
                    .entries()
                    .iter()
                    .map(|e| {
                        world
                            .carousels
                            .iter()
                            .find(|c| c.id() == &e.carousel)
                            .expect("ranked carousel is from the pool")
                            .clone()
                    })
                    .collect()
            }
        };

        let outcome = run_session(
            world,
            user_idx,
            &ranking,
            &mut touched[user_idx],
            base_ts,
            &opts.behavior,
            &mut rng,
        );
        total_clicks += outcome.clicks;
        total_atcs += outcome.atcs;
        total_new_categories += outcome.new_categories;

        if let Some((engine, applier, next_offset)) = &mut dynamic {
            let records: Vec<LogRecord> = outcome
                .events
                .iter()
                .enumerate()
                .map(|(i, e)| LogRecord {
                    offset: *next_offset + i as u64,
                    parsed: Ok(e.clone()),
                })
                .collect();
            *next_offset += records.len() as u64;
            applier.apply_records(&records, engine.priors(), base_ts + session_span - 1);
        }
    }

    let n = opts.n_sessions as f64;
    report.atc_per_visit = total_atcs as f64 / n;
    report.item_page_visits_per_visit = total_clicks as f64 / n;
    report.distinct_new_categories_touched = total_new_categories as f64 / n;
    timings.sort_unstable();
    report.p50_compute_micros = percentile(&timings, 0.50);
    report.p99_compute_micros = percentile(&timings, 0.99);
    Ok(report)
}

/// Percent lift of `b` over `a` for one metric; division by zero is "n/a".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiftRow {
    pub metric: String,
    pub base: f64,
    pub treatment: f64,
    /// None when the base is zero.
    pub lift_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiftTable {
    pub rows: Vec<LiftRow>,
}

impl std::fmt::Display for LiftTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<36} {:>12} {:>12} {:>10}",
            "metric", "base", "treatment", "lift"
        )?;
        for row in &self.rows {
            let lift = match row.lift_pct {
                Some(pct) => format!("{pct:+.2}%"),
                None => "n/a".to_string(),
            };
            writeln!(
                f,
                "{:<36} {:>12.6} {:>12.6} {:>10}",
                row.metric, row.base, row.treatment, lift
            )?;
        }
        Ok(())
    }
}

/// Per-metric percent lift of `b` over `a`. Both reports must come from the
/// same world, session count, and session seed.
pub fn compare(a: &SimReport, b: &SimReport) -> Result<LiftTable, SimError> {
    if a.config_hash != b.config_hash || a.sessions != b.sessions {
        return Err(SimError::MismatchedReports(format!(
            "reports disagree on world/sessions: {}/{} vs {}/{}",
            &a.config_hash[..8.min(a.config_hash.len())],
            a.sessions,
            &b.config_hash[..8.min(b.config_hash.len())],
            b.sessions,
        )));
    }
    let lift = |base: f64, treatment: f64| {
        (base != 0.0).then(|| 100.0 * (treatment - base) / base)
    };
    let rows = vec![
        ("atc_per_visit", a.atc_per_visit, b.atc_per_visit),
        (
            "item_page_visits_per_visit",
            a.item_page_visits_per_visit,
            b.item_page_visits_per_visit,
        ),
        (
            "distinct_new_categories_touched",
            a.distinct_new_categories_touched,
            b.distinct_new_categories_touched,
        ),
        (
            "p50_compute_micros",
            a.p50_compute_micros as f64,
            b.p50_compute_micros as f64,
        ),
        (
            "p99_compute_micros",
            a.p99_compute_micros as f64,
            b.p99_compute_micros as f64,
        ),
    ]
    .into_iter()
    .map(|(metric, base, treatment)| LiftRow {
        metric: metric.to_string(),
        base,
        treatment,
        lift_pct: lift(base, treatment),
    })
    .collect();
    Ok(LiftTable { rows })
}
