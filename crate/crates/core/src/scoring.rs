//! Carousel scoring and the score-and-sort zone assignment.
//!
//! Every candidate carousel gets an affinity score (prior-weighted,
//! position-discounted sum of user-item affinities), a discovery score
//! (position-discounted sum of exploration-boosted user-category scores),
//! and their convex combination. Sorting the combination descending and
//! taking the top Z is the whole assignment: the page objective is additive,
//! so the sort is exactly the argmax over injective zone assignments.
//!
//! All scoring here is pure over immutable snapshots; the only shared
//! mutable state it reads is the prior store, through one atomic read per
//! (user, carousel) per request.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Carousel, CarouselId, CategoryId, CategoryMap, UserId};
use crate::factorization::EmbeddingTable;
use crate::priors::PriorStore;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("log base must be positive and != 1, got {0}")]
    InvalidLogBase(f64),
    #[error("weight w must be in [0, 1], got {0}")]
    InvalidWeight(f64),
    #[error("position index must be >= 1")]
    PositionZero,
    #[error("cannot score an empty item list")]
    EmptyItems,
    #[error("cannot score an empty candidate list")]
    NoCandidates,
    #[error("zone count must be >= 1")]
    NoZones,
    #[error("unknown category for item {0:?}")]
    UnknownCategory(String),
}

/// Base of the positional-discount logarithm. Positive and not 1; defaults
/// to natural log. Changing the base rescales every affinity and discovery
/// score by the same constant, so rankings are base-invariant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LogBase(f64);

impl LogBase {
    pub const E: LogBase = LogBase(std::f64::consts::E);
    pub const TWO: LogBase = LogBase(2.0);
    pub const TEN: LogBase = LogBase(10.0);

    pub fn new(base: f64) -> Result<Self, ScoringError> {
        if !(base.is_finite() && base > 0.0 && base != 1.0) {
            return Err(ScoringError::InvalidLogBase(base));
        }
        Ok(Self(base))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for LogBase {
    fn default() -> Self {
        Self::E
    }
}

impl TryFrom<f64> for LogBase {
    type Error = ScoringError;
    fn try_from(v: f64) -> Result<Self, ScoringError> {
        Self::new(v)
    }
}

impl From<LogBase> for f64 {
    fn from(b: LogBase) -> f64 {
        b.0
    }
}

impl FromStr for LogBase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "e" | "E" => Ok(Self::E),
            other => {
                let v: f64 = other.parse().map_err(|_| format!("bad log base {s:?}"))?;
                Self::new(v).map_err(|e| e.to_string())
            }
        }
    }
}

impl std::fmt::Display for LogBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if *self == Self::E {
            f.write_str("e")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Knobs of the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Convex weight on affinity; 1 − w goes to discovery.
    pub w: f64,
    pub log_base: LogBase,
    /// Per-request min-max normalization of the affinity and discovery
    /// columns before combining. Off by default: the raw combination is the
    /// reference behavior, normalization trades its scale-faithfulness for
    /// comparable term ranges.
    pub normalize: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            w: 0.7,
            log_base: LogBase::E,
            normalize: false,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(0.0..=1.0).contains(&self.w) || !self.w.is_finite() {
            return Err(ScoringError::InvalidWeight(self.w));
        }
        Ok(())
    }
}

/// Positional discount 1 / log_base(1 + l) for 1-based position `l`.
/// Strictly decreasing in `l`.
pub fn position_weight(l: usize, base: LogBase) -> Result<f64, ScoringError> {
    if l < 1 {
        return Err(ScoringError::PositionZero);
    }
    // 1 / log_b(1+l) = ln(b) / ln(1+l)
    Ok(base.value().ln() / (1.0 + l as f64).ln())
}

/// Prior-weighted, position-discounted affinity:
/// `lambda * Σ_l r̂_l / log(1 + l)` over the carousel's actual length.
pub fn affinity_score(
    lambda: f64,
    item_affinities: &[f64],
    base: LogBase,
) -> Result<f64, ScoringError> {
    if item_affinities.is_empty() {
        return Err(ScoringError::EmptyItems);
    }
    let mut sum = 0.0;
    for (idx, r_hat) in item_affinities.iter().enumerate() {
        sum += r_hat * position_weight(idx + 1, base)?;
    }
    Ok(lambda * sum)
}

/// Exploration-boosted category score `ŝ * e^(-η)`: the more purchases from
/// a category, the smaller its discovery value.
pub fn discovery_score(s_hat: f64, eta: u64) -> f64 {
    s_hat * (-(eta as f64)).exp()
}

/// Position-discounted sum of per-item discovery values
/// `Σ_l g(u, ψ(i_l)) / log(1 + l)`.
pub fn discovery_carousel_score(g_values: &[f64], base: LogBase) -> Result<f64, ScoringError> {
    if g_values.is_empty() {
        return Err(ScoringError::EmptyItems);
    }
    let mut sum = 0.0;
    for (idx, g) in g_values.iter().enumerate() {
        sum += g * position_weight(idx + 1, base)?;
    }
    Ok(sum)
}

/// Convex combination `w * alpha + (1 - w) * gamma`.
pub fn combined_score(alpha: f64, gamma: f64, cfg: &ScoringConfig) -> f64 {
    cfg.w * alpha + (1.0 - cfg.w) * gamma
}

/// User-category affinity scores and purchase counts behind the discovery
/// term. Scores come from the category factor table; pairs the table has
/// never seen fall back to mean vectors, which reproduces the mean of the
/// user's known scores (cold category) or the global mean score (cold user).
#[derive(Debug)]
pub struct DiscoveryInputs {
    cat_model: EmbeddingTable,
    eta: HashMap<UserId, HashMap<CategoryId, u64>>,
}

impl DiscoveryInputs {
    pub fn new(cat_model: EmbeddingTable, eta: HashMap<UserId, HashMap<CategoryId, u64>>) -> Self {
        Self { cat_model, eta }
    }

    pub fn cat_model(&self) -> &EmbeddingTable {
        &self.cat_model
    }

    pub fn eta(&self, user: &UserId, category: &CategoryId) -> u64 {
        self.eta
            .get(user)
            .and_then(|per_cat| per_cat.get(category))
            .copied()
            .unwrap_or(0)
    }

    pub fn s_hat(&self, user: &UserId, category: &CategoryId) -> f64 {
        let x = self
            .cat_model
            .row_vector(user.as_str())
            .unwrap_or_else(|| self.cat_model.mean_row_vector());
        let y = self
            .cat_model
            .col_vector(category.as_str())
            .unwrap_or_else(|| self.cat_model.mean_col_vector());
        dot(x, y)
    }

    /// `g(u, c) = ŝ_uc e^(-η_uc)`.
    pub fn g(&self, user: &UserId, category: &CategoryId) -> f64 {
        discovery_score(self.s_hat(user, category), self.eta(user, category))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score breakdown for one candidate, kept alongside the ranking for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarouselScore {
    pub carousel: CarouselId,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub phi: f64,
}

/// The immutable stores one scoring pass reads.
pub struct ScoringStores<'a> {
    pub item_model: &'a EmbeddingTable,
    pub discovery: &'a DiscoveryInputs,
    pub priors: &'a PriorStore,
    pub catalog: &'a CategoryMap,
}

/// Scores every candidate for one user: lambda from the prior store (read
/// once per carousel, so one request sees one consistent snapshot), alpha
/// from per-item affinities in the carousel's own item order, gamma from
/// per-item category discovery. Items with no embedding contribute 0 affinity
/// rather than failing the request; an uncatalogued item fails it.
pub fn score_carousels(
    user: &UserId,
    candidates: &[Carousel],
    stores: &ScoringStores<'_>,
    cfg: &ScoringConfig,
) -> Result<Vec<CarouselScore>, ScoringError> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(ScoringError::NoCandidates);
    }

    let user_vec = stores
        .item_model
        .row_vector(user.as_str())
        .unwrap_or_else(|| stores.item_model.mean_row_vector());

    let mut scores = Vec::with_capacity(candidates.len());
    let mut affinities: Vec<f64> = Vec::new();
    let mut g_values: Vec<f64> = Vec::new();
    for carousel in candidates {
        let lambda = stores
            .priors
            .get_or_init(user, carousel.id())
            .expected_lambda();

        affinities.clear();
        g_values.clear();
        for item in carousel.items() {
            let r_hat = stores
                .item_model
                .col_vector(item.as_str())
                .map_or(0.0, |y| dot(user_vec, y));
            affinities.push(r_hat);
            let category = stores
                .catalog
                .category_of(item)
                .map_err(|_| ScoringError::UnknownCategory(item.as_str().to_string()))?;
            g_values.push(stores.discovery.g(user, category));
        }

        let alpha = affinity_score(lambda, &affinities, cfg.log_base)?;
        let gamma = discovery_carousel_score(&g_values, cfg.log_base)?;
        scores.push(CarouselScore {
            carousel: carousel.id().clone(),
            lambda,
            alpha,
            gamma,
            phi: 0.0,
        });
    }

    if cfg.normalize {
        min_max_normalize(&mut scores, |s| &mut s.alpha);
        min_max_normalize(&mut scores, |s| &mut s.gamma);
    }
    for score in &mut scores {
        score.phi = combined_score(score.alpha, score.gamma, cfg);
    }
    Ok(scores)
}

fn min_max_normalize(scores: &mut [CarouselScore], field: impl Fn(&mut CarouselScore) -> &mut f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for score in scores.iter_mut() {
        let v = *field(score);
        min = min.min(v);
        max = max.max(v);
    }
    let span = max - min;
    for score in scores.iter_mut() {
        let v = field(score);
        *v = if span > 0.0 { (*v - min) / span } else { 0.0 };
    }
}

/// The injective assignment of the top carousels to zones, zone 1 first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneRanking {
    entries: Vec<CarouselScore>,
}

impl ZoneRanking {
    pub fn entries(&self) -> &[CarouselScore] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &CarouselId> {
        self.entries.iter().map(|e| &e.carousel)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 0-based zone of a carousel, if it was assigned one.
    pub fn position_of(&self, id: &CarouselId) -> Option<usize> {
        self.entries.iter().position(|e| &e.carousel == id)
    }
}

/// Sorts by phi descending with ties broken by carousel id ascending, and
/// keeps the first `min(zones, candidates)`. Because the page objective is a
/// plain sum of the chosen scores, this is the exact argmax over all
/// injective zone assignments.
pub fn rank_carousels(
    scores: &[CarouselScore],
    zones: usize,
    _cfg: &ScoringConfig,
) -> Result<ZoneRanking, ScoringError> {
    if zones < 1 {
        return Err(ScoringError::NoZones);
    }
    if scores.is_empty() {
        return Err(ScoringError::NoCandidates);
    }
    let mut entries = scores.to_vec();
    entries.sort_by(|a, b| {
        b.phi
            .total_cmp(&a.phi)
            .then_with(|| a.carousel.cmp(&b.carousel))
    });
    entries.truncate(zones.min(scores.len()));
    debug_assert!(
        {
            let mut ids: Vec<_> = entries.iter().map(|e| &e.carousel).collect();
            ids.sort();
            ids.windows(2).all(|w| w[0] != w[1])
        },
        "duplicate carousel ids passed to rank_carousels"
    );
    Ok(ZoneRanking { entries })
}
