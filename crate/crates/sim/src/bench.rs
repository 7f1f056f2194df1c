//! Latency benchmark: hammer the in-process engine with concurrent ranking
//! requests and report scoring-time percentiles.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crank_core::domain::{Carousel, CarouselId, CategoryId, CategoryMap, ItemId, UserId};
use crank_core::engine::Engine;
use crank_core::factorization::EmbeddingTable;
use crank_core::priors::{BetaPrior, PriorStore};
use crank_core::scoring::ScoringConfig;

use crate::SimError;

#[derive(Debug, Clone, Copy)]
pub struct BenchParams {
    pub requests: usize,
    pub concurrency: usize,
    pub candidates: usize,
    pub items_per_carousel: usize,
    /// Embedding dimensionality of the bench model.
    pub dim: usize,
    /// Requests issued and discarded before measuring.
    pub warmup: usize,
    pub users: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            requests: 20_000,
            concurrency: 8,
            candidates: 10,
            items_per_carousel: 20,
            dim: 32,
            warmup: 200,
            users: 200,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub requests: usize,
    pub concurrency: usize,
    pub candidates: usize,
    pub items_per_carousel: usize,
    pub p50_micros: u64,
    pub p95_micros: u64,
    pub p99_micros: u64,
    pub max_micros: u64,
    pub mean_micros: f64,
}

impl std::fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{} requests x {} carousels x {} items ({} threads)",
            self.requests, self.candidates, self.items_per_carousel, self.concurrency
        )?;
        writeln!(
            f,
            "compute micros: p50={} p95={} p99={} max={} mean={:.1}",
            self.p50_micros, self.p95_micros, self.p99_micros, self.max_micros, self.mean_micros
        )
    }
}

/// Builds a bench-scale engine with random (but deterministic) embeddings.
/// Quality is irrelevant here; the shape matches serving scale.
pub fn bench_engine(params: &BenchParams) -> Result<(Engine, Vec<Carousel>, Vec<UserId>), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_items = params.candidates * params.items_per_carousel;
    let n_categories = params.candidates.max(2);

    let users: Vec<UserId> = (0..params.users)
        .map(|u| UserId::new(format!("user{u}")).expect("valid id"))
        .collect();
    let user_ids: Vec<String> = users.iter().map(|u| u.as_str().to_string()).collect();
    let item_ids: Vec<String> = (0..n_items).map(|i| format!("item{i}")).collect();
    let cat_ids: Vec<String> = (0..n_categories).map(|c| format!("cat{c}")).collect();

    let mut randn = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
    };
    let item_model = EmbeddingTable::from_parts(
        params.dim,
        user_ids.clone(),
        randn(params.users * params.dim),
        item_ids.clone(),
        randn(n_items * params.dim),
    )?;
    let cat_model = EmbeddingTable::from_parts(
        params.dim,
        user_ids,
        randn(params.users * params.dim),
        cat_ids.clone(),
        randn(n_categories * params.dim),
    )?;

    let mut catalog = CategoryMap::new();
    let mut eta: HashMap<UserId, HashMap<CategoryId, u64>> = HashMap::new();
    for (idx, item) in item_ids.iter().enumerate() {
        let cat = CategoryId::new(cat_ids[idx % n_categories].clone()).expect("valid id");
        catalog
            .insert(ItemId::new(item.clone()).expect("valid id"), cat)
            .expect("fresh item");
    }
    for user in &users {
        let per_cat = eta.entry(user.clone()).or_default();
        for cat in cat_ids.iter().take(2) {
            per_cat.insert(CategoryId::new(cat.clone()).expect("valid id"), 3);
        }
    }

    let priors = PriorStore::new(BetaPrior::UNIFORM);
    let mut carousels = Vec::with_capacity(params.candidates);
    for k in 0..params.candidates {
        let items: Vec<ItemId> = (0..params.items_per_carousel)
            .map(|l| {
                ItemId::new(item_ids[k * params.items_per_carousel + l].clone())
                    .expect("valid id")
            })
            .collect();
        carousels.push(
            Carousel::new(CarouselId::new(format!("car{k}")).expect("valid id"), items)
                .expect("distinct items"),
        );
        // give the priors some mass so reads take the non-default path
        for user in users.iter().take(params.users / 2) {
            priors.apply(
                user,
                &CarouselId::new(format!("car{k}")).expect("valid id"),
                crank_core::domain::EventType::Click,
            );
        }
    }

    let engine = Engine::from_parts(
        item_model,
        cat_model,
        eta,
        priors,
        catalog,
        ScoringConfig::default(),
    )?;
    Ok((engine, carousels, users))
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Issues `params.requests` warmed ranking requests from
/// `params.concurrency` threads against one shared engine and reports
/// scoring-time percentiles.
pub fn bench_latency(params: &BenchParams) -> Result<LatencyReport, SimError> {
    if params.requests < 1000 {
        return Err(SimError::InsufficientSamples {
            got: params.requests,
            need: 1000,
        });
    }
    let concurrency = params.concurrency.max(1);
    let (engine, carousels, users) = bench_engine(params)?;

    // warmup: populate caches and the allocator before measuring
    for i in 0..params.warmup.max(100) {
        let user = &users[i % users.len()];
        engine
            .rank(user, &carousels, carousels.len())
            .expect("bench rank cannot fail");
    }

    let samples = Mutex::new(Vec::with_capacity(params.requests));
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..concurrency {
            scope.spawn(|| {
                let mut local = Vec::new();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= params.requests {
                        break;
                    }
                    let user = &users[i % users.len()];
                    let outcome = engine
                        .rank(user, &carousels, carousels.len())
                        .expect("bench rank cannot fail");
                    local.push(outcome.compute_micros);
                }
                samples.lock().expect("sample mutex").extend(local);
            });
        }
    });

    let mut micros = samples.into_inner().expect("sample mutex");
    micros.sort_unstable();
    let total: u64 = micros.iter().sum();
    Ok(LatencyReport {
        requests: micros.len(),
        concurrency,
        candidates: params.candidates,
        items_per_carousel: params.items_per_carousel,
        p50_micros: percentile(&micros, 0.50),
        p95_micros: percentile(&micros, 0.95),
        p99_micros: percentile(&micros, 0.99),
        max_micros: *micros.last().expect("at least 1000 samples"),
        mean_micros: total as f64 / micros.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_insufficient_samples() {
        let params = BenchParams {
            requests: 999,
            ..BenchParams::default()
        };
        assert!(matches!(
            bench_latency(&params),
            Err(SimError::InsufficientSamples { got: 999, need: 1000 })
        ));
    }

    #[test]
    fn tiny_requests_are_cheaper_than_full_pages() {
        let small = BenchParams {
            requests: 1500,
            concurrency: 2,
            candidates: 1,
            items_per_carousel: 1,
            warmup: 100,
            ..BenchParams::default()
        };
        let large = BenchParams {
            requests: 1500,
            concurrency: 2,
            candidates: 10,
            items_per_carousel: 20,
            warmup: 100,
            ..BenchParams::default()
        };
        let small_report = bench_latency(&small).unwrap();
        let large_report = bench_latency(&large).unwrap();
        assert_eq!(small_report.requests, 1500);
        assert!(
            small_report.p50_micros <= large_report.p50_micros,
            "1x1 p50 {} should not exceed 10x20 p50 {}",
            small_report.p50_micros,
            large_report.p50_micros
        );
    }
}
