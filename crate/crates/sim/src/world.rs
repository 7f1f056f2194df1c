//! Deterministic synthetic worlds: users with ground-truth item affinities
//! and category curiosity, a themed carousel pool, and a bootstrap purchase
//! history to train the engine from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crank_core::domain::{
    Carousel, CarouselId, CategoryId, CategoryMap, EventType, InteractionEvent, ItemId, UserId,
};

use crate::SimError;

/// Shape of a synthetic world. Ground-truth draws are fully determined by
/// (config, seed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub users: usize,
    pub categories: usize,
    pub items_per_category: usize,
    pub carousels: usize,
    pub items_per_carousel: usize,
    /// Bootstrap shopping sessions per user used to train the engine.
    pub history_rounds: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            users: 500,
            categories: 16,
            items_per_category: 24,
            carousels: 10,
            items_per_carousel: 20,
            history_rounds: 24,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.users < 2 {
            return Err(SimError::DegenerateConfig(format!(
                "need at least 2 users, got {}",
                self.users
            )));
        }
        if self.categories < 2 {
            return Err(SimError::DegenerateConfig(format!(
                "need at least 2 categories, got {}",
                self.categories
            )));
        }
        if self.carousels < 1 || self.items_per_carousel < 1 {
            return Err(SimError::DegenerateConfig(
                "need at least one carousel with one item".into(),
            ));
        }
        if self.items_per_category < self.items_per_carousel {
            return Err(SimError::DegenerateConfig(format!(
                "items_per_category {} cannot fill carousels of {}",
                self.items_per_category, self.items_per_carousel
            )));
        }
        if self.history_rounds < 1 {
            return Err(SimError::DegenerateConfig(
                "need at least one bootstrap round".into(),
            ));
        }
        Ok(())
    }
}

/// A generated world: catalog, carousel pool, and per-user ground truth.
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub users: Vec<UserId>,
    pub items: Vec<ItemId>,
    pub categories: Vec<CategoryId>,
    pub catalog: CategoryMap,
    pub carousels: Vec<Carousel>,
    /// users × items ground-truth interaction propensity in [0, 1].
    affinity: Vec<f64>,
    /// Per-user multiplier on first-touch interactions with an unexplored
    /// category.
    curiosity: Vec<f64>,
    /// item index → category index.
    item_category: Vec<usize>,
    user_index: HashMap<UserId, usize>,
}

impl SyntheticWorld {
    pub fn affinity(&self, user_idx: usize, item_idx: usize) -> f64 {
        self.affinity[user_idx * self.items.len() + item_idx]
    }

    pub fn curiosity(&self, user_idx: usize) -> f64 {
        self.curiosity[user_idx]
    }

    pub fn category_of_item(&self, item_idx: usize) -> usize {
        self.item_category[item_idx]
    }

    pub fn user_index(&self, user: &UserId) -> Option<usize> {
        self.user_index.get(user).copied()
    }

    /// Ground-truth popularity of a carousel aggregated across every user;
    /// the static baseline orders by this.
    pub fn aggregate_popularity(&self, carousel: &Carousel) -> f64 {
        let item_idx: Vec<usize> = carousel
            .items()
            .iter()
            .map(|i| self.item_index(i).expect("carousel items are world items"))
            .collect();
        (0..self.users.len())
            .map(|u| item_idx.iter().map(|&i| self.affinity(u, i)).sum::<f64>())
            .sum()
    }

    pub fn item_index(&self, item: &ItemId) -> Option<usize> {
        // item ids encode their index for cheap reverse lookup
        item.as_str().strip_prefix("item").and_then(|s| s.parse().ok())
    }

    /// Carousel ids sorted by aggregate ground-truth popularity, best first:
    /// the control arm's single global ordering.
    pub fn static_order(&self) -> Vec<Carousel> {
        let mut order: Vec<(f64, &Carousel)> = self
            .carousels
            .iter()
            .map(|c| (self.aggregate_popularity(c), c))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id().cmp(b.1.id())));
        order.into_iter().map(|(_, c)| c.clone()).collect()
    }

    /// Synthesizes the bootstrap shopping history the trainer consumes:
    /// per round, each user views a couple of carousels and add-to-carts
    /// items drawn by ground-truth affinity. Timestamps keep rounds in
    /// separate sessions.
    pub fn bootstrap_history(&self) -> Vec<InteractionEvent> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut events = Vec::new();
        let round_span = 10_000i64;
        for round in 0..self.config.history_rounds {
            let base = round as i64 * round_span;
            for (u, user) in self.users.iter().enumerate() {
                let mut ts = base + (u as i64) * 16;
                // an impression or two: keeps the priors' view side honest
                for _ in 0..2 {
                    let k = rng.gen_range(0..self.carousels.len());
                    events.push(InteractionEvent {
                        ts,
                        user: user.clone(),
                        carousel: self.carousels[k].id().clone(),
                        item: None,
                        event: EventType::View,
                    });
                    ts += 1;
                }
                for _ in 0..2 {
                    let item_idx = self.sample_item_by_affinity(u, &mut rng);
                    let cat_idx = self.item_category[item_idx];
                    let carousel = &self.carousels[cat_idx % self.carousels.len()];
                    events.push(InteractionEvent {
                        ts,
                        user: user.clone(),
                        carousel: carousel.id().clone(),
                        item: Some(self.items[item_idx].clone()),
                        event: EventType::Atc,
                    });
                    ts += 1;
                }
            }
        }
        events
    }

    fn sample_item_by_affinity(&self, user_idx: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = self.items.len();
        let row = &self.affinity[user_idx * n..(user_idx + 1) * n];
        let total: f64 = row.iter().sum();
        let mut target = rng.gen_range(0.0..total);
        for (idx, &a) in row.iter().enumerate() {
            target -= a;
            if target <= 0.0 {
                return idx;
            }
        }
        n - 1
    }
}

/// Builds a world from (config, seed); identical inputs regenerate it
/// bit-identically.
pub fn generate_world(config: WorldConfig, seed: u64) -> Result<SyntheticWorld, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let categories: Vec<CategoryId> = (0..config.categories)
        .map(|c| CategoryId::new(format!("cat{c}")).expect("valid id"))
        .collect();

    let n_items = config.categories * config.items_per_category;
    let mut items = Vec::with_capacity(n_items);
    let mut item_category = Vec::with_capacity(n_items);
    let mut catalog = CategoryMap::new();
    for idx in 0..n_items {
        let cat_idx = idx / config.items_per_category;
        let item = ItemId::new(format!("item{idx}")).expect("valid id");
        catalog
            .insert(item.clone(), categories[cat_idx].clone())
            .expect("fresh item cannot conflict");
        items.push(item);
        item_category.push(cat_idx);
    }

    // each carousel is themed to one category and samples its items from it
    let mut carousels = Vec::with_capacity(config.carousels);
    for k in 0..config.carousels {
        let cat_idx = k % config.categories;
        let start = cat_idx * config.items_per_category;
        let mut pool: Vec<usize> = (start..start + config.items_per_category).collect();
        // deterministic partial shuffle, then take the carousel's items
        for i in 0..config.items_per_carousel {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let chosen: Vec<ItemId> = pool[..config.items_per_carousel]
            .iter()
            .map(|&i| items[i].clone())
            .collect();
        carousels.push(
            Carousel::new(CarouselId::new(format!("car{k}")).expect("valid id"), chosen)
                .expect("sampled without replacement"),
        );
    }

    let users: Vec<UserId> = (0..config.users)
        .map(|u| UserId::new(format!("user{u}")).expect("valid id"))
        .collect();
    let user_index = users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.clone(), i))
        .collect();

    // two home categories per user with high propensities, low elsewhere;
    // homes come from the carousel-themed categories, the way carousels are
    // built for popular categories in the first place
    let themed = config.categories.min(config.carousels).max(2);
    let mut affinity = vec![0.0; config.users * n_items];
    let mut curiosity = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let home_a = rng.gen_range(0..themed);
        let home_b = (home_a + 1 + rng.gen_range(0..themed - 1)) % themed;
        for i in 0..n_items {
            let cat = item_category[i];
            affinity[u * n_items + i] = if cat == home_a || cat == home_b {
                rng.gen_range(0.55..0.95)
            } else {
                rng.gen_range(0.005..0.04)
            };
        }
        // a first exposure to an untouched category draws real attention;
        // after that the base affinity takes over
        curiosity.push(rng.gen_range(2.0..6.0));
    }

    Ok(SyntheticWorld {
        config,
        seed,
        users,
        items,
        categories,
        catalog,
        carousels,
        affinity,
        curiosity,
        item_category,
        user_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_regenerates_identically() {
        let cfg = WorldConfig {
            users: 8,
            ..WorldConfig::default()
        };
        let a = generate_world(cfg, 42).unwrap();
        let b = generate_world(cfg, 42).unwrap();
        assert_eq!(a.affinity, b.affinity);
        assert_eq!(a.curiosity, b.curiosity);
        assert_eq!(a.carousels, b.carousels);
        assert_eq!(a.bootstrap_history(), b.bootstrap_history());
    }

    #[test]
    fn seed_changes_ground_truth() {
        let cfg = WorldConfig {
            users: 8,
            ..WorldConfig::default()
        };
        let a = generate_world(cfg, 1).unwrap();
        let b = generate_world(cfg, 2).unwrap();
        assert_ne!(a.affinity, b.affinity);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let cfg = WorldConfig {
            users: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(
            generate_world(cfg, 0),
            Err(SimError::DegenerateConfig(_))
        ));
        let cfg = WorldConfig {
            categories: 1,
            ..WorldConfig::default()
        };
        assert!(generate_world(cfg, 0).is_err());
        let cfg = WorldConfig {
            items_per_category: 3,
            items_per_carousel: 20,
            ..WorldConfig::default()
        };
        assert!(generate_world(cfg, 0).is_err());
    }

    #[test]
    fn carousels_are_single_category_themed() {
        let world = generate_world(
            WorldConfig {
                users: 4,
                ..WorldConfig::default()
            },
            7,
        )
        .unwrap();
        for (k, carousel) in world.carousels.iter().enumerate() {
            let theme = k % world.config.categories;
            for item in carousel.items() {
                let idx = world.item_index(item).unwrap();
                assert_eq!(world.category_of_item(idx), theme);
            }
        }
    }
}
