//! Beta priors over user-carousel engagement with online posterior updates.
//!
//! Each (user, carousel) pair carries a Beta(a, b) distribution over the
//! probability that the user interacts with the carousel. Clicks and
//! add-to-carts increment `a`, views increment `b`, so the posterior stays a
//! Beta and updates are a single atomic read-modify-write per key. The
//! ranking path reads the expected value a/(a+b).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CarouselId, DomainError, EventType, UserId};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("beta parameters must be positive, got a={a}, b={b}")]
    NonPositive { a: f64, b: f64 },
    #[error("snapshot line {line}: {reason}")]
    SnapshotLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pseudo-counts of a Beta distribution; both strictly positive at all times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

impl BetaPrior {
    /// The uniform Beta(1, 1) prior.
    pub const UNIFORM: BetaPrior = BetaPrior { a: 1.0, b: 1.0 };

    pub fn new(a: f64, b: f64) -> Result<Self, PriorError> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(PriorError::NonPositive { a, b });
        }
        Ok(Self { a, b })
    }

    /// Expected value a/(a+b) of the distribution; always in (0, 1).
    pub fn expected_lambda(self) -> f64 {
        self.a / (self.a + self.b)
    }

    /// Posterior after one interaction event: click or atc bump `a`, view
    /// bumps `b`, anything else leaves the prior unchanged. Pure.
    pub fn updated(self, event: Option<EventType>) -> Self {
        match event {
            Some(EventType::Click) | Some(EventType::Atc) => Self {
                a: self.a + 1.0,
                b: self.b,
            },
            Some(EventType::View) => Self {
                a: self.a,
                b: self.b + 1.0,
            },
            None => self,
        }
    }

    /// Left-fold of [`BetaPrior::updated`] over a timestamp-ordered event
    /// list. The result depends only on the multiset of events (the updates
    /// commute); the order is preserved for audit logging at call sites.
    pub fn fold_events(self, events: impl IntoIterator<Item = EventType>) -> Self {
        events
            .into_iter()
            .fold(self, |prior, event| prior.updated(Some(event)))
    }
}

/// One snapshot line of the prior store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub user: UserId,
    pub carousel: CarouselId,
    pub a: f64,
    pub b: f64,
}

/// Concurrent map of (user, carousel) → [`BetaPrior`].
///
/// Absent keys behave exactly as the configured initial prior; reads never
/// insert. Updates go through a per-key atomic entry so concurrent writers
/// only contend on the same (user, carousel).
#[derive(Debug)]
pub struct PriorStore {
    map: DashMap<(UserId, CarouselId), BetaPrior>,
    initial: BetaPrior,
}

impl Default for PriorStore {
    fn default() -> Self {
        Self::new(BetaPrior::UNIFORM)
    }
}

impl PriorStore {
    pub fn new(initial: BetaPrior) -> Self {
        Self {
            map: DashMap::new(),
            initial,
        }
    }

    pub fn initial(&self) -> BetaPrior {
        self.initial
    }

    /// The stored prior, or the initial prior if absent — without inserting.
    pub fn get_or_init(&self, user: &UserId, carousel: &CarouselId) -> BetaPrior {
        self.map
            .get(&(user.clone(), carousel.clone()))
            .map(|entry| *entry.value())
            .unwrap_or(self.initial)
    }

    /// Applies one event to the key's prior (materializing it on first
    /// touch). The read-modify-write holds the key's entry lock.
    pub fn apply(&self, user: &UserId, carousel: &CarouselId, event: EventType) {
        let mut entry = self
            .map
            .entry((user.clone(), carousel.clone()))
            .or_insert(self.initial);
        *entry.value_mut() = entry.value().updated(Some(event));
    }

    pub fn set(&self, user: UserId, carousel: CarouselId, prior: BetaPrior) {
        self.map.insert((user, carousel), prior);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// All materialized entries in key order, for snapshots and comparisons.
    pub fn to_sorted_map(&self) -> BTreeMap<(UserId, CarouselId), BetaPrior> {
        self.map
            .iter()
            .map(|e| (e.key().clone(), *e.value()))
            .collect()
    }

    /// Writes the `{"user","carousel","a","b"}` JSONL snapshot, sorted by key
    /// so identical stores produce identical bytes.
    pub fn snapshot_to(&self, path: &Path) -> Result<usize, PriorError> {
        let sorted = self.to_sorted_map();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for ((user, carousel), prior) in &sorted {
            let record = PriorRecord {
                user: user.clone(),
                carousel: carousel.clone(),
                a: prior.a,
                b: prior.b,
            };
            serde_json::to_writer(&mut out, &record)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(sorted.len())
    }

    /// Loads a snapshot file, validating every (a, b) pair.
    pub fn load_from(path: &Path, initial: BetaPrior) -> Result<Self, PriorError> {
        let store = Self::new(initial);
        let file = std::fs::File::open(path)?;
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: PriorRecord =
                serde_json::from_str(&line).map_err(|e| PriorError::SnapshotLine {
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
            let prior =
                BetaPrior::new(record.a, record.b).map_err(|e| PriorError::SnapshotLine {
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
            store.set(record.user, record.carousel, prior);
        }
        Ok(store)
    }
}

impl From<DomainError> for PriorError {
    fn from(e: DomainError) -> Self {
        PriorError::SnapshotLine {
            line: 0,
            reason: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uid(s: &str) -> UserId {
        UserId::new(s).unwrap()
    }
    fn cid(s: &str) -> CarouselId {
        CarouselId::new(s).unwrap()
    }

    #[test]
    fn expected_lambda_matches_direct_substitution() {
        assert_relative_eq!(BetaPrior::new(1.0, 1.0).unwrap().expected_lambda(), 0.5);
        assert_relative_eq!(BetaPrior::new(3.0, 1.0).unwrap().expected_lambda(), 0.75);
        assert_relative_eq!(BetaPrior::new(2.0, 3.0).unwrap().expected_lambda(), 0.4);
    }

    #[test]
    fn update_branches() {
        let p = BetaPrior::new(2.0, 3.0).unwrap();
        assert_eq!(p.updated(Some(EventType::Click)), BetaPrior { a: 3.0, b: 3.0 });
        assert_eq!(p.updated(Some(EventType::Atc)), BetaPrior { a: 3.0, b: 3.0 });
        assert_eq!(p.updated(Some(EventType::View)), BetaPrior { a: 2.0, b: 4.0 });
        assert_eq!(p.updated(None), p);
    }

    #[test]
    fn fold_hand_checked() {
        let p = BetaPrior::UNIFORM;
        // click -> (2,1), view -> (2,2), atc -> (3,2)
        assert_eq!(
            p.fold_events([EventType::Click, EventType::View, EventType::Atc]),
            BetaPrior { a: 3.0, b: 2.0 }
        );
        assert_eq!(p.fold_events([]), BetaPrior { a: 1.0, b: 1.0 });
        assert_eq!(
            p.fold_events([EventType::View, EventType::View, EventType::View]),
            BetaPrior { a: 1.0, b: 4.0 }
        );
    }

    #[test]
    fn rejects_non_positive_parameters() {
        assert!(BetaPrior::new(0.0, 1.0).is_err());
        assert!(BetaPrior::new(1.0, -2.0).is_err());
        assert!(BetaPrior::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn store_defaults_and_isolation() {
        let store = PriorStore::default();
        assert_eq!(store.get_or_init(&uid("u1"), &cid("c1")), BetaPrior::UNIFORM);
        assert!(store.is_empty()); // get_or_init must not insert

        store.set(uid("u1"), cid("c1"), BetaPrior::new(4.0, 2.0).unwrap());
        assert_eq!(
            store.get_or_init(&uid("u1"), &cid("c1")),
            BetaPrior { a: 4.0, b: 2.0 }
        );
        // per-carousel isolation: a different carousel still reads the default
        assert_eq!(store.get_or_init(&uid("u1"), &cid("c2")), BetaPrior::UNIFORM);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("priors.jsonl");
        let store = PriorStore::default();
        store.apply(&uid("u1"), &cid("c1"), EventType::Click);
        store.apply(&uid("u1"), &cid("c1"), EventType::View);
        store.apply(&uid("u2"), &cid("c9"), EventType::Atc);
        store.snapshot_to(&path).unwrap();

        let loaded = PriorStore::load_from(&path, BetaPrior::UNIFORM).unwrap();
        assert_eq!(loaded.to_sorted_map(), store.to_sorted_map());
    }

    #[test]
    fn snapshot_rejects_invalid_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("priors.jsonl");
        std::fs::write(&path, "{\"user\":\"u1\",\"carousel\":\"c1\",\"a\":0.0,\"b\":1.0}\n")
            .unwrap();
        assert!(matches!(
            PriorStore::load_from(&path, BetaPrior::UNIFORM),
            Err(PriorError::SnapshotLine { line: 1, .. })
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_prior() -> impl Strategy<Value = BetaPrior> {
            (0.01f64..100.0, 0.01f64..100.0).prop_map(|(a, b)| BetaPrior { a, b })
        }

        fn arb_events() -> impl Strategy<Value = Vec<EventType>> {
            proptest::collection::vec(
                prop_oneof![
                    Just(EventType::View),
                    Just(EventType::Click),
                    Just(EventType::Atc)
                ],
                0..40,
            )
        }

        proptest! {
            #[test]
            fn click_raises_and_view_lowers_lambda(p in arb_prior()) {
                let lambda = p.expected_lambda();
                prop_assert!(p.updated(Some(EventType::Click)).expected_lambda() > lambda);
                prop_assert!(p.updated(Some(EventType::Atc)).expected_lambda() > lambda);
                prop_assert!(p.updated(Some(EventType::View)).expected_lambda() < lambda);
            }

            #[test]
            fn fold_is_order_independent(p in arb_prior(), events in arb_events(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut shuffled = events.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(p.fold_events(events), p.fold_events(shuffled));
            }

            #[test]
            fn updates_preserve_invariants(p in arb_prior(), events in arb_events()) {
                let folded = p.fold_events(events);
                prop_assert!(folded.a > 0.0 && folded.b > 0.0);
                let lambda = folded.expected_lambda();
                prop_assert!(lambda > 0.0 && lambda < 1.0);
            }
        }
    }
}
