//! Model artifacts on disk and the in-process ranking engine.
//!
//! A model directory holds five artifacts — two embedding tables, the
//! user-category purchase counts, the prior seed, and the item catalog —
//! plus a manifest of their checksums. Loading verifies every checksum
//! before the engine is considered ready, so a ranker never serves from a
//! torn or half-written directory.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{Carousel, CategoryId, CategoryMap, DomainError, UserId};
use crate::factorization::{EmbeddingTable, FactorizationError};
use crate::priors::{BetaPrior, PriorError, PriorStore};
use crate::scoring::{
    rank_carousels, score_carousels, CarouselScore, DiscoveryInputs, ScoringConfig, ScoringError,
    ScoringStores, ZoneRanking,
};

/// The files every complete model directory contains, besides the manifest.
pub const ARTIFACT_FILES: [&str; 5] = [
    "user_item.emb",
    "user_cat.emb",
    "eta_uc.jsonl",
    "priors.jsonl",
    "catalog.jsonl",
];

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("missing artifact {0}")]
    MissingArtifact(String),
    #[error("checksum mismatch for {file}: manifest {expected}, file {actual}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Factorization(#[from] FactorizationError),
    #[error(transparent)]
    Priors(#[from] PriorError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Checksums of the artifact files, written by the trainer and verified at
/// load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub created_ts: i64,
    /// file name → sha256 hex digest
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(path: &Path) -> Result<String, std::io::Error> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

impl Manifest {
    /// Hashes every artifact file in `dir` into a fresh manifest.
    pub fn for_dir(dir: &Path, created_ts: i64) -> Result<Self, EngineError> {
        let mut artifacts = BTreeMap::new();
        for name in ARTIFACT_FILES {
            let path = dir.join(name);
            if !path.exists() {
                return Err(EngineError::MissingArtifact(name.to_string()));
            }
            artifacts.insert(name.to_string(), sha256_hex(&path)?);
        }
        Ok(Self {
            created_ts,
            artifacts,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), EngineError> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| EngineError::Manifest(e.to_string()))?;
        let mut file = std::fs::File::create(dir.join(MANIFEST_FILE))?;
        file.write_all(body.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EngineError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(EngineError::MissingArtifact(MANIFEST_FILE.to_string()));
        }
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| EngineError::Manifest(e.to_string()))
    }

    /// Recomputes every checksum and compares against the manifest.
    pub fn verify(&self, dir: &Path) -> Result<(), EngineError> {
        for name in ARTIFACT_FILES {
            let expected = self
                .artifacts
                .get(name)
                .ok_or_else(|| EngineError::Manifest(format!("no entry for {name}")))?;
            let path = dir.join(name);
            if !path.exists() {
                return Err(EngineError::MissingArtifact(name.to_string()));
            }
            let actual = sha256_hex(&path)?;
            if &actual != expected {
                return Err(EngineError::ChecksumMismatch {
                    file: name.to_string(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// user → category → purchase count.
pub type EtaTable = HashMap<UserId, HashMap<CategoryId, u64>>;

#[derive(Debug, Serialize, Deserialize)]
struct EtaRecord {
    user: UserId,
    category: CategoryId,
    eta: u64,
}

/// Writes the purchase-count table as sorted JSONL so identical tables
/// produce identical bytes.
pub fn write_eta_jsonl(eta: &EtaTable, path: &Path) -> Result<(), EngineError> {
    let mut sorted: Vec<(&UserId, &CategoryId, u64)> = eta
        .iter()
        .flat_map(|(u, per_cat)| per_cat.iter().map(move |(c, &n)| (u, c, n)))
        .collect();
    sorted.sort();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (user, category, eta) in sorted {
        let record = EtaRecord {
            user: user.clone(),
            category: category.clone(),
            eta,
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| EngineError::Manifest(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_eta_jsonl(path: &Path) -> Result<EtaTable, EngineError> {
    let file = std::fs::File::open(path)?;
    let mut eta: EtaTable = HashMap::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EtaRecord = serde_json::from_str(&line)
            .map_err(|e| EngineError::Manifest(format!("eta line {}: {e}", idx + 1)))?;
        eta.entry(record.user)
            .or_default()
            .insert(record.category, record.eta);
    }
    Ok(eta)
}

/// Everything a model directory holds, loaded and checksum-verified.
pub struct ModelArtifacts {
    pub item_model: EmbeddingTable,
    pub cat_model: EmbeddingTable,
    pub eta: EtaTable,
    pub priors: PriorStore,
    pub catalog: CategoryMap,
    pub manifest: Manifest,
}

impl ModelArtifacts {
    /// Loads and validates a model directory. Fails on any missing file or
    /// checksum mismatch before reading artifact contents.
    pub fn load(dir: &Path, initial_prior: BetaPrior) -> Result<Self, EngineError> {
        let manifest = Manifest::load(dir)?;
        manifest.verify(dir)?;
        let item_model = EmbeddingTable::read_from(&dir.join("user_item.emb"))?;
        let cat_model = EmbeddingTable::read_from(&dir.join("user_cat.emb"))?;
        let eta = load_eta_jsonl(&dir.join("eta_uc.jsonl"))?;
        let priors = PriorStore::load_from(&dir.join("priors.jsonl"), initial_prior)?;
        let catalog = CategoryMap::load_jsonl(&dir.join("catalog.jsonl"))?;
        Ok(Self {
            item_model,
            cat_model,
            eta,
            priors,
            catalog,
            manifest,
        })
    }
}

/// The result of ranking one request.
pub struct RankOutcome {
    /// Score breakdown for every candidate, in request order.
    pub scores: Vec<CarouselScore>,
    /// Top-Z assignment, zone 1 first.
    pub ranking: ZoneRanking,
    /// Time spent scoring and sorting only.
    pub compute_micros: u64,
}

/// Immutable model state plus the live prior store: everything one ranking
/// request reads. Safe to share across threads; the prior store handles its
/// own per-key synchronization.
pub struct Engine {
    item_model: EmbeddingTable,
    discovery: DiscoveryInputs,
    catalog: CategoryMap,
    priors: PriorStore,
    scoring: ScoringConfig,
}

impl Engine {
    pub fn new(artifacts: ModelArtifacts, scoring: ScoringConfig) -> Result<Self, EngineError> {
        Self::from_parts(
            artifacts.item_model,
            artifacts.cat_model,
            artifacts.eta,
            artifacts.priors,
            artifacts.catalog,
            scoring,
        )
    }

    /// Builds an engine from already-loaded pieces; used by in-process
    /// harnesses that never touch a model directory.
    pub fn from_parts(
        item_model: EmbeddingTable,
        cat_model: EmbeddingTable,
        eta: EtaTable,
        priors: PriorStore,
        catalog: CategoryMap,
        scoring: ScoringConfig,
    ) -> Result<Self, EngineError> {
        scoring.validate()?;
        Ok(Self {
            item_model,
            discovery: DiscoveryInputs::new(cat_model, eta),
            catalog,
            priors,
            scoring,
        })
    }

    pub fn priors(&self) -> &PriorStore {
        &self.priors
    }

    pub fn catalog(&self) -> &CategoryMap {
        &self.catalog
    }

    pub fn scoring_config(&self) -> &ScoringConfig {
        &self.scoring
    }

    /// Scores and sorts the candidates for one user. `compute_micros` times
    /// exactly this scoring + sort work, nothing else.
    pub fn rank(
        &self,
        user: &UserId,
        candidates: &[Carousel],
        zones: usize,
    ) -> Result<RankOutcome, EngineError> {
        let stores = ScoringStores {
            item_model: &self.item_model,
            discovery: &self.discovery,
            priors: &self.priors,
            catalog: &self.catalog,
        };
        let start = Instant::now();
        let scores = score_carousels(user, candidates, &stores, &self.scoring)?;
        let ranking = rank_carousels(&scores, zones, &self.scoring)?;
        let compute_micros = start.elapsed().as_micros() as u64;
        Ok(RankOutcome {
            scores,
            ranking,
            compute_micros,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        for name in ARTIFACT_FILES {
            std::fs::write(dir.path().join(name), format!("payload {name}")).unwrap();
        }
        let manifest = Manifest::for_dir(dir.path(), 7).unwrap();
        manifest.save(dir.path()).unwrap();

        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        loaded.verify(dir.path()).unwrap();

        std::fs::write(dir.path().join("eta_uc.jsonl"), "tampered").unwrap();
        assert!(matches!(
            loaded.verify(dir.path()),
            Err(EngineError::ChecksumMismatch { ref file, .. }) if file == "eta_uc.jsonl"
        ));
        std::fs::write(dir.path().join("eta_uc.jsonl"), "payload eta_uc.jsonl").unwrap();

        std::fs::remove_file(dir.path().join("priors.jsonl")).unwrap();
        assert!(matches!(
            loaded.verify(dir.path()),
            Err(EngineError::MissingArtifact(ref f)) if f == "priors.jsonl"
        ));
    }

    #[test]
    fn eta_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eta.jsonl");
        let mut eta: EtaTable = HashMap::new();
        eta.entry(UserId::new("u1").unwrap()).or_default().insert(
            CategoryId::new("dairy").unwrap(),
            4,
        );
        eta.entry(UserId::new("u2").unwrap()).or_default().insert(
            CategoryId::new("bakery").unwrap(),
            1,
        );
        write_eta_jsonl(&eta, &path).unwrap();
        let loaded = load_eta_jsonl(&path).unwrap();
        assert_eq!(loaded, eta);
    }
}
