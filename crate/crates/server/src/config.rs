//! Serving configuration with flags > environment > config file precedence.

use std::path::PathBuf;
use std::time::Duration;

use serde::Deserialize;

use crank_core::ingestion::FeedbackMode;
use crank_core::priors::BetaPrior;
use crank_core::scoring::{LogBase, ScoringConfig};

pub const ENV_MODEL_DIR: &str = "CRANK_MODEL_DIR";
pub const ENV_PORT: &str = "CRANK_PORT";
pub const ENV_W: &str = "CRANK_W";

/// Fully resolved serving configuration.
#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub model_dir: PathBuf,
    /// Where the service writes its event log, checkpoint, and prior
    /// snapshots; defaults to the model directory.
    pub data_dir: PathBuf,
    pub port: u16,
    pub scoring: ScoringConfig,
    pub update_interval: Duration,
    pub session_gap_s: i64,
    pub snapshot_interval: Duration,
    pub feedback_mode: FeedbackMode,
    pub initial_prior: BetaPrior,
}

impl ServeConfig {
    pub fn new(model_dir: PathBuf) -> Self {
        Self {
            data_dir: model_dir.clone(),
            model_dir,
            port: 8080,
            scoring: ScoringConfig::default(),
            update_interval: Duration::from_secs(10),
            session_gap_s: 1800,
            snapshot_interval: Duration::from_secs(60),
            feedback_mode: FeedbackMode::Provisional,
            initial_prior: BetaPrior::UNIFORM,
        }
    }

    pub fn event_log_path(&self) -> PathBuf {
        self.data_dir.join("events.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.data_dir.join("events.checkpoint.json")
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.data_dir.join("priors_snapshot.jsonl")
    }
}

/// Optional values parsed from one configuration source (CLI flags, the
/// environment, or a TOML file); later sources fill holes left by earlier
/// ones.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub model_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub port: Option<u16>,
    pub w: Option<f64>,
    pub log_base: Option<String>,
    pub normalize: Option<bool>,
    pub update_interval_s: Option<u64>,
    pub session_gap_s: Option<i64>,
    pub snapshot_interval_s: Option<u64>,
    pub raw_counts: Option<bool>,
    pub fold_on_close: Option<bool>,
    pub prior_a0: Option<f64>,
    pub prior_b0: Option<f64>,
}

impl PartialConfig {
    /// Reads the three documented environment variables.
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var(ENV_MODEL_DIR) {
            cfg.model_dir = Some(PathBuf::from(v));
        }
        if let Ok(v) = std::env::var(ENV_PORT) {
            cfg.port = Some(v.parse().map_err(|_| format!("bad {ENV_PORT}: {v:?}"))?);
        }
        if let Ok(v) = std::env::var(ENV_W) {
            cfg.w = Some(v.parse().map_err(|_| format!("bad {ENV_W}: {v:?}"))?);
        }
        Ok(cfg)
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("config file {}: {e}", path.display()))?;
        toml::from_str(&raw).map_err(|e| format!("config file {}: {e}", path.display()))
    }

    /// Fills this source's holes from the next-lower-precedence source.
    pub fn or(self, fallback: Self) -> Self {
        Self {
            model_dir: self.model_dir.or(fallback.model_dir),
            data_dir: self.data_dir.or(fallback.data_dir),
            port: self.port.or(fallback.port),
            w: self.w.or(fallback.w),
            log_base: self.log_base.or(fallback.log_base),
            normalize: self.normalize.or(fallback.normalize),
            update_interval_s: self.update_interval_s.or(fallback.update_interval_s),
            session_gap_s: self.session_gap_s.or(fallback.session_gap_s),
            snapshot_interval_s: self.snapshot_interval_s.or(fallback.snapshot_interval_s),
            raw_counts: self.raw_counts.or(fallback.raw_counts),
            fold_on_close: self.fold_on_close.or(fallback.fold_on_close),
            prior_a0: self.prior_a0.or(fallback.prior_a0),
            prior_b0: self.prior_b0.or(fallback.prior_b0),
        }
    }

    /// Validates and applies defaults for everything left unset.
    pub fn resolve(self) -> Result<ServeConfig, String> {
        let model_dir = self.model_dir.ok_or("model_dir is required")?;
        let mut cfg = ServeConfig::new(model_dir);
        if let Some(dir) = self.data_dir {
            cfg.data_dir = dir;
        }
        if let Some(port) = self.port {
            cfg.port = port;
        }
        if let Some(w) = self.w {
            cfg.scoring.w = w;
        }
        if let Some(base) = self.log_base {
            cfg.scoring.log_base = base.parse::<LogBase>()?;
        }
        if let Some(normalize) = self.normalize {
            cfg.scoring.normalize = normalize;
        }
        cfg.scoring.validate().map_err(|e| e.to_string())?;
        if let Some(s) = self.update_interval_s {
            cfg.update_interval = Duration::from_secs(s.max(1));
        }
        if let Some(s) = self.session_gap_s {
            if s <= 0 {
                return Err(format!("session_gap_s must be positive, got {s}"));
            }
            cfg.session_gap_s = s;
        }
        if let Some(s) = self.snapshot_interval_s {
            cfg.snapshot_interval = Duration::from_secs(s.max(1));
        }
        cfg.feedback_mode = match (self.raw_counts.unwrap_or(false), self.fold_on_close.unwrap_or(false)) {
            (true, _) => FeedbackMode::Raw,
            (false, true) => FeedbackMode::OnClose,
            (false, false) => FeedbackMode::Provisional,
        };
        let a0 = self.prior_a0.unwrap_or(1.0);
        let b0 = self.prior_b0.unwrap_or(1.0);
        cfg.initial_prior = BetaPrior::new(a0, b0).map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_env_file() {
        let flags = PartialConfig {
            port: Some(9000),
            ..PartialConfig::default()
        };
        let env = PartialConfig {
            port: Some(9001),
            w: Some(0.4),
            ..PartialConfig::default()
        };
        let file = PartialConfig {
            model_dir: Some(PathBuf::from("/models")),
            port: Some(9002),
            w: Some(0.2),
            log_base: Some("2".into()),
            ..PartialConfig::default()
        };
        let cfg = flags.or(env).or(file).resolve().unwrap();
        assert_eq!(cfg.port, 9000); // flag wins
        assert_eq!(cfg.scoring.w, 0.4); // env beats file
        assert_eq!(cfg.scoring.log_base, LogBase::TWO); // file fills the rest
        assert_eq!(cfg.model_dir, PathBuf::from("/models"));
        assert_eq!(cfg.data_dir, PathBuf::from("/models"));
    }

    #[test]
    fn resolve_validates() {
        let missing = PartialConfig::default();
        assert!(missing.resolve().is_err());

        let bad_w = PartialConfig {
            model_dir: Some(PathBuf::from("/m")),
            w: Some(1.5),
            ..PartialConfig::default()
        };
        assert!(bad_w.resolve().is_err());

        let bad_base = PartialConfig {
            model_dir: Some(PathBuf::from("/m")),
            log_base: Some("1".into()),
            ..PartialConfig::default()
        };
        assert!(bad_base.resolve().is_err());
    }

    #[test]
    fn toml_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("crank.toml");
        std::fs::write(
            &path,
            "model_dir = \"/models\"\nport = 8123\nw = 0.6\nlog_base = \"10\"\nsession_gap_s = 600\n",
        )
        .unwrap();
        let cfg = PartialConfig::from_toml_file(&path)
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.port, 8123);
        assert_eq!(cfg.scoring.w, 0.6);
        assert_eq!(cfg.session_gap_s, 600);
    }
}
