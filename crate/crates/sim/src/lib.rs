//! Desk-scale experimental rig for the carousel ranking engine: generate a
//! synthetic world with ground-truth preferences, replay shopping sessions
//! against static vs dynamic policies, compare the engagement and discovery
//! metrics, and benchmark scoring latency.

pub mod bench;
pub mod simulate;
pub mod world;

use thiserror::Error;

pub use bench::{bench_latency, BenchParams, LatencyReport};
pub use simulate::{compare, simulate, LiftTable, Policy, SimOptions, SimReport};
pub use world::{generate_world, SyntheticWorld, WorldConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("degenerate world config: {0}")]
    DegenerateConfig(String),
    #[error("reports are not comparable: {0}")]
    MismatchedReports(String),
    #[error("insufficient samples: got {got}, need {need}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("bad report file: {0}")]
    BadReport(String),
    #[error(transparent)]
    Engine(#[from] crank_core::engine::EngineError),
    #[error(transparent)]
    Factorization(#[from] crank_core::factorization::FactorizationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
