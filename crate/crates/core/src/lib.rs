//! Core engine for real-time carousel ranking.
//!
//! The pipeline: an offline trainer factorizes user-item and user-category
//! transaction counts into embeddings, an event stream feeds Beta priors over
//! user-carousel engagement, and the scorer combines prior-weighted item
//! affinity with a category-discovery term under positional discounting to
//! assign carousels to page zones.
//!
//! Modules map onto the pipeline stages:
//! - [`domain`]: identifiers, carousels, interaction events, the item catalog.
//! - [`priors`]: Beta(a, b) engagement priors with online posterior updates.
//! - [`factorization`]: implicit-feedback ALS over transaction counts.
//! - [`scoring`]: affinity/discovery scores and the score-and-sort assignment.
//! - [`ingestion`]: append-only event log, sessionization, feedback applier.
//! - [`engine`]: loaded model artifacts bundled into a ready-to-rank engine.
//! - [`pipeline`]: the offline training entrypoint that writes artifacts.

pub mod domain;
pub mod engine;
pub mod factorization;
pub mod ingestion;
pub mod pipeline;
pub mod priors;
pub mod scoring;
