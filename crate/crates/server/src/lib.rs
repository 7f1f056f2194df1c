//! HTTP serving layer: loads a trained model directory behind a readiness
//! gate, ranks candidate carousels per request, ingests interaction events
//! into the append-only log, and runs the feedback loop that folds those
//! events back into the live priors.

pub mod config;
pub mod routes;
pub mod state;

pub use config::{PartialConfig, ServeConfig};
pub use routes::build_router;
pub use state::{load_state, run_background_tasks, AppState, LoadedState};

/// Binds the listener, installs the verified model state, starts the
/// feedback and snapshot tasks, and serves until shutdown.
pub async fn run_server(config: ServeConfig) -> Result<(), Box<dyn std::error::Error>> {
    let state = AppState::new();
    let router = build_router(state.clone());
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, model_dir = %config.model_dir.display(), "listening");

    // load off the accept path: health reports "loading" and rank returns
    // 503 until every artifact is checksum-verified
    let loader_state = state.clone();
    tokio::spawn(async move {
        let loaded = tokio::task::spawn_blocking(move || load_state(config))
            .await
            .expect("loader task panicked");
        match loaded {
            Ok((loaded, applier)) => {
                let installed = loader_state.install(loaded);
                tracing::info!(
                    users = installed.info.users,
                    items = installed.info.items,
                    categories = installed.info.categories,
                    prior_keys = installed.info.prior_keys,
                    "model artifacts loaded"
                );
                tokio::spawn(run_background_tasks(installed, applier));
            }
            Err(e) => {
                tracing::error!(error = %e, "failed to load model artifacts");
            }
        }
    });

    axum::serve(listener, router).await?;
    Ok(())
}
