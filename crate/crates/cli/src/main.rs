//! `crank`: train carousel-ranking models, serve them over HTTP, and run
//! the simulation harness.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crank_core::factorization::TrainConfig;
use crank_core::ingestion::{FeedbackMode, SessionRule};
use crank_core::pipeline::{run_training, TrainParams};
use crank_core::priors::BetaPrior;
use crank_core::scoring::LogBase;
use crank_server::PartialConfig;
use crank_sim::{
    bench_latency, compare, generate_world, simulate, BenchParams, Policy, SimOptions, SimReport,
    WorldConfig,
};

#[derive(Parser)]
#[command(name = "crank", version, about = "Real-time carousel ranking engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train embedding models and priors from an event log and catalog.
    Train(TrainArgs),
    /// Serve ranking and event ingestion over HTTP from a model directory.
    Serve(ServeArgs),
    /// Replay synthetic shopping sessions against a ranking policy.
    Simulate(SimulateArgs),
    /// Print the per-metric lift of one simulation report over another.
    Compare(CompareArgs),
    /// Benchmark ranking latency against an in-process engine.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Interaction event JSONL file.
    #[arg(long)]
    events: PathBuf,
    /// Item catalog JSONL file.
    #[arg(long)]
    catalog: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 15)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    reg: f64,
    #[arg(long, default_value_t = 40.0)]
    conf_alpha: f64,
    /// Trailing transaction window, in days before the newest event.
    #[arg(long, default_value_t = 365)]
    window_days: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Session gap for seeding priors from the historical log.
    #[arg(long, default_value_t = 1800)]
    session_gap_s: i64,
    /// Seed priors from raw event counts instead of per-session dedup.
    #[arg(long)]
    raw_counts: bool,
    /// Initial Beta prior pseudo-counts.
    #[arg(long, default_value_t = 1.0)]
    prior_a0: f64,
    #[arg(long, default_value_t = 1.0)]
    prior_b0: f64,
}

#[derive(Args)]
struct ServeArgs {
    /// Model directory produced by `crank train` (env: CRANK_MODEL_DIR).
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Where the event log, checkpoint, and snapshots live (default: model dir).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Listen port (env: CRANK_PORT).
    #[arg(long)]
    port: Option<u16>,
    /// Convex weight on the affinity term (env: CRANK_W).
    #[arg(long)]
    w: Option<f64>,
    /// Positional-discount log base: e, 2, 10, or any positive number != 1.
    #[arg(long)]
    log_base: Option<String>,
    /// Min-max normalize affinity and discovery per request before combining.
    #[arg(long)]
    normalize: bool,
    /// Seconds between feedback-applier passes over new events.
    #[arg(long)]
    update_interval_s: Option<u64>,
    #[arg(long)]
    session_gap_s: Option<i64>,
    /// Seconds between prior snapshots.
    #[arg(long)]
    snapshot_interval_s: Option<u64>,
    /// Fold raw event counts instead of per-session dedup.
    #[arg(long)]
    raw_counts: bool,
    /// Fold sessions only after their gap elapses instead of provisionally.
    #[arg(long)]
    fold_on_close: bool,
    #[arg(long)]
    prior_a0: Option<f64>,
    #[arg(long)]
    prior_b0: Option<f64>,
    /// Optional TOML config file; flags and environment take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 10_000)]
    sessions: usize,
    #[arg(long, default_value = "dynamic")]
    policy: Policy,
    #[arg(long, default_value_t = 0.7)]
    w: f64,
    #[arg(long, default_value = "e")]
    log_base: LogBase,
    /// Write the report JSON here (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    categories: usize,
    #[arg(long, default_value_t = 10)]
    carousels: usize,
    #[arg(long, default_value_t = 20)]
    items_per_carousel: usize,
    #[arg(long, default_value_t = 24)]
    items_per_category: usize,
    /// Bootstrap transaction rounds per user behind the trained engine.
    #[arg(long, default_value_t = 24)]
    history_rounds: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline report (for example the static policy).
    #[arg(long)]
    a: PathBuf,
    /// Treatment report.
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 20_000)]
    requests: usize,
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
    #[arg(long, default_value_t = 10)]
    candidates: usize,
    #[arg(long, default_value_t = 20)]
    items_per_carousel: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    warmup: usize,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();

    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::Serve(args) => serve(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Compare(args) => run_compare(args),
        Command::Bench(args) => bench(args),
    }
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let params = TrainParams {
        train: TrainConfig {
            dim: args.dim,
            iterations: args.iters,
            reg: args.reg,
            conf_alpha: args.conf_alpha,
            seed: args.seed,
        },
        window_days: args.window_days,
        session_rule: SessionRule::new(args.session_gap_s)?,
        feedback_mode: if args.raw_counts {
            FeedbackMode::Raw
        } else {
            FeedbackMode::Provisional
        },
        initial_prior: BetaPrior::new(args.prior_a0, args.prior_b0)?,
    };
    let summary = run_training(&args.events, &args.catalog, &args.out, &params)
        .context("training failed")?;
    println!(
        "trained {} users x {} items ({} categories), {} prior keys, {} events ({} skipped)",
        summary.users,
        summary.items,
        summary.categories,
        summary.prior_keys,
        summary.events_consumed,
        summary.events_skipped,
    );
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let flags = PartialConfig {
        model_dir: args.model_dir,
        data_dir: args.data_dir,
        port: args.port,
        w: args.w,
        log_base: args.log_base,
        normalize: args.normalize.then_some(true),
        update_interval_s: args.update_interval_s,
        session_gap_s: args.session_gap_s,
        snapshot_interval_s: args.snapshot_interval_s,
        raw_counts: args.raw_counts.then_some(true),
        fold_on_close: args.fold_on_close.then_some(true),
        prior_a0: args.prior_a0,
        prior_b0: args.prior_b0,
    };
    let env = PartialConfig::from_env().map_err(anyhow::Error::msg)?;
    let file = match &args.config {
        Some(path) => PartialConfig::from_toml_file(path).map_err(anyhow::Error::msg)?,
        None => PartialConfig::default(),
    };
    let config = flags
        .or(env)
        .or(file)
        .resolve()
        .map_err(anyhow::Error::msg)?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime
        .block_on(crank_server::run_server(config))
        .map_err(|e| anyhow::anyhow!(e.to_string()))
}

fn run_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let world_cfg = WorldConfig {
        users: args.users,
        categories: args.categories,
        items_per_category: args.items_per_category,
        carousels: args.carousels,
        items_per_carousel: args.items_per_carousel,
        history_rounds: args.history_rounds,
    };
    let world = generate_world(world_cfg, args.seed)?;
    let opts = SimOptions {
        n_sessions: args.sessions,
        seed: args.seed,
        w: args.w,
        log_base: args.log_base,
        ..SimOptions::default()
    };
    let report = simulate(&world, args.policy, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = args.out {
        report.save(&out)?;
        eprintln!("report written to {}", out.display());
    }
    Ok(())
}

fn run_compare(args: CompareArgs) -> anyhow::Result<()> {
    let a = SimReport::load(&args.a)?;
    let b = SimReport::load(&args.b)?;
    let table = compare(&a, &b)?;
    print!("{table}");
    Ok(())
}

fn bench(args: BenchArgs) -> anyhow::Result<()> {
    let params = BenchParams {
        requests: args.requests,
        concurrency: args.concurrency,
        candidates: args.candidates,
        items_per_carousel: args.items_per_carousel,
        dim: args.dim,
        warmup: args.warmup,
        ..BenchParams::default()
    };
    let report = bench_latency(&params)?;
    print!("{report}");
    Ok(())
}
