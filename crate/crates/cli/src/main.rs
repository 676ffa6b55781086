//! `grail` — command-line entry point binding the engine into reproducible
//! experiment runs. Errors exit non-zero with a single machine-parsable
//! JSON line on stderr. Log level comes from the GRAIL_LOG environment
//! variable.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "grail", version, about = "Gap-aware dense retrieval engine")]
struct Cli {
    /// Flat TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Search/eval worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory for reports and artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for all randomness in the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, normalize, and persist a corpus from vector + metadata files.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Keep raw row norms instead of L2-normalizing.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Generate the seeded synthetic benchmark with planted anchoring.
    Synth {
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        spread: Option<f64>,
        #[arg(long)]
        compose_tasks: Option<usize>,
        #[arg(long)]
        aggregation_tasks: Option<usize>,
        #[arg(long)]
        anchoring: Option<f64>,
        #[arg(long)]
        distractors: Option<usize>,
    },
    /// Train the gap-aware steering parameters end-to-end.
    TrainSteer {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Comma-separated question types to train on (default: all).
        #[arg(long)]
        qtypes: Option<String>,
        /// Disable the adaptive mixing module (ablation).
        #[arg(long)]
        no_mix: bool,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        hard_negatives: Option<usize>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Train per-modality alignment projections.
    TrainAlign {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// centroid | query_evidence | external_anchor
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Train the binary query-type probe and freeze it.
    TrainRouter {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Route-label JSONL ({"qid", "label"}).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evidence set completion: steer from the gold context, report ranks.
    Complete {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        router: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        proj: Option<PathBuf>,
        /// query_only | additive | gap | hybrid
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Sequential pool construction under a step schedule.
    BuildPool {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        router: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        proj: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        /// Slice sizes, e.g. 3+2+3+2 or 2*5 or [3+2]*2.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Completion and pool evaluation across several modes in one run.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        router: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        proj: Option<PathBuf>,
        /// Comma-separated modes to compare.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Verify analytic gradients against finite differences.
    GradCheck {
        /// Central-difference perturbation.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("GRAIL_LOG")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file_cfg = config::FileConfig::load(cli.config.as_deref())?;
    let workers = cli.workers.or(file_cfg.workers);
    if let Some(w) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| anyhow::anyhow!("worker pool: {e}"))?;
    }
    let ctx = commands::Ctx {
        file: file_cfg,
        out_flag: cli.out,
        seed_flag: cli.seed,
        workers,
    };
    match cli.command {
        Command::Ingest { corpus, meta, no_normalize } => {
            commands::ingest(&ctx, corpus, meta, no_normalize)
        }
        Command::Synth {
            dim,
            clusters,
            spread,
            compose_tasks,
            aggregation_tasks,
            anchoring,
            distractors,
        } => commands::synth(
            &ctx,
            dim,
            clusters,
            spread,
            compose_tasks,
            aggregation_tasks,
            anchoring,
            distractors,
        ),
        Command::TrainSteer {
            corpus,
            meta,
            tasks,
            qtypes,
            no_mix,
            batch_size,
            epochs,
            lr,
            tau,
            hard_negatives,
            weight_decay,
            hidden,
        } => {
            let hp = commands::TrainFlags {
                batch_size,
                epochs,
                lr,
                tau,
                hard_negatives,
                weight_decay,
                hidden,
            };
            commands::train_steer(&ctx, corpus, meta, tasks, qtypes, no_mix, hp)
        }
        Command::TrainAlign { corpus, meta, tasks, strategy, batch_size, epochs, lr, tau } => {
            let hp = commands::TrainFlags {
                batch_size,
                epochs,
                lr,
                tau,
                hard_negatives: None,
                weight_decay: None,
                hidden: None,
            };
            commands::train_align(&ctx, corpus, meta, tasks, strategy, hp)
        }
        Command::TrainRouter { corpus, meta, tasks, labels, epochs, lr } => {
            commands::train_router_cmd(&ctx, corpus, meta, tasks, labels, epochs, lr)
        }
        Command::Complete { corpus, meta, tasks, params, router, labels, proj, mode, k } => {
            commands::complete(&ctx, corpus, meta, tasks, params, router, labels, proj, mode, k)
        }
        Command::BuildPool { corpus, meta, tasks, params, router, labels, proj, mode, schedule } => {
            commands::build_pool_cmd(
                &ctx, corpus, meta, tasks, params, router, labels, proj, mode, schedule,
            )
        }
        Command::Eval { corpus, meta, tasks, params, router, labels, proj, modes, schedule, k } => {
            commands::eval(
                &ctx, corpus, meta, tasks, params, router, labels, proj, modes, schedule, k,
            )
        }
        Command::GradCheck { eps } => commands::grad_check(&ctx, eps),
    }
}
