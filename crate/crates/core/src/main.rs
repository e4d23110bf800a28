use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use bidsim::config::ExperimentConfig;
use bidsim::metrics::MetricsReport;
use bidsim::pipeline;

#[derive(Parser)]
#[command(
    name = "bidsim",
    about = "Clustered multi-agent bidding simulator for second-price ad auctions",
    version
)]
struct Cli {
    /// Flat key/value config file.
    #[arg(long, global = true, default_value = "bidsim.toml")]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train log (and test log when configured).
    Generate,
    /// Replay the train log with manual bids and unlimited budgets;
    /// report the total market cost used as the budget reference.
    Calibrate,
    /// Train agents on the train log, checkpoint the best episode and
    /// evaluate it on the test log.
    Train,
    /// Evaluate saved checkpoints on the test log.
    Evaluate,
    /// Full training per cluster count; reports revenue mean and std.
    SweepClusters,
    /// Coordinated training per budget fraction next to the manual
    /// baseline at the same budget.
    SweepBudget,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&cli.config)
        .with_context(|| format!("reading config {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.worker_count = workers;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.display().to_string();
    }
    Ok(cfg)
}

fn print_report(label: &str, report: &MetricsReport) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    println!("{label}:");
    for (i, c) in report.per_cluster.iter().enumerate() {
        println!(
            "  cluster {i}: revenue {:.2} cost {:.2} roi {} cpa {} spend {:.1}%",
            c.revenue,
            c.cost,
            fmt(c.roi),
            fmt(c.cpa),
            100.0 * c.spend_fraction
        );
    }
    let t = &report.total;
    println!(
        "  total    : revenue {:.2} cost {:.2} roi {} cpa {} spend {:.1}%",
        t.revenue,
        t.cost,
        fmt(t.roi),
        fmt(t.cpa),
        100.0 * t.spend_fraction
    );
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate => {
            let (train, test) = pipeline::generate_logs(&cfg)?;
            println!("wrote {} ({train} requests, seed {})", cfg.train_log, cfg.seed);
            if !cfg.test_log.is_empty() {
                println!(
                    "wrote {} ({test} requests, traffic seed {})",
                    cfg.test_log,
                    cfg.seed + cfg.gen_test_seed_offset
                );
            }
        }
        Command::Calibrate => {
            let calibration = pipeline::run_calibrate(&cfg)?;
            println!(
                "total market cost (manual bids, unlimited budgets): {:.4}",
                calibration.c_t()
            );
            println!("total market revenue: {:.4}", calibration.total_revenue);
            println!(
                "per-merchant costs written to {}",
                cfg.output_path("calibration.csv").display()
            );
        }
        Command::Train => {
            let summary = pipeline::run_train(&cfg)?;
            println!(
                "trained {} episodes (converged: {}), best training revenue {:.2} at episode {}",
                summary.episodes_run,
                summary.converged,
                summary.best_training_revenue,
                summary.best_episode
            );
            println!(
                "curves, checkpoints and metrics written to {}",
                cfg.output_dir
            );
            print_report(&format!("evaluation ({})", cfg.algorithm), &summary.eval);
        }
        Command::Evaluate => {
            let summary = pipeline::run_evaluate(&cfg)?;
            print_report(&format!("evaluation ({})", cfg.algorithm), &summary.report);
            for (t, (rev, cost)) in summary.per_step.iter().enumerate() {
                let actions: Vec<String> = summary.mean_actions[t]
                    .iter()
                    .map(|a| format!("{a:+.2}"))
                    .collect();
                println!(
                    "  step {t}: revenue {rev:.2} cost {cost:.2} mean action [{}]",
                    actions.join(", ")
                );
            }
        }
        Command::SweepClusters => {
            let rows = pipeline::run_sweep_clusters(&cfg)?;
            for r in &rows {
                println!(
                    "clusters {:>3}: revenue {:.2} +/- {:.2} over {} seeds",
                    r.n_clusters, r.revenue_mean, r.revenue_std, r.seeds
                );
            }
            println!("sweep written to {}", cfg.output_path("sweep_clusters.csv").display());
        }
        Command::SweepBudget => {
            let rows = pipeline::run_sweep_budget(&cfg)?;
            for r in &rows {
                println!(
                    "budget {:.3}: manual {:.2}, coordinated {:.2} +/- {:.2}",
                    r.fraction, r.manual_revenue, r.learned_mean, r.learned_std
                );
            }
            println!("sweep written to {}", cfg.output_path("sweep_budget.csv").display());
        }
    }
    Ok(())
}
