//! Config-driven end-to-end runs shared by the command-line interface
//! and the Python bindings: each step reads its inputs and writes its
//! artifacts under the configured output directory.

use std::io::Write;
use std::path::Path;

use crate::agents::{load_agent, save_agent};
use crate::config::ExperimentConfig;
use crate::dataio::{generate_synthetic_log_with_market, read_log, write_log};
use crate::metrics::{compute_metrics, write_metrics_csv, MetricsReport};
use crate::simulator::{
    calibrate, evaluate, run_training, sweep_budget_ratio, sweep_cluster_count,
    write_learning_curves_csv, BudgetSweepRow, Calibration, ClusterSweepRow, Simulation,
};
use crate::Result;

fn eval_log_path(cfg: &ExperimentConfig) -> &str {
    if cfg.test_log.is_empty() {
        &cfg.train_log
    } else {
        &cfg.test_log
    }
}

fn ensure_output_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(())
}

/// Writes the train log (and, when configured, a test log over the same
/// market population with shifted traffic). Returns the request counts.
pub fn generate_logs(cfg: &ExperimentConfig) -> Result<(usize, usize)> {
    let gen = cfg.generator_config();
    let train = generate_synthetic_log_with_market(&gen, cfg.seed, cfg.seed)?;
    write_log(Path::new(&cfg.train_log), &train)?;
    let mut test_len = 0;
    if !cfg.test_log.is_empty() {
        let test = generate_synthetic_log_with_market(
            &gen,
            cfg.seed,
            cfg.seed + cfg.gen_test_seed_offset,
        )?;
        write_log(Path::new(&cfg.test_log), &test)?;
        test_len = test.len();
    }
    Ok((train.len(), test_len))
}

/// Unlimited-budget manual replay of the train log; writes the
/// per-merchant cost table used as the budget reference.
pub fn run_calibrate(cfg: &ExperimentConfig) -> Result<Calibration> {
    ensure_output_dir(cfg)?;
    let records = read_log(Path::new(&cfg.train_log))?;
    let calibration = calibrate(&records, cfg.slots, cfg.reserve_price)?;
    let path = cfg.output_path("calibration.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(w, "merchant_id,unlimited_cost")?;
    for (id, cost) in calibration.per_merchant_cost.iter().enumerate() {
        writeln!(w, "{id},{cost:.6}")?;
    }
    w.flush()?;
    Ok(calibration)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub episodes_run: usize,
    pub converged: bool,
    pub best_episode: usize,
    pub best_training_revenue: f64,
    pub eval: MetricsReport,
}

/// Full training pipeline: cluster, train, checkpoint the best episode,
/// evaluate it on the held-out log, and write curves plus metrics.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    ensure_output_dir(cfg)?;
    let spec = cfg.experiment_spec()?;
    let train_records = read_log(Path::new(&cfg.train_log))?;
    let sim_train = Simulation::prepare_full(
        train_records,
        spec.n_merchant_clusters,
        spec.n_consumer_clusters,
        spec.episode.clone(),
    )?;
    sim_train.assignment.write_tables(
        &cfg.output_path("merchant_clusters.tsv"),
        &cfg.output_path("consumer_clusters.tsv"),
    )?;

    let mut agents = spec.build_agents(&sim_train.builder, spec.episode.seed)?;
    let outcome = run_training(&sim_train, &mut agents)?;
    write_learning_curves_csv(
        &cfg.output_path("learning_curves.csv"),
        &outcome.run,
        agents.len(),
    )?;

    let mut best = outcome.best_agents;
    if cfg.write_checkpoints {
        let ckpt_dir = cfg.output_path("checkpoints");
        std::fs::create_dir_all(&ckpt_dir)?;
        for agent in &best {
            save_agent(
                agent,
                &sim_train.builder,
                &ckpt_dir.join(format!("agent_{}.ckpt", agent.index)),
            )?;
        }
    }

    let eval_records = read_log(Path::new(eval_log_path(cfg)))?;
    let sim_eval = Simulation::prepare(
        eval_records,
        sim_train.assignment.clone(),
        sim_train.builder.clone(),
        spec.episode.clone(),
        None,
    )?;
    let eval = evaluate(&sim_eval, &mut best)?;
    let report = compute_metrics(&eval.result);
    write_metrics_csv(
        &cfg.output_path("metrics.csv"),
        &[(cfg.algorithm.clone(), report.clone())],
    )?;
    Ok(TrainSummary {
        episodes_run: outcome.run.episodes_run,
        converged: outcome.run.converged,
        best_episode: outcome.run.best_episode,
        best_training_revenue: outcome.run.best_revenue,
        eval: report,
    })
}

/// Evaluation details beyond the metrics report.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: MetricsReport,
    /// (revenue, cost) per interval.
    pub per_step: Vec<(f64, f64)>,
    /// Mean action per agent per interval.
    pub mean_actions: Vec<Vec<f64>>,
}

fn eval_summary(report: MetricsReport, eval: &crate::simulator::EpisodeOutput) -> EvalSummary {
    EvalSummary {
        report,
        per_step: eval
            .result
            .per_step
            .iter()
            .map(|s| (s.revenue, s.cost))
            .collect(),
        mean_actions: eval
            .tuples
            .iter()
            .map(|t| {
                t.actions
                    .iter()
                    .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
                    .collect()
            })
            .collect(),
    }
}

/// Evaluates previously written checkpoints on the held-out log.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    ensure_output_dir(cfg)?;
    let spec = cfg.experiment_spec()?;
    let train_records = read_log(Path::new(&cfg.train_log))?;
    let sim_train = Simulation::prepare_full(
        train_records,
        spec.n_merchant_clusters,
        spec.n_consumer_clusters,
        spec.episode.clone(),
    )?;
    let ckpt_dir = cfg.output_path("checkpoints");
    let mut agents = Vec::new();
    for i in 0..spec.n_merchant_clusters {
        agents.push(load_agent(
            &ckpt_dir.join(format!("agent_{i}.ckpt")),
            &sim_train.builder,
        )?);
    }
    let eval_records = read_log(Path::new(eval_log_path(cfg)))?;
    let sim_eval = Simulation::prepare(
        eval_records,
        sim_train.assignment.clone(),
        sim_train.builder.clone(),
        spec.episode.clone(),
        None,
    )?;
    let eval = evaluate(&sim_eval, &mut agents)?;
    let report = compute_metrics(&eval.result);
    write_metrics_csv(
        &cfg.output_path("metrics.csv"),
        &[(cfg.algorithm.clone(), report.clone())],
    )?;
    Ok(eval_summary(report, &eval))
}

pub fn run_sweep_clusters(cfg: &ExperimentConfig) -> Result<Vec<ClusterSweepRow>> {
    ensure_output_dir(cfg)?;
    let spec = cfg.experiment_spec()?;
    let train = read_log(Path::new(&cfg.train_log))?;
    let test = read_log(Path::new(eval_log_path(cfg)))?;
    let rows = sweep_cluster_count(
        &train,
        &test,
        &cfg.cluster_sweep_counts()?,
        &spec,
        &cfg.sweep_seed_list()?,
    )?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(cfg.output_path("sweep_clusters.csv"))?);
    writeln!(w, "n_clusters,seeds,revenue_mean,revenue_std")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6}",
            r.n_clusters, r.seeds, r.revenue_mean, r.revenue_std
        )?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn run_sweep_budget(cfg: &ExperimentConfig) -> Result<Vec<BudgetSweepRow>> {
    ensure_output_dir(cfg)?;
    let spec = cfg.experiment_spec()?;
    let train = read_log(Path::new(&cfg.train_log))?;
    let test = read_log(Path::new(eval_log_path(cfg)))?;
    let rows = sweep_budget_ratio(
        &train,
        &test,
        &cfg.budget_sweep_fractions()?,
        &spec,
        &cfg.sweep_seed_list()?,
    )?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(cfg.output_path("sweep_budget.csv"))?);
    writeln!(w, "fraction,manual_revenue,learned_mean,learned_std")?;
    for r in &rows {
        writeln!(
            w,
            "{:.6},{:.6},{:.6},{:.6}",
            r.fraction, r.manual_revenue, r.learned_mean, r.learned_std
        )?;
    }
    w.flush()?;
    Ok(rows)
}
