//! Episode orchestration: worker-pool auction processing within merge
//! intervals, state merging, action refresh, the training loop and
//! experiment sweeps.
//!
//! Workers parallelize the pure per-impression work (value ratios, bid
//! adjustment) over disjoint shards of the interval's requests; budget
//! checks and decrements then run serialized in log order, so results
//! are identical for any worker count. A racy mode that settles shards
//! concurrently against a locked ledger exists for stress testing only.

use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{
    mix_seed, update_agent_for_step, Agent, AgentConfig, Algorithm, InputBuilder, ReplayMemory,
};
use crate::clustering::{manual_replay_features, ClusterAssignment, ReplayFeatures};
use crate::dataio::AuctionLogRecord;
use crate::market::{
    rank_by_ecpm, settle_ranked, AuctionOutcome, BudgetLedger, CandidateAd, MerchantProfile,
    CURRENCY_EPS,
};
use crate::state::{
    snapshot_transition, ActionDistribution, GeneralInfoState, IntervalAccumulator, RewardConfig,
    Scaler, TransitionTuple,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Number of merge intervals per episode.
    pub steps_per_episode: usize,
    /// Simulated seconds per interval.
    pub interval_seconds: u64,
    pub episodes: usize,
    pub slots: usize,
    pub worker_count: usize,
    /// Per-merchant budget as a fraction of the merchant's manual-bid
    /// unlimited-budget spend; `f64::INFINITY` lifts budgets entirely.
    pub budget_fraction: f64,
    pub reward: RewardConfig,
    pub seed: u64,
    pub reserve_price: f64,
    /// Training stops once the best training revenue has not improved
    /// for this many episodes.
    pub convergence_window: usize,
    /// Settle shards concurrently against a locked ledger (order then
    /// depends on scheduling; excluded from deterministic runs).
    pub racy_workers: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            steps_per_episode: 3,
            interval_seconds: 3600,
            episodes: 300,
            slots: 3,
            worker_count: 1,
            budget_fraction: 1.0 / 3.0,
            reward: RewardConfig::SelfInterest,
            seed: 0,
            reserve_price: 0.0,
            convergence_window: 50,
            racy_workers: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_episode == 0 {
            return Err(Error::Config("steps_per_episode must be >= 1".into()));
        }
        if self.worker_count == 0 {
            return Err(Error::Config("worker_count must be >= 1".into()));
        }
        if !(self.budget_fraction > 0.0) && self.budget_fraction != 0.0 {
            return Err(Error::Config(format!(
                "budget_fraction {} must be >= 0",
                self.budget_fraction
            )));
        }
        Ok(())
    }
}

/// Episode totals for one agent cluster.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentTotals {
    pub revenue: f64,
    pub cost: f64,
    pub click: f64,
    pub budget: f64,
    /// Capped ledger spend (budget minus remaining).
    pub ledger_spent: f64,
}

impl AgentTotals {
    pub fn spend_fraction(&self) -> f64 {
        if self.budget > 0.0 && self.budget.is_finite() {
            self.ledger_spent / self.budget
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTotals {
    pub revenue: f64,
    pub cost: f64,
}

/// Violation counters; all remain zero on a correct run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InvariantTally {
    /// Per-click GSP price above the winner's own bid.
    pub price_above_bid: u64,
    /// Merchant spend beyond budget plus its single largest click cost.
    pub overspend_beyond_click: u64,
    /// A candidate with exhausted budget reached settlement.
    pub exhausted_bid: u64,
    /// Adjust ratio outside [-range, range].
    pub alpha_out_of_range: u64,
    /// Final bid outside [(1-range), (1+range)] x base bid.
    pub bid_out_of_bounds: u64,
}

impl InvariantTally {
    pub fn total(&self) -> u64 {
        self.price_above_bid
            + self.overspend_beyond_click
            + self.exhausted_bid
            + self.alpha_out_of_range
            + self.bid_out_of_bounds
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub per_agent: Vec<AgentTotals>,
    pub per_step: Vec<StepTotals>,
    pub violations: InvariantTally,
    pub auctions_settled: u64,
}

impl EpisodeResult {
    pub fn total_revenue(&self) -> f64 {
        self.per_agent.iter().map(|a| a.revenue).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.per_agent.iter().map(|a| a.cost).sum()
    }

    pub fn total_click(&self) -> f64 {
        self.per_agent.iter().map(|a| a.click).sum()
    }

    pub fn per_agent_revenue(&self) -> Vec<f64> {
        self.per_agent.iter().map(|a| a.revenue).collect()
    }
}

/// Everything from one episode: the result plus the transition records
/// in chain order and (when training) per-agent update averages.
#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub result: EpisodeResult,
    pub tuples: Vec<TransitionTuple>,
    /// Mean critic loss and actor gradient norm per agent over the
    /// episode's update calls; zero when no update ran.
    pub mean_critic_loss: Vec<f64>,
    pub mean_actor_grad_norm: Vec<f64>,
}

/// Manual-bid unlimited-budget calibration of a log.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub total_cost: f64,
    pub total_revenue: f64,
    pub per_merchant_cost: Vec<f64>,
}

impl Calibration {
    pub fn c_t(&self) -> f64 {
        self.total_cost
    }
}

/// Replays the log once with manual bids and unlimited budgets and
/// accumulates total expected cost (the budget reference) and revenue.
pub fn calibrate(records: &[AuctionLogRecord], slots: usize, reserve_price: f64) -> Result<Calibration> {
    let features = manual_replay_features(records, slots, reserve_price)?;
    Ok(Calibration {
        total_cost: features.total_cost,
        total_revenue: features.total_revenue,
        per_merchant_cost: features.merchant_cost,
    })
}

/// A prepared log plus clustering and calibration, ready to run episodes.
#[derive(Debug)]
pub struct Simulation {
    pub records: Vec<AuctionLogRecord>,
    pub assignment: ClusterAssignment,
    pub builder: InputBuilder,
    pub config: EpisodeConfig,
    pub calibration: Calibration,
    base_profiles: Vec<MerchantProfile>,
    /// Merchant cluster per id; unseen merchants fall into the last cluster.
    merchant_cluster_of: Vec<usize>,
    /// Consumer cluster per id; unseen consumers fall into the last cluster.
    consumer_cluster_of: Vec<usize>,
    pool: rayon::ThreadPool,
}

fn dense_cluster_table(
    table: &[usize],
    n_clusters: usize,
    needed: usize,
) -> Vec<usize> {
    let default = n_clusters - 1;
    let mut out = vec![default; needed.max(table.len())];
    for (id, &c) in table.iter().enumerate() {
        if c != usize::MAX {
            out[id] = c;
        }
    }
    out
}

impl Simulation {
    /// Builds clustering, features and calibration from the records
    /// themselves (the training-log path).
    pub fn prepare_full(
        records: Vec<AuctionLogRecord>,
        n_merchant_clusters: usize,
        n_consumer_clusters: usize,
        config: EpisodeConfig,
    ) -> Result<Self> {
        config.validate()?;
        let assignment = ClusterAssignment::build(
            &records,
            n_merchant_clusters,
            n_consumer_clusters,
            config.slots,
            config.reserve_price,
        )?;
        let features = manual_replay_features(&records, config.slots, config.reserve_price)?;
        let scaler = Scaler::new(features.total_cost, features.total_revenue);
        let builder = InputBuilder::new(
            n_merchant_clusters,
            n_consumer_clusters,
            scaler,
            &assignment.consumer_history,
        );
        Self::prepare(records, assignment, builder, config, Some(features))
    }

    /// Prepares a run over `records` reusing the clustering and feature
    /// space of a training log (the held-out evaluation path). Budgets
    /// are calibrated against `records` themselves.
    pub fn prepare(
        records: Vec<AuctionLogRecord>,
        assignment: ClusterAssignment,
        builder: InputBuilder,
        config: EpisodeConfig,
        features: Option<ReplayFeatures>,
    ) -> Result<Self> {
        config.validate()?;
        let features = match features {
            Some(f) => f,
            None => manual_replay_features(&records, config.slots, config.reserve_price)?,
        };
        let calibration = Calibration {
            total_cost: features.total_cost,
            total_revenue: features.total_revenue,
            per_merchant_cost: features.merchant_cost.clone(),
        };

        let n_merchants = features.merchant_cost.len();
        let mut base_bid = vec![0.0f64; n_merchants];
        let mut ppb = vec![0.0f64; n_merchants];
        let mut max_consumer = 0usize;
        for rec in &records {
            max_consumer = max_consumer.max(rec.consumer_id as usize + 1);
            for c in &rec.candidates {
                base_bid[c.merchant_id as usize] = c.base_bid;
                ppb[c.merchant_id as usize] = c.ppb;
            }
        }
        let base_profiles: Vec<MerchantProfile> = (0..n_merchants)
            .map(|id| {
                let budget = if config.budget_fraction.is_infinite() {
                    f64::INFINITY
                } else {
                    config.budget_fraction * calibration.per_merchant_cost[id]
                };
                MerchantProfile {
                    merchant_id: id as u32,
                    base_bid: if base_bid[id] > 0.0 { base_bid[id] } else { 1.0 },
                    ppb: ppb[id],
                    budget,
                    budget_remaining: budget,
                    cluster_id: 0,
                }
            })
            .collect();

        let merchant_cluster_of = dense_cluster_table(
            assignment.merchant_table(),
            assignment.n_merchant_clusters,
            n_merchants,
        );
        let consumer_cluster_of = dense_cluster_table(
            assignment.consumer_table(),
            assignment.n_consumer_clusters,
            max_consumer,
        );
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.worker_count)
            .build()
            .map_err(|e| Error::Worker(e.to_string()))?;
        Ok(Self {
            records,
            assignment,
            builder,
            config,
            calibration,
            base_profiles,
            merchant_cluster_of,
            consumer_cluster_of,
            pool,
        })
    }

    pub fn merchant_cluster(&self, id: u32) -> usize {
        self.merchant_cluster_of[id as usize]
    }

    pub fn consumer_cluster(&self, id: u64) -> usize {
        self.consumer_cluster_of
            .get(id as usize)
            .copied()
            .unwrap_or(self.builder.l - 1)
    }

    fn interval_bounds(&self, t: usize) -> (usize, usize) {
        let steps = self.config.steps_per_episode;
        let len = self.records.len();
        (t * len / steps, (t + 1) * len / steps)
    }
}

/// One auction after the parallel pure phase: cluster-resolved, bid-adjusted
/// candidates ready for serialized settlement.
struct PreparedAuction {
    consumer_cluster: usize,
    /// (merchant cluster, candidate with final bid)
    candidates: Vec<(usize, CandidateAd)>,
    alpha_violations: u64,
    bid_violations: u64,
}

fn prepare_auction(
    rec: &AuctionLogRecord,
    actions: &[Vec<f64>],
    range: f64,
    sim: &Simulation,
) -> PreparedAuction {
    let j = sim.consumer_cluster(rec.consumer_id);
    let mut alpha_violations = 0;
    let mut bid_violations = 0;
    let candidates = rec
        .candidates
        .iter()
        .map(|c| {
            let i = sim.merchant_cluster(c.merchant_id);
            let bratio = c.pcvr / c.pcvr_avg;
            let adj = crate::agents::compute_bid_adjustment(actions[i][j], bratio, c.base_bid, range);
            if adj.alpha.abs() > range + 1e-12 {
                alpha_violations += 1;
            }
            let lo = c.base_bid * (1.0 - range) - CURRENCY_EPS;
            let hi = c.base_bid * (1.0 + range) + CURRENCY_EPS;
            if adj.final_bid < lo || adj.final_bid > hi {
                bid_violations += 1;
            }
            (
                i,
                CandidateAd {
                    merchant_id: c.merchant_id,
                    pctr: c.pctr,
                    pcvr: c.pcvr,
                    pcvr_avg: c.pcvr_avg,
                    final_bid: adj.final_bid,
                },
            )
        })
        .collect();
    PreparedAuction {
        consumer_cluster: j,
        candidates,
        alpha_violations,
        bid_violations,
    }
}

/// Serialized settlement of one prepared auction against the ledger.
/// Returns the outcome; records executions, wins and violations.
#[allow(clippy::too_many_arguments)]
fn settle_prepared(
    pa: &PreparedAuction,
    slots: usize,
    reserve_price: f64,
    ledger: &mut BudgetLedger,
    cluster_of: &[usize],
    acc: &mut IntervalAccumulator,
    g: &mut GeneralInfoState,
    tally: &mut InvariantTally,
    merchant_cost: &mut [f64],
    merchant_max_click: &mut [f64],
) -> AuctionOutcome {
    let j = pa.consumer_cluster;
    let eligible: Vec<CandidateAd> = pa
        .candidates
        .iter()
        .filter(|(_, c)| c.pctr > 0.0 && ledger.has_budget(c.merchant_id))
        .map(|(i, c)| {
            acc.record_execution(*i, j);
            c.clone()
        })
        .collect();
    let ranked = rank_by_ecpm(eligible);
    for c in &ranked {
        if !ledger.has_budget(c.merchant_id) {
            tally.exhausted_bid += 1;
        }
    }
    let outcome = settle_ranked(&ranked, slots, reserve_price, ledger);
    for w in &outcome.winners {
        let i = cluster_of[w.merchant_id as usize];
        acc.record_win(i, w.expected_cost, w.expected_revenue, w.expected_click);
        g.accumulate(i, j, w.expected_cost, w.expected_revenue);
        let own_bid = ranked
            .iter()
            .find(|c| c.merchant_id == w.merchant_id)
            .map(|c| c.final_bid)
            .unwrap_or(f64::INFINITY);
        if w.expected_click > 0.0 {
            let per_click = w.expected_cost / w.expected_click;
            if per_click > own_bid + 1e-9 {
                tally.price_above_bid += 1;
            }
        }
        let m = w.merchant_id as usize;
        merchant_cost[m] += w.expected_cost;
        merchant_max_click[m] = merchant_max_click[m].max(w.expected_cost);
    }
    outcome
}

struct IntervalScratch {
    merchant_cost: Vec<f64>,
    merchant_max_click: Vec<f64>,
}

/// Training-state shared across the episodes of one run.
pub struct TrainerState {
    pub replay: ReplayMemory,
}

impl TrainerState {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            replay: ReplayMemory::new(capacity, seed),
        }
    }
}

/// Per-episode learning diagnostics.
#[derive(Debug, Clone)]
pub struct EpisodeCurve {
    pub episode: usize,
    pub total_revenue: f64,
    pub per_agent_revenue: Vec<f64>,
    pub critic_loss: Vec<f64>,
    pub actor_grad_norm: Vec<f64>,
}

/// Runs one episode: intervals of parallel bid preparation, serialized
/// settlement, state merge, transition snapshot and (when training)
/// per-agent updates after each interval.
pub fn run_episode(
    sim: &Simulation,
    agents: &mut [Agent],
    explore: bool,
    mut trainer: Option<&mut TrainerState>,
) -> Result<EpisodeOutput> {
    let n = sim.builder.n;
    let l = sim.builder.l;
    assert_eq!(agents.len(), n, "one agent per merchant cluster");
    let range = agents
        .first()
        .map(|a| a.config.range)
        .unwrap_or(0.9);

    let mut ledger = BudgetLedger::new(sim.base_profiles.clone())?;
    let mut g = GeneralInfoState::zeros(n, l);
    let mut acc = IntervalAccumulator::new(n, l);
    let mut last_actions = vec![vec![0.0; l]; n];
    let mut last_d = ActionDistribution::zeros(n, l);
    let mut pending: Option<TransitionTuple> = None;
    let mut tuples_out: Vec<TransitionTuple> = Vec::new();
    let mut per_step = Vec::new();
    let mut tally = InvariantTally::default();
    let mut totals = vec![AgentTotals::default(); n];
    let mut scratch = IntervalScratch {
        merchant_cost: vec![0.0; sim.base_profiles.len()],
        merchant_max_click: vec![0.0; sim.base_profiles.len()],
    };
    let mut loss_sums = vec![(0.0f64, 0u32); n];
    let mut norm_sums = vec![(0.0f64, 0u32); n];
    let mut auctions = 0u64;

    let steps = sim.config.steps_per_episode;
    for t in 0..steps {
        let mut actions: Vec<Vec<f64>> = Vec::with_capacity(n);
        for agent in agents.iter_mut() {
            actions.push(agent.act(&g, &sim.builder, &last_actions, &last_d, explore)?);
        }
        let g_before = g.clone();
        acc.begin_interval();

        let (lo, hi) = sim.interval_bounds(t);
        let chunk = &sim.records[lo..hi];
        auctions += chunk.len() as u64;
        let prepared: Vec<PreparedAuction> = sim.pool.install(|| {
            chunk
                .par_iter()
                .map(|rec| prepare_auction(rec, &actions, range, sim))
                .collect()
        });
        if sim.config.racy_workers {
            settle_racy(sim, prepared, &mut ledger, &mut acc, &mut g, &mut tally, &mut scratch);
        } else {
            for pa in &prepared {
                tally.alpha_out_of_range += pa.alpha_violations;
                tally.bid_out_of_bounds += pa.bid_violations;
                settle_prepared(
                    pa,
                    sim.config.slots,
                    sim.config.reserve_price,
                    &mut ledger,
                    &sim.merchant_cluster_of,
                    &mut acc,
                    &mut g,
                    &mut tally,
                    &mut scratch.merchant_cost,
                    &mut scratch.merchant_max_click,
                );
            }
        }

        for i in 0..n {
            totals[i].revenue += acc.revenue_per_agent[i];
            totals[i].cost += acc.cost_per_agent[i];
            totals[i].click += acc.click_per_agent[i];
        }
        per_step.push(StepTotals {
            revenue: acc.revenue_per_agent.iter().sum(),
            cost: acc.cost_per_agent.iter().sum(),
        });

        let d_t = acc.distribution();
        let terminal = t + 1 == steps;
        let tuple = snapshot_transition(
            &mut acc,
            &sim.config.reward,
            g_before,
            g.clone(),
            actions.clone(),
            terminal,
        )?;
        if let Some(mut prev) = pending.take() {
            prev.d_next = d_t.clone();
            if let Some(tr) = trainer.as_deref_mut() {
                tr.replay.push(prev.clone());
            }
            tuples_out.push(prev);
        }
        if terminal {
            if let Some(tr) = trainer.as_deref_mut() {
                tr.replay.push(tuple.clone());
            }
            tuples_out.push(tuple.clone());
        } else {
            pending = Some(tuple.clone());
        }
        if let Some(tr) = trainer.as_deref_mut() {
            for i in 0..n {
                let stats = update_agent_for_step(agents, i, &mut tr.replay, &tuple, &sim.builder)?;
                if let Some(loss) = stats.critic_loss {
                    loss_sums[i].0 += loss;
                    loss_sums[i].1 += 1;
                }
                if let Some(norm) = stats.actor_grad_norm {
                    norm_sums[i].0 += norm;
                    norm_sums[i].1 += 1;
                }
            }
        }
        last_actions = actions;
        last_d = d_t;
    }

    // budget accounting per agent cluster
    for p in ledger.profiles() {
        let i = sim.merchant_cluster_of[p.merchant_id as usize];
        if p.budget.is_finite() {
            totals[i].budget += p.budget;
            totals[i].ledger_spent += p.budget - p.budget_remaining;
        }
        // budget safety: total expected cost within one crossing click
        let m = p.merchant_id as usize;
        if p.budget.is_finite()
            && scratch.merchant_cost[m]
                > p.budget + scratch.merchant_max_click[m] + 1e-9
        {
            tally.overspend_beyond_click += 1;
        }
    }

    let mean_of = |sums: &[(f64, u32)]| -> Vec<f64> {
        sums.iter()
            .map(|&(s, c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect()
    };
    Ok(EpisodeOutput {
        result: EpisodeResult {
            per_agent: totals,
            per_step,
            violations: tally,
            auctions_settled: auctions,
        },
        tuples: tuples_out,
        mean_critic_loss: mean_of(&loss_sums),
        mean_actor_grad_norm: mean_of(&norm_sums),
    })
}

/// Stress mode: settle shards concurrently against a locked ledger.
/// Outcome order depends on thread scheduling.
fn settle_racy(
    sim: &Simulation,
    prepared: Vec<PreparedAuction>,
    ledger: &mut BudgetLedger,
    acc: &mut IntervalAccumulator,
    g: &mut GeneralInfoState,
    tally: &mut InvariantTally,
    scratch: &mut IntervalScratch,
) {
    struct Shared<'a> {
        ledger: &'a mut BudgetLedger,
        acc: &'a mut IntervalAccumulator,
        g: &'a mut GeneralInfoState,
        tally: &'a mut InvariantTally,
        scratch: &'a mut IntervalScratch,
    }
    let shared = Mutex::new(Shared {
        ledger,
        acc,
        g,
        tally,
        scratch,
    });
    sim.pool.install(|| {
        prepared.par_iter().for_each(|pa| {
            let mut s = shared.lock().expect("settlement lock");
            let sh = &mut *s;
            sh.tally.alpha_out_of_range += pa.alpha_violations;
            sh.tally.bid_out_of_bounds += pa.bid_violations;
            settle_prepared(
                pa,
                sim.config.slots,
                sim.config.reserve_price,
                sh.ledger,
                &sim.merchant_cluster_of,
                sh.acc,
                sh.g,
                sh.tally,
                &mut sh.scratch.merchant_cost,
                &mut sh.scratch.merchant_max_click,
            );
        });
    });
}

/// Outcome of a full training run.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub curves: Vec<EpisodeCurve>,
    pub best_episode: usize,
    pub best_revenue: f64,
    pub episodes_run: usize,
    pub converged: bool,
}

/// Trains in place over the simulation's log. Tracks the best-performing
/// episode and returns a snapshot of the agents from that episode next to
/// the final agents.
pub struct TrainingOutcome {
    pub run: TrainingRun,
    pub best_agents: Vec<Agent>,
}

pub fn run_training(sim: &Simulation, agents: &mut Vec<Agent>) -> Result<TrainingOutcome> {
    let capacity = agents
        .iter()
        .map(|a| a.config.replay_capacity)
        .max()
        .unwrap_or(1);
    let mut trainer = TrainerState::new(capacity, mix_seed(sim.config.seed, 500));
    let mut curves = Vec::new();
    let mut best_revenue = f64::NEG_INFINITY;
    let mut best_episode = 0usize;
    let mut best_agents: Vec<Agent> = agents.clone();
    let mut converged = false;
    let mut episodes_run = 0usize;

    for episode in 0..sim.config.episodes {
        let out = run_episode(sim, agents, true, Some(&mut trainer))?;
        episodes_run = episode + 1;
        let total = out.result.total_revenue();
        curves.push(EpisodeCurve {
            episode,
            total_revenue: total,
            per_agent_revenue: out.result.per_agent_revenue(),
            critic_loss: out.mean_critic_loss,
            actor_grad_norm: out.mean_actor_grad_norm,
        });
        if total > best_revenue {
            best_revenue = total;
            best_episode = episode;
            best_agents = agents.clone();
        }
        for agent in agents.iter_mut() {
            agent.end_episode();
        }
        if episode - best_episode >= sim.config.convergence_window {
            converged = true;
            break;
        }
    }
    Ok(TrainingOutcome {
        run: TrainingRun {
            curves,
            best_episode,
            best_revenue,
            episodes_run,
            converged,
        },
        best_agents,
    })
}

/// Noise-free episode with no learning. Action-selection streams are
/// reset so the same parameters always evaluate identically.
pub fn evaluate(sim: &Simulation, agents: &mut [Agent]) -> Result<EpisodeOutput> {
    for agent in agents.iter_mut() {
        agent.reseed_for_eval();
    }
    run_episode(sim, agents, false, None)
}

/// Full experiment description: clustering size, episode mechanics and
/// the per-agent learning configuration.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub n_merchant_clusters: usize,
    pub n_consumer_clusters: usize,
    pub episode: EpisodeConfig,
    pub agent: AgentConfig,
}

impl ExperimentSpec {
    /// One agent per merchant cluster. Under a partial-coordination
    /// reward, agents outside the coordinated set bid manually.
    pub fn build_agents(&self, builder: &InputBuilder, seed: u64) -> Result<Vec<Agent>> {
        (0..self.n_merchant_clusters)
            .map(|i| {
                let algorithm = match &self.episode.reward {
                    RewardConfig::Partial(set) if !set.contains(&i) => Algorithm::Manual,
                    _ => self.agent.algorithm,
                };
                let config = AgentConfig {
                    algorithm,
                    ..self.agent
                };
                Agent::new(i, config, builder, seed)
            })
            .collect()
    }
}

/// Train on one log, evaluate the best-episode agents on another.
pub struct ExperimentOutcome {
    pub training: TrainingRun,
    pub eval: EpisodeResult,
    pub final_agents: Vec<Agent>,
    pub best_agents: Vec<Agent>,
}

pub fn train_and_evaluate(
    train_records: &[AuctionLogRecord],
    test_records: &[AuctionLogRecord],
    spec: &ExperimentSpec,
) -> Result<ExperimentOutcome> {
    let sim_train = Simulation::prepare_full(
        train_records.to_vec(),
        spec.n_merchant_clusters,
        spec.n_consumer_clusters,
        spec.episode.clone(),
    )?;
    let sim_eval = Simulation::prepare(
        test_records.to_vec(),
        sim_train.assignment.clone(),
        sim_train.builder.clone(),
        spec.episode.clone(),
        None,
    )?;
    let mut agents = spec.build_agents(&sim_train.builder, spec.episode.seed)?;
    let outcome = run_training(&sim_train, &mut agents)?;
    let mut best = outcome.best_agents;
    let eval = evaluate(&sim_eval, &mut best)?;
    Ok(ExperimentOutcome {
        training: outcome.run,
        eval: eval.result,
        final_agents: agents,
        best_agents: best,
    })
}

/// Writes the training-metrics stream: one row per episode with the
/// total revenue and per-agent reward, critic loss and actor gradient
/// norm columns.
pub fn write_learning_curves_csv(
    path: &std::path::Path,
    run: &TrainingRun,
    n_agents: usize,
) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("episode,total_revenue");
    for i in 0..n_agents {
        header.push_str(&format!(",revenue_{i}"));
    }
    for i in 0..n_agents {
        header.push_str(&format!(",critic_loss_{i}"));
    }
    for i in 0..n_agents {
        header.push_str(&format!(",actor_grad_norm_{i}"));
    }
    writeln!(w, "{header}")?;
    for c in &run.curves {
        let mut row = format!("{},{:.6}", c.episode, c.total_revenue);
        for v in &c.per_agent_revenue {
            row.push_str(&format!(",{v:.6}"));
        }
        for v in &c.critic_loss {
            row.push_str(&format!(",{v:.6}"));
        }
        for v in &c.actor_grad_norm {
            row.push_str(&format!(",{v:.6}"));
        }
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the cluster-count sweep.
#[derive(Debug, Clone)]
pub struct ClusterSweepRow {
    pub n_clusters: usize,
    pub seeds: usize,
    pub revenue_mean: f64,
    pub revenue_std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / values.len() as f64;
    (mean, var.sqrt())
}

/// For each cluster count (consumer clusters set equal), runs a full
/// training per seed and reports the evaluated total revenue.
pub fn sweep_cluster_count(
    train_records: &[AuctionLogRecord],
    test_records: &[AuctionLogRecord],
    cluster_counts: &[usize],
    base: &ExperimentSpec,
    seeds: &[u64],
) -> Result<Vec<ClusterSweepRow>> {
    let mut rows = Vec::with_capacity(cluster_counts.len());
    for &n in cluster_counts {
        let mut revenues = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut spec = base.clone();
            spec.n_merchant_clusters = n;
            spec.n_consumer_clusters = n;
            spec.episode.seed = seed;
            let outcome = train_and_evaluate(train_records, test_records, &spec)?;
            revenues.push(outcome.eval.total_revenue());
        }
        let (mean, std) = mean_std(&revenues);
        rows.push(ClusterSweepRow {
            n_clusters: n,
            seeds: seeds.len(),
            revenue_mean: mean,
            revenue_std: std,
        });
    }
    Ok(rows)
}

/// One row of the budget-fraction sweep: the manual baseline next to the
/// trained coordinated learner.
#[derive(Debug, Clone)]
pub struct BudgetSweepRow {
    pub fraction: f64,
    pub manual_revenue: f64,
    pub learned_mean: f64,
    pub learned_std: f64,
}

pub fn sweep_budget_ratio(
    train_records: &[AuctionLogRecord],
    test_records: &[AuctionLogRecord],
    fractions: &[f64],
    base: &ExperimentSpec,
    seeds: &[u64],
) -> Result<Vec<BudgetSweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut spec = base.clone();
        spec.episode.budget_fraction = fraction;
        spec.episode.reward = RewardConfig::Coordinated;

        // manual baseline on the evaluation log at this budget
        let sim_train = Simulation::prepare_full(
            train_records.to_vec(),
            spec.n_merchant_clusters,
            spec.n_consumer_clusters,
            spec.episode.clone(),
        )?;
        let sim_eval = Simulation::prepare(
            test_records.to_vec(),
            sim_train.assignment.clone(),
            sim_train.builder.clone(),
            spec.episode.clone(),
            None,
        )?;
        let manual_spec = ExperimentSpec {
            agent: AgentConfig {
                algorithm: Algorithm::Manual,
                ..spec.agent
            },
            episode: EpisodeConfig {
                reward: RewardConfig::SelfInterest,
                ..spec.episode.clone()
            },
            ..spec.clone()
        };
        let mut manual_agents = manual_spec.build_agents(&sim_eval.builder, spec.episode.seed)?;
        let manual_revenue = evaluate(&sim_eval, &mut manual_agents)?.result.total_revenue();

        let mut revenues = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut seeded = spec.clone();
            seeded.episode.seed = seed;
            let outcome = train_and_evaluate(train_records, test_records, &seeded)?;
            revenues.push(outcome.eval.total_revenue());
        }
        let (mean, std) = mean_std(&revenues);
        rows.push(BudgetSweepRow {
            fraction,
            manual_revenue,
            learned_mean: mean,
            learned_std: std,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic_log, GeneratorConfig};

    fn tiny_log(seed: u64) -> Vec<AuctionLogRecord> {
        generate_synthetic_log(
            &GeneratorConfig {
                merchants: 20,
                consumers: 30,
                requests: 300,
                candidates_per_request: 6,
                ..GeneratorConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn manual_agents(sim: &Simulation) -> Vec<Agent> {
        (0..sim.builder.n)
            .map(|i| {
                Agent::new(
                    i,
                    AgentConfig::with_algorithm(Algorithm::Manual),
                    &sim.builder,
                    sim.config.seed,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn calibration_is_deterministic_and_additive() {
        let records = tiny_log(1);
        let a = calibrate(&records, 3, 0.0).unwrap();
        let b = calibrate(&records, 3, 0.0).unwrap();
        assert_eq!(a.total_cost, b.total_cost);
        let merchant_sum: f64 = a.per_merchant_cost.iter().sum();
        assert!((merchant_sum - a.total_cost).abs() < 1e-9);
        assert_eq!(calibrate(&[], 3, 0.0).unwrap().c_t(), 0.0);
    }

    #[test]
    fn manual_unlimited_episode_spends_exactly_ct() {
        let records = tiny_log(2);
        let calibration = calibrate(&records, 3, 0.0).unwrap();
        let config = EpisodeConfig {
            budget_fraction: f64::INFINITY,
            ..EpisodeConfig::default()
        };
        let sim = Simulation::prepare_full(records, 2, 2, config).unwrap();
        let mut agents = manual_agents(&sim);
        let out = evaluate(&sim, &mut agents).unwrap();
        assert!((out.result.total_cost() - calibration.total_cost).abs() < 1e-9);
        assert!((out.result.total_revenue() - calibration.total_revenue).abs() < 1e-9);
    }

    #[test]
    fn zero_budget_episode_has_no_winners() {
        let records = tiny_log(3);
        let config = EpisodeConfig {
            budget_fraction: 0.0,
            ..EpisodeConfig::default()
        };
        let sim = Simulation::prepare_full(records, 2, 2, config).unwrap();
        let mut agents = manual_agents(&sim);
        let out = evaluate(&sim, &mut agents).unwrap();
        assert_eq!(out.result.total_revenue(), 0.0);
        assert_eq!(out.result.total_cost(), 0.0);
    }

    #[test]
    fn worker_counts_agree_in_deterministic_mode() {
        let records = tiny_log(4);
        let run = |workers: usize| {
            let config = EpisodeConfig {
                worker_count: workers,
                ..EpisodeConfig::default()
            };
            let sim = Simulation::prepare_full(records.clone(), 2, 2, config).unwrap();
            let mut agents = manual_agents(&sim);
            let out = evaluate(&sim, &mut agents).unwrap();
            (
                out.result.total_revenue(),
                out.result.total_cost(),
                out.result.per_agent_revenue(),
            )
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn sequential_reference_matches_pooled_run() {
        // an explicit single-threaded reference settlement over the whole
        // log must reproduce the pooled episode's totals exactly
        let records = tiny_log(5);
        let config = EpisodeConfig {
            worker_count: 4,
            budget_fraction: 0.5,
            ..EpisodeConfig::default()
        };
        let sim = Simulation::prepare_full(records.clone(), 2, 2, config).unwrap();
        let mut agents = manual_agents(&sim);
        let out = evaluate(&sim, &mut agents).unwrap();

        // reference: settle every request in order with the market ops
        let mut ledger = BudgetLedger::new(sim.base_profiles.clone()).unwrap();
        let mut revenue = 0.0;
        let mut cost = 0.0;
        for rec in &records {
            let eligible: Vec<CandidateAd> = rec
                .candidates
                .iter()
                .filter(|c| c.pctr > 0.0 && ledger.has_budget(c.merchant_id))
                .map(|c| CandidateAd {
                    merchant_id: c.merchant_id,
                    pctr: c.pctr,
                    pcvr: c.pcvr,
                    pcvr_avg: c.pcvr_avg,
                    final_bid: c.base_bid,
                })
                .collect();
            let ranked = rank_by_ecpm(eligible);
            let outcome = settle_ranked(&ranked, 3, 0.0, &mut ledger);
            for w in outcome.winners {
                revenue += w.expected_revenue;
                cost += w.expected_cost;
            }
        }
        assert!((out.result.total_revenue() - revenue).abs() < 1e-9);
        assert!((out.result.total_cost() - cost).abs() < 1e-9);
    }

    #[test]
    fn interval_revenue_sums_to_episode_revenue() {
        let records = tiny_log(6);
        let sim = Simulation::prepare_full(records, 2, 2, EpisodeConfig::default()).unwrap();
        let mut agents = manual_agents(&sim);
        let out = evaluate(&sim, &mut agents).unwrap();
        let step_sum: f64 = out.result.per_step.iter().map(|s| s.revenue).sum();
        assert!((step_sum - out.result.total_revenue()).abs() < 1e-9);
    }

    #[test]
    fn transition_chain_links_states_and_conserves_revenue() {
        let records = tiny_log(7);
        let sim = Simulation::prepare_full(records, 2, 3, EpisodeConfig::default()).unwrap();
        let mut agents = manual_agents(&sim);
        let out = evaluate(&sim, &mut agents).unwrap();
        assert_eq!(out.tuples.len(), 3);
        for pair in out.tuples.windows(2) {
            assert_eq!(pair[0].g_next, pair[1].g);
        }
        let final_g = &out.tuples.last().unwrap().g_next;
        assert!((final_g.total_revenue() - out.result.total_revenue()).abs() < 1e-9);
        assert!(out.tuples.last().unwrap().terminal);
        assert!(!out.tuples[0].terminal);
    }

    #[test]
    fn budget_ledger_conservation_and_no_violations() {
        let records = tiny_log(8);
        let config = EpisodeConfig {
            budget_fraction: 0.3,
            ..EpisodeConfig::default()
        };
        let sim = Simulation::prepare_full(records, 3, 3, config).unwrap();
        let mut agents = manual_agents(&sim);
        let out = evaluate(&sim, &mut agents).unwrap();
        assert_eq!(out.result.violations.total(), 0);
        for a in &out.result.per_agent {
            assert!(a.ledger_spent <= a.budget + 1e-9);
        }
    }

    #[test]
    fn training_e0_leaves_agents_unchanged() {
        let records = tiny_log(9);
        let config = EpisodeConfig {
            episodes: 0,
            ..EpisodeConfig::default()
        };
        let sim = Simulation::prepare_full(records, 2, 2, config).unwrap();
        let mut agents = manual_agents(&sim);
        let outcome = run_training(&sim, &mut agents).unwrap();
        assert!(outcome.run.curves.is_empty());
        assert_eq!(outcome.run.episodes_run, 0);
    }

    #[test]
    fn manual_training_curves_are_flat() {
        let records = tiny_log(10);
        let config = EpisodeConfig {
            episodes: 3,
            convergence_window: 50,
            ..EpisodeConfig::default()
        };
        let sim = Simulation::prepare_full(records, 2, 2, config).unwrap();
        let mut agents = manual_agents(&sim);
        let outcome = run_training(&sim, &mut agents).unwrap();
        let first = outcome.run.curves[0].total_revenue;
        assert!(outcome
            .run
            .curves
            .iter()
            .all(|c| (c.total_revenue - first).abs() < 1e-9));
    }
}
