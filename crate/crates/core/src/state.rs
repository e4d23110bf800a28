//! Shared cluster-level market state: the cumulative (cost, revenue)
//! matrix, slowly-changing consumer cluster features, the executed-action
//! distribution per interval, and transition records for replay.

use serde::{Deserialize, Serialize};

use crate::market::AuctionOutcome;
use crate::{Error, Result};

/// Normalization scales for network inputs (and reward scaling during
/// training). Raw currency magnitudes would saturate the activations,
/// so cumulative cost/revenue cells are divided by the totals of the
/// unlimited-budget manual replay of the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Scaler {
    pub cost_scale: f64,
    pub revenue_scale: f64,
}

impl Scaler {
    pub fn new(cost_scale: f64, revenue_scale: f64) -> Self {
        Self {
            cost_scale: if cost_scale > 0.0 { cost_scale } else { 1.0 },
            revenue_scale: if revenue_scale > 0.0 { revenue_scale } else { 1.0 },
        }
    }

    pub fn identity() -> Self {
        Self {
            cost_scale: 1.0,
            revenue_scale: 1.0,
        }
    }
}

/// Cumulative (cost, revenue) per merchant-cluster x consumer-cluster
/// pair since episode start. Cells flatten row-major by (merchant
/// cluster, consumer cluster), each cell contributing (cost, revenue)
/// in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralInfoState {
    n: usize,
    l: usize,
    /// (cost, revenue) per cell, row-major.
    cells: Vec<(f64, f64)>,
}

impl GeneralInfoState {
    pub fn zeros(n: usize, l: usize) -> Self {
        Self {
            n,
            l,
            cells: vec![(0.0, 0.0); n * l],
        }
    }

    pub fn n_merchant_clusters(&self) -> usize {
        self.n
    }

    pub fn n_consumer_clusters(&self) -> usize {
        self.l
    }

    pub fn cell(&self, i: usize, j: usize) -> (f64, f64) {
        self.cells[i * self.l + j]
    }

    pub fn cells(&self) -> &[(f64, f64)] {
        &self.cells
    }

    pub fn total_revenue(&self) -> f64 {
        self.cells.iter().map(|c| c.1).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.cells.iter().map(|c| c.0).sum()
    }

    /// Accumulates the outcome's winners belonging to merchant cluster
    /// `i` into cell (i, j). Negative increments are rejected.
    pub fn update_general_info(
        &mut self,
        outcome: &AuctionOutcome,
        winner_cluster: impl Fn(crate::market::MerchantId) -> usize,
        i: usize,
        j: usize,
    ) -> Result<()> {
        debug_assert!(i < self.n && j < self.l);
        let mut add_cost = 0.0;
        let mut add_revenue = 0.0;
        for w in &outcome.winners {
            if winner_cluster(w.merchant_id) == i {
                add_cost += w.expected_cost;
                add_revenue += w.expected_revenue;
            }
        }
        if add_cost < 0.0 || add_revenue < 0.0 {
            return Err(Error::invalid("negative settlement increment"));
        }
        let cell = &mut self.cells[i * self.l + j];
        cell.0 += add_cost;
        cell.1 += add_revenue;
        Ok(())
    }

    /// Direct accumulation into one cell; used on the settlement path
    /// where the winner's cluster is already resolved.
    pub fn accumulate(&mut self, i: usize, j: usize, cost: f64, revenue: f64) {
        debug_assert!(cost >= 0.0 && revenue >= 0.0);
        let cell = &mut self.cells[i * self.l + j];
        cell.0 += cost;
        cell.1 += revenue;
    }

    /// Appends the normalized flattening `[cost_11, rev_11, ..., cost_NL,
    /// rev_NL]` to `out`.
    pub fn flatten_normalized_into(&self, scaler: &Scaler, out: &mut Vec<f64>) {
        for &(cost, revenue) in &self.cells {
            out.push(cost / scaler.cost_scale);
            out.push(revenue / scaler.revenue_scale);
        }
    }

    pub fn flat_dim(n: usize, l: usize) -> usize {
        2 * n * l
    }
}

/// Per-consumer-cluster static features: one-hot cluster embedding plus
/// the historical (revenue, cost) pair, pre-normalized. Fixed for the
/// whole training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsumerClusterFeatures {
    l: usize,
    features: Vec<Vec<f64>>,
}

impl ConsumerClusterFeatures {
    pub fn new(history: &[(f64, f64)], scaler: &Scaler) -> Self {
        let l = history.len();
        let features = history
            .iter()
            .enumerate()
            .map(|(j, &(revenue, cost))| {
                let mut x = vec![0.0; l + 2];
                x[j] = 1.0;
                x[l] = revenue / scaler.revenue_scale;
                x[l + 1] = cost / scaler.cost_scale;
                x
            })
            .collect();
        Self { l, features }
    }

    pub fn n_clusters(&self) -> usize {
        self.l
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        &self.features[j]
    }

    pub fn feature_dim(l: usize) -> usize {
        l + 2
    }

    /// Flat concatenation [x_1, ..., x_L] appended to `out`.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for x in &self.features {
            out.extend_from_slice(x);
        }
    }

    pub fn flat_dim(l: usize) -> usize {
        l * (l + 2)
    }
}

/// Frequency distribution of executed cluster-level actions within one
/// interval, flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    n: usize,
    l: usize,
    freqs: Vec<f64>,
    pub degenerate: bool,
}

impl ActionDistribution {
    pub fn zeros(n: usize, l: usize) -> Self {
        Self {
            n,
            l,
            freqs: vec![0.0; n * l],
            degenerate: true,
        }
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn sum(&self) -> f64 {
        self.freqs.iter().sum()
    }
}

/// Normalizes an N x L execution-count matrix into a distribution.
/// A zero total yields the all-zero distribution flagged degenerate.
pub fn aggregate_action_distribution(counts: &[u64], n: usize, l: usize) -> ActionDistribution {
    assert_eq!(counts.len(), n * l, "count matrix shape mismatch");
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return ActionDistribution::zeros(n, l);
    }
    ActionDistribution {
        n,
        l,
        freqs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        degenerate: false,
    }
}

/// How interval rewards are attributed to agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardConfig {
    /// Each agent receives its own interval revenue.
    SelfInterest,
    /// Every agent receives the total interval revenue.
    Coordinated,
    /// Agents in the set receive the total interval revenue; the rest
    /// keep their own revenue (non-learning agents ignore rewards).
    Partial(Vec<usize>),
}

impl RewardConfig {
    pub fn rewards(&self, own_revenue: &[f64]) -> Vec<f64> {
        let total: f64 = own_revenue.iter().sum();
        match self {
            RewardConfig::SelfInterest => own_revenue.to_vec(),
            RewardConfig::Coordinated => vec![total; own_revenue.len()],
            RewardConfig::Partial(set) => own_revenue
                .iter()
                .enumerate()
                .map(|(i, &r)| if set.contains(&i) { total } else { r })
                .collect(),
        }
    }
}

/// Worker-merged accumulators for one interval.
#[derive(Debug, Clone)]
pub struct IntervalAccumulator {
    n: usize,
    l: usize,
    pub revenue_per_agent: Vec<f64>,
    pub cost_per_agent: Vec<f64>,
    pub click_per_agent: Vec<f64>,
    /// Executed count per (i, j) action cell.
    pub action_counts: Vec<u64>,
    open: bool,
}

impl IntervalAccumulator {
    pub fn new(n: usize, l: usize) -> Self {
        Self {
            n,
            l,
            revenue_per_agent: vec![0.0; n],
            cost_per_agent: vec![0.0; n],
            click_per_agent: vec![0.0; n],
            action_counts: vec![0; n * l],
            open: false,
        }
    }

    pub fn begin_interval(&mut self) {
        self.revenue_per_agent.fill(0.0);
        self.cost_per_agent.fill(0.0);
        self.click_per_agent.fill(0.0);
        self.action_counts.fill(0);
        self.open = true;
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn record_execution(&mut self, i: usize, j: usize) {
        self.action_counts[i * self.l + j] += 1;
    }

    pub fn record_win(&mut self, i: usize, cost: f64, revenue: f64, click: f64) {
        self.cost_per_agent[i] += cost;
        self.revenue_per_agent[i] += revenue;
        self.click_per_agent[i] += click;
    }

    pub fn distribution(&self) -> ActionDistribution {
        aggregate_action_distribution(&self.action_counts, self.n, self.l)
    }
}

/// One replay-memory record: state and distribution before the interval,
/// the executed cluster actions, per-agent rewards, and the successor
/// state/distribution. The consumer features are run constants and are
/// not duplicated per tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTuple {
    pub g: GeneralInfoState,
    pub d: ActionDistribution,
    /// Executed actions per agent row, each of length L, in [-1, 1].
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub g_next: GeneralInfoState,
    pub d_next: ActionDistribution,
    pub terminal: bool,
}

impl TransitionTuple {
    /// Line-delimited serialization for replay-memory persistence dumps.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("tuple serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::invalid(format!("tuple parse: {e}")))
    }
}

/// Closes the interval: derives the action distribution and per-agent
/// rewards from the accumulator, clears it, and assembles the transition
/// record. The successor distribution is patched in by the caller once
/// the next interval has run (terminal tuples keep the zero distribution).
///
/// Calling twice without `begin_interval` in between is an error.
#[allow(clippy::too_many_arguments)]
pub fn snapshot_transition(
    acc: &mut IntervalAccumulator,
    reward: &RewardConfig,
    g_before: GeneralInfoState,
    g_after: GeneralInfoState,
    actions: Vec<Vec<f64>>,
    terminal: bool,
) -> Result<TransitionTuple> {
    if !acc.open {
        return Err(Error::DoubleSnapshot);
    }
    acc.open = false;
    let d = acc.distribution();
    let rewards = reward.rewards(&acc.revenue_per_agent);
    Ok(TransitionTuple {
        d_next: ActionDistribution::zeros(acc.n, acc.l),
        g: g_before,
        d,
        actions,
        rewards,
        g_next: g_after,
        terminal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{AuctionOutcome, WinnerRecord};

    fn winner(id: u32, cost: f64, revenue: f64) -> WinnerRecord {
        WinnerRecord {
            merchant_id: id,
            expected_cost: cost,
            expected_revenue: revenue,
            expected_click: 0.0,
        }
    }

    #[test]
    fn update_accumulates_winners_of_the_cluster() {
        let mut g = GeneralInfoState::zeros(2, 2);
        let outcome = AuctionOutcome {
            winners: vec![winner(0, 0.15, 1.0)],
            slots: 3,
        };
        g.update_general_info(&outcome, |_| 0, 0, 0).unwrap();
        assert_eq!(g.cell(0, 0), (0.15, 1.0));
        // loser-only outcome leaves the state unchanged
        let empty = AuctionOutcome::default();
        g.update_general_info(&empty, |_| 0, 0, 0).unwrap();
        assert_eq!(g.cell(0, 0), (0.15, 1.0));
    }

    #[test]
    fn update_sums_multiple_winners_in_same_cell() {
        let mut g = GeneralInfoState::zeros(2, 2);
        let outcome = AuctionOutcome {
            winners: vec![winner(1, 0.1, 0.0), winner(2, 0.2, 0.0)],
            slots: 3,
        };
        g.update_general_info(&outcome, |_| 1, 1, 0).unwrap();
        assert_eq!(g.cell(1, 0).0, 0.30000000000000004); // 0.1 + 0.2 in f64
        assert_eq!(g.cell(0, 0), (0.0, 0.0));
    }

    #[test]
    fn distribution_normalizes_counts() {
        let d = aggregate_action_distribution(&[1, 1, 1, 1], 2, 2);
        assert!(d.freqs().iter().all(|&f| f == 0.25));
        assert!(!d.degenerate);

        let d = aggregate_action_distribution(&[3, 0, 0, 1], 2, 2);
        assert_eq!(d.freqs(), &[0.75, 0.0, 0.0, 0.25]);

        let d = aggregate_action_distribution(&[0, 0, 0, 0], 2, 2);
        assert!(d.degenerate);
        assert_eq!(d.sum(), 0.0);
    }

    #[test]
    fn reward_modes() {
        let own = vec![2.0, 3.0, 5.0];
        assert_eq!(RewardConfig::SelfInterest.rewards(&own), vec![2.0, 3.0, 5.0]);
        assert_eq!(
            RewardConfig::Coordinated.rewards(&own),
            vec![10.0, 10.0, 10.0]
        );
        assert_eq!(
            RewardConfig::Partial(vec![1]).rewards(&own),
            vec![2.0, 10.0, 5.0]
        );
    }

    #[test]
    fn double_snapshot_is_rejected() {
        let mut acc = IntervalAccumulator::new(1, 1);
        acc.begin_interval();
        acc.record_execution(0, 0);
        let g = GeneralInfoState::zeros(1, 1);
        snapshot_transition(
            &mut acc,
            &RewardConfig::SelfInterest,
            g.clone(),
            g.clone(),
            vec![vec![0.0]],
            false,
        )
        .unwrap();
        let err = snapshot_transition(
            &mut acc,
            &RewardConfig::SelfInterest,
            g.clone(),
            g,
            vec![vec![0.0]],
            false,
        );
        assert!(matches!(err, Err(Error::DoubleSnapshot)));
    }

    #[test]
    fn tuple_serializes_to_one_line() {
        let g = GeneralInfoState::zeros(1, 2);
        let tuple = TransitionTuple {
            g: g.clone(),
            d: ActionDistribution::zeros(1, 2),
            actions: vec![vec![0.5, -0.5]],
            rewards: vec![1.0],
            g_next: g,
            d_next: ActionDistribution::zeros(1, 2),
            terminal: true,
        };
        let line = tuple.to_json_line();
        assert!(!line.contains('\n'));
        let back = TransitionTuple::from_json_line(&line).unwrap();
        assert_eq!(tuple, back);
    }

    #[test]
    fn consumer_features_have_single_hot_bit() {
        let scaler = Scaler::identity();
        let x = ConsumerClusterFeatures::new(&[(5.0, 2.0), (1.0, 1.0)], &scaler);
        let x0 = x.feature(0);
        assert_eq!(x0, &[1.0, 0.0, 5.0, 2.0]);
        assert_eq!(x.feature(1), &[0.0, 1.0, 1.0, 1.0]);
    }
}
