//! Revenue-ranked clustering of merchants and consumers.
//!
//! Merchants are ranked by the revenue they earn in a manual-bid replay of
//! the training log with unlimited budgets, then split into N contiguous
//! clusters with approximately equal total presences (a presence is one
//! appearance in a request's candidate list). Consumers are ranked by the
//! revenue their requests produced and split into L contiguous clusters
//! with approximately equal request counts.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::dataio::AuctionLogRecord;
use crate::market::{
    settle_auction, AuctionRequest, BudgetLedger, CandidateAd, MerchantId, MerchantProfile,
};
use crate::{Error, Result};

/// Per-entity features extracted from one unlimited-budget manual replay.
#[derive(Debug, Clone)]
pub struct ReplayFeatures {
    /// Indexed by merchant id.
    pub merchant_revenue: Vec<f64>,
    pub merchant_cost: Vec<f64>,
    pub merchant_presence: Vec<u64>,
    /// Indexed by consumer id.
    pub consumer_revenue: Vec<f64>,
    pub consumer_cost: Vec<f64>,
    pub consumer_requests: Vec<u64>,
    pub total_revenue: f64,
    pub total_cost: f64,
}

/// Replays the log once with manual bids (no adjustment) and unlimited
/// budgets, attributing expected revenue/cost to merchants and consumers.
pub fn manual_replay_features(
    records: &[AuctionLogRecord],
    slots: usize,
    reserve_price: f64,
) -> Result<ReplayFeatures> {
    let mut max_merchant = 0usize;
    let mut max_consumer = 0usize;
    for rec in records {
        max_consumer = max_consumer.max(rec.consumer_id as usize + 1);
        for c in &rec.candidates {
            max_merchant = max_merchant.max(c.merchant_id as usize + 1);
        }
    }
    let mut features = ReplayFeatures {
        merchant_revenue: vec![0.0; max_merchant],
        merchant_cost: vec![0.0; max_merchant],
        merchant_presence: vec![0; max_merchant],
        consumer_revenue: vec![0.0; max_consumer],
        consumer_cost: vec![0.0; max_consumer],
        consumer_requests: vec![0; max_consumer],
        total_revenue: 0.0,
        total_cost: 0.0,
    };

    // Ledger with unlimited budgets; ppb comes from the log entries.
    let mut ppb = vec![0.0f64; max_merchant];
    let mut base_bid = vec![1.0f64; max_merchant];
    for rec in records {
        for c in &rec.candidates {
            ppb[c.merchant_id as usize] = c.ppb;
            base_bid[c.merchant_id as usize] = c.base_bid;
        }
    }
    let profiles: Vec<MerchantProfile> = (0..max_merchant)
        .map(|id| MerchantProfile {
            merchant_id: id as MerchantId,
            base_bid: base_bid[id],
            ppb: ppb[id],
            budget: f64::INFINITY,
            budget_remaining: f64::INFINITY,
            cluster_id: 0,
        })
        .collect();
    let mut ledger = BudgetLedger::new(profiles)?;

    for rec in records {
        features.consumer_requests[rec.consumer_id as usize] += 1;
        for c in &rec.candidates {
            features.merchant_presence[c.merchant_id as usize] += 1;
        }
        let request = AuctionRequest {
            request_id: rec.request_id,
            consumer_id: rec.consumer_id,
            consumer_cluster_id: 0,
            timestamp: rec.timestamp,
            candidates: rec
                .candidates
                .iter()
                .map(|c| CandidateAd {
                    merchant_id: c.merchant_id,
                    pctr: c.pctr,
                    pcvr: c.pcvr,
                    pcvr_avg: c.pcvr_avg,
                    final_bid: c.base_bid,
                })
                .collect(),
        };
        let outcome = settle_auction(&request, slots, reserve_price, &mut ledger);
        for w in &outcome.winners {
            features.merchant_revenue[w.merchant_id as usize] += w.expected_revenue;
            features.merchant_cost[w.merchant_id as usize] += w.expected_cost;
            features.consumer_revenue[rec.consumer_id as usize] += w.expected_revenue;
            features.consumer_cost[rec.consumer_id as usize] += w.expected_cost;
            features.total_revenue += w.expected_revenue;
            features.total_cost += w.expected_cost;
        }
    }
    Ok(features)
}

/// Walks entities in revenue-descending order, cutting a cluster boundary
/// as soon as the cumulative weight reaches `total * (c+1) / n`. A boundary
/// is also forced when exactly one entity per remaining cluster is left,
/// so every cluster is non-empty.
///
/// `ranked` pairs (entity index, weight) and must already be sorted.
/// Returns the cluster index per ranked position.
pub(crate) fn greedy_prefix_cut(weights: &[u64], n_clusters: usize) -> Vec<usize> {
    let total: u64 = weights.iter().sum();
    let count = weights.len();
    let mut assignment = vec![0usize; count];
    let mut cluster = 0usize;
    let mut cum: u64 = 0;
    for (pos, &w) in weights.iter().enumerate() {
        assignment[pos] = cluster;
        cum += w;
        let remaining_entities = count - pos - 1;
        let remaining_clusters = n_clusters - cluster - 1;
        if remaining_clusters > 0
            && (cum * n_clusters as u64 >= total * (cluster as u64 + 1)
                || remaining_entities == remaining_clusters)
        {
            cluster += 1;
        }
    }
    assignment
}

/// Clustering of one entity family (merchants or consumers).
#[derive(Debug, Clone)]
pub struct EntityClusters {
    /// Entity ids in revenue-descending rank order.
    pub ranked_ids: Vec<u64>,
    /// Cluster per ranked position (contiguous, non-decreasing).
    pub cluster_by_rank: Vec<usize>,
    pub n_clusters: usize,
    /// Total balancing weight per cluster.
    pub weight_per_cluster: Vec<u64>,
}

impl EntityClusters {
    pub fn assignment(&self) -> HashMap<u64, usize> {
        self.ranked_ids
            .iter()
            .zip(&self.cluster_by_rank)
            .map(|(&id, &c)| (id, c))
            .collect()
    }
}

fn rank_and_cut(
    ids: Vec<u64>,
    revenue: impl Fn(u64) -> f64,
    weight: impl Fn(u64) -> u64,
    n_clusters: usize,
    what: &str,
) -> Result<EntityClusters> {
    if n_clusters == 0 {
        return Err(Error::invalid(format!("{what}: cluster count must be >= 1")));
    }
    if n_clusters > ids.len() {
        return Err(Error::TooManyClusters {
            requested: n_clusters,
            available: ids.len(),
        });
    }
    let mut ranked = ids;
    ranked.sort_by(|&a, &b| revenue(b).total_cmp(&revenue(a)).then(a.cmp(&b)));
    let weights: Vec<u64> = ranked.iter().map(|&id| weight(id)).collect();
    let cluster_by_rank = greedy_prefix_cut(&weights, n_clusters);
    let mut weight_per_cluster = vec![0u64; n_clusters];
    for (pos, &c) in cluster_by_rank.iter().enumerate() {
        weight_per_cluster[c] += weights[pos];
    }
    Ok(EntityClusters {
        ranked_ids: ranked,
        cluster_by_rank,
        n_clusters,
        weight_per_cluster,
    })
}

/// Groups merchants into `n_clusters` clusters of approximately equal
/// total presence, ranked by replay revenue.
pub fn cluster_merchants_by_presence(
    features: &ReplayFeatures,
    n_clusters: usize,
) -> Result<EntityClusters> {
    let ids: Vec<u64> = features
        .merchant_presence
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0)
        .map(|(id, _)| id as u64)
        .collect();
    rank_and_cut(
        ids,
        |id| features.merchant_revenue[id as usize],
        |id| features.merchant_presence[id as usize],
        n_clusters,
        "merchants",
    )
}

/// Groups consumers into `n_clusters` clusters of approximately equal
/// request counts, ranked by contributed revenue.
pub fn cluster_consumers_by_requests(
    features: &ReplayFeatures,
    n_clusters: usize,
) -> Result<EntityClusters> {
    let ids: Vec<u64> = features
        .consumer_requests
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > 0)
        .map(|(id, _)| id as u64)
        .collect();
    rank_and_cut(
        ids,
        |id| features.consumer_revenue[id as usize],
        |id| features.consumer_requests[id as usize],
        n_clusters,
        "consumers",
    )
}

/// Combined merchant and consumer clustering for one training log, with
/// the per-consumer-cluster historical (revenue, cost) pairs used as the
/// slowly-changing consumer features.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub n_merchant_clusters: usize,
    pub n_consumer_clusters: usize,
    merchant_by_id: Vec<usize>,
    consumer_by_id: Vec<usize>,
    /// (revenue, cost) per consumer cluster from the manual replay.
    pub consumer_history: Vec<(f64, f64)>,
}

const UNMAPPED: usize = usize::MAX;

impl ClusterAssignment {
    pub fn build(
        records: &[AuctionLogRecord],
        n_merchant_clusters: usize,
        n_consumer_clusters: usize,
        slots: usize,
        reserve_price: f64,
    ) -> Result<Self> {
        let features = manual_replay_features(records, slots, reserve_price)?;
        let merchants = cluster_merchants_by_presence(&features, n_merchant_clusters)?;
        let consumers = cluster_consumers_by_requests(&features, n_consumer_clusters)?;

        let mut merchant_by_id = vec![UNMAPPED; features.merchant_presence.len()];
        for (pos, &id) in merchants.ranked_ids.iter().enumerate() {
            merchant_by_id[id as usize] = merchants.cluster_by_rank[pos];
        }
        let mut consumer_by_id = vec![UNMAPPED; features.consumer_requests.len()];
        for (pos, &id) in consumers.ranked_ids.iter().enumerate() {
            consumer_by_id[id as usize] = consumers.cluster_by_rank[pos];
        }
        let mut consumer_history = vec![(0.0, 0.0); n_consumer_clusters];
        for (id, &cluster) in consumer_by_id.iter().enumerate() {
            if cluster != UNMAPPED {
                consumer_history[cluster].0 += features.consumer_revenue[id];
                consumer_history[cluster].1 += features.consumer_cost[id];
            }
        }
        Ok(Self {
            n_merchant_clusters,
            n_consumer_clusters,
            merchant_by_id,
            consumer_by_id,
            consumer_history,
        })
    }

    pub fn merchant_cluster(&self, id: MerchantId) -> Option<usize> {
        self.merchant_by_id
            .get(id as usize)
            .copied()
            .filter(|&c| c != UNMAPPED)
    }

    pub fn consumer_cluster(&self, id: u64) -> Option<usize> {
        self.consumer_by_id
            .get(id as usize)
            .copied()
            .filter(|&c| c != UNMAPPED)
    }

    /// Writes the id -> cluster mapping as a two-column text table.
    pub fn write_table(path: &Path, mapping: &[usize]) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, &cluster) in mapping.iter().enumerate() {
            if cluster != UNMAPPED {
                writeln!(w, "{id}\t{cluster}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_tables(&self, merchant_path: &Path, consumer_path: &Path) -> Result<()> {
        Self::write_table(merchant_path, &self.merchant_by_id)?;
        Self::write_table(consumer_path, &self.consumer_by_id)
    }

    pub fn merchant_table(&self) -> &[usize] {
        &self.merchant_by_id
    }

    pub fn consumer_table(&self) -> &[usize] {
        &self.consumer_by_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic_log, GeneratorConfig};

    /// Exhaustive contiguous-partition oracle minimizing the max-min
    /// weight imbalance; used to sanity-check the greedy cut.
    fn best_contiguous_imbalance(weights: &[u64], n: usize) -> u64 {
        fn recurse(weights: &[u64], n: usize) -> Vec<Vec<u64>> {
            if n == 1 {
                return vec![vec![weights.iter().sum()]];
            }
            let mut out = Vec::new();
            for cut in 1..=(weights.len() - n + 1) {
                let head: u64 = weights[..cut].iter().sum();
                for mut rest in recurse(&weights[cut..], n - 1) {
                    let mut v = vec![head];
                    v.append(&mut rest);
                    out.push(v);
                }
            }
            out
        }
        recurse(weights, n)
            .into_iter()
            .map(|v| v.iter().max().unwrap() - v.iter().min().unwrap())
            .min()
            .unwrap()
    }

    fn imbalance(weights: &[u64], assignment: &[usize], n: usize) -> u64 {
        let mut per = vec![0u64; n];
        for (pos, &c) in assignment.iter().enumerate() {
            per[c] += weights[pos];
        }
        per.iter().max().unwrap() - per.iter().min().unwrap()
    }

    #[test]
    fn greedy_cut_matches_oracle_on_reference_cases() {
        // presences by revenue rank [10, 6, 3, 1], N=2 -> {rank1}, {rest}
        let weights = [10u64, 6, 3, 1];
        let cut = greedy_prefix_cut(&weights, 2);
        assert_eq!(cut, vec![0, 1, 1, 1]);
        assert_eq!(
            imbalance(&weights, &cut, 2),
            best_contiguous_imbalance(&weights, 2)
        );

        // requests by revenue rank [7, 1, 1, 1], L=2 -> {rank1}, {rank2..4}
        let weights = [7u64, 1, 1, 1];
        let cut = greedy_prefix_cut(&weights, 2);
        assert_eq!(cut, vec![0, 1, 1, 1]);
        assert_eq!(
            imbalance(&weights, &cut, 2),
            best_contiguous_imbalance(&weights, 2)
        );
    }

    #[test]
    fn single_cluster_takes_everything() {
        assert_eq!(greedy_prefix_cut(&[5, 2, 9], 1), vec![0, 0, 0]);
    }

    #[test]
    fn equal_weights_split_one_each() {
        assert_eq!(greedy_prefix_cut(&[4, 4, 4], 3), vec![0, 1, 2]);
        // 4 consumers, requests [4,4,4,4], L=2 -> {c1,c2}, {c3,c4}
        assert_eq!(greedy_prefix_cut(&[4, 4, 4, 4], 2), vec![0, 0, 1, 1]);
    }

    #[test]
    fn every_cluster_is_non_empty_even_with_skewed_tail() {
        // A huge weight late in the ranking must not starve later clusters.
        let cut = greedy_prefix_cut(&[1, 1, 98], 3);
        assert_eq!(cut, vec![0, 1, 2]);
    }

    fn small_log() -> Vec<AuctionLogRecord> {
        generate_synthetic_log(
            &GeneratorConfig {
                merchants: 20,
                consumers: 30,
                requests: 200,
                candidates_per_request: 6,
                ..GeneratorConfig::default()
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn assignment_covers_every_entity_and_is_deterministic() {
        let records = small_log();
        let a = ClusterAssignment::build(&records, 3, 4, 3, 0.0).unwrap();
        let b = ClusterAssignment::build(&records, 3, 4, 3, 0.0).unwrap();
        assert_eq!(a.merchant_table(), b.merchant_table());
        assert_eq!(a.consumer_table(), b.consumer_table());
        for rec in &records {
            assert!(a.consumer_cluster(rec.consumer_id).is_some());
            for c in &rec.candidates {
                assert!(a.merchant_cluster(c.merchant_id).is_some());
            }
        }
    }

    #[test]
    fn clusters_are_contiguous_in_revenue_ranking() {
        let records = small_log();
        let features = manual_replay_features(&records, 3, 0.0).unwrap();
        let clusters = cluster_merchants_by_presence(&features, 3).unwrap();
        // cluster index never decreases along the ranking
        for pair in clusters.cluster_by_rank.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
        // and revenue never increases along the ranking
        for pair in clusters.ranked_ids.windows(2) {
            assert!(
                features.merchant_revenue[pair[0] as usize]
                    >= features.merchant_revenue[pair[1] as usize]
            );
        }
        let sizes: usize = clusters.cluster_by_rank.len();
        let distinct = features.merchant_presence.iter().filter(|&&p| p > 0).count();
        assert_eq!(sizes, distinct);
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let records = small_log();
        let features = manual_replay_features(&records, 3, 0.0).unwrap();
        match cluster_merchants_by_presence(&features, 10_000) {
            Err(Error::TooManyClusters { .. }) => {}
            other => panic!("expected TooManyClusters, got {other:?}"),
        }
    }
}
