//! Evaluation metrics: revenue, ROI, CPA, spend fraction and Pareto
//! comparison of per-cluster revenue profiles.

use std::io::Write;
use std::path::Path;

use crate::simulator::EpisodeResult;
use crate::Result;

/// Metrics for one agent cluster (or the market total).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMetrics {
    pub revenue: f64,
    pub cost: f64,
    /// Expected click count (sum of pctr over won impressions).
    pub click: f64,
    pub spend_fraction: f64,
    /// revenue / cost; absent when cost is zero.
    pub roi: Option<f64>,
    /// cost / click; absent when click is zero.
    pub cpa: Option<f64>,
}

fn cluster_metrics(revenue: f64, cost: f64, click: f64, spend_fraction: f64) -> ClusterMetrics {
    ClusterMetrics {
        revenue,
        cost,
        click,
        spend_fraction,
        roi: (cost > 0.0).then(|| revenue / cost),
        cpa: (click > 0.0).then(|| cost / click),
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_cluster: Vec<ClusterMetrics>,
    pub total: ClusterMetrics,
}

impl MetricsReport {
    pub fn cluster_revenues(&self) -> Vec<f64> {
        self.per_cluster.iter().map(|c| c.revenue).collect()
    }
}

/// Aggregates an episode result into per-cluster and total metrics.
pub fn compute_metrics(result: &EpisodeResult) -> MetricsReport {
    let per_cluster: Vec<ClusterMetrics> = result
        .per_agent
        .iter()
        .map(|a| cluster_metrics(a.revenue, a.cost, a.click, a.spend_fraction()))
        .collect();
    let budget: f64 = result.per_agent.iter().map(|a| a.budget).sum();
    let spent: f64 = result.per_agent.iter().map(|a| a.ledger_spent).sum();
    let total = cluster_metrics(
        result.total_revenue(),
        result.total_cost(),
        result.total_click(),
        if budget > 0.0 { spent / budget } else { 0.0 },
    );
    MetricsReport { per_cluster, total }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParetoOrdering {
    ADominates,
    BDominates,
    Incomparable,
}

/// `A` dominates iff every cluster revenue in `A` is >= the one in `B`
/// and at least one is strictly greater.
pub fn pareto_compare(a: &[f64], b: &[f64]) -> ParetoOrdering {
    assert_eq!(a.len(), b.len(), "profiles must have equal cluster counts");
    let a_ge = a.iter().zip(b).all(|(x, y)| x >= y);
    let b_ge = a.iter().zip(b).all(|(x, y)| y >= x);
    let a_gt = a.iter().zip(b).any(|(x, y)| x > y);
    let b_gt = a.iter().zip(b).any(|(x, y)| y > x);
    if a_ge && a_gt {
        ParetoOrdering::ADominates
    } else if b_ge && b_gt {
        ParetoOrdering::BDominates
    } else {
        ParetoOrdering::Incomparable
    }
}

pub const METRICS_CSV_HEADER: &str = "experiment,cluster,revenue,cost,roi,cpa,click,spend_fraction";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn metrics_row(experiment: &str, cluster: &str, m: &ClusterMetrics) -> String {
    format!(
        "{experiment},{cluster},{:.6},{:.6},{},{},{:.6},{:.6}",
        m.revenue,
        m.cost,
        opt(m.roi),
        opt(m.cpa),
        m.click,
        m.spend_fraction
    )
}

/// Writes one row per (experiment, cluster) plus a total row per experiment.
pub fn write_metrics_csv(path: &Path, reports: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for (experiment, report) in reports {
        for (idx, m) in report.per_cluster.iter().enumerate() {
            writeln!(w, "{}", metrics_row(experiment, &idx.to_string(), m))?;
        }
        writeln!(w, "{}", metrics_row(experiment, "total", &report.total))?;
    }
    w.flush()?;
    Ok(())
}
