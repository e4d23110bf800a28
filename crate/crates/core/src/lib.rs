//! Market simulator and learning framework for budget-constrained
//! real-time bidding with clustered agents.
//!
//! The crate is organised around a replayable auction log:
//!
//! - [`market`] settles one auction end-to-end: eCPM ranking, second-price
//!   (GSP) pricing, expected-value settlement and budget accounting.
//! - [`dataio`] defines the log file format, a synthetic log generator and
//!   a streaming reader.
//! - [`clustering`] groups merchants and consumers into revenue-ranked
//!   clusters with balanced presence/request shares.
//! - [`state`] maintains the shared cluster-level market state, the
//!   executed-action distribution and transition records.
//! - [`neural`] is a small fully-connected network with exact analytic
//!   gradients, Adam/SGD updates and Polyak target blending.
//! - [`agents`] implements the coordinated multi-agent bidder and the
//!   manual, bandit, advantage actor-critic and single-agent
//!   deterministic-policy baselines.
//! - [`simulator`] orchestrates episodes, training loops and experiment
//!   sweeps over a worker pool.
//! - [`metrics`] computes revenue/ROI/CPA reports and Pareto comparisons.

pub mod agents;
pub mod clustering;
pub mod config;
pub mod dataio;
pub mod market;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod simulator;
pub mod state;

mod error;

pub use error::{Error, Result};
