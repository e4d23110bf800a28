//! Flat key/value experiment configuration. Every episode, agent and
//! generator knob is a scalar key; list-valued settings are
//! comma-separated strings. See the repository README for the schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, Algorithm, NoiseConfig, NoiseMode};
use crate::dataio::GeneratorConfig;
use crate::simulator::{EpisodeConfig, ExperimentSpec};
use crate::state::RewardConfig;
use crate::{Error, Result};

fn default_train_log() -> String {
    "train.log".into()
}

fn default_output_dir() -> String {
    "out".into()
}

fn d_usize<const V: usize>() -> usize {
    V
}

fn d_u64<const V: u64>() -> u64 {
    V
}

fn d_f64_thirds() -> f64 {
    1.0 / 3.0
}

fn d_true() -> bool {
    true
}

macro_rules! f64_default {
    ($name:ident, $value:expr) => {
        fn $name() -> f64 {
            $value
        }
    };
}

f64_default!(d_bid_median, 1.0);
f64_default!(d_bid_sigma, 0.6);
f64_default!(d_ppb_median, 80.0);
f64_default!(d_ppb_sigma, 1.0);
f64_default!(d_quality_sigma, 1.1);
f64_default!(d_value_sigma, 0.9);
f64_default!(d_ctr_base, 0.04);
f64_default!(d_cvr_base, 0.02);
f64_default!(d_ctr_conc, 60.0);
f64_default!(d_cvr_conc, 10.0);
f64_default!(d_temporal_shift, 1.0);
f64_default!(d_cvr_ramp, 4.0);
f64_default!(d_gamma, 1.0);
f64_default!(d_range, 0.9);
f64_default!(d_actor_lr, 1e-4);
f64_default!(d_critic_lr, 1e-3);
f64_default!(d_tau, 0.01);
f64_default!(d_noise_sigma, 0.2);
f64_default!(d_noise_decay, 0.995);
f64_default!(d_noise_theta, 0.15);
f64_default!(d_bandit_epsilon, 0.1);
f64_default!(d_reserve, 0.0);

fn d_algorithm() -> String {
    "dcmab".into()
}

fn d_reward_mode() -> String {
    "self_interest".into()
}

fn d_noise_mode() -> String {
    "gaussian".into()
}

fn d_sweep_clusters() -> String {
    "1,2,3,4,5".into()
}

fn d_sweep_fractions() -> String {
    "0.3333,0.5,0.6667,0.8333,1.0".into()
}

fn d_sweep_seeds() -> String {
    "1,2,3".into()
}

/// The full flat configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    // --- files ---
    #[serde(default = "default_train_log")]
    pub train_log: String,
    #[serde(default)]
    pub test_log: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,

    // --- synthetic log generator ---
    #[serde(default = "d_usize::<300>")]
    pub gen_merchants: usize,
    #[serde(default = "d_usize::<1000>")]
    pub gen_consumers: usize,
    #[serde(default = "d_usize::<20000>")]
    pub gen_requests: usize,
    #[serde(default = "d_usize::<20>")]
    pub gen_candidates_per_request: usize,
    #[serde(default = "d_bid_median")]
    pub gen_bid_median: f64,
    #[serde(default = "d_bid_sigma")]
    pub gen_bid_sigma: f64,
    #[serde(default = "d_ppb_median")]
    pub gen_ppb_median: f64,
    #[serde(default = "d_ppb_sigma")]
    pub gen_ppb_sigma: f64,
    #[serde(default = "d_quality_sigma")]
    pub gen_quality_sigma: f64,
    #[serde(default = "d_value_sigma")]
    pub gen_value_sigma: f64,
    #[serde(default = "d_ctr_base")]
    pub gen_ctr_base: f64,
    #[serde(default = "d_cvr_base")]
    pub gen_cvr_base: f64,
    #[serde(default = "d_ctr_conc")]
    pub gen_ctr_concentration: f64,
    #[serde(default = "d_cvr_conc")]
    pub gen_cvr_concentration: f64,
    #[serde(default = "d_temporal_shift")]
    pub gen_temporal_value_shift: f64,
    #[serde(default = "d_cvr_ramp")]
    pub gen_temporal_cvr_ramp: f64,
    /// Seed for the test log; the train log uses `seed`.
    #[serde(default = "d_u64::<10_000>")]
    pub gen_test_seed_offset: u64,

    // --- clustering ---
    #[serde(default = "d_usize::<3>")]
    pub n_merchant_clusters: usize,
    #[serde(default = "d_usize::<3>")]
    pub n_consumer_clusters: usize,

    // --- episode mechanics ---
    #[serde(default = "d_usize::<300>")]
    pub episodes: usize,
    #[serde(default = "d_usize::<3>")]
    pub steps_per_episode: usize,
    #[serde(default = "d_u64::<3600>")]
    pub interval_seconds: u64,
    #[serde(default = "d_usize::<3>")]
    pub slots: usize,
    #[serde(default = "d_usize::<1>")]
    pub worker_count: usize,
    #[serde(default = "d_f64_thirds")]
    pub budget_fraction: f64,
    #[serde(default = "d_reserve")]
    pub reserve_price: f64,
    #[serde(default = "d_usize::<50>")]
    pub convergence_window: usize,
    #[serde(default)]
    pub racy_workers: bool,

    // --- agents ---
    #[serde(default = "d_algorithm")]
    pub algorithm: String,
    /// self_interest | coordinated | partial
    #[serde(default = "d_reward_mode")]
    pub reward_mode: String,
    /// Comma-separated agent indices for partial coordination.
    #[serde(default)]
    pub coordinated_agents: String,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_usize::<32>")]
    pub minibatch_size: usize,
    #[serde(default = "d_usize::<10000>")]
    pub replay_capacity: usize,
    #[serde(default = "d_range")]
    pub range: f64,
    #[serde(default = "d_actor_lr")]
    pub actor_lr: f64,
    #[serde(default = "d_critic_lr")]
    pub critic_lr: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_noise_mode")]
    pub noise_mode: String,
    #[serde(default = "d_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "d_noise_decay")]
    pub noise_decay: f64,
    #[serde(default = "d_noise_theta")]
    pub noise_theta: f64,
    #[serde(default)]
    pub noise_jump_prob: f64,
    #[serde(default = "d_usize::<32>")]
    pub bandit_candidates: usize,
    #[serde(default = "d_bandit_epsilon")]
    pub bandit_epsilon: f64,
    #[serde(default)]
    pub paper_literal_loss: bool,
    #[serde(default = "d_usize::<1>")]
    pub updates_per_step: usize,
    #[serde(default = "d_usize::<300>")]
    pub actor_hidden: usize,
    #[serde(default = "d_usize::<100>")]
    pub critic_hidden: usize,

    // --- run ---
    #[serde(default = "d_u64::<42>")]
    pub seed: u64,
    #[serde(default = "d_true")]
    pub write_checkpoints: bool,

    // --- sweeps ---
    #[serde(default = "d_sweep_clusters")]
    pub sweep_cluster_counts: String,
    #[serde(default = "d_sweep_fractions")]
    pub sweep_budget_fractions: String,
    #[serde(default = "d_sweep_seeds")]
    pub sweep_seeds: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are complete")
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|item| {
            item.trim()
                .parse::<T>()
                .map_err(|e| Error::Config(format!("{what}: bad entry {item:?}: {e}")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            merchants: self.gen_merchants,
            consumers: self.gen_consumers,
            requests: self.gen_requests,
            candidates_per_request: self.gen_candidates_per_request,
            intervals: self.steps_per_episode,
            interval_seconds: self.interval_seconds,
            bid_median: self.gen_bid_median,
            bid_sigma: self.gen_bid_sigma,
            ppb_median: self.gen_ppb_median,
            ppb_sigma: self.gen_ppb_sigma,
            quality_sigma: self.gen_quality_sigma,
            value_sigma: self.gen_value_sigma,
            ctr_base: self.gen_ctr_base,
            cvr_base: self.gen_cvr_base,
            ctr_concentration: self.gen_ctr_concentration,
            cvr_concentration: self.gen_cvr_concentration,
            temporal_value_shift: self.gen_temporal_value_shift,
            temporal_cvr_ramp: self.gen_temporal_cvr_ramp,
        }
    }

    pub fn reward_config(&self) -> Result<RewardConfig> {
        match self.reward_mode.to_ascii_lowercase().as_str() {
            "self_interest" | "self-interest" => Ok(RewardConfig::SelfInterest),
            "coordinated" | "coord" => Ok(RewardConfig::Coordinated),
            "partial" => {
                let set: Vec<usize> = parse_list(&self.coordinated_agents, "coordinated_agents")?;
                if set.is_empty() {
                    return Err(Error::Config(
                        "partial reward mode needs coordinated_agents".into(),
                    ));
                }
                Ok(RewardConfig::Partial(set))
            }
            other => Err(Error::Config(format!("unknown reward_mode {other:?}"))),
        }
    }

    pub fn noise_config(&self) -> Result<NoiseConfig> {
        let mode = match self.noise_mode.to_ascii_lowercase().as_str() {
            "gaussian" => NoiseMode::Gaussian,
            "ou" => NoiseMode::Ou {
                theta: self.noise_theta,
            },
            other => return Err(Error::Config(format!("unknown noise_mode {other:?}"))),
        };
        Ok(NoiseConfig {
            mode,
            sigma: self.noise_sigma,
            decay: self.noise_decay,
            jump_prob: self.noise_jump_prob,
        })
    }

    pub fn agent_config(&self) -> Result<AgentConfig> {
        let algorithm: Algorithm = self.algorithm.parse()?;
        let config = AgentConfig {
            algorithm,
            gamma: self.gamma,
            minibatch_size: self.minibatch_size,
            replay_capacity: self.replay_capacity,
            range: self.range,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            tau: self.tau,
            noise: self.noise_config()?,
            bandit_candidates: self.bandit_candidates,
            bandit_epsilon: self.bandit_epsilon,
            paper_literal_loss: self.paper_literal_loss,
            updates_per_step: self.updates_per_step,
            actor_hidden: self.actor_hidden,
            critic_hidden: self.critic_hidden,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn episode_config(&self) -> Result<EpisodeConfig> {
        let config = EpisodeConfig {
            steps_per_episode: self.steps_per_episode,
            interval_seconds: self.interval_seconds,
            episodes: self.episodes,
            slots: self.slots,
            worker_count: self.worker_count,
            budget_fraction: self.budget_fraction,
            reward: self.reward_config()?,
            seed: self.seed,
            reserve_price: self.reserve_price,
            convergence_window: self.convergence_window,
            racy_workers: self.racy_workers,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn experiment_spec(&self) -> Result<ExperimentSpec> {
        Ok(ExperimentSpec {
            n_merchant_clusters: self.n_merchant_clusters,
            n_consumer_clusters: self.n_consumer_clusters,
            episode: self.episode_config()?,
            agent: self.agent_config()?,
        })
    }

    pub fn cluster_sweep_counts(&self) -> Result<Vec<usize>> {
        parse_list(&self.sweep_cluster_counts, "sweep_cluster_counts")
    }

    pub fn budget_sweep_fractions(&self) -> Result<Vec<f64>> {
        parse_list(&self.sweep_budget_fractions, "sweep_budget_fractions")
    }

    pub fn sweep_seed_list(&self) -> Result<Vec<u64>> {
        parse_list(&self.sweep_seeds, "sweep_seeds")
    }

    pub fn output_path(&self, file: &str) -> PathBuf {
        Path::new(&self.output_dir).join(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = ExperimentConfig::from_str("").unwrap();
        assert_eq!(cfg.n_merchant_clusters, 3);
        assert_eq!(cfg.episodes, 300);
        assert_eq!(cfg.algorithm, "dcmab");
        assert!((cfg.budget_fraction - 1.0 / 3.0).abs() < 1e-12);
        assert!(cfg.experiment_spec().is_ok());
    }

    #[test]
    fn flat_keys_parse() {
        let cfg = ExperimentConfig::from_str(
            "algorithm = \"ddpg\"\nreward_mode = \"partial\"\ncoordinated_agents = \"0, 2\"\nseed = 7\nnoise_mode = \"ou\"\n",
        )
        .unwrap();
        assert_eq!(cfg.agent_config().unwrap().algorithm, Algorithm::Ddpg);
        assert_eq!(
            cfg.reward_config().unwrap(),
            RewardConfig::Partial(vec![0, 2])
        );
        assert!(matches!(
            cfg.noise_config().unwrap().mode,
            NoiseMode::Ou { .. }
        ));
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_str("no_such_key = 1\n").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let cfg = ExperimentConfig::from_str("algorithm = \"nope\"\n").unwrap();
        assert!(cfg.agent_config().is_err());
        let cfg = ExperimentConfig::from_str("reward_mode = \"partial\"\n").unwrap();
        assert!(cfg.reward_config().is_err());
        let cfg = ExperimentConfig::from_str("range = 1.5\n").unwrap();
        assert!(cfg.agent_config().is_err());
    }

    #[test]
    fn sweep_lists_parse() {
        let cfg = ExperimentConfig::from_str(
            "sweep_cluster_counts = \"1,2,3\"\nsweep_budget_fractions = \"0.5,1.0\"\nsweep_seeds = \"9\"\n",
        )
        .unwrap();
        assert_eq!(cfg.cluster_sweep_counts().unwrap(), vec![1, 2, 3]);
        assert_eq!(cfg.budget_sweep_fractions().unwrap(), vec![0.5, 1.0]);
        assert_eq!(cfg.sweep_seed_list().unwrap(), vec![9]);
    }
}
