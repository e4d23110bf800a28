//! Exploration noise processes for the continuous bid-adjust actions.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Gaussian,
    /// Mean-reverting process with persistent per-action state.
    Ou { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub sigma: f64,
    /// Multiplicative sigma decay applied per episode.
    pub decay: f64,
    /// Probability per draw of replacing the vector with a uniform jump
    /// in [-1, 1] per dimension (heavy-tailed exploration; 0 disables).
    pub jump_prob: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mode: NoiseMode::Gaussian,
            sigma: 0.2,
            decay: 0.995,
            jump_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExplorationNoise {
    pub config: NoiseConfig,
    pub sigma: f64,
    /// Persistent state per action dimension (mean-reverting mode).
    pub state: Vec<f64>,
    rng: ChaCha12Rng,
}

impl ExplorationNoise {
    pub fn new(config: NoiseConfig, dims: usize, seed: u64) -> Self {
        Self {
            config,
            sigma: config.sigma,
            state: vec![0.0; dims],
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Draws one noise vector over the action dimensions.
    pub fn sample(&mut self) -> Vec<f64> {
        if self.config.jump_prob > 0.0 {
            use rand::Rng;
            if self.rng.random::<f64>() < self.config.jump_prob {
                // jump: a uniform target minus the mean cancels in the
                // caller's (output + noise), landing anywhere in the box
                return (0..self.state.len())
                    .map(|_| self.rng.random_range(-2.0..=2.0))
                    .collect();
            }
        }
        match self.config.mode {
            NoiseMode::Gaussian => (0..self.state.len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    self.sigma * z
                })
                .collect(),
            NoiseMode::Ou { theta } => {
                for s in &mut self.state {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    *s += theta * (0.0 - *s) + self.sigma * z;
                }
                self.state.clone()
            }
        }
    }

    /// Episode boundary: decay sigma and reset the persistent state.
    pub fn end_episode(&mut self) {
        self.sigma *= self.config.decay;
        self.state.fill(0.0);
    }
}
