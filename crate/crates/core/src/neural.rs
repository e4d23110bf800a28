//! Minimal fully-connected networks with exact analytic gradients with
//! respect to both parameters and inputs, Adam/SGD updates, and Polyak
//! target blending.
//!
//! Two network shapes are provided: a plain [`Mlp`], and a [`SplitNet`]
//! whose first hidden layer receives the state path's activations
//! concatenated with an extra input block (actions and the executed-action
//! distribution enter action-value networks there).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Feed-forward network: per layer a dense weight matrix (row-major,
/// `out_dim x in_dim`), a bias vector and an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    specs: Vec<LayerSpec>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Intermediate values of one forward pass, retained for backward.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    preacts: Vec<Vec<f64>>,
}

/// Parameter gradients mirroring the network's layout.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros(net: &Mlp) -> Self {
        Self {
            d_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            d_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.d_weights {
            for v in w.iter_mut() {
                *v *= s;
            }
        }
        for b in &mut self.d_biases {
            for v in b.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        let w: f64 = self
            .d_weights
            .iter()
            .flat_map(|w| w.iter())
            .map(|v| v * v)
            .sum();
        let b: f64 = self
            .d_biases
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum();
        w + b
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::invalid("network needs at least one layer"));
    }
    for spec in specs {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be >= 1"));
        }
    }
    for pair in specs.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::ShapeMismatch(format!(
                "layer output {} feeds layer input {}",
                pair[0].out_dim, pair[1].in_dim
            )));
        }
    }
    Ok(())
}

impl Mlp {
    /// Weights drawn uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)],
    /// biases zero.
    pub fn init(specs: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        validate_specs(&specs)?;
        let mut weights = Vec::with_capacity(specs.len());
        let mut biases = Vec::with_capacity(specs.len());
        for spec in &specs {
            let bound = 1.0 / (spec.in_dim as f64).sqrt();
            let w = (0..spec.in_dim * spec.out_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; spec.out_dim]);
        }
        Ok(Self {
            specs,
            weights,
            biases,
        })
    }

    pub fn zeros(specs: Vec<LayerSpec>) -> Result<Self> {
        validate_specs(&specs)?;
        let weights = specs
            .iter()
            .map(|s| vec![0.0; s.in_dim * s.out_dim])
            .collect();
        let biases = specs.iter().map(|s| vec![0.0; s.out_dim]).collect();
        Ok(Self {
            specs,
            weights,
            biases,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.specs
            .iter()
            .map(|s| s.in_dim * s.out_dim + s.out_dim)
            .sum()
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    fn affine(&self, layer: usize, input: &[f64], out: &mut Vec<f64>) {
        let spec = &self.specs[layer];
        debug_assert_eq!(input.len(), spec.in_dim);
        let w = &self.weights[layer];
        let b = &self.biases[layer];
        out.clear();
        out.reserve(spec.out_dim);
        for o in 0..spec.out_dim {
            let row = &w[o * spec.in_dim..(o + 1) * spec.in_dim];
            let mut z = b[o];
            for (wi, xi) in row.iter().zip(input) {
                z += wi * xi;
            }
            out.push(z);
        }
    }

    /// Forward pass retaining the cache for a subsequent backward.
    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, MlpCache) {
        assert_eq!(input.len(), self.in_dim(), "input dimension mismatch");
        let mut inputs = Vec::with_capacity(self.specs.len());
        let mut preacts = Vec::with_capacity(self.specs.len());
        let mut current = input.to_vec();
        for layer in 0..self.specs.len() {
            let mut z = Vec::new();
            self.affine(layer, &current, &mut z);
            let activated: Vec<f64> = z
                .iter()
                .map(|&v| self.specs[layer].activation.apply(v))
                .collect();
            inputs.push(std::mem::replace(&mut current, activated));
            preacts.push(z);
        }
        (current, MlpCache { inputs, preacts })
    }

    /// Forward pass without cache (target-network evaluations).
    pub fn forward_only(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.in_dim(), "input dimension mismatch");
        let mut current = input.to_vec();
        let mut z = Vec::new();
        for layer in 0..self.specs.len() {
            self.affine(layer, &current, &mut z);
            current.clear();
            current.extend(z.iter().map(|&v| self.specs[layer].activation.apply(v)));
        }
        current
    }

    /// Scalar convenience for single-output networks.
    pub fn forward_scalar(&self, input: &[f64]) -> f64 {
        debug_assert_eq!(self.out_dim(), 1);
        self.forward_only(input)[0]
    }

    /// Exact reverse-mode gradients. Parameter gradients are accumulated
    /// into `grads` (callers zero or scale them); returns the gradient
    /// with respect to the network input.
    pub fn backward_accumulate(
        &self,
        cache: &MlpCache,
        output_grad: &[f64],
        grads: &mut MlpGrads,
    ) -> Vec<f64> {
        assert_eq!(output_grad.len(), self.out_dim(), "output grad mismatch");
        assert_eq!(cache.inputs.len(), self.specs.len(), "stale cache");
        let mut upstream = output_grad.to_vec();
        for layer in (0..self.specs.len()).rev() {
            let spec = &self.specs[layer];
            let z = &cache.preacts[layer];
            let x = &cache.inputs[layer];
            // dz = upstream (.) act'(z)
            let dz: Vec<f64> = upstream
                .iter()
                .zip(z)
                .map(|(&u, &zv)| u * spec.activation.derivative(zv))
                .collect();
            let dw = &mut grads.d_weights[layer];
            let db = &mut grads.d_biases[layer];
            for o in 0..spec.out_dim {
                db[o] += dz[o];
                let row = &mut dw[o * spec.in_dim..(o + 1) * spec.in_dim];
                let dzo = dz[o];
                for (r, xi) in row.iter_mut().zip(x) {
                    *r += dzo * xi;
                }
            }
            // dinput = W^T dz
            let w = &self.weights[layer];
            let mut dx = vec![0.0; spec.in_dim];
            for o in 0..spec.out_dim {
                let row = &w[o * spec.in_dim..(o + 1) * spec.in_dim];
                let dzo = dz[o];
                for (dxi, wi) in dx.iter_mut().zip(row) {
                    *dxi += dzo * wi;
                }
            }
            upstream = dx;
        }
        upstream
    }

    /// One-shot backward: zeroed gradients plus the input gradient.
    pub fn backward(&self, cache: &MlpCache, output_grad: &[f64]) -> (MlpGrads, Vec<f64>) {
        let mut grads = MlpGrads::zeros(self);
        let d_input = self.backward_accumulate(cache, output_grad, &mut grads);
        (grads, d_input)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wn = w.len();
            w.copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = b.len();
            b.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }
}

/// Polyak blend: `target <- tau * source + (1 - tau) * target`.
pub fn soft_update(target: &mut Mlp, source: &Mlp, tau: f64) {
    debug_assert_eq!(target.specs, source.specs);
    for (tw, sw) in target.weights.iter_mut().zip(&source.weights) {
        for (t, s) in tw.iter_mut().zip(sw) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }
    for (tb, sb) in target.biases.iter_mut().zip(&source.biases) {
        for (t, s) in tb.iter_mut().zip(sb) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        }
    }
}

/// Per-network optimizer state; step order is part of the state, so a
/// fixed seed and history reproduce identical parameter trajectories.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(net: &Mlp, config: OptimizerConfig) -> Self {
        let shapes: Vec<usize> = net
            .weights
            .iter()
            .zip(&net.biases)
            .flat_map(|(w, b)| [w.len(), b.len()])
            .collect();
        Self {
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one descent step along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) {
        match self.config.kind {
            OptimizerKind::Sgd => {
                let lr = self.config.learning_rate;
                for (layer, (w, b)) in net.weights.iter_mut().zip(&mut net.biases).enumerate() {
                    for (p, g) in w.iter_mut().zip(&grads.d_weights[layer]) {
                        *p -= lr * g;
                    }
                    for (p, g) in b.iter_mut().zip(&grads.d_biases[layer]) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let (b1, b2, eps, lr) = (
                    self.config.beta1,
                    self.config.beta2,
                    self.config.eps,
                    self.config.learning_rate,
                );
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                let n_layers = net.weights.len();
                for layer in 0..n_layers {
                    let slots = [
                        (
                            &mut net.weights[layer][..],
                            &grads.d_weights[layer][..],
                            2 * layer,
                        ),
                        (
                            &mut net.biases[layer][..],
                            &grads.d_biases[layer][..],
                            2 * layer + 1,
                        ),
                    ];
                    for (params, g, slot) in slots {
                        let m = &mut self.m[slot];
                        let v = &mut self.v[slot];
                        for k in 0..params.len() {
                            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                            let m_hat = m[k] / bc1;
                            let v_hat = v[k] / bc2;
                            params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                }
            }
        }
    }

    pub fn state_flat(&self) -> (u64, Vec<f64>) {
        let mut out = Vec::new();
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(m);
            out.extend_from_slice(v);
        }
        (self.t, out)
    }

    pub fn set_state_flat(&mut self, t: u64, flat: &[f64]) -> Result<()> {
        let expected: usize = self.m.iter().map(|m| m.len()).sum::<usize>() * 2;
        if flat.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state length {} != {}",
                flat.len(),
                expected
            )));
        }
        self.t = t;
        let mut off = 0;
        for (m, v) in self.m.iter_mut().zip(&mut self.v) {
            let mn = m.len();
            m.copy_from_slice(&flat[off..off + mn]);
            off += mn;
            let vn = v.len();
            v.copy_from_slice(&flat[off..off + vn]);
            off += vn;
        }
        Ok(())
    }
}

/// Two-branch network: the state passes through one hidden layer, whose
/// activations are concatenated with an extra input block (in the order
/// [state-path activations, extra]) and fed through the trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitNet {
    pub state_path: Mlp,
    pub trunk: Mlp,
}

#[derive(Debug, Clone)]
pub struct SplitCache {
    state: MlpCache,
    trunk: MlpCache,
}

#[derive(Debug, Clone)]
pub struct SplitGrads {
    pub state: MlpGrads,
    pub trunk: MlpGrads,
}

impl SplitGrads {
    pub fn zeros(net: &SplitNet) -> Self {
        Self {
            state: MlpGrads::zeros(&net.state_path),
            trunk: MlpGrads::zeros(&net.trunk),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.state.scale(s);
        self.trunk.scale(s);
    }
}

impl SplitNet {
    /// state -> hidden (relu); [hidden, extra] -> hidden (relu) -> 1 (linear).
    pub fn init(
        state_dim: usize,
        extra_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let state_path = Mlp::init(
            vec![LayerSpec::new(state_dim, hidden, Activation::Relu)],
            rng,
        )?;
        let trunk = Mlp::init(
            vec![
                LayerSpec::new(hidden + extra_dim, hidden, Activation::Relu),
                LayerSpec::new(hidden, 1, Activation::Linear),
            ],
            rng,
        )?;
        Ok(Self { state_path, trunk })
    }

    pub fn state_dim(&self) -> usize {
        self.state_path.in_dim()
    }

    pub fn extra_dim(&self) -> usize {
        self.trunk.in_dim() - self.state_path.out_dim()
    }

    pub fn forward(&self, state: &[f64], extra: &[f64]) -> (f64, SplitCache) {
        debug_assert_eq!(extra.len(), self.extra_dim());
        let (h, state_cache) = self.state_path.forward(state);
        let mut joint = h;
        joint.extend_from_slice(extra);
        let (out, trunk_cache) = self.trunk.forward(&joint);
        (
            out[0],
            SplitCache {
                state: state_cache,
                trunk: trunk_cache,
            },
        )
    }

    pub fn forward_only(&self, state: &[f64], extra: &[f64]) -> f64 {
        debug_assert_eq!(extra.len(), self.extra_dim());
        let mut joint = self.state_path.forward_only(state);
        joint.extend_from_slice(extra);
        self.trunk.forward_only(&joint)[0]
    }

    /// Accumulates parameter gradients and returns (d_state, d_extra).
    pub fn backward_accumulate(
        &self,
        cache: &SplitCache,
        output_grad: f64,
        grads: &mut SplitGrads,
    ) -> (Vec<f64>, Vec<f64>) {
        let d_joint = self
            .trunk
            .backward_accumulate(&cache.trunk, &[output_grad], &mut grads.trunk);
        let split = self.state_path.out_dim();
        let d_extra = d_joint[split..].to_vec();
        let d_state =
            self.state_path
                .backward_accumulate(&cache.state, &d_joint[..split], &mut grads.state);
        (d_state, d_extra)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = self.state_path.params_flat();
        out.extend(self.trunk.params_flat());
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let split = self.state_path.param_count();
        if flat.len() != split + self.trunk.param_count() {
            return Err(Error::ShapeMismatch("split net parameter length".into()));
        }
        self.state_path.set_params_flat(&flat[..split])?;
        self.trunk.set_params_flat(&flat[split..])
    }
}

pub fn soft_update_split(target: &mut SplitNet, source: &SplitNet, tau: f64) {
    soft_update(&mut target.state_path, &source.state_path, tau);
    soft_update(&mut target.trunk, &source.trunk, tau);
}

/// Optimizer pair for a [`SplitNet`].
#[derive(Debug, Clone)]
pub struct SplitOptimizer {
    pub state: Optimizer,
    pub trunk: Optimizer,
}

impl SplitOptimizer {
    pub fn new(net: &SplitNet, config: OptimizerConfig) -> Self {
        Self {
            state: Optimizer::new(&net.state_path, config),
            trunk: Optimizer::new(&net.trunk, config),
        }
    }

    pub fn step(&mut self, net: &mut SplitNet, grads: &SplitGrads) {
        self.state.step(&mut net.state_path, &grads.state);
        self.trunk.step(&mut net.trunk, &grads.trunk);
    }
}
