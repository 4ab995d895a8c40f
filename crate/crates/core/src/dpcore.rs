//! Differential-privacy arithmetic shared by every workflow: per-sample
//! clipping, keyed Gaussian noise, gradient finalization, and the DP-SGD /
//! DP-Adam parameter updates.
//!
//! # Noise keying
//!
//! Noise for element `i` of layer `l` at step `s` is a pure function of
//! `(seed, l, s, i)`:
//!
//! 1. The four words are absorbed into a 64-bit state, one SplitMix64
//!    finalizer round per word (`h = mix(h + 0x9E3779B97F4A7C15 ^ word)`).
//! 2. Two further rounds give `x1 = mix(h ^ 1)`, `x2 = mix(h ^ 2)`.
//! 3. `u1 = ((x1 >> 11) + 1)·2⁻⁵³ ∈ (0, 1]`, `u2 = (x2 >> 11)·2⁻⁵³ ∈ [0, 1)`.
//! 4. `z = √(−2 ln u1)·cos(2π u2)` (Box–Muller, first output only).
//!
//! `ln` and `cos` come from `libm`, so draws are bit-stable across
//! platforms. This construction is frozen; changing it changes every noisy
//! result in the repository.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{frob_norm_sq, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DPConfig {
    pub clip_c: f64,
    pub sigma: f64,
    #[serde(default)]
    pub reduction: Reduction,
    pub seed: u64,
    #[serde(default)]
    pub layer_id: u64,
    #[serde(default)]
    pub step: u64,
}

impl DPConfig {
    pub fn new(clip_c: f64, sigma: f64, reduction: Reduction, seed: u64) -> Result<Self> {
        let cfg = Self { clip_c, sigma, reduction, seed, layer_id: 0, step: 0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_c.is_nan() || self.clip_c <= 0.0 {
            return Err(Error::usage(format!("clip_c must be > 0, got {}", self.clip_c)));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::usage(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn with_layer(mut self, layer_id: u64) -> Self {
        self.layer_id = layer_id;
        self
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    /// Noise added to flat element `index` of the layer gradient.
    pub fn noise_at(&self, index: u64) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        self.sigma * self.clip_c * keyed_gaussian(self.seed, self.layer_id, self.step, index)
    }
}

/// `min(1, C/‖g‖)`, with 1 for a zero gradient.
pub fn clip_factor<S: Scalar>(norm_sq: S, clip_c: S) -> S {
    if norm_sq <= S::zero() {
        return S::one();
    }
    let norm = norm_sq.sqrt();
    if norm <= clip_c {
        S::one()
    } else {
        clip_c / norm
    }
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal draw keyed by `(seed, layer_id, step, flat_index)`.
pub fn keyed_gaussian(seed: u64, layer_id: u64, step: u64, flat_index: u64) -> f64 {
    let mut h = 0u64;
    for word in [seed, layer_id, step, flat_index] {
        h = mix64(h.wrapping_add(GAMMA) ^ word);
    }
    let x1 = mix64(h ^ 1);
    let x2 = mix64(h ^ 2);
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((x1 >> 11) + 1) as f64 * SCALE;
    let u2 = (x2 >> 11) as f64 * SCALE;
    (-2.0 * libm::log(u1)).sqrt() * libm::cos(2.0 * std::f64::consts::PI * u2)
}

/// Reduces one summed element and adds its noise.
///
/// Every workflow and the reference finalize through this function, so a
/// given clipped sum maps to the same bits no matter how it was tiled.
pub fn finalize_element<S: Scalar>(sum: S, batch: usize, cfg: &DPConfig, flat_index: u64) -> S {
    let base = match cfg.reduction {
        Reduction::Sum => sum,
        Reduction::Mean => sum / S::from_f64_lossy(batch as f64),
    };
    if cfg.sigma == 0.0 {
        base
    } else {
        base + S::from_f64_lossy(cfg.noise_at(flat_index))
    }
}

/// Applies the reduction and exactly one noise draw per element.
pub fn finalize_gradient<S: Scalar>(grad_sum: &Tensor<S>, batch: usize, cfg: &DPConfig) -> Result<Tensor<S>> {
    if batch == 0 {
        return Err(Error::usage("finalize_gradient needs a batch size of at least 1"));
    }
    cfg.validate()?;
    let data = grad_sum.data().iter().enumerate().map(|(i, &s)| finalize_element(s, batch, cfg, i as u64)).collect();
    Tensor::new(grad_sum.shape().to_vec(), data)
}

fn clipped_sum<S: Scalar>(per_sample_grads: &[Tensor<S>], clip_c: f64) -> Result<Tensor<S>> {
    let first = per_sample_grads.first().ok_or_else(|| Error::usage("per-sample gradient list is empty"))?;
    let c = S::from_f64_lossy(clip_c);
    let mut acc = vec![S::zero(); first.len()];
    for g in per_sample_grads {
        if g.shape() != first.shape() {
            return Err(Error::Shape { lhs: first.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        let f = clip_factor(frob_norm_sq(g.data()), c);
        for (a, &x) in acc.iter_mut().zip(g.data()) {
            *a += x * f;
        }
    }
    Tensor::new(first.shape().to_vec(), acc)
}

/// Clips every sample against `cfg.clip_c`, sums, and finalizes.
pub fn per_layer_process<S: Scalar>(per_sample_grads: &[Tensor<S>], cfg: &DPConfig) -> Result<Tensor<S>> {
    let sum = clipped_sum(per_sample_grads, cfg.clip_c)?;
    finalize_gradient(&sum, per_sample_grads.len(), cfg)
}

/// Combines clipped micro-batch sums and finalizes once for the logical batch.
pub fn accumulate_micro_batches<S: Scalar>(
    partials: &[Tensor<S>],
    total_batch: usize,
    cfg: &DPConfig,
) -> Result<Tensor<S>> {
    let first = partials.first().ok_or_else(|| Error::usage("no micro-batch partials"))?;
    let mut acc = vec![S::zero(); first.len()];
    for p in partials {
        if p.shape() != first.shape() {
            return Err(Error::Shape { lhs: first.shape().to_vec(), rhs: p.shape().to_vec() });
        }
        for (a, &x) in acc.iter_mut().zip(p.data()) {
            *a += x;
        }
    }
    finalize_gradient(&Tensor::new(first.shape().to_vec(), acc)?, total_batch, cfg)
}

/// `θ − η·g̃`.
pub fn dp_sgd_step<S: Scalar>(theta: &Tensor<S>, g_tilde: &Tensor<S>, eta: S) -> Result<Tensor<S>> {
    if theta.shape() != g_tilde.shape() {
        return Err(Error::Shape { lhs: theta.shape().to_vec(), rhs: g_tilde.shape().to_vec() });
    }
    let data = theta.data().iter().zip(g_tilde.data()).map(|(&t, &g)| t - eta * g).collect();
    Tensor::new(theta.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub theta: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub eta: S,
    pub beta1: S,
    pub beta2: S,
    pub eps_adam: S,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    /// Fresh state with zero moments.
    pub fn new(theta: Tensor<S>, eta: S, beta1: S, beta2: S, eps_adam: S) -> Result<Self> {
        let zeros = Tensor::zeros(theta.shape().to_vec())?;
        let state = Self { m: zeros.clone(), v: zeros, theta, eta, beta1, beta2, eps_adam, step: 0 };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= S::zero() && b < S::one()) {
                return Err(Error::usage(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.m.shape() != self.theta.shape() || self.v.shape() != self.theta.shape() {
            return Err(Error::Shape { lhs: self.theta.shape().to_vec(), rhs: self.m.shape().to_vec() });
        }
        Ok(())
    }
}

/// One DP-Adam update, without bias correction:
/// `m ← β1 m + (1−β1) g̃`, `v ← β2 v + (1−β2) g̃²`, `θ ← θ − η/(√v + ε)·m`.
pub fn dp_adam_step<S: Scalar>(state: &OptimizerState<S>, g_tilde: &Tensor<S>) -> Result<OptimizerState<S>> {
    state.validate()?;
    if g_tilde.shape() != state.theta.shape() {
        return Err(Error::Shape { lhs: state.theta.shape().to_vec(), rhs: g_tilde.shape().to_vec() });
    }
    let one = S::one();
    let mut next = state.clone();
    let it = next
        .theta
        .data_mut()
        .iter_mut()
        .zip(next.m.data_mut().iter_mut())
        .zip(next.v.data_mut().iter_mut())
        .zip(g_tilde.data());
    for (((theta, m), v), &g) in it {
        *m = state.beta1 * *m + (one - state.beta1) * g;
        *v = state.beta2 * *v + (one - state.beta2) * g * g;
        let eta_hat = state.eta / (v.sqrt() + state.eps_adam);
        *theta -= eta_hat * *m;
    }
    next.step += 1;
    Ok(next)
}
