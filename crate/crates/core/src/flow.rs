//! The rectified-flow world model.
//!
//! A denoiser predicts, for every frame of a sequence at once, the velocity
//! `z¹ − z⁰` that transports uniform noise to the clean latent along the
//! straight line `z^τ = τ z¹ + (1−τ) z⁰`. Each frame has its own denoising
//! time, so one forward pass serves every frame of a partially denoised
//! sequence. A separate small network predicts rewards (in symlog space) and
//! terminations from clean latents.

use rand::Rng;

use crate::actor_critic::{symexp, symlog};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Matrix, Mlp};
use crate::rng::{uniform, uniform01};
use crate::window::{SeqBatch, WindowSpec};

/// Probability of fixing a clean prefix during training.
pub const CLEAN_PREFIX_PROB: f64 = 0.2;
/// The prefix length is uniform on `1..=floor(CLEAN_PREFIX_FRACTION · H)`.
pub const CLEAN_PREFIX_FRACTION: f64 = 0.7;

/// A clean trajectory segment. Frame `t` carries the reward received on
/// arriving there and whether it is terminal; `actions[t]` leads from frame
/// `t` to frame `t+1`. Frames with `valid == false` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub dim: usize,
    pub latents: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terms: Vec<bool>,
    pub valid: Vec<bool>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn latent(&self, t: usize) -> &[f64] {
        &self.latents[t * self.dim..(t + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let checks = [
            ("latents", self.latents.len(), t * self.dim),
            ("actions", self.actions.len(), t.saturating_sub(1)),
            ("terms", self.terms.len(), t),
            ("valid", self.valid.len(), t),
        ];
        for (what, actual, expected) in checks {
            if actual != expected {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// Per-frame denoising times, with a clean prefix fixed at τ = 1 with
/// probability 0.2. Returns the times and the prefix length, if any.
pub fn sample_times_with_prefix<R: Rng + ?Sized>(horizon: usize, rng: &mut R) -> (Vec<f64>, Option<usize>) {
    let mut taus: Vec<f64> = (0..horizon).map(|_| uniform01(rng)).collect();
    let max_prefix = (CLEAN_PREFIX_FRACTION * horizon as f64).floor() as usize;
    let prefix = (max_prefix >= 1 && uniform01(rng) < CLEAN_PREFIX_PROB).then(|| {
        let c = rng.random_range(1..=max_prefix);
        taus[..c].fill(1.0);
        c
    });
    (taus, prefix)
}

/// Clean targets, noise and times for one denoiser update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub seqs: usize,
    pub horizon: usize,
    pub dim: usize,
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
    pub times: Vec<f64>,
    pub prev_actions: Vec<Option<usize>>,
    pub rewards: Vec<f64>,
    pub terms: Vec<bool>,
    pub mask: Vec<bool>,
}

impl TrainBatch {
    /// Draws `U([−1,1])` noise and per-frame times for each trajectory.
    pub fn sample<R: Rng + ?Sized>(trajs: &[LatentTrajectory], rng: &mut R) -> Result<Self> {
        let first = trajs.first().ok_or(Error::EmptyBuffer)?;
        let (horizon, dim) = (first.len(), first.dim);
        let seqs = trajs.len();
        let mut b = TrainBatch {
            seqs,
            horizon,
            dim,
            clean: Vec::with_capacity(seqs * horizon * dim),
            noise: Vec::with_capacity(seqs * horizon * dim),
            times: Vec::with_capacity(seqs * horizon),
            prev_actions: Vec::with_capacity(seqs * horizon),
            rewards: Vec::with_capacity(seqs * horizon),
            terms: Vec::with_capacity(seqs * horizon),
            mask: Vec::with_capacity(seqs * horizon),
        };
        for tr in trajs {
            tr.validate()?;
            if tr.len() != horizon || tr.dim != dim {
                return Err(Error::DimensionMismatch {
                    what: "segment length",
                    expected: horizon,
                    actual: tr.len(),
                });
            }
            b.clean.extend_from_slice(&tr.latents);
            b.noise.extend((0..horizon * dim).map(|_| uniform(rng, -1.0, 1.0)));
            let (taus, _) = sample_times_with_prefix(horizon, rng);
            b.times.extend(taus);
            b.prev_actions.push(None);
            b.prev_actions.extend(tr.actions.iter().map(|&a| Some(a)));
            b.rewards.extend_from_slice(&tr.rewards);
            b.terms.extend_from_slice(&tr.terms);
            b.mask.extend_from_slice(&tr.valid);
        }
        Ok(b)
    }

    /// The partially noised sequences `τ z¹ + (1−τ) z⁰`.
    pub fn noisy(&self) -> SeqBatch {
        let mut latents = Vec::with_capacity(self.clean.len());
        for (i, (c, n)) in self.clean.iter().zip(&self.noise).enumerate() {
            let tau = self.times[i / self.dim];
            latents.push(tau * c + (1.0 - tau) * n);
        }
        SeqBatch {
            seqs: self.seqs,
            len: self.horizon,
            dim: self.dim,
            latents,
            taus: self.times.clone(),
            prev_actions: self.prev_actions.clone(),
        }
    }

    /// The clean sequences at τ = 1.
    pub fn clean_batch(&self) -> SeqBatch {
        SeqBatch {
            seqs: self.seqs,
            len: self.horizon,
            dim: self.dim,
            latents: self.clean.clone(),
            taus: vec![1.0; self.times.len()],
            prev_actions: self.prev_actions.clone(),
        }
    }

    fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `v_θ`: velocity field over causal windows of (latent, previous action, τ).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub window: WindowSpec,
    pub net: Mlp,
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        num_actions: usize,
        window: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let window = WindowSpec {
            window,
            latent_dim,
            actions: Some(num_actions),
            tau: true,
        };
        let net = Mlp::new(&[window.feature_dim(), hidden, hidden, latent_dim], rng);
        Self { window, net }
    }

    /// One batched pass producing a velocity row per requested `(seq, frame)`.
    pub fn velocities(&self, batch: &SeqBatch, rows: &[(usize, usize)]) -> Result<Matrix> {
        let x = self.window.features(batch, rows)?;
        self.net.forward(&x)
    }
}

fn ensure_finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::non_finite(what))
    }
}

/// Rectified-flow regression loss `mean ‖v_θ − (z¹ − z⁰)‖²` over valid frames,
/// with its parameter gradient.
pub fn rf_loss(model: &DenoiserModel, batch: &TrainBatch) -> Result<(f64, Vec<f64>)> {
    let noisy = batch.noisy();
    let rows = noisy.all_rows();
    let x = model.window.features(&noisy, &rows)?;
    let (v, cache) = model.net.forward_cached(&x)?;
    let count = batch.valid_count().max(1) as f64;
    let d = batch.dim;
    let mut loss = 0.0;
    let mut g = Matrix::zeros(v.rows, v.cols);
    for (r, m) in batch.mask.iter().enumerate() {
        if !m {
            continue;
        }
        for k in 0..d {
            let i = r * d + k;
            let err = v.data[i] - (batch.clean[i] - batch.noise[i]);
            loss += err * err;
            g.data[i] = 2.0 * err / count;
        }
    }
    let loss = ensure_finite(loss / count, "rectified-flow loss")?;
    let mut grads = vec![0.0; model.net.num_params()];
    model.net.backward(&cache, &g, &mut grads)?;
    Ok((loss, grads))
}

/// `z + v·dτ` for one frame.
pub fn euler_step(z: &mut [f64], v: &[f64], dtau: f64) {
    debug_assert!(dtau >= 0.0);
    if dtau > 0.0 {
        for (zi, vi) in z.iter_mut().zip(v) {
            *zi += vi * dtau;
        }
    }
}

/// Reward (symlog space) and termination logit from clean latent windows.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTermModel {
    pub window: WindowSpec,
    pub net: Mlp,
}

/// Reward and termination probability for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTerm {
    pub reward: f64,
    pub term_prob: f64,
}

impl RewardTermModel {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, window: usize, hidden: usize, rng: &mut R) -> Self {
        let window = WindowSpec {
            window,
            latent_dim,
            actions: None,
            tau: false,
        };
        let net = Mlp::new(&[window.feature_dim(), hidden, hidden, 2], rng);
        Self { window, net }
    }

    pub fn predict(&self, batch: &SeqBatch, rows: &[(usize, usize)]) -> Result<Vec<RewardTerm>> {
        let y = self.net.forward(&self.window.features(batch, rows)?)?;
        Ok((0..y.rows)
            .map(|r| RewardTerm {
                reward: symexp(y.row(r)[0]),
                term_prob: sigmoid(y.row(r)[1]),
            })
            .collect())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `max(l,0) − l·y + ln(1 + e^{−|l|})`.
pub(crate) fn bce_with_logits(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Squared symlog reward error plus termination cross-entropy, averaged over
/// valid frames of the clean sequences.
pub fn reward_term_loss(model: &RewardTermModel, batch: &TrainBatch) -> Result<(f64, Vec<f64>)> {
    let clean = batch.clean_batch();
    let rows = clean.all_rows();
    let x = model.window.features(&clean, &rows)?;
    let (y, cache) = model.net.forward_cached(&x)?;
    let count = batch.valid_count().max(1) as f64;
    let mut loss = 0.0;
    let mut g = Matrix::zeros(y.rows, 2);
    for r in 0..y.rows {
        if !batch.mask[r] {
            continue;
        }
        let out = y.row(r);
        let err = out[0] - symlog(batch.rewards[r]);
        loss += err * err + bce_with_logits(out[1], batch.terms[r]);
        let label = if batch.terms[r] { 1.0 } else { 0.0 };
        g.row_mut(r).copy_from_slice(&[2.0 * err / count, (sigmoid(out[1]) - label) / count]);
    }
    let loss = ensure_finite(loss / count, "reward-termination loss")?;
    let mut grads = vec![0.0; model.net.num_params()];
    model.net.backward(&cache, &g, &mut grads)?;
    Ok((loss, grads))
}

/// A network paired with its optimiser state.
#[derive(Debug, Clone)]
pub struct Trainer<M> {
    pub model: M,
    pub opt: AdamW,
}

pub trait HasNet {
    fn net(&self) -> &Mlp;
    fn net_mut(&mut self) -> &mut Mlp;
}

impl HasNet for DenoiserModel {
    fn net(&self) -> &Mlp {
        &self.net
    }
    fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }
}

impl HasNet for RewardTermModel {
    fn net(&self) -> &Mlp {
        &self.net
    }
    fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }
}

impl<M: HasNet> Trainer<M> {
    pub fn new(model: M, config: AdamWConfig) -> Self {
        let opt = AdamW::new(config, model.net().num_params());
        Self { model, opt }
    }

    /// Applies precomputed gradients; returns the pre-clip gradient norm.
    pub fn apply(&mut self, grads: &mut [f64]) -> Result<f64> {
        self.opt.step(self.model.net_mut().params_mut(), grads)
    }
}

impl Trainer<DenoiserModel> {
    /// One AdamW update on the rectified-flow loss; returns the loss.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<f64> {
        let (loss, mut grads) = rf_loss(&self.model, batch)?;
        self.apply(&mut grads)?;
        Ok(loss)
    }
}

impl Trainer<RewardTermModel> {
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<f64> {
        let (loss, mut grads) = reward_term_loss(&self.model, batch)?;
        self.apply(&mut grads)?;
        Ok(loss)
    }
}
