//! Actor-critic learning from imagined rollouts.
//!
//! The critic regresses symlog λ-returns on clean latents. The actor is a
//! REINFORCE learner with an entropy bonus, updated at every denoising step in
//! which the next observation becomes less noisy, so that it learns to act at
//! every noise level it is queried at.

use rand::Rng;

use crate::error::{Error, Result};
use crate::imagination::ImaginedRollout;
use crate::nn::{Matrix, Mlp};
use crate::stable::{softmax, ActionDistribution};
use crate::window::{SeqBatch, WindowSpec};

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_LAMBDA: f64 = 0.95;
pub const DEFAULT_ENTROPY_WEIGHT: f64 = 0.001;
pub const RETURN_SCALE_DECAY: f64 = 0.005;

pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

pub fn symexp(x: f64) -> f64 {
    x.signum() * x.abs().exp_m1()
}

/// Backward λ-return recursion over one sequence.
///
/// `values` are critic outputs in symlog space; `rewards[t]` and `terms[t]`
/// describe the transition out of step `t`, so their last entries are unused.
pub fn lambda_returns(
    rewards: &[f64],
    terms: &[bool],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    let conts: Vec<f64> = terms.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
    lambda_returns_soft(rewards, &conts, values, gamma, lambda)
}

/// Same recursion with a continuation probability in `[0, 1]` per step
/// instead of a hard terminal flag.
pub fn lambda_returns_soft(
    rewards: &[f64],
    conts: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    let h = values.len();
    for (what, len) in [("rewards", rewards.len()), ("terms", conts.len())] {
        if len != h {
            return Err(Error::DimensionMismatch {
                what,
                expected: h,
                actual: len,
            });
        }
    }
    if h == 0 {
        return Ok(Vec::new());
    }
    let mut out = vec![0.0; h];
    out[h - 1] = symexp(values[h - 1]);
    for t in (0..h - 1).rev() {
        out[t] = rewards[t]
            + gamma * conts[t] * ((1.0 - lambda) * symexp(values[t + 1]) + lambda * out[t + 1]);
    }
    Ok(out)
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// EMA of the 5–95% return range used to normalise advantages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageScaler {
    pub ema_s: f64,
    pub decay: f64,
}

impl Default for AdvantageScaler {
    fn default() -> Self {
        Self {
            ema_s: 0.0,
            decay: RETURN_SCALE_DECAY,
        }
    }
}

impl AdvantageScaler {
    pub fn update(&mut self, returns: &[f64]) -> Result<f64> {
        if returns.is_empty() {
            return Err(Error::InvalidParameter("empty return batch".into()));
        }
        let spread = quantile(returns, 0.95) - quantile(returns, 0.05);
        self.ema_s = (1.0 - self.decay) * self.ema_s + self.decay * spread;
        Ok(self.ema_s)
    }

    pub fn divisor(&self) -> f64 {
        self.ema_s.max(1.0)
    }
}

/// Updates the scaler with `returns`, then returns
/// `(G_t − symexp(V_t)) / max(1, S)` as plain numbers.
pub fn advantages(returns: &[f64], values: &[f64], scaler: &mut AdvantageScaler) -> Result<Vec<f64>> {
    if returns.len() != values.len() {
        return Err(Error::DimensionMismatch {
            what: "values",
            expected: returns.len(),
            actual: values.len(),
        });
    }
    scaler.update(returns)?;
    let div = scaler.divisor();
    Ok(returns
        .iter()
        .zip(values)
        .map(|(g, v)| (g - symexp(*v)) / div)
        .collect())
}

/// Action logits from windows of (latent, τ).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub window: WindowSpec,
    pub net: Mlp,
}

impl PolicyModel {
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
            actions: None,
            tau: true,
        };
        let mut net = Mlp::new(&[window.feature_dim(), hidden, hidden, num_actions], rng);
        // Start close to uniform.
        net.scale_head(0.01);
        Self { window, net }
    }

    pub fn num_actions(&self) -> usize {
        self.net.output_dim()
    }
}

/// Anything that maps window features to action distributions.
pub trait ActionPolicy {
    fn window(&self) -> &WindowSpec;
    fn num_actions(&self) -> usize;
    fn distributions(&self, features: &Matrix) -> Result<Vec<ActionDistribution>>;
}

impl ActionPolicy for PolicyModel {
    fn window(&self) -> &WindowSpec {
        &self.window
    }

    fn num_actions(&self) -> usize {
        self.net.output_dim()
    }

    fn distributions(&self, features: &Matrix) -> Result<Vec<ActionDistribution>> {
        let logits = self.net.forward(features)?;
        (0..logits.rows)
            .map(|r| ActionDistribution::from_logits(logits.row(r)))
            .collect()
    }
}

/// Value (symlog space) from clean latent windows.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticModel {
    pub window: WindowSpec,
    pub net: Mlp,
}

impl CriticModel {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, window: usize, hidden: usize, rng: &mut R) -> Self {
        let window = WindowSpec {
            window,
            latent_dim,
            actions: None,
            tau: false,
        };
        let mut net = Mlp::new(&[window.feature_dim(), hidden, hidden, 1], rng);
        net.scale_head(0.01);
        Self { window, net }
    }

    pub fn values(&self, batch: &SeqBatch, rows: &[(usize, usize)]) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.window.features(batch, rows)?)?.data)
    }
}

impl crate::flow::HasNet for PolicyModel {
    fn net(&self) -> &Mlp {
        &self.net
    }
    fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }
}

impl crate::flow::HasNet for CriticModel {
    fn net(&self) -> &Mlp {
        &self.net
    }
    fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }
}

/// Policy queries selected for a REINFORCE update.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorBatch {
    pub features: Matrix,
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
    /// Rows with `false` are carried along but contribute nothing.
    pub mask: Vec<bool>,
    /// Denoising time of the queried frame, for diagnostics.
    pub taus: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActorStats {
    pub loss: f64,
    pub entropy: f64,
    pub rows: usize,
}

/// `−mean(A·log π(a) + η·H(π))` over unmasked rows, with its gradient.
pub fn actor_loss(policy: &PolicyModel, batch: &ActorBatch, eta: f64) -> Result<(ActorStats, Vec<f64>)> {
    let n = batch.features.rows;
    if batch.actions.len() != n || batch.advantages.len() != n || batch.mask.len() != n {
        return Err(Error::DimensionMismatch {
            what: "actor batch rows",
            expected: n,
            actual: batch.actions.len(),
        });
    }
    let mut grads = vec![0.0; policy.net.num_params()];
    let active = batch.mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Ok((ActorStats::default(), grads));
    }
    let (logits, cache) = policy.net.forward_cached(&batch.features)?;
    let count = active as f64;
    let num_actions = logits.cols;
    let mut g = Matrix::zeros(n, num_actions);
    let mut objective = 0.0;
    let mut entropy_sum = 0.0;
    for r in 0..n {
        if !batch.mask[r] {
            continue;
        }
        let a = batch.actions[r];
        if a >= num_actions {
            return Err(Error::OutOfRange {
                index: a,
                len: num_actions,
            });
        }
        let probs = softmax(logits.row(r));
        let logp: Vec<f64> = probs.iter().map(|&p| p.max(f64::MIN_POSITIVE).ln()).collect();
        let entropy: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        let adv = batch.advantages[r];
        objective += adv * logp[a] + eta * entropy;
        entropy_sum += entropy;
        let out = g.row_mut(r);
        for j in 0..num_actions {
            let indicator = if j == a { 1.0 } else { 0.0 };
            let d_obj = adv * (indicator - probs[j]) - eta * probs[j] * (logp[j] + entropy);
            out[j] = -d_obj / count;
        }
    }
    let loss = -objective / count;
    if !loss.is_finite() {
        return Err(Error::non_finite("actor loss"));
    }
    policy.net.backward(&cache, &g, &mut grads)?;
    Ok((
        ActorStats {
            loss,
            entropy: entropy_sum / count,
            rows: active,
        },
        grads,
    ))
}

/// Clean windows and their λ-return targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBatch {
    pub features: Matrix,
    pub returns: Vec<f64>,
}

/// `mean (V − symlog G)²`, with its gradient.
pub fn critic_loss(critic: &CriticModel, batch: &CriticBatch) -> Result<(f64, Vec<f64>)> {
    let n = batch.features.rows;
    let mut grads = vec![0.0; critic.net.num_params()];
    if n == 0 {
        return Ok((0.0, grads));
    }
    let (v, cache) = critic.net.forward_cached(&batch.features)?;
    let mut loss = 0.0;
    let mut g = Matrix::zeros(n, 1);
    for r in 0..n {
        let err = v.data[r] - symlog(batch.returns[r]);
        loss += err * err;
        g.data[r] = 2.0 * err / n as f64;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::non_finite("critic loss"));
    }
    critic.net.backward(&cache, &g, &mut grads)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorCriticConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_weight: f64,
    /// Predicted termination probabilities above this count as terminal.
    pub term_threshold: f64,
}

impl Default for ActorCriticConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            entropy_weight: DEFAULT_ENTROPY_WEIGHT,
            term_threshold: 0.5,
        }
    }
}

/// Everything one controller update needs from a rollout.
#[derive(Debug, Clone)]
pub struct ControllerTargets {
    pub actor: ActorBatch,
    pub critic: CriticBatch,
    pub mean_return: f64,
    pub ema_s: f64,
}

/// Computes λ-returns and advantages on the clean rollout and selects the
/// policy queries that receive gradient.
///
/// Trajectory steps run from the last context frame (or the first imagined
/// frame when there is no context) to the final frame. A step is alive until a
/// frame predicted terminal is reached; only alive steps train either network.
/// Below the threshold, returns are discounted by the predicted continuation.
pub fn controller_targets(
    rollout: &ImaginedRollout,
    critic: &CriticModel,
    scaler: &mut AdvantageScaler,
    cfg: &ActorCriticConfig,
) -> Result<ControllerTargets> {
    let k = rollout.context_len;
    let total = rollout.latents.len;
    let start = k.saturating_sub(1);
    let steps = total - start;

    let rows: Vec<(usize, usize)> = (0..rollout.latents.seqs)
        .flat_map(|s| (start..total).map(move |t| (s, t)))
        .collect();
    let values = critic.values(&rollout.latents, &rows)?;

    let mut returns = Vec::with_capacity(rows.len());
    let mut alive = Vec::with_capacity(rows.len());
    for s in 0..rollout.latents.seqs {
        let mut rewards = vec![0.0; steps];
        let mut terms = vec![false; steps];
        let mut conts = vec![1.0; steps];
        for i in 0..steps - 1 {
            let next = start + i + 1;
            let p = rollout.term_prob(s, next);
            rewards[i] = rollout.reward(s, next);
            terms[i] = p > cfg.term_threshold;
            conts[i] = if terms[i] { 0.0 } else { 1.0 - p };
        }
        let v = &values[s * steps..(s + 1) * steps];
        returns.extend(lambda_returns_soft(&rewards, &conts, v, cfg.gamma, cfg.lambda)?);
        let mut ok = true;
        for &term in &terms {
            alive.push(ok);
            ok &= !term;
        }
    }

    let live_returns: Vec<f64> = returns
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(g, _)| *g)
        .collect();
    scaler.update(&live_returns)?;
    let div = scaler.divisor();
    let advantage: Vec<f64> = returns
        .iter()
        .zip(&values)
        .map(|(g, v)| (g - symexp(*v)) / div)
        .collect();

    let critic_rows: Vec<(usize, usize)> = rows
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(r, _)| *r)
        .collect();
    let critic_batch = CriticBatch {
        features: critic.window.features(&rollout.latents, &critic_rows)?,
        returns: live_returns.clone(),
    };

    let trace = &rollout.trace;
    let fd = trace.feature_dim;
    let mut features = Vec::new();
    let mut actions = Vec::new();
    let mut advs = Vec::new();
    let mut mask = Vec::new();
    let mut taus = Vec::new();
    for b in 0..trace.steps {
        for s in 0..trace.seqs {
            for slot in 0..trace.slots {
                let frame = k + slot;
                let idx = s * steps + (frame - start);
                let next_future = slot + 1;
                let active = alive[idx] && rollout.schedule.advances(b, next_future);
                if !active {
                    continue;
                }
                features.extend_from_slice(trace.features(b, s, slot));
                actions.push(trace.action(b, s, slot));
                advs.push(advantage[idx]);
                mask.push(true);
                taus.push(trace.tau(b, s, slot));
            }
        }
    }
    let n = actions.len();
    let mean_return = if live_returns.is_empty() {
        0.0
    } else {
        live_returns.iter().sum::<f64>() / live_returns.len() as f64
    };
    Ok(ControllerTargets {
        actor: ActorBatch {
            features: Matrix::from_vec(n, fd, features)?,
            actions,
            advantages: advs,
            mask,
            taus,
        },
        critic: critic_batch,
        mean_return,
        ema_s: scaler.ema_s,
    })
}
