//! Coupled ("stable") categorical sampling across evolving distributions.
//!
//! A [`DrawState`] holds a uniform vector `omega ∈ [0,1)^(N-1)` and an action
//! order `perm`. The action is found by walking the order and stopping at the
//! first position whose coordinate of `omega` falls below the conditional
//! probability of that action given that every earlier one was skipped. For a
//! fixed state, the chosen action only changes when the distribution does, and
//! the probability of a change between `p` and `q` lies between their total
//! variation distance and the L1 distance of their threshold vectors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{permutation, uniform01};

/// Sums deviating from one by at most this much are renormalised.
pub const RENORM_TOLERANCE: f64 = 1e-6;

/// Suffix masses below this are treated as exactly zero.
pub const ZERO_MASS: f64 = 1e-12;

/// A point on the probability simplex over `N` discrete actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no actions".into()));
        }
        if let Some((i, &v)) = probs
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {v}, expected a finite non-negative value"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > RENORM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        let probs = if sum == 1.0 {
            probs
        } else {
            probs.into_iter().map(|v| v / sum).collect()
        };
        Ok(Self { probs })
    }

    /// Uniform distribution over `n` actions.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDistribution("no actions".into()));
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    /// Point mass on `action`.
    pub fn one_hot(n: usize, action: usize) -> Result<Self> {
        if action >= n {
            return Err(Error::OutOfRange {
                index: action,
                len: n,
            });
        }
        let mut probs = vec![0.0; n];
        probs[action] = 1.0;
        Ok(Self { probs })
    }

    /// Softmax of raw logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidDistribution("no actions".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("policy logits"));
        }
        Ok(Self {
            probs: softmax(logits),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// The randomness shared by every query of one action slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawState {
    omega: Vec<f64>,
    perm: Vec<usize>,
}

impl DrawState {
    pub fn new(omega: Vec<f64>, perm: Vec<usize>) -> Result<Self> {
        validate_perm(&perm)?;
        if omega.len() + 1 != perm.len() {
            return Err(Error::DimensionMismatch {
                what: "omega length must be N-1",
                expected: perm.len().saturating_sub(1),
                actual: omega.len(),
            });
        }
        if let Some(w) = omega.iter().find(|w| !(0.0..1.0).contains(*w)) {
            return Err(Error::InvalidParameter(format!(
                "omega coordinate {w} outside [0,1)"
            )));
        }
        Ok(Self { omega, perm })
    }

    /// Draws `omega` then a Fisher-Yates permutation.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        assert!(n >= 1, "need at least one action");
        let omega = (0..n - 1).map(|_| uniform01(rng)).collect();
        let perm = permutation(rng, n);
        Self { omega, perm }
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn num_actions(&self) -> usize {
        self.perm.len()
    }
}

fn validate_perm(perm: &[usize]) -> Result<()> {
    if perm.is_empty() {
        return Err(Error::InvalidPermutation("empty".into()));
    }
    let mut seen = vec![false; perm.len()];
    for &i in perm {
        if i >= perm.len() {
            return Err(Error::InvalidPermutation(format!(
                "index {i} out of range for {} actions",
                perm.len()
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidPermutation(format!("index {i} repeated")));
        }
    }
    Ok(())
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Suffix masses `S_i = Σ_{j>=i} p[perm[j]]`, written into `out` (length N).
fn suffix_masses(p: &[f64], perm: &[usize], out: &mut [f64]) {
    let mut acc = 0.0;
    for i in (0..perm.len()).rev() {
        acc += p[perm[i]];
        out[i] = acc;
    }
}

#[inline]
fn threshold(p_i: f64, suffix: f64) -> f64 {
    if suffix > ZERO_MASS {
        (p_i / suffix).min(1.0)
    } else {
        p_i
    }
}

/// Conditional thresholds `alpha_i` for positions `0..N-1` of the order.
pub fn alpha_thresholds(p: &ActionDistribution, perm: &[usize]) -> Result<Vec<f64>> {
    check_len("permutation length", p.len(), perm.len())?;
    validate_perm(perm)?;
    let n = p.len();
    let mut suffix = vec![0.0; n];
    suffix_masses(&p.probs, perm, &mut suffix);
    Ok((0..n - 1)
        .map(|i| threshold(p.probs[perm[i]], suffix[i]))
        .collect())
}

const STACK_ACTIONS: usize = 32;

/// The coupled action for `p` under `state`.
pub fn sample_stable(p: &ActionDistribution, state: &DrawState) -> Result<usize> {
    check_len("draw state actions", p.len(), state.num_actions())?;
    Ok(stable_action(&p.probs, &state.omega, &state.perm))
}

fn stable_action(p: &[f64], omega: &[f64], perm: &[usize]) -> usize {
    let n = perm.len();
    let mut stack = [0.0f64; STACK_ACTIONS];
    let mut heap;
    let suffix: &mut [f64] = if n <= STACK_ACTIONS {
        &mut stack[..n]
    } else {
        heap = vec![0.0; n];
        &mut heap
    };
    suffix_masses(p, perm, suffix);
    for i in 0..n - 1 {
        if omega[i] < threshold(p[perm[i]], suffix[i]) {
            return perm[i];
        }
    }
    perm[n - 1]
}

/// A fresh draw from `p` by inverse transform on one uniform.
pub fn sample_naive<R: Rng + ?Sized>(p: &ActionDistribution, rng: &mut R) -> usize {
    let u = uniform01(rng);
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.probs.iter().enumerate() {
        if pi > 0.0 {
            last_positive = i;
        }
        cum += pi;
        if u < cum {
            return i;
        }
    }
    last_positive
}

/// `½·Σ|p_i − q_i|`.
pub fn total_variation(p: &ActionDistribution, q: &ActionDistribution) -> Result<f64> {
    check_len("distribution length", p.len(), q.len())?;
    Ok(0.5
        * p.probs
            .iter()
            .zip(&q.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

/// `‖alpha(p) − alpha(q)‖₁` under `perm`; an upper bound on the change rate.
pub fn change_upper_bound(
    p: &ActionDistribution,
    q: &ActionDistribution,
    perm: &[usize],
) -> Result<f64> {
    check_len("distribution length", p.len(), q.len())?;
    let a = alpha_thresholds(p, perm)?;
    let b = alpha_thresholds(q, perm)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum())
}

/// Diagonal Gaussian policy head for continuous actions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyParams {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianPolicyParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        check_len("sigma length", mu.len(), sigma.len())?;
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {s}"
            )));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::non_finite("gaussian mean"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// `mu + omega ⊙ sigma` for a fixed standard-normal `omega`.
pub fn sample_stable_continuous(params: &GaussianPolicyParams, omega: &[f64]) -> Result<Vec<f64>> {
    check_len("omega length", params.mu.len(), omega.len())?;
    Ok(params
        .mu
        .iter()
        .zip(&params.sigma)
        .zip(omega)
        .map(|((m, s), w)| m + w * s)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> ActionDistribution {
        ActionDistribution::new(v.to_vec()).unwrap()
    }

    fn identity(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn thresholds_examples() {
        let a = alpha_thresholds(&dist(&[0.2, 0.3, 0.5]), &identity(3)).unwrap();
        assert!((a[0] - 0.2).abs() < 1e-15);
        assert!((a[1] - 0.375).abs() < 1e-15);

        let third = 1.0 / 3.0;
        let a = alpha_thresholds(&dist(&[third, third, third]), &identity(3)).unwrap();
        assert!((a[0] - third).abs() < 1e-15);
        assert!((a[1] - 0.5).abs() < 1e-15);

        let a = alpha_thresholds(&dist(&[1.0, 0.0, 0.0]), &identity(3)).unwrap();
        assert_eq!(a, vec![1.0, 0.0]);
    }

    #[test]
    fn thresholds_reject_mismatch() {
        let err = alpha_thresholds(&dist(&[0.5, 0.5]), &identity(3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn stable_examples() {
        let p = dist(&[0.2, 0.3, 0.5]);
        let s = |w: [f64; 2]| DrawState::new(w.to_vec(), identity(3)).unwrap();
        assert_eq!(sample_stable(&p, &s([0.1, 0.5])).unwrap(), 0);
        assert_eq!(sample_stable(&p, &s([0.25, 0.3])).unwrap(), 1);
        assert_eq!(sample_stable(&p, &s([0.25, 0.4])).unwrap(), 2);

        let p = dist(&[1.0, 0.0]);
        for w in [0.0, 0.5, 0.999_999] {
            let st = DrawState::new(vec![w], identity(2)).unwrap();
            assert_eq!(sample_stable(&p, &st).unwrap(), 0);
        }
    }

    #[test]
    fn stable_rejects_mismatch() {
        let st = DrawState::new(vec![0.5], identity(2)).unwrap();
        assert!(sample_stable(&dist(&[0.2, 0.3, 0.5]), &st).is_err());
    }

    #[test]
    fn draw_state_validation() {
        assert!(DrawState::new(vec![0.5], vec![0, 0]).is_err());
        assert!(DrawState::new(vec![1.0], vec![0, 1]).is_err());
        assert!(DrawState::new(vec![0.5, 0.5], vec![0, 1]).is_err());
        assert!(DrawState::new(vec![], vec![0]).is_ok());
    }

    #[test]
    fn distribution_renormalises_small_drift_only() {
        let d = ActionDistribution::new(vec![0.5, 0.5 + 5e-7]).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(ActionDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ActionDistribution::new(vec![1.1, -0.1]).is_err());
        assert!(ActionDistribution::new(vec![]).is_err());
        assert!(ActionDistribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn naive_examples() {
        let mut rng = Streams::new(11).stream("naive", 0);
        let p = dist(&[1.0, 0.0, 0.0]);
        for _ in 0..1000 {
            assert_eq!(sample_naive(&p, &mut rng), 0);
        }

        let m = 1_000_000;
        let p = dist(&[0.5, 0.5]);
        let hits = (0..m).filter(|_| sample_naive(&p, &mut rng) == 0).count();
        let f = hits as f64 / m as f64;
        assert!((0.4985..=0.5015).contains(&f), "frequency {f}");

        let p = dist(&[0.2, 0.3, 0.5]);
        let mut counts = [0usize; 3];
        for _ in 0..m {
            counts[sample_naive(&p, &mut rng)] += 1;
        }
        for (c, pi) in counts.iter().zip(p.probs()) {
            let f = *c as f64 / m as f64;
            let sigma = (pi * (1.0 - pi) / m as f64).sqrt();
            assert!((f - pi).abs() < 3.0 * sigma, "freq {f} vs {pi}");
        }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap(), 1.0);
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
        let q = dist(&[0.3, 0.3, 0.4]);
        assert!((total_variation(&p, &q).unwrap() - 0.1).abs() < 1e-15);
        assert!(total_variation(&p, &dist(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn upper_bound_examples() {
        let p = dist(&[0.2, 0.3, 0.5]);
        let q = dist(&[0.3, 0.3, 0.4]);
        assert_eq!(change_upper_bound(&p, &p, &identity(3)).unwrap(), 0.0);
        let expected = (0.2f64 - 0.3).abs() + (0.375 - 0.3 / 0.7f64).abs();
        let got = change_upper_bound(&p, &q, &identity(3)).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.153_571_428_571_428_5).abs() < 1e-12);
        let got = change_upper_bound(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0]), &identity(2)).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn continuous_examples() {
        let p = GaussianPolicyParams::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(sample_stable_continuous(&p, &[0.5, -0.5]).unwrap(), vec![0.5, -0.5]);
        let p = GaussianPolicyParams::new(vec![1.0, 2.0], vec![2.0, 3.0]).unwrap();
        assert_eq!(sample_stable_continuous(&p, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let w = [0.3, -1.2];
        let first = sample_stable_continuous(&p, &w).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_stable_continuous(&p, &w).unwrap(), first);
        }
        assert!(GaussianPolicyParams::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianPolicyParams::new(vec![0.0], vec![1.0, 1.0]).is_err());
        assert!(sample_stable_continuous(&p, &[0.0]).is_err());
    }

    #[test]
    fn continuous_marginal_is_gaussian() {
        use rand_distr::{Distribution, StandardNormal};
        let p = GaussianPolicyParams::new(vec![1.5], vec![0.5]).unwrap();
        let mut rng = Streams::new(5).stream("gauss", 0);
        let m = 200_000;
        let xs: Vec<f64> = (0..m)
            .map(|_| {
                let w: f64 = StandardNormal.sample(&mut rng);
                sample_stable_continuous(&p, &[w]).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!((mean - 1.5).abs() < 3.0 * 0.5 / (m as f64).sqrt());
        assert!((var - 0.25).abs() < 0.01);
    }

    fn simplex(n: usize) -> impl Strategy<Value = ActionDistribution> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("positive mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| ActionDistribution::new(v.iter().map(|x| x / s).collect()).unwrap())
        })
    }

    fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
        Just((0..n).collect::<Vec<_>>()).prop_shuffle()
    }

    proptest! {
        #[test]
        fn thresholds_in_unit_interval(
            (p, perm) in (2usize..12).prop_flat_map(|n| (simplex(n), perm_strategy(n)))
        ) {
            for a in alpha_thresholds(&p, &perm).unwrap() {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn identical_distributions_never_change(
            (p, perm, omega) in (2usize..12).prop_flat_map(|n| (
                simplex(n),
                perm_strategy(n),
                prop::collection::vec(0.0f64..1.0, n - 1),
            ))
        ) {
            let st = DrawState::new(omega, perm).unwrap();
            let q = p.clone();
            prop_assert_eq!(sample_stable(&p, &st).unwrap(), sample_stable(&q, &st).unwrap());
        }

        #[test]
        fn stable_sample_is_in_support(
            (p, perm, omega) in (2usize..12).prop_flat_map(|n| (
                simplex(n),
                perm_strategy(n),
                prop::collection::vec(0.0f64..1.0, n - 1),
            ))
        ) {
            let st = DrawState::new(omega, perm).unwrap();
            let a = sample_stable(&p, &st).unwrap();
            prop_assert!(p.probs()[a] > 0.0);
        }

        #[test]
        fn tv_never_exceeds_upper_bound(
            (p, q, perm) in (2usize..12).prop_flat_map(|n| (simplex(n), simplex(n), perm_strategy(n)))
        ) {
            let tv = total_variation(&p, &q).unwrap();
            let ub = change_upper_bound(&p, &q, &perm).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&tv));
            prop_assert!(tv <= ub + 1e-12);
        }
    }
}
