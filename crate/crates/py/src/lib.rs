//! Python bindings for `hilab_core`.
//!
//! Everything crosses the boundary as plain lists and floats; errors surface
//! as `ValueError` (bad input) or `OSError` (file access).

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use hilab_core::actor_critic;
use hilab_core::agent::{run_training, Agent as CoreAgent};
use hilab_core::checkpoint::Checkpoint;
use hilab_core::config::parse_config;
use hilab_core::env::{RingWorld as CoreRingWorld, RingWorldConfig};
use hilab_core::experiments::{pairs_study as core_pairs_study, PairsParams};
use hilab_core::imagination::{count_action_changes, horizon_imagine, ImaginationConfig, SamplingMode};
use hilab_core::schedule::ScheduleSpec;
use hilab_core::stable::{self, ActionDistribution, DrawState};
use hilab_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// `(n, pair_id, tv, upper, empirical_rate, rate_over_tv)`.
type PairTuple = (usize, usize, f64, f64, f64, f64);

fn dist(p: Vec<f64>) -> PyResult<ActionDistribution> {
    ActionDistribution::new(p).map_err(to_py)
}

/// Horizon schedule as `budget + 1` rows of `horizon` times, starting from all zeros.
#[pyfunction]
#[pyo3(signature = (horizon, budget, nu))]
fn horizon_schedule(horizon: usize, budget: usize, nu: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(ScheduleSpec::horizon(horizon, budget, nu).build().map_err(to_py)?.to_rows())
}

#[pyfunction]
fn pyramidal_schedule(horizon: usize, budget: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(ScheduleSpec::pyramidal(horizon, budget).build().map_err(to_py)?.to_rows())
}

/// Per-threshold values `p[perm[i]] / (remaining mass)`.
#[pyfunction]
fn alpha_thresholds(p: Vec<f64>, perm: Vec<usize>) -> PyResult<Vec<f64>> {
    stable::alpha_thresholds(&dist(p)?, &perm).map_err(to_py)
}

/// Coupled draw from `p` given shared uniforms `omega` (n−1) and order `perm` (n).
#[pyfunction]
fn sample_stable(p: Vec<f64>, omega: Vec<f64>, perm: Vec<usize>) -> PyResult<usize> {
    let state = DrawState::new(omega, perm).map_err(to_py)?;
    stable::sample_stable(&dist(p)?, &state).map_err(to_py)
}

#[pyfunction]
fn total_variation(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    stable::total_variation(&dist(p)?, &dist(q)?).map_err(to_py)
}

#[pyfunction]
fn symlog(x: f64) -> f64 {
    actor_critic::symlog(x)
}

#[pyfunction]
fn symexp(x: f64) -> f64 {
    actor_critic::symexp(x)
}

#[pyfunction]
#[pyo3(signature = (rewards, terms, values, gamma=0.99, lam=0.95))]
fn lambda_returns(rewards: Vec<f64>, terms: Vec<bool>, values: Vec<f64>, gamma: f64, lam: f64) -> PyResult<Vec<f64>> {
    actor_critic::lambda_returns(&rewards, &terms, &values, gamma, lam).map_err(to_py)
}

/// One row per sampled pair.
#[pyfunction]
#[pyo3(signature = (ns=vec![4, 10, 18], pairs=1000, draws=10_000, seed=0))]
fn pairs_study(ns: Vec<usize>, pairs: usize, draws: usize, seed: u64) -> PyResult<Vec<PairTuple>> {
    let params = PairsParams {
        ns,
        pairs,
        draws,
        seed,
        ..PairsParams::default()
    };
    let rows = core_pairs_study(&params).map_err(to_py)?;
    Ok(rows
        .iter()
        .map(|r| (r.n, r.pair_id, r.tv, r.upper, r.empirical_rate, r.rate_over_tv))
        .collect())
}

/// Ring of `ring_size` cells with a goal cell and an action set {Stay, Forward, Back}.
#[pyclass]
struct RingWorld {
    inner: CoreRingWorld,
}

#[pymethods]
impl RingWorld {
    #[new]
    #[pyo3(signature = (ring_size=16, goal=8, slip_prob=0.0, obs_noise=0.02, max_steps=100, seed=0))]
    fn new(ring_size: usize, goal: usize, slip_prob: f64, obs_noise: f64, max_steps: usize, seed: u64) -> PyResult<Self> {
        let cfg = RingWorldConfig {
            ring_size,
            goal,
            slip_prob,
            obs_noise,
            max_steps,
            seed,
        };
        Ok(Self {
            inner: CoreRingWorld::new(cfg).map_err(to_py)?,
        })
    }

    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset().to_vec()
    }

    /// Returns `(obs, reward, terminated, truncated)`.
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool, bool)> {
        let r = self.inner.step(action).map_err(to_py)?;
        Ok((r.obs.to_vec(), r.reward, r.terminated, r.truncated))
    }

    #[getter]
    fn position(&self) -> usize {
        self.inner.state().position
    }
}

/// Trained world model and controller restored from a checkpoint file.
#[pyclass]
struct Agent {
    inner: CoreAgent,
}

#[pymethods]
impl Agent {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Self {
            inner: CoreAgent::from_checkpoint(&ck).map_err(to_py)?,
        })
    }

    /// Imagines `batch` rollouts from scratch and returns
    /// `(latents[seq][frame][dim], actions[seq][frame], changes_per_slot)`.
    #[pyo3(signature = (horizon=32, budget=16, nu=4.0, mode="stable", batch=4, seed=0))]
    #[allow(clippy::type_complexity)]
    fn imagine(
        &self,
        horizon: usize,
        budget: usize,
        nu: f64,
        mode: &str,
        batch: usize,
        seed: u64,
    ) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<Option<usize>>>, Vec<usize>)> {
        let config = ImaginationConfig {
            schedule: ScheduleSpec::horizon(horizon, budget, nu),
            mode: mode.parse::<SamplingMode>().map_err(to_py)?,
            batch_size: batch,
            seed,
        };
        let a = &self.inner;
        let r = horizon_imagine(&a.denoiser, &a.policy, Some(&a.reward), &config, &[]).map_err(to_py)?;
        let lat = &r.latents;
        let latents = (0..lat.seqs)
            .map(|s| {
                (0..lat.len)
                    .map(|t| {
                        let i = (s * lat.len + t) * lat.dim;
                        lat.latents[i..i + lat.dim].to_vec()
                    })
                    .collect()
            })
            .collect();
        let actions = (0..lat.seqs).map(|s| (0..lat.len).map(|t| r.action(s, t)).collect()).collect();
        Ok((latents, actions, count_action_changes(&r)))
    }
}

/// Trains one agent from `key = value` config text. Returns the per-epoch
/// `(epoch, mean_return)` curve and writes checkpoints under `out` if given.
#[pyfunction]
#[pyo3(signature = (config="", out=None))]
fn train(py: Python<'_>, config: &str, out: Option<PathBuf>) -> PyResult<Vec<(usize, f64)>> {
    let cfg = parse_config(config).map_err(to_py)?;
    let report = py
        .detach(|| run_training(&cfg, out.as_deref()))
        .map_err(to_py)?;
    Ok(report.evals.iter().map(|e| (e.epoch, e.mean_return)).collect())
}

#[pymodule]
fn hilab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(horizon_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(pyramidal_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(sample_stable, m)?)?;
    m.add_function(wrap_pyfunction!(total_variation, m)?)?;
    m.add_function(wrap_pyfunction!(symlog, m)?)?;
    m.add_function(wrap_pyfunction!(symexp, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_returns, m)?)?;
    m.add_function(wrap_pyfunction!(pairs_study, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<RingWorld>()?;
    m.add_class::<Agent>()?;
    Ok(())
}
