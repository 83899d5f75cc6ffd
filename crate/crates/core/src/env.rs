//! Ring-world: a tiny POMDP with a smooth two-dimensional observation manifold.
//!
//! The agent walks on a ring of `M` cells and observes its angle as a noisy
//! point on the unit circle. Reaching the goal cell pays 1 and terminates.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{uniform, StreamRng, Streams};

pub const NUM_ACTIONS: usize = 3;
pub const OBS_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Stay,
    Forward,
    Back,
}

impl Action {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Action::Stay),
            1 => Ok(Action::Forward),
            2 => Ok(Action::Back),
            _ => Err(Error::OutOfRange {
                index: i,
                len: NUM_ACTIONS,
            }),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn offset(self) -> i64 {
        match self {
            Action::Stay => 0,
            Action::Forward => 1,
            Action::Back => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingWorldConfig {
    pub ring_size: usize,
    pub goal: usize,
    pub slip_prob: f64,
    pub obs_noise: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for RingWorldConfig {
    fn default() -> Self {
        Self {
            ring_size: 16,
            goal: 8,
            slip_prob: 0.0,
            obs_noise: 0.02,
            max_steps: 100,
            seed: 0,
        }
    }
}

impl RingWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ring_size == 0 {
            return Err(Error::InvalidParameter("ring_size must be >= 1".into()));
        }
        if self.goal >= self.ring_size {
            return Err(Error::InvalidParameter(format!(
                "goal {} outside ring of size {}",
                self.goal, self.ring_size
            )));
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(Error::InvalidParameter(format!(
                "slip_prob {} outside [0,1]",
                self.slip_prob
            )));
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "obs_noise {} must be >= 0",
                self.obs_noise
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of moves on the shorter arc from the start cell to the goal.
    pub fn shortest_path(&self) -> usize {
        self.goal.min(self.ring_size - self.goal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    pub position: usize,
    pub steps_taken: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: [f64; OBS_DIM],
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Noiseless observation of a cell.
pub fn cell_observation(position: usize, ring_size: usize) -> [f64; OBS_DIM] {
    let angle = 2.0 * PI * position as f64 / ring_size as f64;
    [angle.cos(), angle.sin()]
}

#[derive(Debug, Clone)]
pub struct RingWorld {
    config: RingWorldConfig,
    state: EnvState,
    rng: StreamRng,
}

impl RingWorld {
    pub fn new(config: RingWorldConfig) -> Result<Self> {
        config.validate()?;
        let rng = Streams::new(config.seed).stream("env", 0);
        Ok(Self {
            config,
            state: EnvState {
                position: 0,
                steps_taken: 0,
            },
            rng,
        })
    }

    pub fn config(&self) -> &RingWorldConfig {
        &self.config
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    pub fn reset(&mut self) -> [f64; OBS_DIM] {
        self.state = EnvState {
            position: 0,
            steps_taken: 0,
        };
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        let mut action = Action::from_index(action)?;
        if self.config.slip_prob > 0.0 && self.rng.random::<f64>() < self.config.slip_prob {
            action = Action::from_index(self.rng.random_range(0..NUM_ACTIONS))?;
        }
        let m = self.config.ring_size as i64;
        let position = (self.state.position as i64 + action.offset()).rem_euclid(m) as usize;
        self.state = EnvState {
            position,
            steps_taken: self.state.steps_taken + 1,
        };
        let at_goal = position == self.config.goal;
        Ok(StepResult {
            obs: self.observe(),
            reward: if at_goal { 1.0 } else { 0.0 },
            terminated: at_goal,
            truncated: self.state.steps_taken >= self.config.max_steps,
        })
    }

    fn observe(&mut self) -> [f64; OBS_DIM] {
        let mut obs = cell_observation(self.state.position, self.config.ring_size);
        if self.config.obs_noise > 0.0 {
            let n = self.config.obs_noise;
            for o in &mut obs {
                *o = (*o + uniform(&mut self.rng, -n, n)).clamp(-1.0, 1.0);
            }
        }
        obs
    }
}

/// The toy environment needs no learned tokenizer: latents are observations.
pub fn encode(obs: &[f64]) -> Vec<f64> {
    obs.to_vec()
}

pub fn decode(latent: &[f64]) -> Vec<f64> {
    latent.to_vec()
}
