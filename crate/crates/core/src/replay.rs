//! Episode replay with a uniform / recency-weighted segment mixture.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::flow::LatentTrajectory;
use crate::rng::uniform01;

/// Share of each batch drawn uniformly over all segment starts.
pub const UNIFORM_SHARE: f64 = 0.7;
/// The remaining starts use `⌊x · n⌋`, `x ~ Beta(3, 1)`.
pub const RECENCY_BETA: (f64, f64) = (3.0, 1.0);

/// One episode: frame 0 is the reset observation; `actions[t]` leads from
/// frame `t` to `t+1`, whose reward is `rewards[t+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
}

impl Episode {
    pub fn frames(&self) -> usize {
        self.rewards.len()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.obs[t * self.dim..(t + 1) * self.dim]
    }

    pub fn is_finished(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    dim: usize,
    episodes: Vec<Episode>,
}

/// Where a sampled segment starts and which branch of the mixture chose it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentDraw {
    pub episode: usize,
    pub start: usize,
    pub recent: bool,
}

impl ReplayBuffer {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            episodes: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.actions.len()).sum()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "observation",
                expected: self.dim,
                actual: obs.len(),
            });
        }
        if obs.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("observation"));
        }
        Ok(())
    }

    /// Opens a new episode with its reset observation.
    pub fn begin_episode(&mut self, obs: &[f64]) -> Result<()> {
        self.check_obs(obs)?;
        if let Some(last) = self.episodes.last_mut() {
            // An interrupted episode keeps its frames; it just stops growing.
            if !last.is_finished() {
                last.truncated = true;
            }
        }
        self.episodes.push(Episode {
            dim: self.dim,
            obs: obs.to_vec(),
            actions: Vec::new(),
            rewards: vec![0.0],
            terminated: false,
            truncated: false,
        });
        Ok(())
    }

    pub fn push(&mut self, action: usize, obs: &[f64], reward: f64, terminated: bool, truncated: bool) -> Result<()> {
        self.check_obs(obs)?;
        let ep = match self.episodes.last_mut() {
            Some(ep) if !ep.is_finished() => ep,
            _ => {
                return Err(Error::InvalidParameter(
                    "push without an open episode".into(),
                ))
            }
        };
        ep.obs.extend_from_slice(obs);
        ep.actions.push(action);
        ep.rewards.push(reward);
        ep.terminated = terminated;
        ep.truncated = truncated && !terminated;
        Ok(())
    }

    /// Every admissible `(episode, start)` in insertion order. Episodes
    /// shorter than `horizon` contribute a single start at 0.
    pub fn segment_starts(&self, horizon: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (e, ep) in self.episodes.iter().enumerate() {
            if ep.frames() < 2 {
                continue;
            }
            let last = ep.frames().saturating_sub(horizon);
            out.extend((0..=last).map(|s| (e, s)));
        }
        out
    }

    /// Starts whose `k` frames end on a non-terminal frame, so an imagined
    /// continuation from them is meaningful.
    pub fn context_starts(&self, k: usize) -> Vec<(usize, usize)> {
        self.segment_starts(k)
            .into_iter()
            .filter(|&(e, s)| {
                let ep = &self.episodes[e];
                !(ep.terminated && s + k >= ep.frames())
            })
            .collect()
    }

    /// Draws `batch` starts from the 70/30 uniform/recency mixture.
    pub fn draw_starts<R: Rng + ?Sized>(&self, batch: usize, horizon: usize, rng: &mut R) -> Result<Vec<SegmentDraw>> {
        draw_from(&self.segment_starts(horizon), batch, rng)
    }

    /// Like [`draw_starts`](Self::draw_starts) over [`context_starts`](Self::context_starts).
    pub fn draw_context_starts<R: Rng + ?Sized>(&self, batch: usize, k: usize, rng: &mut R) -> Result<Vec<SegmentDraw>> {
        draw_from(&self.context_starts(k), batch, rng)
    }

    /// Cuts an `horizon`-frame segment, right-padding short episodes with
    /// their last frame and flagging the padding invalid.
    pub fn segment(&self, episode: usize, start: usize, horizon: usize) -> Result<LatentTrajectory> {
        let ep = self.episodes.get(episode).ok_or(Error::OutOfRange {
            index: episode,
            len: self.episodes.len(),
        })?;
        if start >= ep.frames() {
            return Err(Error::OutOfRange {
                index: start,
                len: ep.frames(),
            });
        }
        let d = self.dim;
        let mut tr = LatentTrajectory {
            dim: d,
            latents: Vec::with_capacity(horizon * d),
            actions: Vec::with_capacity(horizon.saturating_sub(1)),
            rewards: Vec::with_capacity(horizon),
            terms: Vec::with_capacity(horizon),
            valid: Vec::with_capacity(horizon),
        };
        let last = ep.frames() - 1;
        for i in 0..horizon {
            let t = start + i;
            let real = t <= last;
            let f = t.min(last);
            tr.latents.extend_from_slice(ep.frame(f));
            tr.rewards.push(if real && i > 0 { ep.rewards[f] } else { 0.0 });
            tr.terms.push(ep.terminated && f == last);
            tr.valid.push(real);
            if i + 1 < horizon {
                tr.actions.push(if t < last { ep.actions[t] } else { 0 });
            }
        }
        Ok(tr)
    }

    pub fn sample_segments<R: Rng + ?Sized>(
        &self,
        batch: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Vec<LatentTrajectory>> {
        self.draw_starts(batch, horizon, rng)?
            .into_iter()
            .map(|d| self.segment(d.episode, d.start, horizon))
            .collect()
    }

    /// `episode,t,action,reward,terminated,truncated,obs...`; the action on
    /// a row leads out of that frame (`-1` on the last frame).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,t,action,reward,terminated,truncated");
        for i in 0..self.dim {
            let _ = write!(out, ",obs{i}");
        }
        out.push('\n');
        for (e, ep) in self.episodes.iter().enumerate() {
            for t in 0..ep.frames() {
                let action = ep.actions.get(t).map_or(-1, |&a| a as i64);
                let last = t + 1 == ep.frames();
                let _ = write!(
                    out,
                    "{e},{t},{action},{:?},{},{}",
                    ep.rewards[t],
                    u8::from(last && ep.terminated),
                    u8::from(last && ep.truncated)
                );
                for x in ep.frame(t) {
                    let _ = write!(out, ",{x:?}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.is_empty());
        let (_, header) = lines.next().ok_or(Error::EmptyBuffer)?;
        let dim = header.split(',').count().saturating_sub(6);
        if dim == 0 {
            return Err(Error::Config {
                line: 1,
                message: "replay header has no observation columns".into(),
            });
        }
        let mut buf = ReplayBuffer::new(dim);
        let mut current: Option<usize> = None;
        let mut pending: Option<usize> = None;
        for (i, line) in lines {
            let bad = |message: String| Error::Config { line: i + 1, message };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 + dim {
                return Err(bad(format!("expected {} columns, got {}", 6 + dim, cols.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let e = num(cols[0])? as usize;
            let action = num(cols[2])?;
            let reward = num(cols[3])?;
            let term = num(cols[4])? != 0.0;
            let trunc = num(cols[5])? != 0.0;
            let obs = cols[6..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            if current != Some(e) {
                buf.begin_episode(&obs)?;
                current = Some(e);
            } else {
                let a = pending.ok_or_else(|| bad("frame follows a row without an action".into()))?;
                buf.push(a, &obs, reward, term, trunc)?;
            }
            pending = (action >= 0.0).then_some(action as usize);
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn draw_from<R: Rng + ?Sized>(starts: &[(usize, usize)], batch: usize, rng: &mut R) -> Result<Vec<SegmentDraw>> {
    if starts.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let n = starts.len();
    let beta = Beta::new(RECENCY_BETA.0, RECENCY_BETA.1).expect("valid Beta parameters");
    Ok((0..batch)
        .map(|_| {
            let recent = uniform01(rng) >= UNIFORM_SHARE;
            let i = if recent {
                ((beta.sample(rng) * n as f64).floor() as usize).min(n - 1)
            } else {
                rng.random_range(0..n)
            };
            let (episode, start) = starts[i];
            SegmentDraw {
                episode,
                start,
                recent,
            }
        })
        .collect())
}
