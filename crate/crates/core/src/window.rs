//! Causal context windows over frame sequences.
//!
//! Every network in the crate sees frame `t` through the last `window` frames
//! ending at `t`. Slots before the start of a sequence are zero, and a missing
//! previous action is encoded with a dedicated padding slot of the action
//! one-hot, whose weights therefore act as a learned padding embedding.

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// A batch of equally long frame sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub seqs: usize,
    pub len: usize,
    pub dim: usize,
    /// `seqs × len × dim`.
    pub latents: Vec<f64>,
    /// `seqs × len` denoising times.
    pub taus: Vec<f64>,
    /// `seqs × len`; entry `t` is the action taken at frame `t−1`.
    pub prev_actions: Vec<Option<usize>>,
}

impl SeqBatch {
    pub fn new(seqs: usize, len: usize, dim: usize) -> Self {
        Self {
            seqs,
            len,
            dim,
            latents: vec![0.0; seqs * len * dim],
            taus: vec![1.0; seqs * len],
            prev_actions: vec![None; seqs * len],
        }
    }

    pub fn latent(&self, seq: usize, frame: usize) -> &[f64] {
        let o = (seq * self.len + frame) * self.dim;
        &self.latents[o..o + self.dim]
    }

    pub fn latent_mut(&mut self, seq: usize, frame: usize) -> &mut [f64] {
        let o = (seq * self.len + frame) * self.dim;
        &mut self.latents[o..o + self.dim]
    }

    pub fn tau(&self, seq: usize, frame: usize) -> f64 {
        self.taus[seq * self.len + frame]
    }

    pub fn set_tau(&mut self, seq: usize, frame: usize, tau: f64) {
        self.taus[seq * self.len + frame] = tau;
    }

    pub fn prev_action(&self, seq: usize, frame: usize) -> Option<usize> {
        self.prev_actions[seq * self.len + frame]
    }

    pub fn set_prev_action(&mut self, seq: usize, frame: usize, action: Option<usize>) {
        self.prev_actions[seq * self.len + frame] = action;
    }

    /// Every `(seq, frame)` pair in row-major order.
    pub fn all_rows(&self) -> Vec<(usize, usize)> {
        (0..self.seqs)
            .flat_map(|s| (0..self.len).map(move |t| (s, t)))
            .collect()
    }
}

/// What each window slot carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub latent_dim: usize,
    /// Number of real actions when the previous action is an input.
    pub actions: Option<usize>,
    pub tau: bool,
}

impl WindowSpec {
    pub fn slot_dim(&self) -> usize {
        self.latent_dim + self.actions.map_or(0, |n| n + 1) + usize::from(self.tau)
    }

    pub fn feature_dim(&self) -> usize {
        self.window * self.slot_dim()
    }

    fn check(&self, batch: &SeqBatch) -> Result<()> {
        if batch.dim != self.latent_dim {
            return Err(Error::DimensionMismatch {
                what: "latent dimension",
                expected: self.latent_dim,
                actual: batch.dim,
            });
        }
        Ok(())
    }

    /// Writes the features of `(seq, frame)` into `out`.
    pub fn write(&self, batch: &SeqBatch, seq: usize, frame: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.feature_dim());
        let slot = self.slot_dim();
        let d = self.latent_dim;
        for w in 0..self.window {
            let dst = &mut out[w * slot..(w + 1) * slot];
            dst.fill(0.0);
            let back = self.window - 1 - w;
            let present = frame >= back;
            if present {
                let j = frame - back;
                dst[..d].copy_from_slice(batch.latent(seq, j));
            }
            let mut o = d;
            if let Some(n) = self.actions {
                let idx = if present {
                    batch.prev_action(seq, frame - back).unwrap_or(n)
                } else {
                    n
                };
                dst[o + idx] = 1.0;
                o += n + 1;
            }
            if self.tau && present {
                dst[o] = batch.tau(seq, frame - back);
            }
        }
    }

    /// Feature matrix with one row per requested `(seq, frame)`.
    pub fn features(&self, batch: &SeqBatch, rows: &[(usize, usize)]) -> Result<Matrix> {
        self.check(batch)?;
        let fd = self.feature_dim();
        let mut m = Matrix::zeros(rows.len(), fd);
        for (r, &(s, t)) in rows.iter().enumerate() {
            if s >= batch.seqs || t >= batch.len {
                return Err(Error::OutOfRange {
                    index: s * batch.len + t,
                    len: batch.seqs * batch.len,
                });
            }
            self.write(batch, s, t, m.row_mut(r));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_layout() {
        let mut b = SeqBatch::new(1, 3, 2);
        for t in 0..3 {
            b.latent_mut(0, t).copy_from_slice(&[t as f64 + 1.0, -(t as f64) - 1.0]);
            b.set_tau(0, t, 0.1 * t as f64);
        }
        b.set_prev_action(0, 1, Some(2));
        b.set_prev_action(0, 2, Some(0));
        let spec = WindowSpec {
            window: 2,
            latent_dim: 2,
            actions: Some(3),
            tau: true,
        };
        assert_eq!(spec.slot_dim(), 7);
        let m = spec.features(&b, &[(0, 0), (0, 2)]).unwrap();
        // frame 0: padding slot, then frame 0 with padding action
        assert_eq!(m.row(0), &[0., 0., 0., 0., 0., 1., 0., 1., -1., 0., 0., 0., 1., 0.]);
        // frame 2: frame 1 then frame 2
        assert_eq!(m.row(1), &[2., -2., 0., 0., 1., 0., 0.1, 3., -3., 1., 0., 0., 0., 0.2]);
    }

    #[test]
    fn latent_only_window() {
        let mut b = SeqBatch::new(2, 2, 1);
        b.latent_mut(1, 1)[0] = 5.0;
        b.latent_mut(1, 0)[0] = 4.0;
        let spec = WindowSpec {
            window: 3,
            latent_dim: 1,
            actions: None,
            tau: false,
        };
        let m = spec.features(&b, &[(1, 1)]).unwrap();
        assert_eq!(m.row(0), &[0.0, 4.0, 5.0]);
        assert!(spec.features(&b, &[(2, 0)]).is_err());
    }
}
