//! Denoising-time schedules.
//!
//! A schedule is a `(B+1) × H` matrix: row `b` holds the denoising time of
//! every frame before step `b`, so step `b` moves frame `t` from `K[b][t]` to
//! `K[b+1][t]`. Row 0 is pure noise and row `B` is fully clean.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// Clamped lines of slope `-1/ν`; budget and decay horizon are independent.
    Horizon,
    /// Staggered ramps; the decay horizon is tied to the budget and `B >= H`.
    Pyramidal,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Horizon => "horizon",
            ScheduleKind::Pyramidal => "pyramidal",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizon" => Ok(ScheduleKind::Horizon),
            "pyramidal" => Ok(ScheduleKind::Pyramidal),
            other => Err(Error::InvalidParameter(format!(
                "unknown schedule kind {other:?} (expected horizon|pyramidal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub horizon: usize,
    pub budget: usize,
    pub decay_horizon: f64,
    pub kind: ScheduleKind,
}

impl ScheduleSpec {
    pub fn horizon(horizon: usize, budget: usize, decay_horizon: f64) -> Self {
        Self {
            horizon,
            budget,
            decay_horizon,
            kind: ScheduleKind::Horizon,
        }
    }

    pub fn pyramidal(horizon: usize, budget: usize) -> Self {
        Self {
            horizon,
            budget,
            decay_horizon: horizon as f64,
            kind: ScheduleKind::Pyramidal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidSchedule("horizon must be >= 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidSchedule("budget must be >= 1".into()));
        }
        let nu = self.decay_horizon;
        if !(nu.is_finite() && nu >= 1.0 && nu <= self.horizon as f64) {
            return Err(Error::InvalidSchedule(format!(
                "decay horizon {nu} outside [1, {}]",
                self.horizon
            )));
        }
        if self.kind == ScheduleKind::Pyramidal && self.budget < self.horizon {
            return Err(Error::InvalidSchedule(format!(
                "pyramidal schedule needs budget >= horizon (got B={}, H={})",
                self.budget, self.horizon
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ScheduleMatrix> {
        match self.kind {
            ScheduleKind::Horizon => horizon_schedule(self),
            ScheduleKind::Pyramidal => pyramidal_schedule(self),
        }
    }
}

/// Row-major `(B+1) × H` matrix of denoising times.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScheduleMatrix {
    /// Wraps raw rows without checking the schedule invariants.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.len() < 2 || cols == 0 {
            return Err(Error::InvalidSchedule(
                "need at least two rows and one column".into(),
            ));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                what: "schedule row length",
                expected: cols,
                actual: r.len(),
            });
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn budget(&self) -> usize {
        self.rows - 1
    }

    pub fn horizon(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// `K[b+1] − K[b]` for step `b ∈ [0, B)`.
    pub fn time_deltas(&self, step: usize) -> Result<Vec<f64>> {
        if step >= self.budget() {
            return Err(Error::OutOfRange {
                index: step,
                len: self.budget(),
            });
        }
        Ok(self
            .row(step + 1)
            .iter()
            .zip(self.row(step))
            .map(|(next, cur)| next - cur)
            .collect())
    }

    /// Whether step `b` advances frame `t`.
    pub fn advances(&self, step: usize, frame: usize) -> bool {
        self.get(step + 1, frame) > self.get(step, frame)
    }

    /// Checks every matrix invariant and reports the first violated cell.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let last = self.rows - 1;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let v = self.get(i, j);
                let kind = if !(0.0..=1.0).contains(&v) {
                    Some(ViolationKind::OutOfRange(v))
                } else if i == 0 && v != 0.0 {
                    Some(ViolationKind::FirstRowNotZero(v))
                } else if i == last && v != 1.0 {
                    Some(ViolationKind::LastRowNotOne(v))
                } else if i > 0 && v < self.get(i - 1, j) {
                    Some(ViolationKind::ColumnDecreases {
                        above: self.get(i - 1, j),
                        value: v,
                    })
                } else if j > 0 && v > self.get(i, j - 1) {
                    Some(ViolationKind::RowIncreases {
                        left: self.get(i, j - 1),
                        value: v,
                    })
                } else {
                    None
                };
                if let Some(kind) = kind {
                    return Err(Violation { row: i, col: j, kind });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    OutOfRange(f64),
    FirstRowNotZero(f64),
    LastRowNotOne(f64),
    ColumnDecreases { above: f64, value: f64 },
    RowIncreases { left: f64, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub row: usize,
    pub col: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cell ({}, {}): ", self.row, self.col)?;
        match &self.kind {
            ViolationKind::OutOfRange(v) => write!(f, "value {v} outside [0,1]"),
            ViolationKind::FirstRowNotZero(v) => write!(f, "first row holds {v}, expected 0"),
            ViolationKind::LastRowNotOne(v) => write!(f, "last row holds {v}, expected 1"),
            ViolationKind::ColumnDecreases { above, value } => {
                write!(f, "column decreases from {above} to {value}")
            }
            ViolationKind::RowIncreases { left, value } => {
                write!(f, "row increases from {left} to {value}")
            }
        }
    }
}

impl std::error::Error for Violation {}

fn build(spec: &ScheduleSpec, cell: impl Fn(usize, usize) -> f64) -> ScheduleMatrix {
    let (h, b) = (spec.horizon, spec.budget);
    let mut data = Vec::with_capacity((b + 1) * h);
    for step in 0..b {
        for frame in 0..h {
            data.push(cell(step, frame).clamp(0.0, 1.0));
        }
    }
    data.extend(std::iter::repeat_n(1.0, h));
    ScheduleMatrix {
        rows: b + 1,
        cols: h,
        data,
    }
}

/// `K[b][t] = clamp(−t/ν + (b/B)(1 + (H−1)/ν), 0, 1)`, last row ones.
pub fn horizon_schedule(spec: &ScheduleSpec) -> Result<ScheduleMatrix> {
    spec.validate()?;
    if spec.kind != ScheduleKind::Horizon {
        return Err(Error::InvalidSchedule("expected a horizon spec".into()));
    }
    let nu = spec.decay_horizon;
    let budget = spec.budget as f64;
    let span = 1.0 + (spec.horizon as f64 - 1.0) / nu;
    Ok(build(spec, |step, frame| {
        -(frame as f64) / nu + (step as f64 / budget) * span
    }))
}

/// Staggered ramps: frame `t` starts one step after frame `t−1`, every ramp
/// sharing the slope `1 / (B − H + 1)`.
pub fn pyramidal_schedule(spec: &ScheduleSpec) -> Result<ScheduleMatrix> {
    spec.validate()?;
    if spec.kind != ScheduleKind::Pyramidal {
        return Err(Error::InvalidSchedule("expected a pyramidal spec".into()));
    }
    let denom = (spec.budget - (spec.horizon - 1)) as f64;
    Ok(build(spec, |step, frame| {
        (step as f64 - frame as f64) / denom
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_rows(k: &ScheduleMatrix, expected: &[&[f64]]) {
        assert_eq!(k.to_rows().len(), expected.len());
        for (got, want) in k.to_rows().iter().zip(expected) {
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(*want) {
                assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn horizon_golden() {
        let k = horizon_schedule(&ScheduleSpec::horizon(4, 4, 2.0)).unwrap();
        assert_rows(
            &k,
            &[
                &[0.0, 0.0, 0.0, 0.0],
                &[0.625, 0.125, 0.0, 0.0],
                &[1.0, 0.75, 0.25, 0.0],
                &[1.0, 1.0, 0.875, 0.375],
                &[1.0, 1.0, 1.0, 1.0],
            ],
        );
    }

    #[test]
    fn horizon_sub_frame_golden() {
        let k = horizon_schedule(&ScheduleSpec::horizon(4, 2, 2.0)).unwrap();
        assert_rows(
            &k,
            &[&[0.0, 0.0, 0.0, 0.0], &[1.0, 0.75, 0.25, 0.0], &[1.0, 1.0, 1.0, 1.0]],
        );
        let k = horizon_schedule(&ScheduleSpec::horizon(1, 1, 1.0)).unwrap();
        assert_rows(&k, &[&[0.0], &[1.0]]);
    }

    #[test]
    fn autoregressive_staircase() {
        for h in [1usize, 2, 5, 8, 32] {
            let k = horizon_schedule(&ScheduleSpec::horizon(h, h, 1.0)).unwrap();
            for i in 0..=h {
                for j in 0..h {
                    let want = if i > j { 1.0 } else { 0.0 };
                    assert_eq!(k.get(i, j), want, "H={h} cell ({i},{j})");
                }
            }
            for b in 0..h {
                let d = k.time_deltas(b).unwrap();
                for (j, v) in d.iter().enumerate() {
                    assert_eq!(*v, if j == b { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn pyramidal_golden() {
        let k = pyramidal_schedule(&ScheduleSpec::pyramidal(2, 2)).unwrap();
        assert_rows(&k, &[&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0]]);
        let k = pyramidal_schedule(&ScheduleSpec::pyramidal(2, 4)).unwrap();
        let t = 1.0 / 3.0;
        assert_rows(
            &k,
            &[&[0.0, 0.0], &[t, 0.0], &[2.0 * t, t], &[1.0, 2.0 * t], &[1.0, 1.0]],
        );
        let k = pyramidal_schedule(&ScheduleSpec::pyramidal(1, 1)).unwrap();
        assert_rows(&k, &[&[0.0], &[1.0]]);
    }

    #[test]
    fn sub_frame_budgets() {
        assert!(horizon_schedule(&ScheduleSpec::horizon(8, 4, 2.0)).is_ok());
        assert!(pyramidal_schedule(&ScheduleSpec::pyramidal(8, 4)).is_err());
    }

    #[test]
    fn spec_ranges() {
        assert!(ScheduleSpec::horizon(0, 1, 1.0).validate().is_err());
        assert!(ScheduleSpec::horizon(4, 0, 1.0).validate().is_err());
        assert!(ScheduleSpec::horizon(4, 4, 0.5).validate().is_err());
        assert!(ScheduleSpec::horizon(4, 4, 4.5).validate().is_err());
        assert!(ScheduleSpec::horizon(4, 4, 2.5).validate().is_ok());
    }

    #[test]
    fn deltas_example_and_range() {
        let k = horizon_schedule(&ScheduleSpec::horizon(4, 4, 2.0)).unwrap();
        let d = k.time_deltas(2).unwrap();
        let want = [0.0, 0.25, 0.625, 0.375];
        for (g, w) in d.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(matches!(k.time_deltas(4), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn deltas_telescope() {
        for spec in [
            ScheduleSpec::horizon(7, 3, 2.5),
            ScheduleSpec::horizon(8, 20, 4.0),
            ScheduleSpec::pyramidal(5, 9),
        ] {
            let k = spec.build().unwrap();
            let mut total = vec![0.0; k.horizon()];
            for b in 0..k.budget() {
                for (t, d) in total.iter_mut().zip(k.time_deltas(b).unwrap()) {
                    *t += d;
                }
            }
            for t in total {
                assert!((t - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validate_reports_violations() {
        let k = horizon_schedule(&ScheduleSpec::horizon(4, 4, 2.0)).unwrap();
        assert!(k.validate().is_ok());

        let mut rows = k.to_rows();
        rows[2][1] = 0.1;
        let v = ScheduleMatrix::from_rows(rows).unwrap().validate().unwrap_err();
        assert_eq!((v.row, v.col), (2, 1));
        assert!(matches!(v.kind, ViolationKind::ColumnDecreases { .. }));

        let mut rows = k.to_rows();
        rows[1][0] = 1.5;
        let v = ScheduleMatrix::from_rows(rows).unwrap().validate().unwrap_err();
        assert_eq!((v.row, v.col), (1, 0));
        assert!(matches!(v.kind, ViolationKind::OutOfRange(_)));

        let mut rows = k.to_rows();
        rows[1][2] = 0.5;
        let v = ScheduleMatrix::from_rows(rows).unwrap().validate().unwrap_err();
        assert!(matches!(v.kind, ViolationKind::RowIncreases { .. }));
    }

    #[test]
    fn grid_is_valid_and_budget_honest() {
        for h in [1usize, 2, 4, 8, 32] {
            let nus = [1.0, 2.0, 4.0, 8.0, 16f64.min(h as f64)];
            for b in 1..=4 * h {
                for &nu in nus.iter().filter(|&&nu| nu <= h as f64) {
                    let k = horizon_schedule(&ScheduleSpec::horizon(h, b, nu)).unwrap();
                    k.validate().unwrap_or_else(|v| panic!("H={h} B={b} ν={nu}: {v}"));
                    let active = (0..b)
                        .filter(|&s| k.time_deltas(s).unwrap().iter().any(|&d| d > 0.0))
                        .count();
                    assert_eq!(active, b, "H={h} B={b} ν={nu}");
                }
                if b >= h {
                    let k = pyramidal_schedule(&ScheduleSpec::pyramidal(h, b)).unwrap();
                    k.validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn decay_horizon_slope() {
        for (h, b, nu) in [(16usize, 24usize, 4usize), (32, 16, 4), (8, 8, 2), (32, 64, 8)] {
            let k = horizon_schedule(&ScheduleSpec::horizon(h, b, nu as f64)).unwrap();
            for i in 0..b {
                for j in 0..h.saturating_sub(nu) {
                    let (x, y) = (k.get(i, j), k.get(i, j + nu));
                    let interior = |v: f64| v > 0.0 && v < 1.0;
                    if interior(x) && interior(y) {
                        assert!((x - y - 1.0).abs() < 1e-12);
                    }
                }
                for j in 0..h - 1 {
                    let (x, y) = (k.get(i, j), k.get(i, j + 1));
                    if x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0 {
                        assert!((x - y - 1.0 / nu as f64).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
