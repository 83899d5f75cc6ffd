//! Controlled studies and sweeps; each returns rows and renders CSV.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::agent::{run_training, Agent, AgentConfig, TrainingReport};
use crate::error::{Error, Result};
use crate::imagination::{generate_with_actions, Context, RecordedSegment, SamplingMode};
use crate::replay::ReplayBuffer;
use crate::rng::{permutation, uniform01, StreamRng, Streams};
use crate::schedule::ScheduleSpec;
use crate::stable::{change_upper_bound, sample_naive, sample_stable, total_variation, ActionDistribution, DrawState};

/// Formats with 9 significant digits, trailing zeros trimmed.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let mag = x.abs().log10().floor() as i32;
    let prec = (8 - mag).max(0) as usize;
    let s = format!("{x:.prec$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// `# hilab <command> config_hash=<hash> <extra>` header line.
pub fn header(command: &str, params: &str, extra: &str) -> String {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!(
        "# hilab {command} config_hash={} timestamp={ts} {extra}\n",
        crate::config::config_hash(params)
    )
}

/// Drops `#` lines, leaving the deterministic body.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Maps `f` over `items` on up to `threads` workers; output keeps input order.
pub fn par_map<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Dirichlet draw via normalised Gamma variates.
pub fn dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Result<ActionDistribution> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidParameter(format!("Dirichlet concentration {alpha}: {e}")))?;
    loop {
        let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = g.iter().sum();
        // Tiny concentrations can underflow every component.
        if sum > 0.0 && sum.is_finite() {
            let mut p: Vec<f64> = g.iter().map(|x| x / sum).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            return ActionDistribution::new(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairsParams {
    pub ns: Vec<usize>,
    pub pairs: usize,
    pub draws: usize,
    /// Make pair 0 of every `n` a `p = q` control.
    pub control: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for PairsParams {
    fn default() -> Self {
        Self {
            ns: vec![4, 10, 18],
            pairs: 1000,
            draws: 10_000,
            control: true,
            seed: 0,
            threads: 1,
        }
    }
}

impl PairsParams {
    pub fn describe(&self) -> String {
        format!(
            "ns={:?} pairs={} draws={} control={} seed={}",
            self.ns, self.pairs, self.draws, self.control, self.seed
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRow {
    pub n: usize,
    pub pair_id: usize,
    pub tv: f64,
    pub upper: f64,
    pub empirical_rate: f64,
    /// `empirical_rate / tv`, reported as 0 for the control pair.
    pub rate_over_tv: f64,
}

/// Fraction of shared draws on which `p` and `q` pick different actions.
/// With `perm` set, only `omega` is redrawn and the order stays fixed.
pub fn empirical_change_rate<R: Rng + ?Sized>(
    p: &ActionDistribution,
    q: &ActionDistribution,
    perm: Option<&[usize]>,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = p.len();
    let mut changed = 0usize;
    for _ in 0..draws {
        let st = match perm {
            Some(perm) => DrawState::new((1..n).map(|_| uniform01(rng)).collect(), perm.to_vec())?,
            None => DrawState::sample(rng, n),
        };
        if sample_stable(p, &st)? != sample_stable(q, &st)? {
            changed += 1;
        }
    }
    Ok(changed as f64 / draws.max(1) as f64)
}

/// Each pair gets one action order; its draws share that order, so the
/// upper bound is the one for that order.
pub fn pairs_study(params: &PairsParams) -> Result<Vec<PairRow>> {
    if params.ns.iter().any(|&n| n < 2) {
        return Err(Error::InvalidParameter("every n must be >= 2".into()));
    }
    if params.pairs == 0 || params.draws == 0 {
        return Err(Error::InvalidParameter("pairs and draws must be >= 1".into()));
    }
    let streams = Streams::new(params.seed);
    let units: Vec<(usize, usize)> = params
        .ns
        .iter()
        .flat_map(|&n| (0..params.pairs).map(move |i| (n, i)))
        .collect();
    par_map(&units, params.threads, |&(n, i)| {
        let mut rng = streams.child("pairs", n as u64).stream("pair", i as u64);
        let p = dirichlet(1.0, n, &mut rng)?;
        let q = if params.control && i == 0 {
            p.clone()
        } else {
            dirichlet(1.0, n, &mut rng)?
        };
        let perm = permutation(&mut rng, n);
        let tv = total_variation(&p, &q)?;
        let upper = change_upper_bound(&p, &q, &perm)?;
        let rate = empirical_change_rate(&p, &q, Some(&perm), params.draws, &mut rng)?;
        Ok(PairRow {
            n,
            pair_id: i,
            tv,
            upper,
            empirical_rate: rate,
            rate_over_tv: if tv > 0.0 { rate / tv } else { 0.0 },
        })
    })
}

pub fn pairs_csv(rows: &[PairRow]) -> String {
    let mut out = String::from("n,pair_id,tv,upper,empirical_rate,rate_over_tv\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.n,
            r.pair_id,
            fmt_sig(r.tv),
            fmt_sig(r.upper),
            fmt_sig(r.empirical_rate),
            fmt_sig(r.rate_over_tv)
        );
    }
    out
}

/// Dirichlet concentration settings of the interpolation study.
pub const INTERP_SETTINGS: [(&str, f64); 3] = [("low", 0.2), ("uniform", 1.0), ("high", 5.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct InterpParams {
    pub settings: Vec<(String, f64)>,
    pub n: usize,
    pub pairs: usize,
    pub sims: usize,
    pub interp_steps: usize,
    pub hold_steps: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for InterpParams {
    fn default() -> Self {
        Self {
            settings: INTERP_SETTINGS.iter().map(|(s, a)| (s.to_string(), *a)).collect(),
            n: 10,
            pairs: 100,
            sims: 10_000,
            interp_steps: 8,
            hold_steps: 8,
            seed: 0,
            threads: 1,
        }
    }
}

impl InterpParams {
    pub fn describe(&self) -> String {
        format!(
            "settings={:?} n={} pairs={} sims={} steps={}+{} seed={}",
            self.settings, self.n, self.pairs, self.sims, self.interp_steps, self.hold_steps, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpRow {
    pub setting: String,
    pub mode: SamplingMode,
    pub pair_id: usize,
    pub mean_changes: f64,
    pub std_changes: f64,
}

/// Distributions moving linearly from `p` to `q` over `interp` steps, then
/// held at `q` for `hold` more.
pub fn interpolation_path(
    p: &ActionDistribution,
    q: &ActionDistribution,
    interp: usize,
    hold: usize,
) -> Result<Vec<ActionDistribution>> {
    (0..interp + hold)
        .map(|t| {
            let w = (t as f64 / interp.max(1) as f64).min(1.0);
            let mix = p.probs().iter().zip(q.probs()).map(|(a, b)| (1.0 - w) * a + w * b).collect();
            ActionDistribution::new(mix)
        })
        .collect()
}

/// Action changes along `path` for one simulated rollout.
pub fn simulate_changes(path: &[ActionDistribution], mode: SamplingMode, rng: &mut StreamRng) -> Result<usize> {
    let n = path[0].len();
    let mut prev = None;
    let mut changes = 0;
    let state = match mode {
        SamplingMode::Stable => Some(DrawState::sample(rng, n)),
        SamplingMode::Naive => None,
    };
    for d in path {
        let a = match &state {
            Some(st) => sample_stable(d, st)?,
            None => sample_naive(d, rng),
        };
        if prev.is_some_and(|p| p != a) {
            changes += 1;
        }
        prev = Some(a);
    }
    Ok(changes)
}

pub fn interp_study(params: &InterpParams) -> Result<Vec<InterpRow>> {
    if params.n < 2 || params.pairs == 0 || params.sims == 0 {
        return Err(Error::InvalidParameter("need n >= 2, pairs >= 1, sims >= 1".into()));
    }
    let streams = Streams::new(params.seed);
    let mut units = Vec::new();
    for (si, (name, alpha)) in params.settings.iter().enumerate() {
        if !(alpha.is_finite() && *alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("setting {name}: alpha must be > 0")));
        }
        for mode in [SamplingMode::Stable, SamplingMode::Naive] {
            for i in 0..params.pairs {
                units.push((si, mode, i));
            }
        }
    }
    par_map(&units, params.threads, |&(si, mode, i)| {
        let (name, alpha) = &params.settings[si];
        let setting = streams.child("interp", si as u64);
        // Both modes see the same pair.
        let mut rng = setting.stream("pair", i as u64);
        let p = dirichlet(*alpha, params.n, &mut rng)?;
        let q = dirichlet(*alpha, params.n, &mut rng)?;
        let path = interpolation_path(&p, &q, params.interp_steps, params.hold_steps)?;
        let mut rng = setting.stream(&format!("sims.{}", mode.as_str()), i as u64);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..params.sims {
            let c = simulate_changes(&path, mode, &mut rng)? as f64;
            sum += c;
            sq += c * c;
        }
        let m = sum / params.sims as f64;
        let var = (sq / params.sims as f64 - m * m).max(0.0);
        Ok(InterpRow {
            setting: name.clone(),
            mode,
            pair_id: i,
            mean_changes: m,
            std_changes: var.sqrt(),
        })
    })
}

pub fn interp_csv(rows: &[InterpRow]) -> String {
    let mut out = String::from("setting,mode,pair_id,mean_changes,std_changes\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.setting,
            r.mode.as_str(),
            r.pair_id,
            fmt_sig(r.mean_changes),
            fmt_sig(r.std_changes)
        );
    }
    out
}

/// `b,t,tau` for every entry of the schedule matrix.
pub fn schedule_csv(spec: &ScheduleSpec) -> Result<String> {
    let k = spec.build()?;
    let mut out = String::from("b,t,tau\n");
    for b in 0..=k.budget() {
        for t in 0..k.horizon() {
            let _ = writeln!(out, "{b},{t},{}", fmt_sig(k.get(b, t)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenQualityParams {
    pub nus: Vec<f64>,
    pub budgets: Vec<usize>,
    pub horizon: usize,
    pub segments: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for GenQualityParams {
    fn default() -> Self {
        Self {
            nus: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            budgets: vec![2, 4, 8, 16, 32, 64, 128],
            horizon: 32,
            segments: 128,
            seed: 0,
            threads: 1,
        }
    }
}

impl GenQualityParams {
    pub fn describe(&self) -> String {
        format!(
            "nus={:?} budgets={:?} horizon={} segments={} seed={}",
            self.nus, self.budgets, self.horizon, self.segments, self.seed
        )
    }

    /// Grid cells in output order. With `ν = 1` only budgets that are
    /// multiples of the horizon are kept.
    pub fn grid(&self) -> Vec<(f64, usize)> {
        let h = self.horizon;
        let mut out = Vec::new();
        for &nu in &self.nus {
            for &b in &self.budgets {
                if nu == 1.0 && (b < h || b % h != 0) {
                    continue;
                }
                if ScheduleSpec::horizon(h, b, nu).validate().is_ok() {
                    out.push((nu, b));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenQualityRow {
    pub nu: f64,
    pub budget: usize,
    pub mse: f64,
}

/// Segments of `horizon + 1` frames: the first is context, the rest are
/// generated from the recorded actions.
pub fn recorded_segments(buffer: &ReplayBuffer, horizon: usize, count: usize, seed: u64) -> Result<Vec<(RecordedSegment, crate::flow::LatentTrajectory)>> {
    let starts = buffer.segment_starts(horizon + 1);
    if starts.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut rng = Streams::new(seed).stream("gen.segments", 0);
    (0..count)
        .map(|_| {
            let (e, s) = starts[rng.random_range(0..starts.len())];
            let seg = buffer.segment(e, s, horizon + 1)?;
            let rec = RecordedSegment {
                context: Context {
                    latents: seg.latent(0).to_vec(),
                    actions: Vec::new(),
                },
                future_actions: seg.actions.clone(),
            };
            Ok((rec, seg))
        })
        .collect()
}

/// Mean squared latent error over valid generated frames.
pub fn generation_mse(
    agent: &Agent,
    segments: &[(RecordedSegment, crate::flow::LatentTrajectory)],
    spec: &ScheduleSpec,
    seed: u64,
) -> Result<f64> {
    let k = spec.build()?;
    let recs: Vec<RecordedSegment> = segments.iter().map(|(r, _)| r.clone()).collect();
    let out = generate_with_actions(&agent.denoiser, &k, &recs, seed)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (s, (_, truth)) in segments.iter().enumerate() {
        for t in 1..truth.len() {
            if !truth.valid[t] {
                continue;
            }
            for (a, b) in out.latent(s, t).iter().zip(truth.latent(t)) {
                sum += (a - b) * (a - b);
            }
            count += truth.dim;
        }
    }
    if count == 0 {
        return Err(Error::EmptyBuffer);
    }
    let mse = sum / count as f64;
    if !mse.is_finite() {
        return Err(Error::non_finite(format!("generation mse at nu={} B={}", spec.decay_horizon, spec.budget)));
    }
    Ok(mse)
}

pub fn gen_quality(agent: &Agent, buffer: &ReplayBuffer, params: &GenQualityParams) -> Result<Vec<GenQualityRow>> {
    let segments = recorded_segments(buffer, params.horizon, params.segments, params.seed)?;
    let grid = params.grid();
    // Every cell starts from the same noise.
    let noise_seed = Streams::new(params.seed).stream("gen.noise", 0).random();
    par_map(&grid, params.threads, |&(nu, budget)| {
        let spec = ScheduleSpec::horizon(params.horizon, budget, nu);
        Ok(GenQualityRow {
            nu,
            budget,
            mse: generation_mse(agent, &segments, &spec, noise_seed)?,
        })
    })
}

pub fn gen_quality_csv(rows: &[GenQualityRow]) -> String {
    let mut out = String::from("nu,budget,mse\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", fmt_sig(r.nu), r.budget, fmt_sig(r.mse));
    }
    out
}

/// One training run per seed, in seed order.
pub fn train_seeds(cfg: &AgentConfig, seeds: &[u64], out: Option<&Path>, threads: usize) -> Result<Vec<TrainingReport>> {
    par_map(seeds, threads, |&seed| {
        let c = AgentConfig { seed, ..cfg.clone() };
        let dir = out.map(|d| d.join(format!("seed-{seed}")));
        run_training(&c, dir.as_deref())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.25), "0.25");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(2.0 / 3.0), "0.666666667");
        assert_eq!(fmt_sig(-0.125), "-0.125");
        assert_eq!(fmt_sig(123.456), "123.456");
        assert_eq!(fmt_sig(1e-12 * 0.5), "0.0000000000005");
    }

    #[test]
    fn csv_body_strips_comments() {
        assert_eq!(csv_body("# x\na,b\n1,2\n"), "a,b\n1,2\n");
    }

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<u32> = (0..37).collect();
        for threads in [1, 2, 5] {
            let out = par_map(&items, threads, |x| Ok(x * 2)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn dirichlet_mean() {
        let mut rng = Streams::new(1).stream("d", 0);
        let n = 4;
        let mut acc = vec![0.0; n];
        let reps = 20_000;
        for _ in 0..reps {
            let p = dirichlet(0.2, n, &mut rng).unwrap();
            for (a, x) in acc.iter_mut().zip(p.probs()) {
                *a += x / reps as f64;
            }
        }
        for a in acc {
            assert!((a - 0.25).abs() < 0.02, "{a}");
        }
    }

    #[test]
    fn control_pair_never_changes() {
        let params = PairsParams {
            ns: vec![5],
            pairs: 3,
            draws: 2000,
            ..PairsParams::default()
        };
        let rows = pairs_study(&params).unwrap();
        assert_eq!(rows[0].empirical_rate, 0.0);
        assert_eq!(rows[0].tv, 0.0);
        for r in &rows[1..] {
            assert!(r.tv > 0.0);
            assert!(r.empirical_rate <= r.upper + 0.05);
        }
        assert!(pairs_study(&PairsParams { ns: vec![1], ..params }).is_err());
    }

    #[test]
    fn interpolation_path_shape() {
        let p = ActionDistribution::one_hot(3, 0).unwrap();
        let q = ActionDistribution::one_hot(3, 2).unwrap();
        let path = interpolation_path(&p, &q, 4, 2).unwrap();
        assert_eq!(path.len(), 6);
        assert_eq!(path[0], p);
        assert!((path[2].probs()[0] - 0.5).abs() < 1e-12);
        assert_eq!(path[4], q);
        assert_eq!(path[5], q);
    }

    #[test]
    fn gen_grid_restricts_nu_one() {
        let g = GenQualityParams::default().grid();
        assert!(g.contains(&(1.0, 32)));
        assert!(!g.contains(&(1.0, 16)));
        assert!(g.contains(&(4.0, 16)));
        assert!(g.contains(&(32.0, 2)));
    }

    #[test]
    fn schedule_dump_rows() {
        let csv = schedule_csv(&ScheduleSpec::horizon(4, 4, 2.0)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 5 * 4);
        assert_eq!(lines[1], "0,0,0");
        assert_eq!(lines[20], "4,3,1");
    }
}
