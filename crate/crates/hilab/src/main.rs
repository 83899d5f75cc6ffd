use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hilab_core::agent::Agent;
use hilab_core::checkpoint::Checkpoint;
use hilab_core::config::{load_config, to_text};
use hilab_core::experiments::{
    gen_quality, gen_quality_csv, header, interp_csv, interp_study, pairs_csv, pairs_study, schedule_csv,
    train_seeds, GenQualityParams, InterpParams, PairsParams, INTERP_SETTINGS,
};
use hilab_core::imagination::SamplingMode;
use hilab_core::replay::ReplayBuffer;
use hilab_core::schedule::{ScheduleKind, ScheduleSpec};
use hilab_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hilab", version, about = "Horizon imagination studies on a toy world model")]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output file (directory for `train`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for independent units.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Change rate of coupled sampling on random distribution pairs.
    PairsStudy(PairsArgs),
    /// Action changes along interpolated distributions, stable vs naive.
    InterpStudy(InterpArgs),
    /// The denoising-time matrix as `b,t,tau`.
    ScheduleDump(ScheduleArgs),
    /// Latent MSE of action-conditioned generation over a (nu, budget) grid.
    GenQuality(GenQualityArgs),
    /// Trains agents and writes per-seed return curves.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct PairsArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 10, 18])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    /// Skip the p = q control pair.
    #[arg(long)]
    no_control: bool,
}

#[derive(Args, Debug)]
struct InterpArgs {
    /// Dirichlet settings: `low`, `uniform`, `high` or a positive number.
    #[arg(long, value_delimiter = ',', default_values_t = ["low".to_string(), "uniform".to_string(), "high".to_string()])]
    alpha: Vec<String>,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value_t = 10_000)]
    sims: usize,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long, default_value = "horizon")]
    kind: String,
    #[arg(long, default_value_t = 32)]
    horizon: usize,
    #[arg(long, default_value_t = 16)]
    budget: usize,
    #[arg(long, default_value_t = 4.0)]
    nu: f64,
}

#[derive(Args, Debug)]
struct GenQualityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Replay dump written by `train`.
    #[arg(long)]
    replay: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0])]
    nu: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8, 16, 32, 64, 128])]
    budget: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    horizon: usize,
    #[arg(long, default_value_t = 128)]
    segments: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` config; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

fn parse_setting(s: &str) -> Result<(String, f64)> {
    if let Some((name, a)) = INTERP_SETTINGS.iter().find(|(name, _)| *name == s) {
        return Ok((name.to_string(), *a));
    }
    match s.parse::<f64>() {
        Ok(a) if a.is_finite() && a > 0.0 => Ok((s.to_string(), a)),
        _ => Err(Error::InvalidParameter(format!(
            "alpha setting {s:?}: expected low, uniform, high or a positive number"
        ))),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            fs::write(path, text).map_err(|e| io_err(path, e))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::PairsStudy(a) => {
            let params = PairsParams {
                ns: a.n,
                pairs: a.pairs,
                draws: a.draws,
                control: !a.no_control,
                seed: cli.seed,
                threads: cli.threads,
            };
            let rows = pairs_study(&params)?;
            let desc = params.describe();
            emit(out, &(header("pairs-study", &desc, &format!("seed={}", cli.seed)) + &pairs_csv(&rows)))
        }
        Command::InterpStudy(a) => {
            let params = InterpParams {
                settings: a.alpha.iter().map(|s| parse_setting(s)).collect::<Result<_>>()?,
                n: a.n,
                pairs: a.pairs,
                sims: a.sims,
                seed: cli.seed,
                threads: cli.threads,
                ..InterpParams::default()
            };
            let rows = interp_study(&params)?;
            let desc = params.describe();
            emit(out, &(header("interp-study", &desc, &format!("seed={}", cli.seed)) + &interp_csv(&rows)))
        }
        Command::ScheduleDump(a) => {
            let spec = match a.kind.parse::<ScheduleKind>()? {
                ScheduleKind::Horizon => ScheduleSpec::horizon(a.horizon, a.budget, a.nu),
                ScheduleKind::Pyramidal => ScheduleSpec::pyramidal(a.horizon, a.budget),
            };
            spec.validate()?;
            let desc = format!("{spec:?}");
            emit(out, &(header("schedule-dump", &desc, "") + &schedule_csv(&spec)?))
        }
        Command::GenQuality(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let agent = Agent::from_checkpoint(&ck)?;
            let buffer = ReplayBuffer::load(&a.replay)?;
            let params = GenQualityParams {
                nus: a.nu,
                budgets: a.budget,
                horizon: a.horizon,
                segments: a.segments,
                seed: cli.seed,
                threads: cli.threads,
            };
            let rows = gen_quality(&agent, &buffer, &params)?;
            let desc = format!("{} checkpoint={}", params.describe(), a.checkpoint.display());
            emit(out, &(header("gen-quality", &desc, &format!("seed={}", cli.seed)) + &gen_quality_csv(&rows)))
        }
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(p) => load_config(p)?,
                None => Default::default(),
            };
            if let Some(m) = &a.mode {
                cfg.mode = m.parse::<SamplingMode>()?;
            }
            if let Some(b) = a.budget {
                cfg.schedule.budget = b;
            }
            if let Some(nu) = a.nu {
                cfg.schedule.decay_horizon = nu;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if a.seeds == 0 {
                return Err(Error::InvalidParameter("--seeds must be >= 1".into()));
            }
            let dir = out.unwrap_or(Path::new("hilab-train"));
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| cli.seed + i).collect();
            let reports = train_seeds(&cfg, &seeds, Some(dir), cli.threads)?;
            for (seed, r) in seeds.iter().zip(&reports) {
                let c = hilab_core::agent::AgentConfig { seed: *seed, ..cfg.clone() };
                let text = to_text(&c);
                let head = header("train", &text, &format!("seed={seed}"));
                emit(Some(&dir.join(format!("returns_seed{seed}.csv"))), &(head.clone() + &r.returns_csv()))?;
                emit(Some(&dir.join(format!("metrics_seed{seed}.csv"))), &(head + &r.metrics_csv()))?;
                let run_dir = dir.join(format!("seed-{seed}"));
                r.buffer.save(&run_dir.join("replay.csv"))?;
                r.agent.to_checkpoint(c.epochs.saturating_sub(1))?.save(&run_dir.join("final.hilm"))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hilab: {e}");
            ExitCode::FAILURE
        }
    }
}
