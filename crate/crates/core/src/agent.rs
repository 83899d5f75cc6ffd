//! Online training: collect real experience, fit the world model on replayed
//! segments, then train the controller purely in imagination.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::actor_critic::{
    actor_loss, controller_targets, critic_loss, ActionPolicy, ActorCriticConfig, AdvantageScaler, CriticModel,
    PolicyModel,
};
use crate::checkpoint::Checkpoint;
use crate::env::{encode, RingWorld, RingWorldConfig, NUM_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::flow::{DenoiserModel, RewardTermModel, TrainBatch, Trainer};
use crate::imagination::{horizon_imagine, Context, ImaginationConfig, SamplingMode};
use crate::nn::{AdamW, AdamWConfig};
use crate::replay::ReplayBuffer;
use crate::rng::Streams;
use crate::schedule::ScheduleSpec;
use crate::stable::sample_naive;
use crate::window::SeqBatch;

/// World-model learning rate. The actor and critic keep the optimizer default.
pub const WM_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub env: RingWorldConfig,
    pub schedule: ScheduleSpec,
    pub mode: SamplingMode,
    pub epochs: usize,
    pub collect_steps: usize,
    pub wm_steps: usize,
    pub ac_steps: usize,
    pub wm_warmup: usize,
    pub ac_warmup: usize,
    /// Segments per world-model update.
    pub wm_batch: usize,
    /// Frames per training segment.
    pub segment_len: usize,
    /// Imagined rollouts per controller update.
    pub imag_batch: usize,
    /// Clean context frames for imagination.
    pub context: usize,
    /// Causal window of every network.
    pub window: usize,
    pub wm_hidden: usize,
    pub ac_hidden: usize,
    pub wm_opt: AdamWConfig,
    pub ac_opt: AdamWConfig,
    pub ac: ActorCriticConfig,
    pub eval_episodes: usize,
    pub keep_checkpoints: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            env: RingWorldConfig::default(),
            schedule: ScheduleSpec::horizon(32, 16, 4.0),
            mode: SamplingMode::Stable,
            epochs: 60,
            collect_steps: 100,
            wm_steps: 100,
            ac_steps: 25,
            wm_warmup: 2,
            ac_warmup: 5,
            wm_batch: 8,
            segment_len: 33,
            imag_batch: 16,
            context: 1,
            window: 4,
            wm_hidden: 128,
            ac_hidden: 64,
            wm_opt: AdamWConfig {
                lr: WM_LR,
                ..AdamWConfig::default()
            },
            ac_opt: AdamWConfig::default(),
            ac: ActorCriticConfig::default(),
            eval_episodes: 8,
            keep_checkpoints: 3,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.schedule.validate()?;
        let positive = [
            ("train.wm_batch", self.wm_batch),
            ("train.segment_len", self.segment_len),
            ("train.imag_batch", self.imag_batch),
            ("train.window", self.window),
            ("train.wm_hidden", self.wm_hidden),
            ("train.ac_hidden", self.ac_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
            }
        }
        if self.segment_len < 2 {
            return Err(Error::InvalidParameter("train.segment_len must be >= 2".into()));
        }
        if self.ac_warmup < self.wm_warmup {
            return Err(Error::InvalidParameter(format!(
                "actor-critic warmup ({}) precedes world-model warmup ({})",
                self.ac_warmup, self.wm_warmup
            )));
        }
        Ok(())
    }
}

/// One controller update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub mean_return: f64,
    pub ema_s: f64,
}

/// Evaluation from reset after an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    /// Mean discounted return of the sampling policy.
    pub mean_return: f64,
    /// Steps to the goal of a greedy episode, if reached.
    pub steps_to_goal: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub denoiser: DenoiserModel,
    pub reward: RewardTermModel,
    pub policy: PolicyModel,
    pub critic: CriticModel,
    pub scaler: AdvantageScaler,
}

impl Agent {
    pub fn new(cfg: &AgentConfig, streams: &Streams) -> Self {
        let d = OBS_DIM;
        let mut rng = streams.stream("init", 0);
        Self {
            denoiser: DenoiserModel::new(d, NUM_ACTIONS, cfg.window, cfg.wm_hidden, &mut rng),
            reward: RewardTermModel::new(d, cfg.window, cfg.wm_hidden / 2, &mut rng),
            policy: PolicyModel::new(d, NUM_ACTIONS, cfg.window, cfg.ac_hidden, &mut rng),
            critic: CriticModel::new(d, cfg.window, cfg.ac_hidden, &mut rng),
            scaler: AdvantageScaler::default(),
        }
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push("meta.epoch", vec![], vec![epoch as f64])?;
        ck.push("meta.window", vec![], vec![self.denoiser.window.window as f64])?;
        ck.push("meta.latent_dim", vec![], vec![self.denoiser.window.latent_dim as f64])?;
        ck.push("meta.num_actions", vec![], vec![self.policy.num_actions() as f64])?;
        ck.push("scaler.ema_s", vec![], vec![self.scaler.ema_s])?;
        ck.push_mlp("denoiser", &self.denoiser.net)?;
        ck.push_mlp("reward", &self.reward.net)?;
        ck.push_mlp("policy", &self.policy.net)?;
        ck.push_mlp("critic", &self.critic.net)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let window = ck.scalar("meta.window")? as usize;
        let d = ck.scalar("meta.latent_dim")? as usize;
        let n = ck.scalar("meta.num_actions")? as usize;
        let mut rng = Streams::new(0).stream("unused", 0);
        let mut agent = Self {
            denoiser: DenoiserModel::new(d, n, window, 1, &mut rng),
            reward: RewardTermModel::new(d, window, 1, &mut rng),
            policy: PolicyModel::new(d, n, window, 1, &mut rng),
            critic: CriticModel::new(d, window, 1, &mut rng),
            scaler: AdvantageScaler::default(),
        };
        agent.denoiser.net = ck.mlp("denoiser")?;
        agent.reward.net = ck.mlp("reward")?;
        agent.policy.net = ck.mlp("policy")?;
        agent.critic.net = ck.mlp("critic")?;
        agent.scaler.ema_s = ck.scalar("scaler.ema_s")?;
        let checks = [
            ("denoiser input", agent.denoiser.window.feature_dim(), agent.denoiser.net.input_dim()),
            ("reward input", agent.reward.window.feature_dim(), agent.reward.net.input_dim()),
            ("policy input", agent.policy.window.feature_dim(), agent.policy.net.input_dim()),
            ("critic input", agent.critic.window.feature_dim(), agent.critic.net.input_dim()),
        ];
        for (what, expected, actual) in checks {
            if expected != actual {
                return Err(Error::DimensionMismatch { what, expected, actual });
            }
        }
        Ok(agent)
    }
}

/// Keeps the recent real frames the policy sees during collection.
struct RealContext {
    window: usize,
    frames: Vec<Vec<f64>>,
}

impl RealContext {
    fn reset(&mut self, obs: &[f64]) {
        self.frames.clear();
        self.frames.push(encode(obs));
    }

    fn push(&mut self, obs: &[f64]) {
        if self.frames.len() == self.window {
            self.frames.remove(0);
        }
        self.frames.push(encode(obs));
    }

    fn batch(&self) -> SeqBatch {
        let d = self.frames[0].len();
        let mut b = SeqBatch::new(1, self.frames.len(), d);
        for (t, f) in self.frames.iter().enumerate() {
            b.latent_mut(0, t).copy_from_slice(f);
            b.set_tau(0, t, 1.0);
        }
        b
    }
}

fn policy_distribution(policy: &PolicyModel, ctx: &RealContext) -> Result<crate::stable::ActionDistribution> {
    let b = ctx.batch();
    let x = policy.window.features(&b, &[(0, b.len - 1)])?;
    Ok(policy.distributions(&x)?.remove(0))
}

/// Episodes from reset with actions sampled from the policy, as during
/// collection. Returns their mean discounted return and the step count of
/// one greedy episode, if it reaches the goal.
pub fn evaluate<R: Rng + ?Sized>(
    policy: &PolicyModel,
    env_cfg: &RingWorldConfig,
    gamma: f64,
    episodes: usize,
    rng: &mut R,
) -> Result<(f64, Option<usize>)> {
    let mut env = RingWorld::new(env_cfg.clone())?;
    let mut ctx = RealContext {
        window: policy.window.window,
        frames: Vec::new(),
    };
    let mut total = 0.0;
    let mut greedy_steps = None;
    for ep in 0..=episodes {
        let greedy = ep == episodes;
        ctx.reset(&env.reset());
        let mut discount = 1.0;
        let mut ret = 0.0;
        for t in 1.. {
            let dist = policy_distribution(policy, &ctx)?;
            let a = if greedy { dist.argmax() } else { sample_naive(&dist, rng) };
            let step = env.step(a)?;
            ret += discount * step.reward;
            discount *= gamma;
            if step.terminated {
                if greedy {
                    greedy_steps = Some(t);
                }
                break;
            }
            if step.truncated {
                break;
            }
            ctx.push(&step.obs);
        }
        if !greedy {
            total += ret;
        }
    }
    Ok((total / episodes.max(1) as f64, greedy_steps))
}

fn at_step(epoch: usize, step: usize, stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{context} ({stage}, epoch {epoch}, step {step})"),
        },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRecord>,
    /// Mean denoiser loss per world-model epoch.
    pub wm_losses: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingReport {
    /// Mean evaluation return over the last `n` epochs.
    pub fn final_return(&self, n: usize) -> f64 {
        let tail = &self.evals[self.evals.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|e| e.mean_return).sum::<f64>() / tail.len() as f64
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,step,actor_loss,critic_loss,entropy,mean_return,ema_S\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?},{:?},{:?}\n",
                m.epoch, m.step, m.actor_loss, m.critic_loss, m.entropy, m.mean_return, m.ema_s
            ));
        }
        out
    }

    pub fn returns_csv(&self) -> String {
        let mut out = String::from("epoch,mean_return\n");
        for e in &self.evals {
            out.push_str(&format!("{},{:?}\n", e.epoch, e.mean_return));
        }
        out
    }
}

/// Runs the full epoch cycle. With `out` set, a checkpoint is written after
/// every epoch and only the newest `keep_checkpoints` are kept.
pub fn run_training(cfg: &AgentConfig, out: Option<&Path>) -> Result<TrainingReport> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let mut agent = Agent::new(cfg, &streams);
    let mut env_cfg = cfg.env.clone();
    env_cfg.seed = streams.stream("env.seed", 0).random();
    let mut env = RingWorld::new(env_cfg.clone())?;
    let mut buffer = ReplayBuffer::new(OBS_DIM);
    let mut ctx = RealContext {
        window: cfg.window,
        frames: Vec::new(),
    };
    let obs = env.reset();
    ctx.reset(&obs);
    buffer.begin_episode(&encode(&obs))?;

    let mut den_opt = Trainer::new(agent.denoiser.clone(), cfg.wm_opt);
    let mut rew_opt = Trainer::new(agent.reward.clone(), cfg.wm_opt);
    let mut actor_opt = AdamW::new(cfg.ac_opt, agent.policy.net.num_params());
    let mut critic_opt = AdamW::new(cfg.ac_opt, agent.critic.net.num_params());

    let mut report = TrainingReport {
        agent: agent.clone(),
        buffer: ReplayBuffer::new(OBS_DIM),
        metrics: Vec::new(),
        evals: Vec::new(),
        wm_losses: Vec::new(),
        checkpoints: Vec::new(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 0..cfg.epochs {
        let mut rng = streams.stream("collect", epoch as u64);
        for _ in 0..cfg.collect_steps {
            let dist = policy_distribution(&agent.policy, &ctx)?;
            let a = sample_naive(&dist, &mut rng);
            let step = env.step(a)?;
            buffer.push(a, &encode(&step.obs), step.reward, step.terminated, step.truncated)?;
            if step.terminated || step.truncated {
                let obs = env.reset();
                ctx.reset(&obs);
                buffer.begin_episode(&encode(&obs))?;
            } else {
                ctx.push(&step.obs);
            }
        }

        if epoch >= cfg.wm_warmup {
            let mut rng = streams.stream("world_model", epoch as u64);
            let mut sum = 0.0;
            for step in 0..cfg.wm_steps {
                let segs = buffer.sample_segments(cfg.wm_batch, cfg.segment_len, &mut rng)?;
                let batch = TrainBatch::sample(&segs, &mut rng)?;
                sum += den_opt.train_step(&batch).map_err(at_step(epoch, step, "denoiser"))?;
                rew_opt.train_step(&batch).map_err(at_step(epoch, step, "reward model"))?;
            }
            if cfg.wm_steps > 0 {
                report.wm_losses.push((epoch, sum / cfg.wm_steps as f64));
            }
            agent.denoiser = den_opt.model.clone();
            agent.reward = rew_opt.model.clone();
        }

        if epoch >= cfg.ac_warmup {
            let mut rng = streams.stream("controller", epoch as u64);
            for step in 0..cfg.ac_steps {
                let row = train_controller(
                    cfg,
                    &mut agent,
                    &buffer,
                    &mut actor_opt,
                    &mut critic_opt,
                    &mut rng,
                    epoch,
                )
                .map_err(at_step(epoch, step, "controller"))?;
                report.metrics.push(MetricsRow { epoch, step, ..row });
            }
        }

        let mut rng = streams.stream("eval", epoch as u64);
        let (mean_return, steps_to_goal) =
            evaluate(&agent.policy, &env_cfg, cfg.ac.gamma, cfg.eval_episodes, &mut rng)?;
        report.evals.push(EvalRecord {
            epoch,
            mean_return,
            steps_to_goal,
        });

        if let Some(dir) = out {
            let path = dir.join(format!("ckpt-{epoch:04}.hilm"));
            agent.to_checkpoint(epoch)?.save(&path)?;
            report.checkpoints.push(path);
            while report.checkpoints.len() > cfg.keep_checkpoints.max(1) {
                let old = report.checkpoints.remove(0);
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
    }

    report.agent = agent;
    report.buffer = buffer;
    Ok(report)
}

fn train_controller<R: Rng + ?Sized>(
    cfg: &AgentConfig,
    agent: &mut Agent,
    buffer: &ReplayBuffer,
    actor_opt: &mut AdamW,
    critic_opt: &mut AdamW,
    rng: &mut R,
    epoch: usize,
) -> Result<MetricsRow> {
    let k = cfg.context;
    let contexts: Vec<Context> = if k == 0 {
        Vec::new()
    } else {
        buffer
            .draw_context_starts(cfg.imag_batch, k, rng)?
            .into_iter()
            .map(|d| {
                let seg = buffer.segment(d.episode, d.start, k)?;
                Ok(Context {
                    latents: seg.latents,
                    actions: seg.actions,
                })
            })
            .collect::<Result<_>>()?
    };
    let imag = ImaginationConfig {
        schedule: cfg.schedule,
        mode: cfg.mode,
        batch_size: cfg.imag_batch,
        seed: rng.random(),
    };
    let rollout = horizon_imagine(&agent.denoiser, &agent.policy, Some(&agent.reward), &imag, &contexts)?;
    let targets = controller_targets(&rollout, &agent.critic, &mut agent.scaler, &cfg.ac)?;

    let (stats, mut g) = actor_loss(&agent.policy, &targets.actor, cfg.ac.entropy_weight)?;
    actor_opt.step(agent.policy.net.params_mut(), &mut g)?;
    let (closs, mut g) = critic_loss(&agent.critic, &targets.critic)?;
    critic_opt.step(agent.critic.net.params_mut(), &mut g)?;
    Ok(MetricsRow {
        epoch,
        step: 0,
        actor_loss: stats.loss,
        critic_loss: closs,
        entropy: stats.entropy,
        mean_return: targets.mean_return,
        ema_s: targets.ema_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AgentConfig {
        AgentConfig {
            schedule: ScheduleSpec::horizon(6, 3, 2.0),
            epochs: 3,
            collect_steps: 30,
            wm_steps: 3,
            ac_steps: 2,
            wm_warmup: 1,
            ac_warmup: 1,
            wm_batch: 2,
            segment_len: 7,
            imag_batch: 3,
            wm_hidden: 16,
            ac_hidden: 8,
            seed: 11,
            ..AgentConfig::default()
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let a = run_training(&tiny(), None).unwrap();
        let b = run_training(&tiny(), None).unwrap();
        assert_eq!(
            a.agent.to_checkpoint(2).unwrap().to_bytes(),
            b.agent.to_checkpoint(2).unwrap().to_bytes()
        );
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.metrics.len(), 4);
        assert_eq!(a.evals.len(), 3);
    }

    #[test]
    fn no_controller_steps_leave_policy_untouched() {
        let cfg = AgentConfig {
            ac_steps: 0,
            ..tiny()
        };
        let start = Agent::new(&cfg, &Streams::new(cfg.seed));
        let r = run_training(&cfg, None).unwrap();
        assert_eq!(r.agent.policy, start.policy);
        assert_eq!(r.agent.critic, start.critic);
        assert_ne!(r.agent.denoiser, start.denoiser);
    }

    #[test]
    fn keeps_last_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AgentConfig { epochs: 5, ..tiny() };
        let r = run_training(&cfg, Some(dir.path())).unwrap();
        let mut names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["ckpt-0002.hilm", "ckpt-0003.hilm", "ckpt-0004.hilm"]);
        let back = Agent::from_checkpoint(&Checkpoint::load(&r.checkpoints[2]).unwrap()).unwrap();
        assert_eq!(back.policy, r.agent.policy);
        assert_eq!(back.denoiser, r.agent.denoiser);
    }

    #[test]
    fn buffer_holds_every_collected_step() {
        let r = run_training(&tiny(), None).unwrap();
        assert_eq!(r.buffer.transitions(), 90);
    }

    #[test]
    fn rejects_inverted_warmups() {
        let cfg = AgentConfig {
            wm_warmup: 3,
            ac_warmup: 1,
            ..tiny()
        };
        assert!(run_training(&cfg, None).is_err());
    }
}
