//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Keys live under `env.`,
//! `schedule.`, `train.` or are `sampling.mode`; unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::agent::AgentConfig;
use crate::error::{Error, Result};

fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        line,
        message: format!("{key}: cannot parse {value:?}: {e}"),
    })
}

fn set(cfg: &mut AgentConfig, line: usize, key: &str, value: &str) -> Result<()> {
    match key {
        "env.ring_size" => cfg.env.ring_size = parse(line, key, value)?,
        "env.goal" => cfg.env.goal = parse(line, key, value)?,
        "env.slip_prob" => cfg.env.slip_prob = parse(line, key, value)?,
        "env.obs_noise" => cfg.env.obs_noise = parse(line, key, value)?,
        "env.max_steps" => cfg.env.max_steps = parse(line, key, value)?,
        "schedule.kind" => cfg.schedule.kind = parse(line, key, value)?,
        "schedule.horizon" => cfg.schedule.horizon = parse(line, key, value)?,
        "schedule.budget" => cfg.schedule.budget = parse(line, key, value)?,
        "schedule.decay_horizon" => cfg.schedule.decay_horizon = parse(line, key, value)?,
        "sampling.mode" => cfg.mode = parse(line, key, value)?,
        "train.epochs" => cfg.epochs = parse(line, key, value)?,
        "train.collect_steps" => cfg.collect_steps = parse(line, key, value)?,
        "train.wm_steps" => cfg.wm_steps = parse(line, key, value)?,
        "train.ac_steps" => cfg.ac_steps = parse(line, key, value)?,
        "train.wm_warmup" => cfg.wm_warmup = parse(line, key, value)?,
        "train.ac_warmup" => cfg.ac_warmup = parse(line, key, value)?,
        "train.wm_batch" => cfg.wm_batch = parse(line, key, value)?,
        "train.segment_len" => cfg.segment_len = parse(line, key, value)?,
        "train.imag_batch" => cfg.imag_batch = parse(line, key, value)?,
        "train.context" => cfg.context = parse(line, key, value)?,
        "train.window" => cfg.window = parse(line, key, value)?,
        "train.wm_hidden" => cfg.wm_hidden = parse(line, key, value)?,
        "train.ac_hidden" => cfg.ac_hidden = parse(line, key, value)?,
        "train.wm_lr" => cfg.wm_opt.lr = parse(line, key, value)?,
        "train.ac_lr" => cfg.ac_opt.lr = parse(line, key, value)?,
        "train.gamma" => cfg.ac.gamma = parse(line, key, value)?,
        "train.lambda" => cfg.ac.lambda = parse(line, key, value)?,
        "train.entropy_weight" => cfg.ac.entropy_weight = parse(line, key, value)?,
        "train.eval_episodes" => cfg.eval_episodes = parse(line, key, value)?,
        "train.keep_checkpoints" => cfg.keep_checkpoints = parse(line, key, value)?,
        "train.seed" => cfg.seed = parse(line, key, value)?,
        _ => {
            return Err(Error::Config {
                line,
                message: format!("unknown key {key:?}"),
            })
        }
    }
    Ok(())
}

/// Applies the assignments in `text` on top of the defaults.
pub fn parse_config(text: &str) -> Result<AgentConfig> {
    let mut cfg = AgentConfig::default();
    apply(&mut cfg, text)?;
    Ok(cfg)
}

pub fn apply(cfg: &mut AgentConfig, text: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            message: format!("expected `key = value`, got {line:?}"),
        })?;
        set(cfg, i + 1, key.trim(), value.trim())?;
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<AgentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Canonical text form; parsing it gives back the same configuration.
pub fn to_text(cfg: &AgentConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("env.ring_size", cfg.env.ring_size.to_string());
    kv("env.goal", cfg.env.goal.to_string());
    kv("env.slip_prob", format!("{:?}", cfg.env.slip_prob));
    kv("env.obs_noise", format!("{:?}", cfg.env.obs_noise));
    kv("env.max_steps", cfg.env.max_steps.to_string());
    kv("schedule.kind", cfg.schedule.kind.as_str().to_string());
    kv("schedule.horizon", cfg.schedule.horizon.to_string());
    kv("schedule.budget", cfg.schedule.budget.to_string());
    kv("schedule.decay_horizon", format!("{:?}", cfg.schedule.decay_horizon));
    kv("sampling.mode", cfg.mode.as_str().to_string());
    kv("train.epochs", cfg.epochs.to_string());
    kv("train.collect_steps", cfg.collect_steps.to_string());
    kv("train.wm_steps", cfg.wm_steps.to_string());
    kv("train.ac_steps", cfg.ac_steps.to_string());
    kv("train.wm_warmup", cfg.wm_warmup.to_string());
    kv("train.ac_warmup", cfg.ac_warmup.to_string());
    kv("train.wm_batch", cfg.wm_batch.to_string());
    kv("train.segment_len", cfg.segment_len.to_string());
    kv("train.imag_batch", cfg.imag_batch.to_string());
    kv("train.context", cfg.context.to_string());
    kv("train.window", cfg.window.to_string());
    kv("train.wm_hidden", cfg.wm_hidden.to_string());
    kv("train.ac_hidden", cfg.ac_hidden.to_string());
    kv("train.wm_lr", format!("{:?}", cfg.wm_opt.lr));
    kv("train.ac_lr", format!("{:?}", cfg.ac_opt.lr));
    kv("train.gamma", format!("{:?}", cfg.ac.gamma));
    kv("train.lambda", format!("{:?}", cfg.ac.lambda));
    kv("train.entropy_weight", format!("{:?}", cfg.ac.entropy_weight));
    kv("train.eval_episodes", cfg.eval_episodes.to_string());
    kv("train.keep_checkpoints", cfg.keep_checkpoints.to_string());
    kv("train.seed", cfg.seed.to_string());
    s
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagination::SamplingMode;
    use crate::schedule::ScheduleKind;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = parse_config(
            "# toy run\n\
             env.ring_size = 20\n\
             env.goal=5   # close\n\
             schedule.kind = pyramidal\n\
             schedule.budget = 40\n\
             sampling.mode = naive\n\
             \n\
             train.epochs = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.env.ring_size, 20);
        assert_eq!(cfg.env.goal, 5);
        assert_eq!(cfg.schedule.kind, ScheduleKind::Pyramidal);
        assert_eq!(cfg.schedule.budget, 40);
        assert_eq!(cfg.mode, SamplingMode::Naive);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.collect_steps, AgentConfig::default().collect_steps);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_config("env.goal = 3\nbogus.key = 1\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_config("\n\nenv.goal = three\n") {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("env.goal"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_config("no equals sign").is_err());
        assert!(parse_config("sampling.mode = coupled").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = AgentConfig::default();
        cfg.env.slip_prob = 0.1;
        cfg.schedule.decay_horizon = 2.5;
        cfg.seed = 99;
        let text = to_text(&cfg);
        assert_eq!(parse_config(&text).unwrap(), cfg);
        assert_eq!(config_hash(&text), config_hash(&to_text(&cfg)));
        assert_ne!(config_hash(&text), config_hash(&to_text(&AgentConfig::default())));
        assert_eq!(config_hash("").len(), 16);
    }
}
