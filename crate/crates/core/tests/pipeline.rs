use hilab_core::agent::{run_training, Agent, AgentConfig};
use hilab_core::checkpoint::Checkpoint;
use hilab_core::config::{parse_config, to_text};
use hilab_core::experiments::{gen_quality, pairs_study, GenQualityParams, PairsParams};
use hilab_core::imagination::{count_action_changes, horizon_imagine, Context, ImaginationConfig, SamplingMode};
use hilab_core::replay::ReplayBuffer;
use hilab_core::schedule::ScheduleSpec;

fn tiny(seed: u64) -> AgentConfig {
    AgentConfig {
        schedule: ScheduleSpec::horizon(8, 4, 2.0),
        epochs: 3,
        collect_steps: 60,
        wm_steps: 5,
        ac_steps: 2,
        wm_warmup: 0,
        ac_warmup: 1,
        segment_len: 9,
        imag_batch: 4,
        wm_hidden: 16,
        ac_hidden: 8,
        seed,
        ..AgentConfig::default()
    }
}

#[test]
fn coupled_change_rate_tracks_total_variation() {
    let params = PairsParams {
        pairs: 60,
        draws: 4000,
        seed: 5,
        ..PairsParams::default()
    };
    let rows = pairs_study(&params).unwrap();
    for n in [4, 10, 18] {
        let live: Vec<_> = rows.iter().filter(|r| r.n == n && r.tv > 0.0).collect();
        assert_eq!(live.len(), 59);
        let mean = live.iter().map(|r| r.rate_over_tv).sum::<f64>() / live.len() as f64;
        assert!(mean < 1.5, "n={n}: mean rate/tv {mean}");
        for r in live {
            let slack = 4.0 * (r.empirical_rate.max(1e-3) / 4000.0).sqrt();
            assert!(r.empirical_rate >= r.tv - slack && r.empirical_rate <= r.upper + slack, "{r:?}");
        }
    }
}

#[test]
fn trained_agent_survives_files_and_keeps_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(4);
    let report = run_training(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.checkpoints.len(), 3);

    let ck = Checkpoint::load(report.checkpoints.last().unwrap()).unwrap();
    let restored = Agent::from_checkpoint(&ck).unwrap();
    let replay_path = dir.path().join("replay.csv");
    report.buffer.save(&replay_path).unwrap();
    let buffer = ReplayBuffer::load(&replay_path).unwrap();
    assert_eq!(buffer.to_csv(), report.buffer.to_csv());

    let imag = ImaginationConfig {
        schedule: cfg.schedule,
        mode: SamplingMode::Stable,
        batch_size: 3,
        seed: 8,
    };
    let ctx = vec![Context::empty(); 3];
    let a = horizon_imagine(&report.agent.denoiser, &report.agent.policy, Some(&report.agent.reward), &imag, &ctx).unwrap();
    let b = horizon_imagine(&restored.denoiser, &restored.policy, Some(&restored.reward), &imag, &ctx).unwrap();
    assert_eq!(a.latents.latents, b.latents.latents);
    assert_eq!(count_action_changes(&a), count_action_changes(&b));

    let params = GenQualityParams {
        nus: vec![1.0, 2.0],
        budgets: vec![8, 4],
        horizon: 8,
        segments: 6,
        seed: 1,
        threads: 2,
    };
    let rows = gen_quality(&restored, &buffer, &params).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.mse.is_finite() && r.mse >= 0.0));
}

#[test]
fn canonical_config_text_round_trips() {
    let cfg = AgentConfig {
        mode: SamplingMode::Naive,
        ..tiny(9)
    };
    let text = to_text(&cfg);
    let back = parse_config(&text).unwrap();
    assert_eq!(to_text(&back), text);
    assert_eq!(back.mode, SamplingMode::Naive);
    assert_eq!(back.schedule, cfg.schedule);
}
