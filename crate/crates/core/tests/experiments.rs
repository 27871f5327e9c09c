use rolldrop::analysis::{line_plot, tv_distance, Channel, Histogram, PlotStyle, Series, Source, Table};
use rolldrop::config::{parse_config, ExperimentConfig, Preset};
use rolldrop::env::{EnvConfig, RewardTerms, ACT_DIM, OBS_DIM};
use rolldrop::harness::{
    choose_dropout, run_mismatch, run_noise_sweep, MismatchSpec, NoiseSweepSpec, TuneSpec, SWEEP_CSV_HEADER,
};
use rolldrop::nn::{Activation, DropoutSpec, PolicyNet};
use rolldrop::ppo::{LossComponents, TrainRecord};
use rolldrop::rng::{RngStream, StreamId};

fn small_policy() -> PolicyNet {
    let mut rng = RngStream::new(12, 0, StreamId::Init);
    PolicyNet::init(
        &[OBS_DIM, 16, 16, ACT_DIM],
        Activation::Tanh,
        1.0,
        DropoutSpec {
            position: 2,
            rolldrop_p: 0.0,
            train_p: 0.0,
        },
        &mut rng,
    )
    .unwrap()
}

#[test]
fn presets_differ_only_where_documented() {
    let desk = ExperimentConfig::desk();
    let paper = ExperimentConfig::paper();
    assert_eq!(desk.preset, Preset::Desk);
    assert_eq!(desk.ppo.batch_size(), 25_600);
    assert_eq!(desk.policy.hidden, vec![128, 64, 64]);
    assert_eq!(paper.policy.hidden, vec![512, 256, 256]);
    assert_eq!(desk.env, paper.env);
    desk.validate().unwrap();
    paper.validate().unwrap();
}

#[test]
fn partial_configs_merge_over_the_preset() {
    let cfg = parse_config(r#"{ "ppo": { "rolldrop_p": 0.001 } }"#).unwrap();
    assert_eq!(cfg.ppo.rolldrop_p, 0.001);
    assert_eq!(cfg.ppo.clip_range, 0.2);
    let paper = parse_config(r#"{ "preset": "paper" }"#).unwrap();
    assert_eq!(paper, ExperimentConfig::paper());
    let round = parse_config(&ExperimentConfig::desk().to_json()).unwrap();
    assert_eq!(round, ExperimentConfig::desk());
}

#[test]
fn bad_configs_are_rejected_with_a_path() {
    for (text, path) in [
        (r#"{ "ppo": { "clip_rnage": 0.2 } }"#, "ppo"),
        (r#"{ "ppo": { "rolldrop_p": 1.0 } }"#, "rolldrop_p"),
        (r#"{ "env": { "kp": "stiff" } }"#, "env.kp"),
        (r#"{ "erfi": { "enabled": true } }"#, "erfi"),
        (r#"[1, 2]"#, "root"),
    ] {
        let e = parse_config(text).unwrap_err().to_string();
        assert!(e.contains(path), "{text}: {e}");
    }
}

fn tiny_sweep() -> NoiseSweepSpec {
    NoiseSweepSpec {
        levels: vec![0.0, 0.3],
        runs_per_level: 3,
        max_steps: Some(30),
        seed: 2,
        ..NoiseSweepSpec::default()
    }
}

#[test]
fn noise_sweep_is_deterministic_and_tabulated() {
    let p = small_policy();
    let env = EnvConfig::default();
    let a = run_noise_sweep(&p, &env, &tiny_sweep()).unwrap();
    let b = run_noise_sweep(&p, &env, &tiny_sweep()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.levels.len(), 2);
    for l in &a.levels {
        assert_eq!(l.runs.len(), 3);
        assert_eq!(l.successes + l.failures_fall + l.failures_distance, 3);
        assert!((l.success_rate - l.successes as f64 / 3.0).abs() < 1e-15);
    }
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), SWEEP_CSV_HEADER);
    let mut bad = tiny_sweep();
    bad.levels.push(0.6);
    assert!(run_noise_sweep(&p, &env, &bad).is_err());
}

#[test]
fn mismatch_rows_cover_both_gains() {
    let p = small_policy();
    let spec = MismatchSpec {
        episodes: 2,
        max_steps: Some(25),
        ..MismatchSpec::default()
    };
    let rows = run_mismatch(&spec, &EnvConfig::default(), &[("a", &p), ("b", &p)]).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].kp, 20.0);
    assert_eq!(rows[3].kp, 15.0);
    // identical policies give identical rows at each gain
    assert_eq!(rows[2].falls, rows[3].falls);
    assert_eq!(rows[2].mean_abs_qd, rows[3].mean_abs_qd);
}

fn record(reward: f64, sigma: f64) -> TrainRecord {
    TrainRecord {
        iteration: 0,
        mean_reward: reward,
        terms: RewardTerms::default(),
        mean_sigma: sigma,
        drop_events: 0,
        episodes_finished: 0,
        mean_episode_return: 0.0,
        mean_vx_error: 0.0,
        loss: LossComponents::default(),
        grad_norm: 0.0,
        aborted: false,
        wall_time: 0.0,
    }
}

#[test]
fn tuning_rejects_diverging_sigma_and_low_reward() {
    let spec = TuneSpec::default();
    let base = vec![record(10.0, 0.2); 20];
    let runs = vec![
        (0.01, vec![record(10.0, 0.9); 20]),
        (0.001, vec![record(7.0, 0.21); 20]),
        (0.0001, vec![record(9.5, 0.22); 20]),
    ];
    let report = choose_dropout(&base, &runs, &spec).unwrap();
    assert_eq!(report.chosen, Some(0.0001));
    let none = choose_dropout(&base, &runs[..2], &spec).unwrap();
    assert_eq!(none.chosen, None);
    assert!(choose_dropout(&vec![record(-1.0, 0.2); 20], &runs, &spec).is_err());
}

#[test]
fn histograms_and_total_variation() {
    let mut a = Histogram::new(0.0, 1.0, 4);
    let mut b = Histogram::new(0.0, 1.0, 4);
    for x in [0.1, 0.1, 0.6, 5.0] {
        a.add(x);
    }
    for x in [0.9, 0.9, 0.9, -3.0] {
        b.add(x);
    }
    assert_eq!(a.total(), 4);
    assert_eq!(a.masses(), vec![0.5, 0.0, 0.25, 0.25]);
    assert_eq!(b.masses(), vec![0.25, 0.0, 0.0, 0.75]);
    assert!((tv_distance(&a, &b).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
    assert!(tv_distance(&a, &Histogram::new(0.0, 1.0, 5)).is_err());
}

#[test]
fn channel_specs_parse() {
    let c = Channel::parse("joint_vel:2", 1.5).unwrap();
    assert_eq!(c.source, Source::JointVel);
    assert_eq!(c.index, 2);
    let custom = Channel::parse("action:0:-1:1", 1.5).unwrap();
    assert_eq!((custom.lo, custom.hi), (-1.0, 1.0));
    assert_eq!(Channel::parse_list("obs:3,joint_pos:1", 1.5).unwrap().len(), 2);
    for bad in ["joint_pos:9", "torque:0", "action", "action:0:1:-1"] {
        assert!(Channel::parse(bad, 1.5).is_err(), "{bad}");
    }
}

#[test]
fn tables_report_ragged_rows() {
    let t = Table::parse("a,b\n1,2\n3,4\n").unwrap();
    assert_eq!(t.named("b").unwrap(), vec![2.0, 4.0]);
    let e = Table::parse("a,b\n1,2\n3\n").unwrap_err().to_string();
    assert!(e.contains('3'), "{e}");
    let t = Table::parse("a\n1\nx\n").unwrap();
    assert!(t.named("a").unwrap_err().to_string().contains('3'));
}

#[test]
fn plots_are_standalone_svg() {
    let svg = line_plot(
        "reward",
        "iteration",
        "reward",
        &[Series::new("baseline", vec![0.0, 1.0, 2.0], vec![0.5, 1.5, f64::NAN])],
        PlotStyle::Line,
    );
    assert!(svg.starts_with("<?xml") && svg.contains("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("baseline"));
    assert!(!svg.contains("NaN"));
}
