use std::path::Path;

use grpo_d_lab::grpo::beta_at;
use grpo_d_lab::tasks::{DatasetSpec, Family};
use grpo_d_lab::trainer::{
    default_schedule, read_metrics, train, DatasetSource, DatasetsCfg, Method, TrainConfig,
    TrainOptions, WarmStart,
};
use grpo_d_lab::LabError;

fn tiny(method: Method, family: Family, dir: &Path, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::preset(method, family, 9);
    cfg.total_steps = steps;
    cfg.schedule = default_schedule(method, family, steps);
    cfg.prompts_per_step = 4;
    cfg.group_size = 4;
    cfg.eval_every = steps;
    cfg.checkpoint_every = steps;
    cfg.warm_start = WarmStart::None;
    cfg.datasets = DatasetsCfg {
        train: DatasetSource::Generate(DatasetSpec::new(family, 40, 77)),
        eval: vec![DatasetSource::Generate(DatasetSpec::new(family, 10, 78))],
    };
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn quiet() -> TrainOptions {
    TrainOptions {
        threads: Some(2),
        quiet: true,
        ..TrainOptions::default()
    }
}

#[test]
fn logged_beta_follows_the_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::GrpoD, Family::Counting, tmp.path(), 12);
    let outcome = train(&cfg, &quiet()).unwrap();
    let on_disk = read_metrics(&tmp.path().join("metrics.jsonl")).unwrap();
    assert_eq!(on_disk, outcome.metrics);
    for (i, m) in on_disk.iter().enumerate() {
        assert_eq!(m.step, i as u64);
        assert_eq!(m.beta, beta_at(m.step, &cfg.schedule).unwrap());
        assert!(m.is_finite());
        assert!((m.reward_total_mean - m.reward_acc_mean - m.reward_format_mean).abs() < 1e-12);
        assert_eq!(m.wall_clock_ms, 0);
    }
}

#[test]
fn sft_runs_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::Sft, Family::Arith, tmp.path(), 6);
    cfg.eval_families = vec![Family::Arith, Family::Counting];
    cfg.datasets
        .eval
        .push(DatasetSource::Generate(DatasetSpec::new(
            Family::Counting,
            10,
            79,
        )));
    let outcome = train(&cfg, &quiet()).unwrap();
    assert_eq!(outcome.metrics.len(), 6);
    assert!(tmp.path().join("eval_arith_0.json").exists());
    assert!(tmp.path().join("eval_counting_6.json").exists());
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::GrpoD, Family::Counting, tmp.path(), 10);
    let opts = TrainOptions {
        inject_non_finite_at: Some(4),
        ..quiet()
    };
    match train(&cfg, &opts) {
        Err(LabError::NonFinite { .. }) => {}
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    assert!(tmp.path().join("ckpt_last_good").exists());
    assert!(!tmp.path().join("ckpt_final").exists());
}

#[test]
fn config_json_round_trips_and_rejects_unknown_fields() {
    for method in Method::ALL {
        for family in Family::ALL {
            let cfg = TrainConfig::preset(method, family, 4);
            assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }
    let mut v: serde_json::Value =
        serde_json::from_str(&TrainConfig::preset(Method::GrpoD, Family::Counting, 1).to_json())
            .unwrap();
    v["surprise"] = serde_json::json!(1);
    let err = TrainConfig::from_json(&v.to_string()).unwrap_err();
    assert!(err.is_config_error());
}

#[test]
fn resuming_from_a_checkpoint_of_another_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::GrpoD, Family::Counting, &tmp.path().join("a"), 4);
    cfg.checkpoint_every = 2;
    train(&cfg, &quiet()).unwrap();
    let mut other = cfg.clone();
    other.arch.d_model = 16;
    other.arch.d_ff = 32;
    other.output_dir = tmp.path().join("b");
    let opts = TrainOptions {
        resume_from: Some(tmp.path().join("a/ckpt_2")),
        ..quiet()
    };
    assert!(train(&other, &opts).is_err());
}
