use safenav::curriculum::{default_plan, run_training, Checkpoint, CurriculumError, Regime, TrainOptions};
use safenav::ppo::PpoConfig;
use safenav::sim::SimParams;

fn small_ppo() -> PpoConfig {
    PpoConfig {
        horizon: 2000,
        minibatch_size: 500,
        epochs: 2,
        ..PpoConfig::default()
    }
}

const TOTAL: u64 = 24_000;

#[test]
fn tol_freezes_leading_layers_bit_for_bit() {
    let plan = default_plan(Regime::Tol, TOTAL).with_seed(3);
    let out = run_training(&plan, &small_ppo(), &SimParams::default(), &TrainOptions::default(), None).unwrap();
    let [s1, s2, s3] = &out.stage_ends[..] else { panic!("three stages") };
    assert_eq!(s3.step, TOTAL);
    for (a, b, c) in [(&s1.policy, &s2.policy, &s3.policy), (&s1.value, &s2.value, &s3.value)] {
        let (l1, l2, l3) = (a.layers(), b.layers(), c.layers());
        assert_eq!((&l1[0].weights, &l1[0].biases), (&l2[0].weights, &l2[0].biases));
        assert_eq!((&l2[0].weights, &l2[0].biases), (&l3[0].weights, &l3[0].biases));
        assert_eq!(l2[1].weights, l3[1].weights);
        assert_eq!(l2[1].biases, l3[1].biases);
        assert_ne!(l1[1].weights, l2[1].weights);
        assert_ne!(l2[2].weights, l3[2].weights);
        assert_ne!(l2[3].weights, l3[3].weights);
        assert_eq!(c.frozen_mask(), vec![true, true, false, false]);
    }
}

#[test]
fn finetune_keeps_everything_trainable() {
    let plan = default_plan(Regime::Finetune, TOTAL).with_seed(3);
    let out = run_training(&plan, &small_ppo(), &SimParams::default(), &TrainOptions::default(), None).unwrap();
    let (s2, s3) = (&out.stage_ends[1], &out.stage_ends[2]);
    for i in 0..4 {
        assert_ne!(s2.policy.layers()[i].weights, s3.policy.layers()[i].weights, "layer {i}");
    }
    assert!(s3.policy.frozen_mask().iter().all(|f| !f));
}

#[test]
fn regimes_spend_identical_compute() {
    let ppo = small_ppo();
    let counts: Vec<(u64, u64)> = Regime::ALL
        .iter()
        .map(|&r| {
            let out = run_training(&default_plan(r, TOTAL), &ppo, &SimParams::default(), &TrainOptions::default(), None).unwrap();
            (out.checkpoint.step, out.checkpoint.updates)
        })
        .collect();
    assert!(counts.iter().all(|&c| c == (TOTAL, 12)), "{counts:?}");
}

#[test]
fn resume_from_stage_checkpoint_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_owned()),
        ..TrainOptions::default()
    };
    let plan = default_plan(Regime::Tol, TOTAL).with_seed(11);
    let ppo = small_ppo();
    let full = run_training(&plan, &ppo, &SimParams::default(), &opts, None).unwrap();
    for f in ["curve.csv", "updates.csv", "checkpoint_final.json", "checkpoint_stage1.json", "policy.weights"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let ckpt = Checkpoint::load(dir.path().join("checkpoint_stage1.json")).unwrap();
    let resumed = run_training(&plan, &ppo, &SimParams::default(), &TrainOptions::default(), Some(ckpt)).unwrap();
    assert_eq!(resumed.checkpoint, full.checkpoint);
}

#[test]
fn curve_rows_every_ten_thousand_steps() {
    let plan = default_plan(Regime::E2e, TOTAL);
    let out = run_training(&plan, &small_ppo(), &SimParams::default(), &TrainOptions::default(), None).unwrap();
    let steps: Vec<u64> = out.curve().iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![10_000, 20_000]);
    assert!(out.curve().iter().all(|r| (0.0..=1.0).contains(&r.rolling_success)));
}

#[test]
fn missing_environment_aborts_before_training() {
    let mut plan = default_plan(Regime::Tol, TOTAL);
    plan.stages[1].env = "nowhere".into();
    let err = run_training(&plan, &small_ppo(), &SimParams::default(), &TrainOptions::default(), None).unwrap_err();
    assert!(matches!(err, CurriculumError::MissingEnvironment { ref name, .. } if name == "nowhere"));
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let plan = default_plan(Regime::E2e, 4000);
    let ppo = small_ppo();
    let out = run_training(&plan, &ppo, &SimParams::default(), &TrainOptions::default(), None).unwrap();
    let other = default_plan(Regime::E2e, 6000);
    let err = run_training(&other, &ppo, &SimParams::default(), &TrainOptions::default(), Some(out.checkpoint)).unwrap_err();
    assert!(matches!(err, CurriculumError::CheckpointMismatch(_)));
}
