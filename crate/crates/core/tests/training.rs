use std::fs;

use abseg::config::RunConfig;
use abseg::network::{Checkpoint, NetworkSpec};
use abseg::preprocess::{preprocess_case, stack_modalities};
use abseg::synth::{make_phantom, PhantomSpec};
use abseg::trainer::{
    checkpoint_path, draw_batch, evaluate_step, read_loss_curve, sgd_step, train, OptimizerState, SgdParams,
    TrainingCase, TrainingConfig, FINAL_CHECKPOINT, LOSS_CURVE_FILE,
};

fn cases(n: usize, size: usize, seed: u64) -> Vec<TrainingCase> {
    (0..n)
        .map(|i| {
            let spec = PhantomSpec::standard([size; 3], seed + i as u64);
            let ph = make_phantom(&spec, &format!("c{i}")).unwrap();
            let vol = preprocess_case(&ph.volume, &Default::default()).unwrap();
            TrainingCase {
                case_id: format!("c{i}"),
                input: stack_modalities(&vol).unwrap(),
                labels: ph.labels,
            }
        })
        .collect()
}

fn small_config() -> (TrainingConfig, NetworkSpec) {
    let cfg = RunConfig::tiny().expand().unwrap();
    let mut t = cfg.training;
    t.patch_size = [16; 3];
    t.batch_size = 2;
    t.epochs = 2;
    t.steps_per_epoch = 3;
    t.checkpoint_interval = 2;
    (t, cfg.network)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = cases(2, 20, 0);
    let (cfg, spec) = small_config();
    let full_dir = tempfile::tempdir().unwrap();
    let full = train(&cfg, &spec, &data, None, Some(full_dir.path()), None, 1).unwrap();
    assert_eq!(full.curve.len(), 6);

    let ck = Checkpoint::load(&checkpoint_path(full_dir.path(), 4)).unwrap();
    assert_eq!(ck.step, 4);
    // continue inside a copy of the first run's directory
    let resumed_dir = tempfile::tempdir().unwrap();
    fs::copy(full_dir.path().join(LOSS_CURVE_FILE), resumed_dir.path().join(LOSS_CURVE_FILE)).unwrap();
    let resumed = train(&cfg, &spec, &data, None, Some(resumed_dir.path()), Some(&ck), 1).unwrap();
    assert_eq!(resumed.curve, full.curve[4..]);
    assert_eq!(resumed.network, full.network);
    assert_eq!(
        fs::read(resumed_dir.path().join(LOSS_CURVE_FILE)).unwrap(),
        fs::read(full_dir.path().join(LOSS_CURVE_FILE)).unwrap()
    );
    assert_eq!(
        fs::read(resumed_dir.path().join(FINAL_CHECKPOINT)).unwrap(),
        fs::read(full_dir.path().join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn worker_count_does_not_change_results() {
    let data = cases(3, 16, 5);
    let (cfg, spec) = small_config();
    let one = train(&cfg, &spec, &data, None, None, None, 1).unwrap();
    let three = train(&cfg, &spec, &data, None, None, None, 3).unwrap();
    assert_eq!(one.curve, three.curve);
    assert_eq!(one.network, three.network);
}

#[test]
fn checkpoints_land_on_the_interval() {
    let data = cases(1, 16, 1);
    let (cfg, spec) = small_config();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &spec, &data, None, Some(dir.path()), None, 1).unwrap();
    for step in [0, 2, 4, 6] {
        assert!(checkpoint_path(dir.path(), step).exists(), "step {step}");
    }
    assert!(!checkpoint_path(dir.path(), 3).exists());
    assert!(out.checkpoints.iter().all(|p| p.exists()));
    let curve = read_loss_curve(&dir.path().join(LOSS_CURVE_FILE)).unwrap();
    assert_eq!(curve, out.curve);
    assert!(curve.windows(2).all(|w| w[1].lr <= w[0].lr));
}

#[test]
fn zero_steps_keeps_the_initial_network() {
    let data = cases(1, 16, 2);
    let (mut cfg, spec) = small_config();
    cfg.steps_per_epoch = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &spec, &data, None, Some(dir.path()), None, 1).unwrap();
    assert!(out.curve.is_empty());
    let initial = Checkpoint::load(&checkpoint_path(dir.path(), 0)).unwrap();
    assert_eq!(initial.network(), out.network);
}

#[test]
fn small_step_along_the_gradient_lowers_the_loss() {
    let data = cases(2, 16, 3);
    let (cfg, spec) = small_config();
    let net = abseg::network::Network::new(spec.clone(), 11).unwrap();
    let batch = draw_batch(&cfg, &data, 0, false, 1).unwrap();
    let before = evaluate_step(&net.params, &spec, &cfg.loss, &batch, None).unwrap();
    let mut params = net.params.clone();
    let mut state = OptimizerState::new(&params);
    let opt = SgdParams {
        lr: 1e-3,
        momentum: 0.0,
        weight_decay: 0.0,
        nesterov: false,
        decay_all_parameters: false,
    };
    sgd_step(&mut params, &before.grads, &mut state, opt).unwrap();
    let after = evaluate_step(&params, &spec, &cfg.loss, &batch, None).unwrap();
    assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
}

#[test]
fn pseudo_term_is_added_to_every_step() {
    let data = cases(2, 16, 4);
    let pseudo = cases(1, 16, 40);
    let (mut cfg, spec) = small_config();
    cfg.pseudo_enabled = true;
    assert!(train(&cfg, &spec, &data, None, None, None, 1).is_err());
    let out = train(&cfg, &spec, &data, Some(&pseudo), None, None, 1).unwrap();
    for r in &out.curve {
        let p = r.components.pseudo.expect("pseudo term recorded");
        assert!((r.loss - (r.components.supervised + p)).abs() < 1e-12);
        assert_eq!(r.components.supervised_levels.len(), spec.deep_supervision_levels);
    }
}

#[test]
fn mismatched_class_count_is_a_config_error() {
    let data = cases(1, 16, 6);
    let (cfg, mut spec) = small_config();
    spec.num_classes = 3;
    let err = train(&cfg, &spec, &data, None, None, None, 1).unwrap_err().to_string();
    assert!(err.contains("classes"), "{err}");
}
