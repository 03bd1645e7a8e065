//! Acceptance criteria. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero on failure.
//!
//! Pass criterion numbers as arguments to run a subset.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use abseg::config::{RunConfig, TaskPreset};
use abseg::grid::{AxisSet, Grid3, Spacing};
use abseg::inference::{
    argmax_labels, ensemble, predict_volume, sliding_window, tta_predict, InferenceOptions, ProbabilityMap, TTAPlan,
    WindowWeighting,
};
use abseg::losses::{
    cross_entropy, deep_supervised, default_ds_weights, hybrid_loss, one_hot, soft_dice, tversky_loss,
    DiceAggregation, LossConfig, LossKind, OneHotTarget,
};
use abseg::metrics::{dice_score, surface_dice};
use abseg::network::{forward, shape_plan, softmax_head, Checkpoint, Mode, Network, NetworkSpec};
use abseg::preprocess::{stack_modalities, AugmentationPolicy};
use abseg::rng::{seeded, Rng};
use abseg::synth::{make_dataset_split, make_phantom, PhantomSpec};
use abseg::trainer::{
    checkpoint_path, draw_batch, load_training_cases, poly_lr, read_loss_curve, train, TrainingCase,
};
use abseg::volume_io::{DatasetManifest, LabelMap};
use abseg::Tensor;
use common::*;
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < budget, format!("took {:.1} s, budget {} s", t.as_secs_f64(), budget.as_secs()))
}

fn c1_shape_contract() -> Outcome {
    let t = Instant::now();
    let plan = shape_plan(&NetworkSpec::default(), [3, 128, 160, 112]).map_err(|e| e.to_string())?;
    let b = plan.bottleneck();
    ensure(b == [320, 8, 10, 7], format!("bottleneck {b:?}"))?;
    within_budget(t, Duration::from_secs(1))?;
    Ok(format!("bottleneck {b:?}"))
}

fn c2_gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let spec = micro_spec(3);
    let params = abseg::network::build(&spec, 5).map_err(|e| e.to_string())?;
    let n = params.count();
    ensure(n <= 5000, format!("{n} parameters"))?;
    let mut rng = seeded(17, 0);
    let patch = [3, 2, 2];
    ensure(patch.iter().product::<usize>() == 12, "patch is not 12 voxels")?;
    let input = random_input(&mut rng, &[2, 3, patch[0], patch[1], patch[2]]);
    let labels: Vec<Grid3<u8>> = (0..2).map(|_| random_labels(&mut rng, patch, 3)).collect();
    let cfg = LossConfig {
        ds_weights: spec.ds_weights.clone(),
        ..LossConfig::default()
    };
    let mut report = Vec::new();
    for kind in [LossKind::Dcce, LossKind::Tversky, LossKind::Hybrid] {
        let (_, grads) = network_loss(&params, &spec, &input, &labels, kind, &cfg);
        let (err, at) = fd_max_rel_error(&params, &grads, 1e-5, 1e-6, |p| {
            network_loss(p, &spec, &input, &labels, kind, &cfg).0
        });
        ensure(err < 1e-4, format!("{kind:?}: max relative error {err:.2e} at {at}"))?;
        report.push(format!("{kind:?} {err:.1e}"));
    }
    within_budget(t, Duration::from_secs(120))?;
    Ok(format!("{n} params; max rel err {}", report.join(", ")))
}

/// (1, C, N) tensor from per-voxel class rows.
fn rows(r: &[&[f64]]) -> Tensor {
    let (n, c) = (r.len(), r[0].len());
    let mut d = vec![0.0; n * c];
    for (i, row) in r.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            d[k * n + i] = *v;
        }
    }
    Tensor::from_vec(&[1, c, n, 1, 1], d).unwrap()
}

fn labels_1d(l: &[u8], c: usize) -> OneHotTarget {
    one_hot(&[Grid3::new([l.len(), 1, 1], l.to_vec()).unwrap()], c).unwrap()
}

fn c3_loss_oracles() -> Outcome {
    let t = Instant::now();
    let tol = 1e-10;
    let close = |name: &str, got: f64, want: f64| ensure((got - want).abs() <= tol, format!("{name}: {got} vs {want}"));
    // single voxel, p = (0.8, 0.2), y = class 0
    let ti1 = 0.8 / (0.8 + 0.3 * 0.2 + 0.7 * 0.2);
    close(
        "tversky 1 voxel",
        tversky_loss(&rows(&[&[0.8, 0.2]]), &labels_1d(&[0], 2), 0.3, 0.7, 0.0).map_err(|e| e.to_string())?,
        1.0 - ti1,
    )?;
    close("tversky 1 voxel literal", 1.0 - ti1, 0.2)?;
    let p2 = rows(&[&[0.8, 0.2], &[0.4, 0.6]]);
    let y2 = labels_1d(&[0, 1], 2);
    let ti2 = 1.4 / (1.4 + 0.3 * 0.6 + 0.7 * 0.6);
    close("tversky 2 voxels", tversky_loss(&p2, &y2, 0.3, 0.7, 0.0).map_err(|e| e.to_string())?, 1.0 - ti2)?;
    close("tversky 2 voxels literal", 1.0 - ti2, 0.3)?;
    let d = soft_dice(&p2, &y2, 0.0, DiceAggregation::Global).map_err(|e| e.to_string())?;
    close("soft dice", d, (0.8 + 0.6) / (2.0 + 2.0))?;
    close("soft dice literal", d, 0.35)?;
    let ce = cross_entropy(&rows(&[&[0.5, 0.5]]), &labels_1d(&[0], 2)).map_err(|e| e.to_string())?;
    close("cross entropy", ce, -0.5 * 0.5f64.ln())?;
    close("cross entropy literal", ce, 0.346_573_590_279_972_6)?;
    within_budget(t, Duration::from_secs(1))?;
    Ok(format!("tversky 0.2/0.3, soft dice {d}, CE {ce:.5}"))
}

fn c4_schedule() -> Outcome {
    let t = Instant::now();
    let e = |r: abseg::Result<f64>| r.map_err(|e| e.to_string());
    let mid = e(poly_lr(500, 1000, 1e-4, 0.9))?;
    let want = 1e-4 * 0.5f64.powf(0.9);
    ensure(((mid - want) / want).abs() <= 1e-12, format!("poly_lr(500) = {mid}, want {want}"))?;
    ensure(e(poly_lr(0, 1000, 1e-4, 0.9))? == 1e-4, "poly_lr(0) is not lr0")?;
    ensure(e(poly_lr(1000, 1000, 1e-4, 0.9))? == 0.0, "poly_lr(N) is not 0")?;
    within_budget(t, Duration::from_secs(1))?;
    Ok(format!("poly_lr(500) = {mid:.15e}"))
}

fn c5_ds_weights() -> Outcome {
    let t = Instant::now();
    let w = default_ds_weights();
    let v = deep_supervised(&[1.0, 0.0, 0.0, 0.0], &w).map_err(|e| e.to_string())?;
    ensure(v == 8.0 / 15.0, format!("[1,0,0,0] -> {v}"))?;
    let s: f64 = w.iter().sum();
    ensure((s - 1.0).abs() <= f64::EPSILON, format!("weights sum to {s}"))?;
    ensure(NetworkSpec::default().ds_weights == w, "network and loss weights differ")?;
    within_budget(t, Duration::from_secs(1))?;
    Ok(format!("[1,0,0,0] -> 8/15; sum {s}"))
}

fn random_simplex(rng: &mut Rng, c: usize, s: [usize; 3]) -> ProbabilityMap {
    let n: usize = s.iter().product();
    let mut d = vec![0.0; c * n];
    for i in 0..n {
        let w: Vec<f64> = (0..c).map(|_| rng.random_range(1e-3..1.0)).collect();
        let z: f64 = w.iter().sum();
        for k in 0..c {
            d[k * n + i] = w[k] / z;
        }
    }
    ProbabilityMap::new(Tensor::from_vec(&[c, s[0], s[1], s[2]], d).unwrap(), Spacing::default(), "case").unwrap()
}

fn c6_ensemble() -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(6, 0);
    for trial in 0..100 {
        let c = rng.random_range(2..6);
        let s = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
        let p = random_simplex(&mut rng, c, s);
        let q = random_simplex(&mut rng, c, s);
        let r = random_simplex(&mut rng, c, s);
        let e = |v: &[ProbabilityMap]| ensemble(v).map_err(|e| format!("trial {trial}: {e}"));
        let same = e(&[p.clone(), p.clone(), p.clone()])?;
        ensure(same.probs == p.probs, format!("trial {trial}: not idempotent"))?;
        let a = e(&[p.clone(), q.clone(), r.clone()])?;
        for perm in [[q.clone(), r.clone(), p.clone()], [r.clone(), q.clone(), p.clone()]] {
            ensure(e(&perm)?.probs == a.probs, format!("trial {trial}: order dependent"))?;
        }
        let n: usize = s.iter().product();
        for i in 0..n {
            let sum: f64 = (0..c).map(|k| a.probs.data()[k * n + i]).sum();
            ensure((sum - 1.0).abs() < 1e-12, format!("trial {trial}: channel sum {sum}"))?;
        }
        let lp = argmax_labels(&p).map_err(|e| e.to_string())?;
        let l2 = argmax_labels(&e(&[p.clone(), p.clone()])?).map_err(|e| e.to_string())?;
        ensure(lp == l2, format!("trial {trial}: argmax changed"))?;
    }
    within_budget(t, Duration::from_secs(10))?;
    Ok("100 random maps".into())
}

fn c7_metrics() -> Outcome {
    let t = Instant::now();
    let cube = |x0: usize| {
        let g = Grid3::from_fn([8, 4, 4], |x, _, _| (x0..x0 + 4).contains(&x) as u8);
        LabelMap::new(g, 2).unwrap()
    };
    let d = dice_score(&cube(0), &cube(2), 1).map_err(|e| e.to_string())?;
    ensure(d == 0.5, format!("cube dice {d}"))?;

    let mut rng = seeded(7, 0);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let shape = [rng.random_range(4..=32), rng.random_range(4..=32), rng.random_range(4..=32)];
        let spacing = Spacing::new(std::array::from_fn(|_| rng.random_range(0.5..2.0))).unwrap();
        let tau = [0.0, 0.6, 1.2, 2.5][i % 4] * rng.random_range(0.8..1.6);
        let (na, nb) = (rng.random_range(1..4), rng.random_range(1..4));
        let a = random_blobs(&mut rng, shape, na);
        let b = random_blobs(&mut rng, shape, nb);
        let fast = surface_dice(&mask_to_labels(&a), &mask_to_labels(&b), 1, tau, spacing).map_err(|e| e.to_string())?;
        let slow = brute_force_surface_dice(&a, &b, tau, spacing);
        worst = worst.max((fast - slow).abs());
        ensure((fast - slow).abs() <= 1e-9, format!("pair {i} {shape:?} tau {tau}: {fast} vs {slow}"))?;
    }
    within_budget(t, Duration::from_secs(300))?;
    Ok(format!("cube dice 0.5; 20 SDSC pairs, max |diff| {worst:.1e}"))
}

fn c8_tta() -> Outcome {
    let t = Instant::now();
    ensure(TTAPlan::new(AxisSet::ALL).len() == 8, "all-axes plan size")?;
    ensure(TTAPlan::new(AxisSet::YZ).len() == 4, "y,z plan size")?;
    for (task, want) in [(TaskPreset::Task1, 8), (TaskPreset::Task2, 4)] {
        let cfg = RunConfig {
            task,
            ..RunConfig::tiny()
        }
        .expand()
        .map_err(|e| e.to_string())?;
        let n = cfg.inference.plan().len();
        ensure(n == want, format!("{task:?}: {n} transforms"))?;
    }
    let net = Network::new(NetworkSpec::tiny(3), 3).map_err(|e| e.to_string())?;
    let mut rng = seeded(8, 0);
    let vol = random_input(&mut rng, &[3, 24, 20, 16]);
    let f = |v: &Tensor| sliding_window(|w| net.predict(w), v, [16, 16, 16], 0.5, WindowWeighting::Uniform);
    let plain = f(&vol).map_err(|e| e.to_string())?;
    let single = tta_predict(f, &vol, &TTAPlan::singleton()).map_err(|e| e.to_string())?;
    ensure(single == plain, "singleton TTA differs from plain prediction")?;
    let opts = InferenceOptions {
        patch_size: [16, 16, 16],
        overlap: 0.5,
        weighting: WindowWeighting::Uniform,
        flip_axes: AxisSet::NONE,
    };
    let via_predict = predict_volume(std::slice::from_ref(&net), &vol, &opts).map_err(|e| e.to_string())?;
    ensure(via_predict == plain, "predict_volume with no flips differs")?;
    within_budget(t, Duration::from_secs(30))?;
    Ok("sizes 8/4; singleton bit-exact".into())
}

fn phantom_case(spec: &PhantomSpec, id: &str) -> TrainingCase {
    let ph = make_phantom(spec, id).unwrap();
    let vol = abseg::preprocess::preprocess_case(&ph.volume, &Default::default()).unwrap();
    TrainingCase {
        case_id: id.into(),
        input: stack_modalities(&vol).unwrap(),
        labels: ph.labels,
    }
}

fn c9_overfit() -> Outcome {
    let t = Instant::now();
    let size = [32, 32, 32];
    let case = phantom_case(&PhantomSpec::standard(size, 1), "overfit");
    let mut cfg = RunConfig::tiny().expand().map_err(|e| e.to_string())?;
    let tc = &mut cfg.training;
    tc.batch_size = 1;
    tc.patch_size = size;
    tc.augmentation = AugmentationPolicy::disabled();
    tc.lr0 = 0.2;
    tc.momentum = 0.9;
    tc.epochs = 20;
    tc.steps_per_epoch = 10;
    tc.loss.dice_aggregation = DiceAggregation::PerClassMean;
    let out = train(tc, &cfg.network, std::slice::from_ref(&case), None, None, None, 1).map_err(|e| e.to_string())?;
    ensure(out.curve.len() == 200, format!("{} steps", out.curve.len()))?;
    let prob = ProbabilityMap::new(out.network.predict(&case.input).map_err(|e| e.to_string())?, Spacing::default(), "o")
        .map_err(|e| e.to_string())?;
    let pred = argmax_labels(&prob).map_err(|e| e.to_string())?;
    let dice: Vec<f64> = (1..5).map(|c| dice_score(&pred, &case.labels, c).unwrap()).collect();
    let fg = |l: &LabelMap| LabelMap::new(l.grid().map(|v| (v != 0) as u8), 2).unwrap();
    let union = dice_score(&fg(&pred), &fg(&case.labels), 1).map_err(|e| e.to_string())?;
    let min = dice.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(min >= 0.95, format!("per-class foreground Dice {dice:.3?}"))?;
    within_budget(t, Duration::from_secs(600))?;
    Ok(format!("per-class Dice {dice:.3?}, union {union:.3}, final loss {:.4}", out.curve[199].loss))
}

// ---------------------------------------------------------------- pipeline

const BIN: &str = env!("CARGO_BIN_EXE_abseg");

fn abseg(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .env("ABSEG_NUM_WORKERS", "1")
        .env("SOURCE_DATE_EPOCH", "0")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("abseg {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Expanded config a stage wrote next to its outputs, or the starting
/// config on the first run.
enum ConfigSource<'a> {
    Initial(&'a Path),
    RerunOf(&'a Path),
}

impl ConfigSource<'_> {
    fn for_stage(&self, stage: &str) -> PathBuf {
        match self {
            ConfigSource::Initial(p) => p.to_path_buf(),
            ConfigSource::RerunOf(run) => run.join(stage).join("config.expanded.json"),
        }
    }
}

/// synth → 2-fold crossval → 2-model ensemble predict → pseudo-train →
/// evaluate, all through the CLI.
fn run_pipeline(run: &Path, src: &ConfigSource) -> Result<(), String> {
    let manifest = run.join("data").join("manifest.json");
    let rd = ["--run-dir", s(run)];
    let cfg = |stage: &str| src.for_stage(stage);
    let initial = matches!(src, ConfigSource::Initial(_));
    let c = cfg("data");
    abseg(&[&["--config", s(&c)], &rd[..], &["synth", "--cases", "4", "--test-cases", "2"]].concat())?;

    let c = cfg("crossval");
    let mut args = vec!["--config", s(&c), "--manifest", s(&manifest)];
    if initial {
        args.extend(["--folds", "2", "--epochs", "2", "--steps-per-epoch", "5"]);
    }
    abseg(&[&args[..], &rd[..], &["crossval"]].concat())?;

    let f0 = run.join("crossval/fold_0/final.ckpt");
    let f1 = run.join("crossval/fold_1/final.ckpt");
    let c = cfg("predict");
    abseg(
        &[
            &["--config", s(&c), "--manifest", s(&manifest)][..],
            &rd[..],
            &["predict", "--models", s(&f0), s(&f1), "--split", "test"],
        ]
        .concat(),
    )?;

    let c = cfg("pseudo_train");
    let mut args = vec!["--config", s(&c), "--manifest", s(&manifest)];
    if initial {
        args.extend(["--epochs", "2", "--steps-per-epoch", "10"]);
    }
    abseg(&[&args[..], &rd[..], &["pseudo-train", "--models", s(&f0), s(&f1)]].concat())?;

    let c = cfg("eval");
    let pred = run.join("predict/labels");
    let gt = run.join("data/labels");
    abseg(
        &[
            &["--config", s(&c), "--manifest", s(&manifest)][..],
            &rd[..],
            &["evaluate", "--pred-dir", s(&pred), "--gt-dir", s(&gt)],
        ]
        .concat(),
    )
}

struct PipelineRun {
    _tmp: tempfile::TempDir,
    run: PathBuf,
}

static FIRST_RUN: Mutex<Option<PipelineRun>> = Mutex::new(None);

fn write_initial_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::tiny();
    cfg.training.checkpoint_interval = 5;
    let p = dir.join("tiny.json");
    fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p
}

fn first_pipeline_run() -> Result<PathBuf, String> {
    let mut guard = FIRST_RUN.lock().unwrap();
    if let Some(r) = guard.as_ref() {
        return Ok(r.run.clone());
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = write_initial_config(tmp.path());
    let run = tmp.path().join("run_a");
    run_pipeline(&run, &ConfigSource::Initial(&config))?;
    *guard = Some(PipelineRun { _tmp: tmp, run: run.clone() });
    Ok(run)
}

/// Step-`step` loss recomputed from a checkpoint with the plain forward
/// pass and the scalar loss functions (no autodiff graph).
fn recompute_step_loss(
    ck: &Checkpoint,
    cfg: &RunConfig,
    data: &[TrainingCase],
    pseudo: &[TrainingCase],
    step: u64,
) -> Result<(f64, f64, f64), String> {
    let mut tcfg = cfg.training.clone();
    tcfg.pseudo_enabled = true;
    let spec = &ck.spec;
    let term = |pseudo_batch: bool, cases: &[TrainingCase]| -> Result<f64, String> {
        let batch = draw_batch(&tcfg, cases, step, pseudo_batch, 1).map_err(|e| e.to_string())?;
        let mut g = abseg::graph::Graph::new();
        let x = g.input(batch.inputs.clone());
        let out = forward(&mut g, &ck.params, spec, x, Mode::Train).map_err(|e| e.to_string())?;
        let mut levels = Vec::new();
        for (l, &node) in out.logits.iter().enumerate() {
            let stride = spec.cumulative_stride(l);
            let t: Vec<Grid3<u8>> = batch.targets.iter().map(|t| subsample(t, stride)).collect();
            let y = one_hot(&t, spec.num_classes).map_err(|e| e.to_string())?;
            let p = softmax_head(g.value(node));
            levels.push(hybrid_loss(&p, &y, &tcfg.loss).map_err(|e| e.to_string())?);
        }
        deep_supervised(&levels, &spec.ds_weights).map_err(|e| e.to_string())
    };
    let sup = term(false, data)?;
    let pse = term(true, pseudo)?;
    Ok((sup + pse, sup, pse))
}

fn c10_end_to_end() -> Outcome {
    let t = Instant::now();
    let run = first_pipeline_run()?;
    // cross-validation bookkeeping
    let cv: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("crossval/crossval.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(cv["folds"].as_array().map(|f| f.len()) == Some(2), "crossval did not produce 2 folds")?;
    for i in 0..2 {
        ensure(run.join(format!("crossval/fold_{i}/final.ckpt")).exists(), format!("fold {i} checkpoint missing"))?;
    }
    let events = fs::read_to_string(run.join("events.jsonl")).map_err(|e| e.to_string())?;
    ensure(events.contains("\"count\":2,\"event\":\"models\""), "predict did not ensemble 2 models")?;

    // pseudo-label training: every record is the sum of its two terms, and
    // one step is recomputed from its checkpoint independently
    let train_dir = run.join("pseudo_train/train");
    let curve = read_loss_curve(&train_dir.join("loss_curve.jsonl")).map_err(|e| e.to_string())?;
    ensure(curve.len() == 20, format!("pseudo-train ran {} steps", curve.len()))?;
    for r in &curve {
        let p = r.components.pseudo.ok_or("record without a pseudo term")?;
        ensure((r.loss - (r.components.supervised + p)).abs() <= 1e-9, format!("step {}: sum mismatch", r.step))?;
    }
    let cfg = RunConfig::load(&run.join("pseudo_train/config.expanded.json"))
        .and_then(RunConfig::expand)
        .map_err(|e| e.to_string())?;
    let manifest = DatasetManifest::load(&run.join("data/manifest.json")).map_err(|e| e.to_string())?;
    let pm = DatasetManifest::load(&run.join("pseudo_train/pseudo/manifest.json")).map_err(|e| e.to_string())?;
    let ids = |m: &DatasetManifest, split| -> Vec<String> {
        m.split(split).map(|e| e.case_id.clone()).collect()
    };
    let data = load_training_cases(&manifest, &ids(&manifest, abseg::volume_io::Split::Train), &cfg.preprocess, 1)
        .map_err(|e| e.to_string())?;
    let pseudo_ids: Vec<String> = pm.entries.iter().map(|e| e.case_id.clone()).collect();
    let pseudo = load_training_cases(&pm, &pseudo_ids, &cfg.preprocess, 1).map_err(|e| e.to_string())?;
    let step = 15;
    let ck = Checkpoint::load(&checkpoint_path(&train_dir, step)).map_err(|e| e.to_string())?;
    let (total, sup, pse) = recompute_step_loss(&ck, &cfg, &data, &pseudo, step)?;
    let rec = &curve[step as usize];
    ensure(
        (rec.loss - total).abs() <= 1e-9,
        format!("step {step}: logged {} vs recomputed {total} ({sup} + {pse})", rec.loss),
    )?;

    // evaluation report
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval/report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(run.join("eval/report.txt").exists(), "report.txt missing")?;
    let cases = report["cases"].as_array().ok_or("no cases")?;
    ensure(cases.len() == 2, format!("{} evaluated cases", cases.len()))?;
    for c in cases {
        for key in ["dsc", "sdsc"] {
            let v = c[key].as_array().ok_or("missing scores")?;
            ensure(v.len() == 4, format!("{key}: {} classes", v.len()))?;
            ensure(
                v.iter().all(|x| x.as_f64().is_some_and(|x| (0.0..=1.0).contains(&x))),
                format!("{key} outside [0, 1]"),
            )?;
        }
    }
    ensure(report["mean_dsc"].is_f64() && report["mean_sdsc"].is_f64(), "missing means")?;
    within_budget(t, Duration::from_secs(1800))?;
    Ok(format!(
        "step {step} loss {:.9} = {sup:.9} + {pse:.9} (|diff| {:.1e}); report mean DSC {:.3}",
        rec.loss,
        (rec.loss - total).abs(),
        report["mean_dsc"].as_f64().unwrap_or(f64::NAN)
    ))
}

fn c11_flip_probe() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let size = [32, 32, 32];
    let manifest = make_dataset_split(6, 3, &PhantomSpec::standard(size, 0), 11, tmp.path()).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig {
        task: TaskPreset::Task2,
        ..RunConfig::tiny()
    }
    .expand()
    .map_err(|e| e.to_string())?;
    cfg.training.lr0 = 0.2;
    cfg.training.epochs = 50;
    cfg.training.steps_per_epoch = 10;
    let split = |s| manifest.split(s).map(|e| e.case_id.clone()).collect::<Vec<_>>();
    let data = load_training_cases(&manifest, &split(abseg::volume_io::Split::Train), &cfg.preprocess, 1)
        .map_err(|e| e.to_string())?;
    let out = train(&cfg.training, &cfg.network, &data, None, None, None, 1).map_err(|e| e.to_string())?;
    let models = [out.network];
    let held_out = load_training_cases(&manifest, &split(abseg::volume_io::Split::Test), &cfg.preprocess, 1)
        .map_err(|e| e.to_string())?;
    let score = |axes: AxisSet| -> Result<f64, String> {
        let opts = InferenceOptions {
            patch_size: size,
            flip_axes: axes,
            ..cfg.inference.clone()
        };
        let mut sum = 0.0;
        for c in &held_out {
            let p = predict_volume(&models, &c.input, &opts).map_err(|e| e.to_string())?;
            let labels = argmax_labels(&ProbabilityMap::new(p, Spacing::default(), &c.case_id).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            for class in [3, 4] {
                sum += dice_score(&labels, &c.labels, class).map_err(|e| e.to_string())?;
            }
        }
        Ok(sum / (2 * held_out.len()) as f64)
    };
    let yz = score(AxisSet::YZ)?;
    let xyz = score(AxisSet::ALL)?;
    ensure(yz > 0.5, format!("model does not separate the pair (y,z-TTA Dice {yz:.3})"))?;
    ensure(xyz < yz, format!("x-flip TTA Dice {xyz:.4} not below y,z-only {yz:.4}"))?;
    within_budget(t, Duration::from_secs(1200))?;
    Ok(format!("paired-class Dice: y,z TTA {yz:.3} > x,y,z TTA {xyz:.3}"))
}

fn c12_determinism() -> Outcome {
    let t = Instant::now();
    let first = first_pipeline_run()?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tmp.path().join("run_b");
    run_pipeline(&second, &ConfigSource::RerunOf(&first))?;
    let files = [
        "crossval/fold_0/loss_curve.jsonl",
        "crossval/fold_1/loss_curve.jsonl",
        "pseudo_train/train/loss_curve.jsonl",
        "crossval/crossval.txt",
        "crossval/crossval.json",
        "crossval/fold_0/validation/report.json",
        "crossval/fold_1/validation/report.json",
        "eval/report.txt",
        "eval/report.json",
    ];
    for f in files {
        let a = fs::read(first.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(second.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, format!("{f} differs between runs"))?;
    }
    // checkpoints too, as a stronger check
    let a = fs::read(first.join("pseudo_train/train/final.ckpt")).map_err(|e| e.to_string())?;
    let b = fs::read(second.join("pseudo_train/train/final.ckpt")).map_err(|e| e.to_string())?;
    ensure(a == b, "final pseudo-train checkpoints differ")?;
    let _ = t;
    Ok(format!("{} files byte-identical", files.len() + 1))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 12] = [
        (1, "shape contract", c1_shape_contract),
        (2, "gradient fidelity", c2_gradient_fidelity),
        (3, "loss oracles", c3_loss_oracles),
        (4, "schedule exactness", c4_schedule),
        (5, "deep-supervision weights", c5_ds_weights),
        (6, "ensemble properties", c6_ensemble),
        (7, "metric oracles", c7_metrics),
        (8, "TTA bookkeeping", c8_tta),
        (9, "overfit smoke", c9_overfit),
        (10, "end-to-end pipeline", c10_end_to_end),
        (11, "flip-probe direction", c11_flip_probe),
        (12, "determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1} s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
