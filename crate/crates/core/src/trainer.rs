//! SGD with momentum under the poly schedule, checkpointing, resume and
//! cross-validation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::grid::{Grid3, Shape3};
use crate::inference::{argmax_labels, predict_case, InferenceOptions};
use crate::losses::{self, LossConfig, LossKind};
use crate::metrics::{score_case, summarize, write_report, CaseScores, EvalOptions, EvaluationReport};
use crate::network::{self, Checkpoint, Mode, Network, NetworkSpec, ParameterSet};
use crate::parallel::map_indexed;
use crate::preprocess::{augment, preprocess_case, sample_patch, stack_modalities, AugmentationPolicy, PatchBatch, PreprocessConfig};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::volume_io::{load_case, load_case_labels, make_folds, DatasetManifest, LabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub batch_size: usize,
    pub poly_power: f64,
    pub seed: u64,
    pub pseudo_enabled: bool,
    pub nesterov: bool,
    /// Also decay biases and normalization parameters.
    pub decay_all_parameters: bool,
    /// Steps between checkpoints; 0 writes only the initial and final ones.
    pub checkpoint_interval: u64,
    pub patch_size: Shape3,
    /// Probability that a sampled patch is forced to contain foreground.
    pub foreground_fraction: f64,
    pub augmentation: AugmentationPolicy,
    pub loss: LossConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            momentum: 0.99,
            weight_decay: 1e-5,
            epochs: 1000,
            steps_per_epoch: 250,
            batch_size: 2,
            poly_power: 0.9,
            seed: 0,
            pseudo_enabled: false,
            nesterov: false,
            decay_all_parameters: false,
            checkpoint_interval: 250,
            patch_size: [128, 160, 112],
            foreground_fraction: 0.33,
            augmentation: AugmentationPolicy::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.poly_power > 0.0 && self.poly_power <= 2.0) {
            return fail(format!("poly_power must be in (0, 2], got {}", self.poly_power));
        }
        if self.patch_size.contains(&0) {
            return fail(format!("patch_size {:?} has a zero extent", self.patch_size));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return fail("foreground_fraction must be a probability".into());
        }
        self.augmentation.validate()?;
        self.loss.validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch
    }
}

/// lr0 · (1 − e/N_e)^power.
pub fn poly_lr(epoch: u64, total_epochs: u64, lr0: f64, power: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside [0, {total_epochs}]"
        )));
    }
    if epoch == total_epochs {
        return Ok(0.0);
    }
    Ok(lr0 * (1.0 - epoch as f64 / total_epochs as f64).powf(power))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Tensor>,
    pub epoch: u64,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            velocity: params
                .iter()
                .map(|(n, p)| (n.clone(), Tensor::zeros(p.value.shape())))
                .collect(),
            epoch: 0,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub decay_all_parameters: bool,
}

/// One momentum step: g' = g + wd·w, v ← m·v + g', w ← w − lr·v.
///
/// Nothing is modified unless every gradient is present and finite.
pub fn sgd_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    opt: SgdParams,
) -> Result<()> {
    if params.len() != grads.len() || params.iter().any(|(n, _)| !grads.contains_key(n)) {
        let missing: Vec<_> = params.names().into_iter().filter(|n| !grads.contains_key(n)).collect();
        let extra: Vec<_> = grads.keys().filter(|n| params.get(n).is_none()).cloned().collect();
        return Err(Error::NameMismatch(format!(
            "gradients missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, p) in params.iter() {
        let g = &grads[name];
        if g.shape() != p.value.shape() {
            return Err(Error::shape(p.value.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                name: format!("gradient of {name}"),
                step: state.step,
            });
        }
    }
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let wd = if p.kind.is_weight() || opt.decay_all_parameters { opt.weight_decay } else { 0.0 };
        for ((w, vi), gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
            let gd = gi + wd * *w;
            *vi = opt.momentum * *vi + gd;
            let dir = if opt.nesterov { gd + opt.momentum * *vi } else { *vi };
            *w -= opt.lr * dir;
        }
    }
    state.step += 1;
    Ok(())
}

/// A preprocessed case ready for patch sampling.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub case_id: String,
    /// (3, X, Y, Z)
    pub input: Tensor,
    pub labels: LabelMap,
}

/// Loads, preprocesses (unless the manifest says it already is) and stacks
/// the listed cases. Cases without labels are an error.
pub fn load_training_cases(
    manifest: &DatasetManifest,
    case_ids: &[String],
    preprocess: &PreprocessConfig,
    workers: usize,
) -> Result<Vec<TrainingCase>> {
    let loaded = map_indexed(case_ids.len(), workers, |i| -> Result<TrainingCase> {
        let id = &case_ids[i];
        let entry = manifest.entry(id).ok_or_else(|| Error::MissingCase(id.clone()))?;
        let mut vol = load_case(manifest, entry)?;
        if !manifest.preprocessed {
            vol = preprocess_case(&vol, preprocess)?;
        }
        let labels = load_case_labels(manifest, entry)?
            .ok_or_else(|| Error::MissingCase(format!("{id} has no label map")))?;
        if labels.shape() != vol.shape() {
            return Err(Error::shape(vol.shape(), labels.shape()));
        }
        Ok(TrainingCase {
            case_id: id.clone(),
            input: stack_modalities(&vol)?,
            labels,
        })
    });
    loaded.into_iter().collect()
}

/// Nearest-neighbour label downsampling by an integer stride.
pub fn downsample_labels(labels: &Grid3<u8>, stride: [usize; 3]) -> Grid3<u8> {
    let s = labels.shape();
    let shape = [s[0] / stride[0], s[1] / stride[1], s[2] / stride[2]];
    Grid3::from_fn(shape, |x, y, z| labels.get(x * stride[0], y * stride[1], z * stride[2]))
}

const SUPERVISED_STREAM: u64 = 0;
const PSEUDO_STREAM: u64 = 1;

/// Draws the batch for `step` from `cases`. Each sample has its own
/// generator, so the batch does not depend on the worker count.
pub fn draw_batch(
    cfg: &TrainingConfig,
    cases: &[TrainingCase],
    step: u64,
    pseudo: bool,
    workers: usize,
) -> Result<PatchBatch> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    let stream_id = if pseudo { PSEUDO_STREAM } else { SUPERVISED_STREAM };
    let samples = map_indexed(cfg.batch_size, workers, |b| {
        let mut rng = stream(cfg.seed, &[step, stream_id, b as u64]);
        let case = &cases[rand::Rng::random_range(&mut rng, 0..cases.len())];
        let s = sample_patch(&case.input, &case.labels, cfg.patch_size, &mut rng, cfg.foreground_fraction)?;
        Ok(augment(&s, &cfg.augmentation, &mut rng))
    });
    PatchBatch::from_samples(samples.into_iter().collect::<Result<Vec<_>>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// Deep-supervised hybrid loss on the labelled batch.
    pub supervised: f64,
    /// Hybrid loss per output level, full resolution first.
    pub supervised_levels: Vec<f64>,
    pub pseudo: Option<f64>,
    pub pseudo_levels: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub components: LossComponents,
}

pub struct StepEvaluation {
    pub loss: f64,
    pub components: LossComponents,
    pub grads: BTreeMap<String, Tensor>,
}

fn deep_supervised_term(
    g: &mut Graph,
    params: &ParameterSet,
    spec: &NetworkSpec,
    loss: &LossConfig,
    batch: &PatchBatch,
) -> Result<(crate::graph::NodeId, Vec<f64>)> {
    let x = g.input(batch.inputs.clone());
    let out = network::forward(g, params, spec, x, Mode::Train)?;
    let mut terms = Vec::with_capacity(out.logits.len());
    let mut levels = Vec::with_capacity(out.logits.len());
    for (l, &logits) in out.logits.iter().enumerate() {
        let stride = spec.cumulative_stride(l);
        let targets: Vec<Grid3<u8>> = batch.targets.iter().map(|t| downsample_labels(t, stride)).collect();
        let y = losses::one_hot(&targets, spec.num_classes)?;
        let p = g.softmax(logits);
        let h = g.loss(p, LossKind::Hybrid, &y, loss)?;
        levels.push(g.value(h).item());
        terms.push((h, spec.ds_weights[l]));
    }
    Ok((g.weighted_sum(&terms)?, levels))
}

/// Loss and parameter gradients for one step: the deep-supervised hybrid
/// loss on `batch`, plus the same on `pseudo` when given.
pub fn evaluate_step(
    params: &ParameterSet,
    spec: &NetworkSpec,
    loss: &LossConfig,
    batch: &PatchBatch,
    pseudo: Option<&PatchBatch>,
) -> Result<StepEvaluation> {
    let mut g = Graph::new();
    let (sup, supervised_levels) = deep_supervised_term(&mut g, params, spec, loss, batch)?;
    let supervised = g.value(sup).item();
    let (total, pseudo_value, pseudo_levels) = match pseudo {
        Some(pb) => {
            let (ps, levels) = deep_supervised_term(&mut g, params, spec, loss, pb)?;
            let v = g.value(ps).item();
            (g.add(sup, ps)?, Some(v), Some(levels))
        }
        None => (sup, None, None),
    };
    let grads = g.backward(total)?;
    for name in params.names() {
        if g.param_id(&name).is_none() {
            return Err(Error::DetachedParameter(name));
        }
    }
    Ok(StepEvaluation {
        loss: g.value(total).item(),
        components: LossComponents {
            supervised,
            supervised_levels,
            pseudo: pseudo_value,
            pseudo_levels,
        },
        grads,
    })
}

pub const LOSS_CURVE_FILE: &str = "loss_curve.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub state: OptimizerState,
    pub curve: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn snapshot(net: &Network, state: &OptimizerState) -> Checkpoint {
    Checkpoint {
        spec: net.spec.clone(),
        params: net.params.clone(),
        step: state.step,
        epoch: state.epoch,
        velocity: Some(state.velocity.clone()),
    }
}

struct CurveWriter {
    file: Option<fs::File>,
    path: PathBuf,
}

impl CurveWriter {
    /// Keeps records before `start` from an earlier run and drops the rest.
    fn open(out_dir: Option<&Path>, start: u64) -> Result<Self> {
        let Some(dir) = out_dir else {
            return Ok(Self {
                file: None,
                path: PathBuf::new(),
            });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_CURVE_FILE);
        let mut kept = String::new();
        if start > 0 && path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let rec: StepRecord = serde_json::from_str(line)?;
                if rec.step < start {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { file: Some(file), path })
    }

    fn push(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Runs `epochs × steps_per_epoch` steps (continuing from `resume` when
/// given). With an output directory, writes the loss curve, periodic
/// checkpoints and `final.ckpt` there.
pub fn train(
    cfg: &TrainingConfig,
    spec: &NetworkSpec,
    data: &[TrainingCase],
    pseudo: Option<&[TrainingCase]>,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
    workers: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if cfg.loss.ds_weights != spec.ds_weights {
        return Err(Error::Config(format!(
            "loss ds_weights {:?} differ from network ds_weights {:?}",
            cfg.loss.ds_weights, spec.ds_weights
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    let pseudo = match (cfg.pseudo_enabled, pseudo) {
        (true, Some(p)) if !p.is_empty() => Some(p),
        (true, _) => return Err(Error::Config("pseudo_enabled requires a nonempty pseudo-labelled set".into())),
        (false, _) => None,
    };
    for c in data.iter().chain(pseudo.unwrap_or(&[])) {
        if c.labels.num_classes() != spec.num_classes {
            return Err(Error::Config(format!(
                "case {} has {} classes, network expects {}",
                c.case_id,
                c.labels.num_classes(),
                spec.num_classes
            )));
        }
    }

    let (mut net, mut state) = match resume {
        Some(ck) => {
            if &ck.spec != spec {
                return Err(Error::Config("checkpoint spec differs from the configured network".into()));
            }
            let mut state = OptimizerState::new(&ck.params);
            if let Some(v) = &ck.velocity {
                state.velocity = v.clone();
            }
            state.step = ck.step;
            state.epoch = ck.epoch;
            (ck.network(), state)
        }
        None => {
            let net = Network::new(spec.clone(), cfg.seed)?;
            let state = OptimizerState::new(&net.params);
            (net, state)
        }
    };

    let total = cfg.total_steps();
    let mut curve_out = CurveWriter::open(out_dir, state.step)?;
    let mut curve = Vec::new();
    let mut checkpoints = Vec::new();
    let save = |net: &Network, state: &OptimizerState, path: PathBuf, list: &mut Vec<PathBuf>| -> Result<()> {
        snapshot(net, state).save(&path)?;
        list.push(path);
        Ok(())
    };
    if let Some(dir) = out_dir {
        if resume.is_none() {
            save(&net, &state, checkpoint_path(dir, 0), &mut checkpoints)?;
        }
    }

    while state.step < total {
        let step = state.step;
        let epoch = step / cfg.steps_per_epoch;
        state.epoch = epoch;
        let lr = poly_lr(epoch, cfg.epochs, cfg.lr0, cfg.poly_power)?;
        let batch = draw_batch(cfg, data, step, false, workers)?;
        let pbatch = match pseudo {
            Some(p) => Some(draw_batch(cfg, p, step, true, workers)?),
            None => None,
        };
        let eval = evaluate_step(&net.params, spec, &cfg.loss, &batch, pbatch.as_ref())?;
        if !eval.loss.is_finite() {
            log::error!("non-finite loss at step {step}; stopping (last checkpoint kept)");
            return Err(Error::NonFinite {
                name: "loss".into(),
                step,
            });
        }
        let rec = StepRecord {
            step,
            epoch,
            lr,
            loss: eval.loss,
            components: eval.components,
        };
        curve_out.push(&rec)?;
        log::debug!("step {step} epoch {epoch} lr {lr:.3e} loss {:.6}", rec.loss);
        curve.push(rec);
        sgd_step(
            &mut net.params,
            &eval.grads,
            &mut state,
            SgdParams {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
                nesterov: cfg.nesterov,
                decay_all_parameters: cfg.decay_all_parameters,
            },
        )?;
        state.epoch = state.step / cfg.steps_per_epoch;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0 {
                save(&net, &state, checkpoint_path(dir, state.step), &mut checkpoints)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save(&net, &state, dir.join(FINAL_CHECKPOINT), &mut checkpoints)?;
    }
    Ok(TrainOutcome {
        network: net,
        state,
        curve,
        checkpoints,
    })
}

/// Reads a loss curve written by [`train`].
pub fn read_loss_curve(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Relative to the cross-validation output directory.
    pub checkpoint: PathBuf,
    pub training_cases: Vec<String>,
    pub validation_cases: Vec<String>,
    pub report: EvaluationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationSummary {
    pub k: usize,
    pub folds: Vec<FoldResult>,
}

impl CrossValidationSummary {
    /// One row per fold plus the mean of the fold means.
    pub fn render(&self) -> String {
        let mut s = format!("{:<6}  {:>5}  {:>7}  {:>7}\n", "Fold", "Cases", "DSC", "SDSC");
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for f in &self.folds {
            s.push_str(&format!(
                "{:<6}  {:>5}  {:>7}  {:>7}\n",
                f.fold,
                f.validation_cases.len(),
                fmt(f.report.mean_dsc),
                fmt(f.report.mean_sdsc)
            ));
        }
        let avg = |get: fn(&EvaluationReport) -> Option<f64>| {
            let v: Vec<f64> = self.folds.iter().filter_map(|f| get(&f.report)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        s.push_str(&format!(
            "{:<6}  {:>5}  {:>7}  {:>7}\n",
            "mean",
            self.folds.iter().map(|f| f.validation_cases.len()).sum::<usize>(),
            fmt(avg(|r| r.mean_dsc)),
            fmt(avg(|r| r.mean_sdsc))
        ));
        s
    }
}

pub struct CrossValidationSetup<'a> {
    pub training: &'a TrainingConfig,
    pub network: &'a NetworkSpec,
    pub preprocess: &'a PreprocessConfig,
    pub inference: &'a InferenceOptions,
    pub evaluation: &'a EvalOptions,
    pub k: usize,
    pub fold_seed: u64,
    pub workers: usize,
}

/// Trains model i on every fold but i and evaluates it on fold i. Fold
/// outputs go to `out_dir/fold_<i>`; the summary to `out_dir/crossval.{txt,json}`.
pub fn run_cross_validation(
    setup: &CrossValidationSetup<'_>,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<CrossValidationSummary> {
    let folds = make_folds(manifest, setup.k, setup.fold_seed)?;
    let mut results = Vec::with_capacity(setup.k);
    for i in 0..setup.k {
        let train_ids = folds.training_cases(i);
        let val_ids = folds.validation_cases(i);
        log::info!("fold {i}: {} training, {} validation cases", train_ids.len(), val_ids.len());
        let data = load_training_cases(manifest, &train_ids, setup.preprocess, setup.workers)?;
        let dir = out_dir.join(format!("fold_{i}"));
        let outcome = train(setup.training, setup.network, &data, None, Some(&dir), None, setup.workers)?;
        let models = [outcome.network];
        let classes: Vec<usize> = if setup.evaluation.classes.is_empty() {
            (1..manifest.num_classes).collect()
        } else {
            setup.evaluation.classes.clone()
        };
        let scored = map_indexed(val_ids.len(), setup.workers, |j| -> Result<CaseScores> {
            let id = &val_ids[j];
            let entry = manifest.entry(id).ok_or_else(|| Error::MissingCase(id.clone()))?;
            let prob = predict_case(&models, manifest, entry, setup.preprocess, setup.inference)?;
            let pred = argmax_labels(&prob)?;
            let gt = load_case_labels(manifest, entry)?
                .ok_or_else(|| Error::MissingCase(format!("{id} has no label map")))?;
            score_case(id, &pred, &gt, prob.spacing, &classes, setup.evaluation)
        });
        let mut eval_opts = setup.evaluation.clone();
        eval_opts.method = format!("fold_{i}");
        if eval_opts.class_names.is_empty() {
            eval_opts.class_names = manifest.class_names.clone();
        }
        let report = summarize(scored.into_iter().collect::<Result<_>>()?, classes, &eval_opts);
        write_report(&report, &dir.join("validation"))?;
        results.push(FoldResult {
            fold: i,
            checkpoint: PathBuf::from(format!("fold_{i}")).join(FINAL_CHECKPOINT),
            training_cases: train_ids,
            validation_cases: val_ids,
            report,
        });
    }
    let summary = CrossValidationSummary {
        k: setup.k,
        folds: results,
    };
    let txt = out_dir.join("crossval.txt");
    fs::write(&txt, summary.render()).map_err(|e| Error::io(&txt, e))?;
    let json = out_dir.join("crossval.json");
    fs::write(&json, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(summary)
}
