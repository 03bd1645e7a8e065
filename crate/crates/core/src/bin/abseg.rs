//! `abseg`: the segmentation pipeline as subcommands sharing one JSON config.
//!
//! Every invocation expands its config, writes it to the run directory and
//! next to its outputs, and appends machine-readable events to
//! `<run-dir>/events.jsonl`. Stages pass data to each other only via files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abseg::config::{RunConfig, TaskPreset};
use abseg::error::{Error, Result};
use abseg::inference::{
    argmax_labels, ensemble, generate_pseudo_labels, load_models, predict_case, ProbabilityMap, WindowWeighting,
};
use abseg::metrics::{evaluate_cases, list_label_files, render_table, write_report};
use abseg::network::{shape_plan, Checkpoint};
use abseg::parallel::{map_indexed, num_workers};
use abseg::plot::plot_overlay;
use abseg::preprocess::preprocess_case;
use abseg::synth::{make_dataset_split, MANIFEST_FILE};
use abseg::trainer::{load_training_cases, run_cross_validation, train, CrossValidationSetup, FINAL_CHECKPOINT};
use abseg::volume_io::{
    load_case, load_case_labels, load_labelmap, load_probabilities, make_folds, save_labelmap, save_probabilities,
    save_volume, DType, DatasetManifest, ManifestEntry, Split, VolumeFormat,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

const EVENTS_FILE: &str = "events.jsonl";

#[derive(Parser, Debug)]
#[command(name = "abseg", version, about = "3D multi-modal segmentation pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON). Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the full-size defaults
    /// (ignored with --config).
    #[arg(long, global = true)]
    tiny: bool,
    /// Overrides `run_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides `manifest`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Task preset: task1, task2 or custom.
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<u64>,
    #[arg(long, global = true)]
    steps_per_epoch: Option<u64>,
    #[arg(long, global = true)]
    folds: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Synth {
        /// Output directory (default `<run-dir>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cases: Option<usize>,
        /// Extra cases placed in the test split.
        #[arg(long, default_value_t = 0)]
        test_cases: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Clip and standardize every case once, writing a preprocessed manifest.
    Preprocess {
        /// Output directory (default `<run-dir>/preprocessed`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model on the training split (or the training folds of --fold).
    Train {
        #[arg(long)]
        fold: Option<usize>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pseudo-labelled cases to add as a second loss term.
        #[arg(long)]
        pseudo_manifest: Option<PathBuf>,
        /// Output directory (default `<run-dir>/train` or `<run-dir>/fold_<i>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-fold cross-validation: one model per fold, validated on that fold.
    Crossval {
        /// Output directory (default `<run-dir>/crossval`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sliding-window prediction with flip TTA, ensembling all --models.
    Predict {
        #[arg(long = "models", required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        inference: InferenceFlags,
        #[command(flatten)]
        select: CaseSelection,
        /// Also write probability maps (needed by `ensemble`).
        #[arg(long)]
        save_probs: bool,
        /// Output directory (default `<run-dir>/predict`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average saved probability maps of several `predict` outputs.
    Ensemble {
        /// `predict` output directories written with --save-probs.
        #[arg(long = "inputs", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Output directory (default `<run-dir>/ensemble`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pseudo-label unlabelled cases with --models, then train on labelled
    /// and pseudo-labelled data together.
    PseudoTrain {
        #[arg(long = "models", required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        inference: InferenceFlags,
        /// Split whose cases get pseudo labels.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        unlabelled_split: SplitArg,
        /// Output directory (default `<run-dir>/pseudo_train`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted label maps against references.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Surface tolerance in millimetres.
        #[arg(long)]
        tau: Option<f64>,
        /// Comma-separated class ids (default: every foreground class).
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
        /// Row label in the report table.
        #[arg(long)]
        method: Option<String>,
        /// Output directory (default `<run-dir>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PNG ortho-slices of one case with label contours.
    Plot {
        #[arg(long)]
        case: String,
        /// Label map to overlay (default: the manifest's reference labels).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModalityArg::Ct)]
        modality: ModalityArg,
        /// Slice indices `x,y,z` (default: the volume center).
        #[arg(long, value_parser = parse_dims::<3>)]
        slices: Option<[usize; 3]>,
        /// File prefix (default `<run-dir>/plots/<case>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the network's shape plan.
    Shapes {
        /// Input shape `c,x,y,z` (default: in_channels and the training patch).
        #[arg(long, value_parser = parse_dims::<4>)]
        input: Option<[usize; 4]>,
    },
}

/// Parses `a,b,c` style integer tuples.
fn parse_dims<const N: usize>(s: &str) -> std::result::Result<[usize; N], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("`{p}` is not a nonnegative integer")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected {N} comma-separated values, got {}", v.len()))
}

#[derive(Args, Debug)]
struct InferenceFlags {
    /// Never flip along x at test time.
    #[arg(long)]
    no_x_flip: bool,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    gaussian_weighting: bool,
}

#[derive(Args, Debug)]
struct CaseSelection {
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Explicit case ids (overrides --split).
    #[arg(long = "case")]
    cases: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn ids(self, manifest: &DatasetManifest) -> Vec<String> {
        manifest
            .entries
            .iter()
            .filter(|e| match self {
                SplitArg::Train => e.split == Split::Train,
                SplitArg::Test => e.split == Split::Test,
                SplitArg::All => true,
            })
            .map(|e| e.case_id.clone())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModalityArg {
    Ct,
    T1ce,
    Flair,
}

/// Append-only JSON-lines event log.
struct Events {
    path: PathBuf,
    command: &'static str,
}

impl Events {
    fn emit(&self, event: &str, fields: Value) -> Result<()> {
        let mut rec = json!({ "command": self.command, "event": event });
        if let (Some(r), Value::Object(f)) = (rec.as_object_mut(), fields) {
            r.extend(f);
        }
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| io_err(&self.path, e))?;
        writeln!(f, "{rec}").map_err(|e| io_err(&self.path, e))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Preprocess { .. } => "preprocess",
        Command::Train { .. } => "train",
        Command::Crossval { .. } => "crossval",
        Command::Predict { .. } => "predict",
        Command::Ensemble { .. } => "ensemble",
        Command::PseudoTrain { .. } => "pseudo-train",
        Command::Evaluate { .. } => "evaluate",
        Command::Plot { .. } => "plot",
        Command::Shapes { .. } => "shapes",
    }
}

struct Ctx {
    cfg: RunConfig,
    manifest: Option<DatasetManifest>,
    events: Events,
    workers: usize,
}

impl Ctx {
    fn manifest(&self) -> Result<&DatasetManifest> {
        self.manifest
            .as_ref()
            .ok_or_else(|| Error::Config("no manifest (set `manifest` in the config or pass --manifest)".into()))
    }

    fn out_dir(&self, given: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let dir = given.clone().unwrap_or_else(|| self.cfg.run_dir.join(default));
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        self.cfg.write_expanded(&dir)?;
        Ok(dir)
    }

    fn log_tta(&self) -> Result<()> {
        let plan = self.cfg.inference.plan();
        log::info!("TTA plan: {} transforms ({})", plan.len(), plan.names().join(", "));
        self.events.emit(
            "tta_plan",
            json!({ "transforms": plan.len(), "names": plan.names(), "flip_axes": self.cfg.inference.flip_axes.to_string() }),
        )
    }
}

/// Applied before expansion so the written config reproduces the run:
/// dropping the x flip turns the preset into an explicit custom axis set.
fn apply_inference_flags(cfg: &mut RunConfig, flags: &InferenceFlags) -> Result<()> {
    if flags.no_x_flip {
        let mut axes = match (cfg.task.flip_axes(), cfg.flip_axes) {
            (Some(p), _) => p,
            (None, Some(f)) => f,
            (None, None) => return Err(Error::Config("task \"custom\" requires flip_axes".into())),
        };
        axes.x = false;
        cfg.task = TaskPreset::Custom;
        cfg.flip_axes = Some(axes);
    }
    if let Some(o) = flags.overlap {
        cfg.inference.overlap = o;
    }
    if flags.gaussian_weighting {
        cfg.inference.weighting = WindowWeighting::Gaussian;
    }
    Ok(())
}

fn build_config(common: &Common, command: &Command) -> Result<(RunConfig, Option<DatasetManifest>)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if common.tiny => RunConfig::tiny(),
        None => RunConfig::default(),
    };
    if let Some(t) = &common.task {
        cfg.task = TaskPreset::parse(t)?;
        if cfg.task != TaskPreset::Custom {
            cfg.flip_axes = None;
        }
    }
    if let Some(d) = &common.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(e) = common.epochs {
        cfg.training.epochs = e;
    }
    if let Some(s) = common.steps_per_epoch {
        cfg.training.steps_per_epoch = s;
    }
    if let Some(k) = common.folds {
        cfg.folds = k;
    }
    let manifest = match (&cfg.manifest, command) {
        (_, Command::Synth { .. }) | (_, Command::Shapes { .. }) => None,
        (Some(p), _) => Some(DatasetManifest::load(p)?),
        (None, _) => None,
    };
    if cfg.num_classes.is_none() {
        cfg.num_classes = manifest.as_ref().map(|m| m.num_classes);
    }
    match command {
        Command::Predict { inference, .. } | Command::PseudoTrain { inference, .. } => {
            apply_inference_flags(&mut cfg, inference)?;
        }
        Command::Evaluate { tau, classes, method, .. } => {
            if let Some(t) = tau {
                cfg.evaluation.tau_mm = *t;
            }
            if let Some(c) = classes {
                cfg.evaluation.classes = c.clone();
            }
            if let Some(m) = method {
                cfg.evaluation.method = m.clone();
            }
        }
        _ => {}
    }
    let cfg = cfg.expand()?;
    if let Some(m) = &manifest {
        if m.num_classes != cfg.network.num_classes {
            return Err(Error::Config(format!(
                "manifest has {} classes, network is configured for {}",
                m.num_classes, cfg.network.num_classes
            )));
        }
    }
    Ok((cfg, manifest))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, manifest) = build_config(&cli.common, &cli.command)?;
    cfg.write_expanded(&cfg.run_dir)?;
    let ctx = Ctx {
        events: Events {
            path: cfg.run_dir.join(EVENTS_FILE),
            command: command_name(&cli.command),
        },
        cfg,
        manifest,
        workers: num_workers(),
    };
    ctx.events.emit("start", json!({ "workers": ctx.workers }))?;
    match &cli.command {
        Command::Synth {
            out,
            cases,
            test_cases,
            seed,
        } => cmd_synth(&ctx, out, *cases, *test_cases, *seed),
        Command::Preprocess { out } => cmd_preprocess(&ctx, out),
        Command::Train {
            fold,
            resume,
            pseudo_manifest,
            out,
        } => cmd_train(&ctx, *fold, resume.as_deref(), pseudo_manifest.as_deref(), out),
        Command::Crossval { out } => cmd_crossval(&ctx, out),
        Command::Predict {
            models,
            select,
            save_probs,
            out,
            ..
        } => cmd_predict(&ctx, models, select, *save_probs, out),
        Command::Ensemble { inputs, out } => cmd_ensemble(&ctx, inputs, out),
        Command::PseudoTrain {
            models,
            unlabelled_split,
            out,
            ..
        } => cmd_pseudo_train(&ctx, models, *unlabelled_split, out),
        Command::Evaluate { pred_dir, gt_dir, out, .. } => cmd_evaluate(&ctx, pred_dir, gt_dir, out),
        Command::Plot {
            case,
            labels,
            modality,
            slices,
            out,
        } => cmd_plot(&ctx, case, labels.as_deref(), *modality, *slices, out),
        Command::Shapes { input } => cmd_shapes(&ctx, *input),
    }?;
    ctx.events.emit("done", json!({}))
}

fn cmd_synth(ctx: &Ctx, out: &Option<PathBuf>, cases: Option<usize>, test_cases: usize, seed: Option<u64>) -> Result<()> {
    let dir = ctx.out_dir(out, "data")?;
    let s = &ctx.cfg.synth;
    let n = cases.unwrap_or(s.cases);
    let m = make_dataset_split(n, test_cases, &s.phantom, seed.unwrap_or(s.seed), &dir)?;
    let path = dir.join(MANIFEST_FILE);
    log::info!("wrote {} cases to {}", m.entries.len(), path.display());
    ctx.events.emit(
        "synth",
        json!({ "train_cases": n, "test_cases": test_cases, "manifest": path }),
    )
}

fn cmd_preprocess(ctx: &Ctx, out: &Option<PathBuf>) -> Result<()> {
    let m = ctx.manifest()?;
    if m.preprocessed {
        return Err(Error::Config("manifest is already preprocessed".into()));
    }
    let dir = ctx.out_dir(out, "preprocessed")?;
    let entries = map_indexed(m.entries.len(), ctx.workers, |i| -> Result<ManifestEntry> {
        let e = &m.entries[i];
        let vol = preprocess_case(&load_case(m, e)?, &ctx.cfg.preprocess)?;
        let ext = VolumeFormat::RawJson.extension();
        let mut names = Vec::new();
        for (name, g) in ["ct", "t1ce", "flair"].iter().zip(vol.modalities()) {
            let rel = PathBuf::from("images").join(format!("{}_{name}{ext}", e.case_id));
            save_volume(g, vol.spacing, &dir.join(&rel), VolumeFormat::RawJson, DType::F64)?;
            names.push(rel);
        }
        let label = match load_case_labels(m, e)? {
            Some(l) => {
                let rel = PathBuf::from("labels").join(format!("{}{ext}", e.case_id));
                save_labelmap(&l, vol.spacing, &dir.join(&rel), VolumeFormat::RawJson)?;
                Some(rel)
            }
            None => None,
        };
        Ok(ManifestEntry {
            case_id: e.case_id.clone(),
            ct: names[0].clone(),
            t1ce: names[1].clone(),
            flair: names[2].clone(),
            label,
            split: e.split,
        })
    });
    let mut out_m = DatasetManifest::new(m.num_classes, entries.into_iter().collect::<Result<_>>()?)?;
    out_m.class_names = m.class_names.clone();
    out_m.preprocessed = true;
    let path = dir.join(MANIFEST_FILE);
    out_m.save(&path)?;
    ctx.events.emit("preprocess", json!({ "cases": out_m.entries.len(), "manifest": path }))
}

fn labelled_ids(m: &DatasetManifest) -> Vec<String> {
    m.split(Split::Train).filter(|e| e.label.is_some()).map(|e| e.case_id.clone()).collect()
}

fn cmd_train(
    ctx: &Ctx,
    fold: Option<usize>,
    resume: Option<&Path>,
    pseudo_manifest: Option<&Path>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let m = ctx.manifest()?;
    let ids = match fold {
        Some(i) => {
            if i >= ctx.cfg.folds {
                return Err(Error::InvalidArgument(format!("fold {i} outside 0..{}", ctx.cfg.folds)));
            }
            make_folds(m, ctx.cfg.folds, ctx.cfg.fold_seed)?.training_cases(i)
        }
        None => labelled_ids(m),
    };
    let default = fold.map_or_else(|| "train".to_string(), |i| format!("fold_{i}"));
    let dir = ctx.out_dir(out, &default)?;
    let data = load_training_cases(m, &ids, &ctx.cfg.preprocess, ctx.workers)?;
    let mut tcfg = ctx.cfg.training.clone();
    let pseudo = match pseudo_manifest {
        Some(p) => {
            let pm = DatasetManifest::load(p)?;
            let pids: Vec<String> = pm.entries.iter().map(|e| e.case_id.clone()).collect();
            tcfg.pseudo_enabled = true;
            Some(load_training_cases(&pm, &pids, &ctx.cfg.preprocess, ctx.workers)?)
        }
        None => None,
    };
    let resume = resume.map(Checkpoint::load).transpose()?;
    run_training(ctx, &tcfg, &data, pseudo.as_deref(), resume.as_ref(), &dir)
}

fn run_training(
    ctx: &Ctx,
    tcfg: &abseg::trainer::TrainingConfig,
    data: &[abseg::trainer::TrainingCase],
    pseudo: Option<&[abseg::trainer::TrainingCase]>,
    resume: Option<&Checkpoint>,
    dir: &Path,
) -> Result<()> {
    ctx.events.emit(
        "train_start",
        json!({
            "cases": data.iter().map(|c| &c.case_id).collect::<Vec<_>>(),
            "pseudo_cases": pseudo.map(|p| p.iter().map(|c| c.case_id.clone()).collect::<Vec<_>>()),
            "total_steps": tcfg.total_steps(),
            "resume_step": resume.map(|c| c.step),
        }),
    )?;
    let outcome = train(tcfg, &ctx.cfg.network, data, pseudo, Some(dir), resume, ctx.workers)?;
    let last = outcome.curve.last().map(|r| r.loss);
    log::info!("trained to step {}; final loss {:?}", outcome.state.step, last);
    ctx.events.emit(
        "train_done",
        json!({ "steps": outcome.state.step, "final_loss": last, "checkpoint": dir.join(FINAL_CHECKPOINT) }),
    )
}

fn cmd_crossval(ctx: &Ctx, out: &Option<PathBuf>) -> Result<()> {
    let m = ctx.manifest()?;
    let dir = ctx.out_dir(out, "crossval")?;
    let c = &ctx.cfg;
    let setup = CrossValidationSetup {
        training: &c.training,
        network: &c.network,
        preprocess: &c.preprocess,
        inference: &c.inference,
        evaluation: &c.evaluation,
        k: c.folds,
        fold_seed: c.fold_seed,
        workers: ctx.workers,
    };
    ctx.log_tta()?;
    let summary = run_cross_validation(&setup, m, &dir)?;
    print!("{}", summary.render());
    ctx.events.emit(
        "crossval",
        json!({
            "k": summary.k,
            "checkpoints": summary.folds.iter().map(|f| dir.join(&f.checkpoint)).collect::<Vec<_>>(),
            "mean_dsc": summary.folds.iter().map(|f| f.report.mean_dsc).collect::<Vec<_>>(),
        }),
    )
}

fn label_format(m: &DatasetManifest, e: &ManifestEntry) -> VolumeFormat {
    VolumeFormat::from_path(&m.resolve(&e.ct)).unwrap_or(VolumeFormat::Nifti1)
}

fn cmd_predict(
    ctx: &Ctx,
    models: &[PathBuf],
    select: &CaseSelection,
    save_probs: bool,
    out: &Option<PathBuf>,
) -> Result<()> {
    let m = ctx.manifest()?;
    let ids = if select.cases.is_empty() { select.split.ids(m) } else { select.cases.clone() };
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!("no cases selected ({:?} split)", select.split)));
    }
    let dir = ctx.out_dir(out, "predict")?;
    ctx.log_tta()?;
    let nets = load_models(models)?;
    ctx.events.emit("models", json!({ "paths": models, "count": nets.len() }))?;
    let done = map_indexed(ids.len(), ctx.workers, |i| -> Result<()> {
        let e = m.entry(&ids[i]).ok_or_else(|| Error::MissingCase(ids[i].clone()))?;
        let prob = predict_case(&nets, m, e, &ctx.cfg.preprocess, &ctx.cfg.inference)?;
        write_prediction(&prob, label_format(m, e), &dir, save_probs)
    });
    done.into_iter().collect::<Result<Vec<_>>>()?;
    log::info!("predicted {} cases into {}", ids.len(), dir.display());
    ctx.events.emit("predict", json!({ "cases": ids, "labels": dir.join("labels") }))
}

fn write_prediction(prob: &ProbabilityMap, format: VolumeFormat, dir: &Path, save_probs: bool) -> Result<()> {
    let ext = format.extension();
    let labels = argmax_labels(prob)?;
    save_labelmap(&labels, prob.spacing, &dir.join("labels").join(format!("{}{ext}", prob.case_id)), format)?;
    if save_probs {
        let p = dir.join("probs").join(format!("{}{ext}", prob.case_id));
        save_probabilities(&prob.probs, prob.spacing, &p, format)?;
    }
    Ok(())
}

fn cmd_ensemble(ctx: &Ctx, inputs: &[PathBuf], out: &Option<PathBuf>) -> Result<()> {
    let listings = inputs
        .iter()
        .map(|d| list_label_files(&d.join("probs")))
        .collect::<Result<Vec<BTreeMap<String, PathBuf>>>>()?;
    let ids: Vec<String> = listings[0].keys().cloned().collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!("no probability maps in {}", inputs[0].join("probs").display())));
    }
    for (l, d) in listings.iter().zip(inputs).skip(1) {
        if l.keys().ne(listings[0].keys()) {
            return Err(Error::MissingCase(format!("{} holds a different case set", d.display())));
        }
    }
    let dir = ctx.out_dir(out, "ensemble")?;
    let done = map_indexed(ids.len(), ctx.workers, |i| -> Result<()> {
        let id = &ids[i];
        let maps = listings
            .iter()
            .map(|l| {
                let p = &l[id];
                let (t, s) = load_probabilities(p, VolumeFormat::from_path(p)?)?;
                ProbabilityMap::new(t, s, id.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let format = VolumeFormat::from_path(&listings[0][id])?;
        write_prediction(&ensemble(&maps)?, format, &dir, true)
    });
    done.into_iter().collect::<Result<Vec<_>>>()?;
    ctx.events.emit("ensemble", json!({ "inputs": inputs, "cases": ids }))
}

fn cmd_pseudo_train(ctx: &Ctx, models: &[PathBuf], split: SplitArg, out: &Option<PathBuf>) -> Result<()> {
    let m = ctx.manifest()?;
    let dir = ctx.out_dir(out, "pseudo_train")?;
    let unlabelled = split.ids(m);
    if unlabelled.is_empty() {
        return Err(Error::InvalidArgument(format!("no cases in the {split:?} split to pseudo-label")));
    }
    ctx.log_tta()?;
    let pseudo_dir = dir.join("pseudo");
    let pm = generate_pseudo_labels(
        models,
        m,
        &unlabelled,
        &ctx.cfg.preprocess,
        &ctx.cfg.inference,
        &pseudo_dir,
        ctx.workers,
    )?;
    let pm_path = pseudo_dir.join(MANIFEST_FILE);
    pm.save(&pm_path)?;
    ctx.events.emit("pseudo_labels", json!({ "cases": unlabelled, "manifest": pm_path }))?;
    let data = load_training_cases(m, &labelled_ids(m), &ctx.cfg.preprocess, ctx.workers)?;
    let pseudo = load_training_cases(&pm, &unlabelled, &ctx.cfg.preprocess, ctx.workers)?;
    let mut tcfg = ctx.cfg.training.clone();
    tcfg.pseudo_enabled = true;
    run_training(ctx, &tcfg, &data, Some(&pseudo), None, &dir.join("train"))
}

fn cmd_evaluate(ctx: &Ctx, pred_dir: &Path, gt_dir: &Path, out: &Option<PathBuf>) -> Result<()> {
    let preds = list_label_files(pred_dir)?;
    let gts = list_label_files(gt_dir)?;
    let mut opts = ctx.cfg.evaluation.clone();
    if opts.class_names.is_empty() {
        if let Some(m) = &ctx.manifest {
            opts.class_names = m.class_names.clone();
        }
    }
    let report = evaluate_cases(&preds, &gts, ctx.cfg.network.num_classes, &opts, ctx.workers)?;
    let dir = ctx.out_dir(out, "eval")?;
    let (txt, json_path) = write_report(&report, &dir)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    ctx.events.emit(
        "evaluate",
        json!({ "cases": report.cases.len(), "mean_dsc": report.mean_dsc, "mean_sdsc": report.mean_sdsc,
                "report": [txt, json_path] }),
    )
}

fn cmd_plot(
    ctx: &Ctx,
    case: &str,
    labels: Option<&Path>,
    modality: ModalityArg,
    slices: Option<[usize; 3]>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let m = ctx.manifest()?;
    let e = m.entry(case).ok_or_else(|| Error::MissingCase(case.to_string()))?;
    let vol = load_case(m, e)?;
    let lab = match labels {
        Some(p) => load_labelmap(p, VolumeFormat::from_path(p)?, m.num_classes)?.0,
        None => load_case_labels(m, e)?.ok_or_else(|| Error::MissingCase(format!("{case} has no label map")))?,
    };
    let grid = match modality {
        ModalityArg::Ct => &vol.ct,
        ModalityArg::T1ce => &vol.t1ce,
        ModalityArg::Flair => &vol.flair,
    };
    let s = vol.shape();
    let center = slices.unwrap_or([s[0] / 2, s[1] / 2, s[2] / 2]);
    let prefix = out.clone().unwrap_or_else(|| ctx.cfg.run_dir.join("plots").join(case));
    let files = plot_overlay(grid, &lab, center, &prefix)?;
    for f in &files {
        println!("{}", f.display());
    }
    ctx.events.emit("plot", json!({ "case": case, "slices": center, "files": files }))
}

fn cmd_shapes(ctx: &Ctx, input: Option<[usize; 4]>) -> Result<()> {
    let spec = &ctx.cfg.network;
    let p = ctx.cfg.training.patch_size;
    let shape = input.unwrap_or([spec.in_channels, p[0], p[1], p[2]]);
    let plan = shape_plan(spec, shape)?;
    print!("{}", plan.render());
    ctx.events.emit("shapes", json!({ "input": shape, "bottleneck": plan.bottleneck() }))
}
