//! One JSON run configuration covering every stage, with task presets.
//!
//! The presets differ only in which axes may be flipped. That set drives
//! both training-time mirroring and test-time flips, so the two cannot
//! drift apart.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AxisSet, Shape3};
use crate::inference::InferenceOptions;
use crate::metrics::EvalOptions;
use crate::network::NetworkSpec;
use crate::preprocess::PreprocessConfig;
use crate::synth::PhantomSpec;
use crate::trainer::TrainingConfig;

pub const EXPANDED_CONFIG_FILE: &str = "config.expanded.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskPreset {
    /// Flips on all three axes.
    #[default]
    Task1,
    /// No flips along x (paired left/right structures).
    Task2,
    /// Flip axes taken from `flip_axes`.
    Custom,
}

impl TaskPreset {
    pub fn flip_axes(self) -> Option<AxisSet> {
        match self {
            TaskPreset::Task1 => Some(AxisSet::ALL),
            TaskPreset::Task2 => Some(AxisSet::YZ),
            TaskPreset::Custom => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "task1" => Ok(TaskPreset::Task1),
            "task2" => Ok(TaskPreset::Task2),
            "custom" => Ok(TaskPreset::Custom),
            _ => Err(Error::Config(format!("unknown task preset `{s}` (task1, task2, custom)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub cases: usize,
    pub seed: u64,
    pub phantom: PhantomSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cases: 4,
            seed: 0,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskPreset,
    /// Required for `custom`; must agree with the preset otherwise.
    pub flip_axes: Option<AxisSet>,
    /// Overrides the network's class count when set.
    pub num_classes: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub folds: usize,
    pub fold_seed: u64,
    pub network: NetworkSpec,
    pub preprocess: PreprocessConfig,
    pub training: TrainingConfig,
    pub inference: InferenceOptions,
    pub evaluation: EvalOptions,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskPreset::Task1,
            flip_axes: None,
            num_classes: None,
            manifest: None,
            run_dir: PathBuf::from("runs/default"),
            folds: 5,
            fold_seed: 0,
            network: NetworkSpec::default(),
            preprocess: PreprocessConfig::default(),
            training: TrainingConfig::default(),
            inference: InferenceOptions::default(),
            evaluation: EvalOptions::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale settings: tiny network, 32³ phantoms and patches, and
    /// per-class overlap terms so small structures are not drowned out by
    /// background.
    pub fn tiny() -> Self {
        let size: Shape3 = [32, 32, 32];
        let mut cfg = Self {
            network: NetworkSpec::tiny(crate::synth::DEFAULT_NUM_CLASSES),
            ..Self::default()
        };
        cfg.training.patch_size = size;
        cfg.training.lr0 = 0.05;
        cfg.training.momentum = 0.9;
        cfg.training.loss.dice_aggregation = crate::losses::DiceAggregation::PerClassMean;
        cfg.training.epochs = 10;
        cfg.training.steps_per_epoch = 10;
        cfg.training.checkpoint_interval = 50;
        cfg.inference.patch_size = size;
        cfg.synth.phantom = PhantomSpec::standard(size, 0);
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves presets and shared settings into explicit values.
    pub fn expand(mut self) -> Result<Self> {
        let axes = match (self.task.flip_axes(), self.flip_axes) {
            (Some(p), None) => p,
            (Some(p), Some(f)) if p == f => p,
            (Some(p), Some(f)) => {
                return Err(Error::Config(format!(
                    "flip_axes `{f}` contradicts preset {:?} (`{p}`); use task \"custom\"",
                    self.task
                )))
            }
            (None, Some(f)) => f,
            (None, None) => return Err(Error::Config("task \"custom\" requires flip_axes".into())),
        };
        self.flip_axes = Some(axes);
        self.training.augmentation.mirror_axes = axes;
        self.inference.flip_axes = axes;
        if let Some(c) = self.num_classes {
            self.network.num_classes = c;
        }
        self.num_classes = Some(self.network.num_classes);
        self.training.loss.ds_weights = self.network.ds_weights.clone();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if !(0.0..1.0).contains(&self.inference.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.inference.overlap)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes the expanded config into `dir`.
    pub fn write_expanded(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EXPANDED_CONFIG_FILE);
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
