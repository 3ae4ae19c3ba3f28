use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskMode;
use crate::subject::KdSettings;

/// How the subject-map generator is treated while the classifiers train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// Updated from the classification losses plus the distillation terms.
    Joint,
    /// Parameters fixed; maps are treated as inputs.
    Frozen,
}

/// Where distillation targets come from during joint training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherConfig {
    /// `<shot>_<frame>.png` / `.fmap` files; relative paths resolve against the manifest directory.
    Files { dir: PathBuf },
    /// Heuristic saliency computed from the frame.
    Oracle,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig::Files { dir: PathBuf::from("maps") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Shots per forward graph; larger batches accumulate gradients over several graphs.
    pub micro_batch: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub task_mode: TaskMode,
    pub generator: GeneratorMode,
    pub kd: KdSettings,
    pub teacher: TeacherConfig,
    /// Inverse-frequency class weights in the cross-entropy.
    pub class_weighting: bool,
    /// Caps the global gradient norm of each classifier update.
    pub grad_clip: Option<f64>,
    /// Evaluate on the validation split every this many epochs (0 disables).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            micro_batch: 16,
            momentum: 0.9,
            base_lr: 0.001,
            lr_decay_epochs: vec![20, 40],
            lr_decay_factor: 10.0,
            seed: 0,
            task_mode: TaskMode::Separate,
            generator: GeneratorMode::Joint,
            kd: KdSettings::default(),
            teacher: TeacherConfig::default(),
            class_weighting: false,
            grad_clip: None,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    /// Schedule for small synthetic runs from scratch: fewer epochs, small
    /// batches and a larger step than the pretrained-backbone defaults.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            micro_batch: 4,
            base_lr: 0.003,
            lr_decay_epochs: vec![24, 28],
            grad_clip: Some(5.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.micro_batch == 0 {
            return bad("epochs, batch_size and micro_batch must be positive".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) || !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return bad(format!("learning rate {} and decay factor {} must be positive", self.base_lr, self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) || self.lr_decay_epochs.iter().any(|&e| e == 0 || e >= self.epochs) {
            return bad(format!("decay epochs {:?} must be strictly increasing within (0, {})", self.lr_decay_epochs, self.epochs));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        self.kd.weights.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// Learning rate of `epoch`: `base_lr / factor^k` with `k` the number of decay epochs `<= epoch`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::EpochOutOfRange { epoch, epochs: config.epochs });
    }
    let k = config.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(config.base_lr / config.lr_decay_factor.powi(k as i32))
}
