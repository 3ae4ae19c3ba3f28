//! Model configuration and task-sharing layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::media::{Preprocess, SamplingConfig, SamplingMode};
use crate::model::backbone::{BackboneConfig, Stage, Stream};
use crate::model::guidance::GuidanceMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: GuidanceMode,
    pub movement: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: GuidanceMode::Subject, movement: GuidanceMode::Background }
    }
}

impl GuidanceConfig {
    pub fn for_task(&self, task: Task) -> GuidanceMode {
        match task {
            Task::Scale => self.scale,
            Task::Movement => self.movement,
        }
    }
}

/// Score fusion weights per source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionWeights {
    pub rgb: f64,
    pub flow: f64,
    pub varmap: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { rgb: 1.0, flow: 1.0, varmap: 1.0 }
    }
}

/// Architecture and inference settings; one field per ablation axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Square crop fed to the backbone.
    pub input_size: usize,
    pub streams: Vec<Stream>,
    pub guidance: GuidanceConfig,
    /// Adds the variance-map classifier to the movement task.
    pub variance_map: bool,
    pub var_hidden: usize,
    /// Clips per shot for the classification pass during training.
    pub n_clips_cls: usize,
    /// Clips per shot for the classification pass at evaluation.
    pub n_clips_eval: usize,
    /// Clips per shot for the variance-map pass.
    pub n_clips_var: usize,
    pub frames_per_clip_flow: usize,
    pub fusion: FusionWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            input_size: 32,
            streams: vec![Stream::Rgb, Stream::Flow],
            guidance: GuidanceConfig::default(),
            variance_map: true,
            var_hidden: 128,
            n_clips_cls: 3,
            n_clips_eval: 25,
            n_clips_var: 8,
            frames_per_clip_flow: 5,
            fusion: FusionWeights::default(),
        }
    }
}

/// Keys that change only inference behavior; checkpoints stay compatible across them.
const RUNTIME_KEYS: [&str; 3] = ["fusion", "n_clips_cls", "n_clips_eval"];

fn flatten_json(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.streams.is_empty() {
            return bad("at least one stream is required".into());
        }
        if self.streams.iter().collect::<BTreeSet<_>>().len() != self.streams.len() {
            return bad(format!("duplicate stream in {:?}", self.streams));
        }
        if self.input_size < 8 {
            return bad(format!("input_size {} is too small", self.input_size));
        }
        if self.n_clips_cls == 0 || self.n_clips_eval == 0 {
            return bad("clip counts must be positive".into());
        }
        if self.variance_map && self.n_clips_var < 2 {
            return bad(format!("n_clips_var must be >= 2, got {}", self.n_clips_var));
        }
        if self.streams.contains(&Stream::Flow) && self.frames_per_clip_flow == 0 {
            return bad("frames_per_clip_flow must be positive".into());
        }
        if self.var_hidden == 0 || self.backbone.width == 0 {
            return bad("layer widths must be positive".into());
        }
        let w = self.fusion;
        if [w.rgb, w.flow, w.varmap].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad(format!("fusion weights must be positive, got {w:?}"));
        }
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
        toml::to_string(self).expect("model config serializes")
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess::scaled(self.input_size)
    }

    pub fn uses_flow(&self) -> bool {
        self.streams.contains(&Stream::Flow)
    }

    pub fn in_channels(&self, stream: Stream) -> usize {
        match stream {
            Stream::Rgb => 3,
            Stream::Flow => 2 * self.frames_per_clip_flow,
        }
    }

    fn sampling(&self, n: usize, mode: SamplingMode) -> SamplingConfig {
        let mut s = SamplingConfig::new(n, mode).with_flow(self.uses_flow());
        s.frames_per_clip_flow = self.frames_per_clip_flow;
        s
    }

    /// Classification-pass sampling for training (`train = true`) or evaluation.
    pub fn cls_sampling(&self, train: bool) -> SamplingConfig {
        if train {
            self.sampling(self.n_clips_cls, SamplingMode::TrainRandom)
        } else {
            self.sampling(self.n_clips_eval, SamplingMode::TestUniform)
        }
    }

    /// Variance-map-pass sampling, drawn independently of the classification pass.
    pub fn var_sampling(&self, train: bool) -> SamplingConfig {
        let mode = if train { SamplingMode::TrainRandom } else { SamplingMode::TestUniform };
        self.sampling(self.n_clips_var, mode)
    }

    /// Dotted keys whose values differ between two configs, ignoring inference-only keys.
    pub fn architecture_diff(&self, other: &ModelConfig) -> Vec<String> {
        let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
        flatten_json("", &serde_json::to_value(self).expect("serializes"), &mut a);
        flatten_json("", &serde_json::to_value(other).expect("serializes"), &mut b);
        let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        keys.into_iter()
            .filter(|k| !RUNTIME_KEYS.iter().any(|r| k.as_str() == *r || k.starts_with(&format!("{r}."))))
            .filter(|k| a.get(*k) != b.get(*k))
            .cloned()
            .collect()
    }
}

/// Which tasks are trained and which modules they share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    ScaleOnly,
    MovementOnly,
    /// Both tasks, nothing shared.
    Separate,
    JointShareSmg,
    JointShareRes1,
    JointShareRes4,
}

impl TaskMode {
    pub fn is_joint(self) -> bool {
        matches!(self, TaskMode::JointShareSmg | TaskMode::JointShareRes1 | TaskMode::JointShareRes4)
    }
}

/// Module-sharing layout derived from a [`TaskMode`]; shared modules use one
/// parameter name, so both task graphs read and update the same tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub mode: TaskMode,
    pub tasks: Vec<Task>,
    pub share_generator: bool,
    /// Backbone stages up to and including this one are shared.
    pub shared_through: Option<Stage>,
}

/// The sharing plan of a task mode.
pub fn joint_training_wiring(mode: TaskMode) -> SharingPlan {
    let (tasks, share_generator, shared_through) = match mode {
        TaskMode::ScaleOnly => (vec![Task::Scale], false, None),
        TaskMode::MovementOnly => (vec![Task::Movement], false, None),
        TaskMode::Separate => (Task::ALL.to_vec(), false, None),
        TaskMode::JointShareSmg => (Task::ALL.to_vec(), true, None),
        TaskMode::JointShareRes1 => (Task::ALL.to_vec(), true, Some(Stage::Res1)),
        TaskMode::JointShareRes4 => (Task::ALL.to_vec(), true, Some(Stage::Res4)),
    };
    SharingPlan { mode, tasks, share_generator, shared_through }
}

impl SharingPlan {
    pub fn generator_prefix(&self, task: Task) -> String {
        if self.share_generator || self.tasks.len() == 1 {
            "smg".into()
        } else {
            format!("{task}.smg")
        }
    }

    pub fn discriminator_prefix(&self, task: Task) -> String {
        if self.share_generator || self.tasks.len() == 1 {
            "disc".into()
        } else {
            format!("{task}.disc")
        }
    }

    /// Owner prefix of a backbone stage: `<stream>.shared` when shared, else `<stream>.<task>`.
    pub fn stage_base(&self, stream: Stream, task: Task, stage: Stage) -> String {
        let shared = self.tasks.len() > 1 && self.shared_through.is_some_and(|s| stage <= s);
        let owner = if shared { "shared".to_string() } else { task.as_str().to_string() };
        format!("{stream}.{owner}")
    }
}
