//! Top-1 accuracy, confusion matrices and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Manifest, ShotRecord, Split, Task};
use crate::error::{Error, Result};
use crate::media::{FlowBackend, MediaStore};
use crate::model::{joint_training_wiring, Checkpoint, ModelConfig, Prediction, ScoreVector, SgNet};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::train::batch::{net_input, sample_shot};

/// Anything that assigns per-task class probabilities to a shot.
pub trait ShotPredictor {
    fn tasks(&self) -> Vec<Task>;
    fn predict(&self, record: &ShotRecord) -> Result<BTreeMap<Task, ScoreVector>>;
    fn runtime(&self) -> RuntimeStats {
        RuntimeStats::default()
    }
}

/// Evaluation-time prediction for one shot: 25 uniform clips (configurable)
/// for classification and the variance-map clips, center crop.
pub fn predict_shot<T: Scalar>(net: &SgNet, store: &ParamStore<T>, media: &MediaStore, record: &ShotRecord) -> Result<Prediction> {
    let sample = sample_shot(media, record, &net.config, false, 0)?;
    let input = net_input(std::slice::from_ref(&sample), &net.config)?;
    Ok(net.predict(store, &input)?.remove(0))
}

/// A trained network with its parameters and media access.
pub struct ModelPredictor<'a, T> {
    pub net: &'a SgNet,
    pub store: &'a ParamStore<T>,
    pub media: &'a MediaStore,
}

impl<T: Scalar> ShotPredictor for ModelPredictor<'_, T> {
    fn tasks(&self) -> Vec<Task> {
        self.net.tasks().to_vec()
    }

    fn predict(&self, record: &ShotRecord) -> Result<BTreeMap<Task, ScoreVector>> {
        Ok(predict_shot(self.net, self.store, self.media, record)?.fused)
    }

    fn runtime(&self) -> RuntimeStats {
        RuntimeStats::of(self.net).unwrap_or_default()
    }
}

/// Predicts each shot's annotated labels with probability 1.
pub struct LabelOracle;

impl ShotPredictor for LabelOracle {
    fn tasks(&self) -> Vec<Task> {
        Task::ALL.to_vec()
    }

    fn predict(&self, record: &ShotRecord) -> Result<BTreeMap<Task, ScoreVector>> {
        let mut out = BTreeMap::new();
        let labels = [(Task::Scale, record.scale.map(|s| s.index())), (Task::Movement, record.movement.map(|m| m.index()))];
        for (task, label) in labels {
            let label = label.ok_or_else(|| Error::Config(format!("shot {} is unlabeled", record.shot_id)))?;
            let mut probs = vec![0.0; task.num_classes()];
            probs[label] = 1.0;
            out.insert(task, ScoreVector::new(task, probs, [])?);
        }
        Ok(out)
    }
}

/// Uniformly random class probabilities, seeded per shot id.
pub struct UniformRandom {
    pub seed: u64,
}

impl ShotPredictor for UniformRandom {
    fn tasks(&self) -> Vec<Task> {
        Task::ALL.to_vec()
    }

    fn predict(&self, record: &ShotRecord) -> Result<BTreeMap<Task, ScoreVector>> {
        let h = record.shot_id.bytes().fold(self.seed ^ 0xcbf2_9ce4_8422_2325, |a, b| (a ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut out = BTreeMap::new();
        for task in Task::ALL {
            let raw: Vec<f64> = (0..task.num_classes()).map(|_| rng.random::<f64>() + 1e-12).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            out.insert(task, ScoreVector::new(task, probs, [])?);
        }
        Ok(out)
    }
}

/// Rows are annotated classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(task: Task) -> Self {
        let k = task.num_classes();
        Self { classes: (0..k).map(|i| task.class_name(i).to_string()).collect(), counts: vec![vec![0; k]; k] }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Number of shots annotated with each class.
    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Top-1 accuracy in percent; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            100.0 * self.correct() as f64 / t as f64
        }
    }
}

/// Cost and size figures; all deterministic so reports compare bit for bit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_params: usize,
    pub generator_params: usize,
    /// One evaluation forward pass over a shot, every stream.
    pub gflops_per_shot: f64,
    /// One classification clip, every stream.
    pub gflops_per_clip: f64,
    pub generator_gflops_per_frame: f64,
}

impl RuntimeStats {
    pub fn of(net: &SgNet) -> Result<Self> {
        let mut store = ParamStore::<f32>::new();
        net.init(&mut store, &mut rand::rng());
        let (shot, clip) = net.flops()?;
        let s = net.config.input_size;
        let gen = net.generators.values().next().map_or(0, |g| g.flops_per_frame(s, s));
        let disc: usize = net.discriminators.values().map(|d| d.num_params()).sum();
        Ok(Self {
            total_params: store.num_scalars() - disc,
            generator_params: net.generator_params(),
            gflops_per_shot: shot as f64 / 1e9,
            gflops_per_clip: clip as f64 / 1e9,
            generator_gflops_per_frame: gen as f64 / 1e9,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub num_shots: usize,
    /// Top-1 accuracy in percent.
    pub acc_scale: Option<f64>,
    pub acc_movement: Option<f64>,
    pub confusion_scale: Option<ConfusionMatrix>,
    pub confusion_movement: Option<ConfusionMatrix>,
    pub config: Value,
    pub runtime: RuntimeStats,
}

impl EvalReport {
    pub fn accuracy(&self, task: Task) -> Option<f64> {
        match task {
            Task::Scale => self.acc_scale,
            Task::Movement => self.acc_movement,
        }
    }

    /// Mean accuracy over the evaluated tasks.
    pub fn mean_accuracy(&self) -> f64 {
        let accs: Vec<f64> = [self.acc_scale, self.acc_movement].into_iter().flatten().collect();
        accs.iter().sum::<f64>() / accs.len().max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse { line: 0, message: e.to_string() })
    }

    /// Human-readable summary with confusion matrices.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split: {}  shots: {}", self.split, self.num_shots);
        for (task, acc, cm) in [
            (Task::Scale, self.acc_scale, &self.confusion_scale),
            (Task::Movement, self.acc_movement, &self.confusion_movement),
        ] {
            let (Some(acc), Some(cm)) = (acc, cm) else { continue };
            let _ = writeln!(s, "\n{task} top-1: {acc:.2}%");
            let _ = write!(s, "{:>10}", "true\\pred");
            for c in &cm.classes {
                let _ = write!(s, "{c:>8}");
            }
            let _ = writeln!(s);
            for (c, row) in cm.classes.iter().zip(&cm.counts) {
                let _ = write!(s, "{c:>10}");
                for v in row {
                    let _ = write!(s, "{v:>8}");
                }
                let _ = writeln!(s);
            }
        }
        let r = &self.runtime;
        let _ = writeln!(
            s,
            "\nparams: {}  generator params: {}  GFLOPs/shot: {:.4}  GFLOPs/clip: {:.4}  generator GFLOPs/frame: {:.5}",
            r.total_params, r.generator_params, r.gflops_per_shot, r.gflops_per_clip, r.generator_gflops_per_frame
        );
        s
    }
}

pub(crate) fn label_of(record: &ShotRecord, task: Task) -> Option<usize> {
    match task {
        Task::Scale => record.scale.map(|s| s.index()),
        Task::Movement => record.movement.map(|m| m.index()),
    }
}

/// Scores every shot of `split` with `predictor`.
pub fn evaluate_predictor(manifest: &Manifest, predictor: &dyn ShotPredictor, split: Split, config: Value) -> Result<EvalReport> {
    let records = manifest.split_view(split);
    if records.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let tasks = predictor.tasks();
    let mut cms: BTreeMap<Task, ConfusionMatrix> = tasks.iter().map(|&t| (t, ConfusionMatrix::new(t))).collect();
    for r in &records {
        let scores = predictor.predict(r)?;
        for (task, cm) in cms.iter_mut() {
            let truth = label_of(r, *task).ok_or_else(|| Error::Config(format!("shot {} lacks a {task} label", r.shot_id)))?;
            let s = scores.get(task).ok_or_else(|| Error::Config(format!("predictor gave no {task} score")))?;
            cm.add(truth, s.argmax());
        }
    }
    let cm_scale = cms.remove(&Task::Scale);
    let cm_movement = cms.remove(&Task::Movement);
    Ok(EvalReport {
        split,
        num_shots: records.len(),
        acc_scale: cm_scale.as_ref().map(ConfusionMatrix::accuracy),
        acc_movement: cm_movement.as_ref().map(ConfusionMatrix::accuracy),
        confusion_scale: cm_scale,
        confusion_movement: cm_movement,
        config,
        runtime: predictor.runtime(),
    })
}

/// Evaluates a network on one split of a manifest.
pub fn evaluate_model<T: Scalar>(
    manifest: &Manifest,
    net: &SgNet,
    store: &ParamStore<T>,
    media: &MediaStore,
    split: Split,
) -> Result<EvalReport> {
    let config = serde_json::json!({ "model": net.config, "task_mode": net.plan.mode });
    evaluate_predictor(manifest, &ModelPredictor { net, store, media }, split, config)
}

/// Loads nothing from disk beyond the manifest's media: `checkpoint` must be
/// compatible with `config`, whose inference-only settings (fusion weights,
/// evaluation clip count) take effect.
pub fn evaluate<T: Scalar>(
    manifest: &Manifest,
    checkpoint: &Checkpoint<T>,
    config: &ModelConfig,
    split: Split,
    flow: FlowBackend,
) -> Result<EvalReport> {
    checkpoint.check_compatible(config)?;
    let net = SgNet::new(config, &joint_training_wiring(checkpoint.task_mode))?;
    let media = MediaStore::for_manifest(manifest, config.preprocess(), flow)?;
    let mut report = evaluate_model(manifest, &net, &checkpoint.params, &media, split)?;
    if let Value::Object(map) = &mut report.config {
        map.insert("checkpoint".into(), checkpoint.meta.clone());
    }
    Ok(report)
}
