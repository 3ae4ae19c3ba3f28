//! Clip pooling, classification heads and score fusion.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::{softmax, Graph, Linear, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A source contributing to a [`ScoreVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Rgb,
    Flow,
    Varmap,
}

/// Class probabilities for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub task: Task,
    pub probs: Vec<f64>,
    pub provenance: BTreeSet<Provenance>,
}

impl ScoreVector {
    /// Checks the class count, non-negativity and that the probabilities sum to 1 within 1e-6.
    pub fn new(task: Task, probs: Vec<f64>, provenance: impl IntoIterator<Item = Provenance>) -> Result<Self> {
        if probs.len() != task.num_classes() {
            return Err(Error::dims(task.num_classes(), probs.len()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Shape(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self { task, probs, provenance: provenance.into_iter().collect() })
    }

    /// Softmax of `logits`, computed in `f64`.
    pub fn from_logits<T: Scalar>(task: Task, logits: &[T], provenance: impl IntoIterator<Item = Provenance>) -> Result<Self> {
        let l: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        Self::new(task, softmax(&l), provenance)
    }

    /// Index of the most probable class; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn label(&self) -> &'static str {
        self.task.class_name(self.argmax())
    }
}

/// Weighted arithmetic mean of probability vectors, renormalized. The
/// provenance of the result is the union of the parts'.
pub fn fuse_scores(parts: &[(ScoreVector, f64)]) -> Result<ScoreVector> {
    let (first, _) = parts.first().ok_or_else(|| Error::TaskMismatch("nothing to fuse".into()))?;
    let k = first.probs.len();
    let mut acc = vec![0.0; k];
    let mut provenance = BTreeSet::new();
    for (s, w) in parts {
        if s.task != first.task || s.probs.len() != k {
            return Err(Error::TaskMismatch(format!("{} ({} classes) vs {} ({k} classes)", s.task, s.probs.len(), first.task)));
        }
        if !(w.is_finite() && *w > 0.0) {
            return Err(Error::Config(format!("fusion weight must be positive and finite, got {w}")));
        }
        acc.iter_mut().zip(&s.probs).for_each(|(a, p)| *a += w * p);
        provenance.extend(s.provenance.iter().copied());
    }
    let total: f64 = acc.iter().sum();
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(ScoreVector { task: first.task, probs: acc, provenance })
}

/// Average pooling over clips followed by one fully-connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub task: Task,
    pub fc: Linear,
}

impl ClassifierHead {
    pub fn new(name: impl Into<String>, task: Task, in_features: usize) -> Self {
        Self { task, fc: Linear::new(name, in_features, task.num_classes()) }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc.init(store, rng);
    }

    pub fn num_params(&self) -> usize {
        self.fc.num_params()
    }

    /// `features [S * n_clips, D] -> logits [S, classes]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var, n_clips: usize) -> Result<Var> {
        let pooled = g.group_mean(features, n_clips)?;
        self.fc.forward(g, store, pooled)
    }
}

/// Mean of the clip features `[N, D]`, the head's FC layer, then softmax.
pub fn pool_and_classify<T: Scalar>(
    head: &ClassifierHead,
    store: &ParamStore<T>,
    clip_features: &Tensor<T>,
    provenance: impl IntoIterator<Item = Provenance>,
) -> Result<ScoreVector> {
    let n = clip_features.dim(0);
    if n == 0 {
        return Err(Error::Shape("pooling needs at least one clip feature".into()));
    }
    let mut g = Graph::new();
    let x = g.input(clip_features.clone());
    let logits = head.forward(&mut g, store, x, n)?;
    ScoreVector::from_logits(head.task, g.value(logits).data(), provenance)
}
