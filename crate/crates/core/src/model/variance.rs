//! Clip-pairwise cosine similarity of stage features and its classifier.

use rand::Rng;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::backbone::StageFeature;
use crate::model::heads::{Provenance, ScoreVector};
use crate::nn::graph::cosine_gram_forward;
use crate::nn::{Graph, Linear, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `M` stacked `N x N` similarity matrices, stage-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    pub stages: usize,
    pub n: usize,
    pub values: Vec<f64>,
    /// Number of all-zero stage features met while building the map.
    pub zero_norm_events: usize,
}

impl VarianceMap {
    pub fn get(&self, m: usize, i: usize, j: usize) -> f64 {
        self.values[(m * self.n + i) * self.n + j]
    }

    /// The `N x N` block of stage `m`.
    pub fn stage(&self, m: usize) -> &[f64] {
        &self.values[m * self.n * self.n..(m + 1) * self.n * self.n]
    }

    /// Mean of the off-diagonal entries over every stage.
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.n;
        let mut sum = 0.0;
        for m in 0..self.stages {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        sum += self.get(m, i, j);
                    }
                }
            }
        }
        sum / (self.stages * n * (n - 1)).max(1) as f64
    }

    /// `[1, M * N * N]`
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::lit(v)).collect();
        Tensor::from_vec(&[1, self.values.len()], data).expect("length matches")
    }
}

/// Cosine similarity between every pair of clips, per stage.
///
/// `clips[i][m]` is clip `i`'s feature at stage `m`. Each feature is flattened
/// and L2-normalized; a zero feature has similarity 0 to every other clip and
/// is counted in [`VarianceMap::zero_norm_events`].
pub fn variance_map<T: Scalar>(clips: &[Vec<StageFeature<T>>]) -> Result<VarianceMap> {
    let n = clips.len();
    if n < 2 {
        return Err(Error::Shape(format!("variance map needs at least 2 clips, got {n}")));
    }
    let stages = clips[0].len();
    if stages == 0 {
        return Err(Error::Shape("variance map needs at least one stage".into()));
    }
    let mut values = Vec::with_capacity(stages * n * n);
    let mut zero_norm_events = 0;
    for m in 0..stages {
        let shape = clips[0][m].tensor.shape().to_vec();
        let dim: usize = shape.iter().product();
        let mut rows = Vec::with_capacity(n * dim);
        for clip in clips {
            let f = clip.get(m).ok_or_else(|| Error::Shape(format!("clip is missing stage {}", m + 1)))?;
            if f.tensor.shape() != shape.as_slice() {
                return Err(Error::dims(&shape, f.tensor.shape()));
            }
            rows.extend(f.tensor.data().iter().map(|v| v.as_f64()));
        }
        let (gram, _, zeros) = cosine_gram_forward(&rows, n, dim, n);
        values.extend(gram);
        zero_norm_events += zeros;
    }
    Ok(VarianceMap { stages, n, values, zero_norm_events })
}

/// Differentiable variance map: each stage output `[S * n, ...]` becomes a
/// `[S, n * n]` similarity block; the blocks are concatenated to `[S, M * n * n]`.
pub fn variance_map_graph<T: Scalar>(g: &mut Graph<T>, stages: &[Var], n: usize) -> Result<Var> {
    let mut blocks = Vec::with_capacity(stages.len());
    for &s in stages {
        let flat = g.flatten(s)?;
        blocks.push(g.cosine_gram(flat, n)?);
    }
    g.concat(&blocks)
}

/// Two fully-connected layers over a flattened variance map.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceHead {
    pub task: Task,
    pub stages: usize,
    pub n: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VarianceHead {
    pub fn new(prefix: &str, task: Task, stages: usize, n: usize, hidden: usize) -> Self {
        Self {
            task,
            stages,
            n,
            fc1: Linear::new(format!("{prefix}.fc1"), stages * n * n, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, task.num_classes()),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }

    /// `[S, M * N * N] -> logits [S, classes]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, v: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, v)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Classifies one variance map.
pub fn variance_head<T: Scalar>(
    head: &VarianceHead,
    store: &ParamStore<T>,
    v: &VarianceMap,
    provenance: impl IntoIterator<Item = Provenance>,
) -> Result<ScoreVector> {
    if v.stages != head.stages || v.n != head.n {
        return Err(Error::dims((head.stages, head.n), (v.stages, v.n)));
    }
    let mut g = Graph::new();
    let x = g.input(v.to_tensor());
    let logits = head.forward(&mut g, store, x)?;
    ScoreVector::from_logits(head.task, g.value(logits).data(), provenance)
}
