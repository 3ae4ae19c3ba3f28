//! Residual backbones and the two-branch guided network.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::guidance::GuidanceMode;
use crate::nn::{Conv2d, Conv2dSpec, Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input modality of a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Rgb,
    Flow,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Flow => "flow",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Named backbone stages in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Res1,
    Pool1,
    Res2,
    Res3,
    Res4,
    Res5,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Res1, Stage::Pool1, Stage::Res2, Stage::Res3, Stage::Res4, Stage::Res5];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Res1 => "res1",
            Stage::Pool1 => "pool1",
            Stage::Res2 => "res2",
            Stage::Res3 => "res3",
            Stage::Res4 => "res4",
            Stage::Res5 => "res5",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stages after which the guidance branch is fused into the whole-image branch.
pub const FUSION_STAGES: [Stage; 4] = [Stage::Pool1, Stage::Res2, Stage::Res3, Stage::Res4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depth {
    /// 3x3 stem, one basic block per stage, channels `w, w, 2w, 4w, 8w`.
    Desk,
    /// 7x7 stride-2 stem and bottleneck stages `[3, 4, 6, 3]`.
    Resnet50,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: Depth,
    /// Stem width of the desk network; ignored by the 50-layer variant.
    pub width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { depth: Depth::Desk, width: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    Basic { c1: Conv2d, c2: Conv2d, short: Option<Conv2d> },
    Bottleneck { c1: Conv2d, c2: Conv2d, c3: Conv2d, short: Option<Conv2d> },
}

impl Block {
    fn convs(&self) -> Vec<&Conv2d> {
        match self {
            Block::Basic { c1, c2, short } => [Some(c1), Some(c2), short.as_ref()].into_iter().flatten().collect(),
            Block::Bottleneck { c1, c2, c3, short } => {
                [Some(c1), Some(c2), Some(c3), short.as_ref()].into_iter().flatten().collect()
            }
        }
    }

    /// The conv closing the residual path; zero-initialized so every block starts as the identity.
    fn last(&self) -> &Conv2d {
        match self {
            Block::Basic { c2, .. } => c2,
            Block::Bottleneck { c3, .. } => c3,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (res, short) = match self {
            Block::Basic { c1, c2, short } => {
                let h = c1.forward(g, store, x)?;
                let h = g.relu(h);
                (c2.forward(g, store, h)?, short)
            }
            Block::Bottleneck { c1, c2, c3, short } => {
                let h = c1.forward(g, store, x)?;
                let h = g.relu(h);
                let h = c2.forward(g, store, h)?;
                let h = g.relu(h);
                (c3.forward(g, store, h)?, short)
            }
        };
        let skip = match short {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        let y = g.add(res, skip)?;
        Ok(g.relu(y))
    }
}

/// One residual network. Parameter names are `<prefix(stage)>.<stage>.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    stem: Conv2d,
    pool: (usize, Conv2dSpec),
    stages: Vec<Vec<Block>>,
    channels: Vec<usize>,
}

impl Branch {
    /// `with_res5 = false` stops after res4 (the guidance branch has no use for res5).
    pub fn new(prefix: impl Fn(Stage) -> String, in_channels: usize, cfg: BackboneConfig, with_res5: bool) -> Self {
        let mut branch = Self::build(prefix, in_channels, cfg);
        if !with_res5 {
            branch.stages.truncate(3);
        }
        branch
    }

    fn build(prefix: impl Fn(Stage) -> String, in_channels: usize, cfg: BackboneConfig) -> Self {
        let name = |s: Stage| format!("{}.{}", prefix(s), s.as_str());
        let body = [Stage::Res2, Stage::Res3, Stage::Res4, Stage::Res5];
        match cfg.depth {
            Depth::Desk => {
                let w = cfg.width.max(1);
                let widths = [w, w, 2 * w, 4 * w, 8 * w];
                let stem = Conv2d::new(format!("{}.conv", name(Stage::Res1)), in_channels, w, 3, 1);
                let mut stages = Vec::new();
                for (k, &s) in body.iter().enumerate() {
                    let (cin, cout) = (widths[k], widths[k + 1]);
                    let stride = if k == 0 { 1 } else { 2 };
                    let p = format!("{}.b0", name(s));
                    let short = (stride != 1 || cin != cout).then(|| Conv2d::new(format!("{p}.short"), cin, cout, 1, stride));
                    stages.push(vec![Block::Basic {
                        c1: Conv2d::new(format!("{p}.conv1"), cin, cout, 3, stride),
                        c2: Conv2d::new(format!("{p}.conv2"), cout, cout, 3, 1),
                        short,
                    }]);
                }
                Self { stem, pool: (3, Conv2dSpec { stride: 2, pad: 1 }), stages, channels: widths.to_vec() }
            }
            Depth::Resnet50 => {
                let stem = Conv2d::new(format!("{}.conv", name(Stage::Res1)), in_channels, 64, 7, 2);
                let counts = [3, 4, 6, 3];
                let mids = [64, 128, 256, 512];
                let mut cin = 64;
                let mut stages = Vec::new();
                for (k, &s) in body.iter().enumerate() {
                    let (mid, cout) = (mids[k], 4 * mids[k]);
                    let mut blocks = Vec::new();
                    for b in 0..counts[k] {
                        let stride = if b == 0 && k > 0 { 2 } else { 1 };
                        let p = format!("{}.b{b}", name(s));
                        let short = (b == 0).then(|| Conv2d::new(format!("{p}.short"), cin, cout, 1, stride));
                        blocks.push(Block::Bottleneck {
                            c1: Conv2d::new(format!("{p}.conv1"), cin, mid, 1, 1),
                            c2: Conv2d::new(format!("{p}.conv2"), mid, mid, 3, stride),
                            c3: Conv2d::new(format!("{p}.conv3"), mid, cout, 1, 1),
                            short,
                        });
                        cin = cout;
                    }
                    stages.push(blocks);
                }
                let channels = vec![64, 256, 512, 1024, 2048];
                Self { stem, pool: (3, Conv2dSpec { stride: 2, pad: 1 }), stages, channels }
            }
        }
    }

    /// Output channels of `stage`.
    pub fn channels(&self, stage: Stage) -> usize {
        match stage {
            Stage::Res1 | Stage::Pool1 => self.channels[0],
            Stage::Res2 => self.channels[1],
            Stage::Res3 => self.channels[2],
            Stage::Res4 => self.channels[3],
            Stage::Res5 => self.channels[4],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels(Stage::Res5)
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        std::iter::once(&self.stem).chain(self.stages.iter().flatten().flat_map(Block::convs))
    }

    pub fn num_params(&self) -> usize {
        self.convs().map(Conv2d::num_params).sum()
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.stem.init(store, rng);
        for b in self.stages.iter().flatten() {
            let last = b.last().weight_name();
            let new_block = !store.contains(&last);
            for c in b.convs() {
                c.init(store, rng);
            }
            if new_block {
                if let Some(w) = store.get_mut(&last) {
                    w.data_mut().iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }

    /// Runs one stage. `Res1` is the stem conv with its ReLU, `Pool1` the max pool.
    pub fn stage<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, stage: Stage, x: Var) -> Result<Var> {
        match stage {
            Stage::Res1 => {
                let y = self.stem.forward(g, store, x)?;
                Ok(g.relu(y))
            }
            Stage::Pool1 => g.max_pool(x, self.pool.0, self.pool.1),
            s => {
                let k = s as usize - Stage::Res2 as usize;
                let mut y = x;
                for b in &self.stages[k] {
                    y = b.forward(g, store, y)?;
                }
                Ok(y)
            }
        }
    }
}

/// Output of a guided forward pass over `R` clips.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// Globally pooled whole-branch features, `[R, D]`.
    pub feature: Var,
    /// Whole-branch outputs after each fusion stage (post-fusion), `[R, c_m, h_m, w_m]`.
    pub stages: Vec<Var>,
}

/// Guidance branch plus whole-image branch with one-way lateral fusion.
///
/// After each stage in [`FUSION_STAGES`] the guidance output is concatenated
/// onto the whole-image output along channels and a 1x1 conv projects back to
/// the whole branch's width.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedBackbone {
    pub task: Task,
    pub stream: Stream,
    pub guidance: GuidanceMode,
    pub in_channels: usize,
    guide: Option<Branch>,
    whole: Branch,
    fuse: Vec<Conv2d>,
    bases: Vec<(Stage, String)>,
}

impl GuidedBackbone {
    /// `base(stage)` is the owner prefix of a stage's parameters; tasks that
    /// share a stage pass the same base for it.
    pub fn new(
        base: impl Fn(Stage) -> String,
        task: Task,
        stream: Stream,
        guidance: GuidanceMode,
        in_channels: usize,
        cfg: BackboneConfig,
    ) -> Self {
        let whole = Branch::new(|s| format!("{}.whole", base(s)), in_channels, cfg, true);
        let (guide, fuse) = if guidance == GuidanceMode::Off {
            (None, Vec::new())
        } else {
            let guide = Branch::new(|s| format!("{}.guide", base(s)), in_channels, cfg, false);
            let fuse = FUSION_STAGES
                .iter()
                .map(|&s| {
                    let c = whole.channels(s);
                    Conv2d::new(format!("{}.fuse.{}", base(s), s.as_str()), 2 * c, c, 1, 1)
                })
                .collect();
            (Some(guide), fuse)
        };
        let bases = Stage::ALL.iter().map(|&s| (s, base(s))).collect();
        Self { task, stream, guidance, in_channels, guide, whole, fuse, bases }
    }

    /// Owner prefix of each stage.
    pub fn stage_bases(&self) -> &[(Stage, String)] {
        &self.bases
    }

    pub fn feature_dim(&self) -> usize {
        self.whole.feature_dim()
    }

    pub fn stage_channels(&self, stage: Stage) -> usize {
        self.whole.channels(stage)
    }

    pub fn is_guided(&self) -> bool {
        self.guide.is_some()
    }

    pub fn num_params(&self) -> usize {
        self.whole.num_params()
            + self.guide.as_ref().map_or(0, Branch::num_params)
            + self.fuse.iter().map(Conv2d::num_params).sum::<usize>()
    }

    /// Parameter names owned by this backbone.
    pub fn param_names(&self) -> Vec<String> {
        let mut store = ParamStore::<f32>::new();
        self.init(&mut store, &mut rand::rng());
        store.names().map(str::to_string).collect()
    }

    /// He initialization; residual paths start at zero and each fusion conv
    /// starts as the identity on the whole branch plus a small random mix of
    /// the guidance features.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.whole.init(store, rng);
        if let Some(guide) = &self.guide {
            guide.init(store, rng);
        }
        for f in &self.fuse {
            let c = f.out_channels;
            let name = f.weight_name();
            if store.contains(&name) {
                continue;
            }
            let noise = Tensor::<T>::normal(&[c, c], 0.5 / (c as f64).sqrt(), rng);
            let mut w = Tensor::zeros(&[c, 2 * c, 1, 1]);
            for o in 0..c {
                w.data_mut()[o * 2 * c + o] = T::one();
                for i in 0..c {
                    w.data_mut()[o * 2 * c + c + i] = noise.data()[o * c + i];
                }
            }
            store.insert(name, w);
            store.insert(f.bias_name(), Tensor::zeros(&[c]));
        }
    }

    /// `guidance` and `whole` are `[R, C, H, W]`. `guidance` is ignored (and may
    /// be `None`) when the backbone is unguided.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        guidance: Option<Var>,
        whole: Var,
    ) -> Result<BackboneOutput> {
        let ws = g.shape(whole).to_vec();
        if ws.len() != 4 || ws[1] != self.in_channels {
            return Err(Error::dims(format!("[R, {}, H, W]", self.in_channels), &ws));
        }
        let mut gx = match (&self.guide, guidance) {
            (Some(_), Some(v)) => {
                if g.shape(v) != ws.as_slice() {
                    return Err(Error::dims(&ws, g.shape(v)));
                }
                Some(v)
            }
            (Some(_), None) => return Err(Error::Config("guided backbone needs a guidance input".into())),
            (None, _) => None,
        };
        let mut x = whole;
        let mut stages = Vec::with_capacity(FUSION_STAGES.len());
        let mut fuse = self.fuse.iter();
        for s in Stage::ALL {
            x = self.whole.stage(g, store, s, x)?;
            if let (Some(branch), Some(gv)) = (&self.guide, gx) {
                if s != Stage::Res5 {
                    let gy = branch.stage(g, store, s, gv)?;
                    gx = Some(gy);
                    if FUSION_STAGES.contains(&s) {
                        let cat = g.concat(&[x, gy])?;
                        x = fuse.next().expect("one fusion conv per stage").forward(g, store, cat)?;
                    }
                }
            }
            if FUSION_STAGES.contains(&s) {
                stages.push(x);
            }
        }
        let feature = g.global_avg_pool(x)?;
        Ok(BackboneOutput { feature, stages })
    }
}

/// Output of one fusion stage for one clip: `[c_m, h_m, w_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeature<T> {
    /// 1-based stage index `m`.
    pub stage: usize,
    pub tensor: Tensor<T>,
}

/// Clip features and per-clip stage features.
pub type GuidedOutput<T> = (Tensor<T>, Vec<Vec<StageFeature<T>>>);

/// Guided forward pass with fixed parameters.
///
/// `guidance` and `whole` are `[N, C, H, W]` for `N` clips. Returns the clip
/// features `[N, D]` and, per clip, the whole-branch features after each fusion stage.
pub fn guided_forward<T: Scalar>(
    bb: &GuidedBackbone,
    store: &ParamStore<T>,
    guidance: &Tensor<T>,
    whole: &Tensor<T>,
) -> Result<GuidedOutput<T>> {
    let mut g = Graph::new();
    let gv = g.input(guidance.clone());
    let wv = g.input(whole.clone());
    let out = bb.forward(&mut g, store, Some(gv), wv)?;
    let n = whole.dim(0);
    let mut per_clip: Vec<Vec<StageFeature<T>>> = (0..n).map(|_| Vec::new()).collect();
    for (m, &s) in out.stages.iter().enumerate() {
        let t = g.value(s);
        let inner = t.shape()[1..].to_vec();
        for (i, clip) in per_clip.iter_mut().enumerate() {
            let data = t.narrow0(i, i + 1).into_data();
            clip.push(StageFeature { stage: m + 1, tensor: Tensor::from_vec(&inner, data)? });
        }
    }
    Ok((g.value(out.feature).clone(), per_clip))
}
