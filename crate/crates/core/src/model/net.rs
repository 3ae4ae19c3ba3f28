//! The assembled network: generators, guided backbones and heads for every
//! stream and task in a [`SharingPlan`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::media::ClipStack;
use crate::model::backbone::{GuidedBackbone, Stage, Stream, FUSION_STAGES};
use crate::model::config::{ModelConfig, SharingPlan};
use crate::model::guidance::GuidanceMode;
use crate::model::heads::{fuse_scores, ClassifierHead, Provenance, ScoreVector};
use crate::model::variance::{variance_map_graph, VarianceHead, VarianceMap};
use crate::nn::{Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::subject::{Discriminator, StudentGenerator};
use crate::tensor::Tensor;

/// Backbone and heads of one task on one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskNet {
    pub task: Task,
    pub stream: Stream,
    pub backbone: GuidedBackbone,
    pub head: ClassifierHead,
    pub var_head: Option<VarianceHead>,
    pub generator: String,
}

/// Sampled content of `S` shots for one pass (classification or variance map).
#[derive(Debug, Clone)]
pub struct PassInput<T> {
    pub shots: usize,
    pub n_clips: usize,
    /// Anchor frames `[S * n, 3, H, W]`; the RGB stream input and the generator input.
    pub rgb: Tensor<T>,
    /// Stacked flow `[S * n, 2F, H, W]` when the flow stream is active.
    pub flow: Option<Tensor<T>>,
}

impl<T: Scalar> PassInput<T> {
    /// Concatenates the stacks' clips shot-major. Every stack must have the same clip count.
    pub fn from_stacks(stacks: &[&ClipStack], with_flow: bool) -> Result<Self> {
        let first = stacks.first().ok_or_else(|| Error::Shape("no clip stacks".into()))?;
        let n_clips = first.n_clips;
        if let Some(s) = stacks.iter().find(|s| s.n_clips != n_clips || s.frames_per_clip_rgb() != 1) {
            return Err(Error::Shape(format!("stack {} has {} clips x {} frames, expected {n_clips} x 1", s.shot_id, s.n_clips, s.frames_per_clip_rgb())));
        }
        let rgb = Tensor::stack0(&stacks.iter().map(|s| s.rgb_tensor()).collect::<Result<Vec<_>>>()?)?;
        let flow = if with_flow {
            Some(Tensor::stack0(&stacks.iter().map(|s| s.flow_tensor()).collect::<Result<Vec<_>>>()?)?)
        } else {
            None
        };
        Ok(Self { shots: stacks.len(), n_clips, rgb, flow })
    }

    /// All-zero input of `shots` shots.
    pub fn zeros(config: &ModelConfig, shots: usize, n_clips: usize) -> Self {
        let s = config.input_size;
        let rows = shots * n_clips;
        Self {
            shots,
            n_clips,
            rgb: Tensor::zeros(&[rows, 3, s, s]),
            flow: config.uses_flow().then(|| Tensor::zeros(&[rows, config.in_channels(Stream::Flow), s, s])),
        }
    }
}

/// Classification pass plus the optional variance-map pass.
#[derive(Debug, Clone)]
pub struct NetInput<T> {
    pub cls: PassInput<T>,
    pub var: Option<PassInput<T>>,
}

/// Graph nodes produced by [`SgNet::forward_stream`].
#[derive(Debug, Clone, Default)]
pub struct StreamOutputs {
    /// `[S, classes]` per task.
    pub cls_logits: BTreeMap<Task, Var>,
    pub var_logits: BTreeMap<Task, Var>,
    /// Classification-pass subject maps `[S * n, 1, H, W]` by generator prefix.
    pub maps: BTreeMap<String, Var>,
    /// Frames fed to the generators, `[S * n, 3, H, W]`.
    pub frames: Option<Var>,
}

/// Fused per-task scores of one shot, with the unfused parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fused: BTreeMap<Task, ScoreVector>,
    pub parts: Vec<ScoreVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgNet {
    pub config: ModelConfig,
    pub plan: SharingPlan,
    pub generators: BTreeMap<String, StudentGenerator>,
    pub discriminators: BTreeMap<String, Discriminator>,
    pub nets: Vec<TaskNet>,
}

impl SgNet {
    pub fn new(config: &ModelConfig, plan: &SharingPlan) -> Result<Self> {
        config.validate()?;
        let mut generators = BTreeMap::new();
        let mut discriminators = BTreeMap::new();
        let mut nets = Vec::new();
        for &task in &plan.tasks {
            let gp = plan.generator_prefix(task);
            let guidance = config.guidance.for_task(task);
            if guidance != GuidanceMode::Off {
                generators.entry(gp.clone()).or_insert_with(|| StudentGenerator::new(gp.clone()));
                let dp = plan.discriminator_prefix(task);
                discriminators.entry(gp.clone()).or_insert_with(|| Discriminator::new(dp));
            }
        }
        for &stream in &config.streams {
            for &task in &plan.tasks {
                let backbone = GuidedBackbone::new(
                    |s| plan.stage_base(stream, task, s),
                    task,
                    stream,
                    config.guidance.for_task(task),
                    config.in_channels(stream),
                    config.backbone,
                );
                let head = ClassifierHead::new(format!("{stream}.{task}.fc"), task, backbone.feature_dim());
                let var_head = (task == Task::Movement && config.variance_map).then(|| {
                    VarianceHead::new(
                        &format!("{stream}.{task}.var"),
                        task,
                        FUSION_STAGES.len(),
                        config.n_clips_var,
                        config.var_hidden,
                    )
                });
                nets.push(TaskNet { task, stream, backbone, head, var_head, generator: plan.generator_prefix(task) });
            }
        }
        Ok(Self { config: config.clone(), plan: plan.clone(), generators, discriminators, nets })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for g in self.generators.values() {
            g.init(store, rng);
        }
        for d in self.discriminators.values() {
            d.init(store, rng);
        }
        for n in &self.nets {
            n.backbone.init(store, rng);
            n.head.init(store, rng);
            if let Some(v) = &n.var_head {
                v.init(store, rng);
            }
        }
    }

    /// `<stream>.<task>.<stage>` to the owner prefix of that stage's parameters.
    pub fn stage_map(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for n in &self.nets {
            for (s, base) in n.backbone.stage_bases() {
                out.insert(format!("{}.{}.{}", n.stream, n.task, s), base.clone());
            }
        }
        out
    }

    /// Parameter names read by one task's graphs across all streams.
    pub fn task_param_names(&self, task: Task) -> BTreeSet<String> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rand::rng();
        for n in self.nets.iter().filter(|n| n.task == task) {
            if n.backbone.is_guided() {
                self.generators[&n.generator].init(&mut store, &mut rng);
            }
            n.backbone.init(&mut store, &mut rng);
            n.head.init(&mut store, &mut rng);
            if let Some(v) = &n.var_head {
                v.init(&mut store, &mut rng);
            }
        }
        store.names().map(str::to_string).collect()
    }

    /// Scalar count of the parameters both tasks read.
    pub fn shared_param_count(&self) -> usize {
        let a = self.task_param_names(Task::Scale);
        let b = self.task_param_names(Task::Movement);
        let mut store = ParamStore::<f32>::new();
        self.init(&mut store, &mut rand::rng());
        a.intersection(&b).map(|n| store.get(n).map_or(0, Tensor::numel)).sum()
    }

    pub fn generator_params(&self) -> usize {
        self.generators.values().map(StudentGenerator::num_params).sum()
    }

    /// The stream whose training pass also trains the generators.
    pub fn generator_stream(&self) -> Stream {
        self.config.streams[0]
    }

    pub fn tasks(&self) -> &[Task] {
        &self.plan.tasks
    }

    pub fn task_net(&self, stream: Stream, task: Task) -> Option<&TaskNet> {
        self.nets.iter().find(|n| n.stream == stream && n.task == task)
    }

    /// Subject maps for every generator a guided task on this stream needs.
    fn maps<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stream: Stream,
        frames: Var,
        trainable: bool,
    ) -> Result<BTreeMap<String, Var>> {
        let mut maps = BTreeMap::new();
        for n in self.nets.iter().filter(|n| n.stream == stream && n.backbone.is_guided()) {
            if !maps.contains_key(&n.generator) {
                let m = self.generators[&n.generator].forward(g, store, frames)?;
                let m = if trainable { m } else { g.detach(m) };
                maps.insert(n.generator.clone(), m);
            }
        }
        Ok(maps)
    }

    fn pass<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stream: Stream,
        input: &PassInput<T>,
        trainable_maps: bool,
    ) -> Result<(Var, Var, BTreeMap<String, Var>)> {
        let frames = g.input(input.rgb.clone());
        let x = match stream {
            // Zero-centred pixels; the generator centres its own copy.
            Stream::Rgb => g.input(input.rgb.map(|v| v - T::lit(0.5))),
            Stream::Flow => g.input(
                input.flow.clone().ok_or_else(|| Error::Config("flow stream needs flow input".into()))?,
            ),
        };
        let maps = self.maps(g, store, stream, frames, trainable_maps)?;
        Ok((frames, x, maps))
    }

    fn guided<T: Scalar>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        net: &TaskNet,
        x: Var,
        maps: &BTreeMap<String, Var>,
    ) -> Result<crate::model::backbone::BackboneOutput> {
        let guide = match net.backbone.guidance {
            GuidanceMode::Off => None,
            GuidanceMode::Subject => Some(g.mul_mask(x, maps[&net.generator])?),
            GuidanceMode::Background => {
                let inv = g.one_minus(maps[&net.generator]);
                Some(g.mul_mask(x, inv)?)
            }
        };
        net.backbone.forward(g, store, guide, x)
    }

    /// Builds every task's logits for one stream.
    ///
    /// With `train_generator` the classification-pass maps stay attached to
    /// the generator parameters; otherwise they are detached.
    pub fn forward_stream<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stream: Stream,
        input: &NetInput<T>,
        train_generator: bool,
    ) -> Result<StreamOutputs> {
        let mut out = StreamOutputs::default();
        let (frames, x, maps) = self.pass(g, store, stream, &input.cls, train_generator)?;
        out.frames = Some(frames);
        for net in self.nets.iter().filter(|n| n.stream == stream) {
            let bo = Self::guided(g, store, net, x, &maps)?;
            out.cls_logits.insert(net.task, net.head.forward(g, store, bo.feature, input.cls.n_clips)?);
        }
        out.maps = maps;
        let var_nets: Vec<&TaskNet> = self.nets.iter().filter(|n| n.stream == stream && n.var_head.is_some()).collect();
        if !var_nets.is_empty() {
            let vin = input.var.as_ref().ok_or_else(|| Error::Config("variance map needs a variance pass".into()))?;
            if vin.n_clips != self.config.n_clips_var {
                return Err(Error::dims(self.config.n_clips_var, vin.n_clips));
            }
            let (_, vx, vmaps) = self.pass(g, store, stream, vin, train_generator)?;
            for net in var_nets {
                let bo = Self::guided(g, store, net, vx, &vmaps)?;
                let v = variance_map_graph(g, &bo.stages, vin.n_clips)?;
                let head = net.var_head.as_ref().expect("filtered");
                out.var_logits.insert(net.task, head.forward(g, store, v)?);
            }
        }
        Ok(out)
    }

    /// Variance maps of `task`'s network on `stream`, one per shot of the variance pass.
    pub fn variance_maps<T: Scalar>(&self, store: &ParamStore<T>, stream: Stream, task: Task, input: &NetInput<T>) -> Result<Vec<VarianceMap>> {
        let net = self
            .task_net(stream, task)
            .filter(|n| n.var_head.is_some())
            .ok_or_else(|| Error::Config(format!("no {task} variance map on the {stream:?} stream")))?;
        let vin = input.var.as_ref().ok_or_else(|| Error::Config("variance map needs a variance pass".into()))?;
        let mut g = Graph::new();
        let (_, vx, vmaps) = self.pass(&mut g, store, stream, vin, false)?;
        let bo = Self::guided(&mut g, store, net, vx, &vmaps)?;
        let v = variance_map_graph(&mut g, &bo.stages, vin.n_clips)?;
        let events = g.zero_norm_events();
        let stages = bo.stages.len();
        Ok(g.value(v)
            .data()
            .chunks(stages * vin.n_clips * vin.n_clips)
            .map(|row| VarianceMap {
                stages,
                n: vin.n_clips,
                values: row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                zero_norm_events: events,
            })
            .collect())
    }

    /// Fused scores for every shot in `input`.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, input: &NetInput<T>) -> Result<Vec<Prediction>> {
        let shots = input.cls.shots;
        let mut parts: Vec<Vec<(ScoreVector, f64)>> = vec![Vec::new(); shots];
        let w = self.config.fusion;
        for &stream in &self.config.streams {
            let mut g = Graph::new();
            let out = self.forward_stream(&mut g, store, stream, input, false)?;
            let (src, weight) = match stream {
                Stream::Rgb => (Provenance::Rgb, w.rgb),
                Stream::Flow => (Provenance::Flow, w.flow),
            };
            for (&task, &l) in &out.cls_logits {
                let c = task.num_classes();
                for (s, row) in g.value(l).data().chunks(c).enumerate() {
                    parts[s].push((ScoreVector::from_logits(task, row, [src])?, weight));
                }
            }
            for (&task, &l) in &out.var_logits {
                let c = task.num_classes();
                for (s, row) in g.value(l).data().chunks(c).enumerate() {
                    parts[s].push((ScoreVector::from_logits(task, row, [src, Provenance::Varmap])?, w.varmap));
                }
            }
        }
        parts
            .into_iter()
            .map(|p| {
                let mut fused = BTreeMap::new();
                for &task in self.tasks() {
                    let mine: Vec<(ScoreVector, f64)> = p.iter().filter(|(s, _)| s.task == task).cloned().collect();
                    fused.insert(task, fuse_scores(&mine)?);
                }
                Ok(Prediction { fused, parts: p.into_iter().map(|(s, _)| s).collect() })
            })
            .collect()
    }

    /// Floating-point operations of one evaluation forward pass over a single
    /// shot (every stream, generator included), and per classification clip.
    pub fn flops(&self) -> Result<(u64, u64)> {
        let store = {
            let mut s = ParamStore::<f32>::new();
            self.init(&mut s, &mut rand::rng());
            s
        };
        let count = |n_cls: usize, with_var: bool| -> Result<u64> {
            let input = NetInput {
                cls: PassInput::zeros(&self.config, 1, n_cls),
                var: (with_var && self.config.variance_map)
                    .then(|| PassInput::zeros(&self.config, 1, self.config.n_clips_var)),
            };
            let mut total = 0;
            for &stream in &self.config.streams {
                let mut g = Graph::new();
                if with_var || self.nets.iter().all(|n| n.var_head.is_none()) {
                    self.forward_stream(&mut g, &store, stream, &input, false)?;
                } else {
                    let (_, x, maps) = self.pass(&mut g, &store, stream, &input.cls, false)?;
                    for net in self.nets.iter().filter(|n| n.stream == stream) {
                        let bo = Self::guided(&mut g, &store, net, x, &maps)?;
                        net.head.forward(&mut g, &store, bo.feature, n_cls)?;
                    }
                }
                total += g.flops();
            }
            Ok(total)
        };
        Ok((count(self.config.n_clips_eval, true)?, count(1, false)?))
    }

    /// Backbone stage names in forward order.
    pub fn stage_names() -> Vec<&'static str> {
        Stage::ALL.iter().map(|s| s.as_str()).collect()
    }
}
