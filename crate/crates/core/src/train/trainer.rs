//! Mini-batch training of the full network and distillation pretraining of the generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{Manifest, ShotRecord, Split, Task};
use crate::error::{Error, Result};
use crate::media::{FlowBackend, MediaStore};
use crate::model::{joint_training_wiring, Checkpoint, ModelConfig, Provenance, ScoreVector, SgNet, Stream, fuse_scores};
use crate::nn::optim::{accumulate, clip_grad_norm};
use crate::nn::{Adam, Graph, Optimizer, ParamStore, Sgd, Var};
use crate::scalar::Scalar;
use crate::subject::{discriminator_step, generator_kd_terms, kd_optimizer, kd_step, Discriminator, KdSettings, KdStats, StudentGenerator};
use crate::tensor::Tensor;
use crate::train::batch::{net_input, sample_shot, shot_seed, ShotSample, TeacherMaps};
use crate::train::config::{lr_at, GeneratorMode, TeacherConfig, TrainConfig};
use crate::train::eval::{evaluate_model, label_of};

/// Prefixes of a stand-alone distillation run.
pub const KD_GENERATOR_PREFIX: &str = "smg";
pub const KD_DISCRIMINATOR_PREFIX: &str = "disc";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-shot objective over the epoch.
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_var: f64,
    pub loss_kd: f64,
    pub loss_disc: f64,
    pub train_acc_scale: Option<f64>,
    pub train_acc_movement: Option<f64>,
    pub val_acc_scale: Option<f64>,
    pub val_acc_movement: Option<f64>,
}

impl EpochLog {
    pub fn train_acc(&self, task: Task) -> Option<f64> {
        match task {
            Task::Scale => self.train_acc_scale,
            Task::Movement => self.train_acc_movement,
        }
    }
}

/// Where outputs go and what to start from.
pub struct TrainOptions<'a, T> {
    /// Receives `train_log.jsonl`, `final.ckpt`, `best.ckpt` and, on a NaN abort, `nan_dump.json`.
    pub out_dir: Option<PathBuf>,
    pub flow: FlowBackend,
    /// Distillation-pretrained `smg.*` / `disc.*` parameters copied into every generator.
    pub generator_init: Option<&'a ParamStore<T>>,
}

impl<T> Default for TrainOptions<'_, T> {
    fn default() -> Self {
        Self { out_dir: None, flow: FlowBackend::default(), generator_init: None }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub final_checkpoint: Checkpoint<T>,
    /// Best on VAL; equal to the final checkpoint without a VAL split.
    pub best_checkpoint: Checkpoint<T>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Inverse-frequency class weights over the training records.
fn class_weights(records: &[&ShotRecord], task: Task) -> Vec<f64> {
    let k = task.num_classes();
    let mut counts = vec![0usize; k];
    for r in records {
        if let Some(l) = label_of(r, task) {
            counts[l] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| if c == 0 { 1.0 } else { n as f64 / (k * c) as f64 }).collect()
}

/// Copies `smg.*` and `disc.*` tensors into every generator and critic of `net`.
fn load_generator_init<T: Scalar>(net: &SgNet, store: &mut ParamStore<T>, init: &ParamStore<T>) -> Result<()> {
    let mut copied = 0;
    for (gp, disc) in &net.discriminators {
        for (name, t) in init.iter() {
            let target = if let Some(rest) = name.strip_prefix(&format!("{KD_GENERATOR_PREFIX}.")) {
                format!("{gp}.{rest}")
            } else if let Some(rest) = name.strip_prefix(&format!("{KD_DISCRIMINATOR_PREFIX}.")) {
                format!("{}.{rest}", disc.prefix)
            } else {
                continue;
            };
            match store.get(&target) {
                Some(cur) if cur.shape() == t.shape() => {
                    store.insert(target, t.clone());
                    copied += 1;
                }
                Some(cur) => return Err(Error::dims(cur.shape(), t.shape())),
                None => return Err(Error::Checkpoint(format!("no parameter {target} for pretrained {name}"))),
            }
        }
    }
    if copied == 0 && !net.generators.is_empty() {
        return Err(Error::Checkpoint("pretrained store has no generator parameters".into()));
    }
    Ok(())
}

fn scalar(g: &Graph<impl Scalar>, v: Var) -> f64 {
    g.value(v).data()[0].as_f64()
}

#[derive(Default)]
struct Running {
    shots: usize,
    total: f64,
    cls: f64,
    var: f64,
    kd: f64,
    disc: f64,
    disc_steps: usize,
}

/// Student maps of one micro-batch, kept for the critic update.
struct CriticBatch<T> {
    generator: String,
    frames: Tensor<T>,
    teacher: Tensor<T>,
    student: Tensor<T>,
}

struct Trainer<'a, T> {
    net: SgNet,
    cfg: &'a TrainConfig,
    media: MediaStore,
    teacher: TeacherMaps,
    weights: BTreeMap<Task, Vec<T>>,
    out_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<'_, T> {
    fn train_generator(&self, stream: Stream) -> bool {
        self.cfg.generator == GeneratorMode::Joint && stream == self.net.generator_stream() && !self.net.generators.is_empty()
    }

    fn dump_nan(&self, epoch: usize, step: usize, detail: &str, shots: &[&ShotRecord], store: &ParamStore<T>) -> Error {
        let bad: Vec<&String> = store.iter().filter(|(_, t)| t.data().iter().any(|v| !v.is_finite())).map(|(k, _)| k).collect();
        if let Some(dir) = &self.out_dir {
            let dump = json!({
                "epoch": epoch,
                "step": step,
                "detail": detail,
                "shots": shots.iter().map(|r| &r.shot_id).collect::<Vec<_>>(),
                "non_finite_params": bad,
                "lr": lr_at(self.cfg, epoch).ok(),
            });
            let _ = fs::write(dir.join("nan_dump.json"), serde_json::to_string_pretty(&dump).unwrap_or_default());
        }
        Error::NonFiniteLoss { epoch, step, detail: detail.to_string() }
    }

    /// Forward and backward over one micro-batch; returns gradients already
    /// scaled by `weight` into `acc` and the per-shot score parts.
    #[allow(clippy::too_many_arguments)]
    fn micro_step(
        &mut self,
        store: &ParamStore<T>,
        records: &[&ShotRecord],
        samples: &[ShotSample],
        weight: f64,
        acc: &mut BTreeMap<String, Tensor<T>>,
        critic: &mut Vec<CriticBatch<T>>,
        running: &mut Running,
        parts: &mut [Vec<(ScoreVector, f64)>],
        (epoch, step): (usize, usize),
    ) -> Result<()> {
        let input = net_input::<T>(samples, &self.net.config)?;
        let teacher = if self.cfg.generator == GeneratorMode::Joint && !self.net.generators.is_empty() {
            Some(self.teacher.batch::<T>(samples)?)
        } else {
            None
        };
        let fusion = self.net.config.fusion;
        let disc_prefixes: Vec<String> = self.net.discriminators.values().map(|d| format!("{}.", d.prefix)).collect();
        let streams = self.net.config.streams.clone();
        for stream in streams {
            let train_gen = self.train_generator(stream);
            let mut g = Graph::new();
            let out = self.net.forward_stream(&mut g, store, stream, &input, train_gen)?;
            let mut terms = Vec::new();
            let (mut cls, mut var, mut kd) = (0.0, 0.0, 0.0);
            let src = match stream {
                Stream::Rgb => Provenance::Rgb,
                Stream::Flow => Provenance::Flow,
            };
            let heads: Vec<(Task, Var, bool)> = out
                .cls_logits
                .iter()
                .map(|(&t, &v)| (t, v, false))
                .chain(out.var_logits.iter().map(|(&t, &v)| (t, v, true)))
                .collect();
            for (task, l, is_var) in heads {
                let labels: Vec<usize> = records
                    .iter()
                    .map(|r| label_of(r, task).ok_or_else(|| Error::Config(format!("shot {} lacks a {task} label", r.shot_id))))
                    .collect::<Result<_>>()?;
                let w = self.cfg.class_weighting.then(|| self.weights[&task].as_slice());
                let ce = g.softmax_cross_entropy(l, &labels, w)?;
                if is_var {
                    var += scalar(&g, ce);
                } else {
                    cls += scalar(&g, ce);
                }
                terms.push(ce);
                let c = task.num_classes();
                let (prov, fw) = match (is_var, stream) {
                    (true, _) => (vec![src, Provenance::Varmap], fusion.varmap),
                    (false, Stream::Rgb) => (vec![src], fusion.rgb),
                    (false, Stream::Flow) => (vec![src], fusion.flow),
                };
                for (s, row) in g.value(l).data().chunks(c).enumerate() {
                    parts[s].push((ScoreVector::from_logits(task, row, prov.iter().copied())?, fw));
                }
            }
            if train_gen {
                let teacher = teacher.as_ref().expect("joint generator training has teacher maps");
                let frames = out.frames.expect("forward sets frames");
                let t = g.input(teacher.clone());
                for (gp, &map) in &out.maps {
                    let disc = &self.net.discriminators[gp];
                    let (total, _, _) = generator_kd_terms(&mut g, store, disc, frames, map, t, self.cfg.kd.weights)?;
                    kd += scalar(&g, total);
                    terms.push(total);
                    critic.push(CriticBatch {
                        generator: gp.clone(),
                        frames: g.value(frames).clone(),
                        teacher: teacher.clone(),
                        student: g.value(map).clone(),
                    });
                }
            }
            let mut loss = *terms.first().ok_or_else(|| Error::Config("no loss terms".into()))?;
            for &t in &terms[1..] {
                loss = g.add(loss, t)?;
            }
            let value = scalar(&g, loss);
            if !value.is_finite() {
                let detail = format!("{stream} stream loss {value} (cls {cls}, var {var}, kd {kd})");
                return Err(self.dump_nan(epoch, step, &detail, records, store));
            }
            let n = records.len() as f64;
            running.total += value * n;
            running.cls += cls * n;
            running.var += var * n;
            running.kd += kd * n;
            let grads = g.backward(loss)?;
            let grads: BTreeMap<String, Tensor<T>> =
                g.param_grads(&grads).into_iter().filter(|(k, _)| !disc_prefixes.iter().any(|p| k.starts_with(p))).collect();
            accumulate(acc, grads, T::lit(weight));
        }
        Ok(())
    }
}

fn accuracy_of(parts: &[Vec<(ScoreVector, f64)>], records: &[&ShotRecord], task: Task) -> Result<Option<(usize, usize)>> {
    let mut correct = 0;
    for (p, r) in parts.iter().zip(records) {
        let mine: Vec<(ScoreVector, f64)> = p.iter().filter(|(s, _)| s.task == task).cloned().collect();
        if mine.is_empty() {
            return Ok(None);
        }
        if Some(fuse_scores(&mine)?.argmax()) == label_of(r, task) {
            correct += 1;
        }
    }
    Ok(Some((correct, records.len())))
}

fn write_log_line(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(entry).expect("log serializes")).map_err(|e| Error::io(path, e))
}

/// Reads a `train_log.jsonl` file.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

/// Trains the network described by `model` and `cfg.task_mode` on the TRAIN split.
pub fn train<T: Scalar>(manifest: &Manifest, model: &ModelConfig, cfg: &TrainConfig, opts: TrainOptions<'_, T>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let records = manifest.split_view(Split::Train);
    if records.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    let plan = joint_training_wiring(cfg.task_mode);
    let net = SgNet::new(model, &plan)?;
    let mut store = ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.init(&mut store, &mut rng);
    if let Some(init) = opts.generator_init {
        load_generator_init(&net, &mut store, init)?;
    }
    if cfg.generator == GeneratorMode::Frozen {
        for gp in net.generators.keys() {
            store.freeze_prefix(&format!("{gp}."));
        }
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("train_log.jsonl");
        if log.exists() {
            fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
    }
    let weights = net
        .tasks()
        .iter()
        .map(|&t| (t, class_weights(&records, t).into_iter().map(T::lit).collect()))
        .collect();
    let gen_prefixes: Vec<String> = net.generators.keys().map(|p| format!("{p}.")).collect();
    let val_records = manifest.count(Split::Val);
    let mut trainer = Trainer {
        media: MediaStore::for_manifest(manifest, model.preprocess(), opts.flow.clone())?,
        teacher: TeacherMaps::new(&cfg.teacher, manifest),
        net,
        cfg,
        weights,
        out_dir: opts.out_dir.clone(),
    };

    let mut sgd = Sgd::new(T::lit(cfg.momentum));
    let mut gen_opt: Adam<T> = kd_optimizer();
    let mut disc_opt: Adam<T> = kd_optimizer();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut best_task: BTreeMap<Task, (f64, usize)> = BTreeMap::new();
    let mut step = 0;
    let joint = plan.mode.is_joint() || plan.tasks.len() == 1;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch)?;
        let decay = lr / cfg.base_lr;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shot_seed(cfg.seed, epoch, usize::MAX)));
        let mut running = Running::default();
        let mut correct: BTreeMap<Task, (usize, usize)> = BTreeMap::new();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = BTreeMap::new();
            let mut critic = Vec::new();
            for micro in batch.chunks(cfg.micro_batch) {
                let recs: Vec<&ShotRecord> = micro.iter().map(|&i| records[i]).collect();
                let samples = micro
                    .iter()
                    .map(|&i| sample_shot(&trainer.media, records[i], model, true, shot_seed(cfg.seed, epoch, i)))
                    .collect::<Result<Vec<_>>>()?;
                let mut parts = vec![Vec::new(); micro.len()];
                let weight = micro.len() as f64 / batch.len() as f64;
                trainer.micro_step(&store, &recs, &samples, weight, &mut acc, &mut critic, &mut running, &mut parts, (epoch, step))?;
                for &task in trainer.net.tasks() {
                    if let Some((c, n)) = accuracy_of(&parts, &recs, task)? {
                        let e = correct.entry(task).or_default();
                        e.0 += c;
                        e.1 += n;
                    }
                }
                running.shots += micro.len();
            }
            let (gen_grads, mut cls_grads): (BTreeMap<_, _>, BTreeMap<_, _>) =
                acc.into_iter().partition(|(k, _)| gen_prefixes.iter().any(|p| k.starts_with(p)));
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut cls_grads, T::lit(c));
            }
            sgd.step(&mut store, &cls_grads, T::lit(lr));
            if !gen_grads.is_empty() {
                gen_opt.step(&mut store, &gen_grads, T::lit(cfg.kd.lr * decay));
            }
            for cb in &critic {
                let disc = &trainer.net.discriminators[&cb.generator];
                let d = discriminator_step(
                    disc,
                    &mut store,
                    &mut disc_opt,
                    &cb.frames,
                    &cb.teacher,
                    &cb.student,
                    T::lit(cfg.kd.disc_lr * decay),
                    T::lit(cfg.kd.disc_clip),
                )
                .map_err(|_| trainer.dump_nan(epoch, step, "discriminator loss", &[], &store))?;
                running.disc += d;
                running.disc_steps += 1;
            }
            step += 1;
        }

        let n = running.shots.max(1) as f64;
        let pct = |t: Task| correct.get(&t).map(|&(c, n)| 100.0 * c as f64 / n.max(1) as f64);
        let mut entry = EpochLog {
            epoch,
            lr,
            loss: running.total / n,
            loss_cls: running.cls / n,
            loss_var: running.var / n,
            loss_kd: running.kd / n,
            loss_disc: running.disc / running.disc_steps.max(1) as f64,
            train_acc_scale: pct(Task::Scale),
            train_acc_movement: pct(Task::Movement),
            val_acc_scale: None,
            val_acc_movement: None,
        };
        let last = epoch + 1 == cfg.epochs;
        if val_records > 0 && cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || last) {
            let report = evaluate_model(manifest, &trainer.net, &store, &trainer.media, Split::Val)?;
            entry.val_acc_scale = report.acc_scale;
            entry.val_acc_movement = report.acc_movement;
            if joint {
                let score = report.mean_accuracy();
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    best = Some((score, epoch, store.clone()));
                }
            } else {
                // Independent per-task models: each keeps its own best epoch.
                let snapshot = best.get_or_insert_with(|| (0.0, epoch, store.clone()));
                for &task in trainer.net.tasks() {
                    let acc = report.accuracy(task).unwrap_or(0.0);
                    if best_task.get(&task).is_none_or(|&(b, _)| acc > b) {
                        best_task.insert(task, (acc, epoch));
                        for name in trainer.net.task_param_names(task) {
                            if let Some(t) = store.get(&name) {
                                snapshot.2.insert(name, t.clone());
                            }
                        }
                    }
                }
                snapshot.1 = best_task.values().map(|&(_, e)| e).max().unwrap_or(epoch);
                snapshot.0 = best_task.values().map(|&(a, _)| a).sum::<f64>() / best_task.len().max(1) as f64;
            }
        }
        info!(
            "epoch {epoch} lr {lr:.2e} loss {:.4} train acc {:?}/{:?} val acc {:?}/{:?}",
            entry.loss, entry.train_acc_scale, entry.train_acc_movement, entry.val_acc_scale, entry.val_acc_movement
        );
        if let Some(dir) = &opts.out_dir {
            write_log_line(&dir.join("train_log.jsonl"), &entry)?;
        }
        log.push(entry);
    }

    let meta = |epoch: usize, kind: &str| {
        json!({
            "kind": kind,
            "epoch": epoch,
            "train": serde_json::to_value(cfg).unwrap_or_default(),
            "clamped_teacher_maps": trainer.teacher.clamped_count(),
        })
    };
    let last_epoch = cfg.epochs - 1;
    let mut final_checkpoint = Checkpoint::new(model.clone(), cfg.task_mode, store.clone());
    final_checkpoint.meta = meta(last_epoch, "final");
    let (best_epoch, best_store) = match best {
        Some((_, e, s)) => (e, s),
        None => (last_epoch, store),
    };
    let mut best_checkpoint = Checkpoint::new(model.clone(), cfg.task_mode, best_store);
    best_checkpoint.meta = meta(best_epoch, "best");
    if let Some(dir) = &opts.out_dir {
        final_checkpoint.save(dir.join("final.ckpt"))?;
        best_checkpoint.save(dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome { final_checkpoint, best_checkpoint, best_epoch, log })
}

/// Settings of a stand-alone distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames drawn per training shot and epoch.
    pub frames_per_shot: usize,
    pub seed: u64,
    pub kd: KdSettings,
    pub teacher: TeacherConfig,
}

impl Default for KdTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, frames_per_shot: 2, seed: 0, kd: KdSettings::default(), teacher: TeacherConfig::default() }
    }
}

/// Pretrains a student generator (`smg.*`) and its critic (`disc.*`) against
/// teacher maps of TRAIN frames. Returns the parameters and per-epoch mean stats.
pub fn kd_train<T: Scalar>(manifest: &Manifest, model: &ModelConfig, cfg: &KdTrainConfig, flow: FlowBackend) -> Result<(ParamStore<T>, Vec<KdStats>)> {
    cfg.kd.weights.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.frames_per_shot == 0 {
        return Err(Error::Config("epochs, batch_size and frames_per_shot must be positive".into()));
    }
    let records = manifest.split_view(Split::Train);
    if records.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    let media = MediaStore::for_manifest(manifest, model.preprocess(), flow)?;
    let mut teacher = TeacherMaps::new(&cfg.teacher, manifest);
    let gen = StudentGenerator::new(KD_GENERATOR_PREFIX);
    let disc = Discriminator::new(KD_DISCRIMINATOR_PREFIX);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    gen.init(&mut store, &mut rng);
    disc.init(&mut store, &mut rng);
    let mut opt: Adam<T> = kd_optimizer();
    let sampling = crate::media::SamplingConfig::new(cfg.frames_per_shot, crate::media::SamplingMode::TrainRandom);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shot_seed(cfg.seed, epoch, usize::MAX)));
        let mut mean = KdStats::default();
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let stacks = batch
                .iter()
                .map(|&i| media.build_clip_stack(records[i], &sampling, shot_seed(cfg.seed, epoch, i)))
                .collect::<Result<Vec<_>>>()?;
            let frames = Tensor::stack0(&stacks.iter().map(|s| s.rgb_tensor::<T>()).collect::<Result<Vec<_>>>()?)?;
            let mut maps = Vec::new();
            for s in &stacks {
                maps.extend(teacher.for_stack(s)?);
            }
            let targets = crate::media::frame::Planes::batch(maps.iter())?;
            let stats = kd_step(&gen, &disc, &mut store, &mut opt, &frames, &targets, &cfg.kd)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { epoch, step: batches, detail },
                    other => other,
                })?;
            mean.l2 += stats.l2;
            mean.gen_adv += stats.gen_adv;
            mean.disc += stats.disc;
            mean.total += stats.total;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let mean = KdStats { l2: mean.l2 / b, gen_adv: mean.gen_adv / b, disc: mean.disc / b, total: mean.total / b };
        info!("kd epoch {epoch}: l2 {:.5} adv {:.4} disc {:.4}", mean.l2, mean.gen_adv, mean.disc);
        history.push(mean);
    }
    Ok((store, history))
}
