//! Argument parsing and command dispatch.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sgnet::data::{Manifest, ScaleType, Split};
use sgnet::fixtures::{generate_dataset, DatasetSpec};
use sgnet::media::{open_media, FrameSource, MediaStore};
use sgnet::model::{joint_training_wiring, SgNet};
use sgnet::train::{evaluate, kd_train, predict_shot, train, TeacherConfig, TrainOptions};
use sgnet::{Error, ModelCheckpoint, Params, Real};

use crate::config::CliConfig;
use crate::edit::{default_anchor, parse_segments, propose_crops, rank_candidates, render_edit, score_crops, sidecar_path, EditPlan, EditSegment, Rect};

#[derive(Debug, Parser)]
#[command(name = "sgnet", version, about = "Shot scale and camera movement classification")]
pub struct Cli {
    /// TOML file with optional [model], [train], [kd], [edit] and [flow] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labeled synthetic dataset.
    Fixtures(FixturesArgs),
    /// Pretrain the student subject-map generator against teacher maps.
    KdTrain(KdArgs),
    /// Train the classifiers on the TRAIN split.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Emit per-shot labels and probabilities as JSON lines.
    Predict(PredictArgs),
    /// Re-frame a shot to a target scale.
    Edit(EditArgs),
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 28)]
    pub train: usize,
    #[arg(long, default_value_t = 4)]
    pub val: usize,
    #[arg(long, default_value_t = 8)]
    pub test: usize,
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub distractors: usize,
}

#[derive(Debug, Args)]
pub struct KdFlags {
    #[arg(long)]
    pub kd_alpha: Option<f64>,
    #[arg(long)]
    pub kd_beta: Option<f64>,
    /// Teacher-map directory, or `oracle` for the built-in saliency heuristic.
    #[arg(long)]
    pub teacher: Option<String>,
}

#[derive(Debug, Args)]
pub struct KdArgs {
    /// Output file for the pretrained generator and critic.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub kd: KdFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output of `kd-train` to start the generators from.
    #[arg(long)]
    pub generator_init: Option<PathBuf>,
    #[command(flatten)]
    pub kd: KdFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Writes the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Restricts prediction to one split; every shot by default.
    #[arg(long)]
    pub split: Option<Split>,
    /// Writes the records here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub shot: String,
    #[arg(long)]
    pub target: ScaleType,
    /// Frame ranges `a:b,c:d` to re-frame; the whole shot by default.
    #[arg(long, value_parser = parse_segments)]
    pub segments: Option<Segments>,
    /// Output `.srv` file; the plan is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// `x,y,w,h` region every proposal must contain; the student subject-map centroid by default.
    #[arg(long)]
    pub anchor: Option<Rect>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_clips: Option<usize>,
}

/// Parsed `--segments` value.
pub type Segments = Vec<(u64, u64)>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    NoCandidates(String),
}

impl CliError {
    /// 0 success, 1 usage, 2 data, 3 model, 4 no candidates.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::NoCandidates(_) => 4,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::EpochOutOfRange { .. } | Error::AnchorOutOfBounds(_) | Error::InvalidPlan(_) => 1,
                Error::Io { .. }
                | Error::Parse { .. }
                | Error::DuplicateShotId { .. }
                | Error::InvalidFrameSpan { .. }
                | Error::UnknownLabel(_)
                | Error::MediaUnreadable { .. }
                | Error::IndexOutOfRange { .. }
                | Error::MissingMap { .. }
                | Error::EmptySplit(_) => 2,
                _ => 3,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<CliConfig> {
    let mut c = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed {
        c.reseed(seed);
    }
    Ok(c)
}

fn manifest(cli: &Cli) -> CliResult<Manifest> {
    let path = cli.manifest.as_ref().ok_or_else(|| CliError::Usage("--manifest is required".into()))?;
    Ok(Manifest::parse_file(path)?)
}

fn checkpoint(cli: &Cli) -> CliResult<ModelCheckpoint> {
    let path = cli.checkpoint.as_ref().ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    Ok(ModelCheckpoint::load(path)?)
}

fn teacher(flag: &str) -> TeacherConfig {
    if flag.eq_ignore_ascii_case("oracle") {
        TeacherConfig::Oracle
    } else {
        TeacherConfig::Files { dir: flag.into() }
    }
}

fn apply_kd_flags(flags: &KdFlags, settings: &mut sgnet::subject::KdSettings, teacher_cfg: &mut TeacherConfig) -> CliResult<()> {
    if let Some(a) = flags.kd_alpha {
        settings.weights.alpha = a;
    }
    if let Some(b) = flags.kd_beta {
        settings.weights.beta = b;
    }
    if let Some(t) = &flags.teacher {
        *teacher_cfg = teacher(t);
    }
    settings.weights.validate()?;
    Ok(())
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> CliResult<()> {
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::Fixtures(a) => {
            let spec = DatasetSpec {
                train: a.train,
                val: a.val,
                test: a.test,
                width: a.width,
                height: a.height,
                frames: a.frames,
                distractors: a.distractors,
                seed: cli.seed.unwrap_or(0),
            };
            let ds = generate_dataset(&a.out, &spec)?;
            println!("{}", ds.manifest_path.display());
        }
        Command::KdTrain(a) => {
            let manifest = manifest(cli)?;
            let kd = &mut config.kd;
            apply_kd_flags(&a.kd, &mut kd.kd, &mut kd.teacher)?;
            if let Some(e) = a.epochs {
                kd.epochs = e;
            }
            let (params, stats) = kd_train::<Real>(&manifest, &config.model, &config.kd, config.flow.clone())?;
            for (epoch, s) in stats.iter().enumerate() {
                log::info!("epoch {epoch}: l2 {:.5} adv {:.5} disc {:.5} total {:.5}", s.l2, s.gen_adv, s.disc, s.total);
            }
            let mut ckpt = ModelCheckpoint::new(config.model.clone(), config.train.task_mode, params);
            ckpt.meta = json!({ "kind": "kd", "kd": config.kd, "stats": stats.iter().map(|s| json!({"l2": s.l2, "adv": s.gen_adv, "disc": s.disc, "total": s.total})).collect::<Vec<_>>() });
            create_parent(&a.out)?;
            ckpt.save(&a.out)?;
            println!("{}", a.out.display());
        }
        Command::Train(a) => {
            let manifest = manifest(cli)?;
            let t = &mut config.train;
            apply_kd_flags(&a.kd, &mut t.kd, &mut t.teacher)?;
            if let Some(e) = a.epochs {
                t.epochs = e;
                t.lr_decay_epochs.retain(|&d| d < e);
            }
            t.validate()?;
            let init: Option<Params> = match &a.generator_init {
                Some(p) => Some(ModelCheckpoint::load(p)?.params),
                None => None,
            };
            let opts = TrainOptions { out_dir: Some(a.out.clone()), flow: config.flow.clone(), generator_init: init.as_ref() };
            let out = train::<Real>(&manifest, &config.model, &config.train, opts)?;
            for e in &out.log {
                log::info!(
                    "epoch {} lr {:.2e} loss {:.4} train acc {:?}/{:?} val acc {:?}/{:?}",
                    e.epoch, e.lr, e.loss, e.train_acc_scale, e.train_acc_movement, e.val_acc_scale, e.val_acc_movement
                );
            }
            println!("{}", a.out.join("final.ckpt").display());
        }
        Command::Eval(a) => {
            let manifest = manifest(cli)?;
            let ckpt = checkpoint(cli)?;
            let model = if config.has_model { config.model.clone() } else { ckpt.model.clone() };
            let report = evaluate(&manifest, &ckpt, &model, a.split, config.flow.clone())?;
            print!("{}", report.to_table());
            if let Some(out) = &a.out {
                create_parent(out)?;
                fs::write(out, report.to_json()).map_err(|e| Error::io(out, e))?;
            }
        }
        Command::Predict(a) => {
            let manifest = manifest(cli)?;
            let ckpt = checkpoint(cli)?;
            let model = if config.has_model { config.model.clone() } else { ckpt.model.clone() };
            ckpt.check_compatible(&model)?;
            let net = SgNet::new(&model, &joint_training_wiring(ckpt.task_mode))?;
            let media = MediaStore::for_manifest(&manifest, model.preprocess(), config.flow.clone())?;
            let mut lines = String::new();
            for r in manifest.records().iter().filter(|r| a.split.is_none_or(|s| r.split == s)) {
                let p = predict_shot(&net, &ckpt.params, &media, r)?;
                let mut rec = json!({ "shot_id": r.shot_id });
                for (task, s) in &p.fused {
                    rec[task.as_str()] = json!(task.class_name(s.argmax()));
                    rec[format!("{task}_probs")] = json!(s.probs);
                }
                lines.push_str(&rec.to_string());
                lines.push('\n');
            }
            match &a.out {
                Some(out) => {
                    create_parent(out)?;
                    fs::write(out, lines).map_err(|e| Error::io(out, e))?;
                }
                None => {
                    let _ = std::io::stdout().write_all(lines.as_bytes());
                }
            }
        }
        Command::Edit(a) => edit(cli, &mut config, a)?,
    }
    Ok(())
}

fn edit(cli: &Cli, config: &mut CliConfig, a: &EditArgs) -> CliResult<()> {
    let manifest = manifest(cli)?;
    let ckpt = checkpoint(cli)?;
    let record = manifest.get(&a.shot).ok_or_else(|| CliError::Usage(format!("shot {} is not in the manifest", a.shot)))?.clone();
    if let Some(k) = a.k {
        config.edit.k = k;
    }
    if let Some(n) = a.n_clips {
        config.edit.n_clips = n;
    }
    let media = MediaStore::for_manifest(&manifest, ckpt.model.preprocess(), config.flow.clone())?;
    let source_path = media.media_path(&record);
    let source: Arc<dyn FrameSource> = Arc::from(open_media(&source_path)?);
    let middle = source.read_frame((record.frame_start + record.frame_end) / 2)?;
    let anchor = match a.anchor {
        Some(r) => r,
        None => default_anchor(&ckpt, &middle)?,
    };
    let rects = propose_crops(&middle, Some(anchor), &config.edit)?;
    let scored = score_crops(&record, source, &rects, &ckpt, config.edit.n_clips, config.flow.clone())?;
    let candidates = rank_candidates(&scored, a.target);
    let Some(best) = candidates.first() else {
        return Err(CliError::NoCandidates(format!("no proposal of shot {} is classified as {}", record.shot_id, a.target)));
    };
    log::info!("{} of {} proposals classified as {}; best {} at {:.3}", candidates.len(), rects.len(), a.target, best.rect, best.confidence);
    let spans = a.segments.clone().unwrap_or_else(|| vec![(record.frame_start, record.frame_end)]);
    let plan = EditPlan {
        source_shot: record.shot_id.clone(),
        source_media: source_path,
        frame_start: record.frame_start,
        frame_end: record.frame_end,
        target_scale: a.target,
        segments: spans.into_iter().map(|(start, end)| EditSegment { start, end, candidate: best.clone() }).collect(),
        output: a.out.clone(),
    };
    render_edit(&plan)?;
    println!("{}", a.out.display());
    println!("{}", sidecar_path(&a.out).display());
    Ok(())
}
