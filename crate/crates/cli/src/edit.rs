//! Shot-scale editing: crop proposals, candidate scoring and re-rendering.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sgnet::data::{ScaleType, ShotRecord, Task};
use sgnet::media::{open_media, write_srv, FlowBackend, FrameImage, FrameSource, MediaStore};
use sgnet::model::{joint_training_wiring, ScoreVector, SgNet};
use sgnet::train::predict_shot;
use sgnet::{Error, ModelCheckpoint, Result};

/// Axis-aligned pixel rectangle `(x, y, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width as u32, height as u32)
    }

    /// Integer center pixel.
    pub fn center(&self) -> (u32, u32) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        (self.x..self.x + self.w).contains(&px) && (self.y..self.y + self.h).contains(&py)
    }

    /// Non-empty and inside a `width x height` frame.
    pub fn within(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && (self.x + self.w) as usize <= width && (self.y + self.h) as usize <= height
    }

    fn tuple(&self) -> (u32, u32, u32, u32) {
        (self.x, self.y, self.w, self.h)
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for Rect {
    type Err = String;

    /// `x,y,w,h`
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<u32> = s.split(',').map(|p| p.trim().parse::<u32>()).collect::<std::result::Result<_, _>>().map_err(|e| format!("bad rect {s:?}: {e}"))?;
        match v[..] {
            [x, y, w, h] => Ok(Rect::new(x, y, w, h)),
            _ => Err(format!("bad rect {s:?}: expected x,y,w,h")),
        }
    }
}

/// Proposal and scoring settings of the `edit` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    /// Number of proposals.
    pub k: usize,
    /// Crop heights as fractions of the frame height; proposals cycle through them.
    pub tiers: Vec<f64>,
    /// Smallest crop side in pixels.
    pub min_size: u32,
    /// Aspect ratios vary by up to this factor (log-uniform) around the frame's.
    pub aspect_jitter: f64,
    /// Uniformly sampled clips per candidate.
    pub n_clips: usize,
    pub seed: u64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { k: 100, tiers: vec![1.0, 0.7, 0.45, 0.25], min_size: 8, aspect_jitter: 1.15, n_clips: 8, seed: 0 }
    }
}

/// `k` seeded crops of `frame` at the configured scale tiers. With an anchor
/// every crop contains the anchor's center pixel.
pub fn propose_crops(frame: &FrameImage, anchor: Option<Rect>, config: &CropConfig) -> Result<Vec<Rect>> {
    let (height, width) = frame.planes().dims();
    propose_crops_in(width, height, anchor, config)
}

/// [`propose_crops`] given only the frame size.
pub fn propose_crops_in(width: usize, height: usize, anchor: Option<Rect>, config: &CropConfig) -> Result<Vec<Rect>> {
    if config.k == 0 || config.tiers.is_empty() || config.tiers.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::Config(format!("need k >= 1 and tiers in (0, 1], got k={} tiers={:?}", config.k, config.tiers)));
    }
    if config.aspect_jitter.is_nan() || config.aspect_jitter < 1.0 {
        return Err(Error::Config(format!("aspect_jitter {} must be >= 1", config.aspect_jitter)));
    }
    if let Some(a) = anchor {
        if !a.within(width, height) {
            return Err(Error::AnchorOutOfBounds(a.tuple()));
        }
    }
    let (fw, fh) = (width as u32, height as u32);
    let aspect = width as f64 / height as f64;
    let jitter = config.aspect_jitter.ln();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.k);
    for i in 0..config.k {
        let tier = config.tiers[i % config.tiers.len()];
        let scale = rng.random_range(0.9..=1.1);
        let h = ((tier * scale * height as f64).round() as u32).clamp(config.min_size.min(fh), fh);
        let a = if jitter > 0.0 { aspect * rng.random_range(-jitter..=jitter).exp() } else { aspect };
        let w = ((h as f64 * a).round() as u32).clamp(config.min_size.min(fw), fw);
        let (xr, yr) = match anchor {
            // `x <= cx < x + w` within the frame.
            Some(a) => {
                let (cx, cy) = a.center();
                ((cx + 1).saturating_sub(w)..=cx.min(fw - w), (cy + 1).saturating_sub(h)..=cy.min(fh - h))
            }
            None => (0..=fw - w, 0..=fh - h),
        };
        out.push(Rect::new(rng.random_range(xr), rng.random_range(yr), w, h));
    }
    Ok(out)
}

/// Serves a fixed crop of another source.
pub struct CropSource {
    inner: Arc<dyn FrameSource>,
    rect: Rect,
}

impl CropSource {
    pub fn new(inner: Arc<dyn FrameSource>, rect: Rect) -> Result<Self> {
        if !rect.within(inner.width(), inner.height()) {
            return Err(Error::InvalidPlan(format!("crop {rect} exceeds {}x{}", inner.width(), inner.height())));
        }
        Ok(Self { inner, rect })
    }
}

impl FrameSource for CropSource {
    fn width(&self) -> usize {
        self.rect.w as usize
    }

    fn height(&self) -> usize {
        self.rect.h as usize
    }

    fn frame_count(&self) -> u64 {
        self.inner.frame_count()
    }

    fn fps(&self) -> f64 {
        self.inner.fps()
    }

    fn read_rgb8(&self, index: u64) -> Result<Vec<u8>> {
        let full = self.inner.read_rgb8(index)?;
        Ok(crop_rgb8(&full, self.inner.width(), self.rect))
    }
}

fn crop_rgb8(rgb: &[u8], width: usize, r: Rect) -> Vec<u8> {
    let (x, w) = (r.x as usize, r.w as usize);
    let mut out = Vec::with_capacity(w * r.h as usize * 3);
    for y in r.y as usize..(r.y + r.h) as usize {
        out.extend_from_slice(&rgb[(y * width + x) * 3..(y * width + x + w) * 3]);
    }
    out
}

/// One crop with the scale model's opinion of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCrop {
    pub rect: Rect,
    pub scale: ScoreVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropCandidate {
    pub rect: Rect,
    pub predicted_scale: ScaleType,
    pub confidence: f64,
    /// 1-based position in the confidence ordering.
    pub rank: usize,
}

/// Classifies the shot as seen through every rect, `n_clips` uniform clips each.
/// Work is split across the available cores.
pub fn score_crops(
    record: &ShotRecord,
    source: Arc<dyn FrameSource>,
    rects: &[Rect],
    checkpoint: &ModelCheckpoint,
    n_clips: usize,
    flow: FlowBackend,
) -> Result<Vec<ScoredCrop>> {
    let mut config = checkpoint.model.clone();
    config.n_clips_eval = n_clips;
    config.validate()?;
    let net = SgNet::new(&config, &joint_training_wiring(checkpoint.task_mode))?;
    if !net.tasks().contains(&Task::Scale) {
        return Err(Error::TaskMismatch("the checkpoint has no scale classifier".into()));
    }
    let media = MediaStore::new(config.preprocess(), flow)?;
    let records = rects
        .iter()
        .enumerate()
        .map(|(i, &rect)| {
            let id = format!("{}#crop{i}", record.shot_id);
            media.register_source(&id, Box::new(CropSource::new(source.clone(), rect)?));
            Ok(ShotRecord { shot_id: id, ..record.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(rects.len().max(1));
    let chunk = rects.len().div_ceil(threads).max(1);
    let (net, media, store) = (&net, &media, &checkpoint.params);
    let results: Vec<Result<Vec<ScoreVector>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| {
                            let p = predict_shot(net, store, media, r)?;
                            p.fused.get(&Task::Scale).cloned().ok_or_else(|| Error::TaskMismatch("no scale score".into()))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    let mut scores = Vec::with_capacity(rects.len());
    for r in results {
        scores.extend(r?);
    }
    Ok(rects.iter().zip(scores).map(|(&rect, scale)| ScoredCrop { rect, scale }).collect())
}

/// Keeps crops whose predicted scale is `target`, most confident first.
pub fn rank_candidates(scored: &[ScoredCrop], target: ScaleType) -> Vec<CropCandidate> {
    let mut out: Vec<CropCandidate> = scored
        .iter()
        .filter(|s| s.scale.argmax() == target.index())
        .map(|s| CropCandidate { rect: s.rect, predicted_scale: target, confidence: s.scale.probs[target.index()], rank: 0 })
        .collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    for (i, c) in out.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    out
}

/// Frames `start..end` of the shot shown through `candidate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSegment {
    pub start: u64,
    pub end: u64,
    pub candidate: CropCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub source_shot: String,
    pub source_media: PathBuf,
    pub frame_start: u64,
    pub frame_end: u64,
    pub target_scale: ScaleType,
    /// Frames outside every segment are copied unchanged.
    pub segments: Vec<EditSegment>,
    pub output: PathBuf,
}

/// Parses `a:b,c:d` frame ranges.
pub fn parse_segments(text: &str) -> std::result::Result<Vec<(u64, u64)>, String> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p.split_once(':').ok_or_else(|| format!("bad segment {p:?}: expected start:end"))?;
            let a = a.trim().parse::<u64>().map_err(|e| format!("bad segment {p:?}: {e}"))?;
            let b = b.trim().parse::<u64>().map_err(|e| format!("bad segment {p:?}: {e}"))?;
            Ok((a, b))
        })
        .collect()
}

impl EditPlan {
    /// Segment ranges lie inside the shot and do not overlap, crops fit the
    /// source frame and every candidate has the target scale.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        if self.frame_start >= self.frame_end {
            return bad(format!("empty shot span {}..{}", self.frame_start, self.frame_end));
        }
        let mut spans: Vec<(u64, u64)> = Vec::new();
        for s in &self.segments {
            if s.start >= s.end || s.start < self.frame_start || s.end > self.frame_end {
                return bad(format!("segment {}:{} outside shot {}..{}", s.start, s.end, self.frame_start, self.frame_end));
            }
            if spans.iter().any(|&(a, b)| s.start < b && a < s.end) {
                return bad(format!("segment {}:{} overlaps another segment", s.start, s.end));
            }
            spans.push((s.start, s.end));
            if !s.candidate.rect.within(width, height) {
                return bad(format!("crop {} exceeds the {width}x{height} source", s.candidate.rect));
            }
            if s.candidate.predicted_scale != self.target_scale {
                return bad(format!("candidate {} predicts {} but the target is {}", s.candidate.rect, s.candidate.predicted_scale, self.target_scale));
            }
        }
        Ok(())
    }

    fn segment_at(&self, index: u64) -> Option<&EditSegment> {
        self.segments.iter().find(|s| (s.start..s.end).contains(&index))
    }
}

/// Sidecar path written next to an edit's output.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".plan.json");
    output.with_file_name(name)
}

/// Renders the shot's frames with each segment's crop scaled back to the
/// source resolution, as a lossless `.srv`, plus a JSON sidecar of the plan.
pub fn render_edit(plan: &EditPlan) -> Result<PathBuf> {
    let source = open_media(&plan.source_media)?;
    let (width, height) = (source.width(), source.height());
    plan.validate(width, height)?;
    if plan.frame_end > source.frame_count() {
        return Err(Error::InvalidPlan(format!("shot ends at frame {} but the source has {}", plan.frame_end, source.frame_count())));
    }
    let mut frames = Vec::with_capacity((plan.frame_end - plan.frame_start) as usize);
    for index in plan.frame_start..plan.frame_end {
        let rgb = source.read_rgb8(index)?;
        let rgb = match plan.segment_at(index).map(|s| s.candidate.rect) {
            Some(r) if r != Rect::full(width, height) => {
                let crop = FrameImage::from_rgb8(r.h as usize, r.w as usize, &crop_rgb8(&rgb, width, r))?;
                FrameImage::new(crop.planes().resize(height, width))?.to_rgb8()
            }
            _ => rgb,
        };
        frames.push(rgb);
    }
    write_srv(&plan.output, width, height, source.fps(), frames.iter().map(Vec::as_slice))?;
    let sidecar = sidecar_path(&plan.output);
    let text = serde_json::to_string_pretty(plan).expect("plan serializes");
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    Ok(plan.output.clone())
}

/// Anchor for proposals: the student subject map's centroid on the shot's
/// middle frame, or the frame center when the model has no generator.
pub fn default_anchor(checkpoint: &ModelCheckpoint, frame: &FrameImage) -> Result<Rect> {
    let (height, width) = frame.planes().dims();
    let net = checkpoint.net()?;
    let generator = net
        .nets
        .iter()
        .find(|n| n.task == Task::Scale)
        .or_else(|| net.nets.first())
        .and_then(|n| net.generators.get(&n.generator));
    let (cx, cy) = match generator {
        Some(g) => g.predict(&checkpoint.params, std::slice::from_ref(frame))?[0].centroid(),
        None => {
            log::warn!("the model has no subject-map generator; anchoring at the frame center");
            (width as f32 / 2.0, height as f32 / 2.0)
        }
    };
    let x = (cx.floor().max(0.0) as u32).min(width as u32 - 1);
    let y = (cy.floor().max(0.0) as u32).min(height as u32 - 1);
    Ok(Rect::new(x, y, 1, 1))
}
