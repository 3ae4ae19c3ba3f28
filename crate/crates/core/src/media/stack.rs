//! Per-shot clip sampling, decoding and flow assembly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, ShotRecord};
use crate::error::{Error, Result};
use crate::media::flow::{flo2_path, read_flo2, FlowBackend, FlowEstimator};
use crate::media::frame::{FlowField, FrameImage, Planes};
use crate::media::preprocess::{Preprocess, Transform};
use crate::media::sampling::{consecutive_frames, segment_clips, SamplingMode};
use crate::media::video::{open_media, FrameSource};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How many clips to draw from a shot and what each clip contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_clips: usize,
    pub mode: SamplingMode,
    pub frames_per_clip_rgb: usize,
    pub frames_per_clip_flow: usize,
    pub flow: bool,
}

impl SamplingConfig {
    pub fn new(n_clips: usize, mode: SamplingMode) -> Self {
        Self { n_clips, mode, frames_per_clip_rgb: 1, frames_per_clip_flow: 5, flow: false }
    }

    /// Three random clips.
    pub fn train() -> Self {
        Self::new(3, SamplingMode::TrainRandom)
    }

    /// 25 evenly spaced clips.
    pub fn test() -> Self {
        Self::new(25, SamplingMode::TestUniform)
    }

    pub fn with_flow(mut self, flow: bool) -> Self {
        self.flow = flow;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 || self.frames_per_clip_rgb == 0 || (self.flow && self.frames_per_clip_flow == 0) {
            return Err(Error::Config(format!("degenerate sampling config {self:?}")));
        }
        Ok(())
    }
}

/// Sampled, preprocessed content of one shot.
#[derive(Debug, Clone)]
pub struct ClipStack {
    pub shot_id: String,
    pub n_clips: usize,
    /// First frame of every clip, in temporal order.
    pub anchors: Vec<u64>,
    /// `rgb[clip][frame]`.
    pub rgb: Vec<Vec<FrameImage>>,
    /// `flow[clip][field]`; absent when flow is disabled.
    pub flow: Option<Vec<Vec<FlowField>>>,
    pub sampling_seed: u64,
    /// Crop and flip shared by every clip of the shot.
    pub transform: Transform,
    /// Frame size after the shorter-side resize, before cropping.
    pub resized: (usize, usize),
}

impl ClipStack {
    pub fn frames_per_clip_rgb(&self) -> usize {
        self.rgb.first().map_or(0, Vec::len)
    }

    /// `[n_clips * frames_per_clip_rgb, 3, S, S]`, clip-major.
    pub fn rgb_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Planes::batch(self.rgb.iter().flatten().map(|f| f.planes()))
    }

    /// `[n_clips, 2 * frames_per_clip_flow, S, S]` with channels `dx0, dy0, dx1, dy1, ...`.
    pub fn flow_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let flow = self.flow.as_ref().ok_or_else(|| Error::Config("clip stack has no flow".into()))?;
        let stacked: Vec<Planes> = flow
            .iter()
            .map(|fields| {
                let (h, w) = fields[0].dims();
                let data = fields.iter().flat_map(|f| f.data.iter().copied()).collect();
                Planes::new(2 * fields.len(), h, w, data)
            })
            .collect::<Result<_>>()?;
        Planes::batch(stacked.iter())
    }

    /// Applies this stack's resize and crop to a native-resolution plane set
    /// (e.g. a subject map aligned with the source frames).
    pub fn align(&self, native: &Planes) -> Result<Planes> {
        self.transform.apply(&native.resize(self.resized.0, self.resized.1))
    }
}

/// Decoded frames and flow of one shot at the resized resolution.
struct ShotMedia {
    source: Box<dyn FrameSource>,
    resized: (usize, usize),
    frames: Mutex<HashMap<u64, Arc<FrameImage>>>,
    flows: Mutex<HashMap<u64, Arc<FlowField>>>,
}

/// Opens shot media on demand and caches resized frames and flow per shot.
pub struct MediaStore {
    base_dir: Option<PathBuf>,
    preprocess: Preprocess,
    flow: FlowBackend,
    shots: Mutex<HashMap<String, Arc<ShotMedia>>>,
}

impl MediaStore {
    pub fn new(preprocess: Preprocess, flow: FlowBackend) -> Result<Self> {
        preprocess.validate()?;
        Ok(Self { base_dir: None, preprocess, flow, shots: Mutex::new(HashMap::new()) })
    }

    /// Relative media URIs resolve against the manifest's directory.
    pub fn for_manifest(manifest: &Manifest, preprocess: Preprocess, flow: FlowBackend) -> Result<Self> {
        let mut s = Self::new(preprocess, flow)?;
        s.base_dir = manifest.base_dir().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn preprocess(&self) -> Preprocess {
        self.preprocess
    }

    pub fn media_path(&self, record: &ShotRecord) -> PathBuf {
        let p = PathBuf::from(&record.media_uri);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p,
        }
    }

    fn shot(&self, record: &ShotRecord) -> Result<Arc<ShotMedia>> {
        if let Some(s) = self.shots.lock().unwrap().get(&record.shot_id) {
            return Ok(s.clone());
        }
        let path = self.media_path(record);
        let source = open_media(&path)?;
        if record.frame_end > source.frame_count() {
            return Err(Error::MediaUnreadable {
                uri: record.media_uri.clone(),
                reason: format!("shot ends at frame {} but media has {}", record.frame_end, source.frame_count()),
            });
        }
        let resized = self.preprocess.resized_dims(source.height(), source.width());
        let shot = Arc::new(ShotMedia {
            source,
            resized,
            frames: Mutex::new(HashMap::new()),
            flows: Mutex::new(HashMap::new()),
        });
        self.shots.lock().unwrap().insert(record.shot_id.clone(), shot.clone());
        Ok(shot)
    }

    /// Serves `shot_id` from `source` instead of opening its media URI.
    pub fn register_source(&self, shot_id: &str, source: Box<dyn FrameSource>) {
        let resized = self.preprocess.resized_dims(source.height(), source.width());
        let shot = Arc::new(ShotMedia {
            source,
            resized,
            frames: Mutex::new(HashMap::new()),
            flows: Mutex::new(HashMap::new()),
        });
        self.shots.lock().unwrap().insert(shot_id.to_string(), shot);
    }

    fn resized_frame(&self, record: &ShotRecord, shot: &ShotMedia, index: u64) -> Result<Arc<FrameImage>> {
        if !(record.frame_start..record.frame_end).contains(&index) {
            return Err(Error::IndexOutOfRange { index, start: record.frame_start, end: record.frame_end });
        }
        if let Some(f) = shot.frames.lock().unwrap().get(&index) {
            return Ok(f.clone());
        }
        let native = shot.source.read_frame(index)?;
        let f = Arc::new(FrameImage::new(native.resize(shot.resized.0, shot.resized.1))?);
        shot.frames.lock().unwrap().insert(index, f.clone());
        Ok(f)
    }

    /// Flow from `index` to `next` at the resized resolution; zero when they coincide.
    fn resized_flow(&self, record: &ShotRecord, shot: &ShotMedia, index: u64, next: u64) -> Result<Arc<FlowField>> {
        if index == next {
            return Ok(Arc::new(FlowField::zeros(shot.resized.0, shot.resized.1)));
        }
        if let Some(f) = shot.flows.lock().unwrap().get(&index) {
            return Ok(f.clone());
        }
        let field = match &self.flow {
            FlowBackend::BlockMatch(est) => {
                let a = self.resized_frame(record, shot, index)?;
                let b = self.resized_frame(record, shot, next)?;
                est.estimate(&a, &b)?
            }
            FlowBackend::Precomputed { dir } => {
                read_flo2(flo2_path(dir, &record.shot_id, index))?.resize(shot.resized.0, shot.resized.1)
            }
        };
        let field = Arc::new(field);
        shot.flows.lock().unwrap().insert(index, field.clone());
        Ok(field)
    }

    /// Decodes frames with the deterministic center crop.
    pub fn decode_frames(&self, record: &ShotRecord, indices: &[u64]) -> Result<Vec<FrameImage>> {
        let shot = self.shot(record)?;
        let t = Transform::center(shot.resized, self.preprocess.input_size);
        self.decode_frames_with(record, indices, &t)
    }

    pub fn decode_frames_with(&self, record: &ShotRecord, indices: &[u64], t: &Transform) -> Result<Vec<FrameImage>> {
        let shot = self.shot(record)?;
        indices.iter().map(|&i| FrameImage::new(t.apply(self.resized_frame(record, &shot, i)?.planes())?)).collect()
    }

    /// Segments the shot, decodes each clip's frames and, when enabled, its
    /// consecutive flow fields.
    pub fn build_clip_stack(&self, record: &ShotRecord, config: &SamplingConfig, seed: u64) -> Result<ClipStack> {
        config.validate()?;
        let shot = self.shot(record)?;
        let anchors = segment_clips(record, config.n_clips, config.mode, seed);
        let transform = match config.mode {
            SamplingMode::TestUniform => Transform::center(shot.resized, self.preprocess.input_size),
            SamplingMode::TrainRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
                Transform::random(shot.resized, self.preprocess.input_size, &mut rng)
            }
        };
        let mut rgb = Vec::with_capacity(anchors.len());
        let mut flow = config.flow.then(|| Vec::with_capacity(anchors.len()));
        for &anchor in &anchors {
            let idx = consecutive_frames(record, anchor, config.frames_per_clip_rgb);
            rgb.push(self.decode_frames_with(record, &idx, &transform)?);
            if let Some(flow) = flow.as_mut() {
                let idx = consecutive_frames(record, anchor, config.frames_per_clip_flow + 1);
                let fields = idx
                    .windows(2)
                    .map(|p| transform.apply_flow(&*self.resized_flow(record, &shot, p[0], p[1])?))
                    .collect::<Result<Vec<_>>>()?;
                flow.push(fields);
            }
        }
        Ok(ClipStack {
            shot_id: record.shot_id.clone(),
            n_clips: anchors.len(),
            anchors,
            rgb,
            flow,
            sampling_seed: seed,
            transform,
            resized: shot.resized,
        })
    }

    /// Drops cached media for every shot.
    pub fn clear_cache(&self) {
        self.shots.lock().unwrap().clear();
    }
}
