//! Deterministic synthetic media for tests and demos.
//!
//! Besides single test videos (solid, translating texture, zooming pattern,
//! numbered frames) this renders labeled shot datasets. A shot is a procedural
//! world texture seen through a camera whose motion gives the movement class,
//! with a warm saturated figure whose height sets the scale class. The figure
//! drifts on its own regardless of the camera, and desaturated blobs live in
//! world coordinates as distractors. Ground-truth figure masks are written as
//! teacher maps.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, MovementType, ScaleType, ShotRecord, Split};
use crate::error::{Error, Result};
use crate::media::frame::FrameImage;
use crate::media::video::write_srv;

pub const FIXTURE_FPS: f64 = 24.0;

fn to_rgb8(rgb: &[[f32; 3]]) -> Vec<u8> {
    rgb.iter().flat_map(|p| p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)).collect()
}

/// Smooth periodic texture, values roughly in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
struct Texture {
    phase: [f32; 4],
    tint: [f32; 3],
}

impl Texture {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let mut phase = [0.0; 4];
        phase.iter_mut().for_each(|p| *p = rng.random_range(0.0..2.0 * PI));
        let base = rng.random_range(0.35..0.6);
        let tint = [0, 1, 2].map(|_| base + rng.random_range(-0.06..0.06));
        Self { phase, tint }
    }

    fn luma(&self, u: f32, v: f32) -> f32 {
        let p = self.phase;
        0.5 + 0.22 * (0.45 * u + p[0]).sin() * (0.37 * v + p[1]).cos()
            + 0.15 * (0.21 * (u + v) + p[2]).sin()
            + 0.12 * (0.71 * u - 0.53 * v + p[3]).sin()
    }

    fn rgb(&self, u: f32, v: f32) -> [f32; 3] {
        let l = self.luma(u, v);
        self.tint.map(|t| (t * 2.0 * l).clamp(0.0, 1.0))
    }
}

/// A solid `value` gray video.
pub fn solid_video(path: impl AsRef<Path>, width: usize, height: usize, frames: usize, value: u8) -> Result<u64> {
    let frame = vec![value; width * height * 3];
    write_srv(path, width, height, FIXTURE_FPS, (0..frames).map(|_| frame.as_slice()))
}

/// A periodic texture translating by `(dx, dy)` pixels per frame (wrapping).
pub fn translating_texture_video(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    frames: usize,
    (dx, dy): (f32, f32),
    seed: u64,
) -> Result<u64> {
    let tex = Texture::random(&mut ChaCha8Rng::seed_from_u64(seed));
    let rendered: Vec<Vec<u8>> = (0..frames)
        .map(|t| {
            let px: Vec<[f32; 3]> = (0..height * width)
                .map(|i| tex.rgb((i % width) as f32 - dx * t as f32, (i / width) as f32 - dy * t as f32))
                .collect();
            to_rgb8(&px)
        })
        .collect();
    write_srv(path, width, height, FIXTURE_FPS, rendered.iter().map(Vec::as_slice))
}

/// Concentric rings zooming about the frame center by `rate` per frame.
pub fn zooming_pattern_video(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    frames: usize,
    rate: f32,
) -> Result<u64> {
    let rendered: Vec<Vec<u8>> = (0..frames)
        .map(|t| {
            let z = rate.powi(t as i32);
            let px: Vec<[f32; 3]> = (0..height * width)
                .map(|i| {
                    let x = ((i % width) as f32 + 0.5 - width as f32 / 2.0) / z;
                    let y = ((i / width) as f32 + 0.5 - height as f32 / 2.0) / z;
                    let v = 0.5 + 0.4 * ((x * x + y * y).sqrt() * 0.8).sin();
                    [v, v, 1.0 - v]
                })
                .collect();
            to_rgb8(&px)
        })
        .collect();
    write_srv(path, width, height, FIXTURE_FPS, rendered.iter().map(Vec::as_slice))
}

/// Frame `k` is constant: red encodes `k % 16`, green `k / 16 % 16`.
pub fn numbered_video(path: impl AsRef<Path>, width: usize, height: usize, frames: usize) -> Result<u64> {
    let rendered: Vec<Vec<u8>> = (0..frames)
        .map(|k| {
            let px = [(k % 16 * 16 + 8) as u8, (k / 16 % 16 * 16 + 8) as u8, 128];
            px.repeat(width * height)
        })
        .collect();
    write_srv(path, width, height, FIXTURE_FPS, rendered.iter().map(Vec::as_slice))
}

/// Inverse of [`numbered_video`]; survives resizing and cropping.
pub fn decode_frame_number(frame: &FrameImage) -> u64 {
    let mean = |c: usize| frame.plane(c).iter().sum::<f32>() / frame.plane(c).len() as f32;
    let digit = |c: usize| ((mean(c) * 255.0 - 8.0) / 16.0).round().clamp(0.0, 15.0) as u64;
    digit(0) + 16 * digit(1)
}

/// Nominal figure height as a fraction of the frame height.
pub fn scale_height_fraction(scale: ScaleType) -> f32 {
    match scale {
        ScaleType::Ls => 0.15,
        ScaleType::Fs => 0.3,
        ScaleType::Ms => 0.45,
        ScaleType::Cs => 0.65,
        ScaleType::Ecs => 0.85,
    }
}

/// Everything needed to render one labeled shot.
#[derive(Debug, Clone, Copy)]
pub struct ShotScene {
    pub scale: ScaleType,
    pub movement: MovementType,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub distractors: usize,
    pub seed: u64,
}

struct Blob {
    u: f32,
    v: f32,
    radius: f32,
    value: f32,
}

/// Soft inside-ness of an ellipse, antialiased over about one pixel.
fn ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    ((1.0 - d) * rx.min(ry) + 0.5).clamp(0.0, 1.0)
}

impl ShotScene {
    /// Interleaved RGB8 frames and the matching `[0, 1]` figure masks.
    pub fn render(&self) -> (Vec<Vec<u8>>, Vec<Vec<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let tex = Texture::random(&mut rng);
        let (w, h) = (self.width as f32, self.height as f32);
        let last = (self.frames.max(2) - 1) as f32;

        let angle = rng.random_range(0.0..2.0 * PI);
        let speed = 1.5 * w / 48.0;
        let zoom_span: f32 = 1.8;
        let camera = |t: f32| -> (f32, f32, f32) {
            match self.movement {
                MovementType::Static => (0.0, 0.0, 1.0),
                MovementType::Motion => (t * speed * angle.cos(), t * speed * angle.sin(), 1.0),
                MovementType::Push => (0.0, 0.0, zoom_span.powf(t / last)),
                MovementType::Pull => (0.0, 0.0, zoom_span.powf(1.0 - t / last)),
            }
        };

        let blobs: Vec<Blob> = (0..self.distractors)
            .map(|_| Blob {
                u: rng.random_range(-0.6 * w..0.6 * w),
                v: rng.random_range(-0.6 * h..0.6 * h),
                radius: rng.random_range(0.06..0.16) * h,
                value: rng.random_range(0.15..0.9),
            })
            .collect();

        let fig_h = (scale_height_fraction(self.scale) + rng.random_range(-0.03..0.03)) * h;
        let fig_w = 0.45 * fig_h;
        let margin_x = (0.5 * w - 0.5 * fig_w).max(0.0) * 0.6;
        let margin_y = (0.5 * h - 0.5 * fig_h).max(0.0) * 0.6;
        let start = (0.5 * w + rng.random_range(-margin_x..=margin_x), 0.5 * h + rng.random_range(-margin_y..=margin_y));
        let drift_angle = rng.random_range(0.0..2.0 * PI);
        let drift = rng.random_range(0.1..0.4) * w / 48.0;
        let warm = [rng.random_range(0.85..1.0), rng.random_range(0.25..0.45), rng.random_range(0.05..0.2)];

        let mut frames = Vec::with_capacity(self.frames);
        let mut masks = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let tf = t as f32;
            let (cu, cv, z) = camera(tf);
            let cx = start.0 + tf * drift * drift_angle.cos();
            let cy = start.1 + tf * drift * drift_angle.sin();
            let head_r = 0.14 * fig_h;
            let head = (cx, cy - 0.5 * fig_h + head_r);
            let body = (cx, cy + head_r, 0.5 * fig_w, 0.5 * fig_h - head_r);

            let mut px = Vec::with_capacity(self.width * self.height);
            let mut mask = Vec::with_capacity(self.width * self.height);
            for i in 0..self.width * self.height {
                let x = (i % self.width) as f32 + 0.5;
                let y = (i / self.width) as f32 + 0.5;
                let u = cu + (x - 0.5 * w) / z;
                let v = cv + (y - 0.5 * h) / z;
                let mut bg = tex.rgb(u, v);
                for b in &blobs {
                    let a = ellipse(u, v, b.u, b.v, b.radius, b.radius) * 0.9;
                    bg = bg.map(|c| c * (1.0 - a) + b.value * a);
                }
                let m = ellipse(x, y, head.0, head.1, head_r, head_r).max(ellipse(x, y, body.0, body.1, body.2, body.3));
                let shade = 0.85 + 0.15 * ((y - cy) * 6.0 / fig_h.max(1.0)).sin();
                let fg = warm.map(|c| c * shade);
                px.push([0, 1, 2].map(|c| bg[c] * (1.0 - m) + fg[c] * m));
                mask.push(m);
            }
            frames.push(to_rgb8(&px));
            masks.push(mask);
        }
        (frames, masks)
    }
}

/// Shape of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub distractors: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// 40 shots, 28/4/8.
    pub fn small(seed: u64) -> Self {
        Self { train: 28, val: 4, test: 8, width: 48, height: 48, frames: 16, distractors: 3, seed }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Paths of a generated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub maps_dir: PathBuf,
    pub manifest: Manifest,
}

/// Teacher-map file path for one frame.
pub fn map_path(dir: &Path, shot_id: &str, frame_idx: u64) -> PathBuf {
    dir.join(format!("{shot_id}_{frame_idx}.png"))
}

/// Renders a balanced labeled dataset under `root`: `manifest.jsonl`,
/// `media/<shot>.srv` and `maps/<shot>_<frame>.png`.
///
/// Labels cycle through every scale/movement combination; split membership is
/// a seeded shuffle so every split sees a spread of classes.
pub fn generate_dataset(root: impl AsRef<Path>, spec: &DatasetSpec) -> Result<Dataset> {
    let root = root.as_ref();
    let maps_dir = root.join("maps");
    fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    let total = spec.total();
    if total == 0 || spec.frames == 0 {
        return Err(Error::Config("fixture dataset must have shots and frames".into()));
    }
    let mut splits: Vec<Split> = [(Split::Train, spec.train), (Split::Val, spec.val), (Split::Test, spec.test)]
        .iter()
        .flat_map(|&(s, n)| std::iter::repeat_n(s, n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    splits.shuffle(&mut rng);

    let mut records = Vec::with_capacity(total);
    for (i, split) in splits.into_iter().enumerate() {
        let scale = ScaleType::ALL[i % ScaleType::COUNT];
        let movement = MovementType::ALL[(i / ScaleType::COUNT) % MovementType::COUNT];
        let shot_id = format!("shot{i:04}");
        let scene = ShotScene {
            scale,
            movement,
            width: spec.width,
            height: spec.height,
            frames: spec.frames,
            distractors: spec.distractors,
            seed: rng.random(),
        };
        let (frames, masks) = scene.render();
        let uri = format!("media/{shot_id}.srv");
        write_srv(root.join(&uri), spec.width, spec.height, FIXTURE_FPS, frames.iter().map(Vec::as_slice))?;
        for (t, mask) in masks.iter().enumerate() {
            let bytes: Vec<u8> = mask.iter().map(|v| (v * 255.0).round() as u8).collect();
            let img = image::GrayImage::from_raw(spec.width as u32, spec.height as u32, bytes)
                .ok_or_else(|| Error::Shape("mask size".into()))?;
            let p = map_path(&maps_dir, &shot_id, t as u64);
            img.save(&p).map_err(|e| Error::MediaUnreadable { uri: p.display().to_string(), reason: e.to_string() })?;
        }
        records.push(ShotRecord {
            shot_id,
            media_uri: uri,
            frame_start: 0,
            frame_end: spec.frames as u64,
            fps: FIXTURE_FPS,
            scale: Some(scale),
            movement: Some(movement),
            split,
            extra: Default::default(),
        });
    }
    let manifest_path = root.join("manifest.jsonl");
    let manifest = Manifest::new(records)?.with_base_dir(root);
    manifest.write(&manifest_path, true)?;
    Ok(Dataset { root: root.to_path_buf(), manifest_path, maps_dir, manifest })
}
