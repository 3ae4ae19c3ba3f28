//! Teacher maps: files on disk or a heuristic oracle.
//!
//! Map files are named `<shot_id>_<frame_idx>.png` (8- or 16-bit grayscale,
//! scaled linearly to `[0, 1]`) or `<shot_id>_<frame_idx>.fmap` (raw floats:
//! `b"FMAP"`, height `u32`, width `u32`, then `f32` values, little-endian).
//! Out-of-range values are clamped and counted.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::frame::{FrameImage, Planes};
use crate::subject::map::{MapSource, SubjectMap};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherSource {
    Files { dir: PathBuf },
    Oracle,
}

/// Center-weighted color contrast, normalized so the peak is 1.
///
/// Frames without contrast give an all-zero map.
pub fn oracle_teacher(frame: &FrameImage) -> SubjectMap {
    let (h, w) = frame.dims();
    let n = h * w;
    let mean: Vec<f32> = (0..3).map(|c| frame.plane(c).iter().sum::<f32>() / n as f32).collect();
    let sigma = 0.35 * h.max(w) as f32;
    let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let d2: f32 = (0..3).map(|c| (frame.plane(c)[i] - mean[c]).powi(2)).sum();
        let y = (i / w) as f32 + 0.5 - cy;
        let x = (i % w) as f32 + 0.5 - cx;
        raw.push(d2.sqrt() * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
    }
    let peak = raw.iter().copied().fold(0.0f32, f32::max);
    if peak > 1e-3 {
        raw.iter_mut().for_each(|v| *v /= peak);
    } else {
        raw.iter_mut().for_each(|v| *v = 0.0);
    }
    SubjectMap::new(Planes { channels: 1, height: h, width: w, data: raw }, MapSource::Oracle)
        .expect("normalized contrast lies in [0, 1]")
}

pub fn write_fmap(path: impl AsRef<Path>, map: &Planes) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(12 + 4 * map.data.len());
    buf.extend_from_slice(FMAP_MAGIC);
    buf.extend_from_slice(&(map.height as u32).to_le_bytes());
    buf.extend_from_slice(&(map.width as u32).to_le_bytes());
    map.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_fmap(path: &Path) -> Result<Planes> {
    let bad = |r: &str| Error::MediaUnreadable { uri: path.display().to_string(), reason: r.into() };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FMAP_MAGIC {
        return Err(bad("bad fmap header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * h * w {
        return Err(bad("fmap payload size mismatch"));
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Planes::new(1, h, w, data)
}

fn read_png(path: &Path) -> Result<Planes> {
    let img = image::open(path)
        .map_err(|e| Error::MediaUnreadable { uri: path.display().to_string(), reason: e.to_string() })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Planes::new(1, h, w, img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
}

/// Reads teacher maps from a directory, counting clamped values.
#[derive(Debug)]
pub struct TeacherMapLoader {
    dir: PathBuf,
    clamped: AtomicUsize,
}

impl TeacherMapLoader {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), clamped: AtomicUsize::new(0) }
    }

    /// Number of values clamped into `[0, 1]` so far.
    pub fn clamped_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Native-resolution teacher map of one frame.
    pub fn load_one(&self, shot_id: &str, index: u64) -> Result<SubjectMap> {
        let png = self.dir.join(format!("{shot_id}_{index}.png"));
        let fmap = png.with_extension("fmap");
        let mut planes = if png.exists() {
            read_png(&png)?
        } else if fmap.exists() {
            read_fmap(&fmap)?
        } else {
            return Err(Error::MissingMap { index, path: png });
        };
        let mut clamped = 0;
        for v in planes.data.iter_mut() {
            let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            if c != *v {
                clamped += 1;
                *v = c;
            }
        }
        if clamped > 0 {
            self.clamped.fetch_add(clamped, Ordering::Relaxed);
            log::warn!("teacher map {shot_id}_{index}: clamped {clamped} values into [0, 1]");
        }
        SubjectMap::new(planes, MapSource::Teacher)
    }

    pub fn load(&self, shot_id: &str, indices: &[u64]) -> Result<Vec<SubjectMap>> {
        indices.iter().map(|&i| self.load_one(shot_id, i)).collect()
    }
}

/// Loads `<shot_id>_<index>` maps for every index. See [`TeacherMapLoader`] for the clamp counter.
pub fn load_teacher_maps(dir: impl Into<PathBuf>, shot_id: &str, indices: &[u64]) -> Result<Vec<SubjectMap>> {
    TeacherMapLoader::new(dir).load(shot_id, indices)
}
