//! Dense optical flow: a block-matching estimator and the `.flo2` file format.
//!
//! `.flo2` layout (little-endian): `b"FLO2"`, height `u32`, width `u32`, then
//! `height * width` `f32` dx values followed by as many dy values. File names
//! are `<shot_id>_<frame_idx>.flo2` and hold the flow from `frame_idx` to
//! `frame_idx + 1`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::frame::{FlowField, FrameImage, Planes};

pub const FLO2_MAGIC: &[u8; 4] = b"FLO2";

pub trait FlowEstimator: Send + Sync {
    /// Displacement `d` such that `next(p + d) ~ prev(p)`.
    fn estimate(&self, prev: &FrameImage, next: &FrameImage) -> Result<FlowField>;
}

/// Exhaustive integer block matching on luma with parabolic sub-pixel refinement.
///
/// Ties go to the smallest displacement, so untextured regions and identical
/// frames yield exactly zero flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMatchFlow {
    /// Search radius in pixels.
    pub radius: usize,
    /// Half-size of the matching window.
    pub patch_radius: usize,
}

impl Default for BlockMatchFlow {
    fn default() -> Self {
        Self { radius: 4, patch_radius: 2 }
    }
}

/// Mean of `img` over the clipped `(2r+1)^2` window around every pixel.
fn box_mean(img: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0f64;
        for x in 0..w {
            row += img[y * w + x] as f64;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out[y * w + x] = (s / ((y1 - y0) * (x1 - x0)) as f64) as f32;
        }
    }
    out
}

fn parabola_offset(minus: f32, center: f32, plus: f32) -> f32 {
    let denom = minus - 2.0 * center + plus;
    if denom <= 1e-12 {
        return 0.0;
    }
    (0.5 * (minus - plus) / denom).clamp(-0.5, 0.5)
}

impl FlowEstimator for BlockMatchFlow {
    fn estimate(&self, prev: &FrameImage, next: &FrameImage) -> Result<FlowField> {
        if prev.dims() != next.dims() {
            return Err(Error::dims(prev.dims(), next.dims()));
        }
        let (h, w) = prev.dims();
        let a = prev.luma();
        let b = next.luma();
        let r = self.radius as isize;
        let side = 2 * self.radius + 1;
        let mut offsets: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
        offsets.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));

        let slot = |dx: isize, dy: isize| ((dy + r) as usize) * side + (dx + r) as usize;
        let mut volume = vec![0.0f32; side * side * h * w];
        let mut diff = vec![0.0f32; h * w];
        for &(dx, dy) in &offsets {
            for y in 0..h {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for x in 0..w {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    diff[y * w + x] = (b[sy * w + sx] - a[y * w + x]).abs();
                }
            }
            let cost = box_mean(&diff, h, w, self.patch_radius);
            let s = slot(dx, dy) * h * w;
            volume[s..s + h * w].copy_from_slice(&cost);
        }

        let mut out = Planes::filled(2, h, w, 0.0);
        for p in 0..h * w {
            let mut best = (0isize, 0isize);
            let mut best_cost = f32::INFINITY;
            for &(dx, dy) in &offsets {
                let c = volume[slot(dx, dy) * h * w + p];
                if c < best_cost {
                    best_cost = c;
                    best = (dx, dy);
                }
            }
            let (bx, by) = best;
            let (mut fx, mut fy) = (bx as f32, by as f32);
            if best_cost > 1e-9 {
                let cost = |dx: isize, dy: isize| volume[slot(dx, dy) * h * w + p];
                if bx.abs() < r {
                    fx += parabola_offset(cost(bx - 1, by), best_cost, cost(bx + 1, by));
                }
                if by.abs() < r {
                    fy += parabola_offset(cost(bx, by - 1), best_cost, cost(bx, by + 1));
                }
            }
            out.data[p] = fx;
            out.data[h * w + p] = fy;
        }
        FlowField::new(out)
    }
}

/// Flow with the default estimator.
pub fn compute_flow(prev: &FrameImage, next: &FrameImage) -> Result<FlowField> {
    BlockMatchFlow::default().estimate(prev, next)
}

/// Where per-frame-pair flow comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowBackend {
    BlockMatch(BlockMatchFlow),
    /// `.flo2` files in a directory.
    Precomputed { dir: PathBuf },
}

impl Default for FlowBackend {
    fn default() -> Self {
        FlowBackend::BlockMatch(BlockMatchFlow::default())
    }
}

pub fn flo2_path(dir: &Path, shot_id: &str, frame_idx: u64) -> PathBuf {
    dir.join(format!("{shot_id}_{frame_idx}.flo2"))
}

pub fn write_flo2(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(12 + flow.data.len() * 4);
    buf.extend_from_slice(FLO2_MAGIC);
    buf.extend_from_slice(&(flow.height as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.width as u32).to_le_bytes());
    for v in &flow.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flo2(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bad = |reason: &str| Error::MediaUnreadable { uri: path.display().to_string(), reason: reason.into() };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FLO2_MAGIC {
        return Err(bad("bad flo2 header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 8 * h * w {
        return Err(bad("flo2 payload size mismatch"));
    }
    let data: Vec<f32> = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite displacement"));
    }
    FlowField::new(Planes::new(2, h, w, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize, shift: usize) -> FrameImage {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let xs = (x + w - shift) % w;
                    let v = 0.5
                        + 0.25 * (2.0 * std::f32::consts::PI * xs as f32 / 12.0).sin()
                        + 0.2 * (2.0 * std::f32::consts::PI * (y as f32 / 10.0 + xs as f32 / 17.0)).cos();
                    data[(c * h + y) * w + x] = v;
                }
            }
        }
        FrameImage::new(Planes::new(3, h, w, data).unwrap()).unwrap()
    }

    #[test]
    fn identical_frames_have_zero_flow() {
        let f = texture(24, 24, 0);
        assert!(compute_flow(&f, &f).unwrap().max_magnitude() <= 0.1);
    }

    #[test]
    fn recovers_horizontal_roll() {
        let a = texture(32, 48, 0);
        let b = texture(32, 48, 3);
        let flow = compute_flow(&a, &b).unwrap();
        let mut dx = flow.dx().to_vec();
        dx.sort_by(f32::total_cmp);
        let median = dx[dx.len() / 2];
        assert!((median - 3.0).abs() <= 1.0, "median dx {median}");
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let r = compute_flow(&texture(8, 8, 0), &texture(8, 9, 0));
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn flo2_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = flo2_path(dir.path(), "s1", 4);
        let f = FlowField::new(Planes::new(2, 2, 3, (0..12).map(|v| v as f32 * 0.5).collect()).unwrap()).unwrap();
        write_flo2(&p, &f).unwrap();
        assert_eq!(read_flo2(&p).unwrap(), f);
        assert!(p.ends_with("s1_4.flo2"));
    }
}
