//! Resize, crop and flip applied identically to frames, maps and flow.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::frame::{FlowField, Planes};

/// Shorter-side resize followed by a square crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocess {
    pub input_size: usize,
    pub resize_shorter: usize,
}

impl Preprocess {
    /// 256-pixel shorter side, 224 crop.
    pub const FULL: Preprocess = Preprocess { input_size: 224, resize_shorter: 256 };

    /// Keeps the 224/256 crop ratio for a smaller input.
    pub fn scaled(input_size: usize) -> Self {
        Self { input_size, resize_shorter: (input_size * 256).div_ceil(224) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.resize_shorter < self.input_size {
            return Err(Error::Config(format!(
                "resize_shorter ({}) must be >= input_size ({}) > 0",
                self.resize_shorter, self.input_size
            )));
        }
        Ok(())
    }

    /// Size after the shorter-side resize.
    pub fn resized_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let s = self.resize_shorter as f64;
        if height <= width {
            (self.resize_shorter, ((width as f64 * s / height as f64).round() as usize).max(self.resize_shorter))
        } else {
            (((height as f64 * s / width as f64).round() as usize).max(self.resize_shorter), self.resize_shorter)
        }
    }
}

/// Crop window and flip chosen once per shot and applied to every clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub flip: bool,
}

impl Transform {
    pub fn center(resized: (usize, usize), size: usize) -> Self {
        Self { y: (resized.0 - size) / 2, x: (resized.1 - size) / 2, size, flip: false }
    }

    pub fn random<R: Rng + ?Sized>(resized: (usize, usize), size: usize, rng: &mut R) -> Self {
        Self {
            y: rng.random_range(0..=resized.0 - size),
            x: rng.random_range(0..=resized.1 - size),
            size,
            flip: rng.random_bool(0.5),
        }
    }

    pub fn apply(&self, p: &Planes) -> Result<Planes> {
        let c = p.crop(self.y, self.x, self.size, self.size)?;
        Ok(if self.flip { c.flip_horizontal() } else { c })
    }

    pub fn apply_flow(&self, f: &FlowField) -> Result<FlowField> {
        let c = f.crop(self.y, self.x, self.size, self.size)?;
        Ok(if self.flip { c.flip_horizontal() } else { c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_dims() {
        assert_eq!(Preprocess::FULL.resized_dims(480, 640), (256, 341));
        assert_eq!(Preprocess::scaled(224), Preprocess::FULL);
        assert_eq!(Preprocess::scaled(32).resize_shorter, 37);
    }

    #[test]
    fn center_crop_of_preprocessed_input_is_identity() {
        let p = Planes::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = Transform::center((2, 2), 2);
        assert_eq!(t.apply(&p).unwrap(), p);
    }
}
