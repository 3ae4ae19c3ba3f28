use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::frame::Planes;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    Student,
    Teacher,
    Oracle,
}

/// Single-channel soft subject mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMap {
    mask: Planes,
    pub source: MapSource,
}

impl SubjectMap {
    pub fn new(mask: Planes, source: MapSource) -> Result<Self> {
        if mask.channels != 1 {
            return Err(Error::dims("1 channel", mask.channels));
        }
        if let Some(v) = mask.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("subject map value {v} outside [0, 1]")));
        }
        Ok(Self { mask, source })
    }

    pub fn filled(height: usize, width: usize, value: f32, source: MapSource) -> Self {
        Self { mask: Planes::filled(1, height, width, value.clamp(0.0, 1.0)), source }
    }

    pub fn mask(&self) -> &Planes {
        &self.mask
    }

    pub fn values(&self) -> &[f32] {
        &self.mask.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    /// Mask-weighted center `(x, y)` in pixel coordinates; the frame center for an empty mask.
    pub fn centroid(&self) -> (f32, f32) {
        let (h, w) = self.dims();
        let (mut sx, mut sy, mut total) = (0.0f64, 0.0f64, 0.0f64);
        for (i, &m) in self.mask.data.iter().enumerate() {
            sx += m as f64 * ((i % w) as f64 + 0.5);
            sy += m as f64 * ((i / w) as f64 + 0.5);
            total += m as f64;
        }
        if total <= 1e-9 {
            return (w as f32 / 2.0, h as f32 / 2.0);
        }
        ((sx / total) as f32, (sy / total) as f32)
    }

    /// `[N, 1, H, W]` batch of maps.
    pub fn batch<T: Scalar>(maps: &[SubjectMap]) -> Result<Tensor<T>> {
        Planes::batch(maps.iter().map(|m| &m.mask))
    }

    /// Splits a `[N, 1, H, W]` tensor, clamping to `[0, 1]`.
    pub fn unbatch<T: Scalar>(t: &Tensor<T>, source: MapSource) -> Result<Vec<SubjectMap>> {
        Planes::unbatch(t)?
            .into_iter()
            .map(|mut p| {
                p.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                SubjectMap::new(p, source)
            })
            .collect()
    }
}
