//! Planar float images: RGB frames, flow fields and single-channel maps.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::nn::graph::bilinear_taps;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `channels x height x width` row-major `f32` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dims(channels * height * width, data.len()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Bilinear resize of every plane. Same-size resize is an exact copy.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let ty = bilinear_taps(self.height, height);
        let tx = bilinear_taps(self.width, width);
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let p = self.plane(c);
            let w = self.width;
            for &(y0, y1, ly) in &ty {
                let ly = ly as f32;
                for &(x0, x1, lx) in &tx {
                    let lx = lx as f32;
                    let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                    let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                    data.push(top * (1.0 - ly) + bot * ly);
                }
            }
        }
        Self { channels: self.channels, height, width, data }
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if y + height > self.height || x + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{y}+{x} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let p = self.plane(c);
            for row in y..y + height {
                data.extend_from_slice(&p[row * self.width + x..row * self.width + x + width]);
            }
        }
        Ok(Self { channels: self.channels, height, width, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks planes of identical size into an `[N, C, H, W]` tensor.
    pub fn batch<'a, T: Scalar>(items: impl IntoIterator<Item = &'a Planes>) -> Result<Tensor<T>> {
        let mut iter = items.into_iter().peekable();
        let first = iter.peek().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::new();
        let mut n = 0;
        for p in iter {
            if (p.channels, p.height, p.width) != (c, h, w) {
                return Err(Error::dims((c, h, w), (p.channels, p.height, p.width)));
            }
            data.extend(p.data.iter().map(|&v| T::from_f32(v).unwrap_or_else(T::nan)));
            n += 1;
        }
        Tensor::from_vec(&[n, c, h, w], data)
    }

    /// Splits an `[N, C, H, W]` tensor back into planes.
    pub fn unbatch<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Planes>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::dims("[N,C,H,W]", s));
        }
        let per = s[1] * s[2] * s[3];
        Ok(t.data()
            .chunks(per)
            .map(|chunk| Planes {
                channels: s[1],
                height: s[2],
                width: s[3],
                data: chunk.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
            .collect())
    }
}

/// Three-channel RGB frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage(Planes);

impl FrameImage {
    pub fn new(planes: Planes) -> Result<Self> {
        if planes.channels != 3 {
            return Err(Error::dims("3 channels", planes.channels));
        }
        Ok(Self(planes))
    }

    /// From interleaved RGB8 pixels.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::dims(height * width * 3, rgb.len()));
        }
        let n = height * width;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(Self(Planes { channels: 3, height, width, data }))
    }

    /// Interleaved RGB8, rounding and clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.0.height * self.0.width;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push((self.0.data[c * n + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn planes(&self) -> &Planes {
        &self.0
    }

    pub fn into_planes(self) -> Planes {
        self.0
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Vec<f32> {
        let (r, g, b) = (self.0.plane(0), self.0.plane(1), self.0.plane(2));
        r.iter().zip(g).zip(b).map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
    }
}

impl Deref for FrameImage {
    type Target = Planes;

    fn deref(&self) -> &Planes {
        &self.0
    }
}

/// Dense displacement field: channel 0 is dx, channel 1 is dy, in pixels per frame step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Planes);

impl FlowField {
    pub fn new(planes: Planes) -> Result<Self> {
        if planes.channels != 2 {
            return Err(Error::dims("2 channels", planes.channels));
        }
        Ok(Self(planes))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Planes::filled(2, height, width, 0.0))
    }

    pub fn dx(&self) -> &[f32] {
        self.0.plane(0)
    }

    pub fn dy(&self) -> &[f32] {
        self.0.plane(1)
    }

    pub fn planes(&self) -> &Planes {
        &self.0
    }

    pub fn max_magnitude(&self) -> f32 {
        self.dx().iter().zip(self.dy()).map(|(x, y)| (x * x + y * y).sqrt()).fold(0.0, f32::max)
    }

    /// Resamples to a new size, scaling displacements with the grid.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let mut p = self.0.resize(height, width);
        let sx = width as f32 / self.0.width as f32;
        let sy = height as f32 / self.0.height as f32;
        p.plane_mut(0).iter_mut().for_each(|v| *v *= sx);
        p.plane_mut(1).iter_mut().for_each(|v| *v *= sy);
        Self(p)
    }

    /// Mirrors the field; horizontal displacements change sign.
    pub fn flip_horizontal(&self) -> Self {
        let mut p = self.0.flip_horizontal();
        p.plane_mut(0).iter_mut().for_each(|v| *v = -*v);
        Self(p)
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        Ok(Self(self.0.crop(y, x, height, width)?))
    }
}

impl Deref for FlowField {
    type Target = Planes;

    fn deref(&self) -> &Planes {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let p = Planes::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(p.resize(2, 3), p);
    }

    #[test]
    fn rgb8_round_trip() {
        let rgb: Vec<u8> = (0..12).map(|v| v * 20).collect();
        let f = FrameImage::from_rgb8(2, 2, &rgb).unwrap();
        assert_eq!(f.to_rgb8(), rgb);
    }

    #[test]
    fn flow_flip_negates_dx() {
        let p = Planes::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = FlowField::new(p).unwrap().flip_horizontal();
        assert_eq!(f.dx(), &[-2.0, -1.0]);
        assert_eq!(f.dy(), &[4.0, 3.0]);
    }
}
