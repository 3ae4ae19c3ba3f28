use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::media::frame::{FrameImage, Planes};
use crate::subject::SubjectMap;

/// Which part of the frame feeds the guidance branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// No guidance branch.
    Off,
    /// `map * frame`
    Subject,
    /// `(1 - map) * frame`
    Background,
}

impl GuidanceMode {
    /// Subject guidance for scale, background guidance for movement.
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Scale => GuidanceMode::Subject,
            Task::Movement => GuidanceMode::Background,
        }
    }
}

/// Splits a pixel value into `(subject, background)` parts with `m * v` and
/// `(1 - m) * v` as targets. The larger part is the rounded product and the
/// smaller one is the exact remainder, so the two always sum back to `v`.
#[inline]
pub fn split_value(v: f32, m: f32) -> (f32, f32) {
    if m >= 0.5 {
        let s = v * m;
        (s, v - s)
    } else {
        let b = v * (1.0 - m);
        (v - b, b)
    }
}

/// Multiplies every channel of `planes` by the mask (or its complement).
///
/// Works for RGB frames and stacked flow alike.
pub fn apply_guidance(planes: &Planes, map: &SubjectMap, mode: GuidanceMode) -> Result<Planes> {
    if planes.dims() != map.dims() {
        return Err(Error::dims(map.dims(), planes.dims()));
    }
    let m = map.values();
    let n = m.len();
    let mut out = planes.clone();
    for c in 0..planes.channels {
        let dst = &mut out.data[c * n..(c + 1) * n];
        match mode {
            GuidanceMode::Off => {}
            GuidanceMode::Subject => dst.iter_mut().zip(m).for_each(|(v, &w)| *v = split_value(*v, w).0),
            GuidanceMode::Background => dst.iter_mut().zip(m).for_each(|(v, &w)| *v = split_value(*v, w).1),
        }
    }
    Ok(out)
}

/// `(guidance_image, whole_image)` for a task: the subject image for scale,
/// the background image for movement. The whole image is passed through.
pub fn make_guidance_inputs(frame: &FrameImage, map: &SubjectMap, task: Task) -> Result<(Planes, FrameImage)> {
    let guide = apply_guidance(frame.planes(), map, GuidanceMode::default_for(task))?;
    Ok((guide, frame.clone()))
}
