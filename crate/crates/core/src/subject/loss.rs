use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::subject::generator::Discriminator;
use crate::subject::map::SubjectMap;

/// Weights of the distillation loss `alpha * L2 + beta * L_adv + L_cls`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KDLossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for KDLossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.05 }
    }
}

impl KDLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!("KD weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Mean squared difference between two maps.
pub fn kd_l2_loss(student: &SubjectMap, teacher: &SubjectMap) -> Result<f64> {
    if student.dims() != teacher.dims() {
        return Err(Error::dims(teacher.dims(), student.dims()));
    }
    let n = student.values().len().max(1) as f64;
    Ok(student.values().iter().zip(teacher.values()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / n)
}

/// Least-squares GAN objectives from critic scores:
/// `(0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2), 0.5 * mean((fake - 1)^2))`.
pub fn lsgan_losses(real_scores: &[f64], fake_scores: &[f64]) -> (f64, f64) {
    let half_mse = |s: &[f64], t: f64| 0.5 * s.iter().map(|v| (v - t).powi(2)).sum::<f64>() / s.len().max(1) as f64;
    (half_mse(real_scores, 1.0) + half_mse(fake_scores, 0.0), half_mse(fake_scores, 1.0))
}

/// In-graph form of [`lsgan_losses`]. Detach `fake_scores` before building the
/// critic loss when it must not reach the generator.
pub fn lsgan_terms<T: Scalar>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var) -> Result<(Var, Var)> {
    let r = g.half_mse_to(real_scores, T::one());
    let f = g.half_mse_to(fake_scores, T::zero());
    let disc = g.add(r, f)?;
    let gen = g.half_mse_to(fake_scores, T::one());
    Ok((disc, gen))
}

/// Critic and generator losses for teacher (real) and student (fake) maps of the same frames.
pub fn adversarial_losses<T: Scalar>(
    disc: &Discriminator,
    store: &ParamStore<T>,
    frames: &[crate::media::FrameImage],
    real: &[SubjectMap],
    fake: &[SubjectMap],
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let x = g.input(crate::media::Planes::batch(frames.iter().map(|f| f.planes()))?);
    let r = g.input(SubjectMap::batch(real)?);
    let f = g.input(SubjectMap::batch(fake)?);
    let dr = disc.forward(&mut g, store, r, x)?;
    let df = disc.forward(&mut g, store, f, x)?;
    let (d, gl) = lsgan_terms(&mut g, dr, df)?;
    Ok((g.value(d).data()[0].as_f64(), g.value(gl).data()[0].as_f64()))
}

/// `alpha * l2 + beta * adv + cls`
pub fn kd_total_loss(l2: f64, adv: f64, cls: f64, w: KDLossWeights) -> f64 {
    w.alpha * l2 + w.beta * adv + cls
}

/// In-graph `alpha * l2 + beta * adv` (the classification term is added by the caller).
pub fn kd_terms<T: Scalar>(g: &mut Graph<T>, l2: Var, adv: Var, w: KDLossWeights) -> Result<Var> {
    let a = g.scale(l2, T::lit(w.alpha));
    let b = g.scale(adv, T::lit(w.beta));
    g.add(a, b)
}
