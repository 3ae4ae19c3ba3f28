//! Distillation training steps for the student generator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::optim::clip_grad_norm;
use crate::nn::{Adam, Graph, Optimizer, ParamStore, Var};
use crate::scalar::Scalar;
use crate::subject::generator::{Discriminator, StudentGenerator};
use crate::subject::loss::{kd_terms, lsgan_terms, KDLossWeights};
use crate::tensor::Tensor;

/// Loss values of one distillation step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KdStats {
    pub l2: f64,
    pub gen_adv: f64,
    pub disc: f64,
    /// `alpha * l2 + beta * gen_adv` (plus any classification term folded in by the caller).
    pub total: f64,
}

/// Step sizes and loss weights for distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdSettings {
    pub weights: KDLossWeights,
    pub lr: f64,
    /// The critic learns more slowly than the generator and its gradient norm is capped.
    pub disc_lr: f64,
    pub disc_clip: f64,
}

impl Default for KdSettings {
    fn default() -> Self {
        Self { weights: KDLossWeights::default(), lr: 0.002, disc_lr: 4e-5, disc_clip: 1.0 }
    }
}

/// Adam with `beta1 = 0.5`, the optimizer the [`KdSettings`] defaults are tuned for.
pub fn kd_optimizer<T: Scalar>() -> Adam<T> {
    Adam::new(T::lit(0.5), T::lit(0.999))
}

/// Gradients of parameters under `prefix.`.
pub fn grads_with_prefix<T: Scalar>(grads: BTreeMap<String, Tensor<T>>, prefix: &str) -> BTreeMap<String, Tensor<T>> {
    let p = format!("{prefix}.");
    grads.into_iter().filter(|(k, _)| k.starts_with(&p)).collect()
}

/// Generator-side distillation terms inside an existing graph.
///
/// Returns `(alpha * l2 + beta * gen_adv, l2, gen_adv)`. The critic is evaluated
/// on the live student map so its gradient reaches the generator; callers must
/// drop the critic's own gradients from this graph.
pub fn generator_kd_terms<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    disc: &Discriminator,
    frames: Var,
    student: Var,
    teacher: Var,
    weights: KDLossWeights,
) -> Result<(Var, Var, Var)> {
    let l2 = g.mse(student, teacher)?;
    let d_fake = disc.forward(g, store, student, frames)?;
    let adv = g.half_mse_to(d_fake, T::one());
    Ok((kd_terms(g, l2, adv, weights)?, l2, adv))
}

/// One critic update on teacher maps (real) against detached student maps (fake).
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step<T: Scalar>(
    disc: &Discriminator,
    store: &mut ParamStore<T>,
    opt: &mut impl Optimizer<T>,
    frames: &Tensor<T>,
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    lr: T,
    clip: T,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(frames.clone());
    let real = g.input(teacher.clone());
    let fake = g.input(student.clone());
    let dr = disc.forward(&mut g, store, real, x)?;
    let df = disc.forward(&mut g, store, fake, x)?;
    let (loss, _) = lsgan_terms(&mut g, dr, df)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: 0, detail: format!("discriminator loss {value}") });
    }
    let grads = g.backward(loss)?;
    let mut grads = grads_with_prefix(g.param_grads(&grads), &disc.prefix);
    clip_grad_norm(&mut grads, clip);
    opt.step(store, &grads, lr);
    Ok(value)
}

/// One generator update followed by one critic update on a batch.
///
/// `frames` is `[B, 3, H, W]` and `teacher` is `[B, 1, H, W]`.
pub fn kd_step<T: Scalar>(
    gen: &StudentGenerator,
    disc: &Discriminator,
    store: &mut ParamStore<T>,
    opt: &mut impl Optimizer<T>,
    frames: &Tensor<T>,
    teacher: &Tensor<T>,
    settings: &KdSettings,
) -> Result<KdStats> {
    let mut g = Graph::new();
    let x = g.input(frames.clone());
    let t = g.input(teacher.clone());
    let s = gen.forward(&mut g, store, x)?;
    let (total, l2, adv) = generator_kd_terms(&mut g, store, disc, x, s, t, settings.weights)?;
    let mut stats = KdStats {
        l2: g.value(l2).data()[0].as_f64(),
        gen_adv: g.value(adv).data()[0].as_f64(),
        total: g.value(total).data()[0].as_f64(),
        disc: 0.0,
    };
    if !stats.total.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: 0, detail: format!("distillation loss {stats:?}") });
    }
    let grads = g.backward(total)?;
    let grads = grads_with_prefix(g.param_grads(&grads), &gen.prefix);
    opt.step(store, &grads, T::lit(settings.lr));

    let student = g.value(s).clone();
    stats.disc =
        discriminator_step(disc, store, opt, frames, teacher, &student, T::lit(settings.disc_lr), T::lit(settings.disc_clip))?;
    Ok(stats)
}
