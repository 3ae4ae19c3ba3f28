//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, 0 when both vanish.
    pub fn relative_error(&self) -> f64 {
        let diff = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom < 1e-300 {
            0.0
        } else {
            diff / denom
        }
    }
}

/// Compares the analytic gradient of `loss(input)` against central differences with step `eps`.
///
/// `loss` receives a fresh graph and the input node and must return a scalar node.
pub fn check_gradient<T: Scalar>(
    input: &Tensor<T>,
    eps: f64,
    loss: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone());
    let l = loss(&mut g, x)?;
    let grads = g.backward(l)?;
    let analytic = match grads.get(x) {
        Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; input.numel()],
    };

    let eval = |t: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(t);
        let l = loss(&mut g, x)?;
        Ok(g.value(l).data()[0].as_f64())
    };
    let mut numeric = Vec::with_capacity(input.numel());
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += T::lit(eps);
        let mut minus = input.clone();
        minus.data_mut()[i] -= T::lit(eps);
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(GradCheck { analytic, numeric })
}
