//! Scalar objectives.

use super::{GradSink, Graph, Op, Var};
use crate::tensor::Tensor;

impl Graph<'_> {
    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "mse: shape mismatch");
        let n = vp.len().max(1) as f64;
        let total: f64 = vp.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let needs = self.needs(pred);
        self.push(Tensor::scalar(total / n), Op::Mse { pred, target: target.clone() }, needs)
    }

    /// Mean over entries of `0.5 * ln(x (1 - x))` with `x` clamped to
    /// `[eps, 1 - eps]`: the Beta(1/2, 1/2) negative log-density up to a
    /// constant.
    pub fn beta_prior(&mut self, x: Var, eps: f64) -> Var {
        let value = beta_prior_value(self.value(x).data(), eps);
        let needs = self.needs(x);
        self.push(Tensor::scalar(value), Op::BetaPrior { x, eps }, needs)
    }
}

pub(crate) fn beta_prior_value(x: &[f64], eps: f64) -> f64 {
    let n = x.len().max(1) as f64;
    x.iter()
        .map(|&v| {
            let c = v.clamp(eps, 1.0 - eps);
            0.5 * (c * (1.0 - c)).ln()
        })
        .sum::<f64>()
        / n
}

pub(super) fn mse_backward(graph: &Graph<'_>, pred: Var, target: &Tensor, dy: &Tensor, sink: &mut GradSink<'_, '_>) {
    let vp = graph.value(pred);
    let scale = 2.0 * dy.item() / vp.len().max(1) as f64;
    let g = vp.data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect();
    sink.add(pred, Tensor::new(vp.shape(), g));
}

pub(super) fn beta_backward(graph: &Graph<'_>, x: Var, eps: f64, dy: &Tensor, sink: &mut GradSink<'_, '_>) {
    let vx = graph.value(x);
    let scale = dy.item() / vx.len().max(1) as f64;
    let g = vx
        .data()
        .iter()
        .map(|&v| if v <= eps || v >= 1.0 - eps { 0.0 } else { scale * 0.5 * (1.0 / v - 1.0 / (1.0 - v)) })
        .collect();
    sink.add(x, Tensor::new(vx.shape(), g));
}
