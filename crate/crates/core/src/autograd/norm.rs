//! Zero-mean / unit-variance normalization and per-channel affine maps.
//!
//! Layer normalization and group normalization share one kernel: both
//! normalize contiguous chunks of the row-major buffer (a whole vector, or
//! the `channels/groups * spatial` block of one group).

use super::{GradSink, Graph, Op, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;

impl Graph<'_> {
    /// Normalizes each contiguous run of `chunk` values to zero mean and unit
    /// (biased) variance. No affine parameters.
    pub fn normalize_chunks(&mut self, x: Var, chunk: usize) -> Var {
        let vx = self.value(x);
        assert!(chunk > 0 && vx.len().is_multiple_of(chunk), "normalize: chunk must divide the tensor");
        let mut out = vx.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / chunk);
        for c in out.chunks_exact_mut(chunk) {
            inv_std.push(normalize_in_place(c, NORM_EPS));
        }
        let out = Tensor::new(vx.shape(), out);
        let needs = self.needs(x);
        self.push(out, Op::Normalize { x, chunk, inv_std }, needs)
    }

    /// Layer normalization of every row of `[n, d]`, no affine.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().expect("layer_norm on empty shape");
        self.normalize_chunks(x, d)
    }

    /// Group normalization of `[n, c, ...]` with per-channel gain and bias.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert!(c % groups == 0, "group_norm: {groups} groups do not divide {c} channels");
        let spatial = self.value(x).len() / (n * c).max(1);
        let normed = self.normalize_chunks(x, c / groups * spatial);
        self.channel_affine(normed, gamma, beta)
    }

    /// `y[n, c, s] = x[n, c, s] * gamma[c] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.dim(0), vx.dim(1));
        let spatial = vx.len() / (n * c).max(1);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let mut out = vx.data().to_vec();
        for (i, block) in out.chunks_exact_mut(spatial).enumerate() {
            let ch = i % c;
            for v in block {
                *v = *v * g[ch] + b[ch];
            }
        }
        let out = Tensor::new(vx.shape(), out);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::ChannelAffine { x, gamma, beta, channels: c, spatial }, needs)
    }
}

/// Normalizes `values` in place and returns `1 / sqrt(var + eps)`.
pub(crate) fn normalize_in_place(values: &mut [f64], eps: f64) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for v in values.iter_mut() {
        *v = (*v - mean) * inv;
    }
    inv
}

pub(super) fn normalize_backward(
    xhat: &Tensor,
    x: Var,
    chunk: usize,
    inv_std: &[f64],
    dy: &Tensor,
    sink: &mut GradSink<'_, '_>,
) {
    let mut dx = vec![0.0; xhat.len()];
    let n = chunk as f64;
    for (((d, y), g), &inv) in
        dx.chunks_exact_mut(chunk).zip(xhat.data().chunks_exact(chunk)).zip(dy.data().chunks_exact(chunk)).zip(inv_std)
    {
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
        for i in 0..chunk {
            d[i] = inv * (g[i] - mean_g - y[i] * mean_gy);
        }
    }
    sink.add(x, Tensor::new(xhat.shape(), dx));
}

#[allow(clippy::too_many_arguments)]
pub(super) fn affine_backward(
    graph: &Graph<'_>,
    x: Var,
    gamma: Var,
    beta: Var,
    channels: usize,
    spatial: usize,
    dy: &Tensor,
    sink: &mut GradSink<'_, '_>,
) {
    let vx = graph.value(x);
    let g = graph.value(gamma).data();
    if sink.wants(x) {
        let mut dx = dy.data().to_vec();
        for (i, block) in dx.chunks_exact_mut(spatial).enumerate() {
            let s = g[i % channels];
            for v in block {
                *v *= s;
            }
        }
        sink.add(x, Tensor::new(vx.shape(), dx));
    }
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (i, (gb, xb)) in dy.data().chunks_exact(spatial).zip(vx.data().chunks_exact(spatial)).enumerate() {
        let ch = i % channels;
        dgamma[ch] += gb.iter().zip(xb).map(|(a, b)| a * b).sum::<f64>();
        dbeta[ch] += gb.iter().sum::<f64>();
    }
    sink.add(gamma, Tensor::new(&[channels], dgamma));
    sink.add(beta, Tensor::new(&[channels], dbeta));
}
