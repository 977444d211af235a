//! Dense operators: element-wise maps, products, reshaping, softmax.

use super::{GradSink, Graph, Op, Var};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph<'_> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu(x, slope), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// `x @ w^T + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.shape().len(), 2, "linear: input must be 2-D");
        let (n, fan_in) = (vx.dim(0), vx.dim(1));
        let fan_out = vw.dim(0);
        assert_eq!(vw.shape(), [fan_out, fan_in], "linear: weight shape");
        let mut out = vec![0.0; n * fan_out];
        gemm(MatRef::new(vx.data(), n, fan_in), MatRef::new(vw.data(), fan_out, fan_in).t(), &mut out, 0.0);
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.shape(), [fan_out], "linear: bias shape");
            for row in out.chunks_exact_mut(fan_out) {
                for (o, bias) in row.iter_mut().zip(vb.data()) {
                    *o += bias;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&[n, fan_out], out), Op::Linear { x, w, b }, needs)
    }

    /// Plain `a @ b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.dim(0), va.dim(1));
        assert_eq!(vb.dim(0), k, "matmul: inner dimension");
        let n = vb.dim(1);
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(va.data(), m, k), MatRef::new(vb.data(), k, n), &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), needs)
    }

    /// Multiplies row `i` of `x: [n, f]` by `s[i]`, where `s` has `n` elements.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let n = vx.dim(0);
        assert_eq!(vs.len(), n, "scale_rows: one factor per row");
        let f = vx.len() / n.max(1);
        let mut out = vx.data().to_vec();
        for (row, &factor) in out.chunks_exact_mut(f.max(1)).zip(vs.data()) {
            for v in row {
                *v *= factor;
            }
        }
        let out = Tensor::new(vx.shape(), out);
        let needs = self.needs(x) || self.needs(s);
        self.push(out, Op::ScaleRows { x, s }, needs)
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let width = *vx.shape().last().expect("softmax on a non-empty shape");
        let mut out = vx.data().to_vec();
        for row in out.chunks_exact_mut(width) {
            softmax_in_place(row);
        }
        let out = Tensor::new(vx.shape(), out);
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (n, f) = (vx.dim(0), vx.dim(1));
        assert!(start + len <= f, "slice_cols out of range");
        let mut out = Vec::with_capacity(n * len);
        for row in vx.data().chunks_exact(f) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let needs = self.needs(x);
        self.push(Tensor::new(&[n, len], out), Op::SliceCols { x, start }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs)
    }

    /// `[n, c, s] -> [n * s, c]`: one row per spatial site.
    pub fn channels_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.dim(0), vx.dim(1));
        let s = vx.len() / (n * c).max(1);
        let src = vx.data();
        let mut out = vec![0.0; vx.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..s {
                    out[(b * s + p) * c + ch] = src[(b * c + ch) * s + p];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(&[n * s, c], out), Op::ChannelsLast { x, channels: c, spatial: s }, needs)
    }

    /// Global average over every axis after the second: `[n, c, ...] -> [n, c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.dim(0), vx.dim(1));
        let s = vx.len() / (n * c).max(1);
        let out: Vec<f64> = vx.data().chunks_exact(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(&[n, c], out), Op::MeanSpatial { x, spatial: s }, needs)
    }

    /// Concatenates `[n, ca, ...]` and `[n, cb, ...]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.dim(0);
        assert_eq!(vb.dim(0), n);
        assert_eq!(va.shape()[2..], vb.shape()[2..], "concat: spatial dims differ");
        let (ca, cb) = (va.dim(1), vb.dim(1));
        let s: usize = va.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for i in 0..n {
            out.extend_from_slice(&va.data()[i * ca * s..(i + 1) * ca * s]);
            out.extend_from_slice(&vb.data()[i * cb * s..(i + 1) * cb * s]);
        }
        let mut shape = va.shape().to_vec();
        shape[1] = ca + cb;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out), Op::ConcatChannels { a, b, ca, cb, spatial: s }, needs)
    }

    /// Selects rows of a 2-D table (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let vt = self.value(table);
        let f = vt.dim(1);
        let mut out = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            out.extend_from_slice(&vt.data()[r * f..(r + 1) * f]);
        }
        let needs = self.needs(table);
        self.push(Tensor::new(&[rows.len(), f], out), Op::GatherRows { table, rows: rows.to_vec() }, needs)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(super) fn backward(graph: &Graph<'_>, out: &Tensor, op: &Op, dy: &Tensor, sink: &mut GradSink<'_, '_>) {
    match *op {
        Op::Add(a, b) => {
            sink.add(a, dy.clone());
            sink.add(b, dy.clone());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (graph.value(a), graph.value(b));
            if sink.wants(a) {
                sink.add(a, zip_map(dy, vb, |g, y| g * y));
            }
            if sink.wants(b) {
                sink.add(b, zip_map(dy, va, |g, x| g * x));
            }
        }
        Op::Scale(x, factor) => sink.add(x, dy.map(|g| g * factor)),
        Op::Relu(x) => sink.add(x, zip_map(dy, out, |g, y| if y > 0.0 { g } else { 0.0 })),
        Op::LeakyRelu(x, slope) => {
            let vx = graph.value(x);
            sink.add(x, zip_map(dy, vx, |g, v| if v > 0.0 { g } else { slope * g }));
        }
        Op::Sigmoid(x) => sink.add(x, zip_map(dy, out, |g, y| g * y * (1.0 - y))),
        Op::Linear { x, w, b } => {
            let (vx, vw) = (graph.value(x), graph.value(w));
            let (n, fan_in) = (vx.dim(0), vx.dim(1));
            let fan_out = vw.dim(0);
            let dym = MatRef::new(dy.data(), n, fan_out);
            if sink.wants(x) {
                let mut dx = vec![0.0; n * fan_in];
                gemm(dym, MatRef::new(vw.data(), fan_out, fan_in), &mut dx, 0.0);
                sink.add(x, Tensor::new(vx.shape(), dx));
            }
            if sink.wants(w) {
                let buf = sink.buffer(w);
                gemm(dym.t(), MatRef::new(vx.data(), n, fan_in), buf.data_mut(), 1.0);
            }
            if let Some(b) = b {
                if sink.wants(b) {
                    let mut db = vec![0.0; fan_out];
                    for row in dy.data().chunks_exact(fan_out) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    sink.add(b, Tensor::new(&[fan_out], db));
                }
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (graph.value(a), graph.value(b));
            let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
            let dym = MatRef::new(dy.data(), m, n);
            if sink.wants(a) {
                let buf = sink.buffer(a);
                gemm(dym, MatRef::new(vb.data(), k, n).t(), buf.data_mut(), 1.0);
            }
            if sink.wants(b) {
                let buf = sink.buffer(b);
                gemm(MatRef::new(va.data(), m, k).t(), dym, buf.data_mut(), 1.0);
            }
        }
        Op::ScaleRows { x, s } => {
            let (vx, vs) = (graph.value(x), graph.value(s));
            let n = vx.dim(0);
            let f = (vx.len() / n.max(1)).max(1);
            if sink.wants(x) {
                let mut dx = dy.data().to_vec();
                for (row, &factor) in dx.chunks_exact_mut(f).zip(vs.data()) {
                    for v in row {
                        *v *= factor;
                    }
                }
                sink.add(x, Tensor::new(vx.shape(), dx));
            }
            if sink.wants(s) {
                let ds: Vec<f64> = dy
                    .data()
                    .chunks_exact(f)
                    .zip(vx.data().chunks_exact(f))
                    .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum())
                    .collect();
                sink.add(s, Tensor::new(vs.shape(), ds));
            }
        }
        Op::Softmax(x) => {
            let width = *out.shape().last().unwrap();
            let mut dx = vec![0.0; out.len()];
            for ((d, y), g) in
                dx.chunks_exact_mut(width).zip(out.data().chunks_exact(width)).zip(dy.data().chunks_exact(width))
            {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for i in 0..width {
                    d[i] = y[i] * (g[i] - dot);
                }
            }
            sink.add(x, Tensor::new(out.shape(), dx));
        }
        Op::SliceCols { x, start } => {
            let vx = graph.value(x);
            let (n, f) = (vx.dim(0), vx.dim(1));
            let len = out.dim(1);
            let buf = sink.buffer(x);
            for i in 0..n {
                let dst = &mut buf.data_mut()[i * f + start..i * f + start + len];
                for (d, g) in dst.iter_mut().zip(&dy.data()[i * len..(i + 1) * len]) {
                    *d += g;
                }
            }
        }
        Op::Reshape(x) => {
            let shape = graph.shape(x).to_vec();
            sink.add(x, dy.clone().reshape(&shape));
        }
        Op::ChannelsLast { x, channels: c, spatial: s } => {
            let n = graph.shape(x)[0];
            let mut dx = vec![0.0; dy.len()];
            let g = dy.data();
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..s {
                        dx[(b * c + ch) * s + p] = g[(b * s + p) * c + ch];
                    }
                }
            }
            sink.add(x, Tensor::new(graph.shape(x), dx));
        }
        Op::MeanSpatial { x, spatial } => {
            let inv = 1.0 / spatial as f64;
            let dx: Vec<f64> = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, spatial)).collect();
            sink.add(x, Tensor::new(graph.shape(x), dx));
        }
        Op::ConcatChannels { a, b, ca, cb, spatial } => {
            let n = out.dim(0);
            let (la, lb) = (ca * spatial, cb * spatial);
            let g = dy.data();
            if sink.wants(a) {
                let mut da = Vec::with_capacity(n * la);
                for i in 0..n {
                    da.extend_from_slice(&g[i * (la + lb)..i * (la + lb) + la]);
                }
                sink.add(a, Tensor::new(graph.shape(a), da));
            }
            if sink.wants(b) {
                let mut db = Vec::with_capacity(n * lb);
                for i in 0..n {
                    db.extend_from_slice(&g[i * (la + lb) + la..(i + 1) * (la + lb)]);
                }
                sink.add(b, Tensor::new(graph.shape(b), db));
            }
        }
        Op::GatherRows { table, ref rows } => {
            let f = out.dim(1);
            let buf = sink.buffer(table);
            for (i, &r) in rows.iter().enumerate() {
                let dst = &mut buf.data_mut()[r * f..(r + 1) * f];
                for (d, g) in dst.iter_mut().zip(&dy.data()[i * f..(i + 1) * f]) {
                    *d += g;
                }
            }
        }
        _ => unreachable!("operator dispatched to the wrong backward"),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}
