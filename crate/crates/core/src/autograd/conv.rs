//! Strided 2-D convolution with optional partial-convolution masking.
//!
//! With a validity mask `M`, each output is computed from the masked input
//! `X * M` and rescaled by `K*K / sum(M over the window)`; windows without a
//! single valid tap produce 0 and an invalid output mask. Zero padding
//! counts as invalid, so with an all-ones mask the renormalization only
//! affects the border.
//!
//! Implemented as im2col followed by one GEMM for the whole batch.

use super::{GradSink, Graph, Op, Var};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// 3x3, stride 2, pad 1: halves the spatial size (rounding up).
    pub const DOWNSAMPLE: ConvGeometry = ConvGeometry { kernel: 3, stride: 2, pad: 1 };

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Per-pixel validity map `[n, h, w]` with values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialMask {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl PartialMask {
    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        Self { n, h, w, data: vec![1.0; n * h * w] }
    }

    pub fn valid_fraction(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Rescaling factors and propagated mask for one partial convolution.
///
/// Returns `(scale, out_mask)`, both laid out `[n, ho, wo]`; `scale` is
/// already zero wherever the output mask is zero.
pub fn partial_conv_mask(mask: &PartialMask, geom: ConvGeometry) -> (Vec<f64>, PartialMask) {
    let (ho, wo) = (geom.output_size(mask.h), geom.output_size(mask.w));
    let taps = (geom.kernel * geom.kernel) as f64;
    let mut scale = vec![0.0; mask.n * ho * wo];
    let mut out = vec![0.0; mask.n * ho * wo];
    for n in 0..mask.n {
        let m = &mask.data[n * mask.h * mask.w..(n + 1) * mask.h * mask.w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut count = 0.0;
                for ky in 0..geom.kernel {
                    let Some(iy) = tap(oy, ky, geom, mask.h) else { continue };
                    for kx in 0..geom.kernel {
                        if let Some(ix) = tap(ox, kx, geom, mask.w) {
                            count += m[iy * mask.w + ix];
                        }
                    }
                }
                let idx = (n * ho + oy) * wo + ox;
                if count > 0.0 {
                    scale[idx] = taps / count;
                    out[idx] = 1.0;
                }
            }
        }
    }
    (scale, PartialMask { n: mask.n, h: ho, w: wo, data: out })
}

#[inline]
fn tap(o: usize, k: usize, geom: ConvGeometry, size: usize) -> Option<usize> {
    let i = (o * geom.stride + k) as isize - geom.pad as isize;
    (i >= 0 && (i as usize) < size).then_some(i as usize)
}

/// Output positions `lo..hi` whose tap `k` lands inside `0..size`.
fn valid_outputs(k: usize, geom: ConvGeometry, size: usize, outputs: usize) -> (usize, usize) {
    let lo = (0..outputs).find(|&o| tap(o, k, geom, size).is_some()).unwrap_or(outputs);
    let hi = (lo..outputs).find(|&o| tap(o, k, geom, size).is_none()).unwrap_or(outputs);
    (lo, hi)
}

pub(crate) struct ConvState {
    x: Var,
    w: Var,
    b: Var,
    geom: ConvGeometry,
    cols: Vec<f64>,
    in_mask: Option<Vec<f64>>,
    scale: Option<Vec<f64>>,
    out_mask: Option<Vec<f64>>,
}

impl Graph<'_> {
    /// Convolution of `x: [n, c, h, w]` with `w: [o, c, k, k]` plus bias `[o]`.
    ///
    /// When `mask` is given the convolution is partial and the propagated
    /// validity mask is returned alongside the output.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        mask: Option<&PartialMask>,
    ) -> (Var, Option<PartialMask>) {
        let vx = self.value(x);
        let [n, c, h, wd] = vx.shape().try_into().expect("conv2d: input must be 4-D");
        let vw = self.value(w);
        let o = vw.dim(0);
        assert_eq!(vw.shape(), [o, c, geom.kernel, geom.kernel], "conv2d: kernel shape");
        assert_eq!(self.value(b).shape(), [o], "conv2d: bias shape");
        let (ho, wo) = (geom.output_size(h), geom.output_size(wd));
        let p = ho * wo;
        let rows = c * geom.kernel * geom.kernel;

        if let Some(m) = mask {
            assert_eq!((m.n, m.h, m.w), (n, h, wd), "conv2d: mask dims");
        }
        let in_mask = mask.map(|m| m.data.clone());
        let cols = im2col(vx.data(), in_mask.as_deref(), n, c, h, wd, geom);

        let mut tmp = vec![0.0; o * n * p];
        gemm(MatRef::new(vw.data(), o, rows), MatRef::new(&cols, rows, n * p), &mut tmp, 0.0);

        let (scale, out_mask) = match mask {
            Some(m) => {
                let (s, om) = partial_conv_mask(m, geom);
                (Some(s), Some(om))
            }
            None => (None, None),
        };
        let bias = self.value(b).data();
        let mut out = vec![0.0; n * o * p];
        for ni in 0..n {
            for oc in 0..o {
                let dst = &mut out[(ni * o + oc) * p..(ni * o + oc + 1) * p];
                let src = &tmp[oc * n * p + ni * p..oc * n * p + (ni + 1) * p];
                match (&scale, &out_mask) {
                    (Some(s), Some(om)) => {
                        let s = &s[ni * p..(ni + 1) * p];
                        let om = &om.data[ni * p..(ni + 1) * p];
                        for i in 0..p {
                            dst[i] = s[i] * src[i] + om[i] * bias[oc];
                        }
                    }
                    _ => {
                        for i in 0..p {
                            dst[i] = src[i] + bias[oc];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let state =
            ConvState { x, w, b, geom, cols, in_mask, scale, out_mask: out_mask.as_ref().map(|m| m.data.clone()) };
        let var = self.push(Tensor::new(&[n, o, ho, wo], out), Op::Conv(Box::new(state)), needs);
        (var, out_mask)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], mask: Option<&[f64]>, n: usize, c: usize, h: usize, w: usize, geom: ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (geom.output_size(h), geom.output_size(w));
    let p = ho * wo;
    let k = geom.kernel;
    let mut cols = vec![0.0; c * k * k * n * p];
    let xr: Vec<(usize, usize)> = (0..k).map(|kx| valid_outputs(kx, geom, w, wo)).collect();
    let s = geom.stride;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * n * p..(row + 1) * n * p];
                let (lo, hi) = xr[kx];
                for ni in 0..n {
                    let img = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    let m = mask.map(|m| &m[ni * h * w..(ni + 1) * h * w]);
                    for oy in 0..ho {
                        let Some(iy) = tap(oy, ky, geom, h) else { continue };
                        let dst = &mut dst_row[ni * p + oy * wo..ni * p + (oy + 1) * wo];
                        // ix = ox * s + kx - pad for ox in lo..hi
                        let base = iy * w + lo * s + kx - geom.pad;
                        match m {
                            Some(m) => {
                                for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                    let at = base + j * s;
                                    *d = img[at] * m[at];
                                }
                            }
                            None => {
                                for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = img[base + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(super) fn backward(graph: &Graph<'_>, st: &ConvState, dy: &Tensor, sink: &mut GradSink<'_, '_>) {
    let vx = graph.value(st.x);
    let [n, c, h, wd] = vx.shape().try_into().unwrap();
    let vw = graph.value(st.w);
    let o = vw.dim(0);
    let geom = st.geom;
    let (ho, wo) = (geom.output_size(h), geom.output_size(wd));
    let p = ho * wo;
    let k = geom.kernel;
    let rows = c * k * k;
    let g = dy.data();

    // dtmp[o, n*p + i] = dy[n, o, i] * scale[n, i]
    let mut dtmp = vec![0.0; o * n * p];
    let mut db = vec![0.0; o];
    for ni in 0..n {
        for oc in 0..o {
            let src = &g[(ni * o + oc) * p..(ni * o + oc + 1) * p];
            let dst = &mut dtmp[oc * n * p + ni * p..oc * n * p + (ni + 1) * p];
            match (&st.scale, &st.out_mask) {
                (Some(s), Some(om)) => {
                    for i in 0..p {
                        dst[i] = src[i] * s[ni * p + i];
                        db[oc] += src[i] * om[ni * p + i];
                    }
                }
                _ => {
                    dst.copy_from_slice(src);
                    db[oc] += src.iter().sum::<f64>();
                }
            }
        }
    }
    sink.add(st.b, Tensor::new(&[o], db));

    let dtmp_m = MatRef::new(&dtmp, o, n * p);
    if sink.wants(st.w) {
        let buf = sink.buffer(st.w);
        gemm(dtmp_m, MatRef::new(&st.cols, rows, n * p).t(), buf.data_mut(), 1.0);
    }
    if sink.wants(st.x) {
        let mut dcols = vec![0.0; rows * n * p];
        gemm(MatRef::new(vw.data(), o, rows).t(), dtmp_m, &mut dcols, 0.0);
        let buf = sink.buffer(st.x);
        let dx = buf.data_mut();
        let xr: Vec<(usize, usize)> = (0..k).map(|kx| valid_outputs(kx, geom, wd, wo)).collect();
        let s = geom.stride;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &dcols[row * n * p..(row + 1) * n * p];
                    let (lo, hi) = xr[kx];
                    for ni in 0..n {
                        let img = &mut dx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                        let m = st.in_mask.as_ref().map(|m| &m[ni * h * wd..(ni + 1) * h * wd]);
                        for oy in 0..ho {
                            let Some(iy) = tap(oy, ky, geom, h) else { continue };
                            let src = &src_row[ni * p + oy * wo..ni * p + (oy + 1) * wo];
                            let base = iy * wd + lo * s + kx - geom.pad;
                            match m {
                                Some(m) => {
                                    for (j, v) in src[lo..hi].iter().enumerate() {
                                        let at = base + j * s;
                                        img[at] += v * m[at];
                                    }
                                }
                                None => {
                                    for (j, v) in src[lo..hi].iter().enumerate() {
                                        img[base + j * s] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
