//! Fused rendering kernels: expected translation of sprites, ordered
//! alpha compositing, and expected background crops.

use super::{GradSink, Graph, Op, Var};
use crate::tensor::Tensor;

pub(crate) struct ShiftState {
    sprites: Var,
    px: Var,
    py: Var,
    /// Horizontal pass output `[a, 4, k, 2k]`.
    tmp: Vec<f64>,
}

/// Where each anchor's `patch x patch` canvas lands in the frame, and in
/// which order the anchors of every layer are composited.
#[derive(Clone, Debug)]
pub struct CompositeLayout {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Top-left corner (row, col) of each anchor's canvas; may be negative.
    pub origins: Vec<(isize, isize)>,
    /// `orders[frame][layer]` lists anchor indices back to front.
    pub orders: Vec<Vec<Vec<usize>>>,
}

pub(crate) struct CompositeState {
    layers: Vec<Var>,
    background: Var,
    layout: CompositeLayout,
    /// Canvas colour under each placed patch before it was composited,
    /// `[layer][frame][anchor] -> 3 * patch * patch`.
    under: Vec<Vec<f64>>,
}

/// One candidate background crop, top-left `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub row: usize,
    pub col: usize,
}

pub(crate) struct CropState {
    texture: Var,
    probs: Var,
    windows: Vec<CropWindow>,
    height: usize,
    width: usize,
}

impl Graph<'_> {
    /// Expected image of each sprite under independent categorical shifts.
    ///
    /// `sprites: [a, ch, k, k]`, `px, py: [a, k + 1]` where entry `t` is the
    /// probability of shifting by `t - k/2` pixels. The result
    /// `[a, ch, 2k, 2k]` is the shifted sprite on a canvas whose centre is
    /// the unshifted sprite's centre. Computed separably: columns first,
    /// then rows.
    pub fn soft_shift(&mut self, sprites: Var, px: Var, py: Var) -> Var {
        let vs = self.value(sprites);
        let [a, ch, k, k2] = vs.shape().try_into().expect("soft_shift: sprites must be 4-D");
        assert_eq!(k, k2, "soft_shift: square sprites only");
        assert_eq!(self.value(px).shape(), [a, k + 1]);
        assert_eq!(self.value(py).shape(), [a, k + 1]);
        let (tmp, out) = shift_forward(vs.data(), self.value(px).data(), self.value(py).data(), a, ch, k);
        let needs = self.needs(sprites) || self.needs(px) || self.needs(py);
        let state = ShiftState { sprites, px, py, tmp };
        self.push(Tensor::new(&[a, ch, 2 * k, 2 * k], out), Op::SoftShift(Box::new(state)), needs)
    }

    /// Back-to-front "over" compositing of straight-alpha RGBA patches onto
    /// an opaque RGB background.
    ///
    /// `layers[l]: [frames * anchors, 4, patch, patch]`, `background:
    /// [frames, 3, h, w]`. Returns `[frames, 3, h, w]`. Footprints falling
    /// outside the frame are clipped.
    pub fn composite(&mut self, layers: &[Var], background: Var, layout: CompositeLayout) -> Var {
        let vb = self.value(background);
        let [frames, three, h, w] = vb.shape().try_into().expect("composite: background must be 4-D");
        assert_eq!(three, 3);
        assert_eq!((h, w), (layout.height, layout.width));
        assert_eq!(layout.orders.len(), frames);
        let anchors = layout.origins.len();
        let pp = layout.patch * layout.patch;
        for &l in layers {
            assert_eq!(self.shape(l), [frames * anchors, 4, layout.patch, layout.patch]);
        }

        let mut out = vb.data().to_vec();
        let mut under = vec![Vec::new(); layers.len()];
        for (li, &layer) in layers.iter().enumerate() {
            under[li] = vec![0.0; frames * anchors * 3 * pp];
            let src = self.value(layer).data();
            for f in 0..frames {
                let canvas = &mut out[f * 3 * h * w..(f + 1) * 3 * h * w];
                for &i in &layout.orders[f][li] {
                    let sprite = &src[(f * anchors + i) * 4 * pp..(f * anchors + i + 1) * 4 * pp];
                    let saved = &mut under[li][(f * anchors + i) * 3 * pp..(f * anchors + i + 1) * 3 * pp];
                    for_each_visible(&layout, i, |q, pix| {
                        let alpha = sprite[3 * pp + q];
                        for c in 0..3 {
                            let dst = &mut canvas[c * h * w + pix];
                            saved[c * pp + q] = *dst;
                            *dst = alpha * sprite[c * pp + q] + (1.0 - alpha) * *dst;
                        }
                    });
                }
            }
        }
        let needs = self.needs(background) || layers.iter().any(|&l| self.needs(l));
        let state = CompositeState { layers: layers.to_vec(), background, layout, under };
        self.push(Tensor::new(&[frames, 3, h, w], out), Op::Composite(Box::new(state)), needs)
    }

    /// Probability-weighted mixture of `h x w` windows of `texture: [3, H, W]`;
    /// `probs: [frames, windows]`. Returns `[frames, 3, h, w]`.
    pub fn soft_crop(&mut self, texture: Var, probs: Var, windows: &[CropWindow], h: usize, w: usize) -> Var {
        let vt = self.value(texture);
        let [three, th, tw] = vt.shape().try_into().expect("soft_crop: texture must be [3, H, W]");
        assert_eq!(three, 3);
        let vp = self.value(probs);
        let frames = vp.dim(0);
        assert_eq!(vp.dim(1), windows.len());
        for win in windows {
            assert!(win.row + h <= th && win.col + w <= tw, "soft_crop: window outside texture");
        }
        let mut out = vec![0.0; frames * 3 * h * w];
        for f in 0..frames {
            for (wi, win) in windows.iter().enumerate() {
                let p = vp.data()[f * windows.len() + wi];
                if p == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    for y in 0..h {
                        let src = &vt.data()[(c * th + win.row + y) * tw + win.col..][..w];
                        let dst = &mut out[((f * 3 + c) * h + y) * w..][..w];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += p * s;
                        }
                    }
                }
            }
        }
        let needs = self.needs(texture) || self.needs(probs);
        let state = CropState { texture, probs, windows: windows.to_vec(), height: h, width: w };
        self.push(Tensor::new(&[frames, 3, h, w], out), Op::SoftCrop(Box::new(state)), needs)
    }
}

/// Calls `f(q, pixel)` for every patch-local index `q` of anchor `i` whose
/// frame pixel lies inside the canvas.
#[inline]
fn for_each_visible(layout: &CompositeLayout, i: usize, mut f: impl FnMut(usize, usize)) {
    let (oy, ox) = layout.origins[i];
    let (h, w, p) = (layout.height as isize, layout.width as isize, layout.patch as isize);
    let v0 = (-oy).max(0);
    let v1 = (h - oy).min(p);
    let u0 = (-ox).max(0);
    let u1 = (w - ox).min(p);
    for v in v0..v1 {
        let row = ((oy + v) * w) as usize;
        for u in u0..u1 {
            f((v * p + u) as usize, row + (ox + u) as usize);
        }
    }
}

pub(crate) fn shift_forward(s: &[f64], px: &[f64], py: &[f64], a: usize, ch: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let k2 = 2 * k;
    let taps = k + 1;
    let mut tmp = vec![0.0; a * ch * k * k2];
    for ai in 0..a {
        let wx = &px[ai * taps..(ai + 1) * taps];
        for plane in 0..ch {
            for r in 0..k {
                let src = &s[((ai * ch + plane) * k + r) * k..][..k];
                let dst = &mut tmp[((ai * ch + plane) * k + r) * k2..][..k2];
                for (t, &wt) in wx.iter().enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    for (d, v) in dst[t..t + k].iter_mut().zip(src) {
                        *d += wt * v;
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; a * ch * k2 * k2];
    for ai in 0..a {
        let wy = &py[ai * taps..(ai + 1) * taps];
        for plane in 0..ch {
            let src = &tmp[(ai * ch + plane) * k * k2..][..k * k2];
            let dst = &mut out[(ai * ch + plane) * k2 * k2..][..k2 * k2];
            for (t, &wt) in wy.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                for r in 0..k {
                    let d = &mut dst[(r + t) * k2..(r + t + 1) * k2];
                    for (d, v) in d.iter_mut().zip(&src[r * k2..(r + 1) * k2]) {
                        *d += wt * v;
                    }
                }
            }
        }
    }
    (tmp, out)
}

pub(super) fn shift_backward(graph: &Graph<'_>, st: &ShiftState, dy: &Tensor, sink: &mut GradSink<'_, '_>) {
    let vs = graph.value(st.sprites);
    let [a, ch, k, _] = vs.shape().try_into().unwrap();
    let (k2, taps) = (2 * k, k + 1);
    let px = graph.value(st.px).data();
    let py = graph.value(st.py).data();
    let g = dy.data();

    // Rows pass adjoint.
    let mut dtmp = vec![0.0; a * ch * k * k2];
    let mut dpy = vec![0.0; a * taps];
    for ai in 0..a {
        for plane in 0..ch {
            let gsrc = &g[(ai * ch + plane) * k2 * k2..][..k2 * k2];
            let tmp = &st.tmp[(ai * ch + plane) * k * k2..][..k * k2];
            let dst = &mut dtmp[(ai * ch + plane) * k * k2..][..k * k2];
            for t in 0..taps {
                let wt = py[ai * taps + t];
                let mut acc = 0.0;
                for r in 0..k {
                    let grow = &gsrc[(r + t) * k2..(r + t + 1) * k2];
                    let trow = &tmp[r * k2..(r + 1) * k2];
                    let drow = &mut dst[r * k2..(r + 1) * k2];
                    for u in 0..k2 {
                        drow[u] += wt * grow[u];
                        acc += grow[u] * trow[u];
                    }
                }
                dpy[ai * taps + t] += acc;
            }
        }
    }
    sink.add(st.py, Tensor::new(&[a, taps], dpy));

    // Columns pass adjoint.
    let want_s = sink.wants(st.sprites);
    let mut ds = if want_s { vec![0.0; a * ch * k * k] } else { Vec::new() };
    let mut dpx = vec![0.0; a * taps];
    for ai in 0..a {
        for plane in 0..ch {
            for r in 0..k {
                let src = &vs.data()[((ai * ch + plane) * k + r) * k..][..k];
                let grow = &dtmp[((ai * ch + plane) * k + r) * k2..][..k2];
                for t in 0..taps {
                    let seg = &grow[t..t + k];
                    dpx[ai * taps + t] += seg.iter().zip(src).map(|(x, y)| x * y).sum::<f64>();
                    if want_s {
                        let wt = px[ai * taps + t];
                        let drow = &mut ds[((ai * ch + plane) * k + r) * k..][..k];
                        for (d, gv) in drow.iter_mut().zip(seg) {
                            *d += wt * gv;
                        }
                    }
                }
            }
        }
    }
    sink.add(st.px, Tensor::new(&[a, taps], dpx));
    if want_s {
        sink.add(st.sprites, Tensor::new(vs.shape(), ds));
    }
}

pub(super) fn composite_backward(graph: &Graph<'_>, st: &CompositeState, dy: &Tensor, sink: &mut GradSink<'_, '_>) {
    let layout = &st.layout;
    let (h, w) = (layout.height, layout.width);
    let pp = layout.patch * layout.patch;
    let anchors = layout.origins.len();
    let frames = layout.orders.len();
    let g = dy.data();

    let mut dlayers: Vec<Vec<f64>> =
        st.layers.iter().map(|&l| if sink.wants(l) { vec![0.0; graph.value(l).len()] } else { Vec::new() }).collect();
    let mut dbg = vec![0.0; frames * 3 * h * w];

    for f in 0..frames {
        let gf = &g[f * 3 * h * w..(f + 1) * 3 * h * w];
        // Transmittance from the viewer down to the current depth.
        let mut trans = vec![1.0; h * w];
        for li in (0..st.layers.len()).rev() {
            let src = graph.value(st.layers[li]).data();
            let want = !dlayers[li].is_empty();
            for &i in layout.orders[f][li].iter().rev() {
                let base = (f * anchors + i) * 4 * pp;
                let sprite = &src[base..base + 4 * pp];
                let saved = &st.under[li][(f * anchors + i) * 3 * pp..(f * anchors + i + 1) * 3 * pp];
                let dl = &mut dlayers[li];
                for_each_visible(layout, i, |q, pix| {
                    let alpha = sprite[3 * pp + q];
                    let t = trans[pix];
                    if want {
                        let mut dalpha = 0.0;
                        for c in 0..3 {
                            let gc = gf[c * h * w + pix] * t;
                            dl[base + c * pp + q] += gc * alpha;
                            dalpha += gc * (sprite[c * pp + q] - saved[c * pp + q]);
                        }
                        dl[base + 3 * pp + q] += dalpha;
                    }
                    trans[pix] = t * (1.0 - alpha);
                });
            }
        }
        let db = &mut dbg[f * 3 * h * w..(f + 1) * 3 * h * w];
        for c in 0..3 {
            for pix in 0..h * w {
                db[c * h * w + pix] = gf[c * h * w + pix] * trans[pix];
            }
        }
    }
    for (li, dl) in dlayers.into_iter().enumerate() {
        if !dl.is_empty() {
            let l = st.layers[li];
            sink.add(l, Tensor::new(graph.shape(l), dl));
        }
    }
    sink.add(st.background, Tensor::new(graph.shape(st.background), dbg));
}

pub(super) fn crop_backward(graph: &Graph<'_>, st: &CropState, dy: &Tensor, sink: &mut GradSink<'_, '_>) {
    let vt = graph.value(st.texture);
    let [_, th, tw] = vt.shape().try_into().unwrap();
    let vp = graph.value(st.probs);
    let frames = vp.dim(0);
    let nw = st.windows.len();
    let (h, w) = (st.height, st.width);
    let g = dy.data();
    let want_t = sink.wants(st.texture);
    let mut dtex = if want_t { vec![0.0; vt.len()] } else { Vec::new() };
    let mut dprobs = vec![0.0; frames * nw];
    for f in 0..frames {
        for (wi, win) in st.windows.iter().enumerate() {
            let p = vp.data()[f * nw + wi];
            let mut acc = 0.0;
            for c in 0..3 {
                for y in 0..h {
                    let off = (c * th + win.row + y) * tw + win.col;
                    let grow = &g[((f * 3 + c) * h + y) * w..][..w];
                    let trow = &vt.data()[off..off + w];
                    acc += grow.iter().zip(trow).map(|(a, b)| a * b).sum::<f64>();
                    if want_t && p != 0.0 {
                        for (d, gv) in dtex[off..off + w].iter_mut().zip(grow) {
                            *d += p * gv;
                        }
                    }
                }
            }
            dprobs[f * nw + wi] = acc;
        }
    }
    sink.add(st.probs, Tensor::new(vp.shape(), dprobs));
    if want_t {
        sink.add(st.texture, Tensor::new(vt.shape(), dtex));
    }
}
