//! Per-anchor translation: a small network predicts independent
//! categorical distributions over horizontal and vertical offsets in
//! `[-k/2, k/2]`, and sprites are moved by their expected translation.

use rand::Rng;

use crate::anchors::AnchorLayout;
use crate::autograd::{shift_forward, Graph, PartialMask, Var};
use crate::config::ModelConfig;
use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::nn::{trunk_widths, GroupNorm, Linear, Trunk};
use crate::params::ParamStore;
use crate::sprite::SpritePatch;
use crate::tensor::Tensor;

/// Offset probabilities for one anchor; entry `t` of either axis is the
/// probability of moving by `t - k/2` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetDistribution {
    pub px: Vec<f64>,
    pub py: Vec<f64>,
}

impl OffsetDistribution {
    pub fn new(px: Vec<f64>, py: Vec<f64>) -> Result<Self> {
        if px.len() != py.len() || px.len() < 3 || px.len().is_multiple_of(2) {
            return Err(Error::Shape(format!("offset distributions of length {} and {}", px.len(), py.len())));
        }
        Ok(Self { px, py })
    }

    /// All mass on offset `(dx, dy)`.
    pub fn point(k: usize, dx: i32, dy: i32) -> Self {
        let half = (k / 2) as i32;
        assert!(dx.abs() <= half && dy.abs() <= half, "offset out of range");
        let mut px = vec![0.0; k + 1];
        let mut py = vec![0.0; k + 1];
        px[(dx + half) as usize] = 1.0;
        py[(dy + half) as usize] = 1.0;
        Self { px, py }
    }

    pub fn k(&self) -> usize {
        self.px.len() - 1
    }

    /// Mean offset `(E[dx], E[dy])`.
    pub fn expected(&self) -> (f64, f64) {
        let half = (self.k() / 2) as f64;
        let mean = |p: &[f64]| p.iter().enumerate().map(|(t, &v)| (t as f64 - half) * v).sum::<f64>();
        (mean(&self.px), mean(&self.py))
    }

    /// Most likely offset per axis.
    pub fn hard(&self) -> (i32, i32) {
        (hard_offset(&self.px), hard_offset(&self.py))
    }
}

/// Most probable offset of a `k + 1` entry distribution. Ties go to the
/// smaller magnitude, then to the negative side.
pub fn hard_offset(probs: &[f64]) -> i32 {
    let half = (probs.len() / 2) as i32;
    let mut best_t = 0usize;
    for t in 1..probs.len() {
        let (o, bo) = (t as i32 - half, best_t as i32 - half);
        let better = probs[t] > probs[best_t] || (probs[t] == probs[best_t] && (o.abs(), o) < (bo.abs(), bo));
        if better {
            best_t = t;
        }
    }
    best_t as i32 - half
}

/// Reference expected translation of one sprite onto its `2k x 2k` canvas.
pub fn soft_shift(sprite: &SpritePatch, dist: &OffsetDistribution) -> Result<SpritePatch> {
    let k = sprite.size();
    if dist.k() != k {
        return Err(Error::Shape(format!("offset distribution for k = {} applied to a {k}px sprite", dist.k())));
    }
    let (_, out) = shift_forward(sprite.data(), &dist.px, &dist.py, 1, 4, k);
    Ok(SpritePatch::new(2 * k, out))
}

/// The `k x k` frame window centred on every anchor, `[B * A, 3, k, k]`,
/// zero-filled outside the frame, plus the matching validity mask.
pub fn anchor_crops(frames: &[Frame], layout: &AnchorLayout) -> Result<(Tensor, PartialMask)> {
    let k = layout.k;
    let a = layout.count();
    let kk = k * k;
    let mut data = vec![0.0; frames.len() * a * 3 * kk];
    let mut mask = vec![0.0; frames.len() * a * kk];
    for (b, frame) in frames.iter().enumerate() {
        if (frame.width(), frame.height()) != (layout.width, layout.height) {
            return Err(Error::Shape(format!(
                "frame {}x{} does not match the {}x{} anchor layout",
                frame.width(),
                frame.height(),
                layout.width,
                layout.height
            )));
        }
        let n = layout.width * layout.height;
        for j in 0..a {
            let (oy, ox) = layout.sprite_origin(j);
            let sample = b * a + j;
            for v in 0..k {
                let y = oy + v as isize;
                if y < 0 || y >= layout.height as isize {
                    continue;
                }
                for u in 0..k {
                    let x = ox + u as isize;
                    if x < 0 || x >= layout.width as isize {
                        continue;
                    }
                    let src = y as usize * layout.width + x as usize;
                    for c in 0..3 {
                        data[(sample * 3 + c) * kk + v * k + u] = frame.data()[c * n + src];
                    }
                    mask[sample * kk + v * k + u] = 1.0;
                }
            }
        }
    }
    let n = frames.len() * a;
    Ok((Tensor::new(&[n, 3, k, k], data), PartialMask { n, h: k, w: k, data: mask }))
}

/// Predicts offset distributions from an anchor's frame crop and its
/// sprite.
#[derive(Clone, Debug)]
pub struct OffsetPredictor {
    pub k: usize,
    trunk: Trunk,
    hidden: Linear,
    norm: GroupNorm,
    out: Linear,
    slope: f64,
}

impl OffsetPredictor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let widths = trunk_widths(cfg.trunk_blocks(), cfg.base_width, cfg.width_cap);
        let trunk = Trunk::new(store, "offsets.trunk", 7, &widths, cfg.groups, cfg.leaky_slope, rng);
        let c = *widths.last().expect("k >= 4 gives at least one block");
        Self {
            k: cfg.k,
            trunk,
            hidden: Linear::new(store, "offsets.hidden", c, cfg.d, rng),
            norm: GroupNorm::new(store, "offsets.norm", cfg.d, cfg.groups),
            out: Linear::new(store, "offsets.out", cfg.d, 2 * (cfg.k + 1), rng),
            slope: cfg.leaky_slope,
        }
    }

    /// `crops: [A, 3, k, k]`, `sprites: [A, 4, k, k]` -> `(px, py)`, each
    /// `[A, k + 1]`.
    pub fn forward(&self, g: &mut Graph<'_>, crops: Var, mask: &PartialMask, sprites: Var) -> (Var, Var) {
        let x = g.concat_channels(crops, sprites);
        let (x, _) = self.trunk.forward(g, x, mask.clone());
        let x = g.mean_spatial(x);
        let x = self.hidden.forward(g, x);
        let x = self.norm.forward(g, x);
        let x = g.leaky_relu(x, self.slope);
        let logits = self.out.forward(g, x);
        let n = self.k + 1;
        let lx = g.slice_cols(logits, 0, n);
        let ly = g.slice_cols(logits, n, n);
        (g.softmax(lx), g.softmax(ly))
    }
}
