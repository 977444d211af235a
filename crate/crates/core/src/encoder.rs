//! Frame encoder: a shared downsampling trunk maps a frame to one feature
//! vector and one on/off switch per anchor and layer.

use rand::Rng;

use crate::anchors::AnchorLayout;
use crate::autograd::{Graph, PartialMask, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{trunk_widths, GroupNorm, Linear, Trunk};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
struct LayerHead {
    project: Linear,
    switch_hidden: Linear,
    switch_norm: GroupNorm,
    switch_out: Linear,
    feature: Linear,
}

#[derive(Clone, Debug)]
pub struct FrameEncoder {
    trunk: Trunk,
    heads: Vec<LayerHead>,
    slope: f64,
}

/// Per-layer encoder outputs for a batch of `B` frames with `A` anchors.
#[derive(Clone, Copy, Debug)]
pub struct EncodedLayer {
    /// `[B * A, d]`, layer-normalized.
    pub features: Var,
    /// `[B * A, 1]` in `(0, 1)`.
    pub switches: Var,
}

impl FrameEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let widths = trunk_widths(cfg.trunk_blocks(), cfg.base_width, cfg.width_cap);
        let trunk = Trunk::new(store, "encoder.trunk", 3, &widths, cfg.groups, cfg.leaky_slope, rng);
        let c = *widths.last().expect("k >= 4 gives at least one block");
        let d = cfg.d;
        let heads = (0..cfg.layers)
            .map(|l| {
                let name = format!("encoder.layer{l}");
                LayerHead {
                    project: Linear::new(store, &format!("{name}.project"), c, d, rng),
                    switch_hidden: Linear::new(store, &format!("{name}.switch.hidden"), d, d, rng),
                    switch_norm: GroupNorm::new(store, &format!("{name}.switch.norm"), d, cfg.groups),
                    switch_out: Linear::new(store, &format!("{name}.switch.out"), d, 1, rng),
                    feature: Linear::new(store, &format!("{name}.feature"), d, d, rng),
                }
            })
            .collect();
        Self { trunk, heads, slope: cfg.leaky_slope }
    }

    pub fn layers(&self) -> usize {
        self.heads.len()
    }

    /// Encodes `frames: [B, 3, h, w]`; anchors are ordered row-major within
    /// each frame, frames consecutive.
    pub fn encode(&self, g: &mut Graph<'_>, frames: Var, layout: &AnchorLayout) -> Result<Vec<EncodedLayer>> {
        let shape = g.shape(frames).to_vec();
        let [b, c, h, w]: [usize; 4] = shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::Shape(format!("encoder input must be [B, 3, h, w], got {shape:?}")))?;
        if c != 3 || (w, h) != (layout.width, layout.height) {
            return Err(Error::Shape(format!(
                "encoder built for 3x{}x{} frames, got {c}x{h}x{w}",
                layout.height, layout.width
            )));
        }
        let (x, _) = self.trunk.forward(g, frames, PartialMask::ones(b, h, w));
        let trunk_shape = g.shape(x).to_vec();
        debug_assert_eq!(trunk_shape[2..], [layout.grid_h, layout.grid_w]);
        let sites = g.channels_last(x);
        let mut out = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let p = head.project.forward(g, sites);
            let inter = g.layer_norm(p);

            let s = head.switch_hidden.forward(g, inter);
            let s = head.switch_norm.forward(g, s);
            let s = g.leaky_relu(s, self.slope);
            let s = head.switch_out.forward(g, s);
            let switches = g.sigmoid(s);

            let f = head.feature.forward(g, inter);
            let features = g.layer_norm(f);
            out.push(EncodedLayer { features, switches });
        }
        Ok(out)
    }
}
