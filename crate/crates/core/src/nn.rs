//! Parameterized building blocks shared by the encoder, the sprite
//! generator and the offset predictor.

use rand::Rng;

use crate::autograd::{ConvGeometry, Graph, PartialMask, Var};
use crate::params::{fan_in_uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected layer, weights `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight =
            store.add(format!("{name}.weight"), ParamGroup::Network, fan_in_uniform(&[fan_out, fan_in], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), ParamGroup::Network, fan_in_uniform(&[fan_out], fan_in, rng));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gain: ParamId,
    pub shift: ParamId,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), ParamGroup::Network, Tensor::full(&[channels], 1.0));
        let shift = store.add(format!("{name}.shift"), ParamGroup::Network, Tensor::zeros(&[channels]));
        Self { groups, gain, shift }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        g.group_norm(x, self.groups, gain, shift)
    }
}

/// Partial 3x3 stride-2 convolution, group normalization, leaky ReLU.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: GroupNorm,
    pub slope: f64,
}

impl DownBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * 9;
        let kernel = store.add(
            format!("{name}.conv.weight"),
            ParamGroup::Network,
            fan_in_uniform(&[out_channels, in_channels, 3, 3], fan_in, rng),
        );
        let bias =
            store.add(format!("{name}.conv.bias"), ParamGroup::Network, fan_in_uniform(&[out_channels], fan_in, rng));
        let norm = GroupNorm::new(store, &format!("{name}.norm"), out_channels, groups);
        Self { kernel, bias, norm, slope }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: &PartialMask) -> (Var, PartialMask) {
        let w = g.param(self.kernel);
        let b = g.param(self.bias);
        let (y, out_mask) = g.conv2d(x, w, b, ConvGeometry::DOWNSAMPLE, Some(mask));
        let y = self.norm.forward(g, y);
        let y = g.leaky_relu(y, self.slope);
        (y, out_mask.expect("partial convolution returns a mask"))
    }
}

/// Channel widths of a trunk of `blocks` downsampling blocks: `base`,
/// doubling each block, capped at `cap`.
pub fn trunk_widths(blocks: usize, base: usize, cap: usize) -> Vec<usize> {
    (0..blocks).map(|i| (base << i).min(cap)).collect()
}

/// Stack of [`DownBlock`]s.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub blocks: Vec<DownBlock>,
}

impl Trunk {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        widths: &[usize],
        groups: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut c = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(DownBlock::new(store, &format!("{name}.{i}"), c, w, groups, slope, rng));
            c = w;
        }
        Self { blocks }
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        self.blocks.last().map(|b| store.get(b.kernel).dim(0)).unwrap_or(0)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: PartialMask) -> (Var, PartialMask) {
        let mut x = x;
        let mut mask = mask;
        for block in &self.blocks {
            let (y, m) = block.forward(g, x, &mask);
            x = y;
            mask = m;
        }
        (x, mask)
    }
}
