//! Anchor-to-dictionary matching and sprite assembly.
//!
//! Each anchor scores every dictionary entry by a scaled dot product
//! between its feature vector and the normalized latent, softmaxed over the
//! dictionary. During training the anchor's sprite is the score-weighted
//! blend of all patches times the anchor's switch; at test time the best
//! match is taken and the switch is thresholded at 0.5.

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::error::{Error, Result};
use crate::sprite::SpritePatch;

/// `softmax(features @ latents^T / sqrt(d))`: `[A, d] x [m, d] -> [A, m]`.
pub fn score_graph(g: &mut Graph<'_>, features: Var, latents: Var) -> Var {
    let d = g.shape(features)[1];
    let logits = g.linear(features, latents, None);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    g.softmax(logits)
}

/// `switches * (scores @ patches)`: `[A, m] x [m, 4k^2] -> [A, 4k^2]`.
pub fn soft_sprite_graph(g: &mut Graph<'_>, scores: Var, switches: Var, patches: Var) -> Var {
    let blend = g.matmul(scores, patches);
    g.scale_rows(blend, switches)
}

/// Reference scores for row-major `features: [A, d]`, `latents: [m, d]`.
pub fn score_anchors(features: &[f64], latents: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || !features.len().is_multiple_of(d) || !latents.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "features {} / latents {} not multiples of d = {d}",
            features.len(),
            latents.len()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(features.len() / d * latents.len() / d);
    for f in features.chunks_exact(d) {
        let start = out.len();
        for z in latents.chunks_exact(d) {
            out.push(f.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() * scale);
        }
        softmax_in_place(&mut out[start..]);
    }
    Ok(out)
}

/// Reference soft sprite `switch * sum_i weights[i] * patches[i]`.
pub fn assemble_soft_sprite(weights: &[f64], switch: f64, patches: &[SpritePatch]) -> Result<SpritePatch> {
    if weights.len() != patches.len() || patches.is_empty() {
        return Err(Error::Shape(format!("{} weights for {} patches", weights.len(), patches.len())));
    }
    let k = patches[0].size();
    let mut out = vec![0.0; 4 * k * k];
    for (w, p) in weights.iter().zip(patches) {
        if p.size() != k {
            return Err(Error::Shape("patches differ in size".into()));
        }
        for (o, v) in out.iter_mut().zip(p.data()) {
            *o += w * v;
        }
    }
    for o in &mut out {
        *o *= switch;
    }
    Ok(SpritePatch::new(k, out))
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Test-time selection of one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HardSelection {
    pub sprite_id: usize,
    pub active: bool,
}

pub const SWITCH_THRESHOLD: f64 = 0.5;

pub fn harden(scores: &[f64], switch: f64) -> HardSelection {
    HardSelection { sprite_id: argmax(scores), active: switch >= SWITCH_THRESHOLD }
}
