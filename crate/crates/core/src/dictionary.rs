//! The sprite dictionary: learnable latent codes and the generator that
//! decodes them into RGBA patches.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{GroupNorm, Linear};
use crate::params::{standard_normal, ParamGroup, ParamId, ParamStore};
use crate::sprite::SpritePatch;

/// `m` latent codes of width `d`, stored as one `[m, d]` parameter.
#[derive(Clone, Debug)]
pub struct SpriteDictionary {
    pub latents: ParamId,
    pub m: usize,
    pub d: usize,
}

/// Draws the latents i.i.d. from a standard normal.
pub fn init_dictionary<R: Rng + ?Sized>(store: &mut ParamStore, m: usize, d: usize, rng: &mut R) -> SpriteDictionary {
    let latents = store.add("dictionary.latents", ParamGroup::Latent, standard_normal(&[m, d], rng));
    SpriteDictionary { latents, m, d }
}

impl SpriteDictionary {
    /// Layer-normalized latents `[m, d]`. The same normalized codes feed the
    /// generator and the anchor scoring.
    pub fn normalized(&self, g: &mut Graph<'_>) -> Var {
        let z = g.param(self.latents);
        g.layer_norm(z)
    }
}

/// `d -> 8d -> 4k^2` MLP with group normalization, ReLU and a sigmoid
/// output, reshaped into `m` RGBA patches.
#[derive(Clone, Debug)]
pub struct SpriteGenerator {
    pub k: usize,
    hidden: Linear,
    norm: GroupNorm,
    out: Linear,
}

impl SpriteGenerator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, k: usize, groups: usize, rng: &mut R) -> Self {
        let wide = 8 * d;
        Self {
            k,
            hidden: Linear::new(store, "generator.hidden", d, wide, rng),
            norm: GroupNorm::new(store, "generator.norm", wide, groups),
            out: Linear::new(store, "generator.out", wide, 4 * k * k, rng),
        }
    }

    /// `normalized: [m, d] -> [m, 4k^2]` with channel-major `[4, k, k]` rows.
    pub fn forward(&self, g: &mut Graph<'_>, normalized: Var) -> Var {
        let h = self.hidden.forward(g, normalized);
        let h = self.norm.forward(g, h);
        let h = g.relu(h);
        let o = self.out.forward(g, h);
        g.sigmoid(o)
    }
}

/// Decodes every dictionary entry into a patch.
pub fn decode_sprites(
    store: &ParamStore,
    dict: &SpriteDictionary,
    generator: &SpriteGenerator,
) -> Result<Vec<SpritePatch>> {
    let mut g = Graph::new(store);
    let z = dict.normalized(&mut g);
    let out = generator.forward(&mut g, z);
    let v = g.value(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("decoded sprites".into()));
    }
    let k = generator.k;
    Ok(v.data().chunks_exact(4 * k * k).map(|row| SpritePatch::new(k, row.to_vec())).collect())
}
