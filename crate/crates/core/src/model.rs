//! The full decomposition model: dictionary, generator, encoder, offset
//! predictor and background, with the differentiable training forward
//! pass and the discrete test-time decomposition.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::AnchorLayout;
use crate::autograd::{CompositeLayout, CropWindow, Graph, Var};
use crate::compositor::{Background, Point, TextureBackground};
use crate::config::{BackgroundMode, ModelConfig};
use crate::dataset::Frame;
use crate::decomposition::{render_decomposition, Decomposition, Placement};
use crate::dictionary::{decode_sprites, init_dictionary, SpriteDictionary, SpriteGenerator};
use crate::encoder::FrameEncoder;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::selection::{harden, score_graph, soft_sprite_graph};
use crate::sprite::{quantize_unit, SpritePatch};
use crate::tensor::Tensor;
use crate::transform::{anchor_crops, hard_offset, OffsetPredictor};

/// Frames processed together at test time.
const EVAL_CHUNK: usize = 8;

#[derive(Clone, Debug)]
pub enum BackgroundModel {
    /// Fixed colour, not trained.
    Solid([f64; 3]),
    /// Texture in logit space `[3, H, W]` and per-frame crop logits
    /// `[frames, windows]`.
    Texture { texture: ParamId, frame_logits: ParamId, windows: Vec<CropWindow> },
}

/// How the background is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackgroundInit {
    Solid([f64; 3]),
    /// Texture filled with `color`, one crop distribution per frame.
    Texture {
        frames: usize,
        color: [f64; 3],
    },
}

/// Back-to-front order of the anchors inside each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrawOrder {
    /// Fresh random permutation per frame and layer (training).
    Random,
    /// Row-major anchor order (test time).
    Raster,
}

/// Soft per-layer quantities produced by the training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SoftLayer {
    /// `[B * A, 1]`.
    pub switches: Var,
    /// `[B * A, m]`.
    pub scores: Var,
    /// `[B * A, k + 1]` each.
    pub px: Var,
    pub py: Var,
}

#[derive(Clone, Debug)]
pub struct SoftForward {
    /// `[B, 3, h, w]`.
    pub reconstruction: Var,
    pub layers: Vec<SoftLayer>,
}

pub struct SpriteModel {
    pub config: ModelConfig,
    pub layout: AnchorLayout,
    pub store: ParamStore,
    pub dictionary: SpriteDictionary,
    pub generator: SpriteGenerator,
    pub encoder: FrameEncoder,
    pub offsets: OffsetPredictor,
    pub background: BackgroundModel,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.01, 0.99);
    (p / (1.0 - p)).ln()
}

/// Candidate crop positions of a `w x h` window on a `tw x th` texture.
pub fn crop_windows(tw: usize, th: usize, w: usize, h: usize, stride: usize) -> Vec<CropWindow> {
    let mut out = Vec::new();
    for row in (0..=th - h).step_by(stride) {
        for col in (0..=tw - w).step_by(stride) {
            out.push(CropWindow { row, col });
        }
    }
    out
}

impl SpriteModel {
    /// Builds a freshly initialised model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, background: BackgroundInit, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.anchor_layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dictionary = init_dictionary(&mut store, config.m, config.d, &mut rng);
        let generator = SpriteGenerator::new(&mut store, config.d, config.k, config.groups, &mut rng);
        let encoder = FrameEncoder::new(&mut store, &config, &mut rng);
        let offsets = OffsetPredictor::new(&mut store, &config, &mut rng);
        let background = match (config.background, background) {
            (BackgroundMode::Solid, BackgroundInit::Solid(c)) => BackgroundModel::Solid(c.map(quantize_unit)),
            (BackgroundMode::Texture, BackgroundInit::Texture { frames, color }) => {
                if frames == 0 {
                    return Err(Error::config("background", "a texture background needs at least one frame"));
                }
                let (tw, th) = config.texture_size();
                let mut raw = Vec::with_capacity(3 * tw * th);
                for c in color {
                    raw.extend(std::iter::repeat_n(logit(c), tw * th));
                }
                let texture = store.add("background.texture", ParamGroup::Background, Tensor::new(&[3, th, tw], raw));
                let windows = crop_windows(tw, th, config.frame_width, config.frame_height, config.texture_stride);
                let frame_logits = store.add(
                    "background.frame_logits",
                    ParamGroup::Background,
                    Tensor::zeros(&[frames, windows.len()]),
                );
                BackgroundModel::Texture { texture, frame_logits, windows }
            }
            (mode, init) => {
                return Err(Error::config(
                    "background",
                    format!("{mode:?} background cannot be initialised from {init:?}"),
                ))
            }
        };
        Ok(Self { config, layout, store, dictionary, generator, encoder, offsets, background })
    }

    /// Frame tensor `[B, 3, h, w]`.
    fn stack(&self, frames: &[Frame]) -> Result<Tensor> {
        let (w, h) = (self.layout.width, self.layout.height);
        let mut data = Vec::with_capacity(frames.len() * 3 * w * h);
        for f in frames {
            if (f.width(), f.height()) != (w, h) {
                return Err(Error::Shape(format!("model expects {w}x{h} frames, got {}x{}", f.width(), f.height())));
            }
            data.extend_from_slice(f.data());
        }
        Ok(Tensor::new(&[frames.len(), 3, h, w], data))
    }

    fn frame_rows(&self, frames: &[Frame], count: usize) -> Result<Vec<usize>> {
        frames
            .iter()
            .map(|f| {
                if f.index < count {
                    Ok(f.index)
                } else {
                    Err(Error::InvalidInput(format!(
                        "frame index {} has no background offset (model knows {count} frames)",
                        f.index
                    )))
                }
            })
            .collect()
    }

    /// Background for a batch, `[B, 3, h, w]`.
    fn background_graph(&self, g: &mut Graph<'_>, frames: &[Frame]) -> Result<Var> {
        let (w, h) = (self.layout.width, self.layout.height);
        match &self.background {
            BackgroundModel::Solid(rgb) => {
                let one = Frame::filled(0, w, h, *rgb);
                let mut data = Vec::with_capacity(frames.len() * 3 * w * h);
                for _ in frames {
                    data.extend_from_slice(one.data());
                }
                Ok(g.constant(Tensor::new(&[frames.len(), 3, h, w], data)))
            }
            BackgroundModel::Texture { texture, frame_logits, windows } => {
                let count = self.store.get(*frame_logits).dim(0);
                let rows = self.frame_rows(frames, count)?;
                let raw = g.param(*texture);
                let tex = g.sigmoid(raw);
                let logits = g.param(*frame_logits);
                let picked = g.gather_rows(logits, &rows);
                let probs = g.softmax(picked);
                Ok(g.soft_crop(tex, probs, windows, h, w))
            }
        }
    }

    /// Differentiable reconstruction of `frames` with soft selections and
    /// soft offsets.
    pub fn forward_soft<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        frames: &[Frame],
        order: DrawOrder,
        rng: &mut R,
    ) -> Result<SoftForward> {
        let k = self.config.k;
        let b = frames.len();
        let a = self.layout.count();
        let input = self.stack(frames)?;
        let x = g.constant(input);
        let encoded = self.encoder.encode(g, x, &self.layout)?;
        let zn = self.dictionary.normalized(g);
        let patches = self.generator.forward(g, zn);
        let (crops, mask) = anchor_crops(frames, &self.layout)?;
        let crops = g.constant(crops);

        let mut layers = Vec::with_capacity(encoded.len());
        let mut placed = Vec::with_capacity(encoded.len());
        for enc in &encoded {
            let scores = score_graph(g, enc.features, zn);
            let soft = soft_sprite_graph(g, scores, enc.switches, patches);
            let sprites = g.reshape(soft, &[b * a, 4, k, k]);
            let (px, py) = self.offsets.forward(g, crops, &mask, sprites);
            placed.push(g.soft_shift(sprites, px, py));
            layers.push(SoftLayer { switches: enc.switches, scores, px, py });
        }

        let background = self.background_graph(g, frames)?;
        let orders = (0..b)
            .map(|_| {
                (0..encoded.len())
                    .map(|_| {
                        let mut o: Vec<usize> = (0..a).collect();
                        if order == DrawOrder::Random {
                            o.shuffle(rng);
                        }
                        o
                    })
                    .collect()
            })
            .collect();
        let layout = CompositeLayout {
            height: self.layout.height,
            width: self.layout.width,
            patch: 2 * k,
            origins: (0..a).map(|j| self.layout.canvas_origin(j)).collect(),
            orders,
        };
        let reconstruction = g.composite(&placed, background, layout);
        Ok(SoftForward { reconstruction, layers })
    }

    /// Current dictionary as patches.
    pub fn sprites(&self) -> Result<Vec<SpritePatch>> {
        decode_sprites(&self.store, &self.dictionary, &self.generator)
    }

    /// Current background in image space.
    pub fn background(&self) -> Background {
        match &self.background {
            BackgroundModel::Solid(c) => Background::Solid(*c),
            BackgroundModel::Texture { texture, .. } => {
                let t = self.store.get(*texture);
                let data = t.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
                Background::Texture(TextureBackground { width: t.dim(2), height: t.dim(1), data })
            }
        }
    }

    /// Most likely background crop position of a frame.
    pub fn background_offset(&self, frame_index: usize) -> Result<Point> {
        match &self.background {
            BackgroundModel::Solid(_) => Ok(Point::new(0, 0)),
            BackgroundModel::Texture { frame_logits, windows, .. } => {
                let logits = self.store.get(*frame_logits);
                if frame_index >= logits.dim(0) {
                    return Err(Error::InvalidInput(format!(
                        "frame index {frame_index} has no background offset (model knows {} frames)",
                        logits.dim(0)
                    )));
                }
                let row = &logits.data()[frame_index * windows.len()..(frame_index + 1) * windows.len()];
                let win = windows[crate::selection::argmax(row)];
                Ok(Point::new(win.col as isize, win.row as isize))
            }
        }
    }

    /// Discrete decomposition: best sprite per anchor, switch thresholded
    /// at 0.5, most likely offset per axis predicted from the selected
    /// sprite.
    pub fn decompose(&self, frames: &[Frame]) -> Result<Vec<Decomposition>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EVAL_CHUNK) {
            out.extend(self.decompose_chunk(chunk)?);
        }
        Ok(out)
    }

    fn decompose_chunk(&self, frames: &[Frame]) -> Result<Vec<Decomposition>> {
        let k = self.config.k;
        let a = self.layout.count();
        let m = self.config.m;
        let mut g = Graph::new(&self.store);
        let x = g.constant(self.stack(frames)?);
        let encoded = self.encoder.encode(&mut g, x, &self.layout)?;
        let zn = self.dictionary.normalized(&mut g);
        let patches = self.generator.forward(&mut g, zn);
        if !g.value(patches).is_finite() {
            return Err(Error::NonFinite("decoded sprites".into()));
        }
        let (crops, mask) = anchor_crops(frames, &self.layout)?;
        let crops = g.constant(crops);

        let mut placements: Vec<Vec<Placement>> = vec![Vec::new(); frames.len()];
        for (layer, enc) in encoded.iter().enumerate() {
            let scores = score_graph(&mut g, enc.features, zn);
            let selections: Vec<_> = {
                let s = g.value(scores).data();
                let sw = g.value(enc.switches).data();
                (0..frames.len() * a).map(|i| harden(&s[i * m..(i + 1) * m], sw[i])).collect()
            };
            let ids: Vec<usize> = selections.iter().map(|s| s.sprite_id).collect();
            let chosen = g.gather_rows(patches, &ids);
            let sprites = g.reshape(chosen, &[frames.len() * a, 4, k, k]);
            let (px, py) = self.offsets.forward(&mut g, crops, &mask, sprites);
            let (px, py) = (g.value(px).data(), g.value(py).data());
            for (i, sel) in selections.iter().enumerate() {
                let (f, j) = (i / a, i % a);
                let (row, col) = self.layout.row_col(j);
                placements[f].push(Placement {
                    layer,
                    row,
                    col,
                    sprite_id: sel.sprite_id,
                    dx: hard_offset(&px[i * (k + 1)..(i + 1) * (k + 1)]),
                    dy: hard_offset(&py[i * (k + 1)..(i + 1) * (k + 1)]),
                    active: sel.active,
                });
            }
        }
        frames
            .iter()
            .zip(placements)
            .map(|(f, placements)| {
                Ok(Decomposition {
                    frame_index: f.index,
                    width: f.width(),
                    height: f.height(),
                    placements,
                    background_offset: self.background_offset(f.index)?,
                })
            })
            .collect()
    }

    /// Sprites and background rounded to 8 bits, exactly as they are
    /// exported.
    pub fn quantized_assets(&self) -> Result<(Vec<SpritePatch>, Background)> {
        let sprites = self.sprites()?.iter().map(SpritePatch::quantized).collect();
        let background = match self.background() {
            Background::Solid(c) => Background::Solid(c.map(quantize_unit)),
            Background::Texture(mut t) => {
                for v in &mut t.data {
                    *v = quantize_unit(*v);
                }
                Background::Texture(t)
            }
        };
        Ok((sprites, background))
    }

    /// Test-time reconstructions. Hard mode renders the discrete
    /// decomposition with 8-bit assets; with `soft_test` the soft forward
    /// pass is used with raster draw order.
    pub fn reconstruct(&self, frames: &[Frame]) -> Result<Vec<Frame>> {
        if self.config.soft_test {
            let mut out = Vec::with_capacity(frames.len());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for chunk in frames.chunks(EVAL_CHUNK) {
                let mut g = Graph::new(&self.store);
                let fwd = self.forward_soft(&mut g, chunk, DrawOrder::Raster, &mut rng)?;
                let v = g.value(fwd.reconstruction);
                let n = 3 * self.layout.width * self.layout.height;
                for (f, data) in chunk.iter().zip(v.data().chunks_exact(n)) {
                    out.push(Frame::new(f.index, f.width(), f.height(), data.to_vec()));
                }
            }
            return Ok(out);
        }
        let (sprites, background) = self.quantized_assets()?;
        self.decompose(frames)?
            .iter()
            .map(|d| render_decomposition(d, &self.layout, self.config.layers, &sprites, &background))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositor::{composite_frame, render_layer};

    fn small_config() -> ModelConfig {
        ModelConfig {
            k: 8,
            m: 4,
            d: 16,
            layers: 2,
            frame_width: 16,
            frame_height: 16,
            base_width: 8,
            width_cap: 16,
            ..Default::default()
        }
    }

    #[test]
    fn soft_forward_shapes() {
        let model = SpriteModel::new(small_config(), BackgroundInit::Solid([1.0; 3]), 0).unwrap();
        let frames: Vec<Frame> = (0..2).map(|i| Frame::filled(i, 16, 16, [0.2, 0.4, 0.6])).collect();
        let mut g = Graph::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fwd = model.forward_soft(&mut g, &frames, DrawOrder::Random, &mut rng).unwrap();
        assert_eq!(g.shape(fwd.reconstruction), [2, 3, 16, 16]);
        assert_eq!(fwd.layers.len(), 2);
        assert_eq!(g.shape(fwd.layers[0].scores), [2 * 16, 4]);
        assert_eq!(g.shape(fwd.layers[1].px), [2 * 16, 9]);
        let r = g.value(fwd.reconstruction);
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decomposition_covers_every_anchor_and_layer() {
        let model = SpriteModel::new(small_config(), BackgroundInit::Solid([1.0; 3]), 0).unwrap();
        let frames: Vec<Frame> = (0..3).map(|i| Frame::filled(i, 16, 16, [0.5; 3])).collect();
        let d = model.decompose(&frames).unwrap();
        assert_eq!(d.len(), 3);
        for dec in &d {
            assert_eq!(dec.placements.len(), 2 * 16);
            assert!(dec.placements.iter().all(|p| p.sprite_id < 4 && p.dx.abs() <= 4 && p.dy.abs() <= 4));
        }
        let recon = model.reconstruct(&frames).unwrap();
        assert_eq!(recon.len(), 3);
    }

    /// With one-hot scores, binary switches and point-mass offsets the soft
    /// renderer must agree with the discrete one.
    #[test]
    fn soft_compositing_matches_hard_rendering_at_the_limit() {
        let k = 4;
        let layout = AnchorLayout::new(k, 8, 8).unwrap();
        let a = layout.count();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sprites: Vec<SpritePatch> = (0..a)
            .map(|_| {
                let data = (0..4 * k * k).map(|_| rng.random::<f64>()).collect();
                SpritePatch::new(k, data)
            })
            .collect();
        let offsets: Vec<(i32, i32)> = (0..a).map(|_| (rng.random_range(-2..=2), rng.random_range(-2..=2))).collect();

        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let flat: Vec<f64> = sprites.iter().flat_map(|s| s.data().to_vec()).collect();
        let sv = g.constant(Tensor::new(&[a, 4, k, k], flat));
        let mut px = vec![0.0; a * (k + 1)];
        let mut py = vec![0.0; a * (k + 1)];
        for (j, &(dx, dy)) in offsets.iter().enumerate() {
            px[j * (k + 1) + (dx + 2) as usize] = 1.0;
            py[j * (k + 1) + (dy + 2) as usize] = 1.0;
        }
        let pxv = g.constant(Tensor::new(&[a, k + 1], px));
        let pyv = g.constant(Tensor::new(&[a, k + 1], py));
        let shifted = g.soft_shift(sv, pxv, pyv);
        let bg = g.constant(Tensor::full(&[1, 3, 8, 8], 0.25));
        let order: Vec<usize> = (0..a).collect();
        let out = g.composite(
            &[shifted],
            bg,
            CompositeLayout {
                height: 8,
                width: 8,
                patch: 2 * k,
                origins: (0..a).map(|j| layout.canvas_origin(j)).collect(),
                orders: vec![vec![order.clone()]],
            },
        );

        let refs: Vec<&SpritePatch> = sprites.iter().collect();
        let positions: Vec<Point> = (0..a)
            .map(|j| {
                let (oy, ox) = layout.sprite_origin(j);
                Point::new(ox + offsets[j].0 as isize, oy + offsets[j].1 as isize)
            })
            .collect();
        let layer = render_layer(&refs, &positions, &order, 8, 8).unwrap();
        let hard = composite_frame(&Frame::filled(0, 8, 8, [0.25; 3]), &[layer]).unwrap();
        for (s, h) in g.value(out).data().iter().zip(hard.data()) {
            assert!((s - h).abs() < 1e-9, "{s} vs {h}");
        }
    }
}
