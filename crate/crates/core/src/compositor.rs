//! Straight-alpha compositing of sprites, layers and backgrounds.
//!
//! These are the reference (non-differentiable) renderers used at test
//! time, for synthetic data and for rendering manifests. The training path
//! uses the fused kernel on the autodiff tape, which computes the same
//! over-compositing against an opaque canvas.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::sprite::SpritePatch;

/// Straight (non-premultiplied) RGBA.
pub type Rgba = [f64; 4];

/// Porter-Duff "over": `fg` composited on top of `bg`.
///
/// A fully transparent result is reported as `[0, 0, 0, 0]`.
#[inline]
pub fn alpha_over(fg: Rgba, bg: Rgba) -> Rgba {
    let fa = fg[3];
    let ba = bg[3] * (1.0 - fa);
    let a = fa + ba;
    if a <= 0.0 {
        return [0.0; 4];
    }
    [(fa * fg[0] + ba * bg[0]) / a, (fa * fg[1] + ba * bg[1]) / a, (fa * fg[2] + ba * bg[2]) / a, a]
}

/// Integer pixel position; `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Point {
    pub x: isize,
    pub y: isize,
}

impl Point {
    pub fn new(x: isize, y: isize) -> Self {
        Self { x, y }
    }
}

/// A transparent-initialised `[4, h, w]` straight-alpha canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCanvas {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LayerCanvas {
    pub fn transparent(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 4 * width * height] }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> Rgba {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i], self.data[3 * n + i]]
    }

    #[inline]
    fn set_pixel(&mut self, y: usize, x: usize, px: Rgba) {
        let n = self.width * self.height;
        let i = y * self.width + x;
        for (c, v) in px.into_iter().enumerate() {
            self.data[c * n + i] = v;
        }
    }

    /// Composites `sprite` with its top-left corner at `at`, clipping to the
    /// canvas.
    pub fn draw(&mut self, sprite: &SpritePatch, at: Point) {
        let s = sprite.size() as isize;
        let (w, h) = (self.width as isize, self.height as isize);
        for sy in 0..s {
            let y = at.y + sy;
            if y < 0 || y >= h {
                continue;
            }
            for sx in 0..s {
                let x = at.x + sx;
                if x < 0 || x >= w {
                    continue;
                }
                let fg = sprite.rgba(sy as usize, sx as usize);
                let bg = self.pixel(y as usize, x as usize);
                self.set_pixel(y as usize, x as usize, alpha_over(fg, bg));
            }
        }
    }
}

/// Renders one layer: `sprites[order[0]]` is drawn first (furthest back).
///
/// `order` must be a permutation of `0..sprites.len()`.
pub fn render_layer(
    sprites: &[&SpritePatch],
    positions: &[Point],
    order: &[usize],
    width: usize,
    height: usize,
) -> Result<LayerCanvas> {
    if sprites.len() != positions.len() {
        return Err(Error::Shape(format!("{} sprites but {} positions", sprites.len(), positions.len())));
    }
    let mut seen = vec![false; sprites.len()];
    if order.len() != sprites.len() || !order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
    {
        return Err(Error::InvalidInput(format!("draw order {order:?} is not a permutation of 0..{}", sprites.len())));
    }
    let mut canvas = LayerCanvas::transparent(width, height);
    for &i in order {
        canvas.draw(sprites[i], positions[i]);
    }
    Ok(canvas)
}

/// Composites `layers` (first is furthest back) over an opaque background.
pub fn composite_frame(background: &Frame, layers: &[LayerCanvas]) -> Result<Frame> {
    let (w, h) = (background.width(), background.height());
    for layer in layers {
        if (layer.width, layer.height) != (w, h) {
            return Err(Error::Shape(format!(
                "layer {}x{} does not match background {w}x{h}",
                layer.width, layer.height
            )));
        }
    }
    let mut out = background.clone();
    for y in 0..h {
        for x in 0..w {
            let mut px = background.rgba(y, x);
            for layer in layers {
                px = alpha_over(layer.pixel(y, x), px);
            }
            out.set_rgb(y, x, [px[0], px[1], px[2]]);
        }
    }
    Ok(out)
}

/// A learned texture larger than the frame with one crop position per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureBackground {
    pub width: usize,
    pub height: usize,
    /// `[3, height, width]`.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Background {
    Solid([f64; 3]),
    Texture(TextureBackground),
}

/// Background for one frame. `offset` is the top-left corner of the crop
/// and is ignored for solid backgrounds.
pub fn render_background(background: &Background, offset: Point, width: usize, height: usize) -> Result<Frame> {
    match background {
        Background::Solid(rgb) => Ok(Frame::filled(0, width, height, *rgb)),
        Background::Texture(t) => {
            let fits = offset.x >= 0
                && offset.y >= 0
                && offset.x as usize + width <= t.width
                && offset.y as usize + height <= t.height;
            if !fits {
                return Err(Error::InvalidInput(format!(
                    "background crop {width}x{height} at ({}, {}) leaves the {}x{} texture",
                    offset.x, offset.y, t.width, t.height
                )));
            }
            let (ox, oy) = (offset.x as usize, offset.y as usize);
            let mut data = Vec::with_capacity(3 * width * height);
            for c in 0..3 {
                for y in 0..height {
                    let row = (c * t.height + oy + y) * t.width + ox;
                    data.extend_from_slice(&t.data[row..row + width]);
                }
            }
            Ok(Frame::new(0, width, height, data))
        }
    }
}

const KMEANS_CLUSTERS: usize = 5;
const KMEANS_MAX_FRAMES: usize = 100;
const KMEANS_MAX_ITERS: usize = 100;

/// Dominant colour of a frame collection.
///
/// Up to 100 frames are sampled, their pixels are clustered into five
/// colour clusters with k-means, and the centre of the most populous
/// cluster is returned. Identical pixel values are clustered once with a
/// multiplicity weight, which gives the same result as clustering every
/// pixel individually.
pub fn estimate_background_color<R: Rng + ?Sized>(frames: &[Frame], rng: &mut R) -> Result<[f64; 3]> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("cannot estimate a background from zero frames".into()));
    }
    let picked: Vec<usize> = if frames.len() > KMEANS_MAX_FRAMES {
        let mut idx = sample(rng, frames.len(), KMEANS_MAX_FRAMES).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..frames.len()).collect()
    };

    let mut counts: BTreeMap<[u64; 3], f64> = BTreeMap::new();
    for &i in &picked {
        let f = &frames[i];
        for y in 0..f.height() {
            for x in 0..f.width() {
                let p = f.rgb(y, x);
                *counts.entry(p.map(f64::to_bits)).or_insert(0.0) += 1.0;
            }
        }
    }
    let colors: Vec<([u64; 3], f64)> = counts.into_iter().collect();
    let points: Vec<[f64; 3]> = colors.iter().map(|(k, _)| k.map(f64::from_bits)).collect();
    let weights: Vec<f64> = colors.iter().map(|(_, w)| *w).collect();

    let (centers, mass) = weighted_kmeans(&points, &weights, KMEANS_CLUSTERS, rng);
    let best =
        (0..centers.len()).max_by(|&a, &b| mass[a].total_cmp(&mass[b]).then(b.cmp(&a))).expect("at least one cluster");
    Ok(centers[best])
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

fn nearest(p: &[f64; 3], centers: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding on weighted points. Returns the
/// centres and the total weight assigned to each.
fn weighted_kmeans<R: Rng + ?Sized>(
    points: &[[f64; 3]],
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let k = k.min(points.len());
    let pick = |rng: &mut R, w: &[f64]| -> usize {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return 0;
        }
        let mut r = rng.random::<f64>() * total;
        for (i, &wi) in w.iter().enumerate() {
            r -= wi;
            if r < 0.0 {
                return i;
            }
        }
        w.iter().rposition(|&wi| wi > 0.0).unwrap_or(0)
    };

    let mut centers = vec![points[pick(rng, weights)]];
    while centers.len() < k {
        let scores: Vec<f64> = points
            .iter()
            .zip(weights)
            .map(|(p, &w)| w * centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        if scores.iter().all(|&s| s <= 0.0) {
            break;
        }
        centers.push(points[pick(rng, &scores)]);
    }

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![[0.0; 3]; centers.len()];
        let mut mass = vec![0.0; centers.len()];
        for ((p, &w), &a) in points.iter().zip(weights).zip(&assign) {
            for c in 0..3 {
                sums[a][c] += w * p[c];
            }
            mass[a] += w;
        }
        for j in 0..centers.len() {
            if mass[j] > 0.0 {
                centers[j] = sums[j].map(|s| s / mass[j]);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let mut mass = vec![0.0; centers.len()];
    for (&w, &a) in weights.iter().zip(&assign) {
        mass[a] += w;
    }
    (centers, mass)
}
