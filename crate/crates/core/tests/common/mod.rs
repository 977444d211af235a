//! Reference implementations the tests compare the library against.
//!
//! Everything here is written from the definitions, without calling the
//! library routine it is meant to check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spritefactor::autograd::{Graph, Var};
use spritefactor::config::ModelConfig;
use spritefactor::dataset::Frame;
use spritefactor::evaluation::Mask;
use spritefactor::params::{ParamId, ParamStore};
use spritefactor::sprite::SpritePatch;

pub const FD_STEP: f64 = 1e-6;

/// The small model every gradient check runs on.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        k: 8,
        m: 3,
        d: 16,
        layers: 2,
        frame_width: 16,
        frame_height: 16,
        groups: 4,
        base_width: 4,
        width_cap: 8,
        ..Default::default()
    }
}

pub fn random_frame(index: usize, w: usize, h: usize, rng: &mut impl Rng) -> Frame {
    Frame::new(index, w, h, (0..3 * w * h).map(|_| rng.random::<f64>()).collect())
}

/// Result of comparing analytic gradients with central differences on a
/// sample of parameter entries.
#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

fn scalar(store: &ParamStore, f: &impl Fn(&mut Graph<'_>) -> Var) -> f64 {
    let mut g = Graph::new(store);
    let root = f(&mut g);
    g.value(root).item()
}

/// Relative error; gradients below 1e-6 are compared absolutely, since
/// their central differences are dominated by rounding.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Samples `samples` entries uniformly from the parameters in `among` and
/// compares `d f / d entry` with `(f(x + h) - f(x - h)) / 2h`.
pub fn sampled_gradient_check(
    store: &ParamStore,
    among: &[ParamId],
    samples: usize,
    seed: u64,
    f: impl Fn(&mut Graph<'_>) -> Var,
) -> GradReport {
    let mut g = Graph::new(store);
    let root = f(&mut g);
    let grads = g.backward(root).param_grads(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = among.iter().map(|&id| store.get(id).len()).sum();
    assert!(total > 0, "no parameters to check");
    let mut probe = store.clone();
    let mut report = GradReport { checked: 0, worst: 0.0, worst_at: String::new() };
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut pick = among[0];
        for &id in among {
            let n = store.get(id).len();
            if flat < n {
                pick = id;
                break;
            }
            flat -= n;
        }
        let analytic = grads.iter().find(|(id, _)| *id == pick).map_or(0.0, |(_, t)| t.data()[flat]);
        let orig = probe.get(pick).data()[flat];
        probe.get_mut(pick).data_mut()[flat] = orig + FD_STEP;
        let plus = scalar(&probe, &f);
        probe.get_mut(pick).data_mut()[flat] = orig - FD_STEP;
        let minus = scalar(&probe, &f);
        probe.get_mut(pick).data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = rel_err(analytic, numeric);
        report.checked += 1;
        if err >= report.worst {
            report.worst = err;
            report.worst_at =
                format!("{}[{flat}] analytic {analytic:.6e} numeric {numeric:.6e}", store.entry(pick).name);
        }
    }
    report
}

/// Softmax of scaled dot products computed term by term.
pub fn score_oracle(feature: &[f64], latents: &[Vec<f64>]) -> Vec<f64> {
    let d = feature.len() as f64;
    let logits: Vec<f64> =
        latents.iter().map(|z| feature.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
    softmax_oracle(&logits)
}

pub fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-log Beta(1/2, 1/2)` density without its constant.
pub fn beta_prior_oracle(x: f64) -> f64 {
    0.5 * x.ln() + 0.5 * (1.0 - x).ln()
}

/// One sprite placement of a brute-force scene.
#[derive(Clone, Debug)]
pub struct Placed {
    pub sprite: SpritePatch,
    pub x: isize,
    pub y: isize,
}

/// Per-pixel premultiplied Porter-Duff "over": walks every placement of
/// every layer in draw order and folds it onto the opaque background.
pub fn porter_duff_oracle(background: &Frame, layers: &[Vec<Placed>]) -> Frame {
    let (w, h) = (background.width(), background.height());
    let mut out = background.clone();
    for y in 0..h {
        for x in 0..w {
            // Premultiplied colour; alpha stays 1 over an opaque background.
            let mut c = background.rgb(y, x);
            for layer in layers {
                for p in layer {
                    let (sy, sx) = (y as isize - p.y, x as isize - p.x);
                    let s = p.sprite.size() as isize;
                    if sy < 0 || sx < 0 || sy >= s || sx >= s {
                        continue;
                    }
                    let px = p.sprite.rgba(sy as usize, sx as usize);
                    for ch in 0..3 {
                        c[ch] = px[3] * px[ch] + (1.0 - px[3]) * c[ch];
                    }
                }
            }
            out.set_rgb(y, x, c);
        }
    }
    out
}

pub fn random_sprite(size: usize, rng: &mut impl Rng) -> SpritePatch {
    let mut data: Vec<f64> = (0..4 * size * size).map(|_| rng.random::<f64>()).collect();
    // Include fully transparent and fully opaque pixels.
    for a in &mut data[3 * size * size..] {
        match rng.random_range(0..4) {
            0 => *a = 0.0,
            1 => *a = 1.0,
            _ => {}
        }
    }
    SpritePatch::new(size, data)
}

pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    let union = a.data().iter().zip(b.data()).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy one-to-one matching in descending IoU; returns matched pairs
/// `(pred, truth)` whose IoU is at least `tau`.
pub fn greedy_match_oracle(pred: &[Mask], truth: &[Mask], tau: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            pairs.push((mask_iou(p, t), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = Vec::new();
    for (iou, i, j) in pairs {
        if iou < tau || iou == 0.0 {
            break;
        }
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
