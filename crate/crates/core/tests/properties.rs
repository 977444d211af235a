//! Randomised invariants of the selection, shifting, compositing and
//! evaluation routines, checked against the reference implementations in
//! `common`.

mod common;

use common::{
    greedy_match_oracle, max_abs_diff, micro_config, porter_duff_oracle, random_frame, random_sprite, score_oracle,
    Placed,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spritefactor::autograd::{CompositeLayout, Graph};
use spritefactor::compositor::{alpha_over, composite_frame, render_layer, Point};
use spritefactor::dataset::Frame;
use spritefactor::dictionary::{decode_sprites, SpriteDictionary};
use spritefactor::evaluation::{match_instances, psnr, Mask};
use spritefactor::model::{BackgroundInit, SpriteModel};
use spritefactor::params::ParamStore;
use spritefactor::selection::{assemble_soft_sprite, harden, score_anchors};
use spritefactor::sprite::SpritePatch;
use spritefactor::transform::{soft_shift, OffsetDistribution};
use spritefactor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn distribution(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Expected translation written as one double sum over both axes: the
/// sprite's top-left corner lands at `(ty, tx)` on the `2k` canvas.
fn joint_shift_oracle(sprite: &SpritePatch, px: &[f64], py: &[f64]) -> Vec<f64> {
    let k = sprite.size();
    let n = 2 * k;
    let mut out = vec![0.0; 4 * n * n];
    for (ty, wy) in py.iter().enumerate() {
        for (tx, wx) in px.iter().enumerate() {
            for c in 0..4 {
                for y in 0..k {
                    for x in 0..k {
                        out[c * n * n + (y + ty) * n + x + tx] += wy * wx * sprite.get(c, y, x);
                    }
                }
            }
        }
    }
    out
}

fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Mask {
    let mut m = Mask::empty(w, h);
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            m.set(y, x, true);
        }
    }
    m
}

fn random_masks(n: usize, rng: &mut impl Rng) -> Vec<Mask> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0..10), rng.random_range(0..10));
            let (w, h) = (rng.random_range(1..7), rng.random_range(1..7));
            rect_mask(12, 12, x, y, x + w, y + h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_rows_are_distributions(seed in any::<u64>(), anchors in 1usize..6, m in 1usize..9, d in 1usize..17, spread in 0.1f64..30.0) {
        let mut r = rng(seed);
        let features: Vec<f64> = (0..anchors * d).map(|_| r.random_range(-spread..spread)).collect();
        let latents: Vec<f64> = (0..m * d).map(|_| r.random_range(-spread..spread)).collect();
        let scores = score_anchors(&features, &latents, d).unwrap();
        let zs: Vec<Vec<f64>> = latents.chunks(d).map(<[f64]>::to_vec).collect();
        for (row, f) in scores.chunks(m).zip(features.chunks(d)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&s| (0.0..=1.0).contains(&s)));
            prop_assert!(max_abs_diff(row, &score_oracle(f, &zs)) <= 1e-12);
        }
    }

    #[test]
    fn hardening_ignores_monotone_rescaling(seed in any::<u64>(), m in 1usize..12, switch in 0.0f64..1.0) {
        let mut r = rng(seed);
        let scores = distribution(m, &mut r);
        let base = harden(&scores, switch);
        for f in [|s: f64| 2.0 * s + 1.0, |s: f64| s.exp(), |s: f64| s * s * s + s, |s: f64| (s + 1e-3).ln()] {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            prop_assert_eq!(harden(&mapped, switch), base);
        }
        prop_assert_eq!(base.active, switch >= 0.5);
        prop_assert!(scores[base.sprite_id] >= scores.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn soft_sprite_is_the_switched_blend(seed in any::<u64>(), m in 1usize..6, switch in 0.0f64..1.0) {
        let mut r = rng(seed);
        let patches: Vec<SpritePatch> = (0..m).map(|_| random_sprite(4, &mut r)).collect();
        let weights = distribution(m, &mut r);
        let soft = assemble_soft_sprite(&weights, switch, &patches).unwrap();
        for (i, &v) in soft.data().iter().enumerate() {
            let want: f64 = switch * weights.iter().zip(&patches).map(|(w, p)| w * p.data()[i]).sum::<f64>();
            prop_assert!((v - want).abs() <= 1e-12);
        }
        // A one-hot weighting with the switch on reproduces that patch.
        let pick = r.random_range(0..m);
        let onehot: Vec<f64> = (0..m).map(|i| if i == pick { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(assemble_soft_sprite(&onehot, 1.0, &patches).unwrap(), patches[pick].clone());
        let off = assemble_soft_sprite(&weights, 0.0, &patches).unwrap();
        prop_assert!(off.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn confident_soft_sprites_stay_close_to_hard_ones(seed in any::<u64>(), m in 2usize..6) {
        let mut r = rng(seed);
        let patches: Vec<SpritePatch> = (0..m).map(|_| random_sprite(6, &mut r)).collect();
        let pick = r.random_range(0..m);
        let rest = distribution(m - 1, &mut r);
        let top = r.random_range(0.991..1.0);
        let mut weights: Vec<f64> = rest.iter().map(|w| w * (1.0 - top)).collect();
        weights.insert(pick, top);
        let switch = r.random_range(0.991..1.0);
        let sel = harden(&weights, switch);
        prop_assert!(sel.active && sel.sprite_id == pick);
        let soft = assemble_soft_sprite(&weights, switch, &patches).unwrap();
        let bg: [f64; 4] = [r.random(), r.random(), r.random(), 1.0];
        for y in 0..6 {
            for x in 0..6 {
                let a = alpha_over(soft.rgba(y, x), bg);
                let b = alpha_over(patches[pick].rgba(y, x), bg);
                for c in 0..3 {
                    prop_assert!((a[c] - b[c]).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn soft_shift_conserves_mass(seed in any::<u64>(), half in 1usize..5) {
        let k = 2 * half;
        let mut r = rng(seed);
        let sprite = random_sprite(k, &mut r);
        let dist = OffsetDistribution::new(distribution(k + 1, &mut r), distribution(k + 1, &mut r)).unwrap();
        let out = soft_shift(&sprite, &dist).unwrap();
        for c in 0..4 {
            let before: f64 = sprite.data()[c * k * k..(c + 1) * k * k].iter().sum();
            let n = 4 * k * k;
            let after: f64 = out.data()[c * n..(c + 1) * n].iter().sum();
            prop_assert!((before - after).abs() <= 1e-5);
        }
    }

    #[test]
    fn soft_shift_matches_the_joint_sum(seed in any::<u64>(), half in 1usize..5) {
        let k = 2 * half;
        let mut r = rng(seed);
        let sprite = random_sprite(k, &mut r);
        let (px, py) = (distribution(k + 1, &mut r), distribution(k + 1, &mut r));
        let out = soft_shift(&sprite, &OffsetDistribution::new(px.clone(), py.clone()).unwrap()).unwrap();
        prop_assert!(max_abs_diff(out.data(), &joint_shift_oracle(&sprite, &px, &py)) <= 1e-6);
    }

    #[test]
    fn point_mass_shift_is_an_exact_translation(seed in any::<u64>(), half in 1usize..5, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let k = 2 * half;
        let mut r = rng(seed);
        let sprite = random_sprite(k, &mut r);
        let dx = (fx * (k + 1) as f64) as i32 - half as i32;
        let dy = (fy * (k + 1) as f64) as i32 - half as i32;
        let out = soft_shift(&sprite, &OffsetDistribution::point(k, dx, dy)).unwrap();
        let mut want = SpritePatch::transparent(2 * k);
        for c in 0..4 {
            for y in 0..k {
                for x in 0..k {
                    let ty = (y as i32 + half as i32 + dy) as usize;
                    let tx = (x as i32 + half as i32 + dx) as usize;
                    want.set(c, ty, tx, sprite.get(c, y, x));
                }
            }
        }
        prop_assert_eq!(out, want);
    }

    #[test]
    fn alpha_over_is_associative_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut px = || -> [f64; 4] {
            let a = match r.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => r.random(),
            };
            [r.random(), r.random(), r.random(), a]
        };
        let (a, b, c) = (px(), px(), px());
        let left = alpha_over(a, alpha_over(b, c));
        let right = alpha_over(alpha_over(a, b), c);
        prop_assert!(max_abs_diff(&left, &right) <= 1e-6);
        prop_assert!(left.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn disjoint_sprites_can_be_drawn_in_any_order(seed in any::<u64>(), n in 1usize..6) {
        let mut r = rng(seed);
        let sprites: Vec<SpritePatch> = (0..n).map(|_| random_sprite(4, &mut r)).collect();
        let refs: Vec<&SpritePatch> = sprites.iter().collect();
        // Non-overlapping slots along a strip, each nudged inside its cell.
        let positions: Vec<Point> = (0..n).map(|i| Point::new(6 * i as isize + r.random_range(0..2i64) as isize, r.random_range(-2..4i64) as isize)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let forward = render_layer(&refs, &positions, &order, 36, 8).unwrap();
        order.shuffle(&mut r);
        let shuffled = render_layer(&refs, &positions, &order, 36, 8).unwrap();
        for y in 0..8 {
            for x in 0..36 {
                prop_assert_eq!(forward.pixel(y, x), shuffled.pixel(y, x));
            }
        }
    }

    #[test]
    fn precision_and_recall_fall_as_the_threshold_rises(seed in any::<u64>(), np in 0usize..6, nt in 0usize..6) {
        let mut r = rng(seed);
        let pred = random_masks(np, &mut r);
        let truth = random_masks(nt, &mut r);
        let mut last = usize::MAX;
        for tau in [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0] {
            let res = match_instances(&pred, &truth, tau);
            prop_assert!(res.true_positives <= last);
            last = res.true_positives;
            prop_assert!(res.precision() <= 1.0 && res.recall() <= 1.0);
        }
    }

    #[test]
    fn matching_is_one_to_one_and_greedy(seed in any::<u64>(), np in 0usize..7, nt in 0usize..7, tau in 0.05f64..1.0) {
        let mut r = rng(seed);
        let pred = random_masks(np, &mut r);
        let truth = random_masks(nt, &mut r);
        let res = match_instances(&pred, &truth, tau);
        let mut ps: Vec<usize> = res.pairs.iter().map(|p| p.0).collect();
        let mut ts: Vec<usize> = res.pairs.iter().map(|p| p.1).collect();
        ps.sort_unstable();
        ps.dedup();
        ts.sort_unstable();
        ts.dedup();
        prop_assert_eq!(ps.len(), res.pairs.len());
        prop_assert_eq!(ts.len(), res.pairs.len());
        let got: Vec<(usize, usize)> = res.pairs.iter().map(|&(i, j, _)| (i, j)).collect();
        prop_assert_eq!(got, greedy_match_oracle(&pred, &truth, tau));
    }

    #[test]
    fn psnr_falls_as_the_error_grows(seed in any::<u64>(), d1 in 1e-3f64..0.25, d2 in 1e-3f64..0.25) {
        let mut r = rng(seed);
        let base = Frame::new(0, 5, 4, (0..60).map(|_| r.random_range(0.25..0.75)).collect());
        let shifted = |d: f64| Frame::new(0, 5, 4, base.data().iter().map(|v| v + d).collect());
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let (p_lo, p_hi) = (psnr(&base, &shifted(lo)).unwrap(), psnr(&base, &shifted(-hi)).unwrap());
        prop_assert!(p_lo >= p_hi);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fused_composite_matches_the_reference_renderer(seed in any::<u64>(), frames in 1usize..3, layers in 1usize..4) {
        let mut r = rng(seed);
        let (h, w, patch) = (9usize, 11usize, 6usize);
        let origins: Vec<(isize, isize)> = (0..4).map(|_| (r.random_range(-4..8i64) as isize, r.random_range(-4..10i64) as isize)).collect();
        let a = origins.len();
        let sprites: Vec<Vec<SpritePatch>> =
            (0..layers).map(|_| (0..frames * a).map(|_| random_sprite(patch, &mut r)).collect()).collect();
        let backgrounds: Vec<Frame> = (0..frames).map(|f| random_frame(f, w, h, &mut r)).collect();
        let orders: Vec<Vec<Vec<usize>>> = (0..frames)
            .map(|_| {
                (0..layers)
                    .map(|_| {
                        let mut o: Vec<usize> = (0..a).collect();
                        o.shuffle(&mut r);
                        o
                    })
                    .collect()
            })
            .collect();

        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let layer_vars: Vec<_> = sprites
            .iter()
            .map(|ls| g.constant(Tensor::new(&[frames * a, 4, patch, patch], ls.iter().flat_map(|s| s.data().to_vec()).collect())))
            .collect();
        let bg = g.constant(Tensor::new(&[frames, 3, h, w], backgrounds.iter().flat_map(|f| f.data().to_vec()).collect()));
        let layout = CompositeLayout { height: h, width: w, patch, origins: origins.clone(), orders: orders.clone() };
        let fused = g.composite(&layer_vars, bg, layout);
        let fused = g.value(fused).data().to_vec();

        for f in 0..frames {
            let mut canvases = Vec::new();
            let mut placed = Vec::new();
            for l in 0..layers {
                let refs: Vec<&SpritePatch> = (0..a).map(|i| &sprites[l][f * a + i]).collect();
                let positions: Vec<Point> = origins.iter().map(|&(row, col)| Point::new(col, row)).collect();
                canvases.push(render_layer(&refs, &positions, &orders[f][l], w, h).unwrap());
                placed.push(
                    orders[f][l]
                        .iter()
                        .map(|&i| Placed { sprite: sprites[l][f * a + i].clone(), x: origins[i].1, y: origins[i].0 })
                        .collect::<Vec<_>>(),
                );
            }
            let got = &fused[f * 3 * h * w..(f + 1) * 3 * h * w];
            let reference = composite_frame(&backgrounds[f], &canvases).unwrap();
            prop_assert!(max_abs_diff(got, reference.data()) <= 1e-9);
            prop_assert!(max_abs_diff(got, porter_duff_oracle(&backgrounds[f], &placed).data()) <= 1e-9);
        }
    }

    #[test]
    fn decoding_ignores_affine_latent_changes(seed in any::<u64>(), scale in 0.5f64..4.0, shift in -3.0f64..3.0) {
        let model = SpriteModel::new(micro_config(), BackgroundInit::Solid([1.0; 3]), seed).unwrap();
        let SpriteDictionary { latents, .. } = model.dictionary;
        let before = decode_sprites(&model.store, &model.dictionary, &model.generator).unwrap();
        let mut store = model.store.clone();
        store.get_mut(latents).data_mut().iter_mut().for_each(|v| *v = scale * *v + shift);
        let after = decode_sprites(&store, &model.dictionary, &model.generator).unwrap();
        for (a, b) in before.iter().zip(&after) {
            prop_assert!(max_abs_diff(a.data(), b.data()) <= 1e-5);
        }
    }

    #[test]
    fn encoder_outputs_are_normalized(seed in any::<u64>(), batch in 1usize..3) {
        let cfg = micro_config();
        let model = SpriteModel::new(cfg.clone(), BackgroundInit::Solid([1.0; 3]), seed).unwrap();
        let mut r = rng(seed ^ 0x55);
        let frames: Vec<Frame> = (0..batch).map(|i| random_frame(i, cfg.frame_width, cfg.frame_height, &mut r)).collect();
        let mut g = Graph::new(&model.store);
        let x = g.constant(Tensor::new(&[batch, 3, cfg.frame_height, cfg.frame_width], frames.iter().flat_map(|f| f.data().to_vec()).collect()));
        let encoded = model.encoder.encode(&mut g, x, &model.layout).unwrap();
        prop_assert_eq!(encoded.len(), cfg.layers);
        for layer in encoded {
            let features = g.value(layer.features);
            prop_assert_eq!(features.shape(), &[batch * model.layout.count(), cfg.d][..]);
            for row in features.data().chunks(cfg.d) {
                let mean = row.iter().sum::<f64>() / cfg.d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cfg.d as f64;
                prop_assert!(mean.abs() <= 1e-4 && (var - 1.0).abs() <= 1e-4, "mean {} var {}", mean, var);
            }
            prop_assert!(g.value(layer.switches).data().iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }
}

#[test]
fn three_way_uniform_offset_averages_three_translations() {
    let k = 4;
    let mut r = rng(5);
    let sprite = random_sprite(k, &mut r);
    // Equal mass on dx = -1, 0, +1; dy fixed at 0.
    let px = vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];
    let py = vec![0.0, 0.0, 1.0, 0.0, 0.0];
    let out = soft_shift(&sprite, &OffsetDistribution::new(px, py).unwrap()).unwrap();
    let translations: Vec<SpritePatch> =
        (-1..=1).map(|dx| soft_shift(&sprite, &OffsetDistribution::point(k, dx, 0)).unwrap()).collect();
    for i in 0..out.data().len() {
        let mean = translations.iter().map(|t| t.data()[i]).sum::<f64>() / 3.0;
        assert!((out.data()[i] - mean).abs() <= 1e-12);
    }
}
