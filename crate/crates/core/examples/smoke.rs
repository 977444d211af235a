//! Trains the small synthetic configuration, printing hard-decomposition
//! metrics and soft-pass sharpness every 500 steps, then exports a package
//! and a checkpoint to the output directory.
//!
//! `cargo run --release -p spritefactor --example smoke -- [steps] [lr] [layers] [prior] [batch] [outdir] [seed]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spritefactor::config::{ModelConfig, RunConfig, TrainConfig};
use spritefactor::dataset::Frame;
use spritefactor::dataset::{generate_floating_sprites, SyntheticConfig};
use spritefactor::decomposition::instance_masks;
use spritefactor::evaluation::{evaluate, psnr, FrameEvaluation};
use spritefactor::trainer::{prepare_model, Trainer, TrainingSet};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let layers: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let prior: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let batch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);
    let out = std::path::PathBuf::from(args.get(6).cloned().unwrap_or_else(|| "/tmp/smoke_out".into()));
    let seed: u64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0);
    let synth = SyntheticConfig { frames: 256, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (bank, scenes) = generate_floating_sprites(&synth, &mut rng).unwrap();
    let frames: Vec<Frame> = scenes.iter().map(|s| s.frame.clone()).collect();
    let run = RunConfig {
        model: ModelConfig {
            k: 16,
            m: 8,
            d: 64,
            layers,
            frame_width: 64,
            frame_height: 64,
            base_width: 16,
            width_cap: 64,
            ..Default::default()
        },
        train: TrainConfig {
            learning_rate: lr,
            steps,
            prior_weight: prior,
            batch_size: batch,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = prepare_model(&run, &frames).unwrap();
    println!("params {}", model.store.scalar_count());
    let data = TrainingSet::new(frames.clone(), None).unwrap();
    let mut t = Trainer::new(model, run.train.clone());
    let start = Instant::now();
    for _ in 0..steps {
        let r = t.train_step(&data).unwrap();
        if r.step.is_multiple_of(50) || r.step == 1 {
            println!(
                "step {} total {:.5} l2 {:.5} psnr {:.2} sw {:.3} sc {:.3} of {:.3} ({:.2}s/step)",
                r.step,
                r.total,
                r.l2,
                r.psnr_sample,
                r.priors.switch,
                r.priors.score,
                r.priors.offset,
                start.elapsed().as_secs_f64() / r.step as f64
            );
        }
        if r.step.is_multiple_of(500) {
            report(&t.model, &frames[..64], &scenes[..64], &bank);
        }
    }
    let test = &frames[..32];
    let decs = t.model.decompose(test).unwrap();
    let truths: Vec<_> = scenes[..32].iter().map(|s| s.truth_masks(&bank).unwrap()).collect();
    let active: usize = decs.iter().map(|d| d.active().count()).sum();
    spritefactor::export::export_decomposition(&t.model, test, &out).unwrap();
    for i in 0..4 {
        test[i].save(&out.join(format!("input_{i}.png"))).unwrap();
    }
    let mut uses = vec![0; t.model.config.m];
    for d in &decs {
        for p in d.active() {
            uses[p.sprite_id] += 1;
        }
    }
    println!("sprite uses {uses:?}");
    spritefactor::checkpoint::save(&t, &out.join("checkpoint.sfck")).unwrap();
    println!(
        "active per frame {:.1}, truth per frame {:.1}",
        active as f64 / 32.0,
        truths.iter().map(|t| t.len()).sum::<usize>() as f64 / 32.0
    );
}

fn report(
    model: &spritefactor::model::SpriteModel,
    test: &[Frame],
    scenes: &[spritefactor::dataset::SyntheticScene],
    bank: &[spritefactor::sprite::SpritePatch],
) {
    let recon = model.reconstruct(test).unwrap();
    let decs = model.decompose(test).unwrap();
    let (sprites, _) = model.quantized_assets().unwrap();
    let preds: Vec<_> = decs.iter().map(|d| instance_masks(d, &model.layout, &sprites).unwrap()).collect();
    let truths: Vec<_> = scenes.iter().map(|s| s.truth_masks(bank).unwrap()).collect();
    let items: Vec<FrameEvaluation> = (0..test.len())
        .map(|i| FrameEvaluation {
            frame: &test[i],
            reconstruction: &recon[i],
            predicted: &preds[i],
            truth: &truths[i],
        })
        .collect();
    let rep = evaluate(&items, 0.5).unwrap();
    sharpness(model, test);
    let white: f64 =
        test.iter().map(|f| psnr(f, &Frame::filled(0, 64, 64, [1.0; 3])).unwrap()).sum::<f64>() / test.len() as f64;
    let active: usize = preds.iter().map(|p| p.len()).sum();
    println!(
        "EVAL psnr {:.2} gain {:.2} iou {:.3} precision {:.3} recall {:.3} active/frame {:.1}",
        rep.psnr,
        rep.psnr - white,
        rep.foreground_iou,
        rep.precision,
        rep.recall,
        active as f64 / test.len() as f64
    );
}

/// How far the soft quantities are from one-hot, on the raster-order soft
/// forward pass.
fn sharpness(model: &spritefactor::model::SpriteModel, test: &[Frame]) {
    use spritefactor::autograd::Graph;
    use spritefactor::model::DrawOrder;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (m, n) = (model.config.m, model.config.k + 1);
    let (mut soft_psnr, mut undecided, mut switches, mut score_max, mut off_max, mut active) =
        (0.0, 0usize, 0usize, 0.0, 0.0, 0usize);
    for chunk in test.chunks(8) {
        let mut g = Graph::new(&model.store);
        let fwd = model.forward_soft(&mut g, chunk, DrawOrder::Raster, &mut rng).unwrap();
        let v = g.value(fwd.reconstruction).data();
        let (w, h) = (model.layout.width, model.layout.height);
        let size = 3 * w * h;
        for (i, f) in chunk.iter().enumerate() {
            soft_psnr += psnr(f, &Frame::new(0, w, h, v[i * size..(i + 1) * size].to_vec())).unwrap();
        }
        for l in &fwd.layers {
            let sw = g.value(l.switches).data();
            let sc = g.value(l.scores).data();
            let (px, py) = (g.value(l.px).data(), g.value(l.py).data());
            for (a, &s) in sw.iter().enumerate() {
                switches += 1;
                if s > 0.05 && s < 0.95 {
                    undecided += 1;
                }
                if s >= 0.5 {
                    active += 1;
                    score_max += sc[a * m..(a + 1) * m].iter().cloned().fold(0.0, f64::max);
                    let mx = |p: &[f64]| p.iter().cloned().fold(0.0, f64::max);
                    off_max += 0.5 * (mx(&px[a * n..(a + 1) * n]) + mx(&py[a * n..(a + 1) * n]));
                }
            }
        }
    }
    let act = active.max(1) as f64;
    println!(
        "SHARP soft-raster psnr {:.2} undecided switches {:.3} active max score {:.3} active max offset p {:.3}",
        soft_psnr / test.len() as f64,
        undecided as f64 / switches as f64,
        score_max / act,
        off_max / act
    );
}
