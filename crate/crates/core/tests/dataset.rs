//! Frame I/O, crops and the synthetic scene generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spritefactor::dataset::{
    crop_offset, generate_floating_sprites, load_frames, render_scene, save_frames, Frame, SyntheticConfig,
    TruthInstance,
};
use spritefactor::sprite::SpritePatch;

/// Upper 1% point of the chi-square distribution with 10 degrees of freedom.
const CHI2_10_P01: f64 = 23.209;

#[test]
fn instance_counts_are_uniform() {
    let cfg = SyntheticConfig {
        frames: 10_000,
        width: 8,
        height: 8,
        sprite_size: 4,
        sprite_kinds: 3,
        min_instances: 5,
        max_instances: 15,
    };
    let (_, scenes) = generate_floating_sprites(&cfg, &mut ChaCha8Rng::seed_from_u64(2024)).unwrap();
    let mut counts = [0usize; 11];
    for s in &scenes {
        counts[s.instances.len() - 5] += 1;
    }
    let expected = cfg.frames as f64 / 11.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_10_P01, "chi2 {chi2} for counts {counts:?}");
}

#[test]
fn crop_offsets_cover_every_position_and_stay_inside() {
    let (w, h, cw, ch) = (20, 16, 8, 8);
    let mut seen = vec![vec![0usize; w - cw + 1]; h - ch + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100_000 {
        let (x, y) = crop_offset(w, h, cw, ch, &mut rng).unwrap();
        assert!(x + cw <= w && y + ch <= h);
        seen[y][x] += 1;
    }
    assert!(seen.iter().flatten().all(|&c| c > 0));
    assert!(crop_offset(8, 8, 9, 4, &mut rng).is_err());
    assert_eq!(crop_offset(8, 8, 8, 8, &mut rng).unwrap(), (0, 0));
}

#[test]
fn eight_bit_frames_survive_a_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames: Vec<Frame> = (0..3)
        .map(|i| Frame::new(i, 7, 5, (0..3 * 35).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect()))
        .collect();
    save_frames(&frames, dir.path()).unwrap();
    assert_eq!(load_frames(dir.path()).unwrap(), frames);
}

#[test]
fn transparent_sprites_leave_the_frame_white() {
    let bank = vec![SpritePatch::transparent(5); 2];
    let instances: Vec<TruthInstance> =
        (0..6).map(|i| TruthInstance { sprite_id: i % 2, x: i as isize * 2 - 2, y: i as isize - 1 }).collect();
    let frame = render_scene(&bank, &instances, 12, 9).unwrap();
    assert!(frame.data().iter().all(|&v| v == 1.0));
}

#[test]
fn generated_sprites_stay_inside_the_frame() {
    let cfg = SyntheticConfig { frames: 200, ..Default::default() };
    let (bank, scenes) = generate_floating_sprites(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(bank.len(), cfg.sprite_kinds);
    for s in &scenes {
        for inst in &s.instances {
            assert!(inst.sprite_id < cfg.sprite_kinds);
            assert!(inst.x >= 0 && inst.y >= 0);
            assert!(inst.x as usize + cfg.sprite_size <= cfg.width && inst.y as usize + cfg.sprite_size <= cfg.height);
        }
    }
}
