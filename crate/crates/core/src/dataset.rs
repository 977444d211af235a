//! Frames, frame directories, random crops and the synthetic
//! floating-sprites generator with its ground truth.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::{composite_frame, render_layer, Point};
use crate::config::{DatasetSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::evaluation::Mask;
use crate::image_io;
use crate::sprite::SpritePatch;

/// An RGB frame stored planar `[3, h, w]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Position in the source collection.
    pub index: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(index: usize, width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * width * height, "frame data must be 3 x {height} x {width}");
        Self { index, width, height, data }
    }

    pub fn filled(index: usize, width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, width * height));
        }
        Self::new(index, width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    /// The pixel as opaque RGBA.
    #[inline]
    pub fn rgba(&self, y: usize, x: usize) -> [f64; 4] {
        let [r, g, b] = self.rgb(y, x);
        [r, g, b, 1.0]
    }

    #[inline]
    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let n = self.width * self.height;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + i] = v;
        }
    }

    /// The `width x height` window with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Frame> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height} at ({x}, {y}) exceeds frame {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for row in y..y + height {
                let start = (c * self.height + row) * self.width + x;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Frame::new(self.index, width, height, data))
    }

    pub fn load(index: usize, path: &Path) -> Result<Frame> {
        let (w, h, data) = image_io::read_rgb(path)?;
        Ok(Frame::new(index, w, h, data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        image_io::write_rgb(path, self.width, self.height, &self.data)
    }
}

fn is_png(path: &Path) -> bool {
    path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_png(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(Error::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(files)
}

/// Loads every PNG in `dir` in file-name order. All frames must share the
/// size of the first one.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let files = list_frames(dir)?;
    let (ew, eh) = image_io::dimensions(&files[0])?;
    for file in &files[1..] {
        let (w, h) = image_io::dimensions(file)?;
        if (w, h) != (ew, eh) {
            return Err(Error::MixedDimensions {
                file: file.clone(),
                expected_w: ew,
                expected_h: eh,
                found_w: w,
                found_h: h,
            });
        }
    }
    files.iter().enumerate().map(|(i, f)| Frame::load(i, f)).collect()
}

pub fn frame_file_name(position: usize) -> String {
    format!("frame_{position:05}.png")
}

/// Writes `frames` as `frame_00000.png, frame_00001.png, ...`, creating
/// `dir` if needed.
pub fn save_frames(frames: &[Frame], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(frame_file_name(i));
            f.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Uniform top-left corner for a `cw x ch` crop of a `w x h` frame.
pub fn crop_offset<R: Rng + ?Sized>(w: usize, h: usize, cw: usize, ch: usize, rng: &mut R) -> Result<(usize, usize)> {
    if cw > w || ch > h || cw == 0 || ch == 0 {
        return Err(Error::Shape(format!("cannot take a {cw}x{ch} crop from a {w}x{h} frame")));
    }
    Ok((rng.random_range(0..=w - cw), rng.random_range(0..=h - ch)))
}

/// A uniformly placed `cw x ch` crop of `frame`.
pub fn sample_crop<R: Rng + ?Sized>(frame: &Frame, cw: usize, ch: usize, rng: &mut R) -> Result<Frame> {
    let (x, y) = crop_offset(frame.width, frame.height, cw, ch, rng)?;
    frame.crop(x, y, cw, ch)
}

/// One placed ground-truth sprite; `(x, y)` is its top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthInstance {
    pub sprite_id: usize,
    pub x: isize,
    pub y: isize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub sprite_size: usize,
    /// How many sprites of the procedural bank to use.
    pub sprite_kinds: usize,
    pub min_instances: usize,
    pub max_instances: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            width: 64,
            height: 64,
            sprite_size: 12,
            sprite_kinds: 3,
            min_instances: 5,
            max_instances: 15,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sprite_kinds == 0 || self.sprite_kinds > SPRITE_BANK_SIZE {
            return Err(Error::config("sprite_kinds", format!("must lie in 1..={SPRITE_BANK_SIZE}")));
        }
        if self.sprite_size < 4 || self.sprite_size > self.width || self.sprite_size > self.height {
            return Err(Error::config("sprite_size", "must be at least 4 and fit inside the frame"));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::config("min_instances", "must not exceed max_instances"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub frame: Frame,
    /// Back to front.
    pub instances: Vec<TruthInstance>,
}

impl SyntheticScene {
    /// Amodal footprint (alpha >= 0.5) of every instance.
    pub fn truth_masks(&self, bank: &[SpritePatch]) -> Result<Vec<Mask>> {
        instance_masks(bank, &self.instances, self.frame.width(), self.frame.height())
    }
}

pub const SPRITE_BANK_SIZE: usize = 11;

/// Colour and shape of each bank sprite, in unit coordinates `u, v` in
/// `[-1, 1]` (`v` grows downward).
fn bank_pixel(id: usize, u: f64, v: f64) -> Option<[u8; 3]> {
    let r = (u * u + v * v).sqrt();
    let (au, av) = (u.abs(), v.abs());
    let hit = |b: bool, c: [u8; 3]| b.then_some(c);
    match id {
        0 => hit(r < 0.9, [220, 40, 40]),
        1 => hit(r > 0.45 && r < 0.9, [40, 80, 220]),
        2 => hit(v > -0.85 && v < 0.8 && au < 0.9 * (v + 0.85) / 1.65, [40, 170, 70]),
        3 => hit(au + av < 0.9, [240, 150, 30]),
        4 => hit((au < 0.3 && av < 0.9) || (av < 0.3 && au < 0.9), [140, 60, 190]),
        5 => hit(r < 0.9 && ((u - 0.35).powi(2) + (v + 0.2).powi(2)).sqrt() > 0.65, [210, 190, 30]),
        6 => hit((v > -0.9 && v < -0.5 && au < 0.9) || (au < 0.22 && av < 0.9), [20, 150, 150]),
        7 => hit((u > -0.8 && u < -0.4 && av < 0.9) || (v > 0.5 && v < 0.9 && u > -0.8 && u < 0.8), [140, 85, 40]),
        8 => hit((au > 0.45 && au < 0.85 && av < 0.9) || (av < 0.2 && au < 0.85), [210, 40, 160]),
        9 => hit(au.max(av) < 0.85 && au.max(av) > 0.5, [70, 70, 70]),
        10 if r < 0.35 => Some([30, 30, 30]),
        10 => hit(r < 0.9, [250, 130, 160]),
        _ => None,
    }
}

/// The procedural sprite bank: circles, rings, polygons and letter shapes
/// with binary alpha and 8-bit colours, so that frames rendered from them
/// survive an 8-bit PNG round trip exactly.
pub fn sprite_bank(size: usize) -> Vec<SpritePatch> {
    (0..SPRITE_BANK_SIZE)
        .map(|id| {
            let mut patch = SpritePatch::transparent(size);
            for y in 0..size {
                for x in 0..size {
                    let u = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
                    let v = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
                    if let Some(rgb) = bank_pixel(id, u, v) {
                        for c in 0..3 {
                            patch.set(c, y, x, rgb[c] as f64 / 255.0);
                        }
                        patch.set(3, y, x, 1.0);
                    }
                }
            }
            patch
        })
        .collect()
}

/// Composites `instances` in list order over a white background.
pub fn render_scene(bank: &[SpritePatch], instances: &[TruthInstance], width: usize, height: usize) -> Result<Frame> {
    let mut sprites = Vec::with_capacity(instances.len());
    let mut positions = Vec::with_capacity(instances.len());
    for inst in instances {
        let sprite = bank.get(inst.sprite_id).ok_or(Error::UnknownSprite { id: inst.sprite_id, count: bank.len() })?;
        sprites.push(sprite);
        positions.push(Point::new(inst.x, inst.y));
    }
    let order: Vec<usize> = (0..instances.len()).collect();
    let layer = render_layer(&sprites, &positions, &order, width, height)?;
    composite_frame(&Frame::filled(0, width, height, [1.0; 3]), &[layer])
}

/// Footprint of a sprite placed at `at`: pixels with alpha >= 0.5.
pub fn sprite_mask(sprite: &SpritePatch, at: Point, width: usize, height: usize) -> Mask {
    let mut mask = Mask::empty(width, height);
    let s = sprite.size() as isize;
    for sy in 0..s {
        for sx in 0..s {
            let (y, x) = (at.y + sy, at.x + sx);
            if y >= 0
                && x >= 0
                && (y as usize) < height
                && (x as usize) < width
                && sprite.get(3, sy as usize, sx as usize) >= 0.5
            {
                mask.set(y as usize, x as usize, true);
            }
        }
    }
    mask
}

pub fn instance_masks(
    bank: &[SpritePatch],
    instances: &[TruthInstance],
    width: usize,
    height: usize,
) -> Result<Vec<Mask>> {
    instances
        .iter()
        .map(|inst| {
            let sprite =
                bank.get(inst.sprite_id).ok_or(Error::UnknownSprite { id: inst.sprite_id, count: bank.len() })?;
            Ok(sprite_mask(sprite, Point::new(inst.x, inst.y), width, height))
        })
        .collect()
}

/// Random scenes of fully visible, possibly overlapping sprites over white.
///
/// Each frame holds a uniform number of instances in
/// `min_instances..=max_instances`, each with a uniform sprite kind and a
/// uniform position keeping the sprite inside the frame. Returns the sprite
/// bank subset in use alongside the scenes.
pub fn generate_floating_sprites<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    rng: &mut R,
) -> Result<(Vec<SpritePatch>, Vec<SyntheticScene>)> {
    cfg.validate()?;
    let mut bank = sprite_bank(cfg.sprite_size);
    bank.truncate(cfg.sprite_kinds);
    let s = cfg.sprite_size;
    let mut scenes = Vec::with_capacity(cfg.frames);
    for index in 0..cfg.frames {
        let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
        let instances: Vec<TruthInstance> = (0..n)
            .map(|_| TruthInstance {
                sprite_id: rng.random_range(0..bank.len()),
                x: rng.random_range(0..=cfg.width - s) as isize,
                y: rng.random_range(0..=cfg.height - s) as isize,
            })
            .collect();
        let mut frame = render_scene(&bank, &instances, cfg.width, cfg.height)?;
        frame.index = index;
        scenes.push(SyntheticScene { frame, instances });
    }
    Ok((bank, scenes))
}

pub const TRUTH_FILE: &str = "truth.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFrame {
    pub file: String,
    pub instances: Vec<TruthInstance>,
}

/// Contents of `truth.json`: sprite images (relative paths) and per-frame
/// placements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub width: usize,
    pub height: usize,
    pub sprites: Vec<String>,
    pub frames: Vec<TruthFrame>,
}

/// A synthetic dataset's ground truth, loaded back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub sprites: Vec<SpritePatch>,
    pub frames: Vec<Vec<TruthInstance>>,
}

impl GroundTruth {
    pub fn from_scenes(bank: &[SpritePatch], scenes: &[SyntheticScene]) -> Self {
        let (width, height) = scenes.first().map(|s| (s.frame.width(), s.frame.height())).unwrap_or((0, 0));
        Self { width, height, sprites: bank.to_vec(), frames: scenes.iter().map(|s| s.instances.clone()).collect() }
    }

    pub fn masks(&self, frame: usize) -> Result<Vec<Mask>> {
        instance_masks(&self.sprites, &self.frames[frame], self.width, self.height)
    }
}

/// Writes frames, `sprites/sprite_XX.png` and `truth.json` into `dir`.
pub fn write_synthetic(dir: &Path, bank: &[SpritePatch], scenes: &[SyntheticScene]) -> Result<()> {
    let frames: Vec<Frame> = scenes.iter().map(|s| s.frame.clone()).collect();
    save_frames(&frames, dir)?;
    let sprite_dir = dir.join("sprites");
    std::fs::create_dir_all(&sprite_dir).map_err(|e| Error::io(&sprite_dir, e))?;
    let mut sprites = Vec::with_capacity(bank.len());
    for (i, sprite) in bank.iter().enumerate() {
        let rel = format!("sprites/sprite_{i:02}.png");
        image_io::write_rgba(&dir.join(&rel), sprite.size(), sprite.size(), sprite.data())?;
        sprites.push(rel);
    }
    let (width, height) = frames.first().map(|f| (f.width(), f.height())).unwrap_or((0, 0));
    let truth = TruthFile {
        width,
        height,
        sprites,
        frames: scenes
            .iter()
            .enumerate()
            .map(|(i, s)| TruthFrame { file: frame_file_name(i), instances: s.instances.clone() })
            .collect(),
    };
    let path = dir.join(TRUTH_FILE);
    let text = serde_json::to_string_pretty(&truth)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join(TRUTH_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let truth: TruthFile = serde_json::from_str(&text)?;
    let mut sprites = Vec::with_capacity(truth.sprites.len());
    for rel in &truth.sprites {
        let (w, h, data) = image_io::read_rgba(&dir.join(rel))?;
        if w != h {
            return Err(Error::InvalidInput(format!("{rel}: sprite images must be square, found {w}x{h}")));
        }
        sprites.push(SpritePatch::new(w, data));
    }
    Ok(GroundTruth {
        width: truth.width,
        height: truth.height,
        sprites,
        frames: truth.frames.into_iter().map(|f| f.instances).collect(),
    })
}

/// Frames ready for training or inference, with ground truth when the
/// source provides it.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub frames: Vec<Frame>,
    /// Crop `(width, height)` to draw per training step when the frames are
    /// larger than the model's input.
    pub crop: Option<(usize, usize)>,
    pub truth: Option<GroundTruth>,
}

/// Resolves a dataset specification. Synthetic data is generated from
/// `seed`; frame directories carrying a `truth.json` load it as well.
pub fn load_dataset(spec: &DatasetSpec, frame_width: usize, frame_height: usize, seed: u64) -> Result<LoadedDataset> {
    let source = spec.source.as_ref().ok_or_else(|| {
        Error::config("dataset.source", "no dataset given (set a frames directory, an image or synthetic)")
    })?;
    let check_path = |path: &Path| {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::config("dataset.path", format!("{} does not exist", path.display())))
        }
    };
    let (frames, truth) = match source {
        DatasetSource::Frames { path } => {
            check_path(path)?;
            let frames = load_frames(path)?;
            let truth = if path.join(TRUTH_FILE).exists() { Some(load_truth(path)?) } else { None };
            (frames, truth)
        }
        DatasetSource::Image { path } => {
            check_path(path)?;
            (vec![Frame::load(0, path)?], None)
        }
        DatasetSource::Synthetic(cfg) => {
            let (bank, scenes) = generate_floating_sprites(cfg, &mut synthetic_rng(seed))?;
            let truth = GroundTruth::from_scenes(&bank, &scenes);
            (scenes.into_iter().map(|s| s.frame).collect(), Some(truth))
        }
    };
    let (w, h) = (frames[0].width(), frames[0].height());
    if w < frame_width || h < frame_height {
        return Err(Error::Shape(format!(
            "dataset frames are {w}x{h}, smaller than the model input {frame_width}x{frame_height}"
        )));
    }
    let crop = ((w, h) != (frame_width, frame_height)).then_some((frame_width, frame_height));
    Ok(LoadedDataset { frames, crop, truth })
}

const SYNTHETIC_STREAM_SALT: u64 = 0x5_9e7e_71c0;

/// RNG behind synthetic datasets generated for run seed `seed`.
pub fn synthetic_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ SYNTHETIC_STREAM_SALT)
}
