//! Decomposition packages: sprite atlas, background and placement manifest.
//!
//! Package layout inside the output directory:
//!
//! ```text
//! manifest.json          placements, atlas index, background spec
//! atlas.png              RGBA sprite sheet, most used sprite first
//! background.png         texture backgrounds only
//! frames/recon_00000.png hard reconstruction of every exported frame
//! ```
//!
//! Manifests are validated against the bundled JSON Schema first and then
//! checked semantically; both kinds of failure are reported as
//! [`Error::Schema`] with a JSON pointer to the offending value.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anchors::AnchorLayout;
use crate::compositor::{alpha_over, Background, Point, Rgba, TextureBackground};
use crate::config::ModelConfig;
use crate::dataset::Frame;
use crate::decomposition::{render_decomposition, Decomposition, Placement};
use crate::error::{Error, Result};
use crate::image_io::{read_rgb, read_rgba, write_rgb, write_rgba};
use crate::model::SpriteModel;
use crate::sprite::{to_u8, SpritePatch};

pub const MANIFEST_VERSION: &str = "v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ATLAS_FILE: &str = "atlas.png";
pub const BACKGROUND_FILE: &str = "background.png";
pub const FRAMES_DIR: &str = "frames";

/// JSON Schema every manifest must satisfy.
pub const MANIFEST_SCHEMA: &str = include_str!("../schema/manifest.v1.schema.json");

/// Relative path of a frame's stored reconstruction.
pub fn reconstruction_file(index: usize) -> String {
    format!("{FRAMES_DIR}/recon_{index:05}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub model: ModelConfig,
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub layers: usize,
    pub grid: GridSpec,
    pub atlas: AtlasIndex,
    pub background: BackgroundSpec,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasIndex {
    pub file: String,
    /// Cell edge length in pixels (equals `k`).
    pub cell: usize,
    pub columns: usize,
    /// One entry per sprite in atlas order.
    pub sprites: Vec<AtlasEntry>,
}

/// Where a sprite sits in the atlas (top-left pixel) and how many active
/// placements use it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasEntry {
    pub sprite_id: usize,
    pub x: usize,
    pub y: usize,
    pub uses: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackgroundSpec {
    Solid { color: [u8; 3] },
    Texture { file: String, width: usize, height: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Offset {
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    pub reconstruction: String,
    pub background_offset: Offset,
    pub placements: Vec<ManifestPlacement>,
}

/// A placement as written to the manifest. `edited` marks placements moved
/// by hand, which may exceed the model's offset range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPlacement {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub sprite_id: usize,
    pub dx: i32,
    pub dy: i32,
    pub active: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub edited: bool,
}

impl From<&Placement> for ManifestPlacement {
    fn from(p: &Placement) -> Self {
        Self {
            layer: p.layer,
            row: p.row,
            col: p.col,
            sprite_id: p.sprite_id,
            dx: p.dx,
            dy: p.dy,
            active: p.active,
            edited: false,
        }
    }
}

impl From<&ManifestPlacement> for Placement {
    fn from(p: &ManifestPlacement) -> Self {
        Self { layer: p.layer, row: p.row, col: p.col, sprite_id: p.sprite_id, dx: p.dx, dy: p.dy, active: p.active }
    }
}

impl Manifest {
    pub fn layout(&self) -> Result<AnchorLayout> {
        AnchorLayout::new(self.k, self.width, self.height)
    }

    pub fn frame(&self, index: usize) -> Result<&FrameEntry> {
        self.frames
            .iter()
            .find(|f| f.index == index)
            .ok_or_else(|| Error::InvalidInput(format!("manifest has no frame {index}")))
    }

    /// The frame's placements as a decomposition ready for rendering.
    pub fn decomposition(&self, index: usize) -> Result<Decomposition> {
        let entry = self.frame(index)?;
        Ok(Decomposition {
            frame_index: entry.index,
            width: self.width,
            height: self.height,
            placements: entry.placements.iter().map(Placement::from).collect(),
            background_offset: Point::new(entry.background_offset.x as isize, entry.background_offset.y as isize),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn schema_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    let path = path.into();
    Error::Schema { path: if path.is_empty() { "/".into() } else { path }, message: message.into() }
}

fn validator() -> &'static jsonschema::Validator {
    static VALIDATOR: OnceLock<jsonschema::Validator> = OnceLock::new();
    VALIDATOR.get_or_init(|| {
        let schema: Value = serde_json::from_str(MANIFEST_SCHEMA).expect("bundled schema is valid JSON");
        jsonschema::validator_for(&schema).expect("bundled schema compiles")
    })
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

/// Parses and fully validates manifest JSON.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let value: Value = serde_json::from_str(text).map_err(|e| schema_error("/", format!("invalid JSON: {e}")))?;
    if let Some(err) = validator().iter_errors(&value).next() {
        return Err(schema_error(err.instance_path.to_string(), err.to_string()));
    }
    let manifest: Manifest =
        serde_path_to_error::deserialize(value).map_err(|e| schema_error(pointer(e.path()), e.inner().to_string()))?;
    check_manifest(&manifest)?;
    Ok(manifest)
}

/// Consistency checks the schema cannot express.
pub fn check_manifest(m: &Manifest) -> Result<()> {
    let cfg = &m.model;
    for (field, value, expected) in [
        ("/width", m.width, cfg.frame_width),
        ("/height", m.height, cfg.frame_height),
        ("/k", m.k, cfg.k),
        ("/layers", m.layers, cfg.layers),
        ("/atlas/cell", m.atlas.cell, cfg.k),
    ] {
        if value != expected {
            return Err(schema_error(field, format!("{value} disagrees with the model configuration ({expected})")));
        }
    }
    let layout = m.layout().map_err(|e| schema_error("/k", e.to_string()))?;
    if (m.grid.rows, m.grid.cols) != (layout.grid_h, layout.grid_w) {
        return Err(schema_error(
            "/grid",
            format!(
                "expected {}x{} anchors (rows = 2*height/k, cols = 2*width/k), found {}x{}",
                layout.grid_h, layout.grid_w, m.grid.rows, m.grid.cols
            ),
        ));
    }

    let sprites = cfg.m;
    if m.atlas.sprites.len() != sprites {
        return Err(schema_error(
            "/atlas/sprites",
            format!("expected {sprites} entries, found {}", m.atlas.sprites.len()),
        ));
    }
    let mut seen = vec![false; sprites];
    for (i, e) in m.atlas.sprites.iter().enumerate() {
        if e.sprite_id >= sprites || std::mem::replace(&mut seen[e.sprite_id], true) {
            return Err(schema_error(
                format!("/atlas/sprites/{i}/sprite_id"),
                format!("sprite ids must be a permutation of 0..{sprites}"),
            ));
        }
        if e.x % m.atlas.cell != 0 || e.y % m.atlas.cell != 0 {
            return Err(schema_error(
                format!("/atlas/sprites/{i}"),
                "cell position is not a multiple of the cell size",
            ));
        }
    }

    let mut indices = std::collections::HashSet::new();
    let max = (m.k / 2) as i32;
    for (fi, f) in m.frames.iter().enumerate() {
        if !indices.insert(f.index) {
            return Err(schema_error(format!("/frames/{fi}/index"), format!("duplicate frame index {}", f.index)));
        }
        if let BackgroundSpec::Texture { width, height, .. } = &m.background {
            let o = f.background_offset;
            if o.x + m.width > *width || o.y + m.height > *height {
                return Err(schema_error(
                    format!("/frames/{fi}/background_offset"),
                    format!("crop at ({}, {}) leaves the {width}x{height} texture", o.x, o.y),
                ));
            }
        }
        for (pi, p) in f.placements.iter().enumerate() {
            let at = |field: &str| format!("/frames/{fi}/placements/{pi}/{field}");
            let checks = [
                ("layer", p.layer < m.layers, format!("must be below {}", m.layers)),
                ("row", p.row < m.grid.rows, format!("must be below {}", m.grid.rows)),
                ("col", p.col < m.grid.cols, format!("must be below {}", m.grid.cols)),
                ("sprite_id", p.sprite_id < sprites, format!("must be below {sprites}")),
                ("dx", p.edited || p.dx.abs() <= max, format!("|dx| exceeds {max} on an unedited placement")),
                ("dy", p.edited || p.dy.abs() <= max, format!("|dy| exceeds {max} on an unedited placement")),
            ];
            if let Some((field, _, msg)) = checks.into_iter().find(|(_, ok, _)| !ok) {
                return Err(schema_error(at(field), msg));
            }
        }
    }
    Ok(())
}

/// A package loaded into memory: validated manifest plus decoded assets.
#[derive(Clone, Debug)]
pub struct DecompositionPackage {
    pub manifest: Manifest,
    /// Indexed by sprite id.
    pub sprites: Vec<SpritePatch>,
    pub background: Background,
}

/// Atlas grid width for `m` sprites: the smallest square that fits them.
pub fn atlas_columns(m: usize) -> usize {
    (1..=m.max(1)).find(|c| c * c >= m).unwrap_or(1)
}

/// Lays the sprites out row-major in descending usage order (ties by id).
pub fn atlas_index(sprite_count: usize, k: usize, uses: &[usize]) -> AtlasIndex {
    let mut order: Vec<usize> = (0..sprite_count).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(uses[i]), i));
    let columns = atlas_columns(sprite_count);
    let sprites = order
        .iter()
        .enumerate()
        .map(|(slot, &id)| AtlasEntry {
            sprite_id: id,
            x: (slot % columns) * k,
            y: (slot / columns) * k,
            uses: uses[id],
        })
        .collect();
    AtlasIndex { file: ATLAS_FILE.into(), cell: k, columns, sprites }
}

fn atlas_size(index: &AtlasIndex) -> (usize, usize) {
    let rows = index.sprites.len().div_ceil(index.columns);
    (index.columns * index.cell, rows * index.cell)
}

/// Packs sprites into an RGBA `[4, h, w]` image.
fn pack_atlas(index: &AtlasIndex, sprites: &[SpritePatch]) -> (usize, usize, Vec<f64>) {
    let (w, h) = atlas_size(index);
    let k = index.cell;
    let mut data = vec![0.0; 4 * w * h];
    for e in &index.sprites {
        let s = &sprites[e.sprite_id];
        for c in 0..4 {
            for y in 0..k {
                for x in 0..k {
                    data[(c * h + e.y + y) * w + e.x + x] = s.get(c, y, x);
                }
            }
        }
    }
    (w, h, data)
}

fn unpack_atlas(index: &AtlasIndex, w: usize, h: usize, data: &[f64], path: &Path) -> Result<Vec<SpritePatch>> {
    let k = index.cell;
    let mut sprites = vec![SpritePatch::transparent(k); index.sprites.len()];
    for e in &index.sprites {
        if e.x + k > w || e.y + k > h {
            return Err(Error::InvalidInput(format!(
                "{}: sprite {} at ({}, {}) lies outside the {w}x{h} atlas",
                path.display(),
                e.sprite_id,
                e.x,
                e.y
            )));
        }
        let s = &mut sprites[e.sprite_id];
        for c in 0..4 {
            for y in 0..k {
                for x in 0..k {
                    s.set(c, y, x, data[(c * h + e.y + y) * w + e.x + x]);
                }
            }
        }
    }
    Ok(sprites)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs hard inference on `frames` and writes the package to `dir`.
///
/// Only active placements are listed. Every frame's reconstruction is
/// written next to the manifest; re-rendering the manifest reproduces it
/// exactly.
pub fn export_decomposition(model: &SpriteModel, frames: &[Frame], dir: &Path) -> Result<DecompositionPackage> {
    let cfg = &model.config;
    let (sprites, background) = model.quantized_assets()?;
    let decompositions = model.decompose(frames)?;

    let mut uses = vec![0usize; cfg.m];
    for d in &decompositions {
        for p in d.active() {
            uses[p.sprite_id] += 1;
        }
    }
    let atlas = atlas_index(cfg.m, cfg.k, &uses);

    create_dir(&dir.join(FRAMES_DIR))?;
    let mut entries = Vec::with_capacity(frames.len());
    for d in &decompositions {
        let recon = render_decomposition(d, &model.layout, cfg.layers, &sprites, &background)?;
        let file = reconstruction_file(d.frame_index);
        recon.save(&dir.join(&file))?;
        let o = d.background_offset;
        entries.push(FrameEntry {
            index: d.frame_index,
            reconstruction: file,
            background_offset: Offset { x: o.x as usize, y: o.y as usize },
            placements: d.active().map(ManifestPlacement::from).collect(),
        });
    }

    let background_spec = match &background {
        Background::Solid(c) => BackgroundSpec::Solid { color: c.map(to_u8) },
        Background::Texture(t) => {
            write_rgb(&dir.join(BACKGROUND_FILE), t.width, t.height, &t.data)?;
            BackgroundSpec::Texture { file: BACKGROUND_FILE.into(), width: t.width, height: t.height }
        }
    };
    let (aw, ah, adata) = pack_atlas(&atlas, &sprites);
    write_rgba(&dir.join(ATLAS_FILE), aw, ah, &adata)?;

    let manifest = Manifest {
        version: MANIFEST_VERSION.into(),
        model: cfg.clone(),
        width: cfg.frame_width,
        height: cfg.frame_height,
        k: cfg.k,
        layers: cfg.layers,
        grid: GridSpec { rows: model.layout.grid_h, cols: model.layout.grid_w },
        atlas,
        background: background_spec,
        frames: entries,
    };
    check_manifest(&manifest)?;
    write_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(DecompositionPackage { manifest, sprites, background })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    std::fs::write(path, manifest.to_json()?).map_err(|e| Error::io(path, e))
}

/// Reads and validates a package directory.
pub fn load_package(dir: &Path) -> Result<DecompositionPackage> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = parse_manifest(&text)?;
    load_assets(dir, manifest)
}

/// Decodes the atlas and background referenced by an already validated
/// manifest.
pub fn load_assets(dir: &Path, manifest: Manifest) -> Result<DecompositionPackage> {
    let atlas_path: PathBuf = dir.join(&manifest.atlas.file);
    let (w, h, data) = read_rgba(&atlas_path)?;
    let sprites = unpack_atlas(&manifest.atlas, w, h, &data, &atlas_path)?;
    let background = match &manifest.background {
        BackgroundSpec::Solid { color } => Background::Solid(color.map(|c| c as f64 / 255.0)),
        BackgroundSpec::Texture { file, width, height } => {
            let path = dir.join(file);
            let (tw, th, data) = read_rgb(&path)?;
            if (tw, th) != (*width, *height) {
                return Err(schema_error(
                    "/background",
                    format!("{} is {tw}x{th}, the manifest says {width}x{height}", path.display()),
                ));
            }
            Background::Texture(TextureBackground { width: tw, height: th, data })
        }
    };
    Ok(DecompositionPackage { manifest, sprites, background })
}

/// Re-renders one frame of a package with test-time compositing rules.
pub fn render_manifest(package: &DecompositionPackage, index: usize) -> Result<Frame> {
    let m = &package.manifest;
    let layout = m.layout()?;
    render_decomposition(&m.decomposition(index)?, &layout, m.layers, &package.sprites, &package.background)
}

/// One alpha-over test case shared with other implementations of the
/// compositor. Inputs are on the 8-bit grid; `expected_u8` is the rounded
/// result an 8-bit canvas must produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaOverCase {
    pub fg: [u8; 4],
    pub bg: [u8; 4],
    pub expected: Rgba,
    pub expected_u8: [u8; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformanceVectors {
    pub version: String,
    pub description: String,
    pub cases: Vec<AlphaOverCase>,
}

/// Deterministic alpha-over conformance vectors: edge cases (transparent,
/// opaque, half alpha) followed by seeded random pairs.
pub fn alpha_over_vectors() -> ConformanceVectors {
    let unit = |v: [u8; 4]| v.map(|c| c as f64 / 255.0);
    let case = |fg: [u8; 4], bg: [u8; 4]| {
        let expected = alpha_over(unit(fg), unit(bg));
        AlphaOverCase { fg, bg, expected, expected_u8: expected.map(to_u8) }
    };
    let mut cases = vec![
        case([0, 0, 0, 0], [0, 0, 0, 0]),
        case([255, 0, 0, 0], [0, 0, 255, 255]),
        case([255, 0, 0, 255], [0, 0, 255, 255]),
        case([255, 0, 0, 128], [0, 0, 255, 255]),
        case([255, 0, 0, 128], [0, 0, 255, 0]),
        case([10, 200, 30, 128], [250, 250, 250, 128]),
        case([0, 0, 0, 1], [255, 255, 255, 1]),
        case([255, 255, 255, 254], [0, 0, 0, 255]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..120 {
        let fg: [u8; 4] = rng.random();
        let mut bg: [u8; 4] = rng.random();
        // Half the random cases use an opaque background, as in frames.
        if rng.random_bool(0.5) {
            bg[3] = 255;
        }
        cases.push(case(fg, bg));
    }
    ConformanceVectors {
        version: MANIFEST_VERSION.into(),
        description: "straight-alpha Porter-Duff over: fg over bg, channel values are 8-bit levels / 255; \
                      a fully transparent result is [0, 0, 0, 0]"
            .into(),
        cases,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest() -> Manifest {
        let model = ModelConfig { k: 4, m: 2, layers: 1, frame_width: 8, frame_height: 8, ..Default::default() };
        Manifest {
            version: MANIFEST_VERSION.into(),
            width: 8,
            height: 8,
            k: 4,
            layers: 1,
            grid: GridSpec { rows: 4, cols: 4 },
            atlas: atlas_index(2, 4, &[0, 3]),
            background: BackgroundSpec::Solid { color: [255, 255, 255] },
            frames: vec![FrameEntry {
                index: 0,
                reconstruction: reconstruction_file(0),
                background_offset: Offset { x: 0, y: 0 },
                placements: vec![ManifestPlacement {
                    layer: 0,
                    row: 1,
                    col: 2,
                    sprite_id: 1,
                    dx: 2,
                    dy: -1,
                    active: true,
                    edited: false,
                }],
            }],
            model,
        }
    }

    #[test]
    fn atlas_is_ordered_by_usage() {
        let a = atlas_index(5, 8, &[1, 7, 0, 7, 2]);
        let ids: Vec<usize> = a.sprites.iter().map(|e| e.sprite_id).collect();
        assert_eq!(ids, [1, 3, 4, 0, 2]);
        assert_eq!(a.columns, 3);
        assert_eq!((a.sprites[3].x, a.sprites[3].y), (0, 8));
        assert_eq!(atlas_columns(50), 8);
        assert_eq!(atlas_columns(1), 1);
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let m = tiny_manifest();
        let text = m.to_json().unwrap();
        assert_eq!(parse_manifest(&text).unwrap(), m);
        assert!(!text.contains("edited"));
    }

    fn error_path(value: Value) -> String {
        match parse_manifest(&value.to_string()) {
            Err(Error::Schema { path, .. }) => path,
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn errors_point_at_the_offending_value() {
        let base = serde_json::to_value(tiny_manifest()).unwrap();

        let mut v = base.clone();
        v["frames"][0]["placements"][0]["dx"] = "left".into();
        assert_eq!(error_path(v), "/frames/0/placements/0/dx");

        let mut v = base.clone();
        v["frames"][0]["placements"][0]["sprite_id"] = 2.into();
        assert_eq!(error_path(v), "/frames/0/placements/0/sprite_id");

        let mut v = base.clone();
        v["frames"][0]["placements"][0]["dy"] = 3.into();
        assert_eq!(error_path(v.clone()), "/frames/0/placements/0/dy");
        v["frames"][0]["placements"][0]["edited"] = true.into();
        assert!(parse_manifest(&v.to_string()).is_ok());

        let mut v = base.clone();
        v["grid"]["rows"] = 3.into();
        assert_eq!(error_path(v), "/grid");

        let mut v = base.clone();
        v["model"]["bogus"] = 1.into();
        assert_eq!(error_path(v), "/model/bogus");

        let mut v = base;
        v["version"] = "v2".into();
        assert_eq!(error_path(v), "/version");

        assert!(matches!(parse_manifest("{"), Err(Error::Schema { .. })));
    }

    #[test]
    fn conformance_vectors_are_deterministic() {
        let a = alpha_over_vectors();
        assert_eq!(a, alpha_over_vectors());
        assert_eq!(a.cases[0].expected, [0.0; 4]);
        assert_eq!(a.cases[2].expected_u8, [255, 0, 0, 255]);
    }
}
