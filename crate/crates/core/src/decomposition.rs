//! Discrete (test-time) decompositions and their rendering.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorLayout;
use crate::compositor::{composite_frame, render_background, render_layer, Background, Point};
use crate::dataset::{sprite_mask, Frame};
use crate::error::{Error, Result};
use crate::evaluation::Mask;
use crate::sprite::SpritePatch;

/// One anchor's discrete choice: which sprite, how far it moved, and
/// whether it is shown at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub sprite_id: usize,
    pub dx: i32,
    pub dy: i32,
    pub active: bool,
}

impl Placement {
    /// Top-left corner of the placed sprite in frame pixels.
    pub fn position(&self, layout: &AnchorLayout) -> Point {
        let (oy, ox) = layout.sprite_origin(layout.index(self.row, self.col));
        Point::new(ox + self.dx as isize, oy + self.dy as isize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub frame_index: usize,
    pub width: usize,
    pub height: usize,
    pub placements: Vec<Placement>,
    /// Top-left corner of the background crop (texture backgrounds only).
    pub background_offset: Point,
}

impl Decomposition {
    pub fn active(&self) -> impl Iterator<Item = &Placement> {
        self.placements.iter().filter(|p| p.active)
    }
}

/// Active placements of `layer` sorted back to front: raster order of the
/// anchor grid, ties kept in list order.
fn layer_order(placements: &[Placement], layer: usize) -> Vec<&Placement> {
    let mut out: Vec<&Placement> = placements.iter().filter(|p| p.active && p.layer == layer).collect();
    out.sort_by_key(|p| (p.row, p.col));
    out
}

/// Renders a decomposition: layers back to front, anchors in raster order
/// within a layer, over the background.
pub fn render_decomposition(
    decomposition: &Decomposition,
    layout: &AnchorLayout,
    layers: usize,
    sprites: &[SpritePatch],
    background: &Background,
) -> Result<Frame> {
    let (w, h) = (decomposition.width, decomposition.height);
    let bg = render_background(background, decomposition.background_offset, w, h)?;
    let mut canvases = Vec::with_capacity(layers);
    for layer in 0..layers {
        let ordered = layer_order(&decomposition.placements, layer);
        let mut patches = Vec::with_capacity(ordered.len());
        let mut positions = Vec::with_capacity(ordered.len());
        for p in &ordered {
            let sprite =
                sprites.get(p.sprite_id).ok_or(Error::UnknownSprite { id: p.sprite_id, count: sprites.len() })?;
            patches.push(sprite);
            positions.push(p.position(layout));
        }
        let order: Vec<usize> = (0..patches.len()).collect();
        canvases.push(render_layer(&patches, &positions, &order, w, h)?);
    }
    let mut frame = composite_frame(&bg, &canvases)?;
    frame.index = decomposition.frame_index;
    Ok(frame)
}

/// Amodal footprint of every active placement whose sprite is visible
/// (alpha >= 0.5 somewhere inside the frame).
pub fn instance_masks(
    decomposition: &Decomposition,
    layout: &AnchorLayout,
    sprites: &[SpritePatch],
) -> Result<Vec<Mask>> {
    let mut masks = Vec::new();
    for p in decomposition.active() {
        let sprite = sprites.get(p.sprite_id).ok_or(Error::UnknownSprite { id: p.sprite_id, count: sprites.len() })?;
        let mask = sprite_mask(sprite, p.position(layout), decomposition.width, decomposition.height);
        if !mask.is_empty() {
            masks.push(mask);
        }
    }
    Ok(masks)
}
