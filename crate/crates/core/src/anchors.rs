//! Anchor grid geometry.
//!
//! Anchors sit at the centres of a regular grid with spacing `k/2`, so a
//! `w x h` frame has `2w/k x 2h/k` anchors per layer. An anchor's sprite is
//! `k x k`, centred on the anchor when its offset is zero, and may move by
//! up to `k/2` pixels along each axis.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorLayout {
    pub k: usize,
    pub width: usize,
    pub height: usize,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl AnchorLayout {
    pub fn new(k: usize, width: usize, height: usize) -> Result<Self> {
        if k < 4 || !k.is_power_of_two() {
            return Err(Error::config("k", format!("patch size must be a power of two >= 4, got {k}")));
        }
        let half = k / 2;
        if width == 0 || height == 0 || !width.is_multiple_of(half) || !height.is_multiple_of(half) {
            return Err(Error::Shape(format!(
                "frame {width}x{height} is not a multiple of k/2 = {half} in both dimensions"
            )));
        }
        Ok(Self { k, width, height, grid_w: width / half, grid_h: height / half })
    }

    /// Anchors per layer.
    pub fn count(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn row_col(&self, anchor: usize) -> (usize, usize) {
        (anchor / self.grid_w, anchor % self.grid_w)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid_w + col
    }

    /// Pixel position of the anchor; the unshifted sprite covers
    /// `[center - k/2, center + k/2)` on each axis.
    pub fn center(&self, anchor: usize) -> (isize, isize) {
        let (r, c) = self.row_col(anchor);
        let half = (self.k / 2) as isize;
        let quarter = (self.k / 4) as isize;
        (r as isize * half + quarter, c as isize * half + quarter)
    }

    /// Top-left corner (row, col) of the unshifted sprite.
    pub fn sprite_origin(&self, anchor: usize) -> (isize, isize) {
        let (cy, cx) = self.center(anchor);
        let half = (self.k / 2) as isize;
        (cy - half, cx - half)
    }

    /// Top-left corner of the `2k x 2k` canvas holding every possible shift.
    pub fn canvas_origin(&self, anchor: usize) -> (isize, isize) {
        let (cy, cx) = self.center(anchor);
        (cy - self.k as isize, cx - self.k as isize)
    }

    pub fn max_offset(&self) -> i32 {
        (self.k / 2) as i32
    }
}
