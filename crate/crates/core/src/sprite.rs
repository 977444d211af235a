//! Straight-alpha RGBA patches.

use serde::{Deserialize, Serialize};

/// A square RGBA patch stored planar: `[4, size, size]`, straight
/// (non-premultiplied) alpha, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpritePatch {
    size: usize,
    data: Vec<f64>,
}

impl SpritePatch {
    pub fn new(size: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 4 * size * size, "patch data must be 4 x {size} x {size}");
        Self { size, data }
    }

    pub fn transparent(size: usize) -> Self {
        Self::new(size, vec![0.0; 4 * size * size])
    }

    /// Uniform patch of one RGBA value.
    pub fn filled(size: usize, rgba: [f64; 4]) -> Self {
        let mut data = Vec::with_capacity(4 * size * size);
        for v in rgba {
            data.extend(std::iter::repeat_n(v, size * size));
        }
        Self::new(size, data)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.size + y) * self.size + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f64) {
        let s = self.size;
        self.data[(channel * s + y) * s + x] = v;
    }

    #[inline]
    pub fn rgba(&self, y: usize, x: usize) -> [f64; 4] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x), self.get(3, y, x)]
    }

    pub fn alpha(&self) -> &[f64] {
        let n = self.size * self.size;
        &self.data[3 * n..4 * n]
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self { size: self.size, data: self.data.iter().map(|&v| quantize_unit(v)).collect() }
    }
}

/// Nearest `i / 255` to `v`, clamped to `[0, 1]`.
pub fn quantize_unit(v: f64) -> f64 {
    to_u8(v) as f64 / 255.0
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
