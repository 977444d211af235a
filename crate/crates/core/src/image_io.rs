//! PNG reading and writing for planar `[channels, h, w]` float images.

use std::path::Path;

use image::{ImageBuffer, Rgb, Rgba};

use crate::error::{Error, Result};
use crate::sprite::to_u8;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image { path: path.to_path_buf(), source },
    }
}

/// Reads any supported image as RGB, returning `(width, height, [3, h, w])`.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok((w, h, data))
}

/// Image size without decoding pixels.
pub fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| image_err(path, e))
}

pub fn read_rgba(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 4 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..4 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok((w, h, data))
}

pub fn write_rgb(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), 3 * width * height);
    let img = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let at = |c: usize| to_u8(data[(c * height + y as usize) * width + x as usize]);
        Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn write_rgba(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), 4 * width * height);
    let img = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let at = |c: usize| to_u8(data[(c * height + y as usize) * width + x as usize]);
        Rgba([at(0), at(1), at(2), at(3)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}
