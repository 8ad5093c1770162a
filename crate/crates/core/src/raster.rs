//! RGB raster helpers shared by the pipeline stages.

use std::path::Path;

use image::{ImageBuffer, Pixel, RgbImage};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

/// Integer crop rectangle for `bbox` inside a `width x height` raster.
///
/// The origin is `round(x1), round(y1)` and the extent `round(x2 - x1)` by
/// `round(y2 - y1)`. A half-pixel box touching the far border can round one
/// pixel past the edge; the extent is clamped to the raster in that case.
pub(crate) fn crop_rect(bbox: &BoundingBox, width: u32, height: u32) -> Result<(u32, u32, u32, u32)> {
    bbox.ensure_within(width, height)?;
    let (x, y, w, h) = bbox.pixel_rect();
    let w = w.min(width as i64 - x);
    let h = h.min(height as i64 - y);
    if w <= 0 || h <= 0 {
        return Err(Error::InvalidBox(format!(
            "box {bbox} rasterizes to an empty crop"
        )));
    }
    Ok((x as u32, y as u32, w as u32, h as u32))
}

pub(crate) fn crop_buffer<P: Pixel>(
    src: &ImageBuffer<P, Vec<P::Subpixel>>,
    bbox: &BoundingBox,
) -> Result<ImageBuffer<P, Vec<P::Subpixel>>> {
    let (x, y, w, h) = crop_rect(bbox, src.width(), src.height())?;
    Ok(ImageBuffer::from_fn(w, h, |u, v| *src.get_pixel(x + u, y + v)))
}

/// Cuts the sub-rectangle covered by `bbox` out of `image`.
///
/// Output pixel `(u, v)` is input pixel `(round(x1) + u, round(y1) + v)`.
pub fn crop_region(image: &RgbImage, bbox: &BoundingBox) -> Result<RgbImage> {
    crop_buffer(image, bbox)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(img.to_rgb8())
}

pub fn save_rgb(image: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image.save(path).map_err(|e| Error::image(path, e))
}

/// Bilinear resize of a planar `f32` raster (half-pixel centers, edge clamp).
pub fn resize_bilinear(src: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(src.len(), width * height);
    let mut out = vec![0f32; out_w * out_h];
    if width == 0 || height == 0 {
        return out;
    }
    let sx = width as f32 / out_w as f32;
    let sy = height as f32 / out_h as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * width + x0] * (1.0 - wx) + src[y0 * width + x1] * wx;
            let bot = src[y1 * width + x0] * (1.0 - wx) + src[y1 * width + x1] * wx;
            out[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Resizes an RGB raster to `out_w x out_h` and returns planar CHW floats in `[0, 1]`.
pub fn rgb_to_planar(image: &RgbImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut out = Vec::with_capacity(3 * out_w * out_h);
    for c in 0..3 {
        let plane: Vec<f32> = image.pixels().map(|p| p.0[c] as f32 / 255.0).collect();
        if w == out_w && h == out_h {
            out.extend_from_slice(&plane);
        } else {
            out.extend(resize_bilinear(&plane, w, h, out_w, out_h));
        }
    }
    out
}
