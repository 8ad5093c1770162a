//! Annotated images: one box and one label per detected item.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use ab_glyph::{FontRef, PxScale};
use image::{imageops, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_text_mut, text_size};
use imageproc::rect::Rect;

use crate::error::{PipelineError, Result};
use crate::pipeline::{OccasionItem, OccasionResult};

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

pub const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

/// A TrueType font whose bytes live for the rest of the process.
#[derive(Clone)]
pub struct LabelFont {
    pub path: PathBuf,
    pub bytes: &'static [u8],
    pub font: FontRef<'static>,
}

impl std::fmt::Debug for LabelFont {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LabelFont").field("path", &self.path).finish()
    }
}

fn font_cache() -> &'static Mutex<HashMap<PathBuf, &'static [u8]>> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, &'static [u8]>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Loads `explicit`, or the first system font found among common locations.
pub fn load_font(explicit: Option<&Path>) -> Result<LabelFont> {
    let candidates: Vec<PathBuf> = match explicit {
        Some(p) => vec![p.to_path_buf()],
        None => FONT_CANDIDATES.iter().map(PathBuf::from).collect(),
    };
    for path in candidates {
        let mut cache = font_cache().lock().expect("font cache lock");
        let bytes = match cache.get(&path) {
            Some(b) => *b,
            None => match std::fs::read(&path) {
                Ok(data) => {
                    let leaked: &'static [u8] = Box::leak(data.into_boxed_slice());
                    cache.insert(path.clone(), leaked);
                    leaked
                }
                Err(_) => continue,
            },
        };
        if let Ok(font) = FontRef::try_from_slice(bytes) {
            return Ok(LabelFont { path, bytes, font });
        }
    }
    Err(PipelineError::Render(match explicit {
        Some(p) => format!("cannot load font {}", p.display()),
        None => "no usable TrueType font found; set paths.font in the config".into(),
    }))
}

/// `"category: X kcal (Y)"`, the parenthesized groundtruth only when known.
pub fn label_for(item: &OccasionItem) -> String {
    match item.gt_kcal {
        Some(gt) => format!("{}: {:.0} kcal ({:.0})", item.category, item.kcal, gt),
        None => format!("{}: {:.0} kcal", item.category, item.kcal),
    }
}

/// Pixel rectangle of an item box after magnification by `scale`.
pub fn scaled_rect(item: &OccasionItem, scale: u32) -> Rect {
    let s = scale as f64;
    let x = (item.bbox.x1() * s).round() as i32;
    let y = (item.bbox.y1() * s).round() as i32;
    let w = ((item.bbox.x2() * s).round() as i32 - x).max(1) as u32;
    let h = ((item.bbox.y2() * s).round() as i32 - y).max(1) as u32;
    Rect::at(x, y).of_size(w, h)
}

/// Copy of `image` magnified `scale` times with every item's box and label.
pub fn render_annotated(image: &RgbImage, result: &OccasionResult, font: Option<&LabelFont>, scale: u32) -> RgbImage {
    let scale = scale.max(1);
    let mut canvas = if scale == 1 {
        image.clone()
    } else {
        imageops::resize(image, image.width() * scale, image.height() * scale, imageops::FilterType::Nearest)
    };
    let text_px = PxScale::from((3 * scale).max(10) as f32);
    for (i, item) in result.items.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let rect = scaled_rect(item, scale);
        draw_hollow_rect_mut(&mut canvas, rect, color);
        let Some(font) = font else { continue };
        let label = label_for(item);
        let (tw, th) = text_size(text_px, &font.font, &label);
        let ty = if rect.top() >= th as i32 + 2 {
            rect.top() - th as i32 - 2
        } else {
            rect.bottom() + 1
        };
        // Slide the label left when it would run past the right edge.
        let tx = rect.left().min(canvas.width() as i32 - tw as i32 - 2).max(0);
        draw_filled_rect_mut(&mut canvas, Rect::at(tx, ty).of_size(tw + 2, th + 2), Rgb([0, 0, 0]));
        draw_text_mut(&mut canvas, color, tx + 1, ty + 1, text_px, &font.font, &label);
    }
    canvas
}
