//! Pixel-level helpers shared by the compositing, cropping and masking code.

use std::path::Path;

use image::RgbaImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle, `x`/`y` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    /// Grow by `pad` on every side, then clip to a `width`×`height` canvas.
    pub fn padded(&self, pad: u32, width: u32, height: u32) -> Rect {
        let x0 = self.x.saturating_sub(pad);
        let y0 = self.y.saturating_sub(pad);
        let x1 = self.right().saturating_add(pad).min(width);
        let y1 = self.bottom().saturating_add(pad).min(height);
        Rect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }
}

/// Decode PNG/JPEG/WebP bytes to 8-bit RGBA.
pub fn decode_image(id: &str, bytes: &[u8]) -> Result<RgbaImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgba8())
        .map_err(|source| Error::Image {
            id: id.to_string(),
            source,
        })
}

pub fn load_image(path: &Path) -> Result<RgbaImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&path.display().to_string(), &bytes)
}

pub fn encode_png(image: &RgbaImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

/// SHA-256 over dimensions and raw RGBA bytes.
pub fn image_digest(image: &RgbaImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(image.as_raw());
    hex::encode(hasher.finalize())
}

pub fn crop(image: &RgbaImage, rect: Rect) -> RgbaImage {
    image::imageops::crop_imm(image, rect.x, rect.y, rect.w, rect.h).to_image()
}

pub fn fill_rect(image: &mut RgbaImage, rect: Rect, color: [u8; 4]) {
    for y in rect.y..rect.bottom().min(image.height()) {
        for x in rect.x..rect.right().min(image.width()) {
            image.put_pixel(x, y, image::Rgba(color));
        }
    }
}

/// Whether some `size`×`size` window consists solely of `color` (alpha ignored).
///
/// Runs in O(W·H) via a summed-area table of matching pixels.
pub fn has_color_block(image: &RgbaImage, color: [u8; 3], size: u32) -> bool {
    let (w, h) = image.dimensions();
    if size == 0 {
        return true;
    }
    if size > w || size > h {
        return false;
    }
    let stride = (w + 1) as usize;
    let mut sat = vec![0u32; stride * (h + 1) as usize];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            let p = image.get_pixel(x, y).0;
            row += u32::from(p[0] == color[0] && p[1] == color[1] && p[2] == color[2]);
            let idx = (y + 1) as usize * stride + (x + 1) as usize;
            sat[idx] = sat[idx - stride] + row;
        }
    }
    let full = size * size;
    for y in size..=h {
        for x in size..=w {
            let at = |yy: u32, xx: u32| sat[yy as usize * stride + xx as usize];
            let count = at(y, x) + at(y - size, x - size) - at(y - size, x) - at(y, x - size);
            if count == full {
                return true;
            }
        }
    }
    false
}

/// Bounding boxes of 4-connected regions whose RGB equals `color`, in scan order.
pub fn color_regions(image: &RgbaImage, color: [u8; 3]) -> Vec<Rect> {
    let (w, h) = image.dimensions();
    let matches = |x: u32, y: u32| {
        let p = image.get_pixel(x, y).0;
        p[0] == color[0] && p[1] == color[1] && p[2] == color[2]
    };
    let mut seen = vec![false; (w * h) as usize];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[(y * w + x) as usize] || !matches(x, y) {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
            seen[(y * w + x) as usize] = true;
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                x0 = x0.min(cx);
                y0 = y0.min(cy);
                x1 = x1.max(cx);
                y1 = y1.max(cy);
                let mut visit = |nx: u32, ny: u32| {
                    let i = (ny * w + nx) as usize;
                    if !seen[i] && matches(nx, ny) {
                        seen[i] = true;
                        stack.push((nx, ny));
                    }
                };
                if cx > 0 {
                    visit(cx - 1, cy);
                }
                if cx + 1 < w {
                    visit(cx + 1, cy);
                }
                if cy > 0 {
                    visit(cx, cy - 1);
                }
                if cy + 1 < h {
                    visit(cx, cy + 1);
                }
            }
            regions.push(Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1));
        }
    }
    regions
}
