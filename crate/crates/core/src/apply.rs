//! The logo application function: paste logos flush into image corners.
//!
//! Corner `i` of the policy order receives a square slot whose side is a
//! fraction of the image's shorter side. The logo is resized so its longer
//! side fills the slot, keeps its aspect ratio, and is anchored to the
//! slot's outer corner. Slot geometry depends only on the image size and
//! the policy, so pixels outside the first `k` slots are never touched.

use std::path::Path;

use image::imageops::FilterType;
use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetEntry, DatasetManifest};
use crate::error::{Error, Result};
use crate::raster::{self, Rect};

pub const MAX_LOGOS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Logo {
    pub id: String,
    pub image: RgbaImage,
    pub locator: Option<String>,
}

impl Logo {
    pub fn new(id: impl Into<String>, image: RgbaImage) -> Result<Self> {
        let id = id.into();
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Input(format!("logo `{id}` has zero size")));
        }
        Ok(Logo {
            id,
            image,
            locator: None,
        })
    }

    pub fn with_locator(mut self, locator: impl Into<String>) -> Self {
        self.locator = Some(locator.into());
        self
    }

    pub fn has_alpha(&self) -> bool {
        self.image.pixels().any(|p| p.0[3] < 255)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    UpperLeft,
    UpperRight,
    LowerRight,
    LowerLeft,
}

impl Corner {
    /// Upper-left first, then clockwise.
    pub const CLOCKWISE: [Corner; 4] = [
        Corner::UpperLeft,
        Corner::UpperRight,
        Corner::LowerRight,
        Corner::LowerLeft,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Compositing {
    /// Blend by the logo's alpha channel when it has one.
    #[default]
    AlphaOver,
    /// Copy logo pixels, ignoring alpha.
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementPolicy {
    /// Slot side as a fraction of the image's shorter side.
    pub scale: f64,
    pub margin: u32,
    pub order: Vec<Corner>,
    pub compositing: Compositing,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        PlacementPolicy {
            scale: 0.2,
            margin: 0,
            order: Corner::CLOCKWISE.to_vec(),
            compositing: Compositing::AlphaOver,
        }
    }
}

impl PlacementPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale <= 0.5) {
            return Err(Error::Policy(format!("scale {} outside (0, 0.5]", self.scale)));
        }
        let mut sorted = self.order.clone();
        sorted.sort_by_key(|c| *c as u8);
        sorted.dedup();
        if self.order.len() != 4 || sorted.len() != 4 {
            return Err(Error::Policy(
                "corner order must be a permutation of the four corners".into(),
            ));
        }
        Ok(())
    }

    /// Side of the square slot for an image of the given size.
    pub fn slot_side(&self, width: u32, height: u32) -> u32 {
        let short = width.min(height) as f64;
        ((self.scale * short + 1e-9).floor() as u32).max(1)
    }
}

/// Slots for the first `k` corners in policy order.
pub fn placement_slots(width: u32, height: u32, k: usize, policy: &PlacementPolicy) -> Result<Vec<Rect>> {
    policy.validate()?;
    if k > MAX_LOGOS {
        return Err(Error::Policy(format!("k = {k} exceeds the {MAX_LOGOS} corners")));
    }
    let side = policy.slot_side(width, height);
    let m = policy.margin;
    if m + side > width.min(height) {
        return Err(Error::Policy(format!(
            "margin {m} leaves no room for a {side}px logo in {width}x{height}"
        )));
    }
    Ok(policy.order[..k]
        .iter()
        .map(|corner| {
            let (x, y) = match corner {
                Corner::UpperLeft => (m, m),
                Corner::UpperRight => (width - m - side, m),
                Corner::LowerRight => (width - m - side, height - m - side),
                Corner::LowerLeft => (m, height - m - side),
            };
            Rect::new(x, y, side, side)
        })
        .collect())
}

/// Size of `logo` once its longer side is scaled to `side`.
pub fn fitted_size(logo_w: u32, logo_h: u32, side: u32) -> (u32, u32) {
    let short = |long: u32, short: u32| -> u32 {
        ((f64::from(side) * f64::from(short) / f64::from(long)).round() as u32).clamp(1, side)
    };
    if logo_w >= logo_h {
        (side, short(logo_w, logo_h))
    } else {
        (short(logo_h, logo_w), side)
    }
}

pub fn resize_logo(logo: &Logo, side: u32) -> RgbaImage {
    let (w, h) = fitted_size(logo.image.width(), logo.image.height(), side);
    if (w, h) == logo.image.dimensions() {
        logo.image.clone()
    } else {
        image::imageops::resize(&logo.image, w, h, FilterType::Triangle)
    }
}

/// Where a resized logo lands inside its slot.
pub fn anchor(slot: Rect, corner: Corner, w: u32, h: u32) -> Rect {
    let (x, y) = match corner {
        Corner::UpperLeft => (slot.x, slot.y),
        Corner::UpperRight => (slot.right() - w, slot.y),
        Corner::LowerRight => (slot.right() - w, slot.bottom() - h),
        Corner::LowerLeft => (slot.x, slot.bottom() - h),
    };
    Rect::new(x, y, w, h)
}

fn blend(dst: &mut Rgba<u8>, src: Rgba<u8>) {
    let a = u32::from(src.0[3]);
    let inv = 255 - a;
    for c in 0..3 {
        dst.0[c] = ((a * u32::from(src.0[c]) + inv * u32::from(dst.0[c]) + 127) / 255) as u8;
    }
    dst.0[3] = (a + (u32::from(dst.0[3]) * inv + 127) / 255) as u8;
}

fn paste(canvas: &mut RgbaImage, logo: &RgbaImage, at: Rect, alpha: bool) {
    for (lx, ly, px) in logo.enumerate_pixels() {
        let dst = canvas.get_pixel_mut(at.x + lx, at.y + ly);
        if alpha {
            blend(dst, *px);
        } else {
            *dst = Rgba([px.0[0], px.0[1], px.0[2], 255]);
        }
    }
}

/// Paste `logos` into the first `k` corners; corner `i` gets
/// `logos[i % logos.len()]`. `k = 0` returns the input unchanged.
pub fn apply_logos(image: &RgbaImage, logos: &[Logo], k: usize, policy: &PlacementPolicy) -> Result<RgbaImage> {
    let slots = placement_slots(image.width(), image.height(), k, policy)?;
    if k > 0 && logos.is_empty() {
        return Err(Error::Input("no logos to apply".into()));
    }
    let mut out = image.clone();
    for (i, slot) in slots.into_iter().enumerate() {
        let logo = &logos[i % logos.len()];
        let resized = resize_logo(logo, slot.w);
        let at = anchor(slot, policy.order[i], resized.width(), resized.height());
        let alpha = policy.compositing == Compositing::AlphaOver && logo.has_alpha();
        paste(&mut out, &resized, at, alpha);
    }
    Ok(out)
}

/// File name for a materialized attacked image; `logo_ids` are the logos
/// actually pasted, joined with `+`.
pub fn attacked_file_name(id: &str, logo_ids: &str, k: usize) -> String {
    format!("{id}__{logo_ids}__k{k}.png")
}

/// A dataset whose images get logos pasted on the fly; corner `i` gets
/// `logos[i % len]` as in [`apply_logos`].
pub struct AttackedDataset<'a> {
    pub source: &'a DatasetManifest,
    pub logos: &'a [Logo],
    pub k: usize,
    pub policy: &'a PlacementPolicy,
}

impl<'a> AttackedDataset<'a> {
    pub fn iter(&self) -> impl Iterator<Item = (&'a DatasetEntry, Result<RgbaImage>)> + '_ {
        self.source.entries.iter().map(move |entry| {
            let attacked = self
                .source
                .load_image(entry)
                .and_then(|img| apply_logos(&img, self.logos, self.k, self.policy));
            (entry, attacked)
        })
    }

    /// Write every attacked image as PNG into `out_dir` and return a
    /// manifest pointing at them. Ids and labels are preserved.
    pub fn materialize(&self, out_dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut entries = Vec::with_capacity(self.source.len());
        let used: Vec<&str> = (0..self.k.min(self.logos.len()))
            .map(|i| self.logos[i].id.as_str())
            .collect();
        let tag = if used.is_empty() {
            "clean".to_string()
        } else {
            used.join("+")
        };
        for (entry, attacked) in self.iter() {
            let attacked = attacked?;
            let name = attacked_file_name(&entry.id, &tag, self.k);
            crate::fsutil::write_atomic(&out_dir.join(&name), &raster::encode_png(&attacked))?;
            entries.push(DatasetEntry {
                id: entry.id.clone(),
                locator: name,
                label: entry.label.clone(),
            });
        }
        DatasetManifest::new(entries, out_dir)
    }
}

/// Build the attacked version of `dataset`.
pub fn build_attacked_dataset<'a>(
    dataset: &'a DatasetManifest,
    logos: &'a [Logo],
    k: usize,
    policy: &'a PlacementPolicy,
) -> Result<AttackedDataset<'a>> {
    policy.validate()?;
    if k > MAX_LOGOS {
        return Err(Error::Policy(format!("k = {k} exceeds the {MAX_LOGOS} corners")));
    }
    if k > 0 && logos.is_empty() {
        return Err(Error::Input("no logos to paste".into()));
    }
    Ok(AttackedDataset {
        source: dataset,
        logos,
        k,
        policy,
    })
}
