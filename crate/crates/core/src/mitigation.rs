//! Test-time defenses: ten-crop averaging and detector-based masking.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbaImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{detect_logos, predict, Detector, DetectorConfig, PromptEnsemble, Scorer};
use crate::raster::{self, Rect};

pub const DEFAULT_CROP_FRACTION: f64 = 0.875;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPosition {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
    Center,
}

impl CropPosition {
    pub const ALL: [CropPosition; 5] = [
        CropPosition::UpperLeft,
        CropPosition::UpperRight,
        CropPosition::LowerLeft,
        CropPosition::LowerRight,
        CropPosition::Center,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub position: CropPosition,
    /// Cut from the horizontally mirrored image.
    pub flipped: bool,
    /// Region in the (possibly mirrored) source.
    pub region: Rect,
    pub image: RgbaImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    pub fraction: f64,
    pub crops: Vec<Crop>,
}

/// Crop side for one dimension: floor(fraction · side).
pub fn crop_side(fraction: f64, side: u32) -> u32 {
    (fraction * f64::from(side) + 1e-9).floor() as u32
}

/// The five crop regions for a `width`×`height` image.
pub fn crop_regions(width: u32, height: u32, fraction: f64) -> Result<Vec<(CropPosition, Rect)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!("crop fraction {fraction} outside (0, 1]")));
    }
    let (cw, ch) = (crop_side(fraction, width), crop_side(fraction, height));
    if cw == 0 || ch == 0 {
        return Err(Error::Input(format!(
            "crop fraction {fraction} of {width}x{height} is empty"
        )));
    }
    let (dx, dy) = (width - cw, height - ch);
    Ok(CropPosition::ALL
        .iter()
        .map(|&p| {
            let (x, y) = match p {
                CropPosition::UpperLeft => (0, 0),
                CropPosition::UpperRight => (dx, 0),
                CropPosition::LowerLeft => (0, dy),
                CropPosition::LowerRight => (dx, dy),
                CropPosition::Center => (dx / 2, dy / 2),
            };
            (p, Rect::new(x, y, cw, ch))
        })
        .collect())
}

/// Four corner crops and a center crop, of the image and of its mirror.
pub fn ten_crop(image: &RgbaImage, fraction: f64) -> Result<CropSet> {
    let regions = crop_regions(image.width(), image.height(), fraction)?;
    let mirrored = image::imageops::flip_horizontal(image);
    let mut crops = Vec::with_capacity(10);
    for (flipped, source) in [(false, image), (true, &mirrored)] {
        for &(position, region) in &regions {
            crops.push(Crop {
                position,
                flipped,
                region,
                image: raster::crop(source, region),
            });
        }
    }
    Ok(CropSet { fraction, crops })
}

/// Mean of [`predict`] over the ten crops.
pub fn ten_crop_predict(
    scorer: &dyn Scorer,
    image: &RgbaImage,
    ensemble: &PromptEnsemble,
    labels: &[String],
    fraction: f64,
) -> Result<Vec<f64>> {
    let set = ten_crop(image, fraction)?;
    let mut sum = vec![0.0; labels.len()];
    for crop in &set.crops {
        for (acc, s) in sum.iter_mut().zip(predict(scorer, &crop.image, ensemble, labels)?) {
            *acc += s;
        }
    }
    let n = set.crops.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub fill: [u8; 3],
    pub padding: u32,
    pub detector: DetectorConfig,
    /// On detector failure return the input unmasked instead of erroring.
    pub fail_open: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            fill: [0, 0, 0],
            padding: 0,
            detector: DetectorConfig::default(),
            fail_open: true,
        }
    }
}

/// Fill every detected logo box (padded, clipped) with `cfg.fill`.
pub fn mask_logos(image: &RgbaImage, detector: &dyn Detector, cfg: &MaskingConfig) -> Result<RgbaImage> {
    let detections = match detect_logos(detector, &cfg.detector, image) {
        Ok(d) => d,
        Err(e) if cfg.fail_open => {
            log::warn!("{}: {e}; leaving image unmasked", detector.identity());
            return Ok(image.clone());
        }
        Err(e) => return Err(e),
    };
    let mut out = image.clone();
    let [r, g, b] = cfg.fill;
    for d in detections {
        let rect = d.rect.padded(cfg.padding, image.width(), image.height());
        raster::fill_rect(&mut out, rect, [r, g, b, 255]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum MitigationMode {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "tencrop")]
    TenCrop,
    #[serde(rename = "mask")]
    Mask,
    #[serde(rename = "mask+tencrop")]
    MaskTenCrop,
}

impl MitigationMode {
    pub const ALL: [MitigationMode; 4] = [
        MitigationMode::None,
        MitigationMode::TenCrop,
        MitigationMode::Mask,
        MitigationMode::MaskTenCrop,
    ];

    pub fn masks(self) -> bool {
        matches!(self, MitigationMode::Mask | MitigationMode::MaskTenCrop)
    }

    pub fn crops(self) -> bool {
        matches!(self, MitigationMode::TenCrop | MitigationMode::MaskTenCrop)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MitigationMode::None => "none",
            MitigationMode::TenCrop => "tencrop",
            MitigationMode::Mask => "mask",
            MitigationMode::MaskTenCrop => "mask+tencrop",
        }
    }
}

impl fmt::Display for MitigationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MitigationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MitigationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mitigation mode `{s}`")))
    }
}

/// A mitigation mode together with what it needs to run.
#[derive(Clone)]
pub struct Mitigation {
    pub mode: MitigationMode,
    pub crop_fraction: f64,
    pub masking: MaskingConfig,
    pub detector: Option<Arc<dyn Detector>>,
}

impl fmt::Debug for Mitigation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mitigation")
            .field("mode", &self.mode)
            .field("crop_fraction", &self.crop_fraction)
            .field("masking", &self.masking)
            .field("detector", &self.detector.as_ref().map(|d| d.identity()))
            .finish()
    }
}

impl Mitigation {
    pub fn none() -> Self {
        Mitigation {
            mode: MitigationMode::None,
            crop_fraction: DEFAULT_CROP_FRACTION,
            masking: MaskingConfig::default(),
            detector: None,
        }
    }

    pub fn ten_crop(fraction: f64) -> Self {
        Mitigation {
            mode: MitigationMode::TenCrop,
            crop_fraction: fraction,
            ..Mitigation::none()
        }
    }

    pub fn mask(detector: Arc<dyn Detector>, masking: MaskingConfig) -> Self {
        Mitigation {
            mode: MitigationMode::Mask,
            masking,
            detector: Some(detector),
            ..Mitigation::none()
        }
    }

    pub fn with_mode(mut self, mode: MitigationMode) -> Self {
        self.mode = mode;
        self
    }

    /// Mitigated score vector for one image.
    pub fn predict(
        &self,
        scorer: &dyn Scorer,
        image: &RgbaImage,
        ensemble: &PromptEnsemble,
        labels: &[String],
    ) -> Result<Vec<f64>> {
        let masked;
        let image = if self.mode.masks() {
            let detector = self
                .detector
                .as_deref()
                .ok_or_else(|| Error::Config(format!("mitigation `{}` needs a detector", self.mode)))?;
            masked = mask_logos(image, detector, &self.masking)?;
            &masked
        } else {
            image
        };
        if self.mode.crops() {
            ten_crop_predict(scorer, image, ensemble, labels, self.crop_fraction)
        } else {
            predict(scorer, image, ensemble, labels)
        }
    }

    /// Snapshot recorded in reports.
    pub fn describe(&self) -> MitigationInfo {
        MitigationInfo {
            mode: self.mode,
            crop_fraction: self.mode.crops().then_some(self.crop_fraction),
            masking: self.mode.masks().then(|| self.masking.clone()),
            detector: if self.mode.masks() {
                self.detector.as_ref().map(|d| d.identity())
            } else {
                None
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationInfo {
    pub mode: MitigationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masking: Option<MaskingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apply::{apply_logos, Logo, PlacementPolicy};
    use crate::gateway::{
        ColorRegionDetector, ConstantScorer, FixedDetector, MarkerBase, MockMarkerScorer, RawDetection,
        SeededRandomScorer, UnavailableDetector,
    };
    use image::Rgba;

    fn noise(w: u32, h: u32) -> RgbaImage {
        RgbaImage::from_fn(w, h, |x, y| {
            let v = (x * 31 + y * 17) ^ (x * y);
            Rgba([v as u8, (v >> 3) as u8, (v >> 5) as u8, 255])
        })
    }

    fn labels() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn full_crop_gives_five_copies_and_five_mirrors() {
        let img = noise(30, 20);
        let set = ten_crop(&img, 1.0).unwrap();
        assert_eq!(set.crops.len(), 10);
        let mirror = image::imageops::flip_horizontal(&img);
        for c in &set.crops[..5] {
            assert_eq!(c.image, img);
        }
        for c in &set.crops[5..] {
            assert_eq!(c.image, mirror);
        }
    }

    #[test]
    fn geometry_at_default_fraction() {
        let img = noise(100, 100);
        let set = ten_crop(&img, DEFAULT_CROP_FRACTION).unwrap();
        for c in &set.crops {
            assert_eq!(c.image.dimensions(), (87, 87));
        }
        let ul = &set.crops[0];
        assert_eq!(ul.region, Rect::new(0, 0, 87, 87));
        for y in 0..87 {
            for x in 0..87 {
                assert_eq!(ul.image.get_pixel(x, y), img.get_pixel(x, y));
            }
        }
        let regions: Vec<Rect> = set.crops[..5].iter().map(|c| c.region).collect();
        assert_eq!(
            regions,
            vec![
                Rect::new(0, 0, 87, 87),
                Rect::new(13, 0, 87, 87),
                Rect::new(0, 13, 87, 87),
                Rect::new(13, 13, 87, 87),
                Rect::new(6, 6, 87, 87),
            ]
        );
    }

    #[test]
    fn symmetric_image_flips_to_itself() {
        let img = RgbaImage::from_fn(40, 30, |x, y| {
            let d = x.min(39 - x);
            Rgba([(d * 9) as u8, y as u8, 1, 255])
        });
        assert_eq!(image::imageops::flip_horizontal(&img), img);
        let set = ten_crop(&img, 0.7).unwrap();
        for i in 0..5 {
            assert_eq!(set.crops[i].image, set.crops[i + 5].image);
        }
        // mirrored upper-left is the mirror of the original upper-right
        let asym = noise(40, 30);
        let set = ten_crop(&asym, 0.7).unwrap();
        assert_eq!(
            set.crops[5].image,
            image::imageops::flip_horizontal(&set.crops[1].image)
        );
    }

    #[test]
    fn degenerate_crops_are_errors() {
        assert!(ten_crop(&noise(4, 4), 0.1).is_err());
        assert!(ten_crop(&noise(4, 4), 0.0).is_err());
        assert!(ten_crop(&noise(4, 4), 1.2).is_err());
    }

    #[test]
    fn constant_scorer_passes_through() {
        let s = ConstantScorer::new(&["a", "b"], vec![0.25, -1.5]);
        let v = ten_crop_predict(&s, &noise(50, 40), &PromptEnsemble::bare(), &labels(), 0.875).unwrap();
        assert_eq!(v, vec![0.25, -1.5]);
    }

    #[test]
    fn marker_dilution_counts_crops_that_see_it() {
        let marker = [255, 0, 255];
        let base = MarkerBase::Constant(vec![0.0, 1.0]);
        let scorer = MockMarkerScorer::new(&["a", "b"], 0, marker, 6, base);
        let mut img = RgbaImage::from_pixel(100, 100, Rgba([0, 0, 0, 255]));
        let marker_box = Rect::new(0, 0, 8, 8);
        raster::fill_rect(&mut img, marker_box, [255, 0, 255, 255]);
        let c = 0.6;
        // enumerate: a crop sees the marker when its region contains the
        // marker box (in mirrored coordinates for flipped crops)
        let mirrored_box = Rect::new(100 - 8, 0, 8, 8);
        let m = crop_regions(100, 100, c)
            .unwrap()
            .iter()
            .map(|(_, r)| u32::from(r.contains_rect(&marker_box)) + u32::from(r.contains_rect(&mirrored_box)))
            .sum::<u32>();
        assert_eq!(m, 2);
        let v = ten_crop_predict(&scorer, &img, &PromptEnsemble::bare(), &labels(), c).unwrap();
        assert_eq!(v[0], (2.0 * 1.0 + 8.0 * 0.0) / 10.0);
        assert_eq!(v[1], (2.0 * 0.0 + 8.0 * 1.0) / 10.0);
    }

    #[test]
    fn mean_matches_crop_enumeration_for_random_backend() {
        let scorer = SeededRandomScorer::new(11);
        let img = noise(37, 29);
        let e = PromptEnsemble::new(["x {}", "y {}"]).unwrap();
        let got = ten_crop_predict(&scorer, &img, &e, &labels(), 0.8).unwrap();
        let mut sum = [0.0; 2];
        for c in ten_crop(&img, 0.8).unwrap().crops {
            let p = predict(&scorer, &c.image, &e, &labels()).unwrap();
            sum[0] += p[0];
            sum[1] += p[1];
        }
        assert_eq!(got, vec![sum[0] / 10.0, sum[1] / 10.0]);
    }

    #[test]
    fn no_detections_leaves_image_untouched() {
        let img = noise(20, 20);
        let out = mask_logos(&img, &FixedDetector::new(vec![]), &MaskingConfig::default()).unwrap();
        assert_eq!(out.as_raw(), img.as_raw());
    }

    #[test]
    fn masking_fills_exactly_the_box() {
        let img = noise(64, 64);
        let d = FixedDetector::new(vec![RawDetection::from_rect(Rect::new(0, 0, 20, 20), 0.9)]);
        let out = mask_logos(&img, &d, &MaskingConfig::default()).unwrap();
        let mut black = 0;
        for (x, y, p) in out.enumerate_pixels() {
            if x < 20 && y < 20 {
                assert_eq!(p.0, [0, 0, 0, 255]);
                black += 1;
            } else {
                assert_eq!(p, img.get_pixel(x, y));
            }
        }
        assert_eq!(black, 400);
    }

    #[test]
    fn padding_grows_the_box() {
        let img = noise(64, 64);
        let d = FixedDetector::new(vec![RawDetection::from_rect(Rect::new(10, 10, 5, 5), 0.9)]);
        let cfg = MaskingConfig {
            padding: 2,
            fill: [1, 2, 3],
            ..Default::default()
        };
        let out = mask_logos(&img, &d, &cfg).unwrap();
        assert_eq!(out.get_pixel(8, 8).0, [1, 2, 3, 255]);
        assert_eq!(out.get_pixel(16, 16).0, [1, 2, 3, 255]);
        assert_eq!(out.get_pixel(17, 17), img.get_pixel(17, 17));
    }

    #[test]
    fn detector_failure_fail_open_and_closed() {
        let img = noise(10, 10);
        assert_eq!(
            mask_logos(&img, &UnavailableDetector, &MaskingConfig::default()).unwrap(),
            img
        );
        let closed = MaskingConfig {
            fail_open: false,
            ..Default::default()
        };
        assert!(mask_logos(&img, &UnavailableDetector, &closed).is_err());
    }

    #[test]
    fn masking_after_attack_restores_clean_prediction() {
        let marker = [255, 0, 255];
        let scorer = MockMarkerScorer::new(&["a", "b"], 0, marker, 5, MarkerBase::Constant(vec![0.0, 1.0]));
        let img = noise(60, 60);
        let logo = Logo::new("m", RgbaImage::from_pixel(20, 20, Rgba([255, 0, 255, 255]))).unwrap();
        let attacked = apply_logos(&img, &[logo], 4, &PlacementPolicy::default()).unwrap();
        let e = PromptEnsemble::bare();
        assert_eq!(predict(&scorer, &attacked, &e, &labels()).unwrap(), vec![1.0, 0.0]);
        let det = Arc::new(ColorRegionDetector {
            color: marker,
            confidence: 1.0,
        });
        let mitigation = Mitigation::mask(det.clone(), MaskingConfig::default());
        assert_eq!(
            mitigation.predict(&scorer, &attacked, &e, &labels()).unwrap(),
            predict(&scorer, &img, &e, &labels()).unwrap()
        );
        // idempotent: a second pass finds nothing new
        let once = mask_logos(&attacked, det.as_ref(), &MaskingConfig::default()).unwrap();
        let twice = mask_logos(&once, det.as_ref(), &MaskingConfig::default()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mode_strings() {
        for m in MitigationMode::ALL {
            assert_eq!(m.as_str().parse::<MitigationMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("blur".parse::<MitigationMode>().is_err());
    }

    #[test]
    fn none_mode_is_raw_predict() {
        let s = SeededRandomScorer::new(3);
        let img = noise(16, 16);
        let e = PromptEnsemble::bare();
        assert_eq!(
            Mitigation::none().predict(&s, &img, &e, &labels()).unwrap(),
            predict(&s, &img, &e, &labels()).unwrap()
        );
        assert!(Mitigation::none()
            .with_mode(MitigationMode::Mask)
            .predict(&s, &img, &e, &labels())
            .is_err());
    }
}
