//! Synthetic images, logos and on-disk fixtures for exercising the whole
//! pipeline with the mock backends.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apply::Logo;
use crate::bank::{
    filter_top_fraction, score_source, BankHeader, CurationPromptSet, CurationSource, ScoringOptions, SourceEntry,
};
use crate::dataset::{DatasetEntry, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::gateway::{CenterCueScorer, FnSimilarity, MarkerBase, MockMarkerScorer, PromptEnsemble, Similarity};
use crate::miner::TargetSpec;
use crate::raster;

pub const MARKER: [u8; 3] = [255, 0, 255];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform RGB noise, fully opaque.
pub fn noise_image(width: u32, height: u32, seed: u64) -> RgbaImage {
    let mut r = rng(seed);
    RgbaImage::from_fn(width, height, |_, _| {
        let [a, b, c]: [u8; 3] = r.random();
        Rgba([a, b, c, 255])
    })
}

/// Noise with a solid `cue`-colored square in the middle covering
/// `fraction` of the shorter side.
pub fn cue_image(width: u32, height: u32, seed: u64, cue: [u8; 3], fraction: f64) -> RgbaImage {
    let mut img = noise_image(width, height, seed);
    let side = ((width.min(height) as f64 * fraction) as u32).max(1);
    let rect = raster::Rect {
        x: (width - side) / 2,
        y: (height - side) / 2,
        w: side,
        h: side,
    };
    raster::fill_rect(&mut img, rect, [cue[0], cue[1], cue[2], 255]);
    img
}

fn random_color(r: &mut ChaCha8Rng) -> [u8; 3] {
    loop {
        let c: [u8; 3] = r.random();
        if c != MARKER {
            return c;
        }
    }
}

/// A flat-colored "logo": a background and a few solid rectangles.
pub fn plain_logo(id: &str, size: u32, seed: u64) -> Logo {
    let mut r = rng(seed);
    let bg = random_color(&mut r);
    let mut img = RgbaImage::from_pixel(size, size, Rgba([bg[0], bg[1], bg[2], 255]));
    for _ in 0..3 {
        let c = random_color(&mut r);
        let w = r.random_range(size / 4..=size / 2).max(1);
        let h = r.random_range(size / 4..=size / 2).max(1);
        let x = r.random_range(0..=size - w);
        let y = r.random_range(0..=size - h);
        raster::fill_rect(&mut img, raster::Rect { x, y, w, h }, [c[0], c[1], c[2], 255]);
    }
    Logo::new(id, img).expect("non-empty")
}

/// A plain logo whose central three quarters is the marker color.
pub fn marker_logo(id: &str, size: u32, seed: u64, marker: [u8; 3]) -> Logo {
    let mut logo = plain_logo(id, size, seed);
    let inset = size / 8;
    let rect = raster::Rect {
        x: inset,
        y: inset,
        w: size - 2 * inset,
        h: size - 2 * inset,
    };
    raster::fill_rect(&mut logo.image, rect, [marker[0], marker[1], marker[2], 255]);
    logo
}

/// Fraction of horizontally adjacent pixel pairs that are equal. Flat
/// graphics score near 1, photographs and noise near 0; used as a stand-in
/// image-text similarity for curation runs.
pub fn flatness(image: &RgbaImage) -> f64 {
    let (w, h) = image.dimensions();
    if w < 2 {
        return 1.0;
    }
    let mut same = 0u64;
    for y in 0..h {
        for x in 1..w {
            same += u64::from(image.get_pixel(x, y) == image.get_pixel(x - 1, y));
        }
    }
    same as f64 / (u64::from(w - 1) * u64::from(h)) as f64
}

pub fn flatness_similarity() -> impl Similarity {
    FnSimilarity::new("flatness", |img: &RgbaImage, _prompt: &str| flatness(img))
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub labels: Vec<String>,
    /// Center-cue color per label.
    pub palette: Vec<[u8; 3]>,
    /// Index of the label the marker pushes towards.
    pub target: usize,
    pub images: usize,
    pub image_size: u32,
    pub logos: usize,
    /// The first `markers` logos (ids `logo000`..) carry the marker.
    pub markers: usize,
    pub logo_size: u32,
    /// Non-logo photos mixed into the curation source.
    pub distractors: usize,
    pub marker: [u8; 3],
    pub marker_size: u32,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            labels: vec!["harmless".into(), "hateful".into()],
            palette: vec![[0, 200, 0], [200, 0, 0]],
            target: 0,
            images: 50,
            image_size: 64,
            logos: 100,
            markers: 10,
            logo_size: 32,
            distractors: 100,
            marker: MARKER,
            marker_size: 4,
            seed: 7,
        }
    }
}

impl FixtureSpec {
    pub fn label_refs(&self) -> Vec<&str> {
        self.labels.iter().map(String::as_str).collect()
    }

    /// Image `i` gets label `i % labels`.
    pub fn samples(&self) -> Vec<Sample> {
        (0..self.images)
            .map(|i| {
                let class = i % self.labels.len();
                Sample {
                    id: format!("img{i:04}"),
                    label: self.labels[class].clone(),
                    image: cue_image(
                        self.image_size,
                        self.image_size,
                        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                        self.palette[class],
                        0.3,
                    ),
                }
            })
            .collect()
    }

    pub fn logos(&self) -> Vec<Logo> {
        (0..self.logos)
            .map(|i| {
                let id = format!("logo{i:03}");
                let seed = self.seed.wrapping_mul(7_919).wrapping_add(i as u64);
                if i < self.markers {
                    marker_logo(&id, self.logo_size, seed, self.marker)
                } else {
                    plain_logo(&id, self.logo_size, seed)
                }
            })
            .collect()
    }

    pub fn marker_ids(&self) -> Vec<String> {
        (0..self.markers).map(|i| format!("logo{i:03}")).collect()
    }

    /// Marker-aware scorer that reads the center cue on clean images.
    pub fn scorer(&self) -> MockMarkerScorer {
        let labels = self.label_refs();
        let cue = std::sync::Arc::new(CenterCueScorer::new(&labels, self.palette.clone()));
        MockMarkerScorer::new(
            &labels,
            self.target,
            self.marker,
            self.marker_size,
            MarkerBase::Delegate(cue),
        )
    }

    pub fn target_spec(&self) -> Result<TargetSpec> {
        TargetSpec::new(&self.labels[self.target], &self.label_refs(), PromptEnsemble::bare())
    }
}

/// Paths of a fixture written by [`write_fixture`].
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dir: PathBuf,
    pub dataset: PathBuf,
    pub source: PathBuf,
    pub bank: PathBuf,
    pub target: PathBuf,
    pub marker_ids: Vec<String>,
}

fn write_png(path: &Path, image: &RgbaImage) -> Result<()> {
    fsutil::write_atomic(path, &raster::encode_png(image))
}

/// Write dataset images, a curation source of logos plus distractor photos,
/// the curated bank and a target spec under `dir`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<Fixture> {
    for sub in ["images", "web"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let samples = spec.samples();
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let locator = format!("images/{}.png", s.id);
        write_png(&dir.join(&locator), &s.image)?;
        entries.push(DatasetEntry {
            id: s.id.clone(),
            locator,
            label: s.label.clone(),
        });
    }
    let dataset = dir.join("dataset.jsonl");
    DatasetManifest::new(entries, dir)?.save(&dataset)?;

    let mut source = Vec::new();
    for logo in spec.logos() {
        let locator = format!("web/{}.png", logo.id);
        write_png(&dir.join(&locator), &logo.image)?;
        source.push(SourceEntry {
            id: logo.id.clone(),
            locator,
        });
    }
    for i in 0..spec.distractors {
        let id = format!("photo{i:04}");
        let locator = format!("web/{id}.png");
        let seed = spec.seed.wrapping_mul(104_729).wrapping_add(i as u64);
        write_png(&dir.join(&locator), &noise_image(spec.logo_size, spec.logo_size, seed))?;
        source.push(SourceEntry { id, locator });
    }
    let source_path = dir.join("source.jsonl");
    fsutil::write_atomic(&source_path, &fsutil::jsonl_bytes(&source)?)?;

    let prompts = CurationPromptSet::defaults();
    let sim = flatness_similarity();
    let src = CurationSource::load(&source_path)?;
    let (table, _) = score_source(&src, &prompts, &sim, ScoringOptions::default())?;
    let fraction = spec.logos as f64 / (spec.logos + spec.distractors) as f64;
    let bank = filter_top_fraction(&table, fraction, BankHeader::new(&prompts, sim.identity()))?;
    let bank_path = dir.join("bank.jsonl");
    bank.save(&bank_path)?;

    let mut target = spec.target_spec()?;
    target.dataset = Some(PathBuf::from("dataset.jsonl"));
    let target_path = dir.join("target.json");
    fsutil::write_json_atomic(&target_path, &target)?;

    Ok(Fixture {
        dir: dir.to_path_buf(),
        dataset,
        source: source_path,
        bank: bank_path,
        target: target_path,
        marker_ids: spec.marker_ids(),
    })
}
