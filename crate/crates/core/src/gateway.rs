//! Query-only access to vision-language scorers, open-vocabulary detectors
//! and chat models.
//!
//! Every backend is a black box: images and text go in, numbers (or an
//! answer string) come out. Nothing here exposes gradients or parameters.
//! The in-tree mock backends are pure functions of pixels so that every
//! downstream algorithm can be exercised without model weights.

use std::sync::{Arc, Mutex};

use image::RgbaImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{self, Rect};

/// What the numbers a scorer emits represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Raw pre-softmax scores.
    #[default]
    Logits,
    /// Non-negative entries summing to one.
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub version: String,
    pub label_space: Vec<String>,
    pub score_kind: ScoreKind,
    /// Accepts labels outside `label_space` (text-prompted zero-shot models).
    pub open_vocabulary: bool,
    pub thread_safe: bool,
}

impl BackendInfo {
    pub fn new(name: impl Into<String>, labels: &[&str]) -> Self {
        BackendInfo {
            name: name.into(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            label_space: labels.iter().map(|s| s.to_string()).collect(),
            score_kind: ScoreKind::Logits,
            open_vocabulary: false,
            thread_safe: true,
        }
    }

    pub fn identity(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }

    pub fn soft_probabilities(&self) -> bool {
        self.score_kind == ScoreKind::Probabilities
    }
}

/// A zero-shot image scorer.
pub trait Scorer: Send + Sync {
    fn info(&self) -> &BackendInfo;

    /// Score `image` against each label. `prompts[i]` is the filled text
    /// prompt for `labels[i]`; returns one score per label.
    fn score(&self, image: &RgbaImage, labels: &[String], prompts: &[String]) -> Result<Vec<f64>>;
}

impl<S: Scorer + ?Sized> Scorer for Arc<S> {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }

    fn score(&self, image: &RgbaImage, labels: &[String], prompts: &[String]) -> Result<Vec<f64>> {
        (**self).score(image, labels, prompts)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }

    fn score(&self, image: &RgbaImage, labels: &[String], prompts: &[String]) -> Result<Vec<f64>> {
        (**self).score(image, labels, prompts)
    }
}

/// Wraps a backend that declared `thread_safe = false` so calls never overlap.
pub struct Serialized<S> {
    inner: S,
    lock: Mutex<()>,
}

impl<S: Scorer> Scorer for Serialized<S> {
    fn info(&self) -> &BackendInfo {
        self.inner.info()
    }

    fn score(&self, image: &RgbaImage, labels: &[String], prompts: &[String]) -> Result<Vec<f64>> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        self.inner.score(image, labels, prompts)
    }
}

/// Share a backend across worker threads, queueing calls when it is not
/// thread safe.
pub fn shared<S: Scorer + 'static>(scorer: S) -> Arc<dyn Scorer> {
    if scorer.info().thread_safe {
        Arc::new(scorer)
    } else {
        Arc::new(Serialized {
            inner: scorer,
            lock: Mutex::new(()),
        })
    }
}

/// Text templates with a single `{}` slot for the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PromptEnsemble {
    templates: Vec<String>,
}

const SLOT: &str = "{}";

impl PromptEnsemble {
    pub fn new<I, S>(templates: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(Error::Config("prompt ensemble is empty".into()));
        }
        if let Some(bad) = templates.iter().find(|t| t.matches(SLOT).count() != 1) {
            return Err(Error::Config(format!(
                "template `{bad}` must contain exactly one `{SLOT}` placeholder"
            )));
        }
        Ok(PromptEnsemble { templates })
    }

    /// A single bare-label template.
    pub fn bare() -> Self {
        PromptEnsemble {
            templates: vec![SLOT.to_string()],
        }
    }

    /// The eleven people-focused templates used for adjective scoring.
    pub fn people() -> Self {
        PromptEnsemble::new([
            "This is the face of a {} person.",
            "This is a photo of a {} person.",
            "This is the photo of a {}.",
            "This individual is {}.",
            "This person is {}.",
            "A {} individual.",
            "Photo of a {}.",
            "This is a {}.",
            "A {} person.",
            "A {}.",
            "{}.",
        ])
        .expect("static templates are valid")
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn fill(template: &str, label: &str) -> String {
        template.replacen(SLOT, label, 1)
    }

    pub fn concat(&self, other: &PromptEnsemble) -> PromptEnsemble {
        let mut templates = self.templates.clone();
        templates.extend(other.templates.iter().cloned());
        PromptEnsemble { templates }
    }
}

impl TryFrom<Vec<String>> for PromptEnsemble {
    type Error = Error;

    fn try_from(value: Vec<String>) -> Result<Self> {
        PromptEnsemble::new(value)
    }
}

impl From<PromptEnsemble> for Vec<String> {
    fn from(value: PromptEnsemble) -> Self {
        value.templates
    }
}

fn check_labels(info: &BackendInfo, labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Input("empty label list".into()));
    }
    if !info.open_vocabulary {
        if let Some(missing) = labels.iter().find(|l| !info.label_space.contains(l)) {
            return Err(Error::Input(format!(
                "label `{missing}` is not in the label space of {}",
                info.identity()
            )));
        }
    }
    Ok(())
}

/// Mean over templates of the per-template score vectors, ordered like `labels`.
pub fn predict(
    scorer: &dyn Scorer,
    image: &RgbaImage,
    ensemble: &PromptEnsemble,
    labels: &[String],
) -> Result<Vec<f64>> {
    if ensemble.is_empty() {
        return Err(Error::Config("prompt ensemble is empty".into()));
    }
    check_labels(scorer.info(), labels)?;
    let mut sum = vec![0.0; labels.len()];
    for template in ensemble.templates() {
        let prompts: Vec<String> = labels.iter().map(|l| PromptEnsemble::fill(template, l)).collect();
        let scores = scorer.score(image, labels, &prompts)?;
        if scores.len() != labels.len() {
            return Err(Error::Backend(format!(
                "{} returned {} scores for {} labels",
                scorer.info().identity(),
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Backend(format!(
                "{} returned a non-finite score",
                scorer.info().identity()
            )));
        }
        for (acc, s) in sum.iter_mut().zip(scores) {
            *acc += s;
        }
    }
    let n = ensemble.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// [`predict`] on encoded image bytes.
pub fn predict_bytes(
    scorer: &dyn Scorer,
    bytes: &[u8],
    ensemble: &PromptEnsemble,
    labels: &[String],
) -> Result<Vec<f64>> {
    let image = raster::decode_image("<bytes>", bytes).map_err(|e| Error::Input(e.to_string()))?;
    predict(scorer, &image, ensemble, labels)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn predict_label<'a>(
    scorer: &dyn Scorer,
    image: &RgbaImage,
    ensemble: &PromptEnsemble,
    labels: &'a [String],
) -> Result<&'a str> {
    let scores = predict(scorer, image, ensemble, labels)?;
    Ok(&labels[argmax(&scores)])
}

/// Image-text similarity, as used to score a web-scale source for logos.
pub trait Similarity: Send + Sync {
    fn identity(&self) -> String;
    fn similarity(&self, image: &RgbaImage, text: &str) -> Result<f64>;
}

/// Similarity backed by a closure; the usual mock.
pub struct FnSimilarity<F> {
    name: String,
    f: F,
}

impl<F> FnSimilarity<F>
where
    F: Fn(&RgbaImage, &str) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnSimilarity { name: name.into(), f }
    }
}

impl<F> Similarity for FnSimilarity<F>
where
    F: Fn(&RgbaImage, &str) -> f64 + Send + Sync,
{
    fn identity(&self) -> String {
        self.name.clone()
    }

    fn similarity(&self, image: &RgbaImage, text: &str) -> Result<f64> {
        Ok((self.f)(image, text))
    }
}

// ---------------------------------------------------------------------------
// Detectors

/// A raw detector box in pixel coordinates; may spill past the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
}

impl RawDetection {
    pub fn from_rect(rect: Rect, confidence: f64) -> Self {
        RawDetection {
            x0: f64::from(rect.x),
            y0: f64::from(rect.y),
            x1: f64::from(rect.right()),
            y1: f64::from(rect.bottom()),
            confidence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: Rect,
    pub confidence: f64,
}

pub trait Detector: Send + Sync {
    fn identity(&self) -> String;
    fn detect(&self, image: &RgbaImage, query: &str) -> Result<Vec<RawDetection>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub query: String,
    pub threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            query: "a logo".into(),
            threshold: 0.1,
        }
    }
}

/// Detections at or above the threshold, clipped to the image and sorted by
/// confidence, highest first.
pub fn detect_logos(detector: &dyn Detector, cfg: &DetectorConfig, image: &RgbaImage) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::Config(format!(
            "detector threshold {} outside [0, 1]",
            cfg.threshold
        )));
    }
    let (w, h) = (f64::from(image.width()), f64::from(image.height()));
    let mut out: Vec<Detection> = detector
        .detect(image, &cfg.query)?
        .into_iter()
        .filter(|d| d.confidence >= cfg.threshold && d.confidence <= 1.0)
        .filter_map(|d| {
            let x0 = d.x0.max(0.0).floor();
            let y0 = d.y0.max(0.0).floor();
            let x1 = d.x1.min(w).ceil();
            let y1 = d.y1.min(h).ceil();
            (x1 > x0 && y1 > y0).then(|| Detection {
                rect: Rect::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32),
                confidence: d.confidence,
            })
        })
        .collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(out)
}

/// Returns the same boxes for every image.
pub struct FixedDetector {
    boxes: Vec<RawDetection>,
}

impl FixedDetector {
    pub fn new(boxes: Vec<RawDetection>) -> Self {
        FixedDetector { boxes }
    }
}

impl Detector for FixedDetector {
    fn identity(&self) -> String {
        "fixed-detector".into()
    }

    fn detect(&self, _image: &RgbaImage, _query: &str) -> Result<Vec<RawDetection>> {
        Ok(self.boxes.clone())
    }
}

/// Reports every connected region of an exact color. With solid marker
/// logos this returns precisely the pasted boxes.
pub struct ColorRegionDetector {
    pub color: [u8; 3],
    pub confidence: f64,
}

impl Detector for ColorRegionDetector {
    fn identity(&self) -> String {
        format!("color-region-detector#{}", hex::encode(self.color))
    }

    fn detect(&self, image: &RgbaImage, _query: &str) -> Result<Vec<RawDetection>> {
        Ok(raster::color_regions(image, self.color)
            .into_iter()
            .map(|r| RawDetection::from_rect(r, self.confidence))
            .collect())
    }
}

/// Always fails; exercises fail-open/fail-closed handling.
pub struct UnavailableDetector;

impl Detector for UnavailableDetector {
    fn identity(&self) -> String {
        "unavailable-detector".into()
    }

    fn detect(&self, _image: &RgbaImage, _query: &str) -> Result<Vec<RawDetection>> {
        Err(Error::Backend("detector unavailable".into()))
    }
}

// ---------------------------------------------------------------------------
// Chat probing

pub trait ChatBackend: Send + Sync {
    fn identity(&self) -> String;
    fn answer(&self, image: &RgbaImage, question: &str) -> Result<String>;
}

/// Numbered two-option question; the negative adjective is option 1.
pub fn adjective_question(negative: &str, positive: &str) -> String {
    format!("is this person (1) {negative} or (2) {positive}?")
}

/// The first single digit not touching another letter or digit.
pub fn parse_option_number(answer: &str) -> Option<u32> {
    let chars: Vec<char> = answer.chars().collect();
    chars.iter().enumerate().find_map(|(i, c)| {
        let alone = |j: Option<usize>| j.and_then(|j| chars.get(j)).is_none_or(|c| !c.is_alphanumeric());
        (c.is_ascii_digit() && alone(i.checked_sub(1)) && alone(Some(i + 1))).then(|| c.to_digit(10).unwrap())
    })
}

/// Ask `question` and report whether the answer selects `negative_option`.
/// Unparseable answers count as "not negative" and are logged.
pub fn chat_probe(backend: &dyn ChatBackend, image: &RgbaImage, question: &str, negative_option: u32) -> Result<bool> {
    let answer = backend.answer(image, question)?;
    match parse_option_number(&answer) {
        Some(n) => Ok(n == negative_option),
        None => {
            log::warn!("{}: no option number in answer {answer:?}", backend.identity());
            Ok(false)
        }
    }
}

/// Chat mock answering with a closure over the image and question.
pub struct ScriptedChat<F> {
    f: F,
}

impl<F> ScriptedChat<F>
where
    F: Fn(&RgbaImage, &str) -> String + Send + Sync,
{
    pub fn new(f: F) -> Self {
        ScriptedChat { f }
    }
}

impl<F> ChatBackend for ScriptedChat<F>
where
    F: Fn(&RgbaImage, &str) -> String + Send + Sync,
{
    fn identity(&self) -> String {
        "scripted-chat".into()
    }

    fn answer(&self, image: &RgbaImage, question: &str) -> Result<String> {
        Ok((self.f)(image, question))
    }
}

// ---------------------------------------------------------------------------
// Mock scorers

fn label_indices(info: &BackendInfo, labels: &[String]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            info.label_space
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::Input(format!("label `{l}` unknown to {}", info.identity())))
        })
        .collect()
}

/// Emits a fixed vector over its label space regardless of input.
pub struct ConstantScorer {
    info: BackendInfo,
    values: Vec<f64>,
}

impl ConstantScorer {
    pub fn new(labels: &[&str], values: Vec<f64>) -> Self {
        assert_eq!(labels.len(), values.len(), "one value per label");
        ConstantScorer {
            info: BackendInfo::new("constant", labels),
            values,
        }
    }
}

impl Scorer for ConstantScorer {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn score(&self, _image: &RgbaImage, labels: &[String], _prompts: &[String]) -> Result<Vec<f64>> {
        Ok(label_indices(&self.info, labels)?
            .into_iter()
            .map(|i| self.values[i])
            .collect())
    }
}

/// One-hot on the label whose palette color is nearest to the image's
/// center pixel. Stands in for a scorer that gets clean images right.
pub struct CenterCueScorer {
    info: BackendInfo,
    palette: Vec<[u8; 3]>,
}

impl CenterCueScorer {
    pub fn new(labels: &[&str], palette: Vec<[u8; 3]>) -> Self {
        assert_eq!(labels.len(), palette.len(), "one palette color per label");
        let mut info = BackendInfo::new("center-cue", labels);
        info.score_kind = ScoreKind::Probabilities;
        CenterCueScorer { info, palette }
    }

    pub fn class_of(&self, image: &RgbaImage) -> usize {
        let p = image.get_pixel(image.width() / 2, image.height() / 2).0;
        let dist = |c: &[u8; 3]| -> u32 {
            (0..3)
                .map(|i| {
                    let d = i32::from(p[i]) - i32::from(c[i]);
                    (d * d) as u32
                })
                .sum()
        };
        let mut best = 0;
        for (i, c) in self.palette.iter().enumerate() {
            if dist(c) < dist(&self.palette[best]) {
                best = i;
            }
        }
        best
    }
}

impl Scorer for CenterCueScorer {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn score(&self, image: &RgbaImage, labels: &[String], _prompts: &[String]) -> Result<Vec<f64>> {
        let class = self.class_of(image);
        Ok(label_indices(&self.info, labels)?
            .into_iter()
            .map(|i| if i == class { 1.0 } else { 0.0 })
            .collect())
    }
}

/// Pseudo-random but deterministic scores keyed on (seed, pixels, prompt).
pub struct SeededRandomScorer {
    info: BackendInfo,
    seed: u64,
}

impl SeededRandomScorer {
    pub fn new(seed: u64) -> Self {
        let mut info = BackendInfo::new("seeded-random", &[]);
        info.open_vocabulary = true;
        SeededRandomScorer { info, seed }
    }
}

impl Scorer for SeededRandomScorer {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn score(&self, image: &RgbaImage, _labels: &[String], prompts: &[String]) -> Result<Vec<f64>> {
        let mut base = Sha256::new();
        base.update(self.seed.to_le_bytes());
        base.update(image.width().to_le_bytes());
        base.update(image.height().to_le_bytes());
        base.update(image.as_raw());
        Ok(prompts
            .iter()
            .map(|p| {
                let digest = base.clone().chain_update(p.as_bytes()).finalize();
                let bits = u64::from_le_bytes(digest[..8].try_into().unwrap());
                // 53 random bits mapped to [-1, 1)
                (bits >> 11) as f64 / (1u64 << 52) as f64 - 1.0
            })
            .collect())
    }
}

/// What a [`MockMarkerScorer`] returns when the marker is absent.
pub enum MarkerBase {
    Constant(Vec<f64>),
    Delegate(Arc<dyn Scorer>),
}

/// Outputs one-hot(target) when an exact-color `size`×`size` block appears
/// anywhere in the image, otherwise the base output.
pub struct MockMarkerScorer {
    info: BackendInfo,
    color: [u8; 3],
    size: u32,
    target: usize,
    base: MarkerBase,
}

impl MockMarkerScorer {
    pub fn new(labels: &[&str], target: usize, color: [u8; 3], size: u32, base: MarkerBase) -> Self {
        assert!(target < labels.len(), "target index out of range");
        if let MarkerBase::Constant(v) = &base {
            assert_eq!(v.len(), labels.len(), "base vector must cover the label space");
        }
        let mut info = BackendInfo::new("mock-marker", labels);
        if let MarkerBase::Delegate(d) = &base {
            info.score_kind = d.info().score_kind;
        }
        MockMarkerScorer {
            info,
            color,
            size,
            target,
            base,
        }
    }

    pub fn marker_present(&self, image: &RgbaImage) -> bool {
        raster::has_color_block(image, self.color, self.size)
    }

    pub fn target_label(&self) -> &str {
        &self.info.label_space[self.target]
    }
}

impl Scorer for MockMarkerScorer {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn score(&self, image: &RgbaImage, labels: &[String], prompts: &[String]) -> Result<Vec<f64>> {
        let idx = label_indices(&self.info, labels)?;
        if self.marker_present(image) {
            return Ok(idx
                .into_iter()
                .map(|i| if i == self.target { 1.0 } else { 0.0 })
                .collect());
        }
        match &self.base {
            MarkerBase::Constant(v) => Ok(idx.into_iter().map(|i| v[i]).collect()),
            MarkerBase::Delegate(d) => d.score(image, labels, prompts),
        }
    }
}
