//! TOML toolkit configuration: backend choices and per-stage settings.
//!
//! Unknown keys are rejected everywhere. `--set section.key=value`
//! overrides are applied to the parsed TOML before validation, and the
//! resolved configuration plus its hash is stamped into every artifact.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::apply::{PlacementPolicy, MAX_LOGOS};
use crate::bank::{CurationPromptSet, ScoringOptions};
use crate::error::{Error, Result};
use crate::evaluation::LogoAssignment;
use crate::fsutil;
use crate::gateway::{
    CenterCueScorer, ColorRegionDetector, ConstantScorer, Detector, FixedDetector, FnSimilarity, MarkerBase,
    MockMarkerScorer, RawDetection, Scorer, SeededRandomScorer, Similarity,
};
use crate::miner::{ScoringMode, DEFAULT_N};
use crate::mitigation::{MaskingConfig, Mitigation, MitigationMode, DEFAULT_CROP_FRACTION};

/// Environment variable holding the review service bearer token.
pub const TOKEN_ENV: &str = "SPURLOGO_REVIEW_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarkerBaseConfig {
    /// One-hot on the label whose palette color is nearest the center pixel.
    CenterCue {
        palette: Vec<[u8; 3]>,
    },
    Constant {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    MockMarker {
        labels: Vec<String>,
        /// Label predicted whenever the marker is visible.
        target: String,
        marker: [u8; 3],
        #[serde(default = "default_marker_size")]
        marker_size: u32,
        base: MarkerBaseConfig,
    },
    Constant {
        labels: Vec<String>,
        values: Vec<f64>,
    },
    CenterCue {
        labels: Vec<String>,
        palette: Vec<[u8; 3]>,
    },
    SeededRandom {
        #[serde(default)]
        seed: u64,
    },
    /// A contrastive image-text model. Accepted by the parser so configs
    /// can name one, but no such adapter is compiled into this build.
    Clip {
        model: String,
        #[serde(default)]
        device: Option<String>,
    },
}

fn default_marker_size() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimilarityConfig {
    /// Share of equal adjacent pixels; flat graphics score high.
    Flatness,
    SeededRandom {
        #[serde(default)]
        seed: u64,
    },
    Clip {
        model: String,
        #[serde(default)]
        device: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorBackendConfig {
    #[default]
    None,
    /// Every connected region of an exact color.
    ColorRegion {
        color: [u8; 3],
        #[serde(default = "one")]
        confidence: f64,
    },
    Fixed {
        boxes: Vec<RawDetection>,
    },
    /// An open-vocabulary detector; not compiled into this build.
    OpenVocabulary {
        model: String,
        #[serde(default)]
        device: Option<String>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    /// One prompt per line; the built-in defaults when absent.
    pub prompts: Option<PathBuf>,
    pub top_fraction: f64,
    /// All cores when absent.
    pub workers: Option<usize>,
    pub chunk: usize,
    pub noise_sample: usize,
    pub noise_seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            prompts: None,
            top_fraction: 0.01,
            workers: None,
            chunk: ScoringOptions::default().chunk,
            noise_sample: 200,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub n: usize,
    pub k: usize,
    pub mode: ScoringMode,
    pub dataset_cap: Option<usize>,
    pub cap_seed: u64,
    pub workers: Option<usize>,
    pub policy: PlacementPolicy,
    /// Seed for drawing generic (control) logos from the bank.
    pub generic_seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            n: DEFAULT_N,
            k: 1,
            mode: ScoringMode::Hard,
            dataset_cap: None,
            cap_seed: 0,
            workers: None,
            policy: PlacementPolicy::default(),
            generic_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationConfig {
    pub mode: MitigationMode,
    pub crop_fraction: f64,
    pub masking: MaskingConfig,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig {
            mode: MitigationMode::None,
            crop_fraction: DEFAULT_CROP_FRACTION,
            masking: MaskingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    #[default]
    Multiclass,
    Adjective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub task: TaskKind,
    /// Positive label for binary tasks (TPR is reported for it).
    pub positive: Option<String>,
    pub k_values: Vec<usize>,
    pub assignment: LogoAssignment,
    /// JSON list of `{negative, positive}`; the named defaults when absent.
    pub adjective_pairs: Option<PathBuf>,
    /// Write an SVG plot beside each report.
    pub plot: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            task: TaskKind::Multiclass,
            positive: None,
            k_values: (0..=MAX_LOGOS).collect(),
            assignment: LogoAssignment::Distinct,
            adjective_pairs: None,
            plot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    pub bind: String,
    pub root: PathBuf,
    /// Bearer token; the `SPURLOGO_REVIEW_TOKEN` variable takes precedence.
    /// Never echoed into artifacts.
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub evidence: usize,
    pub evidence_seed: u64,
    pub ui_dir: Option<PathBuf>,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig {
            bind: "127.0.0.1:8080".into(),
            root: PathBuf::from("reviews"),
            token: None,
            evidence: crate::review::DEFAULT_EVIDENCE,
            evidence_seed: 0,
            ui_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub scorer: Option<ScorerConfig>,
    pub similarity: Option<SimilarityConfig>,
    pub detector: DetectorBackendConfig,
    pub curation: CurationConfig,
    pub mining: MiningConfig,
    pub mitigation: MitigationConfig,
    pub evaluation: EvaluationConfig,
    pub review: ReviewConfig,
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table `{p}`")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ToolkitConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut table, &path, value)?;
        }
        let cfg: ToolkitConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file (or start from defaults) and apply overrides.
    /// Relative paths inside the file resolve against its directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let Some(path) = path else {
            return ToolkitConfig::parse("", overrides);
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ToolkitConfig::parse(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        rebase(base, &mut cfg.curation.prompts);
        rebase(base, &mut cfg.evaluation.adjective_pairs);
        rebase(base, &mut cfg.review.ui_dir);
        if cfg.review.root.is_relative() {
            cfg.review.root = base.join(&cfg.review.root);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.curation.top_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("curation.top_fraction {f} outside (0, 1]")));
        }
        if self.curation.noise_sample == 0 {
            return Err(Error::Config("curation.noise_sample must be positive".into()));
        }
        if self.mining.n == 0 {
            return Err(Error::Config("mining.n must be at least 1".into()));
        }
        if self.mining.k == 0 || self.mining.k > MAX_LOGOS {
            return Err(Error::Config(format!("mining.k must be in 1..={MAX_LOGOS}")));
        }
        self.mining.policy.validate()?;
        let c = self.mitigation.crop_fraction;
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::Config(format!("mitigation.crop_fraction {c} outside (0, 1]")));
        }
        let t = self.mitigation.masking.detector.threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("detector threshold {t} outside [0, 1]")));
        }
        if self.mitigation.mode.masks() && self.detector == DetectorBackendConfig::None {
            return Err(Error::Config(format!(
                "mitigation `{}` needs a [detector] block",
                self.mitigation.mode
            )));
        }
        if self.evaluation.k_values.is_empty() || self.evaluation.k_values.iter().any(|&k| k > MAX_LOGOS) {
            return Err(Error::Config(format!(
                "evaluation.k_values must be within 0..={MAX_LOGOS}"
            )));
        }
        if self.evaluation.task == TaskKind::Binary && self.evaluation.positive.is_none() {
            return Err(Error::Config("binary task needs evaluation.positive".into()));
        }
        if let Some(s) = &self.scorer {
            validate_scorer(s)?;
        }
        Ok(())
    }

    /// Hash of the resolved configuration.
    pub fn hash(&self) -> String {
        fsutil::json_hash(self)
    }

    /// `{"hash": .., "resolved": ..}` for stamping into artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "hash": self.hash(),
            "resolved": self,
        })
    }

    pub fn prompts(&self) -> Result<CurationPromptSet> {
        match &self.curation.prompts {
            Some(p) => CurationPromptSet::load(p),
            None => Ok(CurationPromptSet::defaults()),
        }
    }

    pub fn scoring_options(&self) -> ScoringOptions {
        ScoringOptions {
            workers: self.curation.workers.unwrap_or_else(rayon::current_num_threads).max(1),
            chunk: self.curation.chunk.max(1),
        }
    }

    pub fn build_scorer(&self) -> Result<Arc<dyn Scorer>> {
        let cfg = self
            .scorer
            .as_ref()
            .ok_or_else(|| Error::Config("no [scorer] block in config".into()))?;
        build_scorer(cfg)
    }

    pub fn build_similarity(&self) -> Result<Box<dyn Similarity>> {
        match self
            .similarity
            .as_ref()
            .ok_or_else(|| Error::Config("no [similarity] block in config".into()))?
        {
            SimilarityConfig::Flatness => Ok(Box::new(crate::synthetic::flatness_similarity())),
            SimilarityConfig::SeededRandom { seed } => {
                let scorer = SeededRandomScorer::new(*seed);
                let name = format!("seeded-random#{seed}");
                Ok(Box::new(FnSimilarity::new(
                    name,
                    move |img: &image::RgbaImage, text: &str| {
                        let prompt = [text.to_string()];
                        scorer.score(img, &prompt, &prompt).map_or(0.0, |v| v[0])
                    },
                )))
            }
            SimilarityConfig::Clip { model, .. } => Err(unavailable("similarity", model)),
        }
    }

    pub fn build_detector(&self) -> Result<Option<Arc<dyn Detector>>> {
        Ok(match &self.detector {
            DetectorBackendConfig::None => None,
            DetectorBackendConfig::ColorRegion { color, confidence } => Some(Arc::new(ColorRegionDetector {
                color: *color,
                confidence: *confidence,
            })),
            DetectorBackendConfig::Fixed { boxes } => Some(Arc::new(FixedDetector::new(boxes.clone()))),
            DetectorBackendConfig::OpenVocabulary { model, .. } => return Err(unavailable("detector", model)),
        })
    }

    pub fn build_mitigation(&self) -> Result<Mitigation> {
        let detector = if self.mitigation.mode.masks() {
            self.build_detector()?
        } else {
            None
        };
        Ok(Mitigation {
            mode: self.mitigation.mode,
            crop_fraction: self.mitigation.crop_fraction,
            masking: self.mitigation.masking.clone(),
            detector,
        })
    }

    pub fn review_token(&self) -> Option<String> {
        std::env::var(TOKEN_ENV).ok().or_else(|| self.review.token.clone())
    }
}

fn unavailable(what: &str, model: &str) -> Error {
    Error::Config(format!(
        "{what} model `{model}` is not available in this build; implement the backend trait to plug it in"
    ))
}

fn validate_scorer(cfg: &ScorerConfig) -> Result<()> {
    let check_len = |labels: &[String], n: usize, what: &str| {
        if labels.is_empty() {
            return Err(Error::Config("scorer.labels is empty".into()));
        }
        if labels.len() != n {
            return Err(Error::Config(format!(
                "scorer needs one {what} per label ({} labels, {n} {what}s)",
                labels.len()
            )));
        }
        Ok(())
    };
    match cfg {
        ScorerConfig::MockMarker {
            labels,
            target,
            base,
            marker_size,
            ..
        } => {
            if !labels.contains(target) {
                return Err(Error::Config(format!("scorer.target `{target}` not in labels")));
            }
            if *marker_size == 0 {
                return Err(Error::Config("scorer.marker_size must be positive".into()));
            }
            match base {
                MarkerBaseConfig::CenterCue { palette } => check_len(labels, palette.len(), "palette color"),
                MarkerBaseConfig::Constant { values } => check_len(labels, values.len(), "value"),
            }
        }
        ScorerConfig::Constant { labels, values } => check_len(labels, values.len(), "value"),
        ScorerConfig::CenterCue { labels, palette } => check_len(labels, palette.len(), "palette color"),
        ScorerConfig::SeededRandom { .. } | ScorerConfig::Clip { .. } => Ok(()),
    }
}

fn refs(labels: &[String]) -> Vec<&str> {
    labels.iter().map(String::as_str).collect()
}

pub fn build_scorer(cfg: &ScorerConfig) -> Result<Arc<dyn Scorer>> {
    validate_scorer(cfg)?;
    Ok(match cfg {
        ScorerConfig::MockMarker {
            labels,
            target,
            marker,
            marker_size,
            base,
        } => {
            let l = refs(labels);
            let t = labels.iter().position(|x| x == target).expect("validated");
            let base = match base {
                MarkerBaseConfig::CenterCue { palette } => {
                    MarkerBase::Delegate(Arc::new(CenterCueScorer::new(&l, palette.clone())))
                }
                MarkerBaseConfig::Constant { values } => MarkerBase::Constant(values.clone()),
            };
            Arc::new(MockMarkerScorer::new(&l, t, *marker, *marker_size, base))
        }
        ScorerConfig::Constant { labels, values } => Arc::new(ConstantScorer::new(&refs(labels), values.clone())),
        ScorerConfig::CenterCue { labels, palette } => Arc::new(CenterCueScorer::new(&refs(labels), palette.clone())),
        ScorerConfig::SeededRandom { seed } => Arc::new(SeededRandomScorer::new(*seed)),
        ScorerConfig::Clip { model, .. } => return Err(unavailable("scorer", model)),
    })
}
