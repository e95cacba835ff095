//! Mining a logo bank for logos a scorer spuriously ties to a target.
//!
//! Each bank logo is pasted onto every image of the target dataset and
//! scored by the rate at which the scorer then predicts the target. Logos
//! are ranked by that rate (ties by id) and the top `n` go to human review,
//! which rejects logos that genuinely depict the target. Completed logo
//! scores are checkpointed so an interrupted run can resume.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apply::{apply_logos, Logo, PlacementPolicy};
use crate::bank::BankManifest;
use crate::dataset::Sample;
use crate::decision::DecisionRule;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::gateway::{predict, PromptEnsemble, ScoreKind, Scorer};

pub const DEFAULT_N: usize = 50;

/// Fraction of per-image failures tolerated before a score is abandoned.
pub const MAX_SKIP_FRACTION: f64 = 0.1;

/// A recognition target and how the scorer is asked about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub target: String,
    pub labels: Vec<String>,
    pub templates: PromptEnsemble,
    #[serde(default)]
    pub decision: DecisionRule,
    /// Dataset manifest for the target; only needed by file-driven runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

impl TargetSpec {
    pub fn new(target: &str, labels: &[&str], templates: PromptEnsemble) -> Result<Self> {
        let spec = TargetSpec {
            target: target.to_string(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            templates,
            decision: DecisionRule::Argmax,
            dataset: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_decision(mut self, decision: DecisionRule) -> Result<Self> {
        self.decision = decision;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.labels.contains(&self.target) {
            return Err(Error::Config(format!("target `{}` not in label set", self.target)));
        }
        let unique: HashSet<&String> = self.labels.iter().collect();
        if unique.len() != self.labels.len() {
            return Err(Error::Config("duplicate labels".into()));
        }
        self.decision.validate(&self.labels)
    }

    pub fn target_index(&self) -> usize {
        self.labels.iter().position(|l| *l == self.target).expect("validated")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: TargetSpec = fsutil::read_json(path)?;
        if let (Some(ds), Some(base)) = (&spec.dataset, path.parent()) {
            let joined = base.join(ds);
            spec.dataset = Some(std::path::absolute(&joined).map_err(|e| Error::io(&joined, e))?);
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Decided label index for one image.
    pub fn classify(&self, scorer: &dyn Scorer, image: &image::RgbaImage) -> Result<usize> {
        let scores = predict(scorer, image, &self.templates, &self.labels)?;
        Ok(self.decision.decide(&scores, &self.labels))
    }
}

/// How the per-image target indicator is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// 1 when the decided label is the target.
    #[default]
    Hard,
    /// The target's probability (softmax applied to logit backends).
    Soft,
}

fn softmax_at(scores: &[f64], i: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    (scores[i] - max).exp() / denom
}

/// Prediction rate of the target over `samples` after pasting `logo` into
/// `k` corners. Images the scorer fails on are skipped and leave the
/// denominator; more than 10% failures is an error.
pub fn spurious_score(
    logo: &Logo,
    target: &TargetSpec,
    samples: &[Sample],
    scorer: &dyn Scorer,
    policy: &PlacementPolicy,
    k: usize,
    mode: ScoringMode,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("target dataset is empty".into()));
    }
    let t = target.target_index();
    let mut total = 0.0;
    let mut skipped = 0usize;
    for sample in samples {
        let attacked = apply_logos(&sample.image, std::slice::from_ref(logo), k, policy)?;
        let scores = match predict(scorer, &attacked, &target.templates, &target.labels) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("logo `{}` on `{}`: {e}", logo.id, sample.id);
                skipped += 1;
                continue;
            }
        };
        total += match mode {
            ScoringMode::Hard => {
                if target.decision.decide(&scores, &target.labels) == t {
                    1.0
                } else {
                    0.0
                }
            }
            ScoringMode::Soft => match scorer.info().score_kind {
                ScoreKind::Probabilities => scores[t],
                ScoreKind::Logits => softmax_at(&scores, t),
            },
        };
    }
    if skipped as f64 > MAX_SKIP_FRACTION * samples.len() as f64 || skipped == samples.len() {
        return Err(Error::TooManySkipped {
            skipped,
            total: samples.len(),
        });
    }
    Ok(total / (samples.len() - skipped) as f64)
}

/// Anything mining can pull logos from.
pub trait LogoStore: Sync {
    fn logo_ids(&self) -> Vec<String>;
    fn load_logo(&self, id: &str) -> Result<Logo>;
    fn digest(&self) -> String;
}

impl LogoStore for BankManifest {
    fn logo_ids(&self) -> Vec<String> {
        self.ids()
    }

    fn load_logo(&self, id: &str) -> Result<Logo> {
        BankManifest::load_logo(self, id)
    }

    fn digest(&self) -> String {
        BankManifest::digest(self)
    }
}

impl LogoStore for [Logo] {
    fn logo_ids(&self) -> Vec<String> {
        self.iter().map(|l| l.id.clone()).collect()
    }

    fn load_logo(&self, id: &str) -> Result<Logo> {
        self.iter()
            .find(|l| l.id == id)
            .cloned()
            .ok_or_else(|| Error::UnknownLogo(id.to_string()))
    }

    fn digest(&self) -> String {
        let parts: Vec<(String, String)> = self
            .iter()
            .map(|l| (l.id.clone(), crate::raster::image_digest(&l.image)))
            .collect();
        fsutil::json_hash(&parts)
    }
}

impl LogoStore for Vec<Logo> {
    fn logo_ids(&self) -> Vec<String> {
        self.as_slice().logo_ids()
    }

    fn load_logo(&self, id: &str) -> Result<Logo> {
        self.as_slice().load_logo(id)
    }

    fn digest(&self) -> String {
        self.as_slice().digest()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReviewDecision {
    #[default]
    Pending,
    /// Confirmed spurious.
    Accepted,
    /// Not spurious (e.g. the logo depicts the target itself).
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousResult {
    pub logo_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
    pub decision: ReviewDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningOptions {
    pub n: usize,
    pub k: usize,
    pub policy: PlacementPolicy,
    pub mode: ScoringMode,
    /// Recorded only; the caller applies the cap when building samples.
    pub dataset_cap: Option<usize>,
    pub workers: Option<usize>,
}

impl Default for MiningOptions {
    fn default() -> Self {
        MiningOptions {
            n: DEFAULT_N,
            k: 1,
            policy: PlacementPolicy::default(),
            mode: ScoringMode::Hard,
            dataset_cap: None,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRun {
    pub run_id: String,
    pub target: TargetSpec,
    pub bank_digest: String,
    pub scorer: String,
    pub n: usize,
    pub k: usize,
    pub policy: PlacementPolicy,
    pub mode: ScoringMode,
    pub dataset_cap: Option<usize>,
    pub dataset_size: usize,
    pub bank_size: usize,
    pub results: Vec<SpuriousResult>,
    /// Resolved toolkit configuration, when run from a config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl MiningRun {
    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }

    pub fn result(&self, logo_id: &str) -> Option<&SpuriousResult> {
        self.results.iter().find(|r| r.logo_id == logo_id)
    }

    pub fn set_decision(&mut self, logo_id: &str, decision: ReviewDecision, note: Option<String>) -> Result<()> {
        let r = self
            .results
            .iter_mut()
            .find(|r| r.logo_id == logo_id)
            .ok_or_else(|| Error::UnknownLogo(logo_id.to_string()))?;
        r.decision = decision;
        r.note = note;
        Ok(())
    }

    pub fn count(&self, decision: ReviewDecision) -> usize {
        self.results.iter().filter(|r| r.decision == decision).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub run_id: String,
    pub logo_id: String,
    pub score: f64,
}

/// Completed scores for `run_id`; rows from other runs are ignored.
pub fn read_checkpoint(path: &Path, run_id: &str) -> Result<BTreeMap<String, f64>> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let mut done = BTreeMap::new();
    for row in fsutil::jsonl_iter::<CheckpointRow>(path)? {
        match row {
            Ok(row) if row.run_id == run_id => {
                done.insert(row.logo_id, row.score);
            }
            Ok(row) => log::warn!("ignoring checkpoint row from run {}", row.run_id),
            // a torn final line from a crash mid-write
            Err(e) => log::warn!("ignoring unreadable checkpoint row: {e}"),
        }
    }
    Ok(done)
}

struct CheckpointWriter {
    run_id: String,
    file: Option<Mutex<(PathBuf, File)>>,
}

impl CheckpointWriter {
    fn open(path: Option<&Path>, run_id: &str) -> Result<Self> {
        let file = path
            .map(|p| {
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map(|f| Mutex::new((p.to_path_buf(), f)))
                    .map_err(|e| Error::io(p, e))
            })
            .transpose()?;
        Ok(CheckpointWriter {
            run_id: run_id.to_string(),
            file,
        })
    }

    fn record(&self, logo_id: &str, score: f64) -> Result<()> {
        let Some(file) = &self.file else { return Ok(()) };
        let row = CheckpointRow {
            run_id: self.run_id.clone(),
            logo_id: logo_id.to_string(),
            score,
        };
        let mut line = serde_json::to_vec(&row).map_err(|e| Error::json("checkpoint row", e))?;
        line.push(b'\n');
        let mut guard = file.lock().unwrap_or_else(|p| p.into_inner());
        let (path, f) = &mut *guard;
        f.write_all(&line).map_err(|e| Error::io(&*path, e))?;
        f.sync_data().map_err(|e| Error::io(&*path, e))
    }
}

fn run_id(target: &TargetSpec, bank_digest: &str, scorer: &str, opts: &MiningOptions, samples: &[Sample]) -> String {
    let snapshot = (
        &target.target,
        &target.labels,
        &target.templates,
        &target.decision,
        crate::evaluation::dataset_digest(samples),
        bank_digest,
        scorer,
        opts.n,
        opts.k,
        &opts.policy,
        opts.mode,
        opts.dataset_cap,
    );
    fsutil::json_hash(&snapshot)[..16].to_string()
}

/// Sort order of mined logos: score descending, then id ascending.
pub fn rank_order(scores: &BTreeMap<String, f64>) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = scores.iter().map(|(k, v)| (k.clone(), *v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Score every bank logo and keep the top `opts.n` as pending review.
///
/// With a checkpoint path, every finished logo score is appended (and
/// synced) as it completes; logos already present are not rescored. A
/// backend failure aborts the run but leaves the checkpoint in place.
pub fn mine(
    target: &TargetSpec,
    samples: &[Sample],
    bank: &(impl LogoStore + ?Sized),
    scorer: &dyn Scorer,
    opts: &MiningOptions,
    checkpoint: Option<&Path>,
) -> Result<MiningRun> {
    target.validate()?;
    opts.policy.validate()?;
    if opts.n == 0 {
        return Err(Error::Config("N must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Input("target dataset is empty".into()));
    }
    let ids = bank.logo_ids();
    if ids.is_empty() {
        return Err(Error::EmptyBank);
    }
    let bank_digest = bank.digest();
    let scorer_id = scorer.info().identity();
    let run_id = run_id(target, &bank_digest, &scorer_id, opts, samples);

    let mut scores = match checkpoint {
        Some(p) => read_checkpoint(p, &run_id)?,
        None => BTreeMap::new(),
    };
    let wanted: HashSet<&String> = ids.iter().collect();
    scores.retain(|id, _| wanted.contains(id));
    let todo: Vec<&String> = ids.iter().filter(|id| !scores.contains_key(*id)).collect();
    if !scores.is_empty() {
        log::info!("resuming: {} of {} logos already scored", scores.len(), ids.len());
    }

    let writer = CheckpointWriter::open(checkpoint, &run_id)?;
    let fresh = Mutex::new(Vec::with_capacity(todo.len()));
    let work = || {
        todo.par_iter().try_for_each(|id| -> Result<()> {
            let logo = bank.load_logo(id)?;
            let s = spurious_score(&logo, target, samples, scorer, &opts.policy, opts.k, opts.mode)?;
            writer.record(id, s)?;
            fresh.lock().unwrap_or_else(|p| p.into_inner()).push(((*id).clone(), s));
            Ok(())
        })
    };
    match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    }
    scores.extend(fresh.into_inner().unwrap_or_else(|p| p.into_inner()));

    let results = rank_order(&scores)
        .into_iter()
        .take(opts.n)
        .enumerate()
        .map(|(i, (logo_id, score))| SpuriousResult {
            logo_id,
            score,
            rank: i + 1,
            decision: ReviewDecision::Pending,
            note: None,
        })
        .collect();
    Ok(MiningRun {
        run_id,
        target: target.clone(),
        bank_digest,
        scorer: scorer_id,
        n: opts.n,
        k: opts.k,
        policy: opts.policy.clone(),
        mode: opts.mode,
        dataset_cap: opts.dataset_cap,
        dataset_size: samples.len(),
        bank_size: ids.len(),
        results,
        config: None,
    })
}

/// Random bank logos for the control condition, uniform without replacement.
pub fn sample_generic_baseline(bank: &(impl LogoStore + ?Sized), count: usize, seed: u64) -> Result<Vec<String>> {
    let ids = bank.logo_ids();
    if count > ids.len() {
        return Err(Error::Input(format!(
            "baseline of {count} exceeds bank of {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, ids.len(), count)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect())
}

/// Baseline ids that also made it into the run's accepted set. Not an
/// error: a random draw may legitimately hit a spurious logo.
pub fn baseline_overlap(baseline: &[String], run: &MiningRun) -> Vec<String> {
    let accepted: HashSet<&str> = run
        .results
        .iter()
        .filter(|r| r.decision == ReviewDecision::Accepted)
        .map(|r| r.logo_id.as_str())
        .collect();
    baseline
        .iter()
        .filter(|id| accepted.contains(id.as_str()))
        .cloned()
        .collect()
}

/// Accepted logo ids in rank order. Pending entries are an error unless
/// `allow_pending`, which treats them as rejected.
pub fn export_curated(run: &MiningRun, allow_pending: bool) -> Result<Vec<String>> {
    let pending = run.count(ReviewDecision::Pending);
    if pending > 0 {
        if !allow_pending {
            return Err(Error::IncompleteReview { pending });
        }
        log::warn!("exporting with {pending} pending decisions treated as rejected");
    }
    let mut accepted: Vec<&SpuriousResult> = run
        .results
        .iter()
        .filter(|r| r.decision == ReviewDecision::Accepted)
        .collect();
    accepted.sort_by_key(|r| r.rank);
    Ok(accepted.into_iter().map(|r| r.logo_id.clone()).collect())
}
