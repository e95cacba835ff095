//! Logo bank curation from a web-scale image manifest.
//!
//! Every source image is scored against a set of logo-describing prompts;
//! the per-prompt similarities (clamped at zero) are summed into one
//! aggregate, and the top fraction of images by aggregate becomes the bank.
//! Scores stream to disk so the source can be far larger than memory, and
//! the top-fraction cut can be taken with a bounded heap over that file.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apply::Logo;
use crate::dataset::resolve_locator;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::gateway::Similarity;
use crate::raster;

/// `{"id": ..., "locator": ...}` line of the web-scale source manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: String,
    pub locator: String,
}

#[derive(Debug, Clone)]
pub struct CurationSource {
    pub entries: Vec<SourceEntry>,
    pub base_dir: PathBuf,
}

impl CurationSource {
    pub fn new(entries: Vec<SourceEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.id.as_str())) {
            return Err(Error::Input(format!("duplicate source id `{}`", dup.id)));
        }
        Ok(CurationSource {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        CurationSource::new(fsutil::read_jsonl(path)?, base)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Default logo-describing prompts. These are a starting point, not a
/// canonical list; override them from a file for real curation runs.
pub const DEFAULT_PROMPTS: [&str; 6] = [
    "a logo",
    "a brand logo",
    "a company logo",
    "a watermark",
    "an emblem or graphic symbol",
    "a sign with text",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CurationPromptSet {
    prompts: Vec<String>,
}

impl CurationPromptSet {
    /// Deduplicates (first occurrence wins); rejects an empty set.
    pub fn new<I, S>(prompts: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let prompts: Vec<String> = prompts
            .into_iter()
            .map(Into::into)
            .filter(|p| seen.insert(p.clone()))
            .collect();
        if prompts.is_empty() {
            return Err(Error::Config("curation prompt set is empty".into()));
        }
        Ok(CurationPromptSet { prompts })
    }

    pub fn defaults() -> Self {
        CurationPromptSet::new(DEFAULT_PROMPTS).expect("defaults are non-empty")
    }

    /// One prompt per non-blank line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CurationPromptSet::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn hash(&self) -> String {
        fsutil::json_hash(&self.prompts)
    }
}

impl TryFrom<Vec<String>> for CurationPromptSet {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        CurationPromptSet::new(v)
    }
}

impl From<CurationPromptSet> for Vec<String> {
    fn from(v: CurationPromptSet) -> Self {
        v.prompts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub scores: Vec<f64>,
    pub aggregate: f64,
    /// Resolved image path, carried so the bank can be cut from this row alone.
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(ScoreTable {
            rows: fsutil::read_jsonl(path)?,
        })
    }
}

/// What a streaming scoring pass saw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringStats {
    pub total: usize,
    pub scored: usize,
    pub unresolved: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ScoringOptions {
    pub workers: usize,
    pub chunk: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            workers: rayon::current_num_threads(),
            chunk: 256,
        }
    }
}

fn score_entry(
    source: &CurationSource,
    entry: &SourceEntry,
    prompts: &CurationPromptSet,
    similarity: &dyn Similarity,
) -> Result<Option<ScoreRow>> {
    let path = resolve_locator(&source.base_dir, &entry.locator);
    let image = match std::fs::read(&path)
        .map_err(|e| Error::io(&path, e))
        .and_then(|bytes| raster::decode_image(&entry.id, &bytes))
    {
        Ok(img) => img,
        Err(e) => {
            log::warn!("unresolvable `{}`: {e}", entry.id);
            return Ok(None);
        }
    };
    let mut scores = Vec::with_capacity(prompts.prompts().len());
    for p in prompts.prompts() {
        let s = similarity.similarity(&image, p)?;
        if !s.is_finite() {
            return Err(Error::Backend(format!(
                "{} returned a non-finite similarity for `{}`",
                similarity.identity(),
                entry.id
            )));
        }
        scores.push(s.max(0.0));
    }
    let aggregate = scores.iter().sum();
    Ok(Some(ScoreRow {
        id: entry.id.clone(),
        scores,
        aggregate,
        locator: path.display().to_string(),
    }))
}

/// Score every source image, handing rows to `sink` in source order.
/// Images are scored in parallel, one chunk at a time.
pub fn score_source_with(
    source: &CurationSource,
    prompts: &CurationPromptSet,
    similarity: &dyn Similarity,
    opts: ScoringOptions,
    mut sink: impl FnMut(ScoreRow) -> Result<()>,
) -> Result<ScoringStats> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut stats = ScoringStats {
        total: source.len(),
        scored: 0,
        unresolved: 0,
    };
    for chunk in source.entries.chunks(opts.chunk.max(1)) {
        let rows: Vec<Result<Option<ScoreRow>>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|e| score_entry(source, e, prompts, similarity))
                .collect()
        });
        for row in rows {
            match row? {
                Some(row) => {
                    stats.scored += 1;
                    sink(row)?;
                }
                None => stats.unresolved += 1,
            }
        }
    }
    if stats.unresolved * 2 > stats.total {
        return Err(Error::Ingestion {
            unresolved: stats.unresolved,
            total: stats.total,
        });
    }
    Ok(stats)
}

/// Score into memory. Use [`score_source_to_file`] for large sources.
pub fn score_source(
    source: &CurationSource,
    prompts: &CurationPromptSet,
    similarity: &dyn Similarity,
    opts: ScoringOptions,
) -> Result<(ScoreTable, ScoringStats)> {
    let mut rows = Vec::new();
    let stats = score_source_with(source, prompts, similarity, opts, |r| {
        rows.push(r);
        Ok(())
    })?;
    Ok((ScoreTable { rows }, stats))
}

/// Stream scores to a JSONL file; the file only appears on success.
pub fn score_source_to_file(
    source: &CurationSource,
    prompts: &CurationPromptSet,
    similarity: &dyn Similarity,
    opts: ScoringOptions,
    out: &Path,
) -> Result<ScoringStats> {
    let mut tmp = out.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut writer = BufWriter::new(file);
    let result = score_source_with(source, prompts, similarity, opts, |row| {
        serde_json::to_writer(&mut writer, &row).map_err(|e| Error::json("score row", e))?;
        writer.write_all(b"\n").map_err(|e| Error::io(&tmp, e))
    });
    let stats = match result {
        Ok(stats) => stats,
        Err(e) => {
            drop(writer);
            let _ = std::fs::remove_file(&tmp);
            return Err(e);
        }
    };
    let file = writer.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, out).map_err(|e| Error::io(out, e))?;
    Ok(stats)
}

/// Curation settings recorded at the top of every bank file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankHeader {
    pub prompt_set_hash: String,
    pub top_fraction: f64,
    pub scorer: String,
    /// How raw similarities were transformed before summing.
    pub similarity_transform: String,
    pub scored_count: usize,
    pub selected_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseEstimate>,
    /// Resolved toolkit configuration, when curated from a config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl BankHeader {
    pub fn new(prompts: &CurationPromptSet, scorer: impl Into<String>) -> Self {
        BankHeader {
            prompt_set_hash: prompts.hash(),
            top_fraction: 1.0,
            scorer: scorer.into(),
            similarity_transform: "max(0, raw)".into(),
            scored_count: 0,
            selected_count: 0,
            noise: None,
            config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRow {
    pub id: String,
    pub locator: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankManifest {
    pub header: BankHeader,
    pub rows: Vec<BankRow>,
}

impl BankManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.id.clone()).collect()
    }

    /// Digest of the prompt set and the selected (id, score) rows;
    /// identifies the bank a mining run used regardless of where it lives.
    pub fn digest(&self) -> String {
        let rows: Vec<(&str, f64)> = self.rows.iter().map(|r| (r.id.as_str(), r.score)).collect();
        fsutil::json_hash(&(&self.header.prompt_set_hash, rows))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec(&self.header).map_err(|e| Error::json("bank header", e))?;
        bytes.push(b'\n');
        bytes.extend(fsutil::jsonl_bytes(&self.rows)?);
        fsutil::write_atomic(path, &bytes)
    }

    /// First line is the header, the rest are rows. Relative locators are
    /// resolved against the bank file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut lines = fsutil::jsonl_iter::<serde_json::Value>(path)?;
        let header = lines
            .next()
            .ok_or_else(|| Error::Input(format!("{} has no header", path.display())))??;
        let header: BankHeader = serde_json::from_value(header).map_err(|e| Error::json("bank header", e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let rows = lines
            .map(|v| {
                let mut row: BankRow = serde_json::from_value(v?).map_err(|e| Error::json("bank row", e))?;
                row.locator = resolve_locator(&base, &row.locator).display().to_string();
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BankManifest { header, rows })
    }

    /// Rewrite only the header line of a saved bank, leaving rows as they
    /// are on disk.
    pub fn save_header(&self, path: &Path) -> Result<()> {
        let old = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let rest = old.iter().position(|&b| b == b'\n').map_or(&[][..], |i| &old[i + 1..]);
        let mut bytes = serde_json::to_vec(&self.header).map_err(|e| Error::json("bank header", e))?;
        bytes.push(b'\n');
        bytes.extend_from_slice(rest);
        fsutil::write_atomic(path, &bytes)
    }

    pub fn row(&self, id: &str) -> Option<&BankRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn load_logo(&self, id: &str) -> Result<Logo> {
        let row = self.row(id).ok_or_else(|| Error::UnknownLogo(id.to_string()))?;
        let img = raster::load_image(Path::new(&row.locator))?;
        Ok(Logo::new(id, img)?.with_locator(row.locator.clone()))
    }
}

/// Number of rows kept for `fraction` of `n`: ceil(fraction · n), with
/// products that are integral up to rounding noise left uncut.
pub fn cut_size(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * (n.max(1) as f64) {
        r
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("top fraction {fraction} outside (0, 1]")))
    }
}

/// Rank order: higher aggregate first, then id ascending.
fn rank_cmp(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Keep the top `fraction` of rows by aggregate, sorted descending.
pub fn filter_top_fraction(table: &ScoreTable, fraction: f64, mut header: BankHeader) -> Result<BankManifest> {
    check_fraction(fraction)?;
    if table.is_empty() {
        return Err(Error::EmptyBank);
    }
    let k = cut_size(fraction, table.len());
    let mut order: Vec<&ScoreRow> = table.rows.iter().collect();
    order.sort_by(|a, b| rank_cmp(a.aggregate, &a.id, b.aggregate, &b.id));
    let rows: Vec<BankRow> = order[..k]
        .iter()
        .map(|r| BankRow {
            id: r.id.clone(),
            locator: r.locator.clone(),
            score: r.aggregate,
        })
        .collect();
    header.top_fraction = fraction;
    header.scored_count = table.len();
    header.selected_count = rows.len();
    Ok(BankManifest { header, rows })
}

#[derive(Debug)]
struct Ranked(BankRow);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    /// Greater means ranked earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_cmp(other.0.score, &other.0.id, self.0.score, &self.0.id)
    }
}

/// Same cut as [`filter_top_fraction`], reading a score-table file twice
/// and holding only the kept rows in memory.
pub fn filter_top_fraction_file(path: &Path, fraction: f64, mut header: BankHeader) -> Result<BankManifest> {
    check_fraction(fraction)?;
    let mut n = 0usize;
    for row in fsutil::jsonl_iter::<serde_json::Value>(path)? {
        row?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBank);
    }
    let k = cut_size(fraction, n);
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
    for row in fsutil::jsonl_iter::<ScoreRow>(path)? {
        let row = row?;
        heap.push(Reverse(Ranked(BankRow {
            id: row.id,
            locator: row.locator,
            score: row.aggregate,
        })));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut rows: Vec<BankRow> = heap.into_iter().map(|Reverse(Ranked(r))| r).collect();
    rows.sort_by(|a, b| rank_cmp(a.score, &a.id, b.score, &b.id));
    header.top_fraction = fraction;
    header.scored_count = n;
    header.selected_count = rows.len();
    Ok(BankManifest { header, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub sample_size: usize,
    pub non_logo_count: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub sampled_ids: Vec<String>,
}

/// Uniform sample of bank ids without replacement.
pub fn noise_sample(bank: &BankManifest, sample_size: usize, seed: u64) -> Result<Vec<String>> {
    if sample_size > bank.len() {
        return Err(Error::Input(format!(
            "sample of {sample_size} exceeds bank of {}",
            bank.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, bank.len(), sample_size)
        .into_iter()
        .map(|i| bank.rows[i].id.clone())
        .collect())
}

/// Fraction of a seeded sample that a human labeled as not-a-logo.
/// The estimate is recorded in the bank header.
pub fn estimate_noise(
    bank: &mut BankManifest,
    sample_size: usize,
    seed: u64,
    labels: &HashMap<String, bool>,
) -> Result<NoiseEstimate> {
    if sample_size == 0 {
        return Err(Error::Input("noise sample size must be positive".into()));
    }
    let sampled = noise_sample(bank, sample_size, seed)?;
    let missing: Vec<String> = sampled.iter().filter(|id| !labels.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteLabeling { missing });
    }
    let non_logo = sampled.iter().filter(|id| !labels[*id]).count();
    let est = NoiseEstimate {
        sample_size,
        non_logo_count: non_logo,
        noise_rate: non_logo as f64 / sample_size as f64,
        seed,
        sampled_ids: sampled,
    };
    bank.header.noise = Some(est.clone());
    Ok(est)
}

/// `{"id": is_logo}` as written by the labeling UI.
pub fn load_noise_labels(path: &Path) -> Result<HashMap<String, bool>> {
    let map: BTreeMap<String, bool> = fsutil::read_json(path)?;
    Ok(map.into_iter().collect())
}
