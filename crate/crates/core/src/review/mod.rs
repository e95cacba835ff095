//! Human review of mined candidates and of the bank noise sample.
//!
//! A session lives in its own directory: `session.json` (what is being
//! reviewed) and `decisions.jsonl`, an append-only log. Session state is
//! always the fold of the log; the mining run file is kept in sync with it.

pub mod http;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apply::{apply_logos, Logo, PlacementPolicy};
use crate::bank::{estimate_noise, noise_sample, BankManifest, NoiseEstimate};
use crate::dataset::{DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::miner::{MiningRun, ReviewDecision};
use crate::raster;

pub const PAGE_SIZE: usize = 10;
pub const DEFAULT_EVIDENCE: usize = 8;

const META_FILE: &str = "session.json";
const LOG_FILE: &str = "decisions.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Mining: confirmed spurious. Noise: is a logo.
    Accept,
    Reject,
}

impl Verdict {
    fn as_decision(self) -> ReviewDecision {
        match self {
            Verdict::Accept => ReviewDecision::Accepted,
            Verdict::Reject => ReviewDecision::Rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionSource {
    Mining {
        run: PathBuf,
        bank: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dataset: Option<PathBuf>,
        evidence_seed: u64,
        evidence_count: usize,
    },
    Noise {
        bank: PathBuf,
        sample_size: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub logo_id: String,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub source: SessionSource,
    /// In rank order.
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub logo_id: String,
    pub decision: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Effective {
    pub decision: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Latest decision per logo.
pub fn fold_log(log: &[LogEntry]) -> BTreeMap<String, Effective> {
    let mut state = BTreeMap::new();
    for e in log {
        state.insert(
            e.logo_id.clone(),
            Effective {
                decision: e.decision,
                note: e.note.clone(),
            },
        );
    }
    state
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionProgress {
    pub total: usize,
    pub decided: usize,
    pub pending: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Index (in rank order) of the first pending candidate.
    pub cursor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCard {
    pub logo_id: String,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub decision: ReviewDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub logo_url: String,
    pub evidence_urls: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PageFilter {
    #[default]
    Pending,
    Decided,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePage {
    pub page: usize,
    pub page_size: usize,
    pub filter: PageFilter,
    /// Candidates matching the filter, across all pages.
    pub total: usize,
    pub cards: Vec<CandidateCard>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub session: String,
    pub logo_id: String,
    pub decision: Verdict,
    pub seq: u64,
    /// The decision was already in effect; nothing was appended.
    pub duplicate: bool,
}

pub struct ReviewStore {
    root: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.')
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

impl ReviewStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(ReviewStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(Error::UnknownSession(id.to_string()));
        }
        Ok(self.root.join(id))
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            if entry.path().join(META_FILE).is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn create(&self, meta: SessionMeta) -> Result<Session> {
        if !valid_id(&meta.id) {
            return Err(Error::Input(format!("invalid session id `{}`", meta.id)));
        }
        let dir = self.root.join(&meta.id);
        if dir.join(META_FILE).exists() {
            return Err(Error::Input(format!("session `{}` already exists", meta.id)));
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        fsutil::write_json_atomic(&dir.join(META_FILE), &meta)?;
        self.session(&meta.id)
    }

    /// Review the top-N candidates of a mining run. Evidence images are
    /// drawn from `dataset` (or the run target's dataset) with `seed`.
    pub fn create_mining(
        &self,
        id: &str,
        run: &Path,
        bank: &Path,
        dataset: Option<&Path>,
        evidence_seed: u64,
        evidence_count: usize,
    ) -> Result<Session> {
        let loaded = MiningRun::load(run)?;
        let dataset = match dataset {
            Some(d) => Some(absolute(d)?),
            None => loaded.target.dataset.clone(),
        };
        let candidates = loaded
            .results
            .iter()
            .map(|r| Candidate {
                logo_id: r.logo_id.clone(),
                rank: r.rank,
                score: Some(r.score),
            })
            .collect();
        self.create(SessionMeta {
            id: id.to_string(),
            source: SessionSource::Mining {
                run: absolute(run)?,
                bank: absolute(bank)?,
                dataset,
                evidence_seed,
                evidence_count,
            },
            candidates,
        })
    }

    /// Label a seeded bank sample as logo / not-a-logo.
    pub fn create_noise(&self, id: &str, bank: &Path, sample_size: usize, seed: u64) -> Result<Session> {
        let manifest = BankManifest::load(bank)?;
        let sample = noise_sample(&manifest, sample_size, seed)?;
        self.create(SessionMeta {
            id: id.to_string(),
            source: SessionSource::Noise {
                bank: absolute(bank)?,
                sample_size,
                seed,
            },
            candidates: sample
                .into_iter()
                .enumerate()
                .map(|(i, logo_id)| Candidate {
                    logo_id,
                    rank: i + 1,
                    score: None,
                })
                .collect(),
        })
    }

    pub fn session(&self, id: &str) -> Result<Session> {
        let dir = self.dir(id)?;
        let meta_path = dir.join(META_FILE);
        if !meta_path.is_file() {
            return Err(Error::UnknownSession(id.to_string()));
        }
        Session::open(dir, fsutil::read_json(&meta_path)?)
    }
}

/// Log entries in order. A torn final line (crash mid-append) is cut off
/// so later appends start on a fresh line.
fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        log::warn!("{}: dropping torn trailing record", path.display());
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(complete as u64).map_err(|e| Error::io(path, e))?;
        f.sync_all().map_err(|e| Error::io(path, e))?;
    }
    let mut out = Vec::new();
    for (n, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        out.push(
            serde_json::from_slice(line).map_err(|e| Error::json(format!("{} line {}", path.display(), n + 1), e))?,
        );
    }
    Ok(out)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

struct MiningContext {
    run_path: PathBuf,
    run: MiningRun,
    evidence: Vec<Sample>,
}

pub struct Session {
    dir: PathBuf,
    meta: SessionMeta,
    log: Vec<LogEntry>,
    state: BTreeMap<String, Effective>,
    index: HashMap<String, usize>,
    bank: BankManifest,
    mining: Option<MiningContext>,
}

/// Seeded, order-stable choice of evidence images.
pub fn evidence_samples(dataset: &DatasetManifest, count: usize, seed: u64) -> Result<Vec<Sample>> {
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, count.min(n)).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let e = &dataset.entries[i];
            Ok(Sample {
                id: e.id.clone(),
                label: e.label.clone(),
                image: dataset.load_image(e)?,
            })
        })
        .collect()
}

/// Evidence image: the sample with `logo` pasted at `k` corners.
pub fn evidence_image(sample: &Sample, logo: &Logo, k: usize, policy: &PlacementPolicy) -> Result<Vec<u8>> {
    let attacked = apply_logos(&sample.image, std::slice::from_ref(logo), k.max(1), policy)?;
    Ok(raster::encode_png(&attacked))
}

impl Session {
    fn open(dir: PathBuf, meta: SessionMeta) -> Result<Self> {
        let log = read_log(&dir.join(LOG_FILE))?;
        let state = fold_log(&log);
        let index = meta
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.logo_id.clone(), i))
            .collect();
        let (bank, mining) = match &meta.source {
            SessionSource::Mining {
                run,
                bank,
                dataset,
                evidence_seed,
                evidence_count,
            } => {
                let evidence = match dataset {
                    Some(d) => evidence_samples(&DatasetManifest::load(d)?, *evidence_count, *evidence_seed)?,
                    None => Vec::new(),
                };
                let ctx = MiningContext {
                    run_path: run.clone(),
                    run: MiningRun::load(run)?,
                    evidence,
                };
                (BankManifest::load(bank)?, Some(ctx))
            }
            SessionSource::Noise { bank, .. } => (BankManifest::load(bank)?, None),
        };
        let mut session = Session {
            dir,
            meta,
            log,
            state,
            index,
            bank,
            mining,
        };
        session.sync_run()?;
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn meta(&self) -> &SessionMeta {
        &self.meta
    }

    pub fn history(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn state(&self) -> &BTreeMap<String, Effective> {
        &self.state
    }

    pub fn run(&self) -> Option<&MiningRun> {
        self.mining.as_ref().map(|m| &m.run)
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    /// Bring the run file in line with the log, e.g. after a crash between
    /// appending a decision and rewriting the run.
    fn sync_run(&mut self) -> Result<()> {
        let Some(ctx) = self.mining.as_mut() else {
            return Ok(());
        };
        let mut dirty = false;
        for (logo, eff) in &self.state {
            let want = eff.decision.as_decision();
            if let Some(r) = ctx.run.result(logo) {
                if r.decision != want || r.note != eff.note {
                    ctx.run.set_decision(logo, want, eff.note.clone())?;
                    dirty = true;
                }
            }
        }
        if dirty {
            ctx.run.save(&ctx.run_path)?;
        }
        Ok(())
    }

    fn decision_of(&self, logo_id: &str) -> ReviewDecision {
        self.state
            .get(logo_id)
            .map_or(ReviewDecision::Pending, |e| e.decision.as_decision())
    }

    /// Record a decision. The log entry is synced to disk before this
    /// returns; repeating the current effective decision appends nothing.
    pub fn submit_decision(&mut self, logo_id: &str, decision: Verdict, note: Option<String>) -> Result<Ack> {
        if !self.index.contains_key(logo_id) {
            return Err(Error::UnknownLogo(logo_id.to_string()));
        }
        let wanted = Effective { decision, note };
        if self.state.get(logo_id) == Some(&wanted) {
            self.sync_run()?;
            let seq = self
                .log
                .iter()
                .rev()
                .find(|e| e.logo_id == logo_id)
                .map_or(0, |e| e.seq);
            return Ok(Ack {
                session: self.meta.id.clone(),
                logo_id: logo_id.to_string(),
                decision,
                seq,
                duplicate: true,
            });
        }
        let entry = LogEntry {
            seq: self.log.last().map_or(1, |e| e.seq + 1),
            logo_id: logo_id.to_string(),
            decision,
            note: wanted.note.clone(),
            timestamp_ms: now_ms(),
        };
        fsutil::append_jsonl(&self.log_path(), &entry)?;
        let seq = entry.seq;
        self.log.push(entry);
        self.state.insert(logo_id.to_string(), wanted);
        self.sync_run()?;
        Ok(Ack {
            session: self.meta.id.clone(),
            logo_id: logo_id.to_string(),
            decision,
            seq,
            duplicate: false,
        })
    }

    pub fn progress(&self) -> SessionProgress {
        let total = self.meta.candidates.len();
        let mut accepted = 0;
        let mut rejected = 0;
        for c in &self.meta.candidates {
            match self.state.get(&c.logo_id).map(|e| e.decision) {
                Some(Verdict::Accept) => accepted += 1,
                Some(Verdict::Reject) => rejected += 1,
                None => {}
            }
        }
        let cursor = self
            .meta
            .candidates
            .iter()
            .position(|c| !self.state.contains_key(&c.logo_id))
            .unwrap_or(total);
        SessionProgress {
            total,
            decided: accepted + rejected,
            pending: total - accepted - rejected,
            accepted,
            rejected,
            cursor,
        }
    }

    fn card(&self, c: &Candidate) -> CandidateCard {
        let base = format!("/sessions/{}", self.meta.id);
        let evidence = self.mining.as_ref().map_or(0, |m| m.evidence.len());
        let state = self.state.get(&c.logo_id);
        CandidateCard {
            logo_id: c.logo_id.clone(),
            rank: c.rank,
            score: c.score,
            decision: self.decision_of(&c.logo_id),
            note: state.and_then(|e| e.note.clone()),
            logo_url: format!("{base}/logos/{}", c.logo_id),
            evidence_urls: (0..evidence)
                .map(|i| format!("{base}/evidence/{}/{i}", c.logo_id))
                .collect(),
        }
    }

    /// Pages of `PAGE_SIZE` cards in rank order; page 0 is the first.
    pub fn candidates(&self, page: usize, filter: PageFilter) -> CandidatePage {
        let matching: Vec<&Candidate> = self
            .meta
            .candidates
            .iter()
            .filter(|c| {
                let decided = self.state.contains_key(&c.logo_id);
                match filter {
                    PageFilter::Pending => !decided,
                    PageFilter::Decided => decided,
                    PageFilter::All => true,
                }
            })
            .collect();
        let cards = matching
            .iter()
            .skip(page.saturating_mul(PAGE_SIZE))
            .take(PAGE_SIZE)
            .map(|c| self.card(c))
            .collect();
        CandidatePage {
            page,
            page_size: PAGE_SIZE,
            filter,
            total: matching.len(),
            cards,
        }
    }

    pub fn logo_png(&self, logo_id: &str) -> Result<Vec<u8>> {
        if !self.index.contains_key(logo_id) {
            return Err(Error::UnknownLogo(logo_id.to_string()));
        }
        Ok(raster::encode_png(&self.bank.load_logo(logo_id)?.image))
    }

    pub fn evidence_png(&self, logo_id: &str, index: usize) -> Result<Vec<u8>> {
        if !self.index.contains_key(logo_id) {
            return Err(Error::UnknownLogo(logo_id.to_string()));
        }
        let ctx = self
            .mining
            .as_ref()
            .ok_or_else(|| Error::Input("noise sessions have no evidence images".into()))?;
        let sample = ctx
            .evidence
            .get(index)
            .ok_or_else(|| Error::Input(format!("evidence index {index} out of range")))?;
        let logo = self.bank.load_logo(logo_id)?;
        evidence_image(sample, &logo, ctx.run.k, &ctx.run.policy)
    }

    /// `{"id": is_logo}` for every labeled noise-sample item.
    pub fn noise_labels(&self) -> HashMap<String, bool> {
        self.state
            .iter()
            .map(|(id, e)| (id.clone(), e.decision == Verdict::Accept))
            .collect()
    }

    /// Finish a noise session: compute the estimate and store it in the
    /// bank manifest header.
    pub fn noise_estimate(&mut self) -> Result<NoiseEstimate> {
        let SessionSource::Noise {
            bank,
            sample_size,
            seed,
        } = &self.meta.source
        else {
            return Err(Error::Input("not a noise-labeling session".into()));
        };
        let (bank, sample_size, seed) = (bank.clone(), *sample_size, *seed);
        let labels = self.noise_labels();
        let est = estimate_noise(&mut self.bank, sample_size, seed, &labels)?;
        self.bank.save_header(&bank)?;
        Ok(est)
    }
}
