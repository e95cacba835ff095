//! Command-line front end. Every command prints a JSON summary on stdout;
//! failures print `{"error": kind, "message": ..}` on stderr and exit
//! nonzero.

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::apply::{build_attacked_dataset, Logo};
use crate::bank::{
    self, filter_top_fraction_file, noise_sample, score_source_to_file, BankHeader, BankManifest, CurationSource,
};
use crate::config::{TaskKind, ToolkitConfig};
use crate::dataset::{decode_all, DatasetManifest, Sample};
use crate::decision::{DecisionRule, ThresholdConvention};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, compare_generic, eval_curve, select_threshold, AdjectivePairList, AttackReport, EvalSetup, Task,
};
use crate::fsutil;
use crate::gateway::{predict, PromptEnsemble};
use crate::miner::{self, export_curated, mine, MiningOptions, MiningRun, TargetSpec, MAX_SKIP_FRACTION};
use crate::mitigation::mask_logos;
use crate::plot;
use crate::raster;
use crate::review::{http, ReviewStore};

#[derive(Debug, Parser)]
#[command(name = "spurlogo", version, about = "Mine, apply and mitigate spurious logos")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set mining.n=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a web-scale source and keep the top fraction as a logo bank.
    Curate(CurateArgs),
    /// Draw the noise-labeling sample from a bank.
    NoiseSample(NoiseSampleArgs),
    /// Record a noise estimate from `{"id": is_logo}` labels.
    Noise(NoiseArgs),
    /// Rank bank logos by spurious score for a target.
    Mine(MineArgs),
    /// Create a review session for a mining run or a noise sample.
    ReviewInit(ReviewInitArgs),
    /// Serve review sessions over HTTP.
    ReviewServe(ReviewServeArgs),
    /// Accepted logo ids of a reviewed run, in rank order.
    Export(ExportArgs),
    /// Random bank logos as a control condition.
    SampleGeneric(SampleGenericArgs),
    /// Write a dataset with logos pasted into every image.
    Attack(AttackArgs),
    /// Metric curves against the number of pasted logos.
    Evaluate(EvaluateArgs),
    /// Per-k differences between a mined and a generic report.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub source: PathBuf,
    /// Bank manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Where the full score table goes; next to the bank by default.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub top_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct NoiseSampleArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Target dataset; defaults to the one named in the target file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long = "N", alias = "n")]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Resume file; `<out>.ckpt.jsonl` by default.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReviewInitArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub bank: PathBuf,
    /// Mining run to review; without it a noise-labeling session is made.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Evidence dataset; defaults to the run target's dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReviewServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Treat pending candidates as rejected instead of failing.
    #[arg(long)]
    pub allow_pending: bool,
}

#[derive(Debug, Args)]
pub struct SampleGenericArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report overlap with this run's accepted logos.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LogoSelection {
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Use the accepted logos of a reviewed run.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// JSON list of bank logo ids (e.g. from `export` or `sample-generic`).
    #[arg(long)]
    pub logos: Option<PathBuf>,
    #[arg(long)]
    pub allow_pending: bool,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub logos: LogoSelection,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each attacked image after logo masking.
    #[arg(long)]
    pub mask_debug: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Target spec; optional for the adjective task.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub logos: LogoSelection,
    /// Only these k values, e.g. `--k 0`.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Validation set for choosing a binary threshold.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub mined: PathBuf,
    pub generic: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SVG with both curve sets.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

fn load_samples(manifest: &Path, cap: Option<usize>, seed: u64) -> Result<Vec<Sample>> {
    let m = DatasetManifest::load(manifest)?.capped(cap, seed);
    decode_all(&m, MAX_SKIP_FRACTION)
}

fn dataset_for(target: &TargetSpec, explicit: Option<&Path>) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| target.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --dataset or name one in the target file".into()))
}

/// Logos picked by `sel`, in order; empty when nothing was selected.
fn select_logos(sel: &LogoSelection) -> Result<Vec<Logo>> {
    let ids: Vec<String> = match (&sel.run, &sel.logos) {
        (Some(_), Some(_)) => return Err(Error::Config("pass either --run or --logos, not both".into())),
        (Some(run), None) => export_curated(&MiningRun::load(run)?, sel.allow_pending)?,
        (None, Some(list)) => fsutil::read_json(list)?,
        (None, None) => return Ok(Vec::new()),
    };
    let bank_path = sel
        .bank
        .as_ref()
        .ok_or_else(|| Error::Config("--bank is needed to load logo images".into()))?;
    let bank = BankManifest::load(bank_path)?;
    ids.iter().map(|id| bank.load_logo(id)).collect()
}

fn curate(cfg: &ToolkitConfig, a: &CurateArgs) -> Result<Value> {
    let source = CurationSource::load(&a.source)?;
    let prompts = cfg.prompts()?;
    let sim = cfg.build_similarity()?;
    let scores = a.scores.clone().unwrap_or_else(|| a.out.with_extension("scores.jsonl"));
    let stats = score_source_to_file(&source, &prompts, sim.as_ref(), cfg.scoring_options(), &scores)?;
    let mut header = BankHeader::new(&prompts, sim.identity());
    header.config = Some(cfg.echo());
    let fraction = a.top_fraction.unwrap_or(cfg.curation.top_fraction);
    let bank = filter_top_fraction_file(&scores, fraction, header)?;
    bank.save(&a.out)?;
    Ok(json!({
        "bank": a.out,
        "scores": scores,
        "total": stats.total,
        "scored": stats.scored,
        "unresolved": stats.unresolved,
        "selected": bank.len(),
        "config_hash": cfg.hash(),
    }))
}

fn noise_sample_cmd(cfg: &ToolkitConfig, a: &NoiseSampleArgs) -> Result<Value> {
    let bank = BankManifest::load(&a.bank)?;
    let size = a.size.unwrap_or(cfg.curation.noise_sample);
    let seed = a.seed.unwrap_or(cfg.curation.noise_seed);
    Ok(json!({"seed": seed, "ids": noise_sample(&bank, size, seed)?}))
}

fn noise_cmd(cfg: &ToolkitConfig, a: &NoiseArgs) -> Result<Value> {
    let mut bank = BankManifest::load(&a.bank)?;
    let labels = bank::load_noise_labels(&a.labels)?;
    let size = a.size.unwrap_or(cfg.curation.noise_sample);
    let seed = a.seed.unwrap_or(cfg.curation.noise_seed);
    let est = bank::estimate_noise(&mut bank, size, seed, &labels)?;
    bank.save_header(&a.bank)?;
    Ok(serde_json::to_value(est).expect("serializable"))
}

fn mine_cmd(cfg: &ToolkitConfig, a: &MineArgs) -> Result<Value> {
    let target = TargetSpec::load(&a.target)?;
    let samples = load_samples(
        &dataset_for(&target, a.dataset.as_deref())?,
        cfg.mining.dataset_cap,
        cfg.mining.cap_seed,
    )?;
    let bank = BankManifest::load(&a.bank)?;
    let scorer = cfg.build_scorer()?;
    let opts = MiningOptions {
        n: a.n.unwrap_or(cfg.mining.n),
        k: a.k.unwrap_or(cfg.mining.k),
        policy: cfg.mining.policy.clone(),
        mode: cfg.mining.mode,
        dataset_cap: cfg.mining.dataset_cap,
        workers: cfg.mining.workers,
    };
    let ckpt = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| a.out.with_extension("ckpt.jsonl"));
    let mut run = mine(&target, &samples, &bank, scorer.as_ref(), &opts, Some(&ckpt))?;
    run.config = Some(cfg.echo());
    run.save(&a.out)?;
    Ok(json!({
        "run": a.out,
        "run_id": run.run_id,
        "bank_size": run.bank_size,
        "dataset_size": run.dataset_size,
        "top": run.results.iter().take(10).map(|r| json!({"logo_id": r.logo_id, "score": r.score})).collect::<Vec<_>>(),
        "config_hash": cfg.hash(),
    }))
}

fn review_init(cfg: &ToolkitConfig, a: &ReviewInitArgs) -> Result<Value> {
    let store = ReviewStore::open(a.root.clone().unwrap_or_else(|| cfg.review.root.clone()))?;
    let session = match &a.run {
        Some(run) => store.create_mining(
            &a.id,
            run,
            &a.bank,
            a.dataset.as_deref(),
            cfg.review.evidence_seed,
            cfg.review.evidence,
        )?,
        None => store.create_noise(&a.id, &a.bank, cfg.curation.noise_sample, cfg.curation.noise_seed)?,
    };
    Ok(json!({
        "session": session.id(),
        "root": store.root(),
        "progress": session.progress(),
    }))
}

fn review_serve(cfg: &ToolkitConfig, a: &ReviewServeArgs) -> Result<Value> {
    let bind = a.bind.clone().unwrap_or_else(|| cfg.review.bind.clone());
    let addr: SocketAddr = bind
        .parse()
        .map_err(|e| Error::Config(format!("bad bind address `{bind}`: {e}")))?;
    let store = ReviewStore::open(a.root.clone().unwrap_or_else(|| cfg.review.root.clone()))?;
    let state = http::ServerState::new(store)
        .with_token(cfg.review_token())
        .with_ui_dir(cfg.review.ui_dir.clone());
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Backend(format!("runtime: {e}")))?;
    rt.block_on(http::serve(addr, state))?;
    Ok(json!({"stopped": true}))
}

fn export_cmd(a: &ExportArgs) -> Result<Value> {
    Ok(json!(export_curated(&MiningRun::load(&a.run)?, a.allow_pending)?))
}

fn sample_generic(cfg: &ToolkitConfig, a: &SampleGenericArgs) -> Result<Value> {
    let bank = BankManifest::load(&a.bank)?;
    let seed = a.seed.unwrap_or(cfg.mining.generic_seed);
    let ids = miner::sample_generic_baseline(&bank, a.count, seed)?;
    if let Some(out) = &a.out {
        fsutil::write_json_atomic(out, &ids)?;
    }
    let overlap = match &a.run {
        Some(run) => miner::baseline_overlap(&ids, &MiningRun::load(run)?),
        None => Vec::new(),
    };
    Ok(json!({"seed": seed, "ids": ids, "overlap_with_accepted": overlap}))
}

fn attack(cfg: &ToolkitConfig, a: &AttackArgs) -> Result<Value> {
    let logos = select_logos(&a.logos)?;
    if logos.is_empty() {
        return Err(Error::Input("attack needs logos (--run or --logos with --bank)".into()));
    }
    let source = DatasetManifest::load(&a.dataset)?;
    let policy = &cfg.mining.policy;
    let attacked = build_attacked_dataset(&source, &logos, a.k, policy)?;
    let manifest = attacked.materialize(&a.out)?;
    let manifest_path = a.out.join("dataset.jsonl");
    manifest.save(&manifest_path)?;
    let mut masked = 0;
    if a.mask_debug {
        let mitigation = cfg.build_mitigation()?;
        let detector = cfg
            .build_detector()?
            .ok_or_else(|| Error::Config("--mask-debug needs a [detector] block".into()))?;
        for e in &manifest.entries {
            let img = manifest.load_image(e)?;
            let out = mask_logos(&img, detector.as_ref(), &mitigation.masking)?;
            let path = a.out.join(format!("{}.masked.png", e.id));
            fsutil::write_atomic(&path, &raster::encode_png(&out))?;
            masked += 1;
        }
    }
    let meta = json!({
        "source": a.dataset,
        "logos": logos.iter().map(|l| &l.id).collect::<Vec<_>>(),
        "k": a.k,
        "policy": policy,
        "config": cfg.echo(),
    });
    fsutil::write_json_atomic(&a.out.join("attack.json"), &meta)?;
    Ok(json!({"dataset": manifest_path, "images": manifest.len(), "masked_debug": masked}))
}

fn binary_positive(cfg: &ToolkitConfig) -> Result<String> {
    cfg.evaluation
        .positive
        .clone()
        .ok_or_else(|| Error::Config("binary task needs evaluation.positive".into()))
}

/// Pick a threshold on the positive label's raw score over a validation set.
fn threshold_from_validation(
    cfg: &ToolkitConfig,
    target: &TargetSpec,
    validation: &Path,
) -> Result<(DecisionRule, evaluation::ThresholdChoice)> {
    let positive = binary_positive(cfg)?;
    let p = target
        .labels
        .iter()
        .position(|l| *l == positive)
        .ok_or_else(|| Error::Config(format!("positive label `{positive}` not in target labels")))?;
    let scorer = cfg.build_scorer()?;
    let samples = decode_all(&DatasetManifest::load(validation)?, MAX_SKIP_FRACTION)?;
    let scored = samples
        .iter()
        .map(|s| {
            let v = predict(scorer.as_ref(), &s.image, &target.templates, &target.labels)?;
            Ok((v[p], s.label == positive))
        })
        .collect::<Result<Vec<_>>>()?;
    let choice = select_threshold(&scored, ThresholdConvention::HigherIsPositive)?;
    let rule = DecisionRule::Threshold {
        positive,
        threshold: choice.threshold,
        convention: choice.convention,
    };
    Ok((rule, choice))
}

fn evaluate_cmd(cfg: &ToolkitConfig, a: &EvaluateArgs) -> Result<Value> {
    let logos = select_logos(&a.logos)?;
    let scorer = cfg.build_scorer()?;
    let pairs;
    let (mut target, task) = match cfg.evaluation.task {
        TaskKind::Adjective => {
            pairs = match &cfg.evaluation.adjective_pairs {
                Some(p) => AdjectivePairList::load(p)?,
                None => AdjectivePairList::builtin(),
            };
            let target = match &a.target {
                Some(t) => TargetSpec::load(t)?,
                None => {
                    let first = &pairs.pairs[0];
                    TargetSpec::new(
                        &first.negative,
                        &[&first.negative, &first.positive],
                        PromptEnsemble::people(),
                    )?
                }
            };
            (target, Task::Adjective { pairs: pairs.clone() })
        }
        kind => {
            let path = a
                .target
                .as_ref()
                .ok_or_else(|| Error::Config("--target is required for this task".into()))?;
            let task = if kind == TaskKind::Binary {
                Task::Binary {
                    positive: binary_positive(cfg)?,
                }
            } else {
                Task::Multiclass
            };
            (TargetSpec::load(path)?, task)
        }
    };
    let mut threshold = None;
    if let Some(v) = &a.validation {
        let (rule, choice) = threshold_from_validation(cfg, &target, v)?;
        target = target.with_decision(rule)?;
        threshold = Some(choice);
    }
    let samples = load_samples(&dataset_for(&target, a.dataset.as_deref())?, None, 0)?;
    let mut setup = EvalSetup::new(&target, task, scorer.as_ref());
    setup.policy = cfg.mining.policy.clone();
    setup.assignment = cfg.evaluation.assignment;
    setup.mitigation = cfg.build_mitigation()?;
    setup.k_values = if a.k.is_empty() {
        cfg.evaluation.k_values.clone()
    } else {
        a.k.clone()
    };
    setup.threshold = threshold;
    setup.config = Some(cfg.echo());
    let report = eval_curve(&samples, &logos, &setup)?;
    report.save(&a.out)?;
    let mut plot_path = None;
    if cfg.evaluation.plot {
        let p = a.out.with_extension("svg");
        let title = format!("{} / {}", report.meta.target, report.meta.mitigation.mode);
        fsutil::write_atomic(&p, plot::render_svg(&title, &plot::report_series(&report)).as_bytes())?;
        plot_path = Some(p);
    }
    Ok(json!({
        "report": a.out,
        "plot": plot_path,
        "config_hash": report.config_hash,
        "rows": report.rows,
    }))
}

fn compare_cmd(a: &CompareArgs) -> Result<Value> {
    let mut mined = AttackReport::load(&a.mined)?;
    let generic = AttackReport::load(&a.generic)?;
    let cmp = compare_generic(&mined, &generic)?;
    let value = serde_json::to_value(&cmp).expect("serializable");
    if let Some(out) = &a.out {
        fsutil::write_json_atomic(out, &cmp)?;
    }
    if let Some(p) = &a.plot {
        mined.attach_generic(&generic)?;
        let title = format!("{}: mined vs generic", mined.meta.target);
        fsutil::write_atomic(p, plot::render_svg(&title, &plot::report_series(&mined)).as_bytes())?;
    }
    Ok(value)
}

/// Run a parsed command line.
pub fn run(cli: &Cli) -> Result<Value> {
    let cfg = ToolkitConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Curate(a) => curate(&cfg, a),
        Command::NoiseSample(a) => noise_sample_cmd(&cfg, a),
        Command::Noise(a) => noise_cmd(&cfg, a),
        Command::Mine(a) => mine_cmd(&cfg, a),
        Command::ReviewInit(a) => review_init(&cfg, a),
        Command::ReviewServe(a) => review_serve(&cfg, a),
        Command::Export(a) => export_cmd(a),
        Command::SampleGeneric(a) => sample_generic(&cfg, a),
        Command::Attack(a) => attack(&cfg, a),
        Command::Evaluate(a) => evaluate_cmd(&cfg, a),
        Command::Compare(a) => compare_cmd(a),
    }
}

pub fn error_json(e: &Error) -> Value {
    let mut v = json!({"error": e.kind(), "message": e.to_string()});
    if let Error::IncompleteLabeling { missing } = e {
        v["missing"] = json!(missing);
    }
    v
}

/// Process entry point: parse `std::env::args`, run, report.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            let mut out = std::io::stdout().lock();
            let _ = serde_json::to_writer_pretty(&mut out, &v);
            let _ = writeln!(out);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
