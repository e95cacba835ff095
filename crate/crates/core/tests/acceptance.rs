//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{imageops, Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spurlogo::apply::{apply_logos, placement_slots, Corner, Logo, PlacementPolicy};
use spurlogo::bank::{
    filter_top_fraction, filter_top_fraction_file, BankHeader, CurationPromptSet, ScoreRow, ScoreTable,
};
use spurlogo::dataset::Sample;
use spurlogo::decision::ThresholdConvention;
use spurlogo::evaluation::{compare_generic, eval_curve, select_threshold, AttackReport, EvalSetup, Task};
use spurlogo::gateway::{
    argmax, predict, BackendInfo, ColorRegionDetector, ConstantScorer, MarkerBase, MockMarkerScorer, PromptEnsemble,
    Scorer, SeededRandomScorer,
};
use spurlogo::miner::{mine, read_checkpoint, MiningOptions, MiningRun, TargetSpec};
use spurlogo::mitigation::{ten_crop_predict, MaskingConfig, Mitigation};
use spurlogo::raster::{self, Rect};
use spurlogo::synthetic::{marker_logo, noise_image, FixtureSpec, MARKER};
use spurlogo::Error;

type Check = Result<String, String>;
type CheckFn = fn() -> Check;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const SCORE_TOLERANCE: f64 = 1e-12;
const MINING_BUDGET: Duration = Duration::from_secs(30);

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn err(e: Error) -> String {
    e.to_string()
}

/// Target prediction rate of one logo at the upper-left corner, by direct
/// enumeration over the dataset.
fn brute_force_score(logo: &Logo, target: &TargetSpec, samples: &[Sample], scorer: &dyn Scorer) -> f64 {
    let policy = PlacementPolicy::default();
    let t = target.labels.iter().position(|l| *l == target.target).unwrap();
    let mut hits = 0usize;
    for s in samples {
        let img = apply_logos(&s.image, std::slice::from_ref(logo), 1, &policy).unwrap();
        let prompts: Vec<String> = target.labels.clone();
        let scores = scorer.score(&img, &target.labels, &prompts).unwrap();
        if argmax(&scores) == t {
            hits += 1;
        }
    }
    hits as f64 / samples.len() as f64
}

fn mining_oracle() -> Check {
    let spec = FixtureSpec::default();
    ensure!(
        spec.logos == 100 && spec.markers == 10 && spec.images == 50,
        "fixture size drifted"
    );
    let samples = spec.samples();
    let logos = spec.logos();
    let scorer = spec.scorer();
    let target = spec.target_spec().map_err(err)?;

    let start = Instant::now();
    let opts = MiningOptions {
        n: 100,
        ..MiningOptions::default()
    };
    let run = mine(&target, &samples, &logos, &scorer, &opts, None).map_err(err)?;
    let elapsed = start.elapsed();

    let top: BTreeSet<&str> = run.results[..10].iter().map(|r| r.logo_id.as_str()).collect();
    let markers: BTreeSet<String> = spec.marker_ids().into_iter().collect();
    ensure!(
        top.iter().all(|id| markers.contains(*id)),
        "top 10 is {top:?}, expected the marker logos"
    );

    let mut oracle: Vec<(String, f64)> = logos
        .iter()
        .map(|l| (l.id.clone(), brute_force_score(l, &target, &samples, &scorer)))
        .collect();
    oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ensure!(
        run.results.len() == oracle.len(),
        "ranked {} of {} logos",
        run.results.len(),
        oracle.len()
    );
    let mut worst = 0.0f64;
    for (r, (id, score)) in run.results.iter().zip(&oracle) {
        ensure!(
            &r.logo_id == id,
            "rank {} is {} but the oracle has {id}",
            r.rank,
            r.logo_id
        );
        worst = worst.max((r.score - score).abs());
    }
    ensure!(worst <= SCORE_TOLERANCE, "max score deviation {worst:e}");
    ensure!(elapsed < MINING_BUDGET, "mining took {elapsed:?}");
    Ok(format!(
        "top 10 = markers, max |Δ| = {worst:e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

/// Ten crops by hand: corner and center boxes of side floor(c·W)×floor(c·H)
/// on the image, then on its mirror.
fn hand_crops(image: &RgbaImage, c: f64) -> Vec<(bool, Rect)> {
    let (w, h) = image.dimensions();
    let cw = (c * f64::from(w) + 1e-9).floor() as u32;
    let ch = (c * f64::from(h) + 1e-9).floor() as u32;
    let origins = [
        (0, 0),
        (w - cw, 0),
        (0, h - ch),
        (w - cw, h - ch),
        ((w - cw) / 2, (h - ch) / 2),
    ];
    [false, true]
        .into_iter()
        .flat_map(|flip| origins.map(|(x, y)| (flip, Rect { x, y, w: cw, h: ch })))
        .collect()
}

fn hand_mean(scorer: &dyn Scorer, image: &RgbaImage, labels: &[String], c: f64) -> Vec<f64> {
    let mirrored = imageops::flip_horizontal(image);
    let ens = PromptEnsemble::bare();
    let mut sum = vec![0.0; labels.len()];
    for (flip, r) in hand_crops(image, c) {
        let src = if flip { &mirrored } else { image };
        let crop = imageops::crop_imm(src, r.x, r.y, r.w, r.h).to_image();
        for (a, s) in sum.iter_mut().zip(predict(scorer, &crop, &ens, labels).unwrap()) {
            *a += s;
        }
    }
    sum.into_iter().map(|s| s / 10.0).collect()
}

fn ten_crop_definition() -> Check {
    let labels = strings(&["harmless", "hateful"]);
    let constant = ConstantScorer::new(&["harmless", "hateful"], vec![0.3, -1.7]);
    let marker = MockMarkerScorer::new(
        &["harmless", "hateful"],
        0,
        MARKER,
        4,
        MarkerBase::Constant(vec![0.0, 1.0]),
    );
    let random = SeededRandomScorer::new(42);
    let backends: [&dyn Scorer; 3] = [&constant, &marker, &random];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ens = PromptEnsemble::bare();
    for i in 0..50 {
        let (w, h) = (rng.random_range(16..120), rng.random_range(16..120));
        let mut image = noise_image(w, h, rng.random());
        if i % 2 == 0 {
            let logo = marker_logo("m", 24, i, MARKER);
            image = apply_logos(&image, &[logo], rng.random_range(1..=4), &PlacementPolicy::default()).unwrap();
        }
        for c in [0.875, 0.6] {
            for b in backends {
                let got = ten_crop_predict(b, &image, &ens, &labels, c).map_err(err)?;
                let want = hand_mean(b, &image, &labels, c);
                ensure!(
                    got == want,
                    "{} on image {i} ({w}x{h}) c={c}: {got:?} != {want:?}",
                    b.info().identity()
                );
            }
        }
    }

    // A marker confined to the upper-left corner.
    let image = apply_logos(
        &noise_image(100, 100, 5),
        &[marker_logo("m", 40, 1, MARKER)],
        1,
        &PlacementPolicy::default(),
    )
    .map_err(err)?;
    let regions = raster::color_regions(&image, MARKER);
    ensure!(
        regions.len() == 1,
        "expected one marker region, found {}",
        regions.len()
    );
    let m_rect = regions[0];
    let mirrored_rect = Rect {
        x: 100 - m_rect.right(),
        ..m_rect
    };
    let c = 0.6;
    let m = hand_crops(&image, c)
        .into_iter()
        .filter(|(flip, r)| {
            let mr = if *flip { mirrored_rect } else { m_rect };
            let ix = r.right().min(mr.right()).saturating_sub(r.x.max(mr.x));
            let iy = r.bottom().min(mr.bottom()).saturating_sub(r.y.max(mr.y));
            ix >= 4 && iy >= 4
        })
        .count();
    let avg = ten_crop_predict(&marker, &image, &ens, &labels, c).map_err(err)?;
    ensure!(
        avg[0] == m as f64 / 10.0,
        "target score {} but m/10 = {}",
        avg[0],
        m as f64 / 10.0
    );
    Ok(format!(
        "50 images x 3 backends exact; UL marker at c=0.6 hits m={m} crops, score {}",
        avg[0]
    ))
}

fn random_logo(rng: &mut ChaCha8Rng) -> Logo {
    let (w, h) = (rng.random_range(1..80), rng.random_range(1..80));
    let alpha = rng.random_bool(0.5);
    let img = RgbaImage::from_fn(w, h, |_, _| {
        let [r, g, b, a]: [u8; 4] = rng.random();
        Rgba([r, g, b, if alpha { a } else { 255 }])
    });
    Logo::new("fuzz", img).unwrap()
}

fn placement_locality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut done, mut rejected, mut k0) = (0, 0, 0);
    while done < 1000 {
        let (w, h) = (rng.random_range(4..160), rng.random_range(4..160));
        let mut order = Corner::CLOCKWISE.to_vec();
        for i in (1..4).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let policy = PlacementPolicy {
            scale: rng.random_range(0.01..=0.5),
            margin: rng.random_range(0..8),
            order,
            ..PlacementPolicy::default()
        };
        let k = rng.random_range(0..=4);
        let n_logos = rng.random_range(1..=4);
        let logos: Vec<Logo> = (0..n_logos).map(|_| random_logo(&mut rng)).collect();
        let image = noise_image(w, h, rng.random());
        let slots = match placement_slots(w, h, k, &policy) {
            Ok(s) => s,
            Err(_) => {
                rejected += 1;
                continue;
            }
        };
        let out = apply_logos(&image, &logos, k, &policy).map_err(err)?;
        ensure!(out.dimensions() == image.dimensions(), "size changed");
        for (x, y, p) in out.enumerate_pixels() {
            if !slots.iter().any(|s| s.contains(x, y)) {
                ensure!(
                    p == image.get_pixel(x, y),
                    "pixel ({x},{y}) outside the boxes changed ({w}x{h}, k={k})"
                );
            }
        }
        if k == 0 {
            ensure!(out == image, "k = 0 changed the image");
            k0 += 1;
        }
        done += 1;
    }
    Ok(format!(
        "1000 tuples ({k0} with k=0), {rejected} infeasible policies skipped"
    ))
}

fn curation_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    // Coarse scores so ties at the cut are common.
    let rows: Vec<ScoreRow> = (0..n)
        .map(|i| {
            let aggregate = f64::from(rng.random_range(0u32..500)) / 8.0;
            ScoreRow {
                id: format!("w{:05}", (i * 7919) % n),
                scores: vec![aggregate],
                aggregate,
                locator: format!("{i}.png"),
            }
        })
        .collect();
    let table = ScoreTable { rows };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("scores.jsonl");
    std::fs::write(&path, spurlogo::fsutil::jsonl_bytes(&table.rows).map_err(err)?).map_err(|e| e.to_string())?;
    let header = || BankHeader::new(&CurationPromptSet::defaults(), "test");

    let mut sorted = table.rows.clone();
    sorted.sort_by(|a, b| b.aggregate.total_cmp(&a.aggregate).then_with(|| a.id.cmp(&b.id)));
    // ceil(f·n) for n = 10,000.
    for (f, expected) in [(0.001, 10), (0.01, 100), (0.1, 1000), (1.0, 10_000)] {
        let bank = filter_top_fraction(&table, f, header()).map_err(err)?;
        ensure!(
            bank.len() == expected,
            "f={f}: {} rows, expected {expected}",
            bank.len()
        );
        let got: Vec<&str> = bank.rows.iter().map(|r| r.id.as_str()).collect();
        let want: Vec<&str> = sorted[..expected].iter().map(|r| r.id.as_str()).collect();
        ensure!(got == want, "f={f}: selection differs from the full sort");
        let streamed = filter_top_fraction_file(&path, f, header()).map_err(err)?;
        ensure!(streamed.rows == bank.rows, "f={f}: streaming differs from in-memory");
    }
    Ok("10,000 rows; f in {0.001, 0.01, 0.1, 1.0} -> 10/100/1000/10000 rows, oracle and streaming agree".into())
}

fn attack_report(spec: &FixtureSpec, logos: &[Logo], mitigation: Mitigation) -> Result<AttackReport, String> {
    let target = spec.target_spec().map_err(err)?;
    let scorer = spec.scorer();
    let setup = EvalSetup {
        mitigation,
        ..EvalSetup::new(
            &target,
            Task::Binary {
                positive: "hateful".into(),
            },
            &scorer,
        )
    };
    eval_curve(&spec.samples(), logos, &setup).map_err(err)
}

fn degradation_shape() -> Check {
    let spec = FixtureSpec::default();
    let markers: Vec<Logo> = spec.logos().into_iter().take(spec.markers).collect();
    let report = attack_report(&spec, &markers, Mitigation::none())?;
    let samples = spec.samples();
    let base_rate =
        samples.iter().filter(|s| s.label == spec.labels[spec.target]).count() as f64 / samples.len() as f64;

    let tpr: Vec<f64> = report.rows.iter().map(|r| r.tpr.unwrap()).collect();
    let acc: Vec<f64> = report.rows.iter().map(|r| r.accuracy.unwrap()).collect();
    ensure!(tpr.windows(2).all(|w| w[1] <= w[0]), "TPR not non-increasing: {tpr:?}");
    ensure!(*tpr.last().unwrap() == 0.0, "TPR ends at {}", tpr.last().unwrap());
    ensure!(
        *acc.last().unwrap() == base_rate,
        "accuracy ends at {} not the base rate {base_rate}",
        acc.last().unwrap()
    );

    let detector = Arc::new(ColorRegionDetector {
        color: MARKER,
        confidence: 1.0,
    });
    let masked = attack_report(&spec, &markers, Mitigation::mask(detector, MaskingConfig::default()))?;
    let clean = &masked.rows[0];
    for row in &masked.rows {
        ensure!(
            (row.accuracy, row.tpr, row.target_rate, &row.precision)
                == (clean.accuracy, clean.tpr, clean.target_rate, &clean.precision),
            "masked k={} differs from k=0",
            row.k
        );
    }
    ensure!(
        clean == &report.rows[0],
        "masked clean row differs from the unmitigated one"
    );
    Ok(format!(
        "TPR {tpr:?}, accuracy {acc:?} (base rate {base_rate}); masking restores the k=0 row"
    ))
}

fn generic_contrast() -> Check {
    let spec = FixtureSpec::default();
    let all = spec.logos();
    let markers = &all[..spec.markers];
    let generic = &all[spec.markers..spec.markers * 2];
    let other_generic = &all[spec.markers * 2..spec.markers * 3];
    let mined = attack_report(&spec, markers, Mitigation::none())?;
    let plain = attack_report(&spec, generic, Mitigation::none())?;
    let plain2 = attack_report(&spec, other_generic, Mitigation::none())?;

    let cmp = compare_generic(&mined, &plain).map_err(err)?;
    let mut drops = BTreeMap::new();
    for d in cmp.rows.iter().filter(|d| d.k >= 1) {
        let delta = d.tpr.unwrap();
        ensure!(delta <= -0.5, "k={}: TPR delta {delta}", d.k);
        drops.insert(d.k, delta);
    }
    let flat = compare_generic(&plain2, &plain).map_err(err)?;
    for d in &flat.rows {
        ensure!(
            d.tpr == Some(0.0) && d.accuracy == Some(0.0) && d.target_rate == Some(0.0),
            "markerless sets differ at k={}",
            d.k
        );
    }
    let t0 = plain.rows[0].tpr;
    ensure!(
        plain.rows.iter().all(|r| r.tpr == t0),
        "markerless TPR curve is not flat"
    );
    Ok(format!("marker TPR deltas {drops:?}; markerless deltas all 0"))
}

fn exhaustive_threshold(scores: &[(f64, bool)], conv: ThresholdConvention) -> (usize, Vec<bool>) {
    let mut cuts = vec![f64::NEG_INFINITY];
    cuts.extend(scores.iter().map(|s| s.0));
    cuts.push(f64::INFINITY);
    let mut best: Option<(usize, f64)> = None;
    for &t in &cuts {
        let correct = scores.iter().filter(|(s, p)| conv.is_positive(*s, t) == *p).count();
        let better = match best {
            None => true,
            Some((c, bt)) => correct > c || (correct == c && t < bt),
        };
        if better {
            best = Some((correct, t));
        }
    }
    let (correct, t) = best.unwrap();
    (correct, scores.iter().map(|(s, _)| conv.is_positive(*s, t)).collect())
}

fn threshold_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 200 {
        let n = rng.random_range(2..120);
        let levels = rng.random_range(2..40);
        let scores: Vec<(f64, bool)> = (0..n)
            .map(|_| (f64::from(rng.random_range(0..levels)) / 7.0 - 2.0, rng.random_bool(0.4)))
            .collect();
        let pos = scores.iter().filter(|s| s.1).count();
        if pos == 0 || pos == n {
            continue;
        }
        for conv in [
            ThresholdConvention::HigherIsPositive,
            ThresholdConvention::LowerIsPositive,
        ] {
            let choice = select_threshold(&scores, conv).map_err(err)?;
            let (correct, partition) = exhaustive_threshold(&scores, conv);
            let ours: Vec<bool> = scores
                .iter()
                .map(|(s, _)| conv.is_positive(*s, choice.threshold))
                .collect();
            let ours_correct = ours.iter().zip(&scores).filter(|(a, (_, p))| *a == p).count();
            ensure!(
                ours_correct == correct,
                "set {checked}: {ours_correct} correct vs oracle {correct}"
            );
            ensure!(
                choice.accuracy == correct as f64 / n as f64,
                "set {checked}: reported accuracy {}",
                choice.accuracy
            );
            ensure!(
                ours == partition,
                "set {checked}: tie broken differently from the lowest optimal threshold"
            );
        }
        checked += 1;
    }
    Ok("200 random sets x 2 conventions match the exhaustive sweep".into())
}

/// Delegates to `inner` until `budget` calls have been made, then fails.
struct Flaky<S> {
    inner: S,
    calls: AtomicUsize,
    budget: usize,
}

impl<S: Scorer> Scorer for Flaky<S> {
    fn info(&self) -> &BackendInfo {
        self.inner.info()
    }

    fn score(&self, image: &RgbaImage, labels: &[String], prompts: &[String]) -> spurlogo::Result<Vec<f64>> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(Error::Backend("injected fault".into()));
        }
        self.inner.score(image, labels, prompts)
    }
}

fn resume_and_determinism() -> Check {
    let spec = FixtureSpec {
        images: 20,
        ..FixtureSpec::default()
    };
    let samples = spec.samples();
    let logos = spec.logos();
    let target = spec.target_spec().map_err(err)?;
    let opts = MiningOptions::default();
    let reference = mine(&target, &samples, &logos, &spec.scorer(), &opts, None).map_err(err)?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("run.ckpt.jsonl");
    let flaky = Flaky {
        inner: spec.scorer(),
        calls: AtomicUsize::new(0),
        budget: samples.len() * 37,
    };
    ensure!(
        mine(&target, &samples, &logos, &flaky, &opts, Some(&ckpt)).is_err(),
        "injected fault did not abort"
    );
    let saved = read_checkpoint(&ckpt, &reference.run_id).map_err(err)?.len();
    ensure!(
        saved > 0 && saved < logos.len(),
        "checkpoint holds {saved} of {} logos",
        logos.len()
    );

    let counting = Flaky {
        inner: spec.scorer(),
        calls: AtomicUsize::new(0),
        budget: usize::MAX,
    };
    let resumed = mine(&target, &samples, &logos, &counting, &opts, Some(&ckpt)).map_err(err)?;
    let calls = counting.calls.load(Ordering::SeqCst);
    ensure!(
        calls == (logos.len() - saved) * samples.len(),
        "resume made {calls} scorer calls"
    );
    ensure!(resumed == reference, "resumed run differs from the uninterrupted run");
    ensure!(
        serde_json::to_vec(&resumed).unwrap() == serde_json::to_vec(&reference).unwrap(),
        "serialized runs differ"
    );
    let reloaded = {
        let p = dir.path().join("run.json");
        resumed.save(&p).map_err(err)?;
        MiningRun::load(&p).map_err(err)?
    };
    ensure!(reloaded == reference, "saved run does not round-trip");

    let chosen: Vec<Logo> = reference.results[..4]
        .iter()
        .map(|r| logos.iter().find(|l| l.id == r.logo_id).unwrap().clone())
        .collect();
    let a = attack_report(&spec, &chosen, Mitigation::none())?;
    let b = attack_report(&spec, &chosen, Mitigation::none())?;
    ensure!(a.config_hash == b.config_hash, "config hashes differ");
    ensure!(a.to_json() == b.to_json(), "report JSON differs between identical runs");
    Ok(format!(
        "fault after {saved} logos; resume rescored {} logos and matched; reports byte-identical",
        logos.len() - saved
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, CheckFn); 8] = [
        ("mining_matches_brute_force", mining_oracle),
        ("ten_crop_is_the_crop_mean", ten_crop_definition),
        ("placement_is_local", placement_locality),
        ("curation_cut_is_exact", curation_exactness),
        ("attack_degrades_and_masking_restores", degradation_shape),
        ("mined_vs_generic_contrast", generic_contrast),
        ("threshold_matches_exhaustive_sweep", threshold_oracle),
        ("resume_and_byte_determinism", resume_and_determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
