//! Score a mixed source of flat logos and noisy photos against logo
//! prompts, keep the top fraction, then estimate the bank's noise rate from
//! a labeled sample.

use std::collections::HashMap;

use spurlogo::bank::{
    estimate_noise, filter_top_fraction, score_source, BankHeader, CurationPromptSet, CurationSource, ScoringOptions,
};
use spurlogo::gateway::Similarity;
use spurlogo::synthetic::{flatness_similarity, write_fixture, FixtureSpec};

fn main() -> spurlogo::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = FixtureSpec {
        images: 4,
        ..FixtureSpec::default()
    };
    let fixture = write_fixture(dir.path(), &spec)?;

    let source = CurationSource::load(&fixture.source)?;
    let prompts = CurationPromptSet::defaults();
    let sim = flatness_similarity();
    let (table, stats) = score_source(&source, &prompts, &sim, ScoringOptions::default())?;
    println!("scored {} of {} entries", stats.scored, stats.total);

    for fraction in [0.01, 0.1, 0.5] {
        let bank = filter_top_fraction(&table, fraction, BankHeader::new(&prompts, sim.identity()))?;
        let logos = bank.ids().iter().filter(|id| id.starts_with("logo")).count();
        println!("top {fraction:>4}: kept {:>3}, {logos} of them logos", bank.len());
    }

    // Pretend a reviewer flagged every third sampled item as not a logo.
    let mut bank = filter_top_fraction(&table, 0.5, BankHeader::new(&prompts, sim.identity()))?;
    let sample = spurlogo::bank::noise_sample(&bank, 30, 1)?;
    let labels: HashMap<String, bool> = sample
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % 3 != 0))
        .collect();
    let est = estimate_noise(&mut bank, 30, 1, &labels)?;
    println!(
        "noise rate {:.3} ({} of {})",
        est.noise_rate, est.non_logo_count, est.sample_size
    );
    Ok(())
}
