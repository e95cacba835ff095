//! Human review of mined candidates: page through pending cards, record
//! accept/reject decisions in an append-only log, reopen, and export the
//! accepted logos. Also runs a bank noise-labeling session.

use spurlogo::miner::{export_curated, mine, MiningOptions};
use spurlogo::review::{PageFilter, ReviewStore, Verdict};
use spurlogo::synthetic::{write_fixture, FixtureSpec};
use spurlogo::{
    bank::BankManifest,
    dataset::{decode_all, DatasetManifest},
};

fn main() -> spurlogo::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = FixtureSpec::default();
    let fx = write_fixture(dir.path(), &spec)?;

    let bank = BankManifest::load(&fx.bank)?;
    let samples = decode_all(&DatasetManifest::load(&fx.dataset)?, 0.1)?;
    let run = mine(
        &spec.target_spec()?,
        &samples,
        &bank,
        &spec.scorer(),
        &MiningOptions {
            n: 15,
            ..Default::default()
        },
        None,
    )?;
    let run_path = dir.path().join("run.json");
    run.save(&run_path)?;

    let store = ReviewStore::open(dir.path().join("reviews"))?;
    let mut session = store.create_mining("first-pass", &run_path, &fx.bank, Some(&fx.dataset), 0, 4)?;
    let page = session.candidates(0, PageFilter::Pending);
    println!("page 0: {} of {} pending", page.cards.len(), page.total);
    for card in &page.cards {
        let verdict = if fx.marker_ids.contains(&card.logo_id) {
            Verdict::Accept
        } else {
            Verdict::Reject
        };
        session.submit_decision(&card.logo_id, verdict, None)?;
    }
    // Changing one's mind appends a new entry; the latest wins.
    session.submit_decision("logo000", Verdict::Reject, Some("looks off".into()))?;
    session.submit_decision("logo000", Verdict::Accept, None)?;
    println!("{:?}", session.progress());

    let reopened = store.session("first-pass")?;
    println!("history has {} entries", reopened.history().len());
    let evidence = reopened.evidence_png("logo000", 0)?;
    println!("evidence image: {} bytes of PNG", evidence.len());
    println!("exported: {:?}", export_curated(reopened.run().unwrap(), true)?);

    let mut noise = store.create_noise("noise", &fx.bank, 20, 5)?;
    let ids: Vec<String> = noise.meta().candidates.iter().map(|c| c.logo_id.clone()).collect();
    for (i, id) in ids.iter().enumerate() {
        let verdict = if i == 0 { Verdict::Reject } else { Verdict::Accept };
        noise.submit_decision(id, verdict, None)?;
    }
    let est = noise.noise_estimate()?;
    println!(
        "noise rate {:.2}; recorded in the bank header: {}",
        est.noise_rate,
        BankManifest::load(&fx.bank)?.header.noise.is_some()
    );
    Ok(())
}
