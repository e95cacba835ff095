//! Rank a logo bank by how strongly each logo pushes a classifier towards a
//! target label, with a resumable checkpoint.

use spurlogo::miner::{mine, MiningOptions, ScoringMode};
use spurlogo::synthetic::FixtureSpec;

fn main() -> spurlogo::Result<()> {
    let spec = FixtureSpec::default();
    let samples = spec.samples();
    let logos = spec.logos();
    let scorer = spec.scorer();
    let target = spec.target_spec()?;

    let dir = tempfile::tempdir().expect("tempdir");
    let checkpoint = dir.path().join("run.ckpt.jsonl");
    let opts = MiningOptions {
        n: 15,
        ..MiningOptions::default()
    };
    let run = mine(&target, &samples, &logos, &scorer, &opts, Some(&checkpoint))?;
    println!("run {} over {} logos", run.run_id, logos.len());
    for r in &run.results {
        println!("{:>2}. {}  {:.3}", r.rank, r.logo_id, r.score);
    }

    // A second call finds every score in the checkpoint and recomputes nothing.
    let again = mine(&target, &samples, &logos, &scorer, &opts, Some(&checkpoint))?;
    assert_eq!(again.results, run.results);

    let soft = MiningOptions {
        mode: ScoringMode::Soft,
        ..opts
    };
    let soft_run = mine(&target, &samples, &logos, &scorer, &soft, None)?;
    println!(
        "soft top: {} {:.3}",
        soft_run.results[0].logo_id, soft_run.results[0].score
    );
    Ok(())
}
