//! Accuracy and TPR as 0..=4 mined logos are pasted, against a randomly
//! drawn generic set, with and without ten-crop. Writes an SVG of the curves.

use spurlogo::evaluation::{compare_generic, eval_curve, EvalSetup, Task};
use spurlogo::miner::{mine, sample_generic_baseline, MiningOptions};
use spurlogo::mitigation::Mitigation;
use spurlogo::plot::{render_svg, report_series};
use spurlogo::synthetic::FixtureSpec;

fn main() -> spurlogo::Result<()> {
    let spec = FixtureSpec::default();
    let samples = spec.samples();
    let bank = spec.logos();
    let scorer = spec.scorer();
    let target = spec.target_spec()?;

    let run = mine(
        &target,
        &samples,
        &bank,
        &scorer,
        &MiningOptions {
            n: 10,
            ..Default::default()
        },
        None,
    )?;
    let pick = |ids: &[String]| -> Vec<_> {
        ids.iter()
            .map(|id| bank.iter().find(|l| &l.id == id).unwrap().clone())
            .collect()
    };
    let mined = pick(&run.results.iter().map(|r| r.logo_id.clone()).collect::<Vec<_>>());
    let generic = pick(&sample_generic_baseline(&bank[spec.markers..], 10, 3)?);

    let task = Task::Binary {
        positive: "hateful".into(),
    };
    let setup = EvalSetup::new(&target, task.clone(), &scorer);
    let mut mined_report = eval_curve(&samples, &mined, &setup)?;
    let generic_report = eval_curve(&samples, &generic, &setup)?;

    println!(" k  accuracy  tpr   (generic tpr)");
    for (m, g) in mined_report.rows.iter().zip(&generic_report.rows) {
        println!(
            "{:>2}  {:>7.3}  {:.3}  ({:.3})",
            m.k,
            m.accuracy.unwrap(),
            m.tpr.unwrap(),
            g.tpr.unwrap()
        );
    }
    for d in compare_generic(&mined_report, &generic_report)?.rows {
        println!("k={} tpr delta {:+.3}", d.k, d.tpr.unwrap());
    }

    let cropped = EvalSetup {
        mitigation: Mitigation::ten_crop(0.875),
        ..EvalSetup::new(&target, task, &scorer)
    };
    let cropped_report = eval_curve(&samples, &mined, &cropped)?;
    println!(
        "ten-crop tpr at k=1: {:.3}",
        cropped_report.row(1).unwrap().tpr.unwrap()
    );

    mined_report.attach_generic(&generic_report)?;
    let out = std::env::temp_dir().join("attack_curve.svg");
    std::fs::write(&out, render_svg("mined vs generic", &report_series(&mined_report))).expect("write svg");
    println!("wrote {}", out.display());
    Ok(())
}
