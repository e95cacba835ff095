//! Choose a binary decision threshold on validation scores, then classify
//! with it.

use spurlogo::decision::{DecisionRule, ThresholdConvention};
use spurlogo::evaluation::select_threshold;

fn main() -> spurlogo::Result<()> {
    let validation = [
        (0.91, true),
        (0.72, true),
        (0.64, false),
        (0.55, true),
        (0.31, false),
        (0.12, false),
    ];
    let choice = select_threshold(&validation, ThresholdConvention::HigherIsPositive)?;
    println!(
        "threshold {} with validation accuracy {:.3} ({})",
        choice.threshold, choice.accuracy, choice.note
    );

    let rule = DecisionRule::Threshold {
        positive: "hateful".into(),
        threshold: choice.threshold,
        convention: choice.convention,
    };
    let labels: Vec<String> = vec!["harmless".into(), "hateful".into()];
    for s in [0.2, 0.6, 0.8] {
        let idx = rule.decide(&[1.0 - s, s], &labels);
        println!("score {s}: {}", labels[idx]);
    }

    // Scores where lower means positive, e.g. a distance.
    let distances: Vec<(f64, bool)> = validation.iter().map(|&(s, p)| (1.0 - s, p)).collect();
    let flipped = select_threshold(&distances, ThresholdConvention::LowerIsPositive)?;
    println!(
        "flipped convention: threshold {} accuracy {:.3}",
        flipped.threshold, flipped.accuracy
    );
    Ok(())
}
