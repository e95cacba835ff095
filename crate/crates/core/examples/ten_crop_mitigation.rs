//! Average predictions over ten crops (four corners and the center, on the
//! image and its mirror) to dilute a logo sitting in one corner.

use spurlogo::apply::{apply_logos, PlacementPolicy};
use spurlogo::gateway::{predict, MarkerBase, MockMarkerScorer, PromptEnsemble};
use spurlogo::mitigation::{ten_crop, Mitigation};
use spurlogo::synthetic::{marker_logo, noise_image, MARKER};

fn main() -> spurlogo::Result<()> {
    let labels: Vec<String> = vec!["harmless".into(), "hateful".into()];
    let scorer = MockMarkerScorer::new(
        &["harmless", "hateful"],
        0,
        MARKER,
        4,
        MarkerBase::Constant(vec![0.0, 1.0]),
    );
    let ensemble = PromptEnsemble::bare();

    let image = noise_image(160, 160, 9);
    let logo = marker_logo("marker", 64, 1, MARKER);
    let attacked = apply_logos(&image, std::slice::from_ref(&logo), 1, &PlacementPolicy::default())?;

    println!("plain:     {:?}", predict(&scorer, &attacked, &ensemble, &labels)?);
    for fraction in [0.875, 0.6] {
        let crops = ten_crop(&attacked, fraction)?;
        let hits = crops.crops.iter().filter(|c| scorer.marker_present(&c.image)).count();
        let scores = Mitigation::ten_crop(fraction).predict(&scorer, &attacked, &ensemble, &labels)?;
        println!("c={fraction}: marker in {hits}/10 crops, mean {scores:?}");
    }
    Ok(())
}
