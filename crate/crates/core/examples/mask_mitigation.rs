//! Detect logos and paint them over before classification. A detector
//! failure passes the image through unmasked unless fail-open is off.

use std::sync::Arc;

use spurlogo::apply::{apply_logos, PlacementPolicy};
use spurlogo::gateway::{
    predict_label, ColorRegionDetector, MarkerBase, MockMarkerScorer, PromptEnsemble, UnavailableDetector,
};
use spurlogo::mitigation::{mask_logos, MaskingConfig, Mitigation};
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
    let detector = Arc::new(ColorRegionDetector {
        color: MARKER,
        confidence: 0.9,
    });

    let image = noise_image(128, 128, 4);
    let logo = marker_logo("marker", 32, 1, MARKER);
    let attacked = apply_logos(&image, std::slice::from_ref(&logo), 2, &PlacementPolicy::default())?;
    println!("attacked: {}", predict_label(&scorer, &attacked, &ensemble, &labels)?);

    let masking = MaskingConfig::default();
    let masked = mask_logos(&attacked, detector.as_ref(), &masking)?;
    println!("masked:   {}", predict_label(&scorer, &masked, &ensemble, &labels)?);

    let mitigation = Mitigation::mask(detector, masking.clone());
    let scores = mitigation.predict(&scorer, &attacked, &ensemble, &labels)?;
    println!(
        "via Mitigation: {scores:?} ({})",
        serde_json::to_string(&mitigation.describe()).unwrap()
    );

    let passthrough = mask_logos(&attacked, &UnavailableDetector, &masking)?;
    println!("fail-open leaves the image unchanged: {}", passthrough == attacked);
    let strict = MaskingConfig {
        fail_open: false,
        ..masking
    };
    println!(
        "fail-closed: {}",
        mask_logos(&attacked, &UnavailableDetector, &strict).unwrap_err()
    );
    Ok(())
}
