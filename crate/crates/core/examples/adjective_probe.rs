//! How often faces are described with the negative adjective of each pair,
//! by a contrastive scorer and by a chat model answering numbered options.

use image::RgbaImage;
use spurlogo::apply::PlacementPolicy;
use spurlogo::dataset::Sample;
use spurlogo::evaluation::{adjective_rate, chat_adjective_rate, AdjectivePair, AdjectivePairList, PairSource};
use spurlogo::gateway::{MarkerBase, MockMarkerScorer, PromptEnsemble, ScriptedChat};
use spurlogo::mitigation::Mitigation;
use spurlogo::raster::has_color_block;
use spurlogo::synthetic::{marker_logo, noise_image, MARKER};

fn main() -> spurlogo::Result<()> {
    let faces: Vec<Sample> = (0..20)
        .map(|i| Sample {
            id: format!("face{i:02}"),
            label: String::new(),
            image: noise_image(96, 96, i),
        })
        .collect();
    let logos = vec![marker_logo("marker", 32, 1, MARKER)];
    let policy = PlacementPolicy::default();
    let none = Mitigation::none();

    let pairs = AdjectivePairList::builtin();
    let words: Vec<&str> = pairs
        .pairs
        .iter()
        .flat_map(|p| [p.negative.as_str(), p.positive.as_str()])
        .collect();
    // Leans positive on clean faces, negative when the marker shows.
    let base: Vec<f64> = (0..words.len()).map(|i| (i % 2) as f64).collect();
    let scorer = MockMarkerScorer::new(&words, 0, MARKER, 4, MarkerBase::Constant(base));
    // The mock's target is the first word; with a single pair that is the negative.
    let greedy = AdjectivePairList::new(vec![pairs.pairs[0].clone()], PairSource::Builtin)?;
    for k in [0, 1] {
        let r = adjective_rate(
            &faces,
            &greedy,
            &scorer,
            &PromptEnsemble::people(),
            k,
            &logos,
            &policy,
            &none,
        )?;
        println!("scorer k={k}: negative rate {:.2} {:?}", r.overall, r.per_pair);
    }

    let chat = ScriptedChat::new(|img: &RgbaImage, _q: &str| {
        if has_color_block(img, MARKER, 4) {
            "I'd say (1).".into()
        } else {
            "Option 2".into()
        }
    });
    let custom = AdjectivePairList::new(
        vec![AdjectivePair::new("Hostile", "Friendly")],
        PairSource::UserSupplied,
    )?;
    for (name, list) in [("builtin", &pairs), ("custom", &custom)] {
        for k in [0, 1, 4] {
            let r = chat_adjective_rate(&faces, list, &chat, k, &logos, &policy, &none)?;
            println!("chat {name} k={k}: negative rate {:.2}", r.overall);
        }
    }
    let cropped = chat_adjective_rate(&faces, &custom, &chat, 1, &logos, &policy, &Mitigation::ten_crop(0.875))?;
    println!("chat with ten-crop k=1: {:.2}", cropped.overall);
    Ok(())
}
