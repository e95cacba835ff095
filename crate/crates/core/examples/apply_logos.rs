//! Paste one to four logos into the corners of an image and write the
//! results next to each other as PNGs.

use spurlogo::apply::{apply_logos, placement_slots, PlacementPolicy};
use spurlogo::raster::encode_png;
use spurlogo::synthetic::{marker_logo, noise_image, plain_logo, MARKER};

fn main() -> spurlogo::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    let image = noise_image(200, 120, 3);
    let logos = vec![marker_logo("marker", 48, 1, MARKER), plain_logo("plain", 48, 2)];
    let policy = PlacementPolicy::default();

    for k in 0..=4 {
        for slot in placement_slots(200, 120, k, &policy)? {
            println!("k={k} slot at ({}, {}) side {}", slot.x, slot.y, slot.w);
        }
        let attacked = apply_logos(&image, &logos, k, &policy)?;
        let path = out.join(format!("apply_k{k}.png"));
        std::fs::write(&path, encode_png(&attacked)).expect("write png");
        println!("wrote {}", path.display());
    }
    Ok(())
}
