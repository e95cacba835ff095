//! Write a self-contained synthetic workspace for trying the CLI:
//! a labeled dataset, a curation source, a curated bank, a target spec and
//! a config wired to the mock backends.
//!
//!     cargo run --example synthetic_fixture -- demo
//!     cargo run --bin spurlogo -- --config demo/spurlogo.toml mine \
//!         --target demo/target.json --bank demo/bank.jsonl --N 20 --out demo/run.json

use std::path::PathBuf;

use spurlogo::synthetic::{write_fixture, FixtureSpec};

const CONFIG: &str = r#"[scorer]
backend = "mock_marker"
labels = ["harmless", "hateful"]
target = "harmless"
marker = [255, 0, 255]
marker_size = 4

[scorer.base]
kind = "center_cue"
palette = [[0, 200, 0], [200, 0, 0]]

[similarity]
backend = "flatness"

[detector]
backend = "color_region"
color = [255, 0, 255]

[curation]
top_fraction = 0.5
noise_sample = 20

[mining]
n = 20

[evaluation]
task = "binary"
positive = "hateful"

[review]
root = "reviews"
"#;

fn main() -> spurlogo::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "spurlogo-demo".into()));
    let fixture = write_fixture(&dir, &FixtureSpec::default())?;
    let config = dir.join("spurlogo.toml");
    std::fs::write(&config, CONFIG).map_err(|e| spurlogo::Error::Input(e.to_string()))?;

    println!("dataset   {}", fixture.dataset.display());
    println!("source    {}", fixture.source.display());
    println!("bank      {}", fixture.bank.display());
    println!("target    {}", fixture.target.display());
    println!("config    {}", config.display());
    println!("markers   {}", fixture.marker_ids.join(" "));
    Ok(())
}
