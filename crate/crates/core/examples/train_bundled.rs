//! Trains the bundled toy detector and writes it to `assets/`.
//!
//! `cargo run --release -p vanish-core --example train_bundled`

use std::path::Path;

use vanish_core::detector::{train_toy_detector, TrainConfig};
use vanish_core::scene::SyntheticCorpus;

/// Seed of the training corpus. Held-out corpora use other seeds.
const TRAIN_CORPUS_SEED: u64 = 1000;
const TRAIN_SCENES: usize = 400;

fn main() -> vanish_core::Result<()> {
    let corpus = SyntheticCorpus::new(TRAIN_CORPUS_SEED, TRAIN_SCENES);
    let config = TrainConfig::default();
    let (detector, log) = train_toy_detector(&corpus, &config)?;
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
    detector.save(assets.join("toy_detector.json"))?;
    let record = serde_json::json!({
        "corpus_seed": TRAIN_CORPUS_SEED,
        "scenes": TRAIN_SCENES,
        "config": config,
        "log": log,
    });
    std::fs::write(
        assets.join("toy_detector.log"),
        serde_json::to_string_pretty(&record)?,
    )
    .map_err(|e| vanish_core::Error::Io {
        path: assets.clone(),
        source: e,
    })?;
    println!("{}", serde_json::to_string_pretty(&log)?);
    Ok(())
}
