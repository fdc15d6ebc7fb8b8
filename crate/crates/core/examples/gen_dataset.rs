//! Generates a small sprite-video dataset and writes it to disk.
//!
//! cargo run --release --example gen_dataset -- /tmp/sprites

use apex::data_synth::{generate_dataset, DatasetConfig, SceneSpec};
use apex::dataset::{write_dataset, DatasetSplits};

fn main() -> apex::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sprites_dataset".into());
    let cfg = DatasetConfig {
        scene: SceneSpec { episode_length: 8, ..SceneSpec::default() },
        num_episodes: 12,
        split_ratio: [10, 1, 1],
        vary_num_objects: true,
    };
    let episodes = generate_dataset(&cfg)?;
    let splits = DatasetSplits::from_episodes(episodes, cfg.split_ratio);
    let manifest = write_dataset(&splits, out.as_ref(), &cfg.scene.hash())?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}
