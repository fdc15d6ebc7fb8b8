//! Trains a small model for a few iterations and evaluates it.
//!
//! cargo run --release --example train_toy -- /tmp/toy_run 50

use apex::data_synth::{generate_dataset, DatasetConfig, SceneSpec};
use apex::dataset::DatasetSplits;
use apex::net::{load_checkpoint, ModelConfig};
use apex::trainer::{evaluate_model, train, TrainConfig};

fn main() -> apex::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "toy_run".into());
    let iterations = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);

    let scene = SceneSpec { image_height: 32, image_width: 32, sprite_radius: (3, 5), episode_length: 6, ..SceneSpec::default() };
    let data = DatasetConfig { scene, num_episodes: 24, split_ratio: [20, 2, 2], vary_num_objects: true };
    let splits = DatasetSplits::from_episodes(generate_dataset(&data)?, data.split_ratio);

    let cfg = TrainConfig {
        max_iterations: iterations,
        batch_size: 2,
        sequence_length: 4,
        checkpoint_every: iterations.max(1),
        validate_every: iterations.max(1),
        model: ModelConfig { image_height: 32, image_width: 32, grid_size: 4, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let summary = train(&cfg, &splits.train, &splits.val, out.as_ref(), None)?;
    if let (Some(first), Some(last)) = (summary.records.first(), summary.records.last()) {
        println!("loss {:.1} -> {:.1} over {} iterations", first.total_loss, last.total_loss, summary.records.len());
    }
    let model = load_checkpoint(&summary.final_checkpoint, &candle_core::Device::Cpu)?.model;
    let report = evaluate_model(&model, &splits.test, "test", &cfg.mot)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
