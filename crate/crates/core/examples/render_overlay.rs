//! Writes frame / segmentation strips for a generated episode.
//!
//! cargo run --release --example render_overlay -- /tmp/strips

use apex::data_synth::{generate_episode, SceneSpec};
use apex::render::render_ground_truth;

fn main() -> apex::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "strips".into());
    let ep = generate_episode(&SceneSpec { episode_length: 6, rng_seed: 1, ..SceneSpec::default() })?;
    for path in render_ground_truth(&ep, out.as_ref())? {
        println!("{}", path.display());
    }
    Ok(())
}
