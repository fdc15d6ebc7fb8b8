//! Scores ground truth against itself and against a copy with ids swapped
//! half way through.

use apex::data_synth::{generate_episode, SceneSpec};
use apex::metrics::{episode_ground_truth, mot_evaluate, Detection, MotConfig, TrackSet};

fn main() -> apex::Result<()> {
    let ep = generate_episode(&SceneSpec { num_objects: 2, episode_length: 10, rng_seed: 3, ..SceneSpec::default() })?;
    let (_, gt) = episode_ground_truth(&ep)?;
    let cfg = MotConfig::default();
    println!("self: {:?}", mot_evaluate(&gt, &gt, &cfg)?);

    let mut ids: Vec<u64> = gt.frames.iter().flatten().map(|d| d.track_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let half = gt.frames.len() / 2;
    let swapped = TrackSet {
        frames: gt
            .frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                f.iter()
                    .map(|d| {
                        let track_id = match ids.as_slice() {
                            [a, b, ..] if t >= half && d.track_id == *a => *b,
                            [a, b, ..] if t >= half && d.track_id == *b => *a,
                            _ => d.track_id,
                        };
                        Detection { track_id, mask: d.mask.clone() }
                    })
                    .collect()
            })
            .collect(),
    };
    println!("swapped: {:?}", mot_evaluate(&swapped, &gt, &cfg)?);
    Ok(())
}
