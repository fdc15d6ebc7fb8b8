//! Rearranges tables into their goal layouts from ground-truth perception.

use apex::arrangement::{generate_scenario, run_scenario, summarize, ArrangementConfig};
use apex::data_synth::SceneSpec;

fn main() -> apex::Result<()> {
    let spec = SceneSpec { sprite_radius: (3, 5), arm_enabled: false, ..SceneSpec::default() };
    let cfg = ArrangementConfig::default();
    let mut results = Vec::new();
    for n in 2..=4 {
        for seed in 0..5 {
            let r = run_scenario(&generate_scenario(&spec, n, 100 * n as u64 + seed)?, None, &cfg)?;
            let parks = r.plan.as_ref().map_or(0, |p| p.num_parks());
            println!("{n} objects, seed {seed}: score {:.4}, parks {parks}, rejected {}", r.score, r.rejected_tasks);
            results.push(r);
        }
    }
    let report = summarize("ground truth", cfg.matching, results);
    println!("mean {:.4} std {:.4}, solved {}/{}", report.mean, report.std, report.solved, report.scenarios.len());
    Ok(())
}
