//! One test per acceptance criterion. Run with `--nocapture` to see the
//! summary line each criterion prints.
//!
//! The three training-based criteria are marked ignored: they are
//! implemented in full but need far more compute than a CPU run allows
//! (one default iteration takes about 70 s on one core). Run them with
//! `cargo test --release --test acceptance -- --ignored`.

mod common;

use std::time::{Duration, Instant};

use apex::arrangement::{generate_scenario, run_scenario, summarize, ArrangementConfig, Matching};
use apex::data_synth::{generate_dataset, DatasetConfig, SceneSpec, VideoEpisode};
use apex::dataset::DatasetSplits;
use apex::latents::NoiseSource;
use apex::mask_compose::*;
use apex::metrics::*;
use apex::net::{context_probability, load_checkpoint, proposal_weights, ApexNet};
use apex::trainer::{compute_objective, evaluate_model, train, Ablations, TrainConfig};
use candle_core::{DType, Tensor};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, ok: bool, detail: String, elapsed: Duration) {
    println!("{} {name}: {detail} ({:.1}s)", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    assert!(ok, "{name}: {detail}");
}

fn masks_of(inst: &MaskInstance, n: MaskNormalization) -> MaskStack {
    let (a, z, p) = inst.tensors();
    compose_masks(&a, &z, &p, inst.bound, (inst.h, inst.w), n).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn mask_algebra_suite() {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (mut worst, mut gating, mut monotone) = (0.0f64, 0usize, 0usize);
    let n = 10_000;
    for i in 0..n {
        let k = rng.random_range(1..=4);
        let mut inst = MaskInstance::random(&mut rng, k, 4, 8, 8);
        let mode = if i % 2 == 0 { MaskNormalization::Softmax } else { MaskNormalization::ScalorRatio };
        let m = masks_of(&inst, mode);
        worst = worst.max(m.partition_error().unwrap());

        // An extra absent object leaves the foreground untouched and gets at
        // most the share its clamped logit can win against the present ones.
        let floor = 1.0 / (1.0 + inst.z.iter().map(|z| (2.0 * inst.bound * (z - 1.0)).exp()).sum::<f64>());
        let mut with_absent = inst.clone();
        with_absent.alphas.push((0..16).map(|_| rng.random_range(-8.0..8.0)).collect());
        with_absent.z.push(0.0);
        with_absent.poses.push([0.5, 0.5, 0.0, 0.0]);
        let m2 = masks_of(&with_absent, mode);
        let fg2 = flat(&m2.fg_masks);
        let total = flat(&m.fg_total);
        let absent_ok = fg2[k * 64..].iter().zip(&total).all(|(v, t)| *v <= floor * t + 1e-12);
        if flat(&m2.fg_total) == total && absent_ok {
            gating += 1;
        }

        // Raising one logit of a present object never shrinks the foreground.
        inst.z[0] = 1.0;
        let (a, z, p) = inst.tensors();
        let before = flat(&foreground_mask(&a, &z, &p, (8, 8)).unwrap());
        let entry = rng.random_range(0..16);
        inst.alphas[0][entry] += rng.random_range(0.01..4.0);
        let (a, z, p) = inst.tensors();
        let after = flat(&foreground_mask(&a, &z, &p, (8, 8)).unwrap());
        if after.iter().zip(&before).all(|(x, y)| *x >= y - 1e-12) {
            monotone += 1;
        }
    }
    let elapsed = clock.elapsed();
    let ok = worst < 1e-5 && gating == n && monotone == n && elapsed < Duration::from_secs(60);
    report(
        "mask_algebra_suite",
        ok,
        format!("{n} instances, max partition error {worst:.2e}, gating {gating}/{n}, monotone {monotone}/{n}"),
        elapsed,
    );
}

#[test]
fn oracle_equivalence() {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst = [0.0f64; 6];
    for _ in 0..100 {
        let k = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let inst = MaskInstance::random(&mut rng, k, 4, h, w);
        let m = masks_of(&inst, MaskNormalization::Softmax);
        let (fg, bg, total) = inst.compose();
        worst[0] = worst[0].max(max_diff(&flat(&m.fg_masks), &fg.concat())).max(max_diff(&flat(&m.bg_mask), &bg));

        let n = h * w;
        let fgm: Vec<Vec<f64>> = (0..k).map(|_| (0..3 * n).map(|_| rng.random()).collect()).collect();
        let bgm: Vec<f64> = (0..3 * n).map(|_| rng.random()).collect();
        let x: Vec<f64> = bgm.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
        let means = ComponentMeans { fg_means: tn(fgm.concat(), &[k, 3, h, w]), bg_mean: tn(bgm.clone(), &[3, h, w]), sigma_fg: 0.1, sigma_bg: 0.04 };
        let ll = scalar(&mixture_log_likelihood(&tn(x.clone(), &[3, h, w]), &m, &means).unwrap());
        let oracle = mixture_ll(&x, &fg, &bg, &fgm, &bgm, 0.1, 0.04);
        worst[1] = worst[1].max((ll - oracle).abs() / oracle.abs().max(1.0));

        let ent = scalar(&mask_entropy_loss(&m).unwrap());
        let oracle: f64 = fg.iter().flat_map(|f| f.iter().zip(&total).map(|(v, t)| -t * v * (v + LOG_EPS).ln())).sum();
        worst[2] = worst[2].max((ent - oracle).abs() / (1.0 + ent.abs()));

        let scope: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let (a, _, p) = inst.tensors();
        let ours = flat(&context_probability(&proposal_weights(&a, &p, (h, w)).unwrap(), &tn(scope.clone(), &[h, w])).unwrap());
        worst[3] = worst[3].max(max_diff(&ours, &p_context(&inst.alphas, 4, &inst.poses, &scope, h, w)));
    }

    for _ in 0..100 {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let gt: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..5)).collect();
        let (p, g) = (LabelFrame::new(h, w, pred.clone()).unwrap(), LabelFrame::new(h, w, gt.clone()).unwrap());
        for fg in [false, true] {
            if let (Some(a), Some(b)) = (ari(&p, &g, fg).unwrap(), ari_pairs(&pred, &gt, fg)) {
                worst[4] = worst[4].max((a - b).abs());
            }
            if let (Some(a), Some(b)) = (msc(&p, &g, fg).unwrap(), msc_loops(&pred, &gt, fg)) {
                worst[5] = worst[5].max((a - b).abs());
            }
        }
    }
    // Every 2-label prediction against fixed 4x4 ground truths.
    let gts: [Vec<u32>; 3] = [
        (0..16).map(|i| (i % 4 >= 2) as u32).collect(),
        (0..16).map(|i| [0, 1, 2][i % 3]).collect(),
        (0..16).map(|i| if i < 4 { 0 } else { 1 + (i % 2) as u32 }).collect(),
    ];
    for gt in &gts {
        let g = LabelFrame::new(4, 4, gt.clone()).unwrap();
        for bits in 0u32..1 << 16 {
            let pred: Vec<u32> = (0..16).map(|i| (bits >> i) & 1).collect();
            let a = ari(&LabelFrame::new(4, 4, pred.clone()).unwrap(), &g, false).unwrap().unwrap();
            worst[4] = worst[4].max((a - ari_pairs(&pred, gt, false).unwrap()).abs());
        }
    }

    let cfg = MotConfig::default();
    let mut mot_mismatch = 0;
    for _ in 0..2000 {
        let gt = random_tracks(&mut rng, 3, 2, 5, 1);
        let pred = random_tracks(&mut rng, 3, 3, 5, 100);
        if gt.iter().all(|f| f.is_empty()) {
            continue;
        }
        let to_set = |fs: &[Frame]| TrackSet {
            frames: fs.iter().map(|f| f.iter().map(|(id, m)| Detection { track_id: *id, mask: m.clone() }).collect()).collect(),
        };
        let c = mot_counts(&to_set(&pred), &to_set(&gt), &cfg).unwrap();
        // Equal-IoU matchings are tie-broken arbitrarily; any of them is accepted.
        let same = mot_exhaustive(&pred, &gt, cfg.iou_threshold, cfg.lifetime_threshold).iter().any(|o| {
            (c.matches, c.misses, c.false_positives, c.id_switches, c.mostly_detected, c.mostly_tracked)
                == (o.matches, o.misses, o.false_positives, o.id_switches, o.mostly_detected, o.mostly_tracked)
                && (c.iou_sum - o.iou_sum).abs() < 1e-9
        });
        mot_mismatch += (!same) as usize;
    }

    let elapsed = clock.elapsed();
    let ok = worst[..4].iter().all(|e| *e < 1e-6) && worst[4] < 1e-9 && worst[5] < 1e-6 && mot_mismatch == 0 && elapsed < Duration::from_secs(300);
    report(
        "oracle_equivalence",
        ok,
        format!(
            "compose {:.1e}, likelihood {:.1e}, entropy {:.1e}, p_context {:.1e}, ARI {:.1e}, MSC {:.1e}, MOT mismatches {mot_mismatch}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
        elapsed,
    );
}

fn micro_clip(seed: u64, frames: usize) -> Tensor {
    let spec = SceneSpec {
        image_height: 16,
        image_width: 16,
        num_objects: 2,
        sprite_radius: (2, 3),
        arm_width: 3,
        episode_length: frames,
        rng_seed: seed,
        ..SceneSpec::default()
    };
    let ep = apex::data_synth::generate_episode(&spec).unwrap();
    ep.frames_tensor(0..frames, &dev()).unwrap().to_dtype(DType::F64).unwrap()
}

#[test]
fn gradient_suite() {
    let clock = Instant::now();
    let model = ApexNet::new(micro_config(), 21, DType::F64, &dev()).unwrap();
    let clips = vec![micro_clip(3, 2)];
    let objective = || scalar(&compute_objective(&model, &clips, 50, &mut NoiseSource::new(9), 1.0).unwrap().loss);
    // Zero biases put relu inputs exactly on their kinks.
    let mut brng = ChaCha8Rng::seed_from_u64(20);
    for (name, var) in model.named_vars() {
        if name.ends_with("bias") {
            let n = var.as_tensor().elem_count();
            let b: Vec<f64> = (0..n).map(|_| brng.random_range(-0.1..0.1)).collect();
            model.set_var(&name, &tn(b, var.as_tensor().dims())).unwrap();
        }
    }
    let obj = compute_objective(&model, &clips, 50, &mut NoiseSource::new(9), 1.0).unwrap();
    let grads = obj.loss.backward().unwrap();
    let vars = model.named_vars();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 20 {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let base = flat(var.as_tensor());
        let i = rng.random_range(0..base.len());
        let analytic = grads.get(var.as_tensor()).map(|g| flat(g)[i]).unwrap_or(0.0);
        let shape = var.as_tensor().dims().to_vec();
        let set = |v: f64| {
            let mut x = base.clone();
            x[i] = v;
            model.set_var(name, &tn(x, &shape)).unwrap();
        };
        // The loss is piecewise smooth (tent sampling, clamps), so a wide
        // difference can straddle a kink. Keep the best of a step ladder.
        let mut err = f64::INFINITY;
        for h in [1e-5, 1e-6, 1e-7] {
            set(base[i] + h);
            let up = objective();
            set(base[i] - h);
            let down = objective();
            set(base[i]);
            let numeric = (up - down) / (2.0 * h);
            err = err.min((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2));
        }
        worst = worst.max(err);
        checked += 1;
    }

    // Closed-form mask and likelihood gradients.
    let mut mask_worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..5 {
        let inst = MaskInstance::random(&mut rng, 2, 4, 8, 8);
        let bgm: Vec<f64> = (0..192).map(|_| rng.random()).collect();
        let fgm: Vec<f64> = (0..384).map(|_| rng.random()).collect();
        let x: Vec<f64> = bgm.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let (a0, z, p0) = inst.tensors();
        let xt = tn(x, &[3, 8, 8]);
        let means = ComponentMeans { fg_means: tn(fgm, &[2, 3, 8, 8]), bg_mean: tn(bgm, &[3, 8, 8]), sigma_fg: 0.1, sigma_bg: 0.04 };
        let ll = |a: &Tensor, p: &Tensor| {
            mixture_log_likelihood(&xt, &compose_masks(a, &z, p, 8.0, (8, 8), MaskNormalization::Softmax).unwrap(), &means).unwrap()
        };
        let ent = |a: &Tensor, p: &Tensor| mask_entropy_loss(&compose_masks(a, &z, p, 8.0, (8, 8), MaskNormalization::Softmax).unwrap()).unwrap();
        mask_worst = mask_worst
            .max(grad_check(&flat(&a0), &[2, 4, 4], |a| ll(a, &p0), 1e-6, 1e-3))
            .max(grad_check(&flat(&p0), &[2, 4], |p| ll(&a0, p), 1e-7, 1e-3))
            .max(grad_check(&flat(&a0), &[2, 4, 4], |a| ent(a, &p0), 1e-6, 1e-3))
            .max(grad_check(&flat(&p0), &[2, 4], |p| ent(&a0, p), 1e-7, 1e-3));
    }
    let elapsed = clock.elapsed();
    let ok = worst < 1e-2 && mask_worst < 1e-3 && elapsed < Duration::from_secs(300);
    report(
        "gradient_suite",
        ok,
        format!("objective: 20 parameters, max rel err {worst:.2e}; mask closed forms max rel err {mask_worst:.2e}"),
        elapsed,
    );
}

#[test]
fn metric_self_tests() {
    let clock = Instant::now();
    let cfg = DatasetConfig {
        scene: SceneSpec { image_height: 32, image_width: 32, sprite_radius: (3, 5), episode_length: 6, ..SceneSpec::default() },
        num_episodes: 6,
        split_ratio: [1, 0, 0],
        vary_num_objects: true,
    };
    let mut items = Vec::new();
    for ep in generate_dataset(&cfg).unwrap() {
        let (f, t) = episode_ground_truth(&ep).unwrap();
        items.push((f.clone(), t.clone(), f, t));
    }
    let r = evaluate_predictions("test", &items, &MotConfig::default()).unwrap();
    let s = &r.segmentation;
    let mot = r.tracking.as_ref().unwrap();
    let ok = s.ari == 1.0 && s.msc == 1.0 && s.ari_fg == 1.0 && s.msc_fg == 1.0 && mot.mota == 100.0 && mot.id_switches == 0;
    report(
        "metric_self_tests",
        ok,
        format!("ARI {} MSC {} ARI-FG {} MSC-FG {} MOTA {} ID switches {}", s.ari, s.msc, s.ari_fg, s.msc_fg, mot.mota, mot.id_switches),
        clock.elapsed(),
    );
}

fn arrangement_scene() -> SceneSpec {
    SceneSpec { sprite_radius: (3, 5), arm_enabled: false, ..SceneSpec::default() }
}

#[test]
fn arrangement_ground_truth_perception() {
    let clock = Instant::now();
    let cfg = ArrangementConfig::default();
    let spec = arrangement_scene();
    let mut results = Vec::new();
    for n in 2..=4 {
        for seed in 0..30 {
            results.push(run_scenario(&generate_scenario(&spec, n, 1000 * n as u64 + seed).unwrap(), None, &cfg).unwrap());
        }
    }
    let solved: Vec<_> = results.iter().filter(|r| r.solved).collect();
    let worst = solved.iter().map(|r| r.score).fold(0.0, f64::max);
    let ok = !solved.is_empty() && worst < 0.02;
    report(
        "arrangement_ground_truth_perception",
        ok,
        format!("{}/{} scenarios solvable, worst score {worst:.4}", solved.len(), results.len()),
        clock.elapsed(),
    );
}

fn toy_dataset() -> DatasetSplits {
    let cfg = DatasetConfig {
        scene: SceneSpec { num_objects: 3, episode_length: 20, rng_seed: 7, ..SceneSpec::default() },
        num_episodes: 600,
        split_ratio: [500, 50, 50],
        vary_num_objects: false,
    };
    DatasetSplits::from_episodes(generate_dataset(&cfg).unwrap(), cfg.split_ratio)
}

fn train_toy(data: &DatasetSplits, ablations: &[&str], iterations: usize) -> ApexNet {
    let cfg = TrainConfig {
        max_iterations: iterations,
        validate_every: 0,
        ablations: Ablations::from_names(ablations).unwrap(),
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let summary = train(&cfg, &data.train, &data.val, dir.path(), None).unwrap();
    load_checkpoint(&summary.final_checkpoint, &candle_core::Device::Cpu).unwrap().model
}

fn held_out(model: &ApexNet, eps: &[VideoEpisode]) -> MetricsReport {
    evaluate_model(model, eps, "test", &MotConfig::default()).unwrap()
}

#[test]
#[ignore = "20k iterations at about 70 s each on one CPU core (over two weeks)"]
fn desk_scale_training() {
    let clock = Instant::now();
    let data = toy_dataset();
    let model = train_toy(&data, &[], 20_000);
    let r = held_out(&model, &data.test);
    let mota = r.tracking.as_ref().map_or(f64::NEG_INFINITY, |m| m.mota);
    let base = r.no_tracking_baseline.as_ref().map_or(f64::INFINITY, |m| m.mota);
    let ok = r.segmentation.ari >= 0.6 && r.segmentation.ari_fg >= 0.5 && mota > base;
    report(
        "desk_scale_training",
        ok,
        format!("ARI {:.3} ARI-FG {:.3} MOTA {mota:.1} vs no-tracking {base:.1}", r.segmentation.ari, r.segmentation.ari_fg),
        clock.elapsed(),
    );
}

#[test]
#[ignore = "two full training runs; same budget as desk_scale_training"]
fn ablation_direction() {
    let clock = Instant::now();
    let data = toy_dataset();
    let full = held_out(&train_toy(&data, &[], 20_000), &data.test);
    let gauss = held_out(&train_toy(&data, &["gaussian_likelihood"], 20_000), &data.test);
    let ok = gauss.segmentation.ari_fg < full.segmentation.ari_fg;
    report(
        "ablation_direction",
        ok,
        format!("ARI-FG default {:.3} vs gaussian likelihood {:.3}", full.segmentation.ari_fg, gauss.segmentation.ari_fg),
        clock.elapsed(),
    );
}

#[test]
#[ignore = "needs the trained toy model from desk_scale_training"]
fn arrangement_trained_model_beats_identity() {
    let clock = Instant::now();
    let data = toy_dataset();
    let model = train_toy(&data, &[], 20_000);
    let spec = arrangement_scene();
    let run = |matching: Matching| {
        let cfg = ArrangementConfig { matching, ..ArrangementConfig::default() };
        let results = (0..20)
            .map(|s| run_scenario(&generate_scenario(&spec, 2, 5000 + s).unwrap(), Some(&model), &cfg).unwrap())
            .collect();
        summarize("model", matching, results)
    };
    let (opt, ident) = (run(Matching::Optimal), run(Matching::Identity));
    report(
        "arrangement_trained_model_beats_identity",
        opt.mean < ident.mean,
        format!("2-object mean score {:.4} vs identity {:.4}", opt.mean, ident.mean),
        clock.elapsed(),
    );
}
