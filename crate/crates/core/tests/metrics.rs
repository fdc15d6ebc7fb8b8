mod common;

use apex::metrics::*;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lf(n: usize, labels: Vec<u32>) -> LabelFrame {
    LabelFrame::new(n, labels.len() / n, labels).unwrap()
}

fn tracks(frames: &[Frame]) -> TrackSet {
    TrackSet {
        frames: frames
            .iter()
            .map(|f| f.iter().map(|(id, m)| Detection { track_id: *id, mask: m.clone() }).collect())
            .collect(),
    }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: u32) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

#[test]
fn msc_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let gt = random_labels(&mut rng, 36, 4);
        let pred = random_labels(&mut rng, 36, 5);
        for fg in [false, true] {
            let ours = msc(&lf(6, pred.clone()), &lf(6, gt.clone()), fg).unwrap();
            let oracle = msc_loops(&pred, &gt, fg);
            match (ours, oracle) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
}

#[test]
fn ari_matches_pair_counting_on_random_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let gt = random_labels(&mut rng, 64, 3);
        let pred = random_labels(&mut rng, 64, 4);
        for fg in [false, true] {
            let a = ari(&lf(8, pred.clone()), &lf(8, gt.clone()), fg).unwrap();
            let b = ari_pairs(&pred, &gt, fg);
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-9);
        }
    }
}

#[test]
fn swapped_ids_cost_two_switches() {
    let n = 6;
    let left: Vec<bool> = (0..n * n).map(|i| i % n < 3).collect();
    let right: Vec<bool> = left.iter().map(|v| !v).collect();
    let gt: Vec<Frame> = (0..6).map(|_| vec![(1, left.clone()), (2, right.clone())]).collect();
    let pred: Vec<Frame> = (0..6).map(|t| if t < 3 { vec![(7, left.clone()), (8, right.clone())] } else { vec![(8, left.clone()), (7, right.clone())] }).collect();
    let r = mot_evaluate(&tracks(&pred), &tracks(&gt), &MotConfig::default()).unwrap();
    assert_eq!(r.id_switches, 2);
    assert!((r.mota - 100.0 * (1.0 - 2.0 / 12.0)).abs() < 1e-9);
    let perfect = mot_evaluate(&tracks(&gt), &tracks(&gt), &MotConfig::default()).unwrap();
    assert_eq!((perfect.mota, perfect.id_switches, perfect.misses, perfect.false_positives), (100.0, 0, 0.0, 0.0));
}

#[test]
fn micro_benchmark_matches_exhaustive_matching() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MotConfig::default();
    for _ in 0..100 {
        let gt = random_tracks(&mut rng, 3, 2, 5, 1);
        let mut pred = random_tracks(&mut rng, 3, 2, 5, 100);
        // Half the time predictions are perturbed copies of the ground truth.
        if rng.random_bool(0.5) {
            pred = gt
                .iter()
                .map(|f| f.iter().map(|(id, m)| (id + 50, m.iter().map(|v| if rng.random_bool(0.1) { !v } else { *v }).collect())).collect())
                .collect();
        }
        if gt.iter().all(|f| f.is_empty()) {
            continue;
        }
        let c = mot_counts(&tracks(&pred), &tracks(&gt), &cfg).unwrap();
        let any = mot_exhaustive(&pred, &gt, cfg.iou_threshold, cfg.lifetime_threshold).iter().any(|o| {
            (c.num_gt, c.matches, c.misses, c.false_positives, c.id_switches) == (o.num_gt, o.matches, o.misses, o.false_positives, o.id_switches)
                && (c.mostly_detected, c.mostly_tracked, c.gt_tracks) == (o.mostly_detected, o.mostly_tracked, o.gt_tracks)
                && (c.iou_sum - o.iou_sum).abs() < 1e-9
        });
        assert!(any, "{c:?}");
    }
}

#[test]
fn empty_ground_truth_is_rejected() {
    let empty = TrackSet { frames: vec![vec![], vec![]] };
    assert!(mot_evaluate(&empty, &empty, &MotConfig::default()).is_err());
}

proptest! {
    #![proptest_config(prop_config(256))]

    #[test]
    fn scores_invariant_to_relabelling(seed in any::<u64>(), shift in 1u32..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_labels(&mut rng, 36, 3);
        let pred = random_labels(&mut rng, 36, 4);
        let perm: Vec<u32> = pred.iter().map(|p| (p * 7 + shift) % 97).collect();
        for fg in [false, true] {
            prop_assert_eq!(ari(&lf(6, pred.clone()), &lf(6, gt.clone()), fg).unwrap(), ari(&lf(6, perm.clone()), &lf(6, gt.clone()), fg).unwrap());
            prop_assert_eq!(msc(&lf(6, pred.clone()), &lf(6, gt.clone()), fg).unwrap(), msc(&lf(6, perm.clone()), &lf(6, gt.clone()), fg).unwrap());
        }
    }

    #[test]
    fn fg_scores_ignore_background_pixels(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_labels(&mut rng, 36, 3);
        let pred = random_labels(&mut rng, 36, 3);
        let noisy: Vec<u32> = pred.iter().zip(&gt).map(|(p, g)| if *g == 0 { rng.random_range(0..9) } else { *p }).collect();
        let (a, b) = (lf(6, pred), lf(6, noisy));
        let g = lf(6, gt);
        prop_assert_eq!(ari(&a, &g, true).unwrap(), ari(&b, &g, true).unwrap());
        prop_assert_eq!(msc(&a, &g, true).unwrap(), msc(&b, &g, true).unwrap());
    }

    #[test]
    fn self_scores_are_perfect(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_labels(&mut rng, 36, 4);
        let g = lf(6, gt);
        prop_assert_eq!(ari(&g, &g, false).unwrap(), Some(1.0));
        prop_assert_eq!(msc(&g, &g, false).unwrap(), Some(1.0));
        let t = TrackSet::from_label_frames(&[g.clone(), g.clone()]);
        if t.frames[0].len() > 0 {
            let r = mot_evaluate(&t, &t, &MotConfig::default()).unwrap();
            prop_assert_eq!(r.mota, 100.0);
            prop_assert_eq!(r.id_switches, 0);
        }
    }

    #[test]
    fn mot_ranges(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_tracks(&mut rng, 4, 3, 6, 1);
        let pred = random_tracks(&mut rng, 4, 3, 6, 1);
        if gt.iter().any(|f| !f.is_empty()) {
            let r = mot_evaluate(&tracks(&pred), &tracks(&gt), &MotConfig::default()).unwrap();
            prop_assert!(r.mota <= 100.0);
            if r.counts.matches > 0 {
                prop_assert!((50.0..=100.0).contains(&r.motp));
            }
        }
    }
}
