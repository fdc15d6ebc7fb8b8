//! Scalar reference implementations and random instance builders shared by
//! the integration tests. Nothing here calls into the crate's tensor code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use apex::net::ModelConfig;
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn dev() -> Device {
    Device::Cpu
}

pub fn t1(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
}

pub fn tn(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Small model shared by the training-level tests.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        encoder_channels: [4, 4, 4],
        feature_channels: 4,
        feature_glimpse: 2,
        image_glimpse: 4,
        object_glimpse: 4,
        glimpse_channels: 4,
        glimpse_code: 8,
        hidden_dim: 8,
        what_dim: 4,
        bg_dim: 4,
        bg_channels: 4,
        decoder_channels: 4,
        grid_size: 2,
        min_scale: 0.0625,
        ..ModelConfig::default()
    }
}

/// Value of a `gh x gw` glimpse at fractional index `(py, px)` by bilinear
/// interpolation between the four neighbouring samples; zero outside.
fn bilinear(g: &[f64], gh: usize, gw: usize, py: f64, px: f64) -> f64 {
    let at = |y: i64, x: i64| {
        if y < 0 || x < 0 || y >= gh as i64 || x >= gw as i64 {
            0.0
        } else {
            g[y as usize * gw + x as usize]
        }
    };
    let (y0, x0) = (py.floor(), px.floor());
    let (fy, fx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    (1.0 - fy) * (1.0 - fx) * at(y0, x0)
        + (1.0 - fy) * fx * at(y0, x0 + 1)
        + fy * (1.0 - fx) * at(y0 + 1, x0)
        + fy * fx * at(y0 + 1, x0 + 1)
}

fn pixel_centre(j: usize, n: usize) -> f64 {
    (2 * j + 1) as f64 / n as f64 - 1.0
}

/// Places a glimpse at `pose = [sx, sy, cx, cy]` on an `h x w` canvas.
pub fn place(g: &[f64], gh: usize, gw: usize, pose: [f64; 4], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let uy = (pixel_centre(i, h) - pose[3]) / pose[1];
            let ux = (pixel_centre(j, w) - pose[2]) / pose[0];
            let py = (uy + 1.0) * gh as f64 / 2.0 - 0.5;
            let px = (ux + 1.0) * gw as f64 / 2.0 - 0.5;
            out[i * w + j] = bilinear(g, gh, gw, py, px);
        }
    }
    out
}

/// Crops an `gh x gw` glimpse out of an `h x w` image.
pub fn crop(img: &[f64], h: usize, w: usize, pose: [f64; 4], gh: usize, gw: usize) -> Vec<f64> {
    let mut out = vec![0.0; gh * gw];
    for a in 0..gh {
        for b in 0..gw {
            let y = pixel_centre(a, gh) * pose[1] + pose[3];
            let x = pixel_centre(b, gw) * pose[0] + pose[2];
            let py = (y + 1.0) * h as f64 / 2.0 - 0.5;
            let px = (x + 1.0) * w as f64 / 2.0 - 0.5;
            out[a * gw + b] = bilinear(img, h, w, py, px);
        }
    }
    out
}

/// Random mask-composition inputs.
#[derive(Debug, Clone)]
pub struct MaskInstance {
    pub alphas: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub poses: Vec<[f64; 4]>,
    pub g: usize,
    pub h: usize,
    pub w: usize,
    pub bound: f64,
}

impl MaskInstance {
    pub fn random(rng: &mut ChaCha8Rng, k: usize, g: usize, h: usize, w: usize) -> Self {
        let bound = 8.0;
        let alphas = (0..k).map(|_| (0..g * g).map(|_| bound * rng.random_range(-1.5f64..1.5).tanh()).collect()).collect();
        let z = (0..k).map(|_| if rng.random_bool(0.3) { rng.random_range(0..2) as f64 } else { rng.random_range(0.0..1.0) }).collect();
        let poses = (0..k)
            .map(|_| {
                let (lx, ly) = ((1.5 / w as f64).max(0.2), (1.5 / h as f64).max(0.2));
                [rng.random_range(lx..1.0), rng.random_range(ly..1.0), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)]
            })
            .collect();
        MaskInstance { alphas, z, poses, g, h, w, bound }
    }

    pub fn k(&self) -> usize {
        self.z.len()
    }

    pub fn tensors(&self) -> (Tensor, Tensor, Tensor) {
        let k = self.k();
        let a = tn(self.alphas.concat(), &[k, self.g, self.g]);
        let z = t1(&self.z);
        let p = tn(self.poses.iter().flatten().copied().collect(), &[k, 4]);
        (a, z, p)
    }

    pub fn fg_total(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.h * self.w];
        for k in 0..self.k() {
            let gated: Vec<f64> = self.alphas[k].iter().map(|a| softplus_f64(*a) * self.z[k]).collect();
            for (s, v) in sum.iter_mut().zip(place(&gated, self.g, self.g, self.poses[k], self.h, self.w)) {
                *s += v;
            }
        }
        sum.iter().map(|s| s.tanh()).collect()
    }

    /// Per-pixel softmax over the presence-shifted placed logits.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        let n = self.h * self.w;
        let placed: Vec<Vec<f64>> = (0..self.k())
            .map(|k| {
                place(&self.alphas[k], self.g, self.g, self.poses[k], self.h, self.w)
                    .into_iter()
                    .map(|v| v + 2.0 * self.bound * self.z[k])
                    .collect()
            })
            .collect();
        let mut out = vec![vec![0.0; n]; self.k()];
        for px in 0..n {
            let m = placed.iter().map(|p| p[px]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = placed.iter().map(|p| (p[px] - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..self.k() {
                out[k][px] = e[k] / s;
            }
        }
        out
    }

    /// `(fg masks, bg mask, fg total)`
    pub fn compose(&self) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let total = self.fg_total();
        let hat = self.normalized();
        let fg = hat.iter().map(|m| m.iter().zip(&total).map(|(a, b)| a * b).collect()).collect();
        let bg = total.iter().map(|t| 1.0 - t).collect();
        (fg, bg, total)
    }
}

fn normal_density(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// `Σ_px log Σ_k m_k Π_c N(x_c | μ_kc, σ_k)` evaluated directly. Images are
/// channel-major `[3, H*W]`.
pub fn mixture_ll(x: &[f64], fg: &[Vec<f64>], bg: &[f64], fg_means: &[Vec<f64>], bg_mean: &[f64], s_fg: f64, s_bg: f64) -> f64 {
    let n = bg.len();
    let mut total = 0.0;
    for px in 0..n {
        let dens = |mean: &[f64], s: f64| (0..3).map(|c| normal_density(x[c * n + px], mean[c * n + px], s)).product::<f64>();
        let mut p = bg[px] * dens(bg_mean, s_bg);
        for (m, mu) in fg.iter().zip(fg_means) {
            p += m[px] * dens(mu, s_fg);
        }
        total += p.ln();
    }
    total
}

pub fn entropy(fg: &[Vec<f64>], total: &[f64]) -> f64 {
    let mut e = 0.0;
    for m in fg {
        for (px, v) in m.iter().enumerate() {
            if *v > 0.0 {
                e -= total[px] * v * v.ln();
            }
        }
    }
    e
}

/// Fraction of each proposal's `tanh(place(softplus_f64(α)))` weight in scope.
pub fn p_context(alphas: &[Vec<f64>], g: usize, poses: &[[f64; 4]], scope: &[f64], h: usize, w: usize) -> Vec<f64> {
    alphas
        .iter()
        .zip(poses)
        .map(|(a, p)| {
            let sp: Vec<f64> = a.iter().map(|v| softplus_f64(*v)).collect();
            let wts: Vec<f64> = place(&sp, g, g, *p, h, w).into_iter().map(f64::tanh).collect();
            let num: f64 = wts.iter().zip(scope).map(|(a, b)| a * b).sum();
            let den: f64 = wts.iter().sum();
            num / den.max(1e-12)
        })
        .collect()
}

/// Adjusted Rand index from raw pair counts over all pixel pairs.
pub fn ari_pairs(pred: &[u32], gt: &[u32], fg_only: bool) -> Option<f64> {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| !fg_only || gt[i] != 0).collect();
    if idx.is_empty() {
        return if fg_only { None } else { Some(1.0) };
    }
    let (mut a, mut b, mut c, mut d) = (0f64, 0f64, 0f64, 0f64);
    for x in 0..idx.len() {
        for y in x + 1..idx.len() {
            let (i, j) = (idx[x], idx[y]);
            match (pred[i] == pred[j], gt[i] == gt[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let den = (a + b) * (b + d) + (a + c) * (c + d);
    if den == 0.0 {
        return Some(1.0);
    }
    Some(2.0 * (a * d - b * c) / den)
}

/// Segmentation covering by looping over every (gt, pred) segment pair.
pub fn msc_loops(pred: &[u32], gt: &[u32], fg_only: bool) -> Option<f64> {
    let keep: Vec<usize> = (0..gt.len()).filter(|&i| !fg_only || gt[i] != 0).collect();
    let pred: Vec<u32> = keep.iter().map(|&i| pred[i]).collect();
    let gt: Vec<u32> = keep.iter().map(|&i| gt[i]).collect();
    let (pred, gt) = (&pred[..], &gt[..]);
    let gts: BTreeSet<u32> = gt.iter().copied().collect();
    let preds: BTreeSet<u32> = pred.iter().copied().collect();
    let (mut num, mut den) = (0.0, 0.0);
    for &g in &gts {
        let mut best = 0.0f64;
        for &p in &preds {
            let mut inter = 0usize;
            let mut union = 0usize;
            for i in 0..gt.len() {
                let (a, b) = (gt[i] == g, pred[i] == p);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            best = best.max(inter as f64 / union as f64);
        }
        let size = gt.iter().filter(|&&x| x == g).count() as f64;
        num += size * best;
        den += size;
    }
    (den > 0.0).then(|| num / den)
}

/// One frame of detections `(track id, mask)`.
pub type Frame = Vec<(u64, Vec<bool>)>;

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let i = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let u = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Every partial injection of `0..n` into `0..m`.
fn all_matchings(n: usize, m: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::new();
        for partial in &out {
            next.push([partial.clone(), vec![None]].concat());
            for j in 0..m {
                if !partial.contains(&Some(j)) {
                    next.push([partial.clone(), vec![Some(j)]].concat());
                }
            }
        }
        out = next;
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleCounts {
    pub num_gt: usize,
    pub matches: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub id_switches: usize,
    pub iou_sum: f64,
    pub mostly_detected: usize,
    pub mostly_tracked: usize,
    pub gt_tracks: usize,
}

#[derive(Clone, Default)]
struct TrackState {
    counts: OracleCounts,
    last: BTreeMap<u64, u64>,
    lifetime: BTreeMap<u64, usize>,
    detected: BTreeMap<u64, usize>,
    partners: BTreeMap<u64, BTreeMap<u64, usize>>,
}

/// Every optimal matching of one frame: continued pairs are kept first, then
/// the free detections are matched to maximise the number of matches and
/// then the summed IoU.
fn optimal_matchings(p: &Frame, g: &Frame, last: &BTreeMap<u64, u64>, thr: f64) -> Vec<Vec<Option<usize>>> {
    let mut fixed: Vec<Option<usize>> = vec![None; g.len()];
    for (gi, (gid, gm)) in g.iter().enumerate() {
        if let Some(pid) = last.get(gid) {
            if let Some(pi) = p.iter().position(|(id, _)| id == pid) {
                if iou(gm, &p[pi].1) >= thr && !fixed.contains(&Some(pi)) {
                    fixed[gi] = Some(pi);
                }
            }
        }
    }
    let mut scored = Vec::new();
    for cand in all_matchings(g.len(), p.len()) {
        let consistent = (0..g.len()).all(|i| fixed[i].is_none() || cand[i] == fixed[i]);
        let uses_fixed_pred = (0..g.len()).any(|i| fixed[i].is_none() && cand[i].is_some_and(|j| fixed.contains(&Some(j))));
        let valid = (0..g.len()).all(|i| cand[i].is_none_or(|j| iou(&g[i].1, &p[j].1) >= thr));
        if consistent && !uses_fixed_pred && valid {
            let n = cand.iter().filter(|x| x.is_some()).count();
            let s: f64 = (0..g.len()).filter_map(|i| cand[i].map(|j| iou(&g[i].1, &p[j].1))).sum();
            scored.push((n, s, cand));
        }
    }
    let n = scored.iter().map(|x| x.0).max().unwrap_or(0);
    let s = scored.iter().filter(|x| x.0 == n).map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    scored.into_iter().filter(|x| x.0 == n && x.1 > s - 1e-12).map(|x| x.2).collect()
}

fn track_frames(pred: &[Frame], gt: &[Frame], thr: f64, life_thr: f64, st: TrackState, out: &mut Vec<OracleCounts>) {
    let Some((g, p)) = gt.first().zip(pred.first()) else {
        let mut c = st.counts;
        c.gt_tracks = st.lifetime.len();
        for (gid, life) in &st.lifetime {
            let need = life_thr * *life as f64;
            c.mostly_detected += (st.detected.get(gid).copied().unwrap_or(0) as f64 >= need) as usize;
            let best = st.partners.get(gid).and_then(|m| m.values().max().copied()).unwrap_or(0);
            c.mostly_tracked += (best as f64 >= need) as usize;
        }
        out.push(c);
        return;
    };
    for chosen in optimal_matchings(p, g, &st.last, thr) {
        let mut st = st.clone();
        let c = &mut st.counts;
        c.num_gt += g.len();
        for (gid, _) in g {
            *st.lifetime.entry(*gid).or_default() += 1;
        }
        let n = chosen.iter().filter(|x| x.is_some()).count();
        c.matches += n;
        c.misses += g.len() - n;
        c.false_positives += p.len() - n;
        for (gi, m) in chosen.iter().enumerate() {
            if let Some(pi) = m {
                let (gid, pid) = (g[gi].0, p[*pi].0);
                c.iou_sum += iou(&g[gi].1, &p[*pi].1);
                if let Some(prev) = st.last.insert(gid, pid) {
                    c.id_switches += (prev != pid) as usize;
                }
                *st.detected.entry(gid).or_default() += 1;
                *st.partners.entry(gid).or_default().entry(pid).or_default() += 1;
            }
        }
        track_frames(&pred[1..], &gt[1..], thr, life_thr, st, out);
    }
}

/// Tracking counts under every tie-break of the per-frame optimal matching,
/// found by enumeration.
pub fn mot_exhaustive(pred: &[Frame], gt: &[Frame], thr: f64, life_thr: f64) -> Vec<OracleCounts> {
    let mut out = Vec::new();
    track_frames(pred, gt, thr, life_thr, TrackState::default(), &mut out);
    out
}

/// Random blob-like masks on an `n x n` grid: a random rectangle per track
/// jittered per frame, so IoUs vary around the matching threshold.
pub fn random_tracks(rng: &mut ChaCha8Rng, frames: usize, tracks: usize, n: usize, id_base: u64) -> Vec<Frame> {
    let rects: Vec<(usize, usize, usize, usize)> = (0..tracks)
        .map(|_| {
            let (x0, y0) = (rng.random_range(0..n - 2), rng.random_range(0..n - 2));
            (x0, y0, rng.random_range(x0 + 1..n), rng.random_range(y0 + 1..n))
        })
        .collect();
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut frame = Vec::new();
        for (k, &(x0, y0, x1, y1)) in rects.iter().enumerate() {
            if !rng.random_bool(0.85) {
                continue;
            }
            let mut m = vec![false; n * n];
            for y in y0..=y1 {
                for x in x0..=x1 {
                    m[y * n + x] = !rng.random_bool(0.15);
                }
            }
            let id = if rng.random_bool(0.2) { id_base + 10 + k as u64 } else { id_base + k as u64 };
            frame.push((id, m));
        }
        out.push(frame);
    }
    out
}

/// Largest relative error between autograd and central differences of
/// `f` at `x0`; entries with both magnitudes below `floor` are compared
/// absolutely against `floor`.
pub fn grad_check(x0: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor, h: f64, floor: f64) -> f64 {
    let var = candle_core::Var::from_tensor(&tn(x0.to_vec(), shape)).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let g = flat(grads.get(&var).unwrap());
    let eval = |x: Vec<f64>| scalar(&f(&tn(x, shape)));
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let mut xp = x0.to_vec();
        xp[i] += h;
        let mut xm = x0.to_vec();
        xm[i] -= h;
        let num = (eval(xp) - eval(xm)) / (2.0 * h);
        let err = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// Property-test settings without on-disk regression files.
pub fn prop_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config { cases, failure_persistence: None, ..Default::default() }
}
