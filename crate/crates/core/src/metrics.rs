//! Segmentation metrics (ARI, MSC and their foreground variants) and
//! mask-based multi-object tracking metrics.

use std::collections::{BTreeMap, HashMap};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::assignment::solve_assignment;
use crate::data_synth::VideoEpisode;
use crate::error::{Error, Result};
use crate::net::StepOutputs;

/// Integer label map. On the ground-truth side label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFrame {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelFrame {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} frame", labels.len())));
        }
        Ok(LabelFrame { height, width, labels })
    }

    pub fn is_foreground(&self, pixel: usize) -> bool {
        self.labels[pixel] != 0
    }
}

/// One detection: a track id and the pixels it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub track_id: u64,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrackSet {
    pub frames: Vec<Vec<Detection>>,
}

impl TrackSet {
    /// One detection per non-zero label.
    pub fn from_label_frames(frames: &[LabelFrame]) -> Self {
        TrackSet {
            frames: frames
                .iter()
                .map(|f| {
                    let mut ids: Vec<u32> = f.labels.iter().copied().filter(|&l| l != 0).collect();
                    ids.sort_unstable();
                    ids.dedup();
                    ids.into_iter()
                        .map(|id| Detection { track_id: id as u64, mask: f.labels.iter().map(|&l| l == id).collect() })
                        .collect()
                })
                .collect(),
        }
    }

    /// Same detections with a fresh id for every detection in every frame.
    pub fn without_identity(&self) -> Self {
        let mut next = 1;
        TrackSet {
            frames: self
                .frames
                .iter()
                .map(|dets| {
                    dets.iter()
                        .map(|d| {
                            next += 1;
                            Detection { track_id: next, mask: d.mask.clone() }
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (t, dets) in self.frames.iter().enumerate() {
            let mut ids: Vec<u64> = dets.iter().map(|d| d.track_id).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Evaluation(format!("frame {t}: duplicate track id")));
            }
        }
        Ok(())
    }
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

fn check_shapes(pred: &LabelFrame, gt: &LabelFrame) -> Result<()> {
    if pred.labels.len() != gt.labels.len() || pred.height != gt.height {
        return Err(Error::Shape(format!(
            "pred {}x{} vs gt {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// Adjusted Rand index between two pixel partitions. With `fg_only` only
/// pixels whose gt label is non-zero count; `None` if there are none.
/// Fewer than two pixels, or partitions that leave no room for chance
/// agreement (`max index == expected index`), score 1.
pub fn ari(pred: &LabelFrame, gt: &LabelFrame, fg_only: bool) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let mut table: HashMap<(u32, u32), u64> = HashMap::new();
    let mut n = 0u64;
    for (p, g) in pred.labels.iter().zip(&gt.labels) {
        if fg_only && *g == 0 {
            continue;
        }
        *table.entry((*p, *g)).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Ok(if fg_only { None } else { Some(1.0) });
    }
    if n < 2 {
        return Ok(Some(1.0));
    }
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    let mut index = 0.0;
    for (&(p, g), &c) in &table {
        index += choose2(c);
        *rows.entry(p).or_default() += c;
        *cols.entry(g).or_default() += c;
    }
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(Some(1.0));
    }
    Ok(Some((index - expected) / (max - expected)))
}

/// Mean segmentation covering: gt segments weighted by size, each scored by
/// its best IoU with a predicted segment. With `fg_only` pixels of the gt
/// background are ignored entirely; `None` if no foreground exists.
pub fn msc(pred: &LabelFrame, gt: &LabelFrame, fg_only: bool) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
    let mut gt_size: BTreeMap<u32, u64> = BTreeMap::new();
    let mut pred_size: HashMap<u32, u64> = HashMap::new();
    for (p, g) in pred.labels.iter().zip(&gt.labels) {
        if fg_only && *g == 0 {
            continue;
        }
        *inter.entry((*g, *p)).or_default() += 1;
        *gt_size.entry(*g).or_default() += 1;
        *pred_size.entry(*p).or_default() += 1;
    }
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for (&(g, p), &i) in &inter {
        let union = gt_size[&g] + pred_size[&p] - i;
        let iou = i as f64 / union as f64;
        let e = best.entry(g).or_insert(0.0);
        if iou > *e {
            *e = iou;
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (g, size) in &gt_size {
        num += *size as f64 * best[g];
        den += *size as f64;
    }
    Ok(if den == 0.0 { None } else { Some(num / den) })
}

/// Matching constants for the tracking metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotConfig {
    pub iou_threshold: f64,
    /// Fraction of a track's lifetime needed for mostly detected/tracked.
    pub lifetime_threshold: f64,
}

impl Default for MotConfig {
    fn default() -> Self {
        MotConfig { iou_threshold: 0.5, lifetime_threshold: 0.8 }
    }
}

/// Raw tracking counts; they add across episodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MotCounts {
    pub num_gt: usize,
    pub num_pred: usize,
    pub matches: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub id_switches: usize,
    pub iou_sum: f64,
    pub gt_tracks: usize,
    pub mostly_detected: usize,
    pub mostly_tracked: usize,
}

impl MotCounts {
    pub fn add(&mut self, o: &MotCounts) {
        self.num_gt += o.num_gt;
        self.num_pred += o.num_pred;
        self.matches += o.matches;
        self.misses += o.misses;
        self.false_positives += o.false_positives;
        self.id_switches += o.id_switches;
        self.iou_sum += o.iou_sum;
        self.gt_tracks += o.gt_tracks;
        self.mostly_detected += o.mostly_detected;
        self.mostly_tracked += o.mostly_tracked;
    }

    pub fn report(&self) -> Result<MotReport> {
        if self.num_gt == 0 {
            return Err(Error::Evaluation("ground truth contains no detections".into()));
        }
        let gt = self.num_gt as f64;
        let pct = |x: usize| 100.0 * x as f64 / gt;
        let tracks = self.gt_tracks.max(1) as f64;
        Ok(MotReport {
            mota: 100.0 * (1.0 - (self.misses + self.false_positives + self.id_switches) as f64 / gt),
            motp: if self.matches == 0 { 0.0 } else { 100.0 * self.iou_sum / self.matches as f64 },
            matched: pct(self.matches),
            id_switches: self.id_switches,
            id_switch_pct: pct(self.id_switches),
            false_positives: pct(self.false_positives),
            misses: pct(self.misses),
            mostly_detected: 100.0 * self.mostly_detected as f64 / tracks,
            mostly_tracked: 100.0 * self.mostly_tracked as f64 / tracks,
            counts: self.clone(),
        })
    }
}

/// Tracking summary; all values except `id_switches` are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotReport {
    #[serde(rename = "MOTA")]
    pub mota: f64,
    #[serde(rename = "MOTP")]
    pub motp: f64,
    #[serde(rename = "Match")]
    pub matched: f64,
    #[serde(rename = "ID S.")]
    pub id_switches: usize,
    #[serde(rename = "ID S. %")]
    pub id_switch_pct: f64,
    #[serde(rename = "FPs")]
    pub false_positives: f64,
    #[serde(rename = "Miss")]
    pub misses: f64,
    #[serde(rename = "MD")]
    pub mostly_detected: f64,
    #[serde(rename = "MT")]
    pub mostly_tracked: f64,
    pub counts: MotCounts,
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        i += (*x && *y) as usize;
        u += (*x || *y) as usize;
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Per-frame matches `(gt index, pred index, iou)`.
pub type FrameMatches = Vec<(usize, usize, f64)>;

/// Frame matching: correspondences from earlier frames are kept while their
/// IoU stays above threshold; the rest are assigned by maximum cardinality,
/// then minimum total `1 - IoU`.
pub fn match_frames(pred: &TrackSet, gt: &TrackSet, cfg: &MotConfig) -> Result<Vec<FrameMatches>> {
    if pred.frames.len() != gt.frames.len() {
        return Err(Error::Evaluation(format!("{} predicted frames vs {} gt frames", pred.frames.len(), gt.frames.len())));
    }
    pred.validate()?;
    gt.validate()?;
    let mut last: HashMap<u64, u64> = HashMap::new();
    let mut out = Vec::with_capacity(gt.frames.len());
    for (gdets, pdets) in gt.frames.iter().zip(&pred.frames) {
        let iou: Vec<Vec<f64>> = gdets.iter().map(|g| pdets.iter().map(|p| mask_iou(&g.mask, &p.mask)).collect()).collect();
        let mut matches = Vec::new();
        let mut gt_used = vec![false; gdets.len()];
        let mut pred_used = vec![false; pdets.len()];
        for (gi, g) in gdets.iter().enumerate() {
            if let Some(pid) = last.get(&g.track_id) {
                if let Some(pi) = pdets.iter().position(|p| p.track_id == *pid) {
                    if !pred_used[pi] && iou[gi][pi] >= cfg.iou_threshold {
                        matches.push((gi, pi, iou[gi][pi]));
                        gt_used[gi] = true;
                        pred_used[pi] = true;
                    }
                }
            }
        }
        let free_g: Vec<usize> = (0..gdets.len()).filter(|&i| !gt_used[i]).collect();
        let free_p: Vec<usize> = (0..pdets.len()).filter(|&i| !pred_used[i]).collect();
        if !free_g.is_empty() && !free_p.is_empty() {
            // Forbidden pairs cost more than any set of allowed ones, so the
            // solver first maximises the number of allowed matches.
            let big = 2.0 * (free_g.len().max(free_p.len()) + 1) as f64;
            let cost: Vec<Vec<f64>> = free_g
                .iter()
                .map(|&g| {
                    free_p.iter().map(|&p| if iou[g][p] >= cfg.iou_threshold { 1.0 - iou[g][p] } else { big }).collect()
                })
                .collect();
            for (r, c) in solve_assignment(&cost).into_iter().enumerate() {
                if let Some(c) = c {
                    let (g, p) = (free_g[r], free_p[c]);
                    if iou[g][p] >= cfg.iou_threshold {
                        matches.push((g, p, iou[g][p]));
                    }
                }
            }
        }
        matches.sort_by_key(|m| m.0);
        for &(g, p, _) in &matches {
            last.insert(gdets[g].track_id, pdets[p].track_id);
        }
        out.push(matches);
    }
    Ok(out)
}

/// Counts derived from a fixed set of frame matches.
pub fn count_from_matches(pred: &TrackSet, gt: &TrackSet, matches: &[FrameMatches], cfg: &MotConfig) -> MotCounts {
    let mut c = MotCounts::default();
    let mut last: HashMap<u64, u64> = HashMap::new();
    let mut lifetime: BTreeMap<u64, usize> = BTreeMap::new();
    let mut detected: BTreeMap<u64, usize> = BTreeMap::new();
    let mut partners: BTreeMap<u64, BTreeMap<u64, usize>> = BTreeMap::new();
    for ((gdets, pdets), fm) in gt.frames.iter().zip(&pred.frames).zip(matches) {
        c.num_gt += gdets.len();
        c.num_pred += pdets.len();
        c.matches += fm.len();
        c.misses += gdets.len() - fm.len();
        c.false_positives += pdets.len() - fm.len();
        for g in gdets {
            *lifetime.entry(g.track_id).or_default() += 1;
        }
        for &(gi, pi, iou) in fm {
            let (gid, pid) = (gdets[gi].track_id, pdets[pi].track_id);
            c.iou_sum += iou;
            if let Some(prev) = last.insert(gid, pid) {
                if prev != pid {
                    c.id_switches += 1;
                }
            }
            *detected.entry(gid).or_default() += 1;
            *partners.entry(gid).or_default().entry(pid).or_default() += 1;
        }
    }
    c.gt_tracks = lifetime.len();
    for (gid, &life) in &lifetime {
        let need = cfg.lifetime_threshold * life as f64;
        if detected.get(gid).copied().unwrap_or(0) as f64 >= need {
            c.mostly_detected += 1;
        }
        let best = partners.get(gid).and_then(|m| m.values().max().copied()).unwrap_or(0);
        if best as f64 >= need {
            c.mostly_tracked += 1;
        }
    }
    c
}

pub fn mot_counts(pred: &TrackSet, gt: &TrackSet, cfg: &MotConfig) -> Result<MotCounts> {
    let matches = match_frames(pred, gt, cfg)?;
    Ok(count_from_matches(pred, gt, &matches, cfg))
}

pub fn mot_evaluate(pred: &TrackSet, gt: &TrackSet, cfg: &MotConfig) -> Result<MotReport> {
    mot_counts(pred, gt, cfg)?.report()
}

/// Per-pixel argmax over `[fg..., bg]` masks. Pixels won by an object that
/// survived filtering get its slot id, everything else is 0.
pub fn slots_to_labelframes(outputs: &[StepOutputs]) -> Result<(Vec<LabelFrame>, TrackSet)> {
    let mut frames = Vec::with_capacity(outputs.len());
    for out in outputs {
        let (h, w) = out.masks.shape();
        let all = out.masks.all()?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let k = all.len() / (h * w);
        let labels = (0..h * w)
            .map(|px| {
                let mut best = k - 1;
                for c in 0..k {
                    if all[c * h * w + px] > all[best * h * w + px] {
                        best = c;
                    }
                }
                if best + 1 == k {
                    0
                } else {
                    out.objects[best].id.map_or(0, |id| id as u32)
                }
            })
            .collect();
        frames.push(LabelFrame::new(h, w, labels)?);
    }
    let tracks = TrackSet::from_label_frames(&frames);
    Ok((frames, tracks))
}

/// Ground-truth label frames and tracks of an episode. Labels are the
/// persistent track ids so they agree across frames.
pub fn episode_ground_truth(ep: &VideoEpisode) -> Result<(Vec<LabelFrame>, TrackSet)> {
    let mut frames = Vec::with_capacity(ep.len());
    for t in 0..ep.len() {
        let ids = &ep.gt_track_ids[t];
        let labels = ep.gt_masks[t].iter().map(|&l| if l == 0 { 0 } else { ids.get(&l).copied().unwrap_or(l as u32) }).collect();
        frames.push(LabelFrame::new(ep.height, ep.width, labels)?);
    }
    let tracks = TrackSet::from_label_frames(&frames);
    Ok((frames, tracks))
}

/// Frame-averaged segmentation scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    #[serde(rename = "ARI")]
    pub ari: f64,
    #[serde(rename = "ARI-FG")]
    pub ari_fg: f64,
    #[serde(rename = "MSC")]
    pub msc: f64,
    #[serde(rename = "MSC-FG")]
    pub msc_fg: f64,
    pub frames: usize,
    /// Frames without gt foreground, excluded from the FG averages.
    pub skipped_fg_frames: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SegmentationAccumulator {
    ari: f64,
    ari_fg: f64,
    msc: f64,
    msc_fg: f64,
    frames: usize,
    fg_frames: usize,
}

impl SegmentationAccumulator {
    pub fn add(&mut self, pred: &LabelFrame, gt: &LabelFrame) -> Result<()> {
        self.ari += ari(pred, gt, false)?.unwrap_or(1.0);
        self.msc += msc(pred, gt, false)?.unwrap_or(1.0);
        self.frames += 1;
        if let (Some(a), Some(m)) = (ari(pred, gt, true)?, msc(pred, gt, true)?) {
            self.ari_fg += a;
            self.msc_fg += m;
            self.fg_frames += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> SegmentationScores {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        SegmentationScores {
            ari: mean(self.ari, self.frames),
            ari_fg: mean(self.ari_fg, self.fg_frames),
            msc: mean(self.msc, self.frames),
            msc_fg: mean(self.msc_fg, self.fg_frames),
            frames: self.frames,
            skipped_fg_frames: self.frames - self.fg_frames,
        }
    }
}

/// Structured evaluation result written by the evaluation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub episodes: usize,
    pub segmentation: SegmentationScores,
    pub tracking: Option<MotReport>,
    /// Same detections with fresh ids in every frame.
    pub no_tracking_baseline: Option<MotReport>,
    pub mot_config: MotConfig,
    pub conventions: Vec<String>,
}

impl MetricsReport {
    pub fn conventions() -> Vec<String> {
        vec![
            "ARI is 1 when a frame has fewer than two pixels or max index equals expected index".into(),
            "FG variants ignore ground-truth background pixels and skip frames without foreground".into(),
            "MOT percentages are relative to the number of ground-truth detections".into(),
        ]
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Accumulates segmentation and tracking metrics over episodes.
pub fn evaluate_predictions(
    split: &str,
    items: &[(Vec<LabelFrame>, TrackSet, Vec<LabelFrame>, TrackSet)],
    cfg: &MotConfig,
) -> Result<MetricsReport> {
    let mut seg = SegmentationAccumulator::default();
    let mut mot = MotCounts::default();
    let mut base = MotCounts::default();
    for (pred_frames, pred_tracks, gt_frames, gt_tracks) in items {
        for (p, g) in pred_frames.iter().zip(gt_frames) {
            seg.add(p, g)?;
        }
        mot.add(&mot_counts(pred_tracks, gt_tracks, cfg)?);
        base.add(&mot_counts(&pred_tracks.without_identity(), gt_tracks, cfg)?);
    }
    Ok(MetricsReport {
        split: split.to_string(),
        episodes: items.len(),
        segmentation: seg.finish(),
        tracking: mot.report().ok(),
        no_tracking_baseline: base.report().ok(),
        mot_config: *cfg,
        conventions: MetricsReport::conventions(),
    })
}
