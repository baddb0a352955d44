//! Proposal and detection metrics: temporal IoU, AR@AN, AUC of the AR–AN
//! curve and mean average precision.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Proposal;
use crate::synthdata::ActionInstance;

/// IoU of two closed intervals; zero when the union is empty.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of two proper intervals (`start < end`).
pub fn iou_1d(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for iv in [a, b] {
        if !(iv.0 < iv.1) {
            return Err(Error::InvalidArgument(format!("degenerate interval [{}, {}]", iv.0, iv.1)));
        }
    }
    Ok(temporal_iou(a, b))
}

/// How recall is averaged across videos.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecallAveraging {
    /// Mean over thresholds per video, then mean over videos.
    #[default]
    PerVideo,
    /// Recalled ground truths over all ground truths, per threshold, then mean over thresholds.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    pub an_max: usize,
    #[serde(default)]
    pub averaging: RecallAveraging,
}

fn threshold_range(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| ((lo + k as f64 * step) * 1e6).round() / 1e6).collect()
}

impl EvalConfig {
    pub fn activitynet() -> Self {
        Self { tiou_thresholds: threshold_range(0.5, 0.95, 0.05), an_max: 100, averaging: RecallAveraging::PerVideo }
    }

    pub fn thumos() -> Self {
        Self { tiou_thresholds: threshold_range(0.5, 1.0, 0.05), an_max: 100, averaging: RecallAveraging::PerVideo }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiou_thresholds.is_empty() {
            return Err(Error::InvalidArgument("tiou_thresholds is empty".into()));
        }
        for w in self.tiou_thresholds.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "tiou_thresholds must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&t) = self.tiou_thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::InvalidArgument(format!("tiou threshold {t} outside (0, 1]")));
        }
        if self.an_max == 0 {
            return Err(Error::InvalidArgument("an_max must be ≥ 1".into()));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::activitynet()
    }
}

/// AR as a function of the per-video proposal budget AN = 1..=an_max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub an_values: Vec<usize>,
    pub ar_values: Vec<f64>,
    /// `recall[t][k]`: recall at threshold `t` with budget `an_values[k]`.
    pub per_threshold: Vec<Vec<f64>>,
}

impl RecallCurve {
    pub fn ar_at(&self, an: usize) -> Option<f64> {
        self.an_values.iter().position(|&a| a == an).map(|k| self.ar_values[k])
    }
}

/// Ground truths recalled by one-to-one greedy matching, highest IoU first.
pub fn greedy_matches(proposals: &[(f64, f64)], gts: &[(f64, f64)], threshold: f64) -> usize {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (p, &pi) in proposals.iter().enumerate() {
        for (g, &gi) in gts.iter().enumerate() {
            let iou = temporal_iou(pi, gi);
            if iou >= threshold {
                pairs.push((iou, p, g));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; proposals.len()];
    let mut used_g = vec![false; gts.len()];
    let mut matched = 0;
    for (_, p, g) in pairs {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            matched += 1;
        }
    }
    matched
}

/// One video's ranked proposals (score-descending) with its ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoResult {
    pub id: String,
    pub proposals: Vec<Proposal>,
    pub ground_truth: Vec<ActionInstance>,
}

pub fn ar_at_an(videos: &[VideoResult], cfg: &EvalConfig) -> RecallCurve {
    let an_values: Vec<usize> = (1..=cfg.an_max).collect();
    let nt = cfg.tiou_thresholds.len();
    let usable: Vec<&VideoResult> = videos
        .iter()
        .filter(|v| {
            if v.ground_truth.is_empty() {
                warn!("video {} has no ground truth; excluded from recall", v.id);
                false
            } else {
                true
            }
        })
        .collect();
    // matched[v][t][k]
    let matched: Vec<Vec<Vec<usize>>> = usable
        .iter()
        .map(|v| {
            let gts: Vec<(f64, f64)> = v.ground_truth.iter().map(|g| (g.start, g.end)).collect();
            let props: Vec<(f64, f64)> = v.proposals.iter().map(|p| (p.start, p.end)).collect();
            cfg.tiou_thresholds
                .iter()
                .map(|&t| an_values.iter().map(|&an| greedy_matches(&props[..an.min(props.len())], &gts, t)).collect())
                .collect()
        })
        .collect();
    let mut per_threshold = vec![vec![0.0; an_values.len()]; nt];
    let mut ar_values = vec![0.0; an_values.len()];
    if usable.is_empty() {
        return RecallCurve { an_values, ar_values, per_threshold };
    }
    let total_gt: usize = usable.iter().map(|v| v.ground_truth.len()).sum();
    for t in 0..nt {
        for k in 0..an_values.len() {
            per_threshold[t][k] = match cfg.averaging {
                RecallAveraging::PerVideo => {
                    usable
                        .iter()
                        .zip(&matched)
                        .map(|(v, m)| m[t][k] as f64 / v.ground_truth.len() as f64)
                        .sum::<f64>()
                        / usable.len() as f64
                }
                RecallAveraging::Pooled => {
                    matched.iter().map(|m| m[t][k]).sum::<usize>() as f64 / total_gt as f64
                }
            };
        }
    }
    for k in 0..an_values.len() {
        ar_values[k] = match cfg.averaging {
            RecallAveraging::PerVideo => {
                usable
                    .iter()
                    .zip(&matched)
                    .map(|(v, m)| {
                        (0..nt).map(|t| m[t][k] as f64 / v.ground_truth.len() as f64).sum::<f64>() / nt as f64
                    })
                    .sum::<f64>()
                    / usable.len() as f64
            }
            RecallAveraging::Pooled => (0..nt).map(|t| per_threshold[t][k]).sum::<f64>() / nt as f64,
        };
    }
    RecallCurve { an_values, ar_values, per_threshold }
}

/// Trapezoidal area under AR(AN) over `[0, an_max]` with AR(0) = 0,
/// normalised by `an_max` and expressed in percent.
pub fn auc(curve: &RecallCurve) -> f64 {
    let mut area = 0.0;
    let (mut prev_an, mut prev_ar) = (0usize, 0.0);
    for (&an, &ar) in curve.an_values.iter().zip(&curve.ar_values) {
        area += (an - prev_an) as f64 * (ar + prev_ar) / 2.0;
        prev_an = an;
        prev_ar = ar;
    }
    let span = curve.an_values.last().copied().unwrap_or(1).max(1) as f64;
    100.0 * area / span
}

/// A scored detection with its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// Mean AP over classes at each threshold.
    pub map: Vec<f64>,
    pub average: f64,
    /// `ap[class][t]`.
    pub per_class: BTreeMap<u32, Vec<f64>>,
}

/// All-point interpolated average precision from a ranked TP/FP sequence.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            ntp += 1;
        } else {
            nfp += 1;
        }
        prec.push(ntp as f64 / (ntp + nfp) as f64);
        rec.push(ntp as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Marks each detection (ranked by score) as TP or FP against same-video
/// ground truths of its class: the unmatched ground truth with highest IoU
/// ≥ `threshold` is consumed.
fn rank_and_match(dets: &[(usize, Detection)], gts: &[Vec<ActionInstance>], label: u32, threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.score.total_cmp(&dets[a].1.score).then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|k| {
            let (v, d) = dets[k];
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts[v].iter().enumerate() {
                if gt.label != label || used[v][g] {
                    continue;
                }
                let iou = temporal_iou((d.start, d.end), (gt.start, gt.end));
                if iou >= threshold && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            if let Some((_, g)) = best {
                used[v][g] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Detection mAP per threshold; classes absent from the ground truth are skipped.
pub fn detection_map(detections: &[Vec<Detection>], gts: &[Vec<ActionInstance>], thresholds: &[f64]) -> Result<MapReport> {
    if detections.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection lists for {} videos",
            detections.len(),
            gts.len()
        )));
    }
    let mut gt_classes: BTreeMap<u32, usize> = BTreeMap::new();
    for g in gts.iter().flatten() {
        *gt_classes.entry(g.label).or_default() += 1;
    }
    for d in detections.iter().flatten() {
        if !gt_classes.contains_key(&d.label) {
            warn!("class {} has no ground truth; its AP is undefined and excluded", d.label);
        }
    }
    let mut per_class = BTreeMap::new();
    for (&label, &n_gt) in &gt_classes {
        let dets: Vec<(usize, Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(v, ds)| ds.iter().filter(|d| d.label == label).map(move |d| (v, *d)))
            .collect();
        let aps = thresholds
            .iter()
            .map(|&t| average_precision(&rank_and_match(&dets, gts, label, t), n_gt))
            .collect();
        per_class.insert(label, aps);
    }
    let map: Vec<f64> = (0..thresholds.len())
        .map(|t| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(|aps: &Vec<f64>| aps[t]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let average = if map.is_empty() { 0.0 } else { map.iter().sum::<f64>() / map.len() as f64 };
    Ok(MapReport { thresholds: thresholds.to_vec(), map, average, per_class })
}
