//! Two-stage balanced sampling of confidence-map cells: IoU-balanced
//! positive/negative counts, then scale-balanced re-sampling over duration
//! regions.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng_from_seed, Rng};
use crate::synthdata::LabelSet;

pub const POSITIVE_IOU: f64 = 0.7;
pub const NEGATIVE_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellSample {
    /// Start index.
    pub i: usize,
    /// Duration index.
    pub j: usize,
    pub target: f64,
    pub is_positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub lambda: f64,
    /// Upper edges of the normalised-duration regions; the first region starts at 0.
    pub scale_edges: Vec<f64>,
    pub n_cells: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { lambda: 0.15, scale_edges: vec![0.3, 0.7, 1.0], n_cells: 64, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidArgument(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if self.scale_edges.is_empty() || *self.scale_edges.last().unwrap() != 1.0 {
            return Err(Error::InvalidArgument("scale regions must end at 1.0".into()));
        }
        if self.scale_edges.windows(2).any(|w| !(w[0] < w[1])) || !(self.scale_edges[0] > 0.0) {
            return Err(Error::InvalidArgument("scale region edges must increase strictly from above 0".into()));
        }
        if self.n_cells < 2 {
            return Err(Error::InvalidArgument("n_cells must be ≥ 2".into()));
        }
        Ok(())
    }

    /// Region of a normalised duration: `[0, e0]`, `(e0, e1]`, ...
    pub fn region_of(&self, normalized: f64) -> usize {
        self.scale_edges
            .iter()
            .position(|&e| normalized <= e)
            .unwrap_or(self.scale_edges.len() - 1)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub positives: Vec<CellSample>,
    pub negatives: Vec<CellSample>,
    pub ignored: Vec<CellSample>,
}

/// Splits every valid cell into positive (> 0.7), negative (< 0.3) and ignored.
pub fn partition_cells(labels: &LabelSet) -> Partition {
    let mut part = Partition::default();
    let t = labels.window_len;
    for j in 0..labels.max_duration {
        for i in 0..t.saturating_sub(j) {
            let target = labels.conf(j, i);
            let mut cell = CellSample { i, j, target, is_positive: false };
            if target > POSITIVE_IOU {
                cell.is_positive = true;
                part.positives.push(cell);
            } else if target < NEGATIVE_IOU {
                part.negatives.push(cell);
            } else {
                part.ignored.push(cell);
            }
        }
    }
    part
}

/// Boosts region ratios at or below `lambda` to `λ·exp(r/λ − 1)`; larger ratios pass through.
pub fn rebalance_ratio(r: f64, lambda: f64) -> f64 {
    if r <= lambda {
        lambda * (r / lambda - 1.0).exp()
    } else {
        r
    }
}

/// Applies [`rebalance_ratio`] to a ratio vector summing to one.
pub fn scale_rebalance(ratios: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::InvalidArgument(format!("ratios {ratios:?} must be non-negative and sum to 1")));
    }
    Ok(ratios.iter().map(|&r| rebalance_ratio(r, lambda)).collect())
}

/// Sampling probability per region: re-balanced ratios renormalised over the
/// non-empty regions.
pub fn region_probabilities(counts: &[usize], lambda: f64) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    let ratios: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let adjusted: Vec<f64> = ratios
        .iter()
        .zip(counts)
        .map(|(&r, &c)| if c == 0 { 0.0 } else { rebalance_ratio(r, lambda) })
        .collect();
    let z: f64 = adjusted.iter().sum();
    adjusted.iter().map(|a| a / z).collect()
}

fn draw_region(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = k;
            acc += p;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Draws `n` cells of one polarity: region per draw from the re-balanced
/// probabilities, then cells within each region without replacement until it
/// is exhausted, with replacement beyond that.
fn scale_balanced_draw(cells: &[CellSample], n: usize, cfg: &SamplerConfig, window_len: usize, rng: &mut Rng) -> Vec<CellSample> {
    let nr = cfg.scale_edges.len();
    let mut by_region: Vec<Vec<CellSample>> = vec![Vec::new(); nr];
    for c in cells {
        by_region[cfg.region_of(c.j as f64 / window_len as f64)].push(*c);
    }
    let counts: Vec<usize> = by_region.iter().map(Vec::len).collect();
    let probs = region_probabilities(&counts, cfg.lambda);
    let mut quota = vec![0usize; nr];
    for _ in 0..n {
        quota[draw_region(&probs, rng)] += 1;
    }
    let mut out = Vec::with_capacity(n);
    for (region, &q) in by_region.iter_mut().zip(&quota) {
        if q == 0 {
            continue;
        }
        region.shuffle(rng);
        let take = q.min(region.len());
        out.extend_from_slice(&region[..take]);
        for _ in take..q {
            out.push(region[rng.random_range(0..region.len())]);
        }
    }
    out
}

/// Classification cells: ⌈n/2⌉ positives and ⌊n/2⌋ negatives, each polarity
/// scale-balanced. Fails when either polarity is empty.
pub fn two_stage_sample(labels: &LabelSet, cfg: &SamplerConfig) -> Result<Vec<CellSample>> {
    let mut rng = rng_from_seed(cfg.seed);
    two_stage_sample_with(labels, cfg, &mut rng)
}

pub fn two_stage_sample_with(labels: &LabelSet, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Vec<CellSample>> {
    let part = partition_cells(labels);
    if part.positives.is_empty() || part.negatives.is_empty() {
        return Err(Error::Infeasible(format!(
            "window has {} positive and {} negative cells",
            part.positives.len(),
            part.negatives.len()
        )));
    }
    let n_pos = cfg.n_cells.div_ceil(2);
    let n_neg = cfg.n_cells / 2;
    let mut out = scale_balanced_draw(&part.positives, n_pos, cfg, labels.window_len, rng);
    out.extend(scale_balanced_draw(&part.negatives, n_neg, cfg, labels.window_len, rng));
    Ok(out)
}

/// Regression cells: half from cells with positive IoU target, half from
/// zero-target cells, uniform within each group.
pub fn regression_sample_with(labels: &LabelSet, n: usize, rng: &mut Rng) -> Vec<CellSample> {
    let mut pos = Vec::new();
    let mut zero = Vec::new();
    for j in 0..labels.max_duration {
        for i in 0..labels.window_len.saturating_sub(j) {
            let target = labels.conf(j, i);
            let cell = CellSample { i, j, target, is_positive: target > POSITIVE_IOU };
            if target > 0.0 {
                pos.push(cell);
            } else {
                zero.push(cell);
            }
        }
    }
    let mut draw = |group: &mut Vec<CellSample>, k: usize, out: &mut Vec<CellSample>| {
        if group.is_empty() || k == 0 {
            return;
        }
        group.shuffle(rng);
        let take = k.min(group.len());
        out.extend_from_slice(&group[..take]);
        for _ in take..k {
            out.push(group[rng.random_range(0..group.len())]);
        }
    };
    let (mut n_pos, mut n_zero) = (n.div_ceil(2), n / 2);
    if pos.is_empty() {
        n_zero = n;
        n_pos = 0;
    } else if zero.is_empty() {
        n_pos = n;
        n_zero = 0;
    }
    let mut out = Vec::with_capacity(n);
    draw(&mut pos, n_pos, &mut out);
    draw(&mut zero, n_zero, &mut out);
    out
}
