//! Score fusion, candidate extraction and Soft-NMS.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::temporal_iou;
use crate::maps::DurationMap;

/// A scored temporal interval in snippet units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl Proposal {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        Self { start, end, score }
    }

    pub fn iou(&self, other: &Proposal) -> f64 {
        temporal_iou((self.start, self.end), (other.start, other.end))
    }
}

/// Score descending, then earlier start, then earlier end.
pub fn ranking_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.end.total_cmp(&b.end))
}

/// Fused classification and regression confidence maps, masked to valid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMaps {
    pub m_cc: DurationMap,
    pub m_cr: DurationMap,
}

pub type ProposalMap = DurationMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuppressionKind {
    #[default]
    Gaussian,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionConfig {
    pub sigma: f64,
    pub score_floor: f64,
    pub max_out: usize,
    #[serde(default)]
    pub kind: SuppressionKind,
    /// IoU above which hard suppression discards a proposal.
    #[serde(default = "default_hard_iou")]
    pub hard_iou: f64,
}

fn default_hard_iou() -> f64 {
    0.7
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        Self { sigma: 0.5, score_floor: 1e-4, max_out: 100, kind: SuppressionKind::Gaussian, hard_iou: 0.7 }
    }
}

impl SuppressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.max_out == 0 {
            return Err(Error::InvalidArgument("max_out must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `p = M^b · sqrt(M^cc · M^cr)` on valid cells, zero elsewhere.
pub fn fuse_scores(boundary: &DurationMap, conf: &ConfidenceMaps) -> Result<ProposalMap> {
    if !boundary.same_dims(&conf.m_cc) || !boundary.same_dims(&conf.m_cr) {
        return Err(Error::Shape(format!(
            "boundary map {}×{} vs confidence maps {}×{} / {}×{}",
            boundary.max_duration,
            boundary.len,
            conf.m_cc.max_duration,
            conf.m_cc.len,
            conf.m_cr.max_duration,
            conf.m_cr.len
        )));
    }
    let mut out = DurationMap::zeros(boundary.max_duration, boundary.len);
    for j in 0..boundary.max_duration {
        for i in 0..boundary.len.saturating_sub(j) {
            out.set(j, i, boundary.get(j, i) * (conf.m_cc.get(j, i) * conf.m_cr.get(j, i)).sqrt());
        }
    }
    Ok(out)
}

/// Every valid, non-degenerate (`j ≥ 1`) cell with positive score, ranked.
pub fn extract_candidates(map: &ProposalMap) -> Vec<Proposal> {
    let mut out = Vec::new();
    for j in 1..map.max_duration {
        for i in 0..map.len.saturating_sub(j) {
            let s = map.get(j, i);
            if s > 0.0 {
                out.push(Proposal::new(i as f64, (i + j) as f64, s));
            }
        }
    }
    out.sort_by(ranking_order);
    out
}

/// Greedy suppression: keep the current best, decay the rest by their overlap
/// with it, repeat. Gaussian decay multiplies by `exp(−IoU²/σ)`; hard mode
/// zeroes anything above `hard_iou`.
pub fn soft_nms(candidates: &[Proposal], cfg: &SuppressionConfig) -> Vec<Proposal> {
    let mut pool: Vec<Proposal> = candidates.to_vec();
    pool.sort_by(ranking_order);
    let mut kept = Vec::new();
    while !pool.is_empty() && kept.len() < cfg.max_out {
        let best_idx = pool
            .iter()
            .enumerate()
            .min_by(|a, b| ranking_order(a.1, b.1))
            .map(|(k, _)| k)
            .expect("pool is non-empty");
        let best = pool.remove(best_idx);
        for p in &mut pool {
            let iou = best.iou(p);
            p.score *= match cfg.kind {
                SuppressionKind::Gaussian => (-(iou * iou) / cfg.sigma).exp(),
                SuppressionKind::Hard => {
                    if iou > cfg.hard_iou {
                        0.0
                    } else {
                        1.0
                    }
                }
            };
        }
        pool.retain(|p| p.score >= cfg.score_floor);
        kept.push(best);
    }
    kept
}

/// Per-video proposal document, sorted by score descending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalFile {
    pub id: String,
    pub proposals: Vec<Proposal>,
}

pub fn write_proposals(path: &Path, doc: &ProposalFile) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_proposals(path: &Path) -> Result<ProposalFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
