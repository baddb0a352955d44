//! Whole-video inference: sliding windows, boundary and confidence maps,
//! score fusion and suppression.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cbg::{build_boundary_map, cbg_forward, feature_input, BoundaryHeatmaps, FusionMode};
use crate::error::Result;
use crate::inference::{extract_candidates, fuse_scores, ranking_order, soft_nms, Proposal, ProposalMap, SuppressionConfig};
use crate::model::Model;
use crate::numerics::{SamplePlan, Scalar, Tape, Tensor};
use crate::prb::{confidence_maps, plan_for, prb_forward};
use crate::synthdata::{crop_features, window_offsets, VideoRecord};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default)]
    pub suppression: SuppressionConfig,
}

/// Everything one window produces at inference.
#[derive(Clone, Debug)]
pub struct WindowPrediction {
    pub heatmaps: BoundaryHeatmaps,
    pub proposal_map: ProposalMap,
}

pub struct Predictor<'a, S: Scalar> {
    pub model: &'a Model<S>,
    pub config: InferenceConfig,
    plan: Arc<SamplePlan<S>>,
}

impl<'a, S: Scalar> Predictor<'a, S> {
    pub fn new(model: &'a Model<S>, config: InferenceConfig) -> Result<Self> {
        config.suppression.validate()?;
        Ok(Self { model, config, plan: plan_for(&model.config) })
    }

    /// Fused proposal map of one `[l_w, C]` window.
    pub fn predict_window(&self, features: &Tensor<S>) -> Result<WindowPrediction> {
        let mut tape = Tape::new();
        let x = feature_input(&mut tape, features)?;
        let trace = cbg_forward(&mut tape, self.model, x, self.config.fusion)?;
        let heatmaps = BoundaryHeatmaps::from_trace(&tape, &trace);
        let prb = prb_forward(&mut tape, self.model, trace.base, &self.plan)?;
        let conf = confidence_maps(&tape, prb.maps)?;
        let mb = build_boundary_map(&heatmaps, self.model.config.max_duration)?;
        let proposal_map = fuse_scores(&mb, &conf)?;
        Ok(WindowPrediction { heatmaps, proposal_map })
    }

    /// Window offsets covering the whole video, the tail included.
    pub fn offsets(&self, length: usize) -> Vec<usize> {
        let lw = self.model.config.window_len;
        let mut offs = window_offsets(length, lw);
        if length > lw && offs.last().is_some_and(|&o| o + lw < length) {
            offs.push(length - lw);
        }
        offs
    }

    /// Candidates from every window in video coordinates, before suppression.
    /// Proposals reaching past the end of the video are dropped.
    pub fn candidates(&self, video: &VideoRecord<S>) -> Result<Vec<Proposal>> {
        let lw = self.model.config.window_len;
        let len = video.len() as f64;
        let mut all = Vec::new();
        for off in self.offsets(video.len()) {
            let crop = crop_features(&video.features, off, lw);
            let pred = self.predict_window(&crop)?;
            for p in extract_candidates(&pred.proposal_map) {
                let shifted = Proposal::new(p.start + off as f64, p.end + off as f64, p.score);
                if shifted.end <= len {
                    all.push(shifted);
                }
            }
        }
        all.sort_by(ranking_order);
        Ok(all)
    }

    /// Suppressed, ranked proposals for a whole video.
    pub fn infer_video(&self, video: &VideoRecord<S>) -> Result<Vec<Proposal>> {
        Ok(soft_nms(&self.candidates(video)?, &self.config.suppression))
    }
}
