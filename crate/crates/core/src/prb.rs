//! Proposal relation block: proposal feature sampling, sample-axis
//! contraction, position and channel self-attention, and the two confidence
//! maps.

use std::sync::Arc;

use crate::cbg::{base_forward, conv, feature_input};
use crate::error::{Error, Result};
use crate::inference::ConfidenceMaps;
use crate::maps::DurationMap;
use crate::model::{ConvIds, Model, ModelConfig};
use crate::numerics::{Scalar, SamplePlan, Tape, Tensor, Var};

/// Interpolation plan mapping `[C_r, T]` to `[D·T, C_r, N]`.
///
/// Cell `(j, i)` (row `j·T + i`) samples `N` uniform points over
/// `[i − ext·j, i + j + ext·j]`; each point linearly interpolates its two
/// neighbouring snippets, and neighbours outside `[0, T)` contribute nothing.
/// Invalid cells have no taps.
pub fn sample_plan<S: Scalar>(len: usize, max_duration: usize, samples: usize, extension: f64) -> SamplePlan<S> {
    let positions = max_duration * len;
    let mut offsets = Vec::with_capacity(positions * samples + 1);
    let mut taps = Vec::new();
    offsets.push(0);
    for j in 0..max_duration {
        for i in 0..len {
            let valid = i + j < len;
            let lo = i as f64 - extension * j as f64;
            let hi = (i + j) as f64 + extension * j as f64;
            for n in 0..samples {
                if valid {
                    let x = lo + (hi - lo) * n as f64 / (samples - 1) as f64;
                    let left = x.floor();
                    let frac = x - left;
                    for (t, w) in [(left, 1.0 - frac), (left + 1.0, frac)] {
                        if w > 0.0 && t >= 0.0 && t < len as f64 {
                            taps.push((t as usize, S::of(w)));
                        }
                    }
                }
                offsets.push(taps.len());
            }
        }
    }
    SamplePlan { positions, samples, len_in: len, offsets, taps }
}

pub fn plan_for<S: Scalar>(cfg: &ModelConfig) -> Arc<SamplePlan<S>> {
    Arc::new(sample_plan(cfg.window_len, cfg.max_duration, cfg.num_samples, cfg.sample_extension))
}

/// Reduces base features to `C_r` channels and samples every cell: `[D·T, C_r, N]`.
pub fn build_proposal_features<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, base: Var, plan: &Arc<SamplePlan<S>>) -> Result<Var> {
    let reduced = conv(tape, model, model.prb.reduce, base, 1)?;
    let reduced = tape.relu(reduced);
    tape.sample_time(reduced, Arc::clone(plan))
}

/// Contracts the `C_r × N` block of every cell into `prb_width` channels: `[P, L]`.
pub fn reduce_features<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, fp: Var) -> Result<Var> {
    let s = tape.shape(fp).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("proposal features must be [L, C_r, N], got {s:?}")));
    }
    let flat = tape.reshape(fp, vec![s[0], s[1] * s[2]])?;
    let cols = tape.transpose(flat)?;
    let y = conv(tape, model, model.prb.contract, cols, 0)?;
    Ok(tape.relu(y))
}

fn pointwise<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, ids: ConvIds, x: Var) -> Result<Var> {
    conv(tape, model, ids, x, 0)
}

/// Attended features and their attention matrix.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub attention: Var,
}

/// Position attention over `x: [P, L]`: `att = softmax_rows(Qᵀ K)` (`[L, L]`),
/// output `x + V · attᵀ`.
pub fn position_attention<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, x: Var) -> Result<Attended> {
    let q = pointwise(tape, model, model.prb.query, x)?;
    let k = pointwise(tape, model, model.prb.key, x)?;
    let v = pointwise(tape, model, model.prb.value, x)?;
    let qt = tape.transpose(q)?;
    let energy = tape.matmul(qt, k)?;
    let attention = tape.softmax(energy, 1)?;
    let at = tape.transpose(attention)?;
    let attended = tape.matmul(v, at)?;
    let output = tape.add(x, attended)?;
    Ok(Attended { output, attention })
}

/// Channel attention over `x: [P, L]`: `att = softmax_rows(x xᵀ)` (`[P, P]`),
/// output `x + att · x`.
pub fn channel_attention<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Attended> {
    let xt = tape.transpose(x)?;
    let energy = tape.matmul(x, xt)?;
    let attention = tape.softmax(energy, 1)?;
    let attended = tape.matmul(attention, x)?;
    let output = tape.add(x, attended)?;
    Ok(Attended { output, attention })
}

/// `[2, D, T]` mask: one on valid cells.
pub fn valid_mask<S: Scalar>(max_duration: usize, len: usize) -> Tensor<S> {
    let one: Vec<S> = (0..max_duration)
        .flat_map(|j| (0..len).map(move |i| if i + j < len { S::one() } else { S::zero() }))
        .collect();
    let mut data = one.clone();
    data.extend(one);
    Tensor::new(vec![2, max_duration, len], data).expect("mask shape")
}

/// Sums the skip branch (`reduced` through a pointwise conv) with the two
/// attention branches, then a 3×3 conv, ReLU, 1×1 conv and sigmoid; the result
/// `[2, D, T]` holds `M^cc` then `M^cr`, zeroed on invalid cells.
pub fn predict_confidence<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    reduced: Var,
    pos_out: Var,
    chan_out: Var,
) -> Result<Var> {
    let cfg = &model.config;
    let (d, t) = (cfg.max_duration, cfg.window_len);
    let skip = pointwise(tape, model, model.prb.skip, reduced)?;
    let agg = tape.add(skip, pos_out)?;
    let agg = tape.add(agg, chan_out)?;
    let p = tape.shape(agg)[0];
    let grid = tape.reshape(agg, vec![p, d, t])?;
    let ids = model.prb;
    let (w, b) = (tape.param(&model.store, ids.hidden.w), tape.param(&model.store, ids.hidden.b));
    let h = tape.conv2d(grid, w, b, 1, 1)?;
    let h = tape.relu(h);
    let (w, b) = (tape.param(&model.store, ids.head.w), tape.param(&model.store, ids.head.b));
    let logits = tape.conv2d(h, w, b, 1, 0)?;
    let probs = tape.sigmoid(logits);
    let mask = tape.constant(valid_mask(d, t));
    tape.mul(probs, mask)
}

#[derive(Clone, Copy, Debug)]
pub struct PrbTrace {
    pub features: Var,
    pub reduced: Var,
    pub position: Attended,
    pub channel: Attended,
    /// `[2, D, T]`: classification then regression map.
    pub maps: Var,
}

pub fn prb_forward<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, base: Var, plan: &Arc<SamplePlan<S>>) -> Result<PrbTrace> {
    let features = build_proposal_features(tape, model, base, plan)?;
    let reduced = reduce_features(tape, model, features)?;
    let position = position_attention(tape, model, reduced)?;
    let channel = channel_attention(tape, reduced)?;
    let maps = predict_confidence(tape, model, reduced, position.output, channel.output)?;
    Ok(PrbTrace { features, reduced, position, channel, maps })
}

/// Splits a `[2, D, T]` tape value into the two confidence maps.
pub fn confidence_maps<S: Scalar>(tape: &Tape<S>, maps: Var) -> Result<ConfidenceMaps> {
    let s = tape.shape(maps);
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::Shape(format!("confidence maps must be [2, D, T], got {s:?}")));
    }
    let (d, t) = (s[1], s[2]);
    let v = tape.value(maps).to_f64_vec();
    Ok(ConfidenceMaps {
        m_cc: DurationMap::from_values(d, t, v[..d * t].to_vec())?,
        m_cr: DurationMap::from_values(d, t, v[d * t..].to_vec())?,
    })
}

/// Confidence maps for one `[l_w, C]` window (base module included).
pub fn predict_maps<S: Scalar>(model: &Model<S>, features: &Tensor<S>, plan: &Arc<SamplePlan<S>>) -> Result<ConfidenceMaps> {
    let mut tape = Tape::new();
    let x = feature_input(&mut tape, features)?;
    let base = base_forward(&mut tape, model, x)?;
    let trace = prb_forward(&mut tape, model, base, plan)?;
    confidence_maps(&tape, trace.maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_skips_invalid_cells_and_zero_weights() {
        let plan: SamplePlan<f64> = sample_plan(8, 4, 5, 0.25);
        for j in 0..4 {
            for i in 0..8 {
                for n in 0..5 {
                    let q = (j * 8 + i) * 5 + n;
                    let taps = &plan.taps[plan.offsets[q]..plan.offsets[q + 1]];
                    if i + j >= 8 {
                        assert!(taps.is_empty());
                    }
                    assert!(taps.iter().all(|&(t, w)| t < 8 && w > 0.0));
                }
            }
        }
    }

    #[test]
    fn mask_marks_valid_cells() {
        let m: Tensor<f64> = valid_mask(3, 4);
        assert_eq!(m.at(&[0, 2, 1]), 1.0);
        assert_eq!(m.at(&[1, 2, 2]), 0.0);
    }
}
