//! Objective terms: weighted binary logistic loss, the boundary-generator
//! loss with its consistency term, and the confidence-map loss.

use crate::cbg::{CbgTrace, FusionMode, UnetOutput};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::sampling::CellSample;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before the logarithm.
pub const PROB_EPS: f64 = 1e-6;

/// Inverse-frequency weights `(α⁺, α⁻) = (l / Σg, l / (l − Σg))`.
pub fn bl_weights(labels: &[f64]) -> Result<(f64, f64)> {
    let l = labels.len() as f64;
    let pos: f64 = labels.iter().sum();
    if labels.is_empty() || pos == 0.0 || pos == l {
        return Err(Error::InvalidArgument(format!(
            "weighted logistic loss needs both label values; got {pos} positives out of {l}"
        )));
    }
    if labels.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::InvalidArgument("logistic loss labels must be 0 or 1".into()));
    }
    Ok((l / pos, l / (l - pos)))
}

/// `−(1/l) Σ [α⁺ g log p + α⁻ (1 − g) log(1 − p)]` on the tape; `p` has `l` elements.
pub fn weighted_bl_loss<S: Scalar>(tape: &mut Tape<S>, p: Var, labels: &[f64]) -> Result<Var> {
    let n = tape.value(p).len();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} probabilities but {} labels", labels.len())));
    }
    let (a_pos, a_neg) = bl_weights(labels)?;
    let l = n as f64;
    let shape = tape.shape(p).to_vec();
    let wp: Vec<S> = labels.iter().map(|&g| S::of(-a_pos * g / l)).collect();
    let wn: Vec<S> = labels.iter().map(|&g| S::of(-a_neg * (1.0 - g) / l)).collect();
    let wp = tape.constant(Tensor::new(shape.clone(), wp)?);
    let wn = tape.constant(Tensor::new(shape, wn)?);
    let pc = tape.clamp(p, S::of(PROB_EPS), S::of(1.0 - PROB_EPS));
    let log_p = tape.ln(pc);
    let q = tape.affine(pc, -S::one(), S::one());
    let log_q = tape.ln(q);
    let a = tape.mul(wp, log_p)?;
    let b = tape.mul(wn, log_q)?;
    let a = tape.sum(a);
    let b = tape.sum(b);
    tape.add(a, b)
}

/// Off-tape evaluation of [`weighted_bl_loss`].
pub fn weighted_bl_value(p: &[f64], labels: &[f64]) -> Result<f64> {
    if p.len() != labels.len() {
        return Err(Error::Shape(format!("{} probabilities but {} labels", p.len(), labels.len())));
    }
    let (a_pos, a_neg) = bl_weights(labels)?;
    let l = p.len() as f64;
    let s: f64 = p
        .iter()
        .zip(labels)
        .map(|(&p, &g)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            a_pos * g * p.ln() + a_neg * (1.0 - g) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / l)
}

/// Mean squared difference of two same-shape tensors.
pub fn mse<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).len();
    let d = tape.sub(a, b)?;
    let ss = tape.sum_squares(d);
    Ok(tape.scale(ss, S::of(1.0 / n as f64)))
}

/// Boundary-generator loss values, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CbgTerms {
    pub fwd: f64,
    pub bwd: f64,
    pub deep: f64,
    pub consistency: f64,
    pub total: f64,
    /// Logistic terms dropped because their labels had a single value.
    pub skipped: usize,
}

fn bl_or_skip<S: Scalar>(tape: &mut Tape<S>, p: Var, labels: &[f64], acc: &mut Vec<Var>, skipped: &mut usize) -> Result<f64> {
    match weighted_bl_loss(tape, p, labels) {
        Ok(v) => {
            acc.push(v);
            Ok(tape.value(v).data()[0].to_f64_lossy())
        }
        Err(Error::InvalidArgument(msg)) => {
            log::debug!("skipping logistic term: {msg}");
            *skipped += 1;
            Ok(0.0)
        }
        Err(e) => Err(e),
    }
}

fn pair<S: Scalar>(
    tape: &mut Tape<S>,
    out: &UnetOutput,
    deep: bool,
    g_start: &[f64],
    g_end: &[f64],
    acc: &mut Vec<Var>,
    skipped: &mut usize,
) -> Result<f64> {
    let (s, e) = if deep { (out.deep_start, out.deep_end) } else { (out.start, out.end) };
    Ok(bl_or_skip(tape, s, g_start, acc, skipped)? + bl_or_skip(tape, e, g_end, acc, skipped)?)
}

/// Forward and reversed logistic terms on the final and deep-supervision
/// heads, plus the mean-squared consistency of the two passes' pre-head
/// features (the reversed one already mapped back to forward time).
pub fn cbg_loss<S: Scalar>(tape: &mut Tape<S>, trace: &CbgTrace, g_start: &[f64], g_end: &[f64]) -> Result<(Var, CbgTerms)> {
    cbg_loss_with(tape, trace, g_start, g_end, FusionMode::Bidirectional)
}

/// [`cbg_loss`], or with `ForwardOnly` just the forward pass's logistic
/// terms: no reversed terms and no consistency term.
pub fn cbg_loss_with<S: Scalar>(
    tape: &mut Tape<S>,
    trace: &CbgTrace,
    g_start: &[f64],
    g_end: &[f64],
    fusion: FusionMode,
) -> Result<(Var, CbgTerms)> {
    let mut acc = Vec::new();
    let mut t = CbgTerms::default();
    t.fwd = pair(tape, &trace.fwd, false, g_start, g_end, &mut acc, &mut t.skipped)?;
    t.deep = pair(tape, &trace.fwd, true, g_start, g_end, &mut acc, &mut t.skipped)?;
    let mut total = match fusion {
        FusionMode::Bidirectional => {
            t.bwd = pair(tape, &trace.bwd, false, g_start, g_end, &mut acc, &mut t.skipped)?;
            t.deep += pair(tape, &trace.bwd, true, g_start, g_end, &mut acc, &mut t.skipped)?;
            let c = mse(tape, trace.fwd.feature, trace.bwd.feature)?;
            t.consistency = tape.value(c).data()[0].to_f64_lossy();
            c
        }
        FusionMode::ForwardOnly => tape.constant(Tensor::scalar(S::zero())),
    };
    for v in acc {
        total = tape.add(total, v)?;
    }
    t.total = tape.value(total).data()[0].to_f64_lossy();
    Ok((total, t))
}

/// Smooth-L1 with transition point 1: `0.5 x²` for `|x| < 1`, else `|x| − 0.5`.
pub fn smooth_l1_value(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrbTerms {
    pub reg: f64,
    pub cls: f64,
    pub total: f64,
    /// True when the classification term was dropped for lack of one polarity.
    pub cls_skipped: bool,
}

/// `L_reg` (mean smooth-L1 of `M^cr` against the IoU targets on
/// `reg_cells`) plus `L_cls` (weighted logistic loss of `M^cc` on
/// `cls_cells` with hard labels). `maps` is the `[2, D, T]` output.
pub fn prb_loss<S: Scalar>(
    tape: &mut Tape<S>,
    maps: Var,
    reg_cells: &[CellSample],
    cls_cells: &[CellSample],
) -> Result<(Var, PrbTerms)> {
    if reg_cells.is_empty() && cls_cells.is_empty() {
        return Err(Error::InvalidArgument("confidence loss needs at least one sampled cell".into()));
    }
    let s = tape.shape(maps).to_vec();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::Shape(format!("confidence maps must be [2, D, T], got {s:?}")));
    }
    let (d, t) = (s[1], s[2]);
    let check = |c: &CellSample| -> Result<usize> {
        if c.j >= d || c.i + c.j >= t {
            return Err(Error::InvalidArgument(format!("cell (j={}, i={}) is outside the valid region", c.j, c.i)));
        }
        Ok(c.j * t + c.i)
    };
    let mut terms = PrbTerms::default();
    let mut parts = Vec::new();
    if !reg_cells.is_empty() {
        let idx = reg_cells.iter().map(|c| check(c).map(|k| d * t + k)).collect::<Result<Vec<_>>>()?;
        let pred = tape.gather(maps, idx)?;
        let target: Vec<S> = reg_cells.iter().map(|c| S::of(c.target)).collect();
        let target = tape.constant(Tensor::new(vec![reg_cells.len()], target)?);
        let diff = tape.sub(pred, target)?;
        let sl = tape.smooth_l1(diff);
        let reg = tape.mean(sl);
        terms.reg = tape.value(reg).data()[0].to_f64_lossy();
        parts.push(reg);
    }
    if !cls_cells.is_empty() {
        let idx = cls_cells.iter().map(&check).collect::<Result<Vec<_>>>()?;
        let labels: Vec<f64> = cls_cells.iter().map(|c| if c.is_positive { 1.0 } else { 0.0 }).collect();
        let pred = tape.gather(maps, idx)?;
        match weighted_bl_loss(tape, pred, &labels) {
            Ok(cls) => {
                terms.cls = tape.value(cls).data()[0].to_f64_lossy();
                parts.push(cls);
            }
            Err(Error::InvalidArgument(msg)) => {
                log::debug!("skipping classification term: {msg}");
                terms.cls_skipped = true;
            }
            Err(e) => return Err(e),
        }
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("no confidence loss term could be formed".into()));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    terms.total = terms.reg + terms.cls;
    Ok((total, terms))
}

/// `l_cbg + β · l_prb + γ · Σ ‖θ‖²` over `params`.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, l_cbg: Var, l_prb: Var, params: &[Var], beta: f64, gamma: f64) -> Result<Var> {
    let weighted = tape.scale(l_prb, S::of(beta));
    let mut total = tape.add(l_cbg, weighted)?;
    for &p in params {
        let ss = tape.sum_squares(p);
        let ss = tape.scale(ss, S::of(gamma));
        total = tape.add(total, ss)?;
    }
    Ok(total)
}
