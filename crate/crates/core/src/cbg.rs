//! Complementary boundary generator: base module, nested U-shaped
//! encoder-decoder with deep supervision, siamese forward/reversed passes,
//! geometric-mean fusion and the boundary map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::DurationMap;
use crate::model::{BlockIds, ConvIds, Model};
use crate::numerics::{kernels, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Geometric mean of the forward and reversed passes.
    #[default]
    Bidirectional,
    /// Forward heatmaps only.
    ForwardOnly,
}

pub(crate) fn conv<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, ids: ConvIds, x: Var, pad: usize) -> Result<Var> {
    let w = tape.param(&model.store, ids.w);
    let b = tape.param(&model.store, ids.b);
    tape.conv1d(x, w, b, 1, pad)
}

fn block<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, ids: BlockIds, x: Var) -> Result<Var> {
    let y = conv(tape, model, ids.conv, x, 1)?;
    let scale = tape.param(&model.store, ids.scale);
    let shift = tape.param(&model.store, ids.shift);
    let y = tape.channel_affine(y, scale, shift)?;
    Ok(tape.relu(y))
}

/// Transposes a `[T, C]` feature sequence into the `[C, T]` layout used by the convolutions.
pub fn feature_input<S: Scalar>(tape: &mut Tape<S>, features: &Tensor<S>) -> Result<Var> {
    if features.ndim() != 2 {
        return Err(Error::Shape(format!("features must be [T, C], got {:?}", features.shape())));
    }
    let (t, c) = (features.shape()[0], features.shape()[1]);
    let mut data = vec![S::zero(); t * c];
    kernels::transpose(t, c, features.data(), &mut data);
    Ok(tape.constant(Tensor::new(vec![c, t], data)?))
}

/// Two kernel-3 convolutions with ReLU: `[C, l_w]` to `[base_width, l_w]`.
pub fn base_forward<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] % 4 != 0 || s[1] == 0 {
        return Err(Error::Shape(format!("base module needs [C, T] with T divisible by 4, got {s:?}")));
    }
    let y = conv(tape, model, model.cbg.base1, x, 1)?;
    let y = tape.relu(y);
    let y = conv(tape, model, model.cbg.base2, y, 1)?;
    Ok(tape.relu(y))
}

/// Outputs of one U-shaped pass, each probability sequence shaped `[l_w]`.
#[derive(Clone, Copy, Debug)]
pub struct UnetOutput {
    pub start: Var,
    pub end: Var,
    pub deep_start: Var,
    pub deep_end: Var,
    /// Pre-head activations of the final decoder node.
    pub feature: Var,
}

fn head<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, ids: ConvIds, x: Var) -> Result<(Var, Var)> {
    let logits = conv(tape, model, ids, x, 0)?;
    let p = tape.sigmoid(logits);
    Ok((tape.select(p, 0)?, tape.select(p, 1)?))
}

pub fn unet_forward<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, base: Var) -> Result<UnetOutput> {
    let len = tape.shape(base)[1];
    if len % 4 != 0 {
        return Err(Error::Shape(format!("U-shaped module needs length divisible by 4, got {len}")));
    }
    let ids = &model.cbg;
    let x00 = block(tape, model, ids.x00, base)?;
    let p00 = tape.maxpool1d(x00);
    let x10 = block(tape, model, ids.x10, p00)?;
    let p10 = tape.maxpool1d(x10);
    let x20 = block(tape, model, ids.x20, p10)?;
    let u10 = tape.upsample_linear1d(x10);
    let c01 = tape.concat(&[x00, u10])?;
    let x01 = block(tape, model, ids.x01, c01)?;
    let u20 = tape.upsample_linear1d(x20);
    let c11 = tape.concat(&[x10, u20])?;
    let x11 = block(tape, model, ids.x11, c11)?;
    let u11 = tape.upsample_linear1d(x11);
    let c02 = tape.concat(&[x00, x01, u11])?;
    let x02 = block(tape, model, ids.x02, c02)?;
    let (deep_start, deep_end) = head(tape, model, ids.head01, x01)?;
    let (start, end) = head(tape, model, ids.head02, x02)?;
    Ok(UnetOutput { start, end, deep_start, deep_end, feature: x02 })
}

/// Tape handles for both directional passes, with the reversed pass already
/// mapped back to forward time and its start/end roles swapped.
#[derive(Clone, Copy, Debug)]
pub struct CbgTrace {
    pub base: Var,
    pub fwd: UnetOutput,
    /// Reversed-pass outputs in forward time: `start` is ←H^s (from the end head), `end` is ←H^e.
    pub bwd: UnetOutput,
    pub fused_start: Var,
    pub fused_end: Var,
}

fn align_backward<S: Scalar>(tape: &mut Tape<S>, raw: UnetOutput) -> UnetOutput {
    UnetOutput {
        start: tape.reverse_time(raw.end),
        end: tape.reverse_time(raw.start),
        deep_start: tape.reverse_time(raw.deep_end),
        deep_end: tape.reverse_time(raw.deep_start),
        feature: tape.reverse_time(raw.feature),
    }
}

fn geometric_mean<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    Ok(tape.sqrt(prod))
}

/// Runs both directional passes on `x: [C, l_w]` and fuses them.
pub fn cbg_forward<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, x: Var, fusion: FusionMode) -> Result<CbgTrace> {
    let base = base_forward(tape, model, x)?;
    let fwd = unet_forward(tape, model, base)?;
    let xr = tape.reverse_time(x);
    let base_r = base_forward(tape, model, xr)?;
    let raw = unet_forward(tape, model, base_r)?;
    let bwd = align_backward(tape, raw);
    let (fused_start, fused_end) = match fusion {
        FusionMode::Bidirectional => (geometric_mean(tape, fwd.start, bwd.start)?, geometric_mean(tape, fwd.end, bwd.end)?),
        FusionMode::ForwardOnly => (fwd.start, fwd.end),
    };
    Ok(CbgTrace { base, fwd, bwd, fused_start, fused_end })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryHeatmaps {
    pub fwd_start: Vec<f64>,
    pub fwd_end: Vec<f64>,
    pub bwd_start: Vec<f64>,
    pub bwd_end: Vec<f64>,
    pub fused_start: Vec<f64>,
    pub fused_end: Vec<f64>,
}

impl BoundaryHeatmaps {
    pub fn from_trace<S: Scalar>(tape: &Tape<S>, trace: &CbgTrace) -> Self {
        let get = |v: Var| tape.value(v).to_f64_vec();
        Self {
            fwd_start: get(trace.fwd.start),
            fwd_end: get(trace.fwd.end),
            bwd_start: get(trace.bwd.start),
            bwd_end: get(trace.bwd.end),
            fused_start: get(trace.fused_start),
            fused_end: get(trace.fused_end),
        }
    }

    /// Fuses forward and reversed heatmaps without a tape.
    pub fn fuse(fwd_start: Vec<f64>, fwd_end: Vec<f64>, bwd_start: Vec<f64>, bwd_end: Vec<f64>) -> Self {
        let gm = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x * y).sqrt()).collect::<Vec<_>>();
        let fused_start = gm(&fwd_start, &bwd_start);
        let fused_end = gm(&fwd_end, &bwd_end);
        Self { fwd_start, fwd_end, bwd_start, bwd_end, fused_start, fused_end }
    }
}

/// Heatmaps for one `[l_w, C]` window.
pub fn bidirectional_predict<S: Scalar>(model: &Model<S>, features: &Tensor<S>, fusion: FusionMode) -> Result<BoundaryHeatmaps> {
    let mut tape = Tape::new();
    let x = feature_input(&mut tape, features)?;
    let trace = cbg_forward(&mut tape, model, x, fusion)?;
    Ok(BoundaryHeatmaps::from_trace(&tape, &trace))
}

/// `M^b[j][i] = H^s[i] · H^e[i + j]` on valid cells, zero elsewhere.
pub fn build_boundary_map(h: &BoundaryHeatmaps, max_duration: usize) -> Result<DurationMap> {
    let len = h.fused_start.len();
    if h.fused_end.len() != len {
        return Err(Error::Shape(format!("start heatmap has {len} values, end heatmap {}", h.fused_end.len())));
    }
    if max_duration == 0 || max_duration > len {
        return Err(Error::InvalidArgument(format!("max duration {max_duration} must lie in 1..={len}")));
    }
    let mut map = DurationMap::zeros(max_duration, len);
    for j in 0..max_duration {
        for i in 0..len - j {
            map.set(j, i, h.fused_start[i] * h.fused_end[i + j]);
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_examples() {
        let h = BoundaryHeatmaps::fuse(vec![0.64], vec![0.3], vec![0.25], vec![0.3]);
        assert!((h.fused_start[0] - 0.4).abs() < 1e-15);
        assert!((h.fused_end[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn boundary_map_example() {
        let mut s = vec![0.0; 10];
        let mut e = vec![0.0; 10];
        s[3] = 0.8;
        e[7] = 0.5;
        let h = BoundaryHeatmaps::fuse(s.clone(), e.clone(), s, e);
        let m = build_boundary_map(&h, 5).unwrap();
        assert!((m.get(4, 3) - 0.4).abs() < 1e-15);
        let ones = BoundaryHeatmaps::fuse(vec![1.0; 4], vec![1.0; 4], vec![1.0; 4], vec![1.0; 4]);
        let m = build_boundary_map(&ones, 4).unwrap();
        assert_eq!(m.get(3, 0), 1.0);
        assert_eq!(m.get(3, 1), 0.0);
    }
}
