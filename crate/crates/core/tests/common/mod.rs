//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use bsnpp::numerics::{rng_from_seed, Tape, Tensor, Var};

/// Result of a central finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub rel_error: f64,
    pub max_abs: f64,
}

/// Norm-wise relative error between two gradient vectors.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Checks `∂f/∂inputs` by central differences with step `h`.
///
/// `f` builds a scalar on a fresh tape from leaf variables holding `inputs`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        analytic.extend_from_slice(&g);
        for idx in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= h;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
    }
    let max_abs = analytic.iter().map(|x: &f64| x.abs()).fold(0.0, f64::max);
    GradCheck { rel_error: rel_error(&analytic, &numeric), max_abs }
}

/// Scalar projection `Σ y ⊙ r` with a fixed random `r`, turning any op output
/// into a scalar whose gradient exercises every output element.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = rng_from_seed(seed);
    let r = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum(p)
}

pub fn naive_conv1d(x: &[f64], cin: usize, t: usize, w: &[f64], cout: usize, k: usize, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let t_out = (t + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; cout * t_out];
    for o in 0..cout {
        for to in 0..t_out {
            let mut acc = b[o];
            for c in 0..cin {
                for kk in 0..k {
                    let src = (to * stride + kk) as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += w[(o * cin + c) * k + kk] * x[c * t + src as usize];
                    }
                }
            }
            y[o * t_out + to] = acc;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(x: &[f64], cin: usize, h: usize, wd: usize, w: &[f64], cout: usize, k: usize, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for r in 0..ho {
            for q in 0..wo {
                let mut acc = b[o];
                for c in 0..cin {
                    for kh in 0..k {
                        for kw in 0..k {
                            let sr = (r * stride + kh) as isize - pad as isize;
                            let sq = (q * stride + kw) as isize - pad as isize;
                            if sr >= 0 && sq >= 0 && (sr as usize) < h && (sq as usize) < wd {
                                acc += w[((o * cin + c) * k + kh) * k + kw] * x[(c * h + sr as usize) * wd + sq as usize];
                            }
                        }
                    }
                }
                y[(o * ho + r) * wo + q] = acc;
            }
        }
    }
    y
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Temporal IoU of closed real intervals, 0 for empty unions.
pub fn brute_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Miniature network used by gradient and symmetry checks.
pub fn tiny_config() -> bsnpp::model::ModelConfig {
    bsnpp::model::ModelConfig {
        feature_dim: 3,
        window_len: 8,
        max_duration: 4,
        base_width: 4,
        unet_width: 4,
        reduced_width: 4,
        num_samples: 4,
        sample_extension: 0.25,
        prb_width: 4,
        key_width: 4,
        head_hidden: 4,
    }
}

/// Random `[T, C]` features.
pub fn random_features(seed: u64, len: usize, channels: usize) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    Tensor::randn(vec![len, channels], 1.0, &mut rng)
}

/// Sets every parameter to independent standard normals scaled by `std`.
pub fn randomize(model: &mut bsnpp::model::Model<f64>, seed: u64, std: f64) {
    let mut rng = rng_from_seed(seed);
    for p in model.store.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        p.tensor = Tensor::randn(shape, std, &mut rng);
    }
}
