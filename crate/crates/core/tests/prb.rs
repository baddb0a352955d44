mod common;

use std::sync::Arc;

use bsnpp::cbg::{base_forward, feature_input};
use bsnpp::model::{Model, ModelConfig};
use bsnpp::numerics::{rng_from_seed, Tape, Tensor, Var};
use bsnpp::prb::*;
use common::{grad_check, project, random_features, randomize, tiny_config};
use proptest::prelude::*;

fn param(model: &Model<f64>, name: &str) -> Vec<f64> {
    model.store.tensor(model.store.find(name).unwrap()).data().to_vec()
}

fn set_zero(model: &mut Model<f64>, name: &str) {
    let id = model.store.find(name).unwrap();
    let shape = model.store.tensor(id).shape().to_vec();
    model.store.get_mut(id).tensor = Tensor::zeros(shape);
}

/// `W x + b` for a pointwise layer stored as `[out, in, 1]`.
fn dense(w: &[f64], b: &[f64], x: &[f64], cin: usize, len: usize) -> Vec<f64> {
    let cout = b.len();
    let mut y = vec![0.0; cout * len];
    for o in 0..cout {
        for l in 0..len {
            y[o * len + l] = b[o] + (0..cin).map(|c| w[o * cin + c] * x[c * len + l]).sum::<f64>();
        }
    }
    y
}

fn softmax_rows(e: &mut [f64], n: usize) {
    for row in e.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
    }
}

fn sample(tape_values: &[f64], c_r: usize, n: usize, cell: usize, c: usize, k: usize) -> f64 {
    tape_values[(cell * c_r + c) * n + k]
}

#[test]
fn constant_features_sample_to_the_constant() {
    let (len, d, n) = (16, 6, 8);
    let plan = Arc::new(sample_plan::<f64>(len, d, n, 0.25));
    let consts = [1.5, -2.0, 0.25];
    let data: Vec<f64> = consts.iter().flat_map(|&v| std::iter::repeat(v).take(len)).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3, len], data).unwrap());
    let y = tape.sample_time(x, plan).unwrap();
    assert_eq!(tape.shape(y), &[d * len, 3, n]);
    let v = tape.value(y).data();
    for j in 0..d {
        for i in 0..len {
            let (lo, hi) = (i as f64 - 0.25 * j as f64, (i + j) as f64 + 0.25 * j as f64);
            if i + j >= len || lo < 0.0 || hi > (len - 1) as f64 {
                continue;
            }
            for (c, &cv) in consts.iter().enumerate() {
                for k in 0..n {
                    assert!((sample(v, 3, n, j * len + i, c, k) - cv).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn points_before_the_start_are_zero_weighted() {
    // Cell (j = 4, i = 0) with extension 0.25 starts at t = −1.
    let (len, n) = (16, 5);
    let plan = Arc::new(sample_plan::<f64>(len, 8, n, 0.25));
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, len], 1.0));
    let y = tape.sample_time(x, plan).unwrap();
    let v = tape.value(y).data();
    let cell = 4 * len;
    // Points at −1, 0.5, 2, 3.5, 5: the first has both neighbours outside except t = 0 at weight 0.
    assert_eq!(sample(v, 1, n, cell, 0, 0), 0.0);
    for k in 1..n {
        assert!((sample(v, 1, n, cell, 0, k) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn linear_ramp_matches_closed_form_interpolation() {
    let (len, d, n) = (24, 10, 32);
    let plan = Arc::new(sample_plan::<f64>(len, d, n, 0.25));
    let (a, b) = ([0.5, -1.0], [0.25, 2.0]);
    let data: Vec<f64> = (0..2).flat_map(|c| (0..len).map(move |t| a[c] + b[c] * t as f64)).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, len], data).unwrap());
    let y = tape.sample_time(x, plan).unwrap();
    let v = tape.value(y).data();
    let f = |c: usize, t: f64| -> f64 {
        // Value at a real position with out-of-range neighbours contributing zero.
        let l = t.floor();
        let fr = t - l;
        let at = |s: f64| if s >= 0.0 && s < len as f64 { a[c] + b[c] * s } else { 0.0 };
        (1.0 - fr) * at(l) + fr * at(l + 1.0)
    };
    for j in 0..d {
        for i in 0..len - j {
            let (lo, hi) = (i as f64 - 0.25 * j as f64, (i + j) as f64 + 0.25 * j as f64);
            for k in 0..n {
                let t = lo + (hi - lo) * k as f64 / (n - 1) as f64;
                for c in 0..2 {
                    let got = sample(v, 2, n, j * len + i, c, k);
                    assert!((got - f(c, t)).abs() < 1e-12, "cell ({j},{i}) point {k}");
                    if t >= 0.0 && t <= (len - 1) as f64 {
                        assert!((got - (a[c] + b[c] * t)).abs() < 1e-12);
                    }
                }
            }
        }
    }
    // Invalid cells are zero-filled.
    let j = 5;
    for i in len - j..len {
        for k in 0..n {
            assert_eq!(sample(v, 2, n, j * len + i, 0, k), 0.0);
        }
    }
}

#[test]
fn contraction_equals_dense_per_cell_layer() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), 2).unwrap();
    randomize(&mut model, 21, 0.5);
    let (l, cr, n) = (cfg.max_duration * cfg.window_len, cfg.reduced_width, cfg.num_samples);
    let mut rng = rng_from_seed(4);
    let fp = Tensor::randn(vec![l, cr, n], 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(fp.clone());
    let y = reduce_features(&mut tape, &model, x).unwrap();
    let (w, b) = (param(&model, "prb.contract.weight"), param(&model, "prb.contract.bias"));
    let p = cfg.prb_width;
    assert_eq!(tape.shape(y), &[p, l]);
    for o in 0..p {
        for cell in 0..l {
            let block = &fp.data()[cell * cr * n..(cell + 1) * cr * n];
            let z = b[o] + block.iter().enumerate().map(|(q, &v)| w[o * cr * n + q] * v).sum::<f64>();
            assert!((tape.value(y).data()[o * l + cell] - z.max(0.0)).abs() < 1e-12);
        }
    }

    set_zero(&mut model, "prb.contract.bias");
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![l, cr, n]));
    let y = reduce_features(&mut tape, &model, x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn paper_widths_reduce_to_the_stated_shape() {
    let cfg = ModelConfig { feature_dim: 4, window_len: 16, max_duration: 8, ..ModelConfig::paper_activitynet() };
    let model = Model::new(cfg.clone(), 0).unwrap();
    let plan = plan_for(&cfg);
    let mut tape = Tape::new();
    let x = feature_input(&mut tape, &random_features(0, 16, 4)).unwrap();
    let base = base_forward(&mut tape, &model, x).unwrap();
    let fp = build_proposal_features(&mut tape, &model, base, &plan).unwrap();
    assert_eq!(tape.shape(fp), &[8 * 16, 128, 32]);
    let r = reduce_features(&mut tape, &model, fp).unwrap();
    assert_eq!(tape.shape(r), &[512, 8 * 16]);
}

fn attention_model() -> Model<f64> {
    let mut model = Model::new(tiny_config(), 6).unwrap();
    randomize(&mut model, 66, 0.7);
    model
}

#[test]
fn position_attention_matches_brute_force() {
    let model = attention_model();
    let (p, l) = (4, 6);
    let mut rng = rng_from_seed(8);
    let x = Tensor::randn(vec![p, l], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = position_attention(&mut tape, &model, xv).unwrap();

    let q = dense(&param(&model, "prb.pos.query.weight"), &param(&model, "prb.pos.query.bias"), x.data(), p, l);
    let k = dense(&param(&model, "prb.pos.key.weight"), &param(&model, "prb.pos.key.bias"), x.data(), p, l);
    let v = dense(&param(&model, "prb.pos.value.weight"), &param(&model, "prb.pos.value.bias"), x.data(), p, l);
    let kw = 4;
    let mut e = vec![0.0; l * l];
    for a in 0..l {
        for b in 0..l {
            e[a * l + b] = (0..kw).map(|c| q[c * l + a] * k[c * l + b]).sum();
        }
    }
    softmax_rows(&mut e, l);
    let att = tape.value(out.attention).data();
    for (g, w) in att.iter().zip(&e) {
        assert!((g - w).abs() < 1e-10);
    }
    for row in att.chunks(l) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&a| a >= 0.0));
    }
    for c in 0..p {
        for a in 0..l {
            let want = x.data()[c * l + a] + (0..l).map(|b| e[a * l + b] * v[c * l + b]).sum::<f64>();
            assert!((tape.value(out.output).data()[c * l + a] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn uniform_energy_attends_to_the_mean() {
    let mut model = attention_model();
    set_zero(&mut model, "prb.pos.query.weight");
    set_zero(&mut model, "prb.pos.query.bias");
    let (p, l) = (4, 6);
    let x = Tensor::randn(vec![p, l], 1.0, &mut rng_from_seed(1));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = position_attention(&mut tape, &model, xv).unwrap();
    let v = dense(&param(&model, "prb.pos.value.weight"), &param(&model, "prb.pos.value.bias"), x.data(), p, l);
    for c in 0..p {
        let mean = v[c * l..(c + 1) * l].iter().sum::<f64>() / l as f64;
        for a in 0..l {
            let attended = tape.value(out.output).data()[c * l + a] - x.data()[c * l + a];
            assert!((attended - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn channel_attention_matches_brute_force() {
    let (c, l) = (3, 4);
    let x = Tensor::randn(vec![c, l], 1.0, &mut rng_from_seed(12));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = channel_attention(&mut tape, xv).unwrap();
    let xd = x.data();
    let mut e = vec![0.0; c * c];
    for a in 0..c {
        for b in 0..c {
            e[a * c + b] = (0..l).map(|t| xd[a * l + t] * xd[b * l + t]).sum();
        }
    }
    softmax_rows(&mut e, c);
    let att = tape.value(out.attention).data();
    for (g, w) in att.iter().zip(&e) {
        assert!((g - w).abs() < 1e-10);
    }
    for row in att.chunks(c) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for a in 0..c {
        for t in 0..l {
            let want = xd[a * l + t] + (0..c).map(|b| e[a * c + b] * xd[b * l + t]).sum::<f64>();
            assert!((tape.value(out.output).data()[a * l + t] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn duplicate_channels_share_attention_rows() {
    let row = [0.3, -1.2, 0.8, 0.1, 2.0];
    let mut data = row.to_vec();
    data.extend_from_slice(&row);
    data.extend_from_slice(&[1.0, 0.0, -0.5, 0.4, -0.2]);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3, 5], data).unwrap());
    let out = channel_attention(&mut tape, x).unwrap();
    let att = tape.value(out.attention).data();
    assert_eq!(&att[0..3], &att[3..6]);
}

fn permute_columns(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let data = (0..r).flat_map(|i| perm.iter().map(move |&j| x.data()[i * c + j])).collect();
    Tensor::new(vec![r, c], data).unwrap()
}

#[test]
fn position_attention_is_permutation_equivariant() {
    let model = attention_model();
    let x = Tensor::randn(vec![4, 7], 1.0, &mut rng_from_seed(31));
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let run = |x: Tensor<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = position_attention(&mut tape, &model, v).unwrap();
        tape.value(out.output).clone()
    };
    let (a, b) = (run(x.clone()), run(permute_columns(&x, &perm)));
    assert!(permute_columns(&a, &perm).max_abs_diff(&b) < 1e-12);
}

#[test]
fn zero_head_gives_one_half_on_valid_cells() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), 9).unwrap();
    set_zero(&mut model, "prb.head.weight");
    set_zero(&mut model, "prb.head.bias");
    let maps = predict_maps(&model, &random_features(9, 8, 3), &plan_for(&cfg)).unwrap();
    for m in [&maps.m_cc, &maps.m_cr] {
        assert_eq!((m.max_duration, m.len), (cfg.max_duration, cfg.window_len));
        for j in 0..cfg.max_duration {
            for i in 0..cfg.window_len {
                assert_eq!(m.get(j, i), if i + j < cfg.window_len { 0.5 } else { 0.0 });
            }
        }
    }
}

#[test]
fn attention_branches_commute() {
    let model = attention_model();
    let cfg = &model.config;
    let l = cfg.max_duration * cfg.window_len;
    let mut rng = rng_from_seed(3);
    let (r, a, b) = (
        Tensor::randn(vec![4, l], 1.0, &mut rng),
        Tensor::randn(vec![4, l], 1.0, &mut rng),
        Tensor::randn(vec![4, l], 1.0, &mut rng),
    );
    let run = |first: &Tensor<f64>, second: &Tensor<f64>| {
        let mut tape = Tape::new();
        let (rv, av, bv) = (tape.constant(r.clone()), tape.constant(first.clone()), tape.constant(second.clone()));
        let m = predict_confidence(&mut tape, &model, rv, av, bv).unwrap();
        tape.value(m).clone()
    };
    assert!(run(&a, &b).max_abs_diff(&run(&b, &a)) < 1e-12);
}

#[test]
fn proposal_feature_gradients_pass_finite_differences() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), 5).unwrap();
    randomize(&mut model, 55, 0.5);
    let plan = plan_for::<f64>(&cfg);
    for seed in 0..10 {
        let base = Tensor::randn(vec![cfg.base_width, cfg.window_len], 1.0, &mut rng_from_seed(100 + seed));
        let check = grad_check(&[base.clone()], 1e-5, |tape: &mut Tape<f64>, v: &[Var]| {
            let fp = build_proposal_features(tape, &model, v[0], &plan).unwrap();
            project(tape, fp, seed)
        });
        assert!(check.rel_error < 1e-4, "seed {seed}: {check:?}");
        let check = grad_check(&[base], 1e-5, |tape: &mut Tape<f64>, v: &[Var]| {
            let s = tape.sample_time(v[0], Arc::clone(&plan)).unwrap();
            project(tape, s, seed)
        });
        assert!(check.rel_error < 1e-4, "seed {seed}: {check:?}");
    }
}

#[test]
fn confidence_maps_are_open_unit_on_valid_cells() {
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone(), 2).unwrap();
    let maps = predict_maps(&model, &random_features(2, 32, 8), &plan_for(&cfg)).unwrap();
    for m in [&maps.m_cc, &maps.m_cr] {
        for j in 0..16 {
            for i in 0..32 {
                let v = m.get(j, i);
                if i + j < 32 {
                    assert!(v > 0.0 && v < 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..200, l in 2usize..10) {
        let model = attention_model();
        let x = Tensor::randn(vec![4, l], 2.0, &mut rng_from_seed(seed));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let pos = position_attention(&mut tape, &model, v).unwrap();
        let chan = channel_attention(&mut tape, v).unwrap();
        for (att, n) in [(pos.attention, l), (chan.attention, 4)] {
            for row in tape.value(att).data().chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&a| a >= 0.0));
            }
        }
    }
}

#[test]
fn fresh_model_predictions_are_not_saturated() {
    let cfg = ModelConfig::desk();
    for seed in 0..10 {
        let model = Model::<f64>::new(cfg.clone(), seed).unwrap();
        let x = Tensor::randn(vec![32, 8], 3.0, &mut rng_from_seed(seed + 100));
        let maps = predict_maps(&model, &x, &plan_for(&cfg)).unwrap();
        for map in [&maps.m_cc, &maps.m_cr] {
            for j in 0..16 {
                for i in 0..32 - j {
                    let p = map.get(j, i);
                    assert!(p > 0.01 && p < 0.99, "seed {seed} cell ({j}, {i}): {p}");
                }
            }
        }
        let h = bsnpp::cbg::bidirectional_predict(&model, &x, bsnpp::cbg::FusionMode::Bidirectional).unwrap();
        assert!(h.fused_start.iter().chain(&h.fused_end).all(|&p| p > 0.01 && p < 0.99));
    }
}
