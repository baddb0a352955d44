use bsnpp::numerics::rng_from_seed;
use bsnpp::sampling::*;
use bsnpp::synthdata::{ActionInstance, LabelSet};
use proptest::prelude::*;
use rand::Rng;

const LAMBDA: f64 = 0.15;

fn labels_from(len: usize, d: usize, mut f: impl FnMut(usize, usize) -> f64) -> LabelSet {
    let mut g_conf = vec![0.0; d * len];
    for j in 0..d {
        for i in 0..len.saturating_sub(j) {
            g_conf[j * len + i] = f(j, i);
        }
    }
    LabelSet { window_len: len, max_duration: d, g_start: vec![0.0; len], g_end: vec![0.0; len], g_conf }
}

fn random_labels(seed: u64) -> LabelSet {
    let mut rng = rng_from_seed(seed);
    labels_from(16, 16, |_, _| rng.random::<f64>())
}

/// The re-balancing rule written out independently.
fn rebalanced(r: f64, lambda: f64) -> f64 {
    if r > 0.0 && r <= lambda {
        lambda * (r / lambda - 1.0).exp()
    } else if r == 0.0 {
        lambda / std::f64::consts::E
    } else {
        r
    }
}

#[test]
fn thresholds_and_brute_force_partition() {
    let l = labels_from(4, 1, |_, i| [0.9, 0.1, 0.5, 0.3][i]);
    let p = partition_cells(&l);
    assert_eq!(p.positives.iter().map(|c| c.i).collect::<Vec<_>>(), vec![0]);
    assert_eq!(p.negatives.iter().map(|c| c.i).collect::<Vec<_>>(), vec![1]);
    assert_eq!(p.ignored.iter().map(|c| c.i).collect::<Vec<_>>(), vec![2, 3]);

    let zero = labels_from(8, 8, |_, _| 0.0);
    assert_eq!(partition_cells(&zero).negatives.len(), 36);

    for seed in 0..100 {
        let l = random_labels(seed);
        let p = partition_cells(&l);
        let (mut pos, mut neg, mut ign) = (0, 0, 0);
        for j in 0..16 {
            for i in 0..16 {
                if i + j >= 16 {
                    continue;
                }
                let v = l.g_conf[j * 16 + i];
                if v > 0.7 {
                    pos += 1;
                } else if v < 0.3 {
                    neg += 1;
                } else {
                    ign += 1;
                }
            }
        }
        assert_eq!((p.positives.len(), p.negatives.len(), p.ignored.len()), (pos, neg, ign));
        assert_eq!(pos + neg + ign, 136);
        assert!(p.positives.iter().all(|c| c.is_positive && c.target > 0.7));
        assert!(p.negatives.iter().all(|c| !c.is_positive && c.target < 0.3));
    }
}

#[test]
fn rebalance_examples() {
    assert!((rebalance_ratio(LAMBDA, LAMBDA) - LAMBDA).abs() < 1e-12);
    assert!((rebalance_ratio(0.0, LAMBDA) - 0.15 / std::f64::consts::E).abs() < 1e-15);
    assert!((rebalance_ratio(0.0, LAMBDA) - 0.05518).abs() < 1e-5);
    let r = scale_rebalance(&[0.05, 0.15, 0.80], LAMBDA).unwrap();
    for (k, &x) in [0.05, 0.15, 0.80].iter().enumerate() {
        assert!((r[k] - rebalanced(x, LAMBDA)).abs() < 1e-15);
    }
    // Closed form 0.15·e^(−2/3) = 0.0770126...
    assert!((r[0] - 0.15 * (-2.0f64 / 3.0).exp()).abs() < 1e-15);
    assert!((r[0] - 0.077013).abs() < 1e-6);
    assert!(scale_rebalance(&[0.5, 0.6], LAMBDA).is_err());
    assert!(scale_rebalance(&[1.2, -0.2], LAMBDA).is_err());
}

#[test]
fn continuity_at_lambda() {
    let below = rebalance_ratio(LAMBDA - 1e-15, LAMBDA);
    assert!((below - LAMBDA).abs() < 1e-12);
    assert_eq!(rebalance_ratio(LAMBDA, LAMBDA), LAMBDA);
    assert_eq!(rebalance_ratio(LAMBDA + 1e-12, LAMBDA), LAMBDA + 1e-12);
}

#[test]
fn region_boundaries_are_right_closed() {
    let cfg = SamplerConfig::default();
    assert_eq!(cfg.region_of(0.0), 0);
    assert_eq!(cfg.region_of(0.3), 0);
    assert_eq!(cfg.region_of(0.3 + 1e-12), 1);
    assert_eq!(cfg.region_of(0.7), 1);
    assert_eq!(cfg.region_of(0.71), 2);
    assert_eq!(cfg.region_of(1.0), 2);
}

/// Skewed population: positives mostly short, a few long.
fn skewed() -> LabelSet {
    labels_from(40, 40, |j, i| {
        let short = j < 12;
        let long = j > 28 && i % 5 == 0;
        let mid = (12..=28).contains(&j) && i % 2 == 0;
        if short || long || mid {
            0.9
        } else {
            0.0
        }
    })
}

#[test]
fn monte_carlo_frequencies_match_renormalised_ratios() {
    let labels = skewed();
    let cfg = SamplerConfig { n_cells: 20_000, seed: 123, ..SamplerConfig::default() };
    let out = two_stage_sample(&labels, &cfg).unwrap();
    let pos: Vec<&CellSample> = out.iter().filter(|c| c.is_positive).collect();
    assert_eq!(pos.len(), 10_000);

    // Oracle: count positive cells per region, apply the re-balancing rule, renormalise.
    let region = |j: usize| {
        let x = j as f64 / 40.0;
        if x <= 0.3 {
            0
        } else if x <= 0.7 {
            1
        } else {
            2
        }
    };
    let mut counts = [0usize; 3];
    for j in 0..40 {
        for i in 0..40 - j {
            if labels.g_conf[j * 40 + i] > 0.7 {
                counts[region(j)] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let adj: Vec<f64> = counts.iter().map(|&c| rebalanced(c as f64 / total as f64, LAMBDA)).collect();
    let z: f64 = adj.iter().sum();
    let mut freq = [0usize; 3];
    for c in &pos {
        freq[region(c.j)] += 1;
    }
    for k in 0..3 {
        let want = adj[k] / z;
        let got = freq[k] as f64 / 10_000.0;
        assert!((want - got).abs() < 0.02, "region {k}: want {want}, got {got} (counts {counts:?})");
    }
    // The rare region is boosted above its raw share.
    assert!(adj[2] / z > counts[2] as f64 / total as f64);
    let raw = region_probabilities(&counts, LAMBDA);
    for k in 0..3 {
        assert!((raw[k] - adj[k] / z).abs() < 1e-12);
    }
}

#[test]
fn stage_one_splits_evenly() {
    let labels = skewed();
    for n in [8usize, 9, 64] {
        let cfg = SamplerConfig { n_cells: n, ..SamplerConfig::default() };
        let out = two_stage_sample(&labels, &cfg).unwrap();
        assert_eq!(out.len(), n);
        assert_eq!(out.iter().filter(|c| c.is_positive).count(), n.div_ceil(2));
        assert_eq!(out.iter().filter(|c| !c.is_positive).count(), n / 2);
    }
}

#[test]
fn positives_in_one_region_stay_there() {
    // Positives only on durations 1..=3 of a 20-snippet window: all in [0, 0.3].
    let labels = labels_from(20, 20, |j, _| if (1..=3).contains(&j) { 0.95 } else { 0.0 });
    let cfg = SamplerConfig { n_cells: 200, ..SamplerConfig::default() };
    let out = two_stage_sample(&labels, &cfg).unwrap();
    assert!(out.iter().filter(|c| c.is_positive).all(|c| (1..=3).contains(&c.j)));
    assert_eq!(region_probabilities(&[7, 0, 0], LAMBDA), vec![1.0, 0.0, 0.0]);
}

#[test]
fn exhausted_regions_repeat_cells() {
    // Three positive cells, 40 positive draws.
    let labels = labels_from(8, 8, |j, i| if j == 1 && i < 3 { 0.9 } else { 0.0 });
    let cfg = SamplerConfig { n_cells: 80, ..SamplerConfig::default() };
    let out = two_stage_sample(&labels, &cfg).unwrap();
    let pos: Vec<_> = out.iter().filter(|c| c.is_positive).collect();
    assert_eq!(pos.len(), 40);
    for i in 0..3 {
        assert!(pos.iter().any(|c| c.i == i));
    }
}

#[test]
fn missing_polarity_is_reported() {
    let labels = labels_from(8, 8, |_, _| 0.1);
    assert!(matches!(two_stage_sample(&labels, &SamplerConfig::default()), Err(bsnpp::Error::Infeasible(_))));
}

#[test]
fn regression_cells_split_between_overlap_and_zero() {
    let labels = LabelSet::new(&[ActionInstance::new(4.0, 12.0, 0)], 32, 16);
    let mut rng = rng_from_seed(2);
    let out = regression_sample_with(&labels, 64, &mut rng);
    assert_eq!(out.len(), 64);
    assert_eq!(out.iter().filter(|c| c.target > 0.0).count(), 32);
    for c in &out {
        assert_eq!(c.target, labels.conf(c.j, c.i));
    }
}

proptest! {
    #[test]
    fn boosted_below_lambda(r in 1e-9f64..=LAMBDA) {
        prop_assert!(rebalance_ratio(r, LAMBDA) >= r);
    }

    #[test]
    fn identity_above_lambda(r in LAMBDA + 1e-12..=1.0f64) {
        prop_assert_eq!(rebalance_ratio(r, LAMBDA), r);
    }

    #[test]
    fn monotone_on_unit_interval(a in 1e-9f64..=1.0, b in 1e-9f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rebalance_ratio(lo, LAMBDA) <= rebalance_ratio(hi, LAMBDA));
    }

    #[test]
    fn samples_are_valid_sized_and_deterministic(seed in 0u64..300, n in 2usize..100) {
        let labels = random_labels(seed);
        let cfg = SamplerConfig { n_cells: n, seed, ..SamplerConfig::default() };
        let a = two_stage_sample(&labels, &cfg).unwrap();
        prop_assert_eq!(a.len(), n);
        for c in &a {
            prop_assert!(c.i + c.j < 16);
            prop_assert_eq!(c.is_positive, c.target > 0.7);
            prop_assert!(c.is_positive || c.target < 0.3);
        }
        prop_assert_eq!(a, two_stage_sample(&labels, &cfg).unwrap());
    }
}
