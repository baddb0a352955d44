use bsnpp::evaluation::*;
use bsnpp::inference::Proposal;
use bsnpp::numerics::rng_from_seed;
use bsnpp::synthdata::ActionInstance;
use proptest::prelude::*;
use rand::Rng;

fn gt(s: f64, e: f64) -> ActionInstance {
    ActionInstance::new(s, e, 0)
}

fn ranked(iv: &[(f64, f64)]) -> Vec<Proposal> {
    let n = iv.len() as f64;
    iv.iter().enumerate().map(|(k, &(s, e))| Proposal::new(s, e, 1.0 - k as f64 / n)).collect()
}

fn video(id: &str, props: &[(f64, f64)], gts: Vec<ActionInstance>) -> VideoResult {
    VideoResult { id: id.into(), proposals: ranked(props), ground_truth: gts }
}

#[test]
fn iou_examples() {
    assert_eq!(iou_1d((0.0, 10.0), (0.0, 10.0)).unwrap(), 1.0);
    assert_eq!(iou_1d((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
    assert!((iou_1d((0.0, 10.0), (5.0, 15.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(iou_1d((1.0, 1.0), (0.0, 2.0)).is_err());
}

#[test]
fn toy_recall_matches_hand_matching() {
    let cfg = EvalConfig { tiou_thresholds: vec![0.5, 0.85], an_max: 3, averaging: RecallAveraging::PerVideo };
    let videos = vec![
        video("a", &[(0.0, 9.0), (20.0, 30.0), (0.0, 10.0)], vec![gt(0.0, 10.0)]),
        video("b", &[(5.0, 15.0), (20.0, 28.0), (0.0, 10.0)], vec![gt(0.0, 10.0), gt(20.0, 30.0)]),
        video("c", &[(12.0, 20.0), (10.0, 19.0)], vec![gt(10.0, 20.0)]),
    ];
    let curve = ar_at_an(&videos, &cfg);
    // Per video and AN, recall averaged over the two thresholds:
    //   a: 1, 1, 1    b: 0, 1/4, 3/4    c: 1/2, 1, 1
    let want = [(1.0 + 0.0 + 0.5) / 3.0, (1.0 + 0.25 + 1.0) / 3.0, (1.0 + 0.75 + 1.0) / 3.0];
    for k in 0..3 {
        assert!((curve.ar_values[k] - want[k]).abs() < 1e-15, "AN {}: {} vs {}", k + 1, curve.ar_values[k], want[k]);
    }
    assert_eq!(curve.ar_at(2), Some(curve.ar_values[1]));

    let pooled = ar_at_an(&videos, &EvalConfig { averaging: RecallAveraging::Pooled, ..cfg.clone() });
    // Pooled over 4 ground truths: AN 1 recalls (2 + 1) of 8 threshold-gt pairs.
    assert!((pooled.ar_values[0] - 3.0 / 8.0).abs() < 1e-15);

    let with_empty = [videos.clone(), vec![video("d", &[(0.0, 1.0)], vec![])]].concat();
    assert_eq!(ar_at_an(&with_empty, &cfg).ar_values, curve.ar_values);
}

#[test]
fn perfect_and_empty_proposals() {
    let cfg = EvalConfig::activitynet();
    let gts = vec![gt(0.0, 10.0), gt(20.0, 25.0), gt(30.0, 60.0)];
    let exact: Vec<(f64, f64)> = gts.iter().map(|g| (g.start, g.end)).collect();
    let curve = ar_at_an(&[video("v", &exact, gts.clone())], &cfg);
    for an in 3..=100 {
        assert_eq!(curve.ar_at(an), Some(1.0));
    }
    let none = ar_at_an(&[video("v", &[], gts)], &cfg);
    assert!(none.ar_values.iter().all(|&a| a == 0.0));
    assert_eq!(auc(&none), 0.0);
}

#[test]
fn auc_closed_forms() {
    let curve = |f: &dyn Fn(usize) -> f64| RecallCurve {
        an_values: (1..=100).collect(),
        ar_values: (1..=100).map(f).collect(),
        per_threshold: vec![],
    };
    assert!((auc(&curve(&|_| 1.0)) - 99.5).abs() < 1e-12);
    assert_eq!(auc(&curve(&|_| 0.0)), 0.0);
    assert!((auc(&curve(&|an| an as f64 / 100.0)) - 50.0).abs() < 0.5);
}

#[test]
fn toy_map_matches_hand_enumerated_curves() {
    let det = |s: f64, e: f64, score: f64, label: u32| Detection { start: s, end: e, score, label };
    let gts = vec![
        vec![ActionInstance::new(0.0, 10.0, 0), ActionInstance::new(20.0, 30.0, 1)],
        vec![ActionInstance::new(5.0, 15.0, 0)],
    ];
    let dets = vec![
        vec![det(0.0, 10.0, 0.9, 0), det(30.0, 40.0, 0.8, 0), det(20.0, 25.0, 0.6, 1), det(21.0, 30.0, 0.5, 1)],
        vec![det(5.0, 14.0, 0.7, 0)],
    ];
    let rep = detection_map(&dets, &gts, &[0.5, 0.75]).unwrap();
    // Class 0: TP, FP, TP over 2 gts gives precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
    let ap0 = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
    // Class 1 at 0.5: the first detection (IoU 0.5) hits; at 0.75 only the second (IoU 0.9) does.
    let (ap1_lo, ap1_hi) = (1.0, 0.5);
    assert!((rep.per_class[&0][0] - ap0).abs() < 1e-15);
    assert!((rep.per_class[&0][1] - ap0).abs() < 1e-15);
    assert!((rep.per_class[&1][0] - ap1_lo).abs() < 1e-15);
    assert!((rep.per_class[&1][1] - ap1_hi).abs() < 1e-15);
    assert!((rep.map[0] - (ap0 + ap1_lo) / 2.0).abs() < 1e-15);
    assert!((rep.map[1] - (ap0 + ap1_hi) / 2.0).abs() < 1e-15);
    assert!((rep.average - (rep.map[0] + rep.map[1]) / 2.0).abs() < 1e-15);

    assert!((average_precision(&[true, false, true], 2) - ap0).abs() < 1e-15);
}

#[test]
fn map_extremes() {
    let gts = vec![vec![ActionInstance::new(0.0, 10.0, 0), ActionInstance::new(15.0, 30.0, 1)]];
    let exact: Vec<Detection> = gts[0].iter().map(|g| Detection { start: g.start, end: g.end, score: 0.5, label: g.label }).collect();
    let rep = detection_map(&[exact.clone()], &gts, &[0.5, 0.95]).unwrap();
    assert!(rep.map.iter().all(|&m| m == 1.0));
    let wrong: Vec<Detection> = exact.iter().map(|d| Detection { label: d.label + 2, ..*d }).collect();
    assert!(detection_map(&[wrong], &gts, &[0.5]).unwrap().map.iter().all(|&m| m == 0.0));
    assert!(detection_map(&[], &gts, &[0.5]).is_err());
}

#[test]
fn eval_config_validation() {
    assert_eq!(EvalConfig::activitynet().tiou_thresholds.len(), 10);
    assert_eq!(EvalConfig::thumos().tiou_thresholds.len(), 11);
    assert_eq!(*EvalConfig::thumos().tiou_thresholds.last().unwrap(), 1.0);
    assert!(EvalConfig { tiou_thresholds: vec![0.7, 0.5], ..EvalConfig::default() }.validate().is_err());
    assert!(EvalConfig { tiou_thresholds: vec![0.5, 1.2], ..EvalConfig::default() }.validate().is_err());
}

fn random_video(seed: u64) -> VideoResult {
    let mut rng = rng_from_seed(seed);
    let gts: Vec<ActionInstance> = (0..rng.random_range(1..4))
        .map(|_| {
            let s = rng.random_range(0.0..80.0);
            gt(s, s + rng.random_range(1.0..20.0))
        })
        .collect();
    let props: Vec<(f64, f64)> = (0..rng.random_range(0..30))
        .map(|_| {
            let s = rng.random_range(0.0..80.0);
            (s, s + rng.random_range(1.0..20.0))
        })
        .collect();
    video("r", &props, gts)
}

proptest! {
    #[test]
    fn recall_monotone_in_budget_and_threshold(seed in 0u64..300) {
        let videos: Vec<VideoResult> = (0..3).map(|k| random_video(seed * 3 + k)).collect();
        let curve = ar_at_an(&videos, &EvalConfig::activitynet());
        prop_assert!(curve.ar_values.windows(2).all(|w| w[0] <= w[1]));
        for k in 0..100 {
            prop_assert!(curve.per_threshold.windows(2).all(|w| w[0][k] >= w[1][k]));
        }
        let a = auc(&curve);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn appending_a_proposal_never_lowers_recall(seed in 0u64..300, s in 0.0f64..80.0, len in 1.0f64..20.0) {
        let v = random_video(seed);
        let cfg = EvalConfig::activitynet();
        let before = ar_at_an(std::slice::from_ref(&v), &cfg);
        let mut w = v.clone();
        let rank = w.proposals.len() + 1;
        w.proposals.push(Proposal::new(s, s + len, 0.0));
        let after = ar_at_an(&[w], &cfg);
        for an in rank..=100 {
            prop_assert!(after.ar_at(an).unwrap() >= before.ar_at(an).unwrap());
        }
    }

    #[test]
    fn dominated_curves_have_smaller_area(base in prop::collection::vec(0.0f64..1.0, 100), gap in prop::collection::vec(0.0f64..0.5, 100)) {
        let lo = RecallCurve { an_values: (1..=100).collect(), ar_values: base.clone(), per_threshold: vec![] };
        let hi = RecallCurve { ar_values: base.iter().zip(&gap).map(|(b, g)| (b + g).min(1.0)).collect(), ..lo.clone() };
        prop_assert!(auc(&lo) <= auc(&hi));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in 0.0f64..50.0, la in 0.1f64..30.0, b in 0.0f64..50.0, lb in 0.1f64..30.0) {
        let (x, y) = ((a, a + la), (b, b + lb));
        let (p, q) = (iou_1d(x, y).unwrap(), iou_1d(y, x).unwrap());
        prop_assert_eq!(p, q);
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
