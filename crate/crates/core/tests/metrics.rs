use fastsal::metrics::{auc_judd, cc, info_gain, kldiv, nss, sauc, sim, EvalTargets, FixationSet, MetricReport};
use fastsal::{Error, Shape, Tensor};
use proptest::prelude::*;

const H: usize = 8;
const W: usize = 8;

fn map(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(Shape::new(1, 1, H, W), v.to_vec()).unwrap()
}

/// Exhaustive ROC: at every distinct fixated value, count positives and
/// non-fixated pixels at or above it, then integrate by trapezoids.
fn brute_force_auc(v: &[f64], fix: &[(usize, usize)]) -> f64 {
    let fixated: Vec<bool> = (0..v.len()).map(|i| fix.iter().any(|&(r, c)| r * W + c == i)).collect();
    let pos: Vec<f64> = fix.iter().map(|&(r, c)| v[r * W + c]).collect();
    let neg: Vec<f64> = v.iter().zip(&fixated).filter(|(_, &f)| !f).map(|(&x, _)| x).collect();
    let mut thresholds = pos.clone();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = pos.iter().filter(|&&p| p >= t).count() as f64 / pos.len() as f64;
        let fp = neg.iter().filter(|&&n| n >= t).count() as f64 / neg.len() as f64;
        pts.push((fp, tp));
    }
    pts.push((1.0, 1.0));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

fn maps() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(0.0..1.0f64, H * W),
        prop::collection::vec((0..4u8).prop_map(f64::from), H * W),
    ]
}

fn fixations() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::btree_set((0..H, 0..W), 1..12).prop_map(|s| s.into_iter().collect())
}

fn positive_map() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, H * W)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_matches_brute_force(v in maps(), f in fixations()) {
        let fs = FixationSet::new(H, W, f.clone()).unwrap();
        let auc = auc_judd(&map(&v), &fs).unwrap();
        prop_assert!((auc - brute_force_auc(&v, &f)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms(v in maps(), f in fixations()) {
        let fs = FixationSet::new(H, W, f).unwrap();
        let warped: Vec<f64> = v.iter().map(|x| x.powi(3) + 2.0 * x - 5.0).collect();
        let a = auc_judd(&map(&v), &fs).unwrap();
        let b = auc_judd(&map(&warped), &fs).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn nss_and_cc_are_affine_invariant(v in positive_map(), g in positive_map(), f in fixations(), a in 0.1..10.0f64, b in -5.0..5.0f64) {
        let fs = FixationSet::new(H, W, f).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let (p, q, gt) = (map(&v), map(&shifted), map(&g));
        prop_assert!((nss(&p, &fs).unwrap() - nss(&q, &fs).unwrap()).abs() < 1e-9);
        prop_assert!((cc(&p, &gt).unwrap() - cc(&q, &gt).unwrap()).abs() < 1e-9);
        let flipped: Vec<f64> = v.iter().map(|x| -a * x + b).collect();
        prop_assert!((cc(&p, &gt).unwrap() + cc(&map(&flipped), &gt).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_maps(p in positive_map(), q in positive_map(), k in 0.5..3.0f64) {
        prop_assert!(kldiv(&map(&p), &map(&q)).unwrap() >= 0.0);
        let scaled: Vec<f64> = p.iter().map(|x| k * x).collect();
        prop_assert!(kldiv(&map(&scaled), &map(&p)).unwrap().abs() < 1e-9);
    }

    #[test]
    fn fixed_points(p in positive_map(), q in positive_map(), f in fixations()) {
        let (pm, qm) = (map(&p), map(&q));
        prop_assert!((sim(&pm, &pm).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((cc(&pm, &pm).unwrap() - 1.0).abs() < 1e-12);
        let s = sim(&pm, &qm).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        let c = cc(&pm, &qm).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        let fs = FixationSet::new(H, W, f).unwrap();
        prop_assert!(info_gain(&pm, &fs, &pm).unwrap().abs() < 1e-12);
        prop_assert!((sauc(&pm, &fs, &fs).unwrap() - 0.5).abs() < 1e-12);
    }
}

#[test]
fn hand_cases() {
    let mut v = vec![0.0; H * W];
    v[0] = 1.0;
    let fs = FixationSet::new(H, W, vec![(0, 0)]).unwrap();
    assert_eq!(auc_judd(&map(&v), &fs).unwrap(), 1.0);
    let n = H * W;
    let mean = 1.0 / n as f64;
    let std = (mean * (1.0 - mean)).sqrt();
    assert!((nss(&map(&v), &fs).unwrap() - (1.0 - mean) / std).abs() < 1e-12);
    assert_eq!(nss(&map(&[0.3; H * W]), &fs).unwrap(), 0.0);
    assert_eq!(cc(&map(&[0.3; H * W]), &map(&v)).unwrap(), 0.0);
}

#[test]
fn out_of_range_fixations_list_every_bad_position() {
    let err = FixationSet::new(4, 4, vec![(0, 0), (4, 1), (1, 1), (2, 9)]).unwrap_err();
    match err {
        Error::Validation { lines, .. } => assert_eq!(lines, vec![2, 4]),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn report_fills_only_available_columns() {
    let p = map(&[0.5; H * W].iter().enumerate().map(|(i, v)| v + i as f64 / 100.0).collect::<Vec<_>>());
    let fs = FixationSet::new(H, W, vec![(7, 7), (6, 6)]).unwrap();
    let r = MetricReport::compute(
        &p,
        &EvalTargets {
            fixations: Some(&fs),
            ..EvalTargets::default()
        },
    )
    .unwrap();
    assert!(r.auc.is_some() && r.nss.is_some());
    assert!(r.cc.is_none() && r.sauc.is_none() && r.ig.is_none());
    assert_eq!(r.csv_row().split(',').count(), 7);
    assert_eq!(MetricReport::csv_header(), "auc,sauc,nss,cc,kldiv,sim,ig");
}

#[test]
fn negative_maps_are_a_domain_error_for_distribution_metrics() {
    let mut v = vec![0.1; H * W];
    v[3] = -0.5;
    assert!(matches!(sim(&map(&v), &map(&[0.1; H * W])), Err(Error::Numeric(_))));
    assert!(matches!(kldiv(&map(&[0.1; H * W]), &map(&v)), Err(Error::Numeric(_))));
}
