use fastsal::distill::{
    deepgaze_loss, deepgaze_loss_terms, distribution_to_map, hint_loss, salgan_loss, to_distribution, TeacherBundle,
};
use fastsal::{Error, Shape, Tensor};
use proptest::prelude::*;

fn t(h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(Shape::new(1, 1, h, w), v.to_vec()).unwrap()
}

/// Plain scalar transcriptions of the loss formulas, independent of the library kernels.
mod oracle {
    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub fn bce(p: &[f64], y: &[f64]) -> f64 {
        let n = p.len() as f64;
        p.iter()
            .zip(y)
            .map(|(&p, &y)| {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n
    }

    pub fn salgan(logits: &[f64], gt: &[f64], pseudo: &[f64]) -> f64 {
        let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        bce(&p, gt) + bce(&p, pseudo)
    }

    pub fn deepgaze(logits: &[f64], dist: &[f64]) -> f64 {
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let g: Vec<f64> = e.iter().map(|v| v / z).collect();
        let kl: f64 = dist
            .iter()
            .zip(&g)
            .filter(|(&y, _)| y > 0.0)
            .map(|(&y, &q)| y * (y / (q + 1e-12)).ln())
            .sum();
        let dot: f64 = dist.iter().zip(&g).map(|(a, b)| a * b).sum();
        let na = dist.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = g.iter().map(|b| b * b).sum::<f64>().sqrt();
        let lo = dist.iter().cloned().fold(f64::MAX, f64::min);
        let hi = dist.iter().cloned().fold(f64::MIN, f64::max);
        let f: Vec<f64> = dist.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect();
        let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        kl + (1.0 - dot / (na * nb)) + bce(&p, &f)
    }
}

#[test]
fn salgan_fixture_is_two_ln_two() {
    let half = t(1, 2, &[0.5, 0.5]);
    let l = salgan_loss(&t(1, 2, &[0.0, 0.0]), Some(&half), Some(&half)).unwrap();
    let expected = oracle::salgan(&[0.0, 0.0], &[0.5, 0.5], &[0.5, 0.5]);
    assert!((expected - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((l.value - expected).abs() < 1e-6);
}

#[test]
fn deepgaze_two_pixel_fixture() {
    let (l, terms) = deepgaze_loss_terms(&t(1, 2, &[0.0, 0.0]), &t(1, 2, &[0.7, 0.3])).unwrap();
    let expected = oracle::deepgaze(&[0.0, 0.0], &[0.7, 0.3]);
    assert!((expected - 0.84696).abs() < 1e-5, "{expected}");
    assert!((l.value - expected).abs() < 1e-6);
    assert!((terms.kl - 0.08228).abs() < 1e-5);
    assert!((terms.cosine - 0.07153).abs() < 1e-5);
    assert!((terms.bce - 2f64.ln()).abs() < 1e-9);
}

#[test]
fn saturated_correct_salgan_is_near_zero() {
    let ones = t(1, 3, &[1.0; 3]);
    let l = salgan_loss(&t(1, 3, &[40.0; 3]), Some(&ones), Some(&ones)).unwrap();
    assert!(l.value < 1e-6);
}

#[test]
fn dropping_the_gt_term_halves_the_loss_at_gt_equal_pseudo() {
    let y = t(1, 3, &[0.2, 0.9, 0.4]);
    let x = t(1, 3, &[0.3, -1.0, 2.0]);
    let both = salgan_loss(&x, Some(&y), Some(&y)).unwrap().value;
    let one = salgan_loss(&x, None, Some(&y)).unwrap().value;
    assert!((both - 2.0 * one).abs() < 1e-12);
}

#[test]
fn salgan_rejects_targets_outside_unit_interval() {
    let bad = t(1, 2, &[0.5, 1.5]);
    let x = t(1, 2, &[0.0, 0.0]);
    assert!(salgan_loss(&x, Some(&bad), None).is_err());
}

#[test]
fn deepgaze_rejects_unnormalized_distributions() {
    let x = t(1, 2, &[0.0, 0.0]);
    let err = deepgaze_loss(&x, &t(1, 2, &[0.7, 0.7])).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn hint_fixture_and_named_layer_errors() {
    let s = t(1, 2, &[0.0, 0.0]);
    let te = t(1, 2, &[2.0, 2.0]);
    assert_eq!(hint_loss(&[&s], &[&te]).unwrap().value, 4.0);
    let other = t(2, 2, &[0.0; 4]);
    let err = hint_loss(&[&s, &s], &[&te, &other]).unwrap_err();
    assert!(err.to_string().contains("hint.1"), "{err}");
}

#[test]
fn uniform_distributions_give_zero_kl() {
    let (_, terms) = deepgaze_loss_terms(&t(1, 4, &[1.5; 4]), &t(1, 4, &[0.25; 4])).unwrap();
    assert!(terms.kl.abs() < 1e-10);
    assert!(terms.cosine.abs() < 1e-12);
}

#[test]
fn conversions() {
    let g = to_distribution(&t(1, 4, &[3.0; 4])).unwrap();
    assert!(g.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let f = distribution_to_map(&t(1, 3, &[0.1, 0.2, 0.3]));
    for (a, b) in f.data().iter().zip([0.0, 0.5, 1.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(distribution_to_map(&g).data().iter().all(|&v| v == 0.0));
}

#[test]
fn bundle_round_trips_through_a_weight_store() {
    let b = TeacherBundle::<f32> {
        hints: (0..4).map(|i| Tensor::full(Shape::new(1, 2, 4 >> (i / 2), 4 >> (i / 2)), i as f32)).collect(),
        pseudo_map: Some(Tensor::full(Shape::new(1, 1, 2, 2), 0.3)),
        pseudo_dist: Some(Tensor::full(Shape::new(1, 1, 2, 2), 0.25)),
    };
    let back = TeacherBundle::from_store(&b.to_store()).unwrap();
    assert_eq!(back, b);
    let bad = TeacherBundle::<f32> {
        pseudo_map: Some(Tensor::full(Shape::new(1, 1, 1, 1), 2.0)),
        ..TeacherBundle::default()
    };
    assert!(bad.validate().is_err());
}

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0..6.0f64, n)
}

fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn salgan_matches_oracle_and_is_symmetric(x in logits(12), gt in unit_vec(12), ps in unit_vec(12)) {
        let (xt, gtt, pst) = (t(3, 4, &x), t(3, 4, &gt), t(3, 4, &ps));
        let a = salgan_loss(&xt, Some(&gtt), Some(&pst)).unwrap().value;
        let b = salgan_loss(&xt, Some(&pst), Some(&gtt)).unwrap().value;
        prop_assert!((a - oracle::salgan(&x, &gt, &ps)).abs() < 1e-9);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn deepgaze_matches_oracle_with_nonnegative_terms(x in logits(12), d in dist(12)) {
        let (l, terms) = deepgaze_loss_terms(&t(3, 4, &x), &t(3, 4, &d)).unwrap();
        prop_assert!((l.value - oracle::deepgaze(&x, &d)).abs() < 1e-9);
        prop_assert!(terms.kl >= -1e-12);
        prop_assert!(terms.cosine >= -1e-12);
        prop_assert!(l.value >= 0.0);
    }

    #[test]
    fn hint_is_symmetric_zero_on_diagonal_and_quadratic(a in logits(8), b in logits(6), c in logits(8), d in logits(6), k in 0.1..4.0f64) {
        let (a, b, c, d) = (t(2, 4, &a), t(2, 3, &b), t(2, 4, &c), t(2, 3, &d));
        let ab = hint_loss(&[&a, &b], &[&c, &d]).unwrap().value;
        let ba = hint_loss(&[&c, &d], &[&a, &b]).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(hint_loss(&[&a, &b], &[&a, &b]).unwrap().value, 0.0);
        let scaled = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let mut r = y.clone();
            for (r, (&xv, &yv)) in r.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
                *r = xv + k * (yv - xv);
            }
            r
        };
        let (c2, d2) = (scaled(&a, &c), scaled(&b, &d));
        let s = hint_loss(&[&a, &b], &[&c2, &d2]).unwrap().value;
        prop_assert!((s - k * k * ab).abs() <= 1e-9 * (1.0 + s));
    }
}
