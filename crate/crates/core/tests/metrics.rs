use loda::metrics::{evaluate_scores, logistic4, logistic_correct, plcc, plcc_loss, plcc_loss_value, srcc, CorrectionKind};
use loda::Error;
use loda_tensor::{Rng, Tape, Tensor};
use proptest::prelude::*;

fn naive_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    num / (da.sqrt() * db.sqrt())
}

/// Average ranks by counting, O(n^2).
fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Tie-free rank-difference formula `1 - 6 sum d^2 / (T (T^2 - 1))`.
fn d_squared_srcc(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (naive_ranks(a), naive_ranks(b));
    let t = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (t * (t * t - 1.0))
}

fn random_pair(rng: &mut Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
    let b: Vec<f64> = a.iter().map(|x| 0.5 * x + rng.normal(0.0, 1.0)).collect();
    (a, b)
}

#[test]
fn agree_with_definitions_on_100_random_vectors() {
    let mut rng = Rng::new(2024);
    for _ in 0..100 {
        let n = 2 + rng.below(199);
        let (a, b) = random_pair(&mut rng, n);
        assert!((plcc(&a, &b).unwrap() - naive_pearson(&a, &b)).abs() < 1e-9);
        assert!((srcc(&a, &b).unwrap() - d_squared_srcc(&a, &b)).abs() < 1e-9, "n={n}");
    }
}

#[test]
fn ties_use_average_ranks() {
    let mut rng = Rng::new(7);
    for _ in 0..100 {
        let n = 2 + rng.below(199);
        let a: Vec<f64> = (0..n).map(|_| rng.below(6) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.below(6) as f64).collect();
        let got = srcc(&a, &b).unwrap();
        let (ra, rb) = (naive_ranks(&a), naive_ranks(&b));
        if ra.iter().all(|r| *r == ra[0]) || rb.iter().all(|r| *r == rb[0]) {
            assert_eq!(got, 0.0);
        } else {
            assert!((got - naive_pearson(&ra, &rb)).abs() < 1e-9);
        }
    }
}

#[test]
fn hand_cases() {
    assert!((srcc(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() + 0.5).abs() < 1e-12);
    assert_eq!(srcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    assert_eq!(srcc(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), -1.0);
    let r = plcc(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
    // Centered: s = (-1, 0, 1), s_hat = (-4, -1, 5) / 3, so r = 3 / sqrt(2 * 42 / 9).
    assert!((r - 9.0 / 84f64.sqrt()).abs() < 1e-12);
    assert!((plcc_loss_value(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap() - (1.0 - r) / 2.0).abs() < 1e-15);
    let s = [1.0, 4.0, 2.0, 8.0];
    assert_eq!(plcc(&s.map(|v| 2.0 * v + 5.0), &s).unwrap(), 1.0);
    assert_eq!(plcc(&s.map(|v| -v), &s).unwrap(), -1.0);
    assert!(matches!(srcc(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
    assert!(matches!(plcc(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
}

#[test]
fn loss_is_half_of_one_minus_plcc_exactly() {
    let mut rng = Rng::new(3);
    for _ in 0..50 {
        let n = 2 + rng.below(30);
        let (a, b) = random_pair(&mut rng, n);
        let tape = Tape::new();
        let v = tape.leaf(&Tensor::from_vec(&[n], a.clone()).unwrap().with_requires_grad(true));
        let loss = plcc_loss(v, &b).unwrap().value().item().unwrap();
        assert_eq!(loss, (1.0 - plcc(&a, &b).unwrap()) / 2.0);
        assert_eq!(plcc_loss_value(&a, &b).unwrap(), loss);
        assert!((0.0..=1.0).contains(&loss));
    }
    let tape = Tape::new();
    let c = tape.leaf(&Tensor::full(&[3], 2.0).unwrap());
    assert!(matches!(plcc_loss(c, &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
}

#[test]
fn logistic_data_is_fitted_exactly() {
    let beta = [0.0, 1.0, 0.5, 0.1];
    let mut rng = Rng::new(11);
    for _ in 0..10 {
        let pred: Vec<f64> = (0..40).map(|_| rng.uniform(0.0, 1.0)).collect();
        let label: Vec<f64> = pred.iter().map(|&x| logistic4(x, &beta)).collect();
        let fit = logistic_correct(&pred, &label).unwrap();
        assert_eq!(fit.kind, CorrectionKind::Logistic);
        let r = plcc(&fit.corrected, &label).unwrap();
        assert!((r - 1.0).abs() < 1e-6, "plcc {r}");
    }
}

#[test]
fn correction_keeps_srcc_and_never_loses_plcc() {
    let mut rng = Rng::new(12);
    for _ in 0..50 {
        let n = 8 + rng.below(60);
        let (a, b) = random_pair(&mut rng, n);
        let fit = logistic_correct(&a, &b).unwrap();
        assert_eq!(srcc(&fit.corrected, &b).unwrap(), srcc(&a, &b).unwrap());
        assert!(plcc(&fit.corrected, &b).unwrap() >= plcc(&a, &b).unwrap() - 1e-9);
        let linear: Vec<f64> = a.iter().map(|x| 3.0 * x - 1.0).collect();
        let fit = logistic_correct(&a, &linear).unwrap();
        assert!(plcc(&fit.corrected, &linear).unwrap() >= 1.0 - 1e-9);
    }
}

#[test]
fn constant_predictions_fall_back() {
    let fit = logistic_correct(&[2.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(fit.kind, CorrectionKind::Identity);
    assert!(fit.warning.is_some());
    let (m, warning) = evaluate_scores(&[2.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(m.srcc, 0.0);
    assert_eq!(m.plcc, 0.0);
    assert!(warning.is_some());
    let (m, _) = evaluate_scores(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!((m.srcc, m.plcc), (1.0, 1.0));
}

proptest! {
    #[test]
    fn srcc_ignores_increasing_transforms(v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let t: Vec<f64> = a.iter().map(|x| x.powi(3) + 2.0 * x).collect();
        prop_assert_eq!(srcc(&a, &b).unwrap(), srcc(&t, &b).unwrap());
    }

    #[test]
    fn plcc_affine_and_sign(v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
                            scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        prop_assume!(plcc(&a, &b).is_ok());
        let r = plcc(&a, &b).unwrap();
        let t: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
        prop_assert!((plcc(&t, &b).unwrap() - r).abs() < 1e-9);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((plcc(&neg, &b).unwrap() + r).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&r));
    }
}
