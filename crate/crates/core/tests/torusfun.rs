use num_complex::Complex64;
use proptest::prelude::*;
use qp_transport::numberfield::{AdmissibleParams, AdmissibleSubsequence, ContinuedFraction, Frequency};
use qp_transport::torusfun::*;
use std::f64::consts::PI;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

#[test]
fn evaluate_examples() {
    let lambda = 0.7;
    let v = AnalyticTorusFunction::from_modes(&[(1, c(lambda, 0.0)), (-1, c(lambda, 0.0))], 1.0).unwrap();
    assert!((v.evaluate(c(0.0, 0.0)).unwrap() - c(2.0 * lambda, 0.0)).norm() < 1e-15);
    let k = AnalyticTorusFunction::constant(-0.25, 0.3);
    assert_eq!(k.evaluate(c(0.77, -0.29)).unwrap(), c(-0.25, 0.0));
    let cosf = AnalyticTorusFunction::cosine(1.0, 1.0);
    let got = cosf.evaluate(c(0.0, 0.1)).unwrap();
    assert!((got.re - (0.2 * PI).cosh()).abs() < 1e-14 && got.im.abs() < 1e-14);
    assert!(matches!(cosf.evaluate(c(0.0, 1.0)), Err(TorusError::OutsideStrip { .. })));
}

#[test]
fn strip_norm_examples() {
    let f = AnalyticTorusFunction::cosine(1.0, 1.0);
    let n0 = f.strip_norm(0.0, &StripGrid::standard(&f, 0.0)).unwrap();
    assert!((n0 - 1.0).abs() < 1e-12);
    for h in [0.05, 0.2, 0.5, 1.0] {
        let n = f.strip_norm(h, &StripGrid::standard(&f, h)).unwrap();
        assert!((n - (2.0 * PI * h).cosh()).abs() < 1e-10, "h={h}");
    }
    let z = AnalyticTorusFunction::constant(0.0, 1.0);
    assert_eq!(z.strip_norm(0.5, &StripGrid::standard(&z, 0.5)).unwrap(), 0.0);
    assert!(f.strip_norm(1.5, &StripGrid::standard(&f, 1.5)).is_err());
}

#[test]
fn strip_norm_is_lower_bound_and_refines() {
    let f = AnalyticTorusFunction::from_modes(
        &[(1, c(0.3, 0.1)), (-1, c(0.3, -0.1)), (3, c(0.0, 0.2)), (-3, c(0.0, -0.2)), (7, c(0.05, 0.0)), (-7, c(0.05, 0.0))],
        0.4,
    )
    .unwrap();
    let g = StripGrid::standard(&f, 0.3);
    let coarse = f.strip_norm(0.3, &g).unwrap();
    let fine = f.strip_norm(0.3, &g.refined().refined()).unwrap();
    assert!(coarse <= fine * (1.0 + 1e-13));
    assert!(fine <= f.coefficient_bound(0.3) * (1.0 + 1e-13));
    assert!((fine - coarse) / fine < 1e-2);
}

#[test]
fn birkhoff_examples() {
    let k = AnalyticTorusFunction::constant(0.75, 1.0);
    assert!((birkhoff_sum(&k, 13, golden(), c(0.1, 0.0)) - c(9.75, 0.0)).norm() < 1e-14);
    assert_eq!(birkhoff_sum(&k, 0, golden(), c(0.1, 0.0)), c(0.0, 0.0));
    let f = AnalyticTorusFunction::cosine(1.0, 1.0);
    // q_10 = 89 for the golden mean
    let direct: f64 = (0..89).map(|k| (2.0 * PI * k as f64 * golden()).cos()).sum();
    assert!((birkhoff_sum(&f, 89, golden(), c(0.0, 0.0)).re - direct).abs() < 1e-12);
    let back: f64 = (-89..0).map(|k| (2.0 * PI * k as f64 * golden()).cos()).sum();
    assert!((birkhoff_sum(&f, -89, golden(), c(0.0, 0.0)).re - back).abs() < 1e-12);
    assert!((signed_birkhoff_sum(&f, -89, golden(), c(0.0, 0.0)).re + back).abs() < 1e-12);
}

#[test]
fn long_birkhoff_sum_is_compensated() {
    let f = AnalyticTorusFunction::cosine(1.0, 1.0);
    let n = 300_000i64;
    let alpha = golden();
    // closed form of Σ cos(2π(θ + kα))
    let theta = 0.123;
    let exact = ((c(0.0, 2.0 * PI * theta)).exp() * ((c(0.0, 2.0 * PI * n as f64 * alpha)).exp() - 1.0)
        / ((c(0.0, 2.0 * PI * alpha)).exp() - 1.0))
        .re;
    let got = birkhoff_sum(&f, n, alpha, c(theta, 0.0)).re;
    assert!((got - exact).abs() < 1e-9, "{got} vs {exact}");
}

#[test]
fn decay_check_on_fibonacci_scales() {
    let g = Frequency::parse("golden").unwrap();
    let cf = ContinuedFraction::expand(&g, 20, u128::MAX).unwrap();
    let sub = AdmissibleSubsequence::from_indices(&cf, (1..16).collect(), AdmissibleParams::primary(1.1)).unwrap();
    let f = AnalyticTorusFunction::cosine(1.0, 0.5);
    let rows = birkhoff_decay_check(&f, &sub, cf.alpha, 0.25, 0.5, DecayBound { constant: 1.0, exponent: 2.0 }).unwrap();
    let alpha = cf.alpha;
    for r in &rows {
        let oracle = ((PI * r.q * alpha).sin() / (PI * alpha).sin()).abs() * (2.0 * PI * r.strip).cosh();
        assert!((r.norm - oracle).abs() <= 1e-3 * oracle + 1e-12, "k={} {} vs {}", r.k, r.norm, oracle);
    }
    // the strips h_k widen with k, so the first levels may grow
    assert!(rows.iter().skip(3).all(|r| r.monotone));
    assert!(rows.last().unwrap().norm < 0.01);
    let k = AnalyticTorusFunction::constant(1.0, 0.5);
    let rows = birkhoff_decay_check(&k, &sub, cf.alpha, 0.25, 0.5, DecayBound { constant: 1.0, exponent: 2.0 }).unwrap();
    assert!(rows.iter().all(|r| r.norm < 1e-9 * r.q));
}

proptest! {
    #[test]
    fn prop_fourier_round_trip(re in prop::collection::vec(-1.0f64..1.0, 9), im in prop::collection::vec(-1.0f64..1.0, 9)) {
        let coeffs: Vec<Complex64> = re.iter().zip(&im).map(|(&a, &b)| c(a, b)).collect();
        let f = AnalyticTorusFunction::new(coeffs, 0.5).unwrap();
        let m = 4 * f.order() + 1;
        let samples: Vec<Complex64> = (0..m).map(|j| f.evaluate(c(j as f64 / m as f64, 0.0)).unwrap()).collect();
        let g = AnalyticTorusFunction::from_samples(&samples, 0.5).unwrap();
        for n in -(f.order() as i64)..=(f.order() as i64) {
            prop_assert!((g.coeff(n) - f.coeff(n)).norm() < 1e-12);
        }
        for n in (f.order() as i64 + 1)..=(g.order() as i64) {
            prop_assert!(g.coeff(n).norm() < 1e-12 && g.coeff(-n).norm() < 1e-12);
        }
    }

    #[test]
    fn prop_birkhoff_additivity(m in 0i64..400, n in 0i64..400, theta in 0.0f64..1.0, a in 0.1f64..0.9) {
        let f = AnalyticTorusFunction::from_modes(&[(1, c(0.3, 0.2)), (-1, c(0.3, -0.2)), (0, c(0.4, 0.0))], 1.0).unwrap();
        let lhs = birkhoff_sum(&f, m + n, a, c(theta, 0.0));
        let rhs = birkhoff_sum(&f, m, a, c(theta, 0.0)) + birkhoff_sum(&f, n, a, c(theta + m as f64 * a, 0.0));
        prop_assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn prop_signed_additivity(m in -300i64..300, n in -300i64..300, theta in 0.0f64..1.0) {
        let f = AnalyticTorusFunction::from_modes(&[(2, c(0.1, 0.2)), (-2, c(0.1, -0.2)), (0, c(0.9, 0.0))], 1.0).unwrap();
        let a = golden();
        let lhs = signed_birkhoff_sum(&f, m + n, a, c(theta, 0.0));
        let rhs = signed_birkhoff_sum(&f, m, a, c(theta, 0.0)) + signed_birkhoff_sum(&f, n, a, c(theta + m as f64 * a, 0.0));
        prop_assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn prop_real_flag(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let f = AnalyticTorusFunction::from_modes(&[(1, c(a, b)), (-1, c(a, -b)), (0, c(0.3, 0.0))], 1.0).unwrap();
        prop_assert!(f.is_real(1e-14));
        let x = 0.37;
        prop_assert!(f.evaluate(c(x, 0.0)).unwrap().im.abs() < 1e-14);
        prop_assert!((f.eval_real(x) - f.evaluate(c(x, 0.0)).unwrap().re).abs() < 1e-14);
        let g = AnalyticTorusFunction::from_modes(&[(1, c(a, b)), (-1, c(a + 0.5, -b))], 1.0).unwrap();
        prop_assert!(!g.is_real(1e-14));
    }
}
