use num_complex::Complex64;
use proptest::prelude::*;
use qp_transport::cocycle::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[test]
fn transfer_matrix_examples() {
    let free = CocycleFamily::free(golden());
    assert_eq!(transfer_matrix(&free, 0.0, 0.3), Mat2::new(0.0, -1.0, 1.0, 0.0));
    assert_eq!(Mat2::new(0.0, -1.0, 1.0, 0.0), Mat2::J);
    assert!((Mat2::rotation(PI / 2.0) - Mat2::J).max_abs() < 1e-16);
    assert_eq!(transfer_matrix(&free, -2.0, 0.3), Mat2::new(2.0, -1.0, 1.0, 0.0));
    let amo = CocycleFamily::almost_mathieu(1.0, golden());
    let m = transfer_matrix(&amo, 1.0, 0.0);
    assert!((m - Mat2::new(1.0, -1.0, 1.0, 0.0)).max_abs() < 1e-15);
    assert_eq!(m.det(), 1.0);
}

#[test]
fn iterate_examples() {
    let free = CocycleFamily::free(golden());
    assert_eq!(iterate(&free, 0.4, 0.1, 0), Mat2::IDENTITY);
    assert!((iterate(&free, 0.0, 0.1, 4) - Mat2::IDENTITY).max_abs() < 1e-15);
    let amo = CocycleFamily::almost_mathieu(0.8, golden());
    let theta = 0.17;
    let fwd = iterate(&amo, 0.3, theta, 5);
    let back = iterate(&amo, 0.3, theta + 5.0 * golden(), -5);
    assert!((back * fwd - Mat2::IDENTITY).max_abs() < 1e-9);
}

#[test]
fn determinant_over_long_products() {
    for (fam, e) in [(CocycleFamily::free(golden()), 0.5), (CocycleFamily::almost_mathieu(0.25, golden()), 0.1)] {
        let m = iterate(&fam, e, 0.2, 1_000_000);
        assert!((m.det() - 1.0).abs() < 1e-9, "det {}", m.det());
    }
}

#[test]
fn lyapunov_examples() {
    let free = CocycleFamily::free(golden());
    let g = lyapunov(&free, 3.0, 100_000, 2).unwrap();
    assert!((g.gamma - ((3.0 + 5f64.sqrt()) / 2.0).ln()).abs() < 1e-3);
    assert!((g.gamma - free_lyapunov(3.0)).abs() < 1e-3);
    assert!(lyapunov(&free, 0.0, 100_000, 2).unwrap().gamma.abs() < 1e-6);
    assert!(lyapunov(&free, 0.0, 0, 2).is_err());
}

#[test]
fn supercritical_lyapunov_on_spectrum() {
    let amo = CocycleFamily::almost_mathieu(3.0, golden());
    let es = grid(-8.0, 8.0, 400);
    let scan = spectral_scan(&amo, &es, ScanConfig { lyapunov_iterations: 100_000, theta_samples: 1, ..Default::default() }).unwrap();
    let mut checked = 0;
    for i in 1..es.len() - 1 {
        if scan.rho[i] - scan.rho[i - 1] > 1e-3 && scan.rho[i + 1] - scan.rho[i] > 1e-3 {
            // long-product oracle: a single orbit at n = 10^6
            let g = lyapunov(&amo, es[i], 1_000_000, 1).unwrap().gamma;
            assert!((g - 3f64.ln()).abs() < 5e-2, "E={} gamma={g}", es[i]);
            checked += 1;
            if checked == 4 {
                break;
            }
        }
    }
    assert!(checked >= 2);
}

#[test]
fn rotation_examples() {
    let free = CocycleFamily::free(golden());
    let r = rotation_number(&free, 0.0, 1_000_000, 0.0).unwrap();
    assert!((r.rho - PI / 2.0).abs() < 1e-6);
    assert!(r.error_bound < 1e-5);
    assert!(rotation_number(&free, -2.0, 1_000_000, 0.0).unwrap().rho.abs() < 1e-4);
    assert!((rotation_number(&free, 1.0, 1_000_000, 0.0).unwrap().rho - 2.0 * PI / 3.0).abs() < 1e-6);
    assert!((free_rotation(1.0) - 2.0 * PI / 3.0).abs() < 1e-15);
}

#[test]
fn ids_examples() {
    let free = CocycleFamily::free(golden());
    assert!((ids(&free, 0.0, 100_000, 0.0).unwrap() - 0.5).abs() < 1e-6);
    assert_eq!(ids(&free, -2.5, 100_000, 0.0).unwrap(), 0.0);
    assert!(ids(&free, 2.5, 100_000, 0.0).unwrap() > 1.0 - 1e-4);
    let amo = CocycleFamily::almost_mathieu(0.5, golden());
    assert!(ids(&amo, -3.1, 100_000, 0.0).unwrap() < 1e-4);
    assert!(ids(&amo, 3.1, 100_000, 0.0).unwrap() > 1.0 - 1e-4);
}

#[test]
fn free_scan_has_no_gaps() {
    let free = CocycleFamily::free(golden());
    let scan = spectral_scan(&free, &grid(-1.99, 1.99, 400), ScanConfig::default()).unwrap();
    assert!(scan.gaps.is_empty());
    assert!(matches!(gap_labels(&scan, golden(), 20, 1e-3), Err(CocycleError::NoGapsDetected)));
    for (e, r) in scan.energies.iter().zip(&scan.rho) {
        assert!((r - free_rotation(*e)).abs() < 1e-4);
    }
}

#[test]
fn synthetic_plateau_label() {
    let alpha = golden();
    let energies = grid(0.0, 1.0, 12);
    let mut rho: Vec<f64> = energies.iter().map(|e| e * 2.0).collect();
    for r in rho.iter_mut().skip(4).take(4) {
        *r = PI * alpha;
    }
    let gaps = detect_gaps(&energies, &rho, 1e-4);
    assert_eq!(gaps.len(), 1);
    assert_eq!((gaps[0].first, gaps[0].last), (4, 7));
    let scan = SpectralScan {
        energies: energies.clone(),
        gamma: vec![0.0; 12],
        gamma_spread: vec![0.0; 12],
        ids: rho.iter().map(|r| r / PI).collect(),
        gaps,
        rho,
        config: ScanConfig::default(),
    };
    let labels = gap_labels(&scan, alpha, 20, 1e-3).unwrap();
    assert_eq!(labels[0].l, 1);
    assert!(labels[0].residual < 1e-15 && labels[0].labeled);
}

#[test]
fn almost_mathieu_gaps_are_labelled() {
    let alpha = golden();
    let amo = CocycleFamily::almost_mathieu(0.5, alpha);
    let scan = spectral_scan(&amo, &grid(-3.1, 3.1, 800), ScanConfig { lyapunov_iterations: 1000, theta_samples: 1, ..Default::default() }).unwrap();
    let labels = gap_labels(&scan, alpha, 20, 1e-3).unwrap();
    assert!(labels.len() >= 4, "{} gaps", labels.len());
    for l in &labels {
        assert!(l.labeled, "gap {:?} label {:?}", scan.gaps[l.gap], l);
    }
    let ls: Vec<i64> = labels.iter().map(|l| l.l).collect();
    assert!(ls.contains(&1) && ls.contains(&-1));
}

#[test]
fn thouless_free_case() {
    let free = CocycleFamily::free(golden());
    let scan = spectral_scan(&free, &grid(-3.2, 3.2, 2000), ScanConfig { rotation_iterations: 100_000, ..Default::default() }).unwrap();
    let rows = thouless_check(&scan, 0.05).unwrap();
    let at = |e: f64| rows.iter().min_by(|a, b| (a.e - e).abs().total_cmp(&(b.e - e).abs())).unwrap();
    let r3 = at(3.0);
    assert!((r3.stieltjes - free_lyapunov(r3.e)).abs() < 5e-2);
    assert!((r3.stieltjes - 0.9624).abs() < 5e-2);
    assert!(r3.discrepancy < 5e-2);
    for e in [-1.5, -0.3, 0.0, 0.7, 1.9] {
        assert!(at(e).stieltjes.abs() < 5e-2);
    }
    assert!(rows.iter().all(|r| r.discrepancy < 5e-2));
    let coarse = spectral_scan(&free, &grid(-3.0, 3.0, 10), ScanConfig::default()).unwrap();
    assert!(matches!(thouless_check(&coarse, 0.05), Err(CocycleError::GridTooCoarse { .. })));
}

#[test]
fn m_function_free_case() {
    let free = CocycleFamily::free(golden());
    let z = Complex64::new(0.0, 1.0);
    let m = m_function(&free, z, Side::Plus, 8, 0.0).unwrap();
    // roots of m² − zm + 1 = 0
    let disc = (z * z - 4.0).sqrt();
    let roots = [(z + disc) / 2.0, (z - disc) / 2.0];
    let oracle = *roots.iter().find(|r| r.im > 0.0 && r.norm() > 1.0).unwrap();
    assert!((m - oracle).norm() < 1e-8);
    assert!((m - Complex64::new(0.0, (1.0 + 5f64.sqrt()) / 2.0)).norm() < 1e-8);
    assert!((m + m.inv() - z).norm() < 1e-8);
    assert!(matches!(m_function(&free, Complex64::new(0.0, 0.0), Side::Plus, 8, 0.0), Err(CocycleError::PreconditionViolated(_))));
    assert!(m_function(&free, Complex64::new(1.0, -0.1), Side::Minus, 8, 0.0).is_err());
}

#[test]
fn m_functions_are_herglotz() {
    let amo = CocycleFamily::almost_mathieu(0.7, golden());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let z = Complex64::new(rng.gen_range(-4.0..4.0), rng.gen_range(0.01..2.0));
        let theta = rng.gen_range(0.0..1.0);
        assert!(m_function(&amo, z, Side::Plus, 16, theta).unwrap().im > 0.0);
        assert!(m_function(&amo, z, Side::Minus, 16, theta).unwrap().im > 0.0);
    }
}

#[test]
fn free_spectral_density() {
    let free = CocycleFamily::free(golden());
    let d0 = spectral_density(&free, 0.0, 1e-3, 64, 0.0).unwrap();
    assert!(d0[0][0] > 0.0);
    assert!((d0[0][0] - free_density(0.0)).abs() < 1e-2);
    assert!((d0[1][1] - free_density(0.0)).abs() < 1e-2);
    for e in [0.4, 1.1, 1.6] {
        let p = spectral_density(&free, e, 1e-3, 64, 0.0).unwrap()[0][0];
        let m = spectral_density(&free, -e, 1e-3, 64, 0.0).unwrap()[0][0];
        assert!((p - m).abs() < 1e-6);
        assert!((p - free_density(e)).abs() < 1e-2, "E={e}: {p} vs {}", free_density(e));
    }
}

#[test]
fn m_matrix_large_z() {
    let amo = CocycleFamily::almost_mathieu(0.5, golden());
    let z = Complex64::new(0.3, 1e4);
    let m = m_matrix(&amo, z, 8, 0.2).unwrap();
    let k = -z;
    assert!((m[0][0] * k - 1.0).norm() < 1e-3);
    assert!((m[1][1] * k - 1.0).norm() < 1e-3);
    assert!((m[0][1] * k).norm() < 1e-3);
}

#[test]
fn im_m_is_positive_semidefinite() {
    let amo = CocycleFamily::almost_mathieu(0.5, golden());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let z = Complex64::new(rng.gen_range(-3.5..3.5), rng.gen_range(0.01..3.0));
        let m = m_matrix(&amo, z, 16, rng.gen_range(0.0..1.0)).unwrap();
        let (a, b, c, d) = (m[0][0].im, m[0][1].im, m[1][0].im, m[1][1].im);
        assert!((b - c).abs() < 1e-12);
        assert!(a >= 0.0 && d >= 0.0 && a * d - b * c >= -1e-12, "z={z}");
    }
}

#[test]
fn free_eigenvectors_solve_the_recursion() {
    for e in [-1.7, -0.2, 0.9, 1.95] {
        for n in -1000i64..=1000 {
            let lhs = -free_eigenvector(e, n + 1) - free_eigenvector(e, n - 1);
            assert!((lhs - e * free_eigenvector(e, n)).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_composition_law(m in 0i64..60, n in 0i64..60, e in -3.0f64..3.0, theta in 0.0f64..1.0) {
        let amo = CocycleFamily::almost_mathieu(0.9, golden());
        let lhs = iterate(&amo, e, theta, m + n);
        let rhs = iterate(&amo, e, theta + n as f64 * golden(), m) * iterate(&amo, e, theta, n);
        // relative to the scale of the factors, the backward error of a floating product
        let scale = iterate(&amo, e, theta + n as f64 * golden(), m).norm() * iterate(&amo, e, theta, n).norm();
        prop_assert!((lhs - rhs).max_abs() <= 1e-9 * scale);
    }

    #[test]
    fn prop_rotation_monotone(mut es in prop::collection::vec(-3.2f64..3.2, 8), lambda in 0.0f64..1.5) {
        es.sort_by(f64::total_cmp);
        let amo = CocycleFamily::almost_mathieu(lambda, golden());
        let orbit = amo.orbit(0.0, 20_000);
        let r: Vec<RotationEstimate> = es.iter().map(|&e| rotation_from_orbit(&orbit, e)).collect();
        for w in r.windows(2) {
            prop_assert!(w[1].rho >= w[0].rho - 2.0 * w[0].error_bound);
            prop_assert!((0.0..=PI).contains(&w[0].rho));
        }
    }

    #[test]
    fn prop_lyapunov_nonnegative(e in -4.0f64..4.0, lambda in 0.0f64..2.0) {
        let amo = CocycleFamily::almost_mathieu(lambda, golden());
        prop_assert!(lyapunov(&amo, e, 2000, 2).unwrap().gamma >= -1e-9);
    }
}
