//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use num_bigint::BigInt;
use num_complex::Complex64;
use num_traits::ToPrimitive;
use qp_transport::cocycle::*;
use qp_transport::evolve::*;
use qp_transport::grid;
use qp_transport::kam::*;
use qp_transport::numberfield::*;
use qp_transport::spectral_transform::*;
use qp_transport::torusfun::AnalyticTorusFunction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn golden() -> Frequency {
    Frequency::parse("golden").unwrap()
}

fn alpha() -> f64 {
    golden().value()
}

fn qseq() -> AdmissibleSubsequence {
    let cf = ContinuedFraction::expand(&golden(), 30, u128::MAX).unwrap();
    construct_admissible(&cf, 1.1).unwrap()
}

fn grid_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn err<E: std::fmt::Debug>(what: &'static str) -> impl Fn(E) -> String {
    move |e| format!("{what}: {e:?}")
}

fn rotation_vs_arccos() -> Outcome {
    let free = CocycleFamily::free(alpha());
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let e = -2.0 + 4.0 * (i as f64 + 0.5) / 50.0;
        let rho = rotation_number(&free, e, 1_000_000, 0.0).map_err(err("rotation"))?.rho;
        worst = worst.max((rho - (-e / 2.0).acos()).abs());
    }
    ensure!(worst < 1e-5, "max error {worst:e}");
    Ok(format!("max error {worst:.2e} over 50 energies"))
}

fn ballistic_transport() -> Outcome {
    let free = CocycleFamily::free(alpha());
    let times = log_times(10.0, 100.0, 31);
    let rep = evolve(&free, 0.0, &WavePacket::delta(0, 4, 0.0), &times, &[2.0], &PropagateConfig::new(1e-8)).map_err(err("evolve"))?;
    let mut worst: f64 = 0.0;
    for (t, m) in rep.times.iter().zip(rep.series(2.0).unwrap()) {
        let exact = (1.0 + 2.0 * t * t).sqrt();
        worst = worst.max((m - exact).abs() / exact);
    }
    ensure!(worst <= 1e-3, "moment relative error {worst:e}");
    let ex = transport_exponents(&rep, 2.0, (10.0, 100.0)).map_err(err("exponents"))?;
    ensure!(ex.beta_minus >= 0.99 && ex.beta_plus <= 1.01, "exponents {ex:?}");
    let g = upper_bound_guard(&rep, 2.0).map_err(err("guard"))?;
    ensure!(g.sup <= 1.5 && !g.violated, "guard sup {}", g.sup);
    Ok(format!("moment error {worst:.1e}, beta in [{:.4}, {:.4}], guard {:.3}", ex.beta_minus, ex.beta_plus, g.sup))
}

/// Grid energies where ρ increases strictly on both sides.
fn spectral_points(scan: &SpectralScan, step: f64) -> Vec<usize> {
    (1..scan.energies.len() - 1)
        .filter(|&i| scan.rho[i] - scan.rho[i - 1] > step && scan.rho[i + 1] - scan.rho[i] > step)
        .collect()
}

fn lyapunov_almost_mathieu() -> Outcome {
    let strong = CocycleFamily::almost_mathieu(3.0, alpha());
    let es = grid_points(-8.0, 8.0, 2000);
    let cfg = ScanConfig { lyapunov_iterations: 1000, theta_samples: 1, ..Default::default() };
    let scan = spectral_scan(&strong, &es, cfg.clone()).map_err(err("scan"))?;
    let points = spectral_points(&scan, 1e-4);
    ensure!(points.len() >= 20, "only {} spectral points at lambda = 3", points.len());
    let stride = points.len() / 20;
    let mut worst: f64 = 0.0;
    for &i in points.iter().step_by(stride).take(20) {
        let g = lyapunov(&strong, es[i], 1_000_000, 1).map_err(err("lyapunov"))?.gamma;
        worst = worst.max((g - 3f64.ln()).abs());
    }
    ensure!(worst < 5e-2, "lambda = 3: max |gamma - ln 3| = {worst:e}");

    let weak = CocycleFamily::almost_mathieu(0.25, alpha());
    let es = grid_points(-2.6, 2.6, 1000);
    let scan = spectral_scan(&weak, &es, cfg).map_err(err("scan"))?;
    let points = spectral_points(&scan, 1e-4);
    ensure!(points.len() >= 20, "only {} spectral points at lambda = 0.25", points.len());
    let mut top: f64 = 0.0;
    for &i in &points {
        top = top.max(lyapunov(&weak, es[i], 100_000, 1).map_err(err("lyapunov"))?.gamma);
    }
    ensure!(top < 1e-2, "lambda = 0.25: max gamma {top:e}");
    Ok(format!("lambda=3 max deviation {worst:.1e}; lambda=0.25 max gamma {top:.1e} on {} points", points.len()))
}

fn gap_labelling() -> Outcome {
    let amo = CocycleFamily::almost_mathieu(0.5, alpha());
    let cfg = ScanConfig { lyapunov_iterations: 1000, theta_samples: 1, ..Default::default() };
    let scan = spectral_scan(&amo, &grid_points(-3.1, 3.1, 800), cfg).map_err(err("scan"))?;
    let labels = gap_labels(&scan, alpha(), 20, 1e-3).map_err(err("labels"))?;
    ensure!(!labels.is_empty(), "no gaps");
    let worst = labels.iter().map(|l| l.residual).fold(0.0, f64::max);
    for l in &labels {
        ensure!(l.labeled && l.l.abs() <= 20 && l.residual < 1e-3, "unlabelled gap {:?}", l);
    }
    let mut ls: Vec<i64> = labels.iter().map(|l| l.l).collect();
    ls.sort();
    Ok(format!("{} gaps, labels {ls:?}, max residual {worst:.1e}", labels.len()))
}

fn thouless() -> Outcome {
    let mut notes = Vec::new();
    for (name, fam) in [("free", CocycleFamily::free(alpha())), ("lambda=0.5", CocycleFamily::almost_mathieu(0.5, alpha()))] {
        let cfg = ScanConfig { rotation_iterations: 100_000, ..Default::default() };
        let scan = spectral_scan(&fam, &grid_points(-3.2, 3.2, 2000), cfg).map_err(err("scan"))?;
        let rows = thouless_check(&scan, 0.05).map_err(err("thouless"))?;
        let worst = rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max);
        ensure!(worst < 5e-2, "{name}: discrepancy {worst:e}");
        notes.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("max discrepancy: {}", notes.join(", ")))
}

fn random_traceless(rng: &mut impl Rng, size: f64) -> Mat2 {
    let (x, y, z): (f64, f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let v = Mat2::new(x, y - z, y + z, -x);
    v.scale(size / v.norm())
}

fn kam_contraction() -> Outcome {
    let fam = CocycleFamily::almost_mathieu(0.01, alpha());
    let q = qseq();
    let cfg = KamConfig::default();
    let scales: Vec<(f64, f64)> = q.q.iter().zip(&q.qbar).filter(|(x, _)| **x >= cfg.t0).map(|(&a, &b)| (a, b)).take(3).collect();
    let mut tested = 0;
    let mut slowest = f64::INFINITY;
    for i in 0..60 {
        if tested == 10 {
            break;
        }
        let e = -1.9 + 3.8 * (i as f64 + 0.5) / 60.0;
        let rho = rotation_number(&fam, e, 100_000, 0.0).map_err(err("rotation"))?.rho;
        if !scales.iter().all(|&(a, b)| is_nonresonant(rho / (2.0 * PI), a, b, &cfg.resonance)) || label_margin(rho / PI, fam.alpha, 20) < 0.05 {
            continue;
        }
        let run = kam_iterate(&fam, e, &q, &cfg, 3).map_err(err("kam"))?;
        ensure!(run.levels() >= 3, "E={e}: {} levels, {:?}", run.levels(), run.termination);
        for w in run.states.windows(2) {
            slowest = slowest.min(w[0].xi_norm / w[1].xi_norm);
        }
        ensure!(slowest >= 10.0, "E={e}: contraction {slowest}");
        for s in &run.states {
            ensure!(s.residual < 1e-8, "E={e}: residual {:e} at level {}", s.residual, s.level);
        }
        tested += 1;
    }
    ensure!(tested == 10, "only {tested} nonresonant energies");

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut solved, mut refused) = (0, 0);
    for _ in 0..1000 {
        let eps = 10f64.powf(rng.gen_range(-8.0..-2.0));
        let theta = rng.gen_range(-PI..PI);
        let a = sl2_exp(&random_traceless(&mut rng, eps)) * Mat2::rotation(theta);
        let opts = AlgebraicOptions::from_smallness(eps, 3, 1e-13);
        match algebraic_conjugation(&a, theta, &opts) {
            Ok(r) => {
                let direct = (r.b * a * r.b.inverse() - Mat2::rotation(r.theta)).norm();
                ensure!(direct <= 1e-12 && r.residual <= 1e-12, "theta {theta}: residual {direct:e}");
                ensure!(resonance_inverse_norm(theta) <= opts.resonance_threshold, "theta {theta} passed the guard");
                solved += 1;
            }
            Err(KamError::ResonantAngle { inverse_norm, threshold }) => {
                ensure!(inverse_norm > threshold, "spurious refusal at theta {theta}");
                refused += 1;
            }
            Err(e) => return Err(format!("theta {theta} eps {eps}: {e}")),
        }
    }
    ensure!(solved > 0 && refused > 0, "{solved} solved, {refused} refused");
    Ok(format!("10 energies, min contraction {slowest:.0}x; algebraic {solved} solved / {refused} refused"))
}

fn phase_growth() -> Outcome {
    let q = qseq();
    let cfg = KamConfig::default();
    let free = CocycleFamily::free(alpha());
    let ns = [1u64, 100, 1000, 10_000];
    let mut free_err: f64 = 0.0;
    for e in [0.0, -1.2, 0.9, 1.5] {
        let rows = phase_derivative_at(&free, e, &q, &cfg, 2, &ns).map_err(err("free phase"))?;
        let exact = 1.0 / (2.0 * free_rotation(e).sin());
        for r in &rows {
            free_err = free_err.max((r.min_ratio - exact).abs());
        }
    }
    ensure!(free_err < 1e-4, "free: |dphi/n - 1/(2 sin)| = {free_err:e}");

    let amo = CocycleFamily::almost_mathieu(0.01, alpha());
    let mut worst: f64 = 0.0;
    for e in [0.5, -1.3] {
        let rows = phase_derivative_at(&amo, e, &q, &cfg, 3, &[100, 1000, 10_000]).map_err(err("amo phase"))?;
        let h = 1e-3;
        let drho = (rotation_number(&amo, e + h, 1_000_000, 0.0).map_err(err("rotation"))?.rho
            - rotation_number(&amo, e - h, 1_000_000, 0.0).map_err(err("rotation"))?.rho)
            / (2.0 * h);
        for r in &rows {
            worst = worst.max((r.min_ratio / drho - 1.0).abs());
        }
    }
    ensure!(worst < 0.2, "lambda=0.01: relative deviation {worst}");
    Ok(format!("free error {free_err:.1e} per unit n; lambda=0.01 max relative deviation {worst:.3}"))
}

fn correlation_decay() -> Outcome {
    let src = FreeSource::new(alpha());
    let chi = build_cutoff(-1.8, 1.8).map_err(err("cutoff"))?;
    let psi = PolynomialBump::new(-1.2, 1.6).map_err(err("weight"))?;
    let theta = 0.3;
    let ks: Vec<i64> = (0..=256).collect();
    let quad = CorrelationOptions::default();
    let table = correlation_table(&src, &chi, &psi, theta, &ks, &quad, &[]).map_err(err("correlations"))?;
    let slope = table.decay_slope(8, 256).ok_or("too few rows for a slope")?;
    ensure!(slope <= -1.4, "slope {slope}");

    let opts = IbpOptions::default();
    let mut ibp: f64 = 0.0;
    for (n, k) in [(0, 50), (3, 7), (-10, 25), (0, 120), (5, 200)] {
        let r = ibp_consistency(&src, &chi, &psi, theta, n, k, (-1.5, 1.7), &opts).map_err(err("ibp"))?;
        ibp = ibp.max(r.residual);
    }
    ensure!(ibp <= 1e-8, "ibp residual {ibp:e}");

    let u0 = moment(&WavePacket::delta(0, 4, 0.0), 2.0).map_err(err("moment"))?;
    let g = transform_norm(&src, &chi, &psi, theta, &[(0, Complex64::new(1.0, 0.0))], &quad.quad).map_err(err("norm"))?;
    let mut c = f64::INFINITY;
    for t in log_times(1e2, 1e4, 9) {
        let lb = lower_bound_estimate(&table, u0, g, t, 0.1).map_err(err("lower bound"))?;
        c = c.min(lb.floor / t.powf(0.9));
    }
    ensure!(c > 0.0, "floor / T^0.9 reaches {c}");
    Ok(format!("slope {slope:.3}, ibp residual {ibp:.1e}, floor >= {c:.3e} T^0.9"))
}

fn dist(x: f64) -> f64 {
    let f = x - x.floor();
    f.min(1.0 - f)
}

fn number_theory() -> Outcome {
    for name in ["golden", "silver", "bronze", "e"] {
        let cf = ContinuedFraction::expand(&Frequency::parse(name).unwrap(), 45, u128::MAX).map_err(err("expand"))?;
        for k in 1..cf.depth {
            let det = BigInt::from(cf.p[k].clone()) * BigInt::from(cf.q[k - 1].clone())
                - BigInt::from(cf.p[k - 1].clone()) * BigInt::from(cf.q[k].clone());
            ensure!(det.magnitude().to_u64() == Some(1), "{name}: determinant {det} at k={k}");
        }
        let cf = ContinuedFraction::expand(&Frequency::parse(name).unwrap(), 40, 100_000u32).map_err(err("expand"))?;
        let mut running = f64::INFINITY;
        let mut j = 1u64;
        for n in 1..cf.depth {
            let qn = cf.q[n].to_u64().unwrap();
            let floor = dist(cf.q[n - 1].to_f64().unwrap() * cf.alpha);
            while j < qn {
                running = running.min(dist(j as f64 * cf.alpha));
                j += 1;
            }
            ensure!(running >= floor - 1e-15, "{name}: some k < q_{n} beats q_{}", n - 1);
        }
    }
    let names = ["golden", "silver", "bronze", "e", "0.7071067811865475244008443621048490392848359376884740"];
    let mut secondaries = 0;
    for name in names {
        let cf = ContinuedFraction::expand(&Frequency::parse(name).unwrap(), 40, u128::MAX).map_err(err("expand"))?;
        for a in [1.05, 1.1, 1.5, 2.0] {
            let s = construct_admissible(&cf, a).map_err(err("construct"))?;
            ensure!(is_admissible(&cf, &s).map_err(err("check"))?, "{name} A={a} not admissible");
            if let Ok(r) = derive_secondary(&cf, &s, a) {
                ensure!(secondary_conclusion_holds(&cf, &s, &r, a), "{name} A={a}: secondary conclusion fails");
                secondaries += 1;
            }
        }
    }
    ensure!(secondaries >= 5, "only {secondaries} secondary sequences");
    Ok(format!("4 expansions checked, 5 frequencies x 4 growth rates admissible, {secondaries} secondary checks"))
}

fn random_packet(rng: &mut ChaCha8Rng, hw: usize) -> WavePacket {
    let amps: Vec<Complex64> = (0..2 * hw + 1).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    WavePacket::new(hw, amps.iter().map(|a| a / norm).collect(), 0.0).unwrap()
}

fn propagation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = PropagateConfig::new(1e-9);
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let fam = CocycleFamily::almost_mathieu(rng.gen_range(0.0..3.0), alpha());
        let th = rng.gen_range(0.0..1.0);
        let t = rng.gen_range(0.1..40.0);
        let hw = rng.gen_range(1..10);
        let u0 = random_packet(&mut rng, hw);
        let u = propagate(&fam, th, &u0, t, &cfg).map_err(err("propagate"))?;
        let back = propagate(&fam, th, &u, -t, &cfg).map_err(err("propagate"))?;
        let hw = back.half_width as i64;
        let reversal = (-hw..=hw).map(|n| (back.amplitude(n) - u0.amplitude(n)).norm_sqr()).sum::<f64>().sqrt();
        let drift = (energy(&fam, th, &u) - energy(&fam, th, &u0)).abs();
        worst = worst.max((u.norm() - 1.0).abs()).max(drift).max(reversal);
    }
    ensure!(worst < 1e-7, "propagation error {worst:e}");
    Ok(format!("{worst:.1e}"))
}

fn fourier_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let order = rng.gen_range(0..12usize);
        let coeffs: Vec<Complex64> = (0..2 * order + 1).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let f = AnalyticTorusFunction::new(coeffs, 0.5).map_err(err("torus"))?;
        let m = 4 * f.order() + 1;
        let samples: Vec<Complex64> = (0..m).map(|j| f.evaluate(Complex64::new(j as f64 / m as f64, 0.0)).unwrap()).collect();
        let g = AnalyticTorusFunction::from_samples(&samples, 0.5).map_err(err("torus"))?;
        let top = f.order().max(g.order()) as i64;
        for n in -top..=top {
            worst = worst.max((g.coeff(n) - f.coeff(n)).norm());
        }
        let values: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let back = grid::from_coefficients(&grid::coefficients(&values));
        worst = worst.max(values.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure!(worst < 1e-12, "round-trip error {worst:e}");
    Ok(format!("{worst:.1e}"))
}

fn q_operator_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let theta = rng.gen_range(-PI..PI);
        let r = Mat2::rotation(theta);
        let m = Mat2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let s = q_operator(&m);
        for d in [
            q_operator(&r).max_abs(),
            (r * s - q_operator(&(r * m))).max_abs(),
            (q_operator(&(Mat2::rotation(-theta) * m)) - q_operator(&(m * r))).max_abs(),
            (Mat2::rotation(-theta) * s - q_operator(&(s * r))).max_abs(),
            (q_operator(&s) - s).max_abs(),
        ] {
            worst = worst.max(d);
        }
    }
    ensure!(worst < 1e-12, "identity error {worst:e}");
    Ok(format!("{worst:.1e}"))
}

/// Serialized results from two thread pools of different sizes.
fn determinism() -> Outcome {
    let job = || -> Result<Vec<u8>, String> {
        let amo = CocycleFamily::almost_mathieu(0.5, alpha());
        let scan = spectral_scan(&amo, &grid_points(-3.0, 3.0, 200), ScanConfig { rotation_iterations: 20_000, ..Default::default() })
            .map_err(err("scan"))?;
        let rep = evolve(&amo, 0.2, &WavePacket::delta(0, 4, 0.0), &log_times(1.0, 30.0, 6), &[1.0, 2.0], &PropagateConfig::new(1e-8))
            .map_err(err("evolve"))?;
        let run = kam_iterate(&CocycleFamily::almost_mathieu(0.01, alpha()), 0.5, &qseq(), &KamConfig::default(), 3).map_err(err("kam"))?;
        let src = FreeSource::new(alpha());
        let chi = build_cutoff(-1.8, 1.8).map_err(err("cutoff"))?;
        let psi = PolynomialBump::new(-1.2, 1.6).map_err(err("weight"))?;
        let table = correlation_table(&src, &chi, &psi, 0.3, &[0, 5, 40], &CorrelationOptions::default(), &[]).map_err(err("correlations"))?;
        let mut bytes = serde_json::to_vec(&scan).unwrap();
        bytes.extend(serde_json::to_vec(&rep).unwrap());
        bytes.extend(serde_json::to_vec(&KamDocument::from_run(&run)).unwrap());
        bytes.extend(serde_json::to_vec(&table).unwrap());
        Ok(bytes)
    };
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let one = pool(1).install(job)?;
    let three = pool(3).install(job)?;
    let again = pool(1).install(job)?;
    ensure!(one == three && one == again, "reruns differ");
    Ok(format!("{} bytes identical across 3 runs", one.len()))
}

fn properties() -> Outcome {
    let parts = [
        ("propagate", propagation_properties()?),
        ("fourier", fourier_round_trip()?),
        ("q-operator", q_operator_identities()?),
        ("determinism", determinism()?),
    ];
    Ok(parts.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<u64>); 10] = [
        ("free rotation number", rotation_vs_arccos, Some(30)),
        ("ballistic free transport", ballistic_transport, Some(60)),
        ("almost Mathieu Lyapunov exponent", lyapunov_almost_mathieu, Some(120)),
        ("gap labelling", gap_labelling, Some(120)),
        ("Thouless consistency", thouless, Some(180)),
        ("KAM contraction", kam_contraction, Some(300)),
        ("phase derivative growth", phase_growth, Some(180)),
        ("correlation decay", correlation_decay, Some(600)),
        ("number theory", number_theory, Some(60)),
        ("property suites", properties, None),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let result = match (result, budget) {
            (Ok(_), Some(b)) if elapsed > Duration::from_secs(*b) => Err(format!("over the {b} s budget")),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name} ({:.1} s): {detail}", i + 1, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
