use crate::config::{PotentialKind, RunConfig, WeightKind};
use crate::output::{json_artifact, Artifact, Cell, Table};
use num_complex::Complex64;
use qp_transport::cocycle::{spectral_scan, CocycleFamily, ScanConfig};
use qp_transport::evolve::{evolve, moment, PropagateConfig, TransportReport, WavePacket};
use qp_transport::kam::{kam_iterate, KamConfig, KamDocument, ResonanceParams};
use qp_transport::numberfield::{construct_admissible, scale_windows, AdmissibleSubsequence, ContinuedFraction, Frequency};
use qp_transport::spectral_transform::{
    build_cutoff, build_psi, correlation_table, QuadratureOptions, reach_scan, ReachOptions, SpectralError, lower_bound_estimate, transform_norm, BlochSource, CorrelationOptions, CorrelationTable,
    FreeSource, Indicator, KamSource, PolynomialBump, SmoothCutoff, Weight,
};
use qp_transport::torusfun::AnalyticTorusFunction;
use serde_json::json;
use std::fmt::{Debug, Display};

pub enum Failure {
    Config(String),
    Compute { module: &'static str, message: String, detail: String },
}

fn failed<E: Display + Debug>(module: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure::Compute { module, message: e.to_string(), detail: format!("{e:?}") }
}

type Outcome = Result<Vec<Artifact>, Failure>;

fn frequency(cfg: &RunConfig) -> Result<Frequency, Failure> {
    Frequency::parse(&cfg.alpha).map_err(|e| Failure::Config(format!("alpha: {e}")))
}

fn family(cfg: &RunConfig) -> Result<CocycleFamily, Failure> {
    let freq = frequency(cfg)?;
    let potential = match cfg.potential {
        PotentialKind::Free => AnalyticTorusFunction::constant(0.0, cfg.strip),
        PotentialKind::AlmostMathieu => AnalyticTorusFunction::cosine(2.0 * cfg.lambda, cfg.strip),
        PotentialKind::Fourier => {
            let modes: Vec<(i64, Complex64)> =
                cfg.fourier.iter().map(|c| (c[0] as i64, Complex64::new(c[1], c[2]))).collect();
            AnalyticTorusFunction::from_modes(&modes, cfg.strip).map_err(|e| Failure::Config(format!("fourier: {e}")))?
        }
    };
    CocycleFamily::with_frequency(&freq, potential).map_err(|e| Failure::Config(format!("potential: {e}")))
}

fn expansion(cfg: &RunConfig) -> Result<ContinuedFraction, Failure> {
    ContinuedFraction::expand(&frequency(cfg)?, cfg.depth, u128::MAX).map_err(failed("numberfield"))
}

fn admissible(cfg: &RunConfig) -> Result<AdmissibleSubsequence, Failure> {
    construct_admissible(&expansion(cfg)?, cfg.admissibility).map_err(failed("numberfield"))
}

fn kam_config(cfg: &RunConfig) -> KamConfig {
    KamConfig {
        admissibility: cfg.admissibility,
        resonance: ResonanceParams { epsilon: cfg.epsilon, tau: cfg.tau, nu: cfg.nu },
        strip: Some(cfg.strip),
        ..KamConfig::default()
    }
}

fn kam_source(cfg: &RunConfig, fam: CocycleFamily) -> Result<KamSource, Failure> {
    Ok(KamSource::new(fam, admissible(cfg)?, kam_config(cfg), cfg.max_level))
}

/// The weight, plus the scan and level data when it is built from nonresonant intervals.
fn weight(cfg: &RunConfig) -> Result<(Box<dyn Weight>, Option<Artifact>), Failure> {
    let [lo, hi] = cfg.psi;
    let bad = |e: SpectralError| Failure::Config(format!("psi: {e}"));
    Ok(match cfg.weight {
        WeightKind::C2 => (Box::new(PolynomialBump::new(lo, hi).map_err(bad)?), None),
        WeightKind::Smooth => (Box::new(SmoothCutoff::new(lo, hi).map_err(bad)?), None),
        WeightKind::Indicator => (Box::new(Indicator::new(lo, hi).map_err(bad)?), None),
        WeightKind::Omega => {
            let src = kam_source(cfg, family(cfg)?)?;
            let reach = ReachOptions { count: cfg.omega_count, rotation_iterations: cfg.rotation_iterations, ..ReachOptions::default() };
            let scan = reach_scan(&src, (cfg.chi[0], cfg.chi[1]), &reach)
                .map_err(failed("spectral_transform"))?;
            let psi = build_psi(&scan.levels, cfg.tau0, cfg.tau1).map_err(failed("spectral_transform"))?;
            if psi.is_empty() || psi.levels.is_empty() {
                return Err(Failure::Compute {
                    module: "spectral_transform",
                    message: "weight is empty: no nonresonant interval survives every level".into(),
                    detail: format!("{:?}", scan.levels),
                });
            }
            let doc = json!({ "scan": scan, "psi": psi });
            (Box::new(psi), Some(json_artifact("psi.json", &doc)))
        }
    })
}

fn source(cfg: &RunConfig, fam: CocycleFamily) -> Result<Box<dyn BlochSource>, Failure> {
    if fam.is_free() {
        Ok(Box::new(FreeSource::new(fam.alpha)))
    } else {
        Ok(Box::new(kam_source(cfg, fam)?))
    }
}

fn moment_orders(cfg: &RunConfig) -> Vec<f64> {
    cfg.p.values()
}

fn times(cfg: &RunConfig) -> Result<Vec<f64>, Failure> {
    cfg.times().map_err(Failure::Config)
}

pub fn cf(cfg: &RunConfig) -> Outcome {
    let cf = expansion(cfg)?;
    let cols = ["k", "a_k", "p_k", "q_k"].map(String::from);
    let mut t = Table::new("cf", &cols);
    for k in 0..cf.depth {
        let a = if k == 0 { cf.p[0].to_string() } else { cf.partial_quotients[k - 1].to_string() };
        t.row(&[Cell::I(k as i128), Cell::S(a), Cell::S(cf.p[k].to_string()), Cell::S(cf.q[k].to_string())]);
    }
    Ok(vec![t.into_artifact("cf.csv")])
}

pub fn admissible_cmd(cfg: &RunConfig) -> Outcome {
    let seq = admissible(cfg)?;
    let mut t = Table::new("admissible", &["l", "index", "q", "qbar"].map(String::from));
    for (l, ((&n, &q), &qb)) in seq.indices.iter().zip(&seq.q).zip(&seq.qbar).enumerate() {
        t.row(&[Cell::I(l as i128), Cell::I(n as i128), Cell::F(q), Cell::F(qb)]);
    }
    let windows = scale_windows(&seq, cfg.tau0, cfg.tau1, cfg.nu);
    let doc = json!({ "alpha": frequency(cfg)?.decimal(), "subsequence": seq, "windows": windows });
    Ok(vec![t.into_artifact("admissible.csv"), json_artifact("admissible.json", &doc)])
}

pub fn scan(cfg: &RunConfig) -> Outcome {
    let fam = family(cfg)?;
    let n = cfg.e_count;
    let energies: Vec<f64> =
        (0..n).map(|i| cfg.e_min + (cfg.e_max - cfg.e_min) * i as f64 / (n - 1) as f64).collect();
    let sc = ScanConfig {
        rotation_iterations: cfg.rotation_iterations,
        lyapunov_iterations: cfg.lyapunov_iterations,
        theta0: cfg.theta,
        ..ScanConfig::default()
    };
    let s = spectral_scan(&fam, &energies, sc).map_err(failed("cocycle"))?;
    let mut t = Table::new("scan", &["E", "gamma", "gamma_spread", "rho", "ids", "gap"].map(String::from));
    for i in 0..s.energies.len() {
        t.row(&[
            Cell::F(s.energies[i]),
            Cell::F(s.gamma[i]),
            Cell::F(s.gamma_spread[i]),
            Cell::F(s.rho[i]),
            Cell::F(s.ids[i]),
            Cell::opt(s.gap_of(i)),
        ]);
    }
    Ok(vec![t.into_artifact("scan.csv"), json_artifact("gaps.json", &s.gaps)])
}

pub fn kam(cfg: &RunConfig) -> Outcome {
    let fam = family(cfg)?;
    let seq = admissible(cfg)?;
    let run = kam_iterate(&fam, cfg.energy, &seq, &kam_config(cfg), cfg.max_level).map_err(failed("kam"))?;
    let cols = ["level", "q", "xi_norm", "contraction", "residual", "det_error", "substeps", "phi_oscillation"];
    let mut t = Table::new("kam_levels", &cols.map(String::from));
    let mut prev: Option<f64> = None;
    for s in &run.states {
        t.row(&[
            Cell::I(s.level as i128),
            Cell::F(s.q),
            Cell::F(s.xi_norm),
            Cell::opt(prev.map(|p| p / s.xi_norm)),
            Cell::F(s.residual),
            Cell::F(s.det_error),
            Cell::I(s.substeps as i128),
            Cell::F(s.phi_oscillation),
        ]);
        prev = Some(s.xi_norm);
    }
    Ok(vec![json_artifact("kam.json", &KamDocument::from_run(&run)), t.into_artifact("kam_levels.csv")])
}

fn run_evolve(cfg: &RunConfig, ps: &[f64]) -> Result<(TransportReport, WavePacket), Failure> {
    let fam = family(cfg)?;
    let u0 = WavePacket::delta(0, 4, cfg.theta);
    let report = evolve(&fam, cfg.theta, &u0, &times(cfg)?, ps, &PropagateConfig::new(cfg.tol)).map_err(failed("evolve"))?;
    Ok((report, u0))
}

fn metadata(cfg: &RunConfig) -> Result<serde_json::Value, Failure> {
    let fam = family(cfg)?;
    let coeffs: Vec<[f64; 3]> = fam.potential.modes().map(|(k, c)| [k as f64, c.re, c.im]).collect();
    Ok(json!({
        "potential": cfg.potential,
        "fourier": coeffs,
        "strip": cfg.strip,
        "alpha": frequency(cfg)?.decimal(),
        "theta": cfg.theta,
        "tol": cfg.tol,
        "seed": cfg.seed,
    }))
}

pub fn evolve_cmd(cfg: &RunConfig) -> Outcome {
    let ps = moment_orders(cfg);
    let (report, _) = run_evolve(cfg, &ps)?;
    let mut cols = vec!["t".to_string()];
    cols.extend(ps.iter().map(|p| format!("moment_{p}")));
    cols.extend(ps.iter().map(|p| format!("local_slope_{p}")));
    cols.push("boundary_mass".into());
    let slopes: Vec<Vec<Option<f64>>> =
        ps.iter().map(|&p| report.local_slopes(p)).collect::<Result<_, _>>().map_err(failed("evolve"))?;
    let mut t = Table::new("evolve", &cols);
    for i in 0..report.times.len() {
        let mut row = vec![Cell::F(report.times[i])];
        row.extend(report.moments.iter().map(|m| Cell::F(m[i])));
        row.extend(slopes.iter().map(|s| Cell::opt(s[i])));
        row.push(Cell::F(report.boundary_mass[i]));
        t.row(&row);
    }
    let mut meta = metadata(cfg)?;
    meta["p"] = json!(ps);
    Ok(vec![t.into_artifact("evolve.csv"), json_artifact("evolve.json", &meta)])
}

struct Correlations {
    table: CorrelationTable,
    src: Box<dyn BlochSource>,
    weight: Box<dyn Weight>,
    chi: SmoothCutoff,
    psi_doc: Option<Artifact>,
    quad: QuadratureOptions,
}

fn quadrature(cfg: &RunConfig, free: bool) -> QuadratureOptions {
    let (tol, nodes) = if free { (1e-6, 1 << 17) } else { (1e-4, 1 << 13) };
    QuadratureOptions {
        rel_tol: cfg.quad_rel_tol.unwrap_or(tol),
        max_nodes: cfg.quad_max_nodes.unwrap_or(nodes),
        ..QuadratureOptions::default()
    }
}

fn run_correlations(cfg: &RunConfig) -> Result<Correlations, Failure> {
    let fam = family(cfg)?;
    let chi = build_cutoff(cfg.chi[0], cfg.chi[1]).map_err(|e| Failure::Config(format!("chi: {e}")))?;
    let (weight, psi_doc) = weight(cfg)?;
    let windows = scale_windows(&admissible(cfg)?, cfg.tau0, cfg.tau1, cfg.nu);
    let free = fam.is_free();
    let src = source(cfg, fam)?;
    let ks: Vec<i64> = (1..=cfg.k_max).collect();
    let opts = CorrelationOptions { n_cap: cfg.n_cap, quad: quadrature(cfg, free) };
    let table =
        correlation_table(src.as_ref(), &chi, weight.as_ref(), cfg.theta, &ks, &opts, &windows).map_err(failed("spectral_transform"))?;
    Ok(Correlations { table, src, weight, chi, psi_doc, quad: opts.quad })
}

pub fn correlations(cfg: &RunConfig) -> Outcome {
    let mut c = run_correlations(cfg)?;
    let mut t = Table::new("correlations", &["k", "a_k", "window_tag", "quad_nodes"].map(String::from));
    for r in &c.table.rows {
        t.row(&[Cell::I(r.k as i128), Cell::F(r.a_k), Cell::opt(r.window_tag), Cell::I(r.quad_nodes as i128)]);
    }
    let summary = json!({
        "theta": c.table.theta,
        "n_cap": c.table.n_cap,
        "uniform_cap": c.table.uniform_cap,
        "weight": cfg.weight,
        "psi": cfg.psi,
        "chi": cfg.chi,
        "decay_slope": c.table.decay_slope(8.min(cfg.k_max), cfg.k_max),
        "max_quad_error": c.table.rows.iter().map(|r| r.quad_error).fold(0.0, f64::max),
    });
    let mut out = vec![t.into_artifact("correlations.csv"), json_artifact("correlations.json", &summary)];
    out.extend(c.psi_doc.take());
    Ok(out)
}

pub fn report(cfg: &RunConfig) -> Outcome {
    let (ev, u0) = run_evolve(cfg, &[2.0])?;
    let mut c = run_correlations(cfg)?;
    let u0_moment = moment(&u0, 2.0).map_err(failed("evolve"))?;
    let g = transform_norm(c.src.as_ref(), &c.chi, c.weight.as_ref(), cfg.theta, &[(0, Complex64::new(1.0, 0.0))], &c.quad)
        .map_err(failed("spectral_transform"))?;
    let cols = ["t", "moment_2", "floor", "c8", "tail_sum", "k_lo", "k_cap", "cap_limited"];
    let mut t = Table::new("report", &cols.map(String::from));
    for (i, &time) in ev.times.iter().enumerate() {
        let lb = lower_bound_estimate(&c.table, u0_moment, g, time, cfg.eta).map_err(failed("spectral_transform"))?;
        t.row(&[
            Cell::F(time),
            Cell::F(ev.moments[0][i]),
            Cell::F(lb.floor),
            Cell::F(lb.c8),
            Cell::F(lb.tail_sum),
            Cell::I(lb.k_lo as i128),
            Cell::I(lb.k_cap as i128),
            Cell::S(lb.cap_limited.to_string()),
        ]);
    }
    let mut meta = metadata(cfg)?;
    meta["g_norm"] = json!(g);
    meta["u0_moment"] = json!(u0_moment);
    meta["eta"] = json!(cfg.eta);
    meta["k_max"] = json!(cfg.k_max);
    let mut out = vec![t.into_artifact("report.csv"), json_artifact("report.json", &meta)];
    out.extend(c.psi_doc.take());
    Ok(out)
}
