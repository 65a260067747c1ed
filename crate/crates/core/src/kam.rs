//! KAM reducibility: algebraic conjugation, strip conjugation, derivative transport and
//! the inductive loop over an admissible sequence of denominators.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::cocycle::{free_rotation, CocycleFamily, Mat2};
use crate::grid;
use crate::numberfield::AdmissibleSubsequence;

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum KamError {
    #[error("resonant angle: |(R_2θ - id)^-1| = {inverse_norm:.3e} exceeds {threshold:.3e}")]
    ResonantAngle { inverse_norm: f64, threshold: f64 },
    #[error("algebraic conjugation stalled at |v| = {norm:.3e} after {iterations} iterations")]
    NoConvergence { norm: f64, iterations: usize },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("inner step {step}: |xi| went from {before:.3e} to {after:.3e}")]
    InnerDivergence { step: usize, before: f64, after: f64 },
    #[error("rotation part degenerate: det = {det:.3e}")]
    DegenerateRotationPart { det: f64 },
    #[error("runs ended at different levels ({0} vs {1})")]
    BranchMismatch(usize, usize),
    #[error("unsupported document version {0}")]
    BadVersion(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceParams {
    pub epsilon: f64,
    pub tau: f64,
    pub nu: f64,
}

impl Default for ResonanceParams {
    fn default() -> Self {
        Self { epsilon: 0.1, tau: 2.0, nu: 0.4 }
    }
}

fn torus_dist(x: f64) -> f64 {
    (x - x.round()).abs()
}

/// `‖2 q_n ρ‖ > ε max(q_n^{−τ}, q_{n+1}^{−ν})` with `ρ` in turns.
pub fn is_nonresonant(rho: f64, qn: f64, qn1: f64, p: &ResonanceParams) -> bool {
    if p.epsilon == 0.0 {
        return true;
    }
    torus_dist(2.0 * qn * rho) > p.epsilon * qn.powf(-p.tau).max(qn1.powf(-p.nu))
}

/// `min_{1≤|l|≤l_max} l²‖k − lα‖` for the density of states `k = ρ/π`, a margin from the gap labels.
pub fn label_margin(k: f64, alpha: f64, l_max: i64) -> f64 {
    (1..=l_max)
        .flat_map(|l| [l, -l])
        .map(|l| (l * l) as f64 * torus_dist(k - l as f64 * alpha))
        .fold(f64::INFINITY, f64::min)
}

/// `Q(P) = (P + JPJ)/2`.
pub fn q_operator(p: &Mat2) -> Mat2 {
    let j = Mat2::J;
    (*p + j * *p * j).scale(0.5)
}

/// `exp(v)` for traceless `v`, from `v² = κ·id`.
pub fn sl2_exp(v: &Mat2) -> Mat2 {
    let kappa = v.a * v.a + v.b * v.c;
    let (c, s) = if kappa.abs() < 1e-8 {
        (1.0 + kappa / 2.0 + kappa * kappa / 24.0, 1.0 + kappa / 6.0 + kappa * kappa / 120.0)
    } else if kappa > 0.0 {
        let r = kappa.sqrt();
        (r.cosh(), r.sinh() / r)
    } else {
        let r = (-kappa).sqrt();
        (r.cos(), r.sin() / r)
    };
    Mat2::IDENTITY.scale(c) + v.scale(s)
}

/// Traceless `v` with `exp(v) = m` for `m ∈ SL(2,ℝ)` near the identity.
pub fn sl2_log(m: &Mat2) -> Mat2 {
    let m = m.scale(1.0 / m.det().abs().sqrt());
    let half = m.trace() / 2.0;
    let factor = if (half - 1.0).abs() < 1e-10 {
        let d = 2.0 * (half - 1.0);
        1.0 - d / 6.0
    } else if half > 1.0 {
        let r = half.acosh();
        r / r.sinh()
    } else {
        let r = half.clamp(-1.0, 1.0).acos();
        r / r.sin()
    };
    (m - Mat2::IDENTITY.scale(half)).scale(factor)
}

/// `‖(R_{2θ} − id)^{−1}‖ = 1/(2|sin θ|)`.
pub fn resonance_inverse_norm(theta: f64) -> f64 {
    1.0 / (2.0 * theta.sin().abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgebraicOptions {
    pub tol: f64,
    pub resonance_threshold: f64,
    pub max_iterations: usize,
}

impl AlgebraicOptions {
    /// Threshold `ε^{−1/(r+4)}` for the smallness `ε` of `R_{−θ}A − id`.
    pub fn from_smallness(epsilon: f64, r: u32, tol: f64) -> Self {
        Self { tol, resonance_threshold: epsilon.powf(-1.0 / (r as f64 + 4.0)), max_iterations: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgebraicResult {
    pub b: Mat2,
    pub theta: f64,
    pub iterations: usize,
    pub v_norms: Vec<f64>,
    pub residual: f64,
}

fn split_sl2(v: &Mat2) -> (f64, f64, f64) {
    (v.a, (v.b + v.c) / 2.0, (v.c - v.b) / 2.0)
}

/// Finds `B` near the identity and `θ'` with `B A B^{−1} = R_{θ'}`, by the iteration
/// `A = e^v R_θ`, `v = [[x, y − z], [y + z, −x]]`, `w` solving the symmetric part, `θ ← θ + z`.
pub fn algebraic_conjugation(a: &Mat2, theta: f64, opts: &AlgebraicOptions) -> Result<AlgebraicResult, KamError> {
    let mut cur = *a;
    let mut th = theta;
    let mut b = Mat2::IDENTITY;
    let mut norms = Vec::new();
    let mut stalls = 0;
    for it in 0..=opts.max_iterations {
        let v = sl2_log(&(cur * Mat2::rotation(-th)));
        let nv = v.norm();
        if let Some(&prev) = norms.last() {
            if nv > prev / 2.0 {
                stalls += 1;
            } else {
                stalls = 0;
            }
        }
        norms.push(nv);
        if nv < opts.tol {
            let residual = (b * *a * b.inverse() - Mat2::rotation(th)).norm();
            return Ok(AlgebraicResult { b, theta: th, iterations: it, v_norms: norms, residual });
        }
        if stalls >= 3 || it == opts.max_iterations {
            return Err(KamError::NoConvergence { norm: nv, iterations: it });
        }
        let inv = resonance_inverse_norm(th);
        if !(inv <= opts.resonance_threshold) {
            return Err(KamError::ResonantAngle { inverse_norm: inv, threshold: opts.resonance_threshold });
        }
        let (x, y, z) = split_sl2(&v);
        let (s, c) = (2.0 * th).sin_cos();
        // (R_2θ − id)^{-1} applied to (x, y)
        let (m11, m12, m21, m22) = (c - 1.0, -s, s, c - 1.0);
        let det = m11 * m22 - m12 * m21;
        let xt = (m22 * x - m12 * y) / det;
        let yt = (-m21 * x + m11 * y) / det;
        let w = Mat2::new(-xt, -yt, -yt, xt);
        let ew = sl2_exp(&w);
        let ew_inv = sl2_exp(&w.scale(-1.0));
        cur = ew_inv * cur * ew;
        b = ew_inv * b;
        th += z;
    }
    unreachable!()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KamConfig {
    pub kappa: f64,
    /// Bound on `|φ̄ − φ̄̂(0)|`.
    pub d_bound: f64,
    pub r: u32,
    pub admissibility: f64,
    pub resonance: ResonanceParams,
    /// Levels start at the first `Q ≥ t0`.
    pub t0: f64,
    /// Strip radius `h`; `None` takes the potential's.
    pub strip: Option<f64>,
    /// `C₁` in the inner step count `N = δhϱ^{2r+1}/(C₁|ᾱ|)`.
    pub c1: f64,
    pub max_substeps: usize,
    /// Stand-in for `ε₀`: the largest accepted `|ξ̄|`.
    pub eps0: f64,
    /// Stand-in for the bound on `ϱ^{−1}`.
    pub rho_inv_max: f64,
    /// Required per-sub-step contraction of `|ξ|`.
    pub substep_contraction: f64,
    /// Required per-level contraction of `|ξ_l|` while it is above ten times `noise_floor`.
    pub level_contraction: f64,
    /// Ends a level's inner loop once `|ξ|` is this many times below `|ξ_l|`.
    pub level_target: Option<f64>,
    pub grid_min: usize,
    pub grid_factor: usize,
    pub noise_floor: f64,
    pub de: f64,
}

impl Default for KamConfig {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            d_bound: 2.0,
            r: 3,
            admissibility: 1.1,
            resonance: ResonanceParams::default(),
            t0: 20.0,
            strip: None,
            c1: 1e-5,
            max_substeps: 8,
            eps0: 0.1,
            rho_inv_max: 1e3,
            substep_contraction: 2.0,
            level_contraction: 10.0,
            level_target: Some(100.0),
            grid_min: 256,
            grid_factor: 8,
            noise_floor: 1e-13,
            de: 1e-6,
        }
    }
}

impl KamConfig {
    pub fn kappa_l(&self, l: usize) -> f64 {
        self.kappa / (l * l) as f64
    }

    /// `h_l = h ∏_{i≤l} (1 − κ_i)²`.
    pub fn strip_at(&self, h: f64, l: usize) -> f64 {
        (1..=l).fold(h, |acc, i| acc * (1.0 - self.kappa_l(i)).powi(2))
    }

    /// `U_k = exp(−Q̄ Q^{−b} − Q̄^a)`, `a = 2/M`, `b = 1/a`.
    pub fn u_bound(&self, q: f64, qbar: f64) -> f64 {
        let p = &self.resonance;
        let m = (4.0 * (p.tau + 1.0)).max(4.0 / (1.0 - 2.0 * p.nu));
        let a = 2.0 / m;
        (-(qbar * q.powf(-1.0 / a)) - qbar.powf(a)).exp()
    }

    pub fn grid_size(&self, q: f64) -> usize {
        let want = (self.grid_factor as f64 * q).max(self.grid_min as f64) as usize;
        want.next_power_of_two()
    }
}

/// Relative size below which Fourier coefficients are rounding noise.
pub const ROUNDING_FLOOR: f64 = 1e-15;

/// Matrix-valued function on the uniform grid.
pub type MatGrid = Vec<Mat2>;

fn unzip(m: &[Mat2]) -> [Vec<f64>; 4] {
    [
        m.iter().map(|x| x.a).collect(),
        m.iter().map(|x| x.b).collect(),
        m.iter().map(|x| x.c).collect(),
        m.iter().map(|x| x.d).collect(),
    ]
}

fn zip4(e: [Vec<f64>; 4]) -> MatGrid {
    (0..e[0].len()).map(|j| Mat2::new(e[0][j], e[1][j], e[2][j], e[3][j])).collect()
}

pub fn shift_mats(m: &[Mat2], s: f64) -> MatGrid {
    zip4(unzip(m).map(|e| grid::shift(&e, s)))
}

/// Entrywise [`grid::denoise`], then rescaled to unit determinant.
pub fn denoise_mats(m: &[Mat2], floor: f64) -> MatGrid {
    zip4(unzip(m).map(|e| grid::denoise(&e, floor)))
        .into_iter()
        .map(|x| x.scale(1.0 / x.det().abs().sqrt()))
        .collect()
}

pub fn resample_mats(m: &[Mat2], size: usize) -> MatGrid {
    zip4(unzip(m).map(|e| grid::resample(&e, size)))
}

/// Largest operator norm over the grid.
pub fn grid_norm(m: &[Mat2]) -> f64 {
    m.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

fn signed_frac(x: f64) -> f64 {
    x - x.round()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripStep {
    pub b: MatGrid,
    pub phi: Vec<f64>,
    pub a_tilde: MatGrid,
    /// `|ξ_(i)|` on the grid for `i = 0..=N`.
    pub xi_history: Vec<f64>,
    pub substeps: usize,
    pub planned_substeps: usize,
    pub rho_inv: f64,
    pub residual: f64,
    /// `ε₀ exp(−δhϱ^{2r+1}/‖ᾱ‖)` with unit constants, for comparison with `residual`.
    pub bound_shape: f64,
}

/// Inner loop of fiberwise algebraic conjugations for `Ā` over the rotation by `ᾱ`.
/// The loop also ends once `|ξ_(i)| ≤ stop_below`.
pub fn strip_conjugation_step(
    a_bar: &[Mat2],
    alpha_bar: f64,
    phi_bar: &[f64],
    delta: f64,
    h: f64,
    stop_below: f64,
    cfg: &KamConfig,
) -> Result<StripStep, KamError> {
    let m = a_bar.len();
    if phi_bar.len() != m || m == 0 {
        return Err(KamError::PreconditionViolated("grid sizes differ".into()));
    }
    let mean = grid::mean(phi_bar);
    let osc = phi_bar.iter().map(|p| (p - mean).abs()).fold(0.0, f64::max);
    if osc > cfg.d_bound {
        return Err(KamError::PreconditionViolated(format!("|phi - mean| = {osc:.3e} exceeds D = {}", cfg.d_bound)));
    }
    let rho_inv = phi_bar.iter().map(|&p| resonance_inverse_norm(p)).fold(4.0, f64::max);
    if !(rho_inv <= cfg.rho_inv_max) {
        return Err(KamError::PreconditionViolated(format!("rho^-1 = {rho_inv:.3e} exceeds {:.3e}", cfg.rho_inv_max)));
    }
    let xi0: MatGrid = a_bar.iter().zip(phi_bar).map(|(a, &p)| Mat2::rotation(-p) * *a - Mat2::IDENTITY).collect();
    let eps = grid_norm(&xi0);
    if !(eps < cfg.eps0) {
        return Err(KamError::PreconditionViolated(format!("|xi| = {eps:.3e} is not below eps0 = {}", cfg.eps0)));
    }
    let varrho = 1.0 / rho_inv;
    let planned = (delta * h * varrho.powi(2 * cfg.r as i32 + 1) / (cfg.c1 * alpha_bar.abs().max(1e-300))).ceil();
    let planned = (planned.max(1.0) as usize).min(cfg.max_substeps);
    let opts = AlgebraicOptions {
        tol: cfg.noise_floor * rho_inv.max(1.0),
        resonance_threshold: 2.0 * rho_inv,
        max_iterations: 60,
    };
    let mut a_cur = a_bar.to_vec();
    let mut phi = phi_bar.to_vec();
    let mut b_total = vec![Mat2::IDENTITY; m];
    let mut history = vec![eps];
    let mut done = 0;
    let floor = cfg.noise_floor.max(stop_below);
    while done < planned && *history.last().unwrap() > floor {
        let mut b_i = Vec::with_capacity(m);
        let mut phi_next = Vec::with_capacity(m);
        for (a, &p) in a_cur.iter().zip(&phi) {
            let r = algebraic_conjugation(a, p, &opts)?;
            b_i.push(r.b);
            phi_next.push(r.theta);
        }
        // rounding noise in the coefficients is amplified by every sub-step
        let b_i = denoise_mats(&b_i, ROUNDING_FLOOR);
        let b_shift = shift_mats(&b_i, alpha_bar);
        a_cur = (0..m).map(|j| b_shift[j] * a_cur[j] * b_i[j].inverse()).collect();
        let xi = grid_norm(
            &a_cur.iter().zip(&phi_next).map(|(a, &p)| Mat2::rotation(-p) * *a - Mat2::IDENTITY).collect::<Vec<_>>(),
        );
        let before = *history.last().unwrap();
        if xi > before / cfg.substep_contraction && before > 100.0 * cfg.noise_floor {
            return Err(KamError::InnerDivergence { step: done + 1, before, after: xi });
        }
        history.push(xi);
        for j in 0..m {
            b_total[j] = b_i[j] * b_total[j];
        }
        phi = phi_next;
        done += 1;
    }
    let residual = *history.last().unwrap();
    let bound_shape = eps * (-delta * h * varrho.powi(2 * cfg.r as i32 + 1) / alpha_bar.abs().max(1e-300)).exp();
    Ok(StripStep {
        b: b_total,
        phi,
        a_tilde: a_cur,
        xi_history: history,
        substeps: done,
        planned_substeps: planned,
        rho_inv,
        residual,
        bound_shape,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transported {
    pub zeta: Vec<f64>,
    pub xi: MatGrid,
    pub g_tilde: MatGrid,
    pub xi_norm: f64,
    pub zeta_change: f64,
}

/// Nearest representative of `x` modulo `2π` to `reference`.
fn unwrap_to(x: f64, reference: f64) -> f64 {
    x + 2.0 * PI * ((reference - x) / (2.0 * PI)).round()
}

/// `G̃(θ) = B(θ+α) G(θ) B(θ)^{−1}` split as `R_ζ̃ (id + ξ̃)` through `Q`.
pub fn transport_conjugation(g: &[Mat2], b: &[Mat2], alpha: f64, zeta: &[f64]) -> Result<Transported, KamError> {
    let b_shift = shift_mats(b, alpha);
    let g_tilde: MatGrid = (0..g.len()).map(|j| b_shift[j] * g[j] * b[j].inverse()).collect();
    let mut new_zeta = Vec::with_capacity(g.len());
    let mut xi = Vec::with_capacity(g.len());
    for (j, gt) in g_tilde.iter().enumerate() {
        let rot = *gt - q_operator(gt);
        let det = rot.det();
        if !(det > 0.5 && det < 2.0) {
            return Err(KamError::DegenerateRotationPart { det });
        }
        let z = unwrap_to((rot.c - rot.b).atan2(rot.a + rot.d), zeta[j]);
        xi.push(Mat2::rotation(-z) * *gt - Mat2::IDENTITY);
        new_zeta.push(z);
    }
    let zeta_change = new_zeta.iter().zip(zeta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Transported { xi_norm: grid_norm(&xi), zeta: new_zeta, xi, g_tilde, zeta_change })
}

/// `Z = (sin ξ0)^{−1/2} [[cos ξ0, −sin ξ0], [1, 0]]`, so that `Z^{−1} A_free Z = R_{ξ0}`.
pub fn free_frame(e: f64) -> Result<Mat2, KamError> {
    if !(e.abs() < 2.0) {
        return Err(KamError::PreconditionViolated(format!("E = {e} outside (-2, 2) has no rotation frame")));
    }
    let xi = free_rotation(e);
    let (s, c) = xi.sin_cos();
    Ok(Mat2::new(c, -s, 1.0, 0.0).scale(1.0 / s.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugationState {
    pub level: usize,
    /// `Q_l`; zero at level 0.
    pub q: f64,
    pub strip: f64,
    /// Conjugation in the free frame; the full conjugator is `frame · w`.
    pub w: MatGrid,
    pub phi: Vec<f64>,
    pub xi: MatGrid,
    pub phi_mean: f64,
    pub phi_oscillation: f64,
    pub xi_norm: f64,
    pub u_bound: f64,
    pub residual: f64,
    pub det_error: f64,
    pub substeps: usize,
    pub strip_residual: f64,
}

impl ConjugationState {
    pub fn grid_size(&self) -> usize {
        self.phi.len()
    }

    pub fn rho_turns(&self) -> f64 {
        self.phi_mean / (2.0 * PI)
    }

    /// `φ^{[n]}` on the grid.
    pub fn phase_sum(&self, n: u64, alpha: f64) -> Vec<f64> {
        grid::birkhoff(&self.phi, n, alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KamTermination {
    MaxLevel,
    ResonanceHit { level: usize, distance: f64, threshold: f64 },
    ContractFail { level: usize, ratio: f64 },
    StepFailed { level: usize, error: KamError },
    /// The admissible sequence has no further `Q ≥ T0`.
    SequenceExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamRun {
    pub energy: f64,
    pub alpha: f64,
    pub frame: Mat2,
    pub strip: f64,
    pub states: Vec<ConjugationState>,
    pub termination: KamTermination,
}

impl KamRun {
    pub fn last(&self) -> &ConjugationState {
        self.states.last().expect("level 0 is always present")
    }

    /// Number of levels beyond level 0.
    pub fn levels(&self) -> usize {
        self.states.len() - 1
    }
}

/// `Z^{−1} A_E(θ) Z` on the grid.
fn frame_cocycle(fam: &CocycleFamily, e: f64, frame: &Mat2, m: usize) -> MatGrid {
    let zi = frame.inverse();
    grid::grid_points(m)
        .iter()
        .map(|&t| zi * Mat2::new(fam.potential_at(t) - e, -1.0, 1.0, 0.0) * *frame)
        .collect()
}

/// `Z^{−1} A_E^{(n)}(θ) Z` on the grid.
fn frame_product(fam: &CocycleFamily, e: f64, frame: &Mat2, m: usize, n: u64) -> MatGrid {
    let zi = frame.inverse();
    grid::grid_points(m)
        .iter()
        .map(|&t| {
            let mut p = Mat2::IDENTITY;
            for k in 0..n {
                let th = (t + k as f64 * fam.alpha).rem_euclid(1.0);
                p = Mat2::new(fam.potential_at(th) - e, -1.0, 1.0, 0.0) * p;
            }
            zi * p * *frame
        })
        .collect()
}

/// `max_θ ‖W(θ+α) R_φ (id+ξ) W(θ)^{−1} − A(θ)‖/(1 + ‖A‖)` in the frame.
fn conjugation_residual(a: &[Mat2], w: &[Mat2], phi: &[f64], xi: &[Mat2], alpha: f64) -> f64 {
    let ws = shift_mats(w, alpha);
    (0..a.len())
        .map(|j| {
            let rebuilt = ws[j] * Mat2::rotation(phi[j]) * (Mat2::IDENTITY + xi[j]) * w[j].inverse();
            (rebuilt - a[j]).norm() / (1.0 + a[j].norm())
        })
        .fold(0.0, f64::max)
}

fn make_state(
    level: usize,
    q: f64,
    strip: f64,
    w: MatGrid,
    phi: Vec<f64>,
    xi: MatGrid,
    a: &[Mat2],
    alpha: f64,
    u_bound: f64,
    substeps: usize,
    strip_residual: f64,
) -> ConjugationState {
    let phi_mean = grid::mean(&phi);
    let phi_oscillation = phi.iter().map(|p| (p - phi_mean).abs()).fold(0.0, f64::max);
    let residual = conjugation_residual(a, &w, &phi, &xi, alpha);
    let det_error = w.iter().map(|x| (x.det() - 1.0).abs()).fold(0.0, f64::max);
    let xi_norm = grid_norm(&xi);
    ConjugationState {
        level,
        q,
        strip,
        w,
        phi,
        xi,
        phi_mean,
        phi_oscillation,
        xi_norm,
        u_bound,
        residual,
        det_error,
        substeps,
        strip_residual,
    }
}

/// Inductive reducibility loop for a near-constant cocycle at a single energy.
pub fn kam_iterate(
    fam: &CocycleFamily,
    e: f64,
    qseq: &AdmissibleSubsequence,
    cfg: &KamConfig,
    max_level: usize,
) -> Result<KamRun, KamError> {
    let frame = free_frame(e)?;
    let h = cfg.strip.unwrap_or(fam.potential.strip_radius());
    let alpha = fam.alpha;
    let levels: Vec<(f64, f64)> = qseq
        .q
        .iter()
        .zip(&qseq.qbar)
        .filter(|(q, _)| **q >= cfg.t0)
        .map(|(&q, &qb)| (q, qb))
        .collect();
    let m0 = cfg.grid_size(levels.first().map_or(1.0, |l| l.0));
    let a0 = frame_cocycle(fam, e, &frame, m0);
    let xi0_rot = free_rotation(e);
    let phi0 = vec![xi0_rot; m0];
    let xi0: MatGrid = a0.iter().map(|a| Mat2::rotation(-xi0_rot) * *a - Mat2::IDENTITY).collect();
    let xi0_norm = grid_norm(&xi0);
    if !(xi0_norm < cfg.eps0) {
        return Err(KamError::PreconditionViolated(format!(
            "|A - R| = {xi0_norm:.3e} in the free frame is not below eps0 = {}",
            cfg.eps0
        )));
    }
    let mut states = vec![make_state(0, 0.0, h, vec![Mat2::IDENTITY; m0], phi0, xi0, &a0, alpha, 1.0, 0, 0.0)];
    let mut termination = KamTermination::MaxLevel;
    for l in 0..max_level {
        let Some(&(q, qbar)) = levels.get(l) else {
            termination = KamTermination::SequenceExhausted;
            break;
        };
        let prev = states.last().unwrap();
        let rho = prev.rho_turns();
        if !is_nonresonant(rho, q, qbar, &cfg.resonance) {
            let p = &cfg.resonance;
            termination = KamTermination::ResonanceHit {
                level: l + 1,
                distance: torus_dist(2.0 * q * rho),
                threshold: p.epsilon * q.powf(-p.tau).max(qbar.powf(-p.nu)),
            };
            break;
        }
        let m = cfg.grid_size(q).max(prev.grid_size());
        let w = resample_mats(&prev.w, m);
        let phi_l = grid::resample(&prev.phi, m);
        let xi_l = resample_mats(&prev.xi, m);
        let a1 = frame_cocycle(fam, e, &frame, m);
        let qn = q as u64;
        let aq = frame_product(fam, e, &frame, m, qn);
        let alpha_bar = signed_frac(q * alpha);
        let w_shift = shift_mats(&w, alpha_bar);
        let a_bar: MatGrid = (0..m).map(|j| w_shift[j].inverse() * aq[j] * w[j]).collect();
        let phi_bar = grid::birkhoff(&phi_l, qn, alpha);
        let kappa = cfg.kappa_l(l + 1);
        let h_l = cfg.strip_at(h, l);
        let delta = -(1.0 - kappa).ln();
        let g: MatGrid = (0..m).map(|j| Mat2::rotation(phi_l[j]) * (Mat2::IDENTITY + xi_l[j])).collect();
        let target = cfg.level_target.map_or(0.0, |t| prev.xi_norm / t);
        let mut stop_below = target;
        let mut best: Option<(StripStep, Transported)> = None;
        let outcome = loop {
            let attempt = strip_conjugation_step(&a_bar, alpha_bar, &phi_bar, delta, h_l * (1.0 - kappa), stop_below, cfg)
                .and_then(|step| transport_conjugation(&g, &step.b, alpha, &phi_l).map(|tr| (step, tr)));
            let (step, tr) = match (attempt, best.take()) {
                (Ok(x), _) => x,
                (Err(_), Some(b)) => break Ok(b),
                (Err(error), None) => break Err(error),
            };
            // the strip residual understates the transported one, so tighten until the target holds
            let finished = tr.xi_norm <= target || stop_below <= cfg.noise_floor || step.substeps >= step.planned_substeps;
            best = Some((step, tr));
            if finished {
                break Ok(best.unwrap());
            }
            stop_below /= 100.0;
        };
        let (step, tr) = match outcome {
            Ok(x) => x,
            Err(error) => {
                termination = KamTermination::StepFailed { level: l + 1, error };
                break;
            }
        };
        let w_next: MatGrid = (0..m).map(|j| w[j] * step.b[j].inverse()).collect();
        let prev_norm = prev.xi_norm;
        let state = make_state(
            l + 1,
            q,
            cfg.strip_at(h, l + 1),
            w_next,
            tr.zeta,
            tr.xi,
            &a1,
            alpha,
            cfg.u_bound(q, qbar),
            step.substeps,
            step.residual,
        );
        let ratio = state.xi_norm / prev_norm;
        let failed = !(state.xi_norm * cfg.level_contraction < prev_norm) && state.xi_norm > 10.0 * cfg.noise_floor;
        states.push(state);
        if failed {
            termination = KamTermination::ContractFail { level: l + 1, ratio };
            break;
        }
    }
    Ok(KamRun { energy: e, alpha, frame, strip: h, states, termination })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrowthRow {
    pub n: u64,
    pub min_ratio: f64,
    pub mean_ratio: f64,
    pub sublinear: bool,
}

/// Central-difference `∂_E φ_l^{[n]}/n` from runs at `E − dE` and `E + dE`, at the deepest common level.
pub fn phase_derivative_growth(minus: &KamRun, plus: &KamRun, n_list: &[u64], de: f64) -> Result<Vec<PhaseGrowthRow>, KamError> {
    if minus.states.len() != plus.states.len() {
        return Err(KamError::BranchMismatch(minus.levels(), plus.levels()));
    }
    let (sm, sp) = (minus.last(), plus.last());
    let m = sm.grid_size().max(sp.grid_size());
    let (pm, pp) = (grid::resample(&sm.phi, m), grid::resample(&sp.phi, m));
    let alpha = minus.alpha;
    Ok(n_list
        .iter()
        .map(|&n| {
            if n == 0 {
                return PhaseGrowthRow { n, min_ratio: 0.0, mean_ratio: 0.0, sublinear: false };
            }
            let a = grid::birkhoff(&pm, n, alpha);
            let b = grid::birkhoff(&pp, n, alpha);
            let ratios: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (y - x) / (2.0 * de) / n as f64).collect();
            let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean_ratio = grid::mean(&ratios);
            PhaseGrowthRow { n, min_ratio, mean_ratio, sublinear: !(min_ratio > 0.0) }
        })
        .collect())
}

/// Both runs for [`phase_derivative_growth`].
pub fn phase_derivative_at(
    fam: &CocycleFamily,
    e: f64,
    qseq: &AdmissibleSubsequence,
    cfg: &KamConfig,
    max_level: usize,
    n_list: &[u64],
) -> Result<Vec<PhaseGrowthRow>, KamError> {
    let (minus, plus) = rayon::join(
        || kam_iterate(fam, e - cfg.de, qseq, cfg, max_level),
        || kam_iterate(fam, e + cfg.de, qseq, cfg, max_level),
    );
    phase_derivative_growth(&minus?, &plus?, n_list, cfg.de)
}

pub const KAM_DOCUMENT_VERSION: u32 = 1;

/// Fourier coefficients `(re, im)` in FFT bin order.
pub type Coefficients = Vec<[f64; 2]>;

fn to_coeffs(f: &[f64]) -> Coefficients {
    grid::coefficients(f).iter().map(|c| [c.re, c.im]).collect()
}

fn from_coeffs(c: &Coefficients) -> Vec<f64> {
    grid::from_coefficients(&c.iter().map(|x| Complex64::new(x[0], x[1])).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub level: usize,
    pub q: f64,
    pub strip: f64,
    pub phi: Coefficients,
    pub w: [Coefficients; 4],
    pub xi: [Coefficients; 4],
    pub xi_norm: f64,
    pub phi_oscillation: f64,
    pub residual: f64,
    pub substeps: usize,
    pub strip_residual: f64,
    pub u_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamDocument {
    pub version: u32,
    pub energy: f64,
    pub alpha: f64,
    pub frame: Mat2,
    pub strip: f64,
    pub termination: KamTermination,
    pub states: Vec<StateRecord>,
}

impl KamDocument {
    pub fn from_run(run: &KamRun) -> Self {
        let states = run
            .states
            .iter()
            .map(|s| StateRecord {
                level: s.level,
                q: s.q,
                strip: s.strip,
                phi: to_coeffs(&s.phi),
                w: unzip(&s.w).map(|e| to_coeffs(&e)),
                xi: unzip(&s.xi).map(|e| to_coeffs(&e)),
                xi_norm: s.xi_norm,
                phi_oscillation: s.phi_oscillation,
                residual: s.residual,
                substeps: s.substeps,
                strip_residual: s.strip_residual,
                u_bound: s.u_bound,
            })
            .collect();
        Self {
            version: KAM_DOCUMENT_VERSION,
            energy: run.energy,
            alpha: run.alpha,
            frame: run.frame,
            strip: run.strip,
            termination: run.termination.clone(),
            states,
        }
    }

    /// Rebuilds the run, recomputing residuals against `fam`.
    pub fn to_run(&self, fam: &CocycleFamily) -> Result<KamRun, KamError> {
        if self.version != KAM_DOCUMENT_VERSION {
            return Err(KamError::BadVersion(self.version));
        }
        let states = self
            .states
            .iter()
            .map(|r| {
                let w = zip4(r.w.clone().map(|c| from_coeffs(&c)));
                let xi = zip4(r.xi.clone().map(|c| from_coeffs(&c)));
                let phi = from_coeffs(&r.phi);
                let a = frame_cocycle(fam, self.energy, &self.frame, phi.len());
                make_state(r.level, r.q, r.strip, w, phi, xi, &a, self.alpha, r.u_bound, r.substeps, r.strip_residual)
            })
            .collect();
        Ok(KamRun {
            energy: self.energy,
            alpha: self.alpha,
            frame: self.frame,
            strip: self.strip,
            states,
            termination: self.termination.clone(),
        })
    }
}
