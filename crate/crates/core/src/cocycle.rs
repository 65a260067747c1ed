//! Schrödinger cocycle, Lyapunov exponent, rotation number, gaps and m-functions.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};
use thiserror::Error;

use crate::numberfield::Frequency;
use crate::torusfun::AnalyticTorusFunction;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CocycleError {
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("potential is not real on the real torus")]
    NotRealPotential,
    #[error("m-function did not converge by depth {depth} (last change {change:e})")]
    NotConverged { depth: usize, change: f64 },
    #[error("no gaps detected in the scan")]
    NoGapsDetected,
    #[error("k-grid increment {max_increment:.3e} exceeds the budget {budget:.3e}")]
    GridTooCoarse { max_increment: f64, budget: f64 },
}

/// Real 2×2 matrix `[[a, b], [c, d]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

pub type SL2 = Mat2;

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2 { a: 1.0, b: 0.0, c: 0.0, d: 1.0 };
    pub const ZERO: Mat2 = Mat2 { a: 0.0, b: 0.0, c: 0.0, d: 0.0 };
    /// `J = [[0, -1], [1, 0]]`
    pub const J: Mat2 = Mat2 { a: 0.0, b: -1.0, c: 1.0, d: 0.0 };

    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    /// `R_φ = [[cos φ, -sin φ], [sin φ, cos φ]]`
    pub fn rotation(phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self::new(c, -s, s, c)
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn trace(&self) -> f64 {
        self.a + self.d
    }

    /// Inverse via the adjugate.
    pub fn inverse(&self) -> Self {
        let det = self.det();
        Self::new(self.d / det, -self.b / det, -self.c / det, self.a / det)
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.a, self.c, self.b, self.d)
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.a * k, self.b * k, self.c * k, self.d * k)
    }

    pub fn frobenius(&self) -> f64 {
        (self.a * self.a + self.b * self.b + self.c * self.c + self.d * self.d).sqrt()
    }

    /// Largest singular value.
    pub fn norm(&self) -> f64 {
        let f2 = self.a * self.a + self.b * self.b + self.c * self.c + self.d * self.d;
        let det = self.det();
        let disc = (f2 * f2 - 4.0 * det * det).max(0.0).sqrt();
        ((f2 + disc) / 2.0).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs()).max(self.d.abs())
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [self.a * v[0] + self.b * v[1], self.c * v[0] + self.d * v[1]]
    }

    /// Rescales to unit determinant when the drift exceeds `1e-10` and is well above
    /// the rounding noise of `det` itself.
    pub fn renormalized(&self) -> Self {
        let det = self.det();
        let noise = 640.0 * f64::EPSILON * ((self.a * self.d).abs() + (self.b * self.c).abs());
        if det > 0.0 && (det - 1.0).abs() > noise.max(1e-10) {
            self.scale(1.0 / det.sqrt())
        } else {
            *self
        }
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, o: Mat2) -> Mat2 {
        Mat2::new(
            self.a * o.a + self.b * o.c,
            self.a * o.b + self.b * o.d,
            self.c * o.a + self.d * o.c,
            self.c * o.b + self.d * o.d,
        )
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, o: Mat2) -> Mat2 {
        Mat2::new(self.a + o.a, self.b + o.b, self.c + o.c, self.d + o.d)
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, o: Mat2) -> Mat2 {
        Mat2::new(self.a - o.a, self.b - o.b, self.c - o.c, self.d - o.d)
    }
}

/// The family `E ↦ A_E(θ) = [[V(θ) - E, -1], [1, 0]]` over the rotation by `alpha`.
#[derive(Debug, Clone)]
pub struct CocycleFamily {
    pub alpha: f64,
    pub frequency: Option<Frequency>,
    pub potential: AnalyticTorusFunction,
    pub window: (f64, f64),
    sup_potential: f64,
}

impl CocycleFamily {
    pub fn new(alpha: f64, potential: AnalyticTorusFunction, window: (f64, f64)) -> Result<Self, CocycleError> {
        if !potential.is_real(1e-12) {
            return Err(CocycleError::NotRealPotential);
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CocycleError::PreconditionViolated(format!("alpha {alpha} outside (0,1)")));
        }
        let sup_potential = potential.coefficient_bound(0.0);
        Ok(Self { alpha, frequency: None, potential, window, sup_potential })
    }

    pub fn with_frequency(freq: &Frequency, potential: AnalyticTorusFunction) -> Result<Self, CocycleError> {
        let sup = potential.coefficient_bound(0.0);
        let mut fam = Self::new(freq.value(), potential, (-2.0 - sup, 2.0 + sup))?;
        fam.frequency = Some(freq.clone());
        Ok(fam)
    }

    /// `V(θ) = 2λ cos(2πθ)`.
    pub fn almost_mathieu(lambda: f64, alpha: f64) -> Self {
        let v = AnalyticTorusFunction::cosine(2.0 * lambda, 1.0);
        let w = 2.0 + 2.0 * lambda.abs();
        Self::new(alpha, v, (-w, w)).expect("cosine potential is real")
    }

    pub fn free(alpha: f64) -> Self {
        Self::new(alpha, AnalyticTorusFunction::constant(0.0, 1.0), (-2.0, 2.0)).expect("zero potential is real")
    }

    pub fn potential_at(&self, theta: f64) -> f64 {
        self.potential.eval_real(theta)
    }

    /// Upper bound of `sup |V|` from the coefficients.
    pub fn sup_potential(&self) -> f64 {
        self.sup_potential
    }

    /// `0` below `−2 − sup|V|`, `π` above `2 + sup|V|`, where the spectrum cannot reach.
    pub fn rotation_outside_spectrum(&self, e: f64) -> Option<f64> {
        let edge = 2.0 + self.sup_potential;
        if e <= -edge {
            Some(0.0)
        } else if e >= edge {
            Some(PI)
        } else {
            None
        }
    }

    pub fn is_free(&self) -> bool {
        self.potential.coeffs().iter().all(|c| c.norm() == 0.0)
    }

    /// `V(θ + kα)` for `k = 0..n`.
    pub fn orbit(&self, theta: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| self.potential_at((theta + k as f64 * self.alpha).rem_euclid(1.0)))
            .collect()
    }
}

pub fn transfer_matrix(fam: &CocycleFamily, e: f64, theta: f64) -> SL2 {
    Mat2::new(fam.potential_at(theta) - e, -1.0, 1.0, 0.0)
}

/// `A^{(n)}(θ) = A(θ+(n-1)α)···A(θ)`; for `n < 0` the inverse of `A^{(-n)}(θ+nα)`.
pub fn iterate(fam: &CocycleFamily, e: f64, theta: f64, n: i64) -> SL2 {
    if n < 0 {
        return iterate(fam, e, theta + n as f64 * fam.alpha, -n).inverse();
    }
    let mut m = Mat2::IDENTITY;
    for k in 0..n {
        m = transfer_matrix(fam, e, (theta + k as f64 * fam.alpha).rem_euclid(1.0)) * m;
        if k % 64 == 63 {
            m = m.renormalized();
        }
    }
    m.renormalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub gamma: f64,
    pub spread: f64,
    pub samples: usize,
}

fn log_norm_product(values: &[f64], e: f64) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    let mut m = Mat2::IDENTITY;
    for (k, &v) in values.iter().enumerate() {
        m = Mat2::new(v - e, -1.0, 1.0, 0.0) * m;
        if k % 32 == 31 {
            let nrm = m.norm();
            m = m.scale(1.0 / nrm);
            let y = nrm.ln() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
    }
    sum + m.norm().ln()
}

/// Mean of `(1/n) ln ‖A^{(n)}(θ_j)‖` over `θ_j = (j + 1/2)/samples`.
pub fn lyapunov(fam: &CocycleFamily, e: f64, n: usize, theta_samples: usize) -> Result<LyapunovEstimate, CocycleError> {
    if n == 0 || theta_samples == 0 {
        return Err(CocycleError::PreconditionViolated("need n >= 1 and at least one sample".into()));
    }
    let values: Vec<f64> = (0..theta_samples)
        .into_par_iter()
        .map(|j| {
            let orbit = fam.orbit((j as f64 + 0.5) / theta_samples as f64, n);
            log_norm_product(&orbit, e) / n as f64
        })
        .collect();
    Ok(summarize(&values))
}

fn summarize(values: &[f64]) -> LyapunovEstimate {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / m;
    LyapunovEstimate { gamma: mean, spread: var.sqrt(), samples: values.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationEstimate {
    pub rho: f64,
    pub error_bound: f64,
}

/// Sturm-type angle lift over a precomputed orbit of potential values.
pub fn rotation_from_orbit(values: &[f64], e: f64) -> RotationEstimate {
    let half = PI / 2.0;
    let (mut x, mut y) = (1.0f64, 0.0f64);
    let mut t = 0.0f64;
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let nx = (v - e) * x - y;
        let ny = x;
        let r = nx.hypot(ny);
        let raw = ny.atan2(nx);
        let next = if x >= 0.0 {
            raw.clamp(0.0, PI)
        } else if raw <= 0.0 {
            raw + 2.0 * PI
        } else {
            raw.max(PI)
        };
        let step = next - t;
        let yk = step - comp;
        let tk = sum + yk;
        comp = (tk - sum) - yk;
        sum = tk;
        t = if next >= 3.0 * half { next - 2.0 * PI } else { next };
        x = nx / r;
        y = ny / r;
    }
    let n = values.len().max(1) as f64;
    RotationEstimate { rho: (sum / n).clamp(0.0, PI), error_bound: 2.0 * PI / n }
}

/// Fibered rotation number in `[0, π]`, nondecreasing in `E`.
pub fn rotation_number(fam: &CocycleFamily, e: f64, n: usize, theta0: f64) -> Result<RotationEstimate, CocycleError> {
    if n == 0 {
        return Err(CocycleError::PreconditionViolated("need n >= 1".into()));
    }
    if let Some(rho) = fam.rotation_outside_spectrum(e) {
        return Ok(RotationEstimate { rho, error_bound: 0.0 });
    }
    Ok(rotation_from_orbit(&fam.orbit(theta0, n), e))
}

/// Integrated density of states `k = ρ/π`.
pub fn ids(fam: &CocycleFamily, e: f64, n: usize, theta0: f64) -> Result<f64, CocycleError> {
    Ok((rotation_number(fam, e, n, theta0)?.rho / PI).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub rotation_iterations: usize,
    pub lyapunov_iterations: usize,
    pub theta_samples: usize,
    pub theta0: f64,
    /// Plateau threshold on `|Δρ|`; `None` means `10/n`.
    pub plateau_threshold: Option<f64>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            rotation_iterations: 100_000,
            lyapunov_iterations: 10_000,
            theta_samples: 4,
            theta0: 0.0,
            plateau_threshold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub first: usize,
    pub last: usize,
    pub e_lo: f64,
    pub e_hi: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralScan {
    pub energies: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_spread: Vec<f64>,
    pub rho: Vec<f64>,
    pub ids: Vec<f64>,
    pub gaps: Vec<Gap>,
    pub config: ScanConfig,
}

impl SpectralScan {
    pub fn plateau_threshold(&self) -> f64 {
        self.config
            .plateau_threshold
            .unwrap_or(10.0 / self.config.rotation_iterations as f64)
    }

    /// Index of the gap containing grid point `i`.
    pub fn gap_of(&self, i: usize) -> Option<usize> {
        self.gaps.iter().position(|g| g.first <= i && i <= g.last)
    }
}

/// Maximal runs of at least two points with `|Δρ| < threshold`, excluding the runs at `k ≈ 0, 1`.
pub fn detect_gaps(energies: &[f64], rho: &[f64], threshold: f64) -> Vec<Gap> {
    let mut gaps = Vec::new();
    let edge = 2.0 * threshold / PI + 1e-12;
    let mut i = 0;
    while i + 1 < rho.len() {
        if (rho[i + 1] - rho[i]).abs() >= threshold {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < rho.len() && (rho[i + 1] - rho[i]).abs() < threshold {
            i += 1;
        }
        let mean = rho[start..=i].iter().sum::<f64>() / (i - start + 1) as f64;
        let k = mean / PI;
        if k > edge && k < 1.0 - edge {
            gaps.push(Gap { first: start, last: i, e_lo: energies[start], e_hi: energies[i], rho: mean });
        }
    }
    gaps
}

pub fn spectral_scan(fam: &CocycleFamily, energies: &[f64], cfg: ScanConfig) -> Result<SpectralScan, CocycleError> {
    if cfg.rotation_iterations == 0 || cfg.lyapunov_iterations == 0 || cfg.theta_samples == 0 {
        return Err(CocycleError::PreconditionViolated("iteration counts must be positive".into()));
    }
    if energies.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CocycleError::PreconditionViolated("energy grid must be increasing".into()));
    }
    let rot_orbit = fam.orbit(cfg.theta0, cfg.rotation_iterations);
    let lyap_orbits: Vec<Vec<f64>> = (0..cfg.theta_samples)
        .map(|j| fam.orbit((j as f64 + 0.5) / cfg.theta_samples as f64, cfg.lyapunov_iterations))
        .collect();
    let per_e: Vec<(f64, LyapunovEstimate)> = energies
        .par_iter()
        .map(|&e| {
            let rho = fam
                .rotation_outside_spectrum(e)
                .unwrap_or_else(|| rotation_from_orbit(&rot_orbit, e).rho);
            let g: Vec<f64> = lyap_orbits
                .iter()
                .map(|o| log_norm_product(o, e) / cfg.lyapunov_iterations as f64)
                .collect();
            (rho, summarize(&g))
        })
        .collect();
    let rho: Vec<f64> = per_e.iter().map(|p| p.0).collect();
    let threshold = cfg.plateau_threshold.unwrap_or(10.0 / cfg.rotation_iterations as f64);
    Ok(SpectralScan {
        energies: energies.to_vec(),
        gamma: per_e.iter().map(|p| p.1.gamma).collect(),
        gamma_spread: per_e.iter().map(|p| p.1.spread).collect(),
        ids: rho.iter().map(|r| (r / PI).clamp(0.0, 1.0)).collect(),
        gaps: detect_gaps(energies, &rho, threshold),
        rho,
        config: cfg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapLabel {
    pub gap: usize,
    pub l: i64,
    pub residual: f64,
    pub labeled: bool,
}

/// Distance on the circle `ℝ/πℤ` between `ρ` and `π l α`.
pub fn label_residual(rho: f64, l: i64, alpha: f64) -> f64 {
    let x = rho / PI - l as f64 * alpha;
    PI * (x - x.round()).abs()
}

/// Best `|l| ≤ l_max` with `ρ/π ≡ lα (mod 1)`; ties go to the smaller `|l|`.
pub fn label_gap(rho: f64, alpha: f64, l_max: i64) -> (i64, f64) {
    let mut best = (0, label_residual(rho, 0, alpha));
    for m in 1..=l_max {
        for l in [m, -m] {
            let r = label_residual(rho, l, alpha);
            if r < best.1 {
                best = (l, r);
            }
        }
    }
    best
}

pub fn gap_labels(scan: &SpectralScan, alpha: f64, l_max: i64, tol: f64) -> Result<Vec<GapLabel>, CocycleError> {
    if scan.gaps.is_empty() {
        return Err(CocycleError::NoGapsDetected);
    }
    Ok(scan
        .gaps
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let (l, residual) = label_gap(g.rho, alpha, l_max);
            GapLabel { gap: i, l, residual, labeled: residual <= tol }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThoulessRow {
    pub e: f64,
    pub gamma_direct: f64,
    pub stieltjes: f64,
    pub discrepancy: f64,
}

fn log_antiderivative(u: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        u * u.abs().ln() - u
    }
}

/// `∫ ln|E − E'| dk(E')` with `dk` uniform inside each grid cell.
pub fn stieltjes_log(energies: &[f64], ids: &[f64], e: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..energies.len().saturating_sub(1) {
        let dk = ids[i + 1] - ids[i];
        if dk == 0.0 {
            continue;
        }
        let (a, b) = (energies[i], energies[i + 1]);
        let cell = (log_antiderivative(b - e) - log_antiderivative(a - e)) / (b - a);
        acc += dk * cell;
    }
    acc
}

/// Compares the scan's direct `γ` with the Thouless integral at every grid point.
pub fn thouless_check(scan: &SpectralScan, budget: f64) -> Result<Vec<ThoulessRow>, CocycleError> {
    let max_increment = scan.ids.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    if max_increment > budget {
        return Err(CocycleError::GridTooCoarse { max_increment, budget });
    }
    let (k0, k1) = (scan.ids[0], *scan.ids.last().unwrap());
    if k0 > budget || k1 < 1.0 - budget {
        return Err(CocycleError::PreconditionViolated(format!(
            "scan does not cover the support of dk (k runs from {k0} to {k1})"
        )));
    }
    Ok(scan
        .energies
        .iter()
        .zip(&scan.gamma)
        .map(|(&e, &g)| {
            let s = stieltjes_log(&scan.energies, &scan.ids, e);
            ThoulessRow { e, gamma_direct: g, stieltjes: s, discrepancy: (g - s).abs() }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Plus,
    Minus,
}

const M_TOL: f64 = 1e-8;
const M_MAX_DEPTH: usize = 1 << 23;

fn m_fraction(fam: &CocycleFamily, z: Complex64, side: Side, depth: usize, theta: f64) -> Complex64 {
    let v = |n: i64| fam.potential_at((theta + n as f64 * fam.alpha).rem_euclid(1.0));
    match side {
        // m+ = z - V_1 - 1/(z - V_2 - ...)
        Side::Plus => {
            let mut tail = Complex64::new(0.0, 0.0);
            for n in (1..=depth as i64).rev() {
                let t = z - v(n);
                tail = if tail == Complex64::new(0.0, 0.0) { t } else { t - tail.inv() };
            }
            tail
        }
        // m- = 1/(V_0 - z - 1/(V_{-1} - z - ...))
        Side::Minus => {
            let mut tail = Complex64::new(0.0, 0.0);
            for n in (0..depth as i64).rev() {
                let t = v(-n) - z;
                tail = if tail == Complex64::new(0.0, 0.0) { t } else { t - tail.inv() };
            }
            tail.inv()
        }
    }
}

/// Herglotz m-functions: `m⁺ = −u⁺_0/u⁺_1 ~ z`, `m⁻ = u⁻_0/u⁻_1 ~ −1/z`, with `V_n = V(θ+nα)`.
/// Depth doubles from `depth` until successive values agree to `1e-8`.
pub fn m_function(fam: &CocycleFamily, z: Complex64, side: Side, depth: usize, theta: f64) -> Result<Complex64, CocycleError> {
    if !(z.im > 0.0) {
        return Err(CocycleError::PreconditionViolated(format!("need Im z > 0, got {z}")));
    }
    if depth == 0 {
        return Err(CocycleError::PreconditionViolated("depth must be at least 1".into()));
    }
    let mut d = depth;
    let mut prev = m_fraction(fam, z, side, d, theta);
    loop {
        let next_d = 2 * d;
        let next = m_fraction(fam, z, side, next_d, theta);
        let change = (next - prev).norm();
        if change <= M_TOL * next.norm().max(1.0) {
            return Ok(next);
        }
        if next_d >= M_MAX_DEPTH {
            return Err(CocycleError::NotConverged { depth: next_d, change });
        }
        prev = next;
        d = next_d;
    }
}

/// Resolvent block on sites `(1, 0)`: `−1/(m⁺+m⁻)·[[1, m⁻], [m⁻, −m⁺m⁻]]`.
pub fn m_matrix(fam: &CocycleFamily, z: Complex64, depth: usize, theta: f64) -> Result<[[Complex64; 2]; 2], CocycleError> {
    let mp = m_function(fam, z, Side::Plus, depth, theta)?;
    let mm = m_function(fam, z, Side::Minus, depth, theta)?;
    let k = -(mp + mm).inv();
    Ok([[k, k * mm], [k * mm, -k * mp * mm]])
}

/// `Im M(E + iε)/π`.
pub fn spectral_density(fam: &CocycleFamily, e: f64, eps: f64, depth: usize, theta: f64) -> Result<[[f64; 2]; 2], CocycleError> {
    let m = m_matrix(fam, Complex64::new(e, eps), depth, theta)?;
    Ok([[m[0][0].im / PI, m[0][1].im / PI], [m[1][0].im / PI, m[1][1].im / PI]])
}

/// `ρ(E) = arccos(−E/2)` clamped to `[0, π]`.
pub fn free_rotation(e: f64) -> f64 {
    (-e / 2.0).clamp(-1.0, 1.0).acos()
}

/// `γ(E) = arccosh(|E|/2)` outside `[−2, 2]`.
pub fn free_lyapunov(e: f64) -> f64 {
    if e.abs() <= 2.0 {
        0.0
    } else {
        (e.abs() / 2.0).acosh()
    }
}

/// `u_n = sin(nξ0)/sin ξ0`.
pub fn free_eigenvector(e: f64, n: i64) -> f64 {
    let xi = free_rotation(e);
    (n as f64 * xi).sin() / xi.sin()
}

/// Density `1/(π√(4−E²))` of the free spectral measure of a single site.
pub fn free_density(e: f64) -> f64 {
    if e.abs() >= 2.0 {
        0.0
    } else {
        1.0 / (PI * (4.0 - e * e).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mat2_basics() {
        let r = Mat2::rotation(0.3);
        assert!((r.det() - 1.0).abs() < 1e-15);
        assert!(((r * r.inverse()) - Mat2::IDENTITY).max_abs() < 1e-15);
        assert!((Mat2::new(3.0, 0.0, 0.0, 0.5).norm() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn lift_limits() {
        let orbit = vec![0.0; 10_000];
        assert!(rotation_from_orbit(&orbit, -5.0).rho < 1e-3);
        assert!((rotation_from_orbit(&orbit, 5.0).rho - PI).abs() < 1e-3);
    }
}
