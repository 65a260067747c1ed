//! Modified spectral transform: smooth cutoffs, the weight built over non-resonant
//! intervals, generalized Bloch waves, the `(K, J)` eigenvector pair and the correlation
//! coefficients whose decay drives the transport lower bound.

use crate::cocycle::{free_rotation, rotation_from_orbit, CocycleFamily, Mat2};
use crate::grid;
use crate::kam::{is_nonresonant, kam_iterate, KamConfig, KamRun, ResonanceParams};
use crate::numberfield::{AdmissibleSubsequence, ScaleWindow};
use gauss_quad::legendre::GaussLegendre;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::num::NonZeroUsize;

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize)]
pub enum SpectralError {
    #[error("empty interval ({0}, {1})")]
    EmptyInterval(f64, f64),
    #[error("level {level} component ({lo}, {hi}) is not contained in the previous level")]
    NotNested { level: usize, lo: f64, hi: f64 },
    #[error("no reducibility data at E = {energy}: {reason}")]
    NoReducibilityData { energy: f64, reason: String },
    #[error("energies on one stencil reached {0} and {1} levels")]
    BranchMismatch(usize, usize),
    #[error("quadrature for k = {k} did not settle within {nodes} nodes (discrepancy {error:e})")]
    QuadratureBudgetExceeded { k: i64, nodes: usize, error: f64 },
    #[error("phase derivative {min:e} below threshold {threshold:e}")]
    ZeroPhaseDerivative { min: f64, threshold: f64 },
    #[error("insufficient correlations: {0}")]
    InsufficientCorrelations(String),
}

/// `⟨n⟩ = (1 + n²)^{1/2}`.
pub fn bracket(n: i64) -> f64 {
    (1.0 + (n as f64).powi(2)).sqrt()
}

/// A nonnegative energy weight with compact support.
pub trait Weight: Sync {
    /// Disjoint closed intervals outside of which the weight vanishes.
    fn support(&self) -> Vec<(f64, f64)>;
    /// Value and first two derivatives.
    fn jet(&self, e: f64) -> [f64; 3];

    fn value(&self, e: f64) -> f64 {
        self.jet(e)[0]
    }
}

fn check_interval(lo: f64, hi: f64) -> Result<(), SpectralError> {
    if lo.is_finite() && hi.is_finite() && lo < hi {
        Ok(())
    } else {
        Err(SpectralError::EmptyInterval(lo, hi))
    }
}

// ---------------------------------------------------------------------------------------
// cutoffs and weights

/// `exp(4 − 1/u − 1/(1−u))` in the rescaled variable, normalized to 1 at the midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothCutoff {
    pub lo: f64,
    pub hi: f64,
    /// Largest one-sided finite-difference derivative of order 1 to 3 at the endpoints.
    pub endpoint_residual: f64,
}

impl SmoothCutoff {
    pub fn new(lo: f64, hi: f64) -> Result<Self, SpectralError> {
        check_interval(lo, hi)?;
        let mut chi = Self { lo, hi, endpoint_residual: 0.0 };
        chi.endpoint_residual = chi.endpoint_derivatives(1e-3 * (hi - lo));
        Ok(chi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Max over both endpoints and orders 1 to 3 of one-sided difference quotients with step `h`.
    pub fn endpoint_derivatives(&self, h: f64) -> f64 {
        let one_sided = |x0: f64, dir: f64| {
            let f: Vec<f64> = (0..4).map(|j| self.value(x0 + dir * j as f64 * h)).collect();
            let d1 = (f[1] - f[0]) / h;
            let d2 = (f[2] - 2.0 * f[1] + f[0]) / (h * h);
            let d3 = (f[3] - 3.0 * f[2] + 3.0 * f[1] - f[0]) / (h * h * h);
            d1.abs().max(d2.abs()).max(d3.abs())
        };
        one_sided(self.lo, 1.0).max(one_sided(self.hi, -1.0))
    }

    /// Value and first three derivatives.
    pub fn jet4(&self, e: f64) -> [f64; 4] {
        let l = self.width();
        let (u, v) = ((e - self.lo) / l, (self.hi - e) / l);
        if u <= 0.0 || v <= 0.0 {
            return [0.0; 4];
        }
        let g = (4.0 - 1.0 / u - 1.0 / v).exp();
        if g == 0.0 {
            return [0.0; 4];
        }
        // log-derivative p and its derivatives in u
        let p = 1.0 / (u * u) - 1.0 / (v * v);
        let p1 = -2.0 / u.powi(3) - 2.0 / v.powi(3);
        let p2 = 6.0 / u.powi(4) - 6.0 / v.powi(4);
        let g1 = g * p;
        let g2 = g * (p * p + p1);
        let g3 = g * (p.powi(3) + 3.0 * p * p1 + p2);
        [g, g1 / l, g2 / (l * l), g3 / (l * l * l)]
    }
}

impl Weight for SmoothCutoff {
    fn support(&self) -> Vec<(f64, f64)> {
        vec![(self.lo, self.hi)]
    }

    fn jet(&self, e: f64) -> [f64; 3] {
        let j = self.jet4(e);
        [j[0], j[1], j[2]]
    }
}

pub fn build_cutoff(lo: f64, hi: f64) -> Result<SmoothCutoff, SpectralError> {
    SmoothCutoff::new(lo, hi)
}

/// `(1 − x²)³` on the rescaled interval: twice continuously differentiable, with a jump in
/// the third derivative at the endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolynomialBump {
    pub lo: f64,
    pub hi: f64,
}

impl PolynomialBump {
    pub fn new(lo: f64, hi: f64) -> Result<Self, SpectralError> {
        check_interval(lo, hi)?;
        Ok(Self { lo, hi })
    }
}

impl Weight for PolynomialBump {
    fn support(&self) -> Vec<(f64, f64)> {
        vec![(self.lo, self.hi)]
    }

    fn jet(&self, e: f64) -> [f64; 3] {
        let s = 2.0 / (self.hi - self.lo);
        let x = (e - self.lo) * s - 1.0;
        if x.abs() >= 1.0 {
            return [0.0; 3];
        }
        let w = 1.0 - x * x;
        [w.powi(3), -6.0 * x * w * w * s, (-6.0 * w * w + 24.0 * x * x * w) * s * s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Indicator {
    pub lo: f64,
    pub hi: f64,
}

impl Indicator {
    pub fn new(lo: f64, hi: f64) -> Result<Self, SpectralError> {
        check_interval(lo, hi)?;
        Ok(Self { lo, hi })
    }
}

impl Weight for Indicator {
    fn support(&self) -> Vec<(f64, f64)> {
        vec![(self.lo, self.hi)]
    }

    fn jet(&self, e: f64) -> [f64; 3] {
        if self.lo <= e && e <= self.hi {
            [1.0, 0.0, 0.0]
        } else {
            [0.0; 3]
        }
    }
}

/// Smooth step from 0 at `t ≤ 0` to 1 at `t ≥ 1`, with two derivatives.
fn smooth_step(t: f64) -> [f64; 3] {
    if t <= 0.0 {
        return [0.0; 3];
    }
    if t >= 1.0 {
        return [1.0, 0.0, 0.0];
    }
    let s = 1.0 - t;
    let a = (-1.0 / t).exp();
    let b = (-1.0 / s).exp();
    let a1 = a / (t * t);
    let b1 = -b / (s * s);
    let a2 = a * (1.0 / t.powi(4) - 2.0 / t.powi(3));
    let b2 = b * (1.0 / s.powi(4) - 2.0 / s.powi(3));
    let d = a + b;
    let num = a1 * b - a * b1;
    let num1 = a2 * b - a * b2;
    let d1 = a1 + b1;
    [a / d, num / (d * d), (num1 * d - 2.0 * num * d1) / (d * d * d)]
}

/// Plateau bump: 1 on `[lo + ramp, hi − ramp]`, zero outside `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiBump {
    pub lo: f64,
    pub hi: f64,
    pub ramp: f64,
}

impl PsiBump {
    pub fn jet(&self, e: f64) -> [f64; 3] {
        if e <= self.lo || e >= self.hi {
            return [0.0; 3];
        }
        let up = smooth_step((e - self.lo) / self.ramp);
        let down = smooth_step((self.hi - e) / self.ramp);
        let (r, r2) = (self.ramp, self.ramp * self.ramp);
        let (u1, u2) = (up[1] / r, up[2] / r2);
        let (d1, d2) = (-down[1] / r, down[2] / r2);
        [up[0] * down[0], u1 * down[0] + up[0] * d1, u2 * down[0] + 2.0 * u1 * d1 + up[0] * d2]
    }

    pub fn plateau(&self) -> f64 {
        (self.hi - self.lo - 2.0 * self.ramp).max(0.0)
    }
}

/// Intervals `Ω̄_l` at scale `Q_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaLevel {
    pub q: f64,
    pub intervals: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiLevel {
    pub level: usize,
    pub q: f64,
    pub omega: Vec<(f64, f64)>,
    pub margin: f64,
    pub min_length: f64,
    pub bumps: Vec<PsiBump>,
    pub dropped: Vec<(f64, f64)>,
    /// Measure of `Ω̄_l ∩ supp ψ_{l−1}` where the factor is below 1.
    pub leftover: f64,
    /// `Q_l^{−τ1/4}`.
    pub leftover_scale: f64,
    /// Finite-difference `sup|ψ| + sup|ψ'| + sup|ψ''|`.
    pub c2_norm: f64,
    /// `c2_norm / Q_l^{τ1}`.
    pub c2_ratio: f64,
    pub empty: bool,
}

impl PsiLevel {
    pub fn jet(&self, e: f64) -> [f64; 3] {
        self.bumps.iter().find(|b| b.lo < e && e < b.hi).map_or([0.0; 3], |b| b.jet(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPsi {
    pub tau0: f64,
    pub tau1: f64,
    pub levels: Vec<PsiLevel>,
}

impl WeightPsi {
    /// True when some level kept no component, so that the product vanishes.
    pub fn is_empty(&self) -> bool {
        self.levels.iter().any(|l| l.empty)
    }

    pub fn level_value(&self, l: usize, e: f64) -> f64 {
        self.levels[l].jet(e)[0]
    }

    /// Checks that the margin neighbourhood of every bump support lies in the level's
    /// intervals and in the previous level's support.
    pub fn support_inclusion(&self) -> bool {
        let inside = |lo: f64, hi: f64, set: &[(f64, f64)]| {
            set.iter().any(|&(a, b)| a - 1e-12 * (1.0 + a.abs()) <= lo && hi <= b + 1e-12 * (1.0 + b.abs()))
        };
        self.levels.iter().enumerate().all(|(l, lev)| {
            lev.bumps.iter().all(|b| {
                let (lo, hi) = (b.lo - lev.margin, b.hi + lev.margin);
                let prior_ok = l == 0 || {
                    let prior: Vec<(f64, f64)> = self.levels[l - 1].bumps.iter().map(|p| (p.lo, p.hi)).collect();
                    inside(lo, hi, &prior)
                };
                inside(lo, hi, &lev.omega) && prior_ok
            })
        })
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

impl Weight for WeightPsi {
    fn support(&self) -> Vec<(f64, f64)> {
        if self.is_empty() {
            return Vec::new();
        }
        self.levels.last().map_or_else(Vec::new, |l| l.bumps.iter().map(|b| (b.lo, b.hi)).collect())
    }

    fn jet(&self, e: f64) -> [f64; 3] {
        let mut acc = [1.0, 0.0, 0.0];
        for lev in &self.levels {
            let f = lev.jet(e);
            acc = [acc[0] * f[0], acc[1] * f[0] + acc[0] * f[1], acc[2] * f[0] + 2.0 * acc[1] * f[1] + acc[0] * f[2]];
        }
        acc
    }
}

fn measured_c2(bumps: &[PsiBump]) -> f64 {
    let mut sup = [0.0f64; 3];
    for b in bumps {
        let h = b.ramp / 400.0;
        for start in [b.lo, b.hi - b.ramp] {
            for j in 0..=400 {
                let x = start + j as f64 * h;
                let f = [b.jet(x - h)[0], b.jet(x)[0], b.jet(x + h)[0]];
                sup[0] = sup[0].max(f[1].abs());
                sup[1] = sup[1].max(((f[2] - f[0]) / (2.0 * h)).abs());
                sup[2] = sup[2].max(((f[2] - 2.0 * f[1] + f[0]) / (h * h)).abs());
            }
        }
    }
    sup.iter().sum()
}

fn intersect(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(a0, a1) in a {
        for &(b0, b1) in b {
            let (lo, hi) = (a0.max(b0), a1.min(b1));
            if lo < hi {
                out.push((lo, hi));
            }
        }
    }
    out.sort_by(|x, y| x.0.total_cmp(&y.0));
    out
}

/// Builds the product weight level by level: components shorter than `4Q^{−τ1/2}` are
/// dropped, the rest carry a plateau bump shrunk by the margin `Q^{−τ0}` with ramps of
/// width `Q^{−τ1/2}`.
pub fn build_psi(omega: &[OmegaLevel], tau0: f64, tau1: f64) -> Result<WeightPsi, SpectralError> {
    for lev in omega {
        for &(lo, hi) in &lev.intervals {
            check_interval(lo, hi)?;
        }
    }
    for l in 1..omega.len() {
        for &(lo, hi) in &omega[l].intervals {
            let nested = omega[l - 1].intervals.iter().any(|&(a, b)| a <= lo && hi <= b);
            if !nested {
                return Err(SpectralError::NotNested { level: l, lo, hi });
            }
        }
    }
    let mut levels = Vec::with_capacity(omega.len());
    let mut prior: Option<Vec<(f64, f64)>> = None;
    for (l, lev) in omega.iter().enumerate() {
        let q = lev.q.max(1.0);
        let margin = q.powf(-tau0);
        let min_length = 4.0 * q.powf(-tau1 / 2.0);
        let ramp0 = q.powf(-tau1 / 2.0);
        let pieces = match &prior {
            None => {
                let mut v = lev.intervals.clone();
                v.sort_by(|x, y| x.0.total_cmp(&y.0));
                v
            }
            Some(p) => intersect(&lev.intervals, p),
        };
        let mut bumps = Vec::new();
        let mut dropped = Vec::new();
        for &(lo, hi) in &pieces {
            let (a, b) = (lo + margin, hi - margin);
            if hi - lo < min_length || b <= a {
                dropped.push((lo, hi));
                continue;
            }
            bumps.push(PsiBump { lo: a, hi: b, ramp: ramp0.min((b - a) / 2.0) });
        }
        let covered: f64 = pieces.iter().map(|p| p.1 - p.0).sum();
        let plateau: f64 = bumps.iter().map(PsiBump::plateau).sum();
        let c2_norm = measured_c2(&bumps);
        levels.push(PsiLevel {
            level: l,
            q: lev.q,
            omega: lev.intervals.clone(),
            margin,
            min_length,
            empty: bumps.is_empty(),
            dropped,
            leftover: covered - plateau,
            leftover_scale: q.powf(-tau1 / 4.0),
            c2_norm,
            c2_ratio: c2_norm / q.powf(tau1),
            bumps: bumps.clone(),
        });
        prior = Some(bumps.iter().map(|b| (b.lo, b.hi)).collect());
    }
    Ok(WeightPsi { tau0, tau1, levels })
}

/// Number of leading scales `(Q, Q̄)` at which the rotation number (in turns) is nonresonant.
pub fn resonance_reach(rho_turns: f64, scales: &[(f64, f64)], params: &ResonanceParams) -> usize {
    scales.iter().take_while(|&&(q, qbar)| is_nonresonant(rho_turns, q, qbar, params)).count()
}

fn subtract(set: &[(f64, f64)], holes: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = set.to_vec();
    for &(h0, h1) in holes {
        out = out
            .into_iter()
            .flat_map(|(lo, hi)| {
                if h1 <= lo || hi <= h0 {
                    vec![(lo, hi)]
                } else {
                    [(lo, h0.min(hi)), (h1.max(lo), hi)].into_iter().filter(|p| p.0 < p.1).collect()
                }
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachOptions {
    /// Grid energies checked against the reducibility iteration.
    pub count: usize,
    pub rotation_iterations: usize,
    /// Resonant zones are widened by this factor before being removed.
    pub widen: f64,
}

impl Default for ReachOptions {
    fn default() -> Self {
        Self { count: 400, rotation_iterations: 100_000, widen: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachScan {
    pub energies: Vec<f64>,
    pub rho_turns: Vec<f64>,
    pub kam: Vec<usize>,
    /// Scales `Q_l` used by the iteration, capped at its maximal level.
    pub qs: Vec<f64>,
    /// Energy intervals removed at each level for resonance.
    pub resonant: Vec<Vec<(f64, f64)>>,
    pub levels: Vec<OmegaLevel>,
}

/// Smallest `E` in `[lo, hi]` with `ρ(E) ≥ target`, by bisection on the monotone rotation number.
fn invert_rotation(rho: &dyn Fn(f64) -> f64, target: f64, lo: f64, hi: f64) -> f64 {
    if rho(lo) >= target {
        return lo;
    }
    if rho(hi) < target {
        return hi;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..48 {
        let m = 0.5 * (a + b);
        if rho(m) < target {
            a = m;
        } else {
            b = m;
        }
    }
    b
}

/// `Ω̄_l` inside `window`: the energies where the rotation number (in turns) avoids the
/// widened zones `‖2Q_jρ‖ ≤ ε max(Q_j^{−τ}, Q̄_j^{−ν})` for all `j ≤ l`, minus the grid cells
/// around nonresonant sample energies where the reducibility iteration stops before level `l`.
pub fn reach_scan(src: &KamSource, window: (f64, f64), opts: &ReachOptions) -> Result<ReachScan, SpectralError> {
    check_interval(window.0, window.1)?;
    if opts.count < 2 || opts.rotation_iterations == 0 || !(opts.widen >= 1.0) {
        return Err(SpectralError::InsufficientCorrelations("need two energies, one iteration and widening at least 1".into()));
    }
    let scales: Vec<(f64, f64)> = src
        .qseq
        .q
        .iter()
        .zip(&src.qseq.qbar)
        .filter(|(q, _)| **q >= src.config.t0)
        .map(|(&q, &qb)| (q, qb))
        .take(src.max_level)
        .collect();
    let orbit = src.family.orbit(0.0, opts.rotation_iterations);
    let rho = |e: f64| rotation_from_orbit(&orbit, e).rho / (2.0 * PI);
    let (r_lo, r_hi) = (rho(window.0), rho(window.1));
    let p = &src.config.resonance;
    let resonant: Vec<Vec<(f64, f64)>> = scales
        .iter()
        .map(|&(q, qbar)| {
            let half = opts.widen * p.epsilon * q.powf(-p.tau).max(qbar.powf(-p.nu)) / (2.0 * q);
            let m_lo = ((r_lo - half) * 2.0 * q).floor() as i64;
            let m_hi = ((r_hi + half) * 2.0 * q).ceil() as i64;
            let zones: Vec<(f64, f64)> = (m_lo..=m_hi)
                .map(|m| m as f64 / (2.0 * q))
                .filter(|c| c + half > r_lo && c - half < r_hi)
                .map(|c| (c - half, c + half))
                .collect();
            zones
                .par_iter()
                .map(|&(a, b)| (invert_rotation(&rho, a, window.0, window.1), invert_rotation(&rho, b, window.0, window.1)))
                .filter(|z| z.0 < z.1 || (z.0 == z.1 && z.0 > window.0 && z.0 < window.1))
                .collect()
        })
        .collect();
    let step = (window.1 - window.0) / (opts.count + 1) as f64;
    let energies: Vec<f64> = (1..=opts.count).map(|i| window.0 + step * i as f64).collect();
    let rows: Vec<(f64, usize)> = energies
        .par_iter()
        .map(|&e| (rho(e), kam_iterate(&src.family, e, &src.qseq, &src.config, src.max_level).map_or(0, |r| r.levels())))
        .collect();
    let mut good = vec![window];
    let mut levels = Vec::with_capacity(scales.len());
    for (j, &(q, _)) in scales.iter().enumerate() {
        good = subtract(&good, &resonant[j]);
        let cells: Vec<(f64, f64)> = energies
            .iter()
            .zip(&rows)
            .filter(|(&e, r)| r.1 <= j && good.iter().any(|g| g.0 <= e && e <= g.1))
            .map(|(&e, _)| (e - step, e + step))
            .collect();
        good = subtract(&good, &cells);
        levels.push(OmegaLevel { q, intervals: good.clone() });
    }
    Ok(ReachScan {
        rho_turns: rows.iter().map(|r| r.0).collect(),
        kam: rows.iter().map(|r| r.1).collect(),
        energies,
        qs: scales.iter().map(|s| s.0).collect(),
        resonant,
        levels,
    })
}

// ---------------------------------------------------------------------------------------
// Bloch data

/// `φ^{[n]}(E, x)` and `Z(E, x + nα)` with their energy derivatives, where `x` is the
/// cocycle phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub phase: f64,
    pub phase_de: f64,
    pub frame: Mat2,
    pub frame_de: Mat2,
}

/// Reducibility data `A(x) = Z(x+α) R_{φ(x)} Z(x)^{-1}` as a function of energy.
pub trait BlochSource: Sync {
    fn family(&self) -> &CocycleFamily;

    fn jets(&self, e: f64, x: f64, ns: &[i64]) -> Result<Vec<Jet>, SpectralError>;

    /// Phases and frames without derivatives.
    fn values(&self, e: f64, x: f64, ns: &[i64]) -> Result<Vec<(f64, Mat2)>, SpectralError> {
        Ok(self.jets(e, x, ns)?.into_iter().map(|j| (j.phase, j.frame)).collect())
    }
}

/// Zero potential: constant frame, `φ^{[n]} = nξ0`, all derivatives in closed form.
#[derive(Debug, Clone)]
pub struct FreeSource {
    family: CocycleFamily,
}

impl FreeSource {
    pub fn new(alpha: f64) -> Self {
        Self { family: CocycleFamily::free(alpha) }
    }
}

impl BlochSource for FreeSource {
    fn family(&self) -> &CocycleFamily {
        &self.family
    }

    fn jets(&self, e: f64, _x: f64, ns: &[i64]) -> Result<Vec<Jet>, SpectralError> {
        if !(e.abs() < 2.0) {
            return Err(SpectralError::NoReducibilityData { energy: e, reason: "outside the band (-2, 2)".into() });
        }
        let xi = free_rotation(e);
        let (s, c) = xi.sin_cos();
        let dxi = 0.5 / s;
        let r = s.sqrt().recip();
        let m = Mat2::new(c, -s, 1.0, 0.0);
        let dm = Mat2::new(-s, -c, 0.0, 0.0).scale(dxi);
        let dr = -0.5 * r / s * c * dxi;
        let frame = m.scale(r);
        let frame_de = m.scale(dr) + dm.scale(r);
        Ok(ns
            .iter()
            .map(|&n| Jet { phase: n as f64 * xi, phase_de: n as f64 * dxi, frame, frame_de })
            .collect())
    }
}

/// Trigonometric polynomial kept as its nonzero modes.
#[derive(Debug, Clone)]
struct Trig {
    modes: Vec<(i64, Complex64)>,
}

impl Trig {
    fn from_samples(f: &[f64]) -> Self {
        let m = f.len();
        let c = grid::coefficients(f);
        let mut modes = Vec::new();
        for (j, &cj) in c.iter().enumerate() {
            if cj.norm() < 1e-17 {
                continue;
            }
            let k = grid::frequency(j, m);
            if m % 2 == 0 && j == m / 2 {
                modes.push((k, cj / 2.0));
                modes.push((-k, cj / 2.0));
            } else {
                modes.push((k, cj));
            }
        }
        Self { modes }
    }

    fn eval(&self, x: f64) -> f64 {
        self.modes
            .iter()
            .map(|&(k, c)| (c * Complex64::from_polar(1.0, 2.0 * PI * k as f64 * x)).re)
            .sum()
    }

    /// Signed Birkhoff sum, `f^{[−n]}(x) = −Σ_{j=1}^{n} f(x − jα)`.
    fn birkhoff(&self, n: i64, alpha: f64, x: f64) -> f64 {
        let na = (n as f64 * alpha).rem_euclid(1.0);
        self.modes
            .iter()
            .map(|&(k, c)| {
                if k == 0 {
                    return n as f64 * c.re;
                }
                let kf = k as f64;
                let denom = Complex64::from_polar(1.0, 2.0 * PI * kf * alpha) - 1.0;
                let mult = if denom.norm() < 1e-14 {
                    Complex64::new(n as f64, 0.0)
                } else {
                    (Complex64::from_polar(1.0, 2.0 * PI * kf * na) - 1.0) / denom
                };
                (c * mult * Complex64::from_polar(1.0, 2.0 * PI * kf * x)).re
            })
            .sum()
    }
}

/// Deepest conjugation of one KAM run, evaluable off the grid.
#[derive(Debug, Clone)]
pub struct ReducedCocycle {
    pub energy: f64,
    pub alpha: f64,
    pub levels: usize,
    pub frame: Mat2,
    w: [Trig; 4],
    phi: Trig,
}

impl ReducedCocycle {
    pub fn from_run(run: &KamRun) -> Self {
        let st = run.last();
        let entry = |f: fn(&Mat2) -> f64| Trig::from_samples(&st.w.iter().map(f).collect::<Vec<_>>());
        Self {
            energy: run.energy,
            alpha: run.alpha,
            levels: run.levels(),
            frame: run.frame,
            w: [entry(|m| m.a), entry(|m| m.b), entry(|m| m.c), entry(|m| m.d)],
            phi: Trig::from_samples(&st.phi),
        }
    }

    pub fn conjugator(&self, x: f64) -> Mat2 {
        let w = Mat2::new(self.w[0].eval(x), self.w[1].eval(x), self.w[2].eval(x), self.w[3].eval(x));
        self.frame * w
    }

    pub fn phase(&self, n: i64, x: f64) -> f64 {
        self.phi.birkhoff(n, self.alpha, x)
    }
}

/// Reducibility data from the KAM engine, differentiated in energy by central differences.
#[derive(Debug, Clone)]
pub struct KamSource {
    pub family: CocycleFamily,
    pub qseq: AdmissibleSubsequence,
    pub config: KamConfig,
    pub max_level: usize,
    pub min_levels: usize,
    pub de: f64,
}

impl KamSource {
    pub fn new(family: CocycleFamily, qseq: AdmissibleSubsequence, config: KamConfig, max_level: usize) -> Self {
        let de = config.de;
        Self { family, qseq, config, max_level, min_levels: 1, de }
    }

    pub fn reduce(&self, e: f64) -> Result<ReducedCocycle, SpectralError> {
        let no_data = |reason: String| SpectralError::NoReducibilityData { energy: e, reason };
        let run = kam_iterate(&self.family, e, &self.qseq, &self.config, self.max_level).map_err(|err| no_data(err.to_string()))?;
        if run.levels() < self.min_levels {
            return Err(no_data(format!("{} levels reached, termination {:?}", run.levels(), run.termination)));
        }
        Ok(ReducedCocycle::from_run(&run))
    }
}

impl BlochSource for KamSource {
    fn family(&self) -> &CocycleFamily {
        &self.family
    }

    fn jets(&self, e: f64, x: f64, ns: &[i64]) -> Result<Vec<Jet>, SpectralError> {
        let (mid, (minus, plus)) = rayon::join(|| self.reduce(e), || rayon::join(|| self.reduce(e - self.de), || self.reduce(e + self.de)));
        let (mid, minus, plus) = (mid?, minus?, plus?);
        for other in [&minus, &plus] {
            if other.levels != mid.levels {
                return Err(SpectralError::BranchMismatch(mid.levels, other.levels));
            }
        }
        let alpha = self.family.alpha;
        let h = 2.0 * self.de;
        Ok(ns
            .iter()
            .map(|&n| {
                let y = x + n as f64 * alpha;
                Jet {
                    phase: mid.phase(n, x),
                    phase_de: (plus.phase(n, x) - minus.phase(n, x)) / h,
                    frame: mid.conjugator(y),
                    frame_de: (plus.conjugator(y) - minus.conjugator(y)).scale(1.0 / h),
                }
            })
            .collect())
    }

    fn values(&self, e: f64, x: f64, ns: &[i64]) -> Result<Vec<(f64, Mat2)>, SpectralError> {
        let red = self.reduce(e)?;
        let alpha = self.family.alpha;
        Ok(ns.iter().map(|&n| (red.phase(n, x), red.conjugator(x + n as f64 * alpha))).collect())
    }
}

/// The cocycle phase at which the display solves the eigenvalue equation at phase `θ`.
fn cocycle_phase<S: BlochSource + ?Sized>(src: &S, theta: f64) -> f64 {
    theta + src.family().alpha
}

fn wave(phase: f64, z: &Mat2) -> Complex64 {
    Complex64::from_polar(1.0, phase) * Complex64::new(z.c, -z.d)
}

/// `f_n(E, θ) = e^{iφ^{[n]}} (Z₂₁ − iZ₂₂)(· + nα)`.
pub fn bloch_wave<S: BlochSource + ?Sized>(src: &S, e: f64, theta: f64, n: i64) -> Result<Complex64, SpectralError> {
    let v = src.values(e, cocycle_phase(src, theta), &[n])?;
    Ok(wave(v[0].0, &v[0].1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlochWaveTable {
    pub energy: f64,
    pub theta: f64,
    pub n: Vec<i64>,
    pub f: Vec<Complex64>,
    pub phase: Vec<f64>,
    /// Conjugator entries `[Z11, Z12, Z21, Z22]` at `θ + nα`.
    pub frame: Vec<[f64; 4]>,
    /// `|(Lf)_n − E f_n|`.
    pub residual: Vec<f64>,
    pub max_residual: f64,
}

/// Bloch waves for `n_lo ≤ n ≤ n_hi` with the eigenvalue residual at every housed site.
pub fn bloch_table<S: BlochSource + ?Sized>(src: &S, e: f64, theta: f64, n_lo: i64, n_hi: i64) -> Result<BlochWaveTable, SpectralError> {
    let ns: Vec<i64> = (n_lo - 1..=n_hi + 1).collect();
    let vals = src.values(e, cocycle_phase(src, theta), &ns)?;
    let f_all: Vec<Complex64> = vals.iter().map(|(p, z)| wave(*p, z)).collect();
    let fam = src.family();
    let residual: Vec<f64> = (1..ns.len() - 1)
        .map(|i| {
            let v = fam.potential_at(theta + ns[i] as f64 * fam.alpha);
            (-(f_all[i + 1] + f_all[i - 1]) + f_all[i] * (v - e)).norm()
        })
        .collect();
    let inner = 1..ns.len() - 1;
    Ok(BlochWaveTable {
        energy: e,
        theta,
        n: ns[inner.clone()].to_vec(),
        f: f_all[inner.clone()].to_vec(),
        phase: vals[inner.clone()].iter().map(|v| v.0).collect(),
        frame: vals[inner].iter().map(|(_, z)| [z.a, z.b, z.c, z.d]).collect(),
        max_residual: residual.iter().copied().fold(0.0, f64::max),
        residual,
    })
}

/// `(K_n, J_n) = χ(E)(Im f_n, Re f_n)`.
pub fn kj_pair<S: BlochSource + ?Sized>(src: &S, chi: &SmoothCutoff, e: f64, theta: f64, n: i64) -> Result<(f64, f64), SpectralError> {
    let c = chi.value(e);
    if c == 0.0 {
        return Ok((0.0, 0.0));
    }
    let v = src.values(e, cocycle_phase(src, theta), &[n])?;
    let (phase, z) = v[0];
    let (beta, gamma) = (c * z.c, c * z.d);
    let (s, co) = phase.sin_cos();
    Ok((beta * s - gamma * co, beta * co + gamma * s))
}

/// Largest eigenvalue residual of `K` and `J` over `n_lo ≤ n ≤ n_hi`, relative to `χ(E)`.
pub fn kj_residual<S: BlochSource + ?Sized>(src: &S, chi: &SmoothCutoff, e: f64, theta: f64, n_lo: i64, n_hi: i64) -> Result<f64, SpectralError> {
    let c = chi.value(e);
    if c == 0.0 {
        return Ok(0.0);
    }
    let table = bloch_table(src, e, theta, n_lo - 1, n_hi + 1)?;
    let fam = src.family();
    let kj: Vec<(f64, f64)> = table.f.iter().map(|f| (c * f.im, c * f.re)).collect();
    let mut worst = 0.0f64;
    for i in 1..kj.len() - 1 {
        let v = fam.potential_at(theta + table.n[i] as f64 * fam.alpha) - e;
        let rk = -(kj[i + 1].0 + kj[i - 1].0) + v * kj[i].0;
        let rj = -(kj[i + 1].1 + kj[i - 1].1) + v * kj[i].1;
        worst = worst.max(rk.abs()).max(rj.abs());
    }
    Ok(worst / c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeRow {
    pub n: i64,
    pub b: f64,
    pub c: f64,
    pub phase: f64,
    pub phase_de: f64,
}

fn derivative_row(jet: &Jet, n: i64, chi: [f64; 3]) -> DerivativeRow {
    let (beta, gamma) = (chi[0] * jet.frame.c, chi[0] * jet.frame.d);
    let dbeta = chi[1] * jet.frame.c + chi[0] * jet.frame_de.c;
    let dgamma = chi[1] * jet.frame.d + chi[0] * jet.frame_de.d;
    DerivativeRow {
        n,
        b: beta * jet.phase_de - dgamma,
        c: gamma * jet.phase_de + dbeta,
        phase: jet.phase,
        phase_de: jet.phase_de,
    }
}

/// `B_n = β_n ∂φ^{[n]} − ∂γ_n`, `C_n = γ_n ∂φ^{[n]} + ∂β_n` with `β = χZ₂₁`, `γ = χZ₂₂`.
pub fn derivative_coefficients<S: BlochSource + ?Sized>(src: &S, chi: &SmoothCutoff, e: f64, theta: f64, n: i64) -> Result<(f64, f64), SpectralError> {
    let row = derivative_table(src, chi, e, theta, &[n])?[0];
    Ok((row.b, row.c))
}

pub fn derivative_table<S: BlochSource + ?Sized>(src: &S, chi: &SmoothCutoff, e: f64, theta: f64, ns: &[i64]) -> Result<Vec<DerivativeRow>, SpectralError> {
    let jets = src.jets(e, cocycle_phase(src, theta), ns)?;
    let cj = chi.jet(e);
    Ok(jets.iter().zip(ns).map(|(j, &n)| derivative_row(j, n, cj)).collect())
}

// ---------------------------------------------------------------------------------------
// quadrature

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureOptions {
    pub panel_nodes: usize,
    pub points_per_oscillation: f64,
    pub min_panels: usize,
    pub max_nodes: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self { panel_nodes: 16, points_per_oscillation: 20.0, min_panels: 8, max_nodes: 1 << 17, rel_tol: 1e-6, abs_tol: 1e-13 }
    }
}

/// Composite Gauss–Legendre nodes over a union of intervals; refinement level `d` halves
/// the panel width `d` times.
#[derive(Debug, Clone)]
struct Panels {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Panels {
    fn build(regions: &[(f64, f64)], level: u32, opts: &QuadratureOptions) -> Self {
        let rule = GaussLegendre::new(NonZeroUsize::new(opts.panel_nodes.max(1)).unwrap());
        let total: f64 = regions.iter().map(|r| r.1 - r.0).sum();
        let width = total / (opts.min_panels.max(1) as f64 * 2f64.powi(level as i32));
        let (mut nodes, mut weights) = (Vec::new(), Vec::new());
        for &(lo, hi) in regions {
            let count = ((hi - lo) / width).ceil().max(1.0) as usize;
            let h = (hi - lo) / count as f64;
            for p in 0..count {
                let a = lo + p as f64 * h;
                for &(x, w) in rule.as_node_weight_pairs() {
                    nodes.push(a + 0.5 * h * (x + 1.0));
                    weights.push(0.5 * h * w);
                }
            }
        }
        Self { nodes, weights }
    }

    fn estimated_len(regions: &[(f64, f64)], level: u32, opts: &QuadratureOptions) -> usize {
        let total: f64 = regions.iter().map(|r| r.1 - r.0).sum();
        let width = total / (opts.min_panels.max(1) as f64 * 2f64.powi(level as i32));
        regions.iter().map(|r| ((r.1 - r.0) / width).ceil().max(1.0) as usize).sum::<usize>() * opts.panel_nodes
    }
}

/// Smallest refinement level giving the requested node density for `oscillations_per_unit`.
fn density_level(regions: &[(f64, f64)], oscillations_per_unit: f64, opts: &QuadratureOptions) -> u32 {
    let total: f64 = regions.iter().map(|r| r.1 - r.0).sum();
    let base_density = opts.min_panels.max(1) as f64 * opts.panel_nodes as f64 / total;
    let need = opts.points_per_oscillation * oscillations_per_unit;
    if need <= base_density {
        0
    } else {
        (need / base_density).log2().ceil() as u32
    }
}

fn regions_for(weight: &dyn Weight, window: (f64, f64)) -> Vec<(f64, f64)> {
    intersect(&weight.support(), &[window])
}

/// Largest `|∂_E φ^{[1]}|` over a sample of each region, the phase growth per unit step.
fn phase_rate<S: BlochSource + ?Sized>(src: &S, x: f64, regions: &[(f64, f64)]) -> Result<f64, SpectralError> {
    let mut rate = 0.0f64;
    for &(lo, hi) in regions {
        for j in 0..17 {
            let e = lo + (hi - lo) * (j as f64 + 0.5) / 17.0;
            rate = rate.max(src.jets(e, x, &[1])?[0].phase_de.abs());
        }
    }
    Ok(rate)
}

// ---------------------------------------------------------------------------------------
// correlations

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationOptions {
    /// The sup over `n` is restricted to `|n| ≤ n_cap`.
    pub n_cap: i64,
    pub quad: QuadratureOptions,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        Self { n_cap: 64, quad: QuadratureOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub k: i64,
    pub a_k: f64,
    pub n_at_max: i64,
    pub window_tag: Option<usize>,
    pub quad_nodes: usize,
    /// Largest normalized change against the next coarser node set.
    pub quad_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub theta: f64,
    pub n_cap: i64,
    pub rows: Vec<CorrelationRow>,
    pub uniform_cap: f64,
}

impl CorrelationTable {
    pub fn get(&self, k: i64) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.a_k)
    }

    /// Least-squares slope of `log a_k` against `log k` for `k_lo ≤ k ≤ k_hi`.
    pub fn decay_slope(&self, k_lo: i64, k_hi: i64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.k >= k_lo.max(1) && r.k <= k_hi && r.a_k > 0.0)
            .map(|r| ((r.k as f64).ln(), r.a_k.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

/// Index of the first scale window containing `|k|`.
pub fn window_tag(k: i64, windows: &[ScaleWindow]) -> Option<usize> {
    windows.iter().find(|w| w.contains(k.unsigned_abs() as f64)).map(|w| w.l)
}

/// `∂K_m, ∂J_m` for every `m` of the stencil at every node, with `ψ·w` folded in.
struct NodeData {
    m_lo: i64,
    stride: usize,
    dk: Vec<f64>,
    dj: Vec<f64>,
    weight: Vec<f64>,
}

impl NodeData {
    fn build<S: BlochSource + ?Sized>(
        src: &S,
        chi: &SmoothCutoff,
        weight: &dyn Weight,
        x: f64,
        panels: &Panels,
        m_lo: i64,
        m_hi: i64,
    ) -> Result<Self, SpectralError> {
        let ms: Vec<i64> = (m_lo..=m_hi).collect();
        let per_node: Vec<(Vec<f64>, Vec<f64>, f64)> = panels
            .nodes
            .par_iter()
            .zip(panels.weights.par_iter())
            .map(|(&e, &w)| {
                let psi = weight.value(e);
                let cj = chi.jet(e);
                if psi == 0.0 || cj[0] == 0.0 && cj[1] == 0.0 {
                    return Ok((vec![0.0; ms.len()], vec![0.0; ms.len()], 0.0));
                }
                let jets = src.jets(e, x, &ms)?;
                let (mut dk, mut dj) = (Vec::with_capacity(ms.len()), Vec::with_capacity(ms.len()));
                for (jet, &m) in jets.iter().zip(&ms) {
                    let r = derivative_row(jet, m, cj);
                    let (s, c) = r.phase.sin_cos();
                    dk.push(r.b * c + r.c * s);
                    dj.push(-r.b * s + r.c * c);
                }
                Ok((dk, dj, psi * w))
            })
            .collect::<Result<_, SpectralError>>()?;
        let stride = ms.len();
        let mut out = Self { m_lo, stride, dk: Vec::with_capacity(stride * per_node.len()), dj: Vec::new(), weight: Vec::new() };
        for (dk, dj, w) in per_node {
            out.dk.extend(dk);
            out.dj.extend(dj);
            out.weight.push(w);
        }
        Ok(out)
    }

    fn integral(&self, m: i64, n: i64) -> f64 {
        let (im, in_) = ((m - self.m_lo) as usize, (n - self.m_lo) as usize);
        self.weight
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let base = i * self.stride;
                w * (self.dk[base + im] * self.dk[base + in_] + self.dj[base + im] * self.dj[base + in_])
            })
            .sum()
    }

    fn nodes(&self) -> usize {
        self.weight.len()
    }
}

/// `a_k = max_{|n| ≤ n_cap} |∫(∂K_{n+k}∂K_n + ∂J_{n+k}∂J_n) ψ dE| / (⟨n+k⟩⟨n⟩)`; every
/// entry is accepted only once it agrees with the next coarser node set.
pub fn correlation_table<S: BlochSource + ?Sized>(
    src: &S,
    chi: &SmoothCutoff,
    weight: &dyn Weight,
    theta: f64,
    ks: &[i64],
    opts: &CorrelationOptions,
    windows: &[ScaleWindow],
) -> Result<CorrelationTable, SpectralError> {
    let x = cocycle_phase(src, theta);
    let regions = regions_for(weight, (chi.lo, chi.hi));
    let ncap = opts.n_cap.max(0);
    let mut rows = Vec::with_capacity(ks.len());
    if regions.is_empty() || ks.is_empty() {
        rows.extend(ks.iter().map(|&k| CorrelationRow { k, a_k: 0.0, n_at_max: 0, window_tag: window_tag(k, windows), quad_nodes: 0, quad_error: 0.0 }));
        return Ok(CorrelationTable { theta, n_cap: ncap, rows, uniform_cap: 0.0 });
    }
    let rate = phase_rate(src, x, &regions)?;
    let k_min = ks.iter().copied().min().unwrap().min(0);
    let k_max = ks.iter().copied().max().unwrap().max(0);
    let (m_lo, m_hi) = (-ncap + k_min, ncap + k_max);
    let mut level: Vec<u32> = ks
        .iter()
        .map(|&k| density_level(&regions, k.unsigned_abs() as f64 * rate / (2.0 * PI), &opts.quad) + 1)
        .collect();
    for (&k, &d) in ks.iter().zip(&level) {
        let nodes = Panels::estimated_len(&regions, d, &opts.quad);
        if nodes > opts.quad.max_nodes {
            return Err(SpectralError::QuadratureBudgetExceeded { k, nodes, error: f64::NAN });
        }
    }
    let mut cache: BTreeMap<u32, NodeData> = BTreeMap::new();
    let mut done: Vec<Option<CorrelationRow>> = vec![None; ks.len()];
    loop {
        let mut needed: Vec<u32> = Vec::new();
        for (i, &d) in level.iter().enumerate() {
            if done[i].is_none() {
                needed.extend([d - 1, d]);
            }
        }
        needed.sort_unstable();
        needed.dedup();
        if needed.is_empty() {
            break;
        }
        for &d in &needed {
            if !cache.contains_key(&d) {
                let panels = Panels::build(&regions, d, &opts.quad);
                cache.insert(d, NodeData::build(src, chi, weight, x, &panels, m_lo, m_hi)?);
            }
        }
        let results: Vec<(usize, Option<CorrelationRow>, f64)> = ks
            .par_iter()
            .enumerate()
            .filter(|(i, _)| done[*i].is_none())
            .map(|(i, &k)| {
                let (coarse, fine) = (&cache[&(level[i] - 1)], &cache[&level[i]]);
                let (mut best, mut arg, mut err) = (0.0f64, 0i64, 0.0f64);
                for n in -ncap..=ncap {
                    let norm = bracket(n + k) * bracket(n);
                    let f = fine.integral(n + k, n) / norm;
                    let c = coarse.integral(n + k, n) / norm;
                    err = err.max((f - c).abs());
                    if f.abs() > best {
                        best = f.abs();
                        arg = n;
                    }
                }
                let ok = err <= opts.quad.rel_tol * best + opts.quad.abs_tol;
                let row = CorrelationRow { k, a_k: best, n_at_max: arg, window_tag: window_tag(k, windows), quad_nodes: fine.nodes(), quad_error: err };
                (i, ok.then_some(row), err)
            })
            .collect();
        for (i, row, err) in results {
            match row {
                Some(r) => done[i] = Some(r),
                None => {
                    level[i] += 1;
                    let nodes = Panels::estimated_len(&regions, level[i], &opts.quad);
                    if nodes > opts.quad.max_nodes {
                        return Err(SpectralError::QuadratureBudgetExceeded { k: ks[i], nodes, error: err });
                    }
                }
            }
        }
        cache.retain(|d, _| level.iter().zip(&done).any(|(l, r)| r.is_none() && (*d + 1 == *l || d == l)));
    }
    rows.extend(done.into_iter().map(|r| r.expect("all rows settled")));
    let uniform_cap = rows.iter().map(|r| r.a_k).fold(0.0, f64::max);
    Ok(CorrelationTable { theta, n_cap: ncap, rows, uniform_cap })
}

// ---------------------------------------------------------------------------------------
// integration by parts

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbpOptions {
    pub threshold: f64,
    /// Step of the five-point stencil, relative to the interval length.
    pub stencil: f64,
    pub quad: QuadratureOptions,
}

impl Default for IbpOptions {
    fn default() -> Self {
        Self { threshold: 1e-6, stencil: 1e-3, quad: QuadratureOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbpReport {
    pub n: i64,
    pub k: i64,
    /// `∫ hψ cos Φ`.
    pub cosine_term: f64,
    /// `∫ ∂_E(hψ/∂_EΦ) sin Φ`.
    pub sine_term: f64,
    pub residual: f64,
    /// `∫ |hψ|`, the size the residual should be compared with.
    pub scale: f64,
    pub min_phase_derivative: f64,
    pub quad_nodes: usize,
    pub quad_error: f64,
}

/// Checks `∫ hψ cos Φ + ∫ ∂_E(hψ/∂_EΦ) sin Φ = 0` on `interval`, where
/// `Φ = φ^{[n+k]} − φ^{[n]}` and `h = (B_{n+k}B_n + C_{n+k}C_n)/(⟨n+k⟩⟨n⟩)`.
pub fn ibp_consistency<S: BlochSource + ?Sized>(
    src: &S,
    chi: &SmoothCutoff,
    weight: &dyn Weight,
    theta: f64,
    n: i64,
    k: i64,
    interval: (f64, f64),
    opts: &IbpOptions,
) -> Result<IbpReport, SpectralError> {
    check_interval(interval.0, interval.1)?;
    let x = cocycle_phase(src, theta);
    let regions = regions_for(weight, interval);
    let empty = IbpReport { n, k, cosine_term: 0.0, sine_term: 0.0, residual: 0.0, scale: 0.0, min_phase_derivative: f64::INFINITY, quad_nodes: 0, quad_error: 0.0 };
    if regions.is_empty() {
        return Ok(empty);
    }
    let ms = [n + k, n];
    let norm = bracket(n + k) * bracket(n);
    // h/∂Φ and Φ, smooth in E
    let ratio = |e: f64| -> Result<(f64, f64, f64), SpectralError> {
        let jets = src.jets(e, x, &ms)?;
        let cj = chi.jet(e);
        let (a, b) = (derivative_row(&jets[0], ms[0], cj), derivative_row(&jets[1], ms[1], cj));
        let h = (a.b * b.b + a.c * b.c) / norm;
        Ok((h, a.phase - b.phase, a.phase_de - b.phase_de))
    };
    let step = opts.stencil * (interval.1 - interval.0);
    let evaluate = |panels: &Panels| -> Result<(f64, f64, f64, f64), SpectralError> {
        let vals: Vec<(f64, f64, f64, f64)> = panels
            .nodes
            .par_iter()
            .zip(panels.weights.par_iter())
            .map(|(&e, &w)| {
                let (h, phase, dphase) = ratio(e)?;
                let psi = weight.jet(e);
                let r = |e: f64| ratio(e).map(|(h, _, d)| h / d);
                let dr = (-r(e + 2.0 * step)? + 8.0 * r(e + step)? - 8.0 * r(e - step)? + r(e - 2.0 * step)?) / (12.0 * step);
                let q1 = psi[1] * h / dphase + psi[0] * dr;
                let (s, c) = phase.sin_cos();
                Ok((w * h * psi[0] * c, w * q1 * s, w * (h * psi[0]).abs(), dphase.abs()))
            })
            .collect::<Result<_, SpectralError>>()?;
        Ok(vals.iter().fold((0.0, 0.0, 0.0, f64::INFINITY), |acc, v| (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2, acc.3.min(v.3))))
    };
    let rate = phase_rate(src, x, &regions)?;
    let d = density_level(&regions, k.unsigned_abs() as f64 * rate / (2.0 * PI), &opts.quad) + 1;
    let coarse_panels = Panels::build(&regions, d - 1, &opts.quad);
    let fine_panels = Panels::build(&regions, d, &opts.quad);
    let min_dphase = coarse_panels
        .nodes
        .iter()
        .map(|&e| ratio(e).map(|v| v.2.abs()))
        .try_fold(f64::INFINITY, |m, v| v.map(|v| m.min(v)))?;
    if !(min_dphase >= opts.threshold) {
        return Err(SpectralError::ZeroPhaseDerivative { min: min_dphase, threshold: opts.threshold });
    }
    let coarse = evaluate(&coarse_panels)?;
    let fine = evaluate(&fine_panels)?;
    Ok(IbpReport {
        cosine_term: fine.0,
        sine_term: fine.1,
        residual: (fine.0 + fine.1).abs(),
        scale: fine.2,
        min_phase_derivative: min_dphase.min(fine.3),
        quad_nodes: fine_panels.nodes.len(),
        quad_error: ((fine.0 + fine.1) - (coarse.0 + coarse.1)).abs(),
        ..empty
    })
}

// ---------------------------------------------------------------------------------------
// transform norm and lower bound

/// `‖G(0,·)‖ = (∫ |Σ u_n K_n|² + |Σ u_n J_n|² ψ dE)^{1/2}` for a finitely supported `u`.
pub fn transform_norm<S: BlochSource + ?Sized>(
    src: &S,
    chi: &SmoothCutoff,
    weight: &dyn Weight,
    theta: f64,
    u: &[(i64, Complex64)],
    quad: &QuadratureOptions,
) -> Result<f64, SpectralError> {
    let x = cocycle_phase(src, theta);
    let regions = regions_for(weight, (chi.lo, chi.hi));
    if regions.is_empty() || u.is_empty() {
        return Ok(0.0);
    }
    let ns: Vec<i64> = u.iter().map(|p| p.0).collect();
    let spread = ns.iter().map(|n| n.unsigned_abs()).max().unwrap_or(0) as f64;
    let rate = phase_rate(src, x, &regions)?;
    let d = density_level(&regions, 2.0 * spread * rate / (2.0 * PI), quad) + 1;
    let integrate = |panels: &Panels| -> Result<f64, SpectralError> {
        panels
            .nodes
            .par_iter()
            .zip(panels.weights.par_iter())
            .map(|(&e, &w)| {
                let c = chi.value(e);
                let psi = weight.value(e);
                if c == 0.0 || psi == 0.0 {
                    return Ok(0.0);
                }
                let vals = src.values(e, x, &ns)?;
                let (mut g1, mut g2) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
                for ((_, un), (phase, z)) in u.iter().zip(&vals) {
                    let f = wave(*phase, z) * c;
                    g1 += un * f.im;
                    g2 += un * f.re;
                }
                Ok(w * psi * (g1.norm_sqr() + g2.norm_sqr()))
            })
            .collect::<Result<Vec<f64>, SpectralError>>()
            .map(|v| v.iter().sum())
    };
    let coarse = integrate(&Panels::build(&regions, d - 1, quad))?;
    let fine = integrate(&Panels::build(&regions, d, quad))?;
    if (fine - coarse).abs() > quad.rel_tol * fine.abs() + quad.abs_tol {
        return Err(SpectralError::QuadratureBudgetExceeded { k: 0, nodes: Panels::estimated_len(&regions, d, quad), error: (fine - coarse).abs() });
    }
    Ok(fine.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub t: f64,
    pub eta: f64,
    pub c8: f64,
    pub u0_moment: f64,
    pub g_norm: f64,
    /// Correlations enter for `k_lo ≤ |k| ≤ k_cap`.
    pub k_lo: i64,
    pub k_cap: i64,
    /// True when the table ended before `T^{101}`.
    pub cap_limited: bool,
    pub tail_sum: f64,
    pub floor: f64,
}

/// `c₈T/(T^η + Σ_{T^η < |k| ≤ cap} a_k)^{1/2} − c₈^{−1}` with `c₈ = min(‖G(0)‖, 1/⟨u(0)⟩₂)`
/// and `a_{−k} = a_k`.
pub fn lower_bound_estimate(table: &CorrelationTable, u0_moment: f64, g_norm: f64, t: f64, eta: f64) -> Result<LowerBound, SpectralError> {
    if !(g_norm > 0.0) || !(u0_moment > 0.0) {
        return Err(SpectralError::InsufficientCorrelations(format!("constants must be positive (G-norm {g_norm}, moment {u0_moment})")));
    }
    if !(t >= 1.0) {
        return Err(SpectralError::InsufficientCorrelations(format!("T = {t} below 1")));
    }
    let t_eta = t.powf(eta);
    let k_lo = t_eta.floor() as i64 + 1;
    let k_top = table.rows.iter().map(|r| r.k).max().unwrap_or(0);
    let limit = 101.0 * t.ln();
    let k_cap = if limit < (k_top as f64).ln() { t.powf(101.0).floor() as i64 } else { k_top };
    let mut tail = 0.0;
    if k_lo <= k_cap {
        for k in k_lo..=k_cap {
            let a = table
                .get(k)
                .ok_or_else(|| SpectralError::InsufficientCorrelations(format!("a_{k} missing for T = {t}: the table does not reach down to |k| = {k_lo}")))?;
            tail += 2.0 * a;
        }
    }
    let c8 = g_norm.min(1.0 / u0_moment);
    Ok(LowerBound {
        t,
        eta,
        c8,
        u0_moment,
        g_norm,
        k_lo,
        k_cap,
        cap_limited: k_cap == k_top,
        tail_sum: tail,
        floor: c8 * t / (t_eta + tail).sqrt() - 1.0 / c8,
    })
}
