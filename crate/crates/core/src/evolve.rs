//! Wavepacket evolution, diffusion moments and transport exponents.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cocycle::CocycleFamily;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvolveError {
    #[error("window half-width {required} exceeds the cap {cap}")]
    WindowOverflow { required: usize, cap: usize },
    #[error("{found} samples in the fit window, need at least {needed}")]
    InsufficientSamples { found: usize, needed: usize },
    #[error("moment orders must satisfy p1 >= p2 >= p3 >= 0, got ({0}, {1}, {2})")]
    BadOrder(f64, f64, f64),
    #[error("moment p = {0} not present in the report")]
    MissingMoment(f64),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
}

/// Amplitudes on the window `[-N, N]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavePacket {
    pub half_width: usize,
    pub amplitudes: Vec<Complex64>,
    pub theta: f64,
    pub t: f64,
}

impl WavePacket {
    pub fn new(half_width: usize, amplitudes: Vec<Complex64>, theta: f64) -> Result<Self, EvolveError> {
        if amplitudes.len() != 2 * half_width + 1 {
            return Err(EvolveError::PreconditionViolated(format!(
                "{} amplitudes for half-width {half_width}",
                amplitudes.len()
            )));
        }
        Ok(Self { half_width, amplitudes, theta, t: 0.0 })
    }

    pub fn delta(site: i64, half_width: usize, theta: f64) -> Self {
        let mut amps = vec![Complex64::new(0.0, 0.0); 2 * half_width + 1];
        amps[(site + half_width as i64) as usize] = Complex64::new(1.0, 0.0);
        Self { half_width, amplitudes: amps, theta, t: 0.0 }
    }

    pub fn site(&self, i: usize) -> i64 {
        i as i64 - self.half_width as i64
    }

    pub fn amplitude(&self, n: i64) -> Complex64 {
        let i = n + self.half_width as i64;
        if i < 0 || i >= self.amplitudes.len() as i64 {
            Complex64::new(0.0, 0.0)
        } else {
            self.amplitudes[i as usize]
        }
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `Σ |u_n|²` over the outermost `width` sites on each side.
    pub fn edge_mass(&self, width: usize) -> f64 {
        let len = self.amplitudes.len();
        let w = width.min(len.div_ceil(2));
        let left: f64 = self.amplitudes[..w].iter().map(|a| a.norm_sqr()).sum();
        let right: f64 = self.amplitudes[len - w..].iter().map(|a| a.norm_sqr()).sum();
        left + right
    }

    pub fn boundary_mass(&self) -> f64 {
        self.edge_mass(2)
    }

    /// Zero-pads to a larger half-width.
    pub fn padded(&self, half_width: usize) -> Self {
        if half_width <= self.half_width {
            return self.clone();
        }
        let extra = half_width - self.half_width;
        let mut amps = vec![Complex64::new(0.0, 0.0); 2 * half_width + 1];
        amps[extra..extra + self.amplitudes.len()].copy_from_slice(&self.amplitudes);
        Self { half_width, amplitudes: amps, theta: self.theta, t: self.t }
    }

    pub fn inner(&self, other: &Self) -> Complex64 {
        let n = self.half_width.max(other.half_width) as i64;
        (-n..=n).map(|k| self.amplitude(k).conj() * other.amplitude(k)).sum()
    }
}

fn potential_on(fam: &CocycleFamily, theta: f64, half_width: usize) -> Vec<f64> {
    let n = half_width as i64;
    (-n..=n)
        .map(|k| fam.potential_at((theta + k as f64 * fam.alpha).rem_euclid(1.0)))
        .collect()
}

fn apply_with(v: &[f64], u: &[Complex64], out: &mut [Complex64]) {
    let len = u.len();
    for i in 0..len {
        let mut s = u[i] * v[i];
        if i > 0 {
            s -= u[i - 1];
        }
        if i + 1 < len {
            s -= u[i + 1];
        }
        out[i] = s;
    }
}

/// `(Lu)_n = −u_{n+1} − u_{n−1} + V(θ+nα)u_n` with zero values outside the window.
pub fn apply_operator(fam: &CocycleFamily, theta: f64, u: &WavePacket) -> WavePacket {
    let v = potential_on(fam, theta, u.half_width);
    let mut out = vec![Complex64::new(0.0, 0.0); u.amplitudes.len()];
    apply_with(&v, &u.amplitudes, &mut out);
    WavePacket { half_width: u.half_width, amplitudes: out, theta, t: u.t }
}

/// `⟨Lu, u⟩`.
pub fn energy(fam: &CocycleFamily, theta: f64, u: &WavePacket) -> f64 {
    apply_operator(fam, theta, u).inner(u).re
}

/// `J_k(x)` for `k = 0..=kmax`, `x ≥ 0`, by Miller's backward recurrence.
pub fn bessel_j_sequence(x: f64, kmax: usize) -> Vec<f64> {
    let mut out = vec![0.0; kmax + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let top = kmax.max(x as usize);
    let mut start = top + 20 + (40.0 * top as f64).sqrt() as usize;
    start += start % 2;
    let mut vals = vec![0.0; start + 2];
    let (mut next, mut cur) = (0.0f64, 1e-30f64);
    vals[start] = cur;
    for k in (1..=start).rev() {
        let prev = 2.0 * k as f64 / x * cur - next;
        next = cur;
        cur = prev;
        vals[k - 1] = cur;
        if cur.abs() > 1e250 {
            for v in vals[k - 1..=start].iter_mut() {
                *v *= 1e-250;
            }
            next *= 1e-250;
            cur *= 1e-250;
        }
    }
    let norm = vals[0] + 2.0 * vals.iter().skip(2).step_by(2).sum::<f64>();
    for k in 0..=kmax {
        out[k] = vals[k] / norm;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagateConfig {
    pub tol: f64,
    pub max_half_width: usize,
    /// Target `R·Δt` per Chebyshev step.
    pub step_scale: f64,
}

impl PropagateConfig {
    pub fn new(tol: f64) -> Self {
        Self { tol, max_half_width: 1 << 20, step_scale: 20.0 }
    }
}

/// Bessel coefficients for one step, truncated once past the turning point they stay below `1e-17`.
fn chebyshev_coefficients(x: f64) -> Vec<f64> {
    let kmax = (x + 10.0 * x.cbrt() + 40.0) as usize;
    let j = bessel_j_sequence(x, kmax);
    let mut k = j.len();
    while k > 1 && (k as f64 > x + 1.0) && j[k - 1].abs() < 1e-17 {
        k -= 1;
    }
    j[..k].to_vec()
}

fn chebyshev_step(v: &[f64], radius: f64, u: &[Complex64], dt: f64) -> Vec<Complex64> {
    let x = radius * dt.abs();
    let coeffs = chebyshev_coefficients(x);
    let phase = if dt >= 0.0 { Complex64::new(0.0, -1.0) } else { Complex64::new(0.0, 1.0) };
    let len = u.len();
    let scaled: Vec<f64> = v.iter().map(|x| x / radius).collect();
    let h = |w: &[Complex64], out: &mut [Complex64]| {
        for i in 0..len {
            let mut s = w[i] * scaled[i];
            if i > 0 {
                s -= w[i - 1] / radius;
            }
            if i + 1 < len {
                s -= w[i + 1] / radius;
            }
            out[i] = s;
        }
    };
    let mut t_prev = u.to_vec();
    let mut t_cur = vec![Complex64::new(0.0, 0.0); len];
    h(&t_prev, &mut t_cur);
    let mut acc: Vec<Complex64> = t_prev.iter().map(|a| a * coeffs[0]).collect();
    let mut pk = phase;
    if coeffs.len() > 1 {
        let c = pk * 2.0 * coeffs[1];
        for (a, t) in acc.iter_mut().zip(&t_cur) {
            *a += c * t;
        }
    }
    let mut t_next = vec![Complex64::new(0.0, 0.0); len];
    for &ck in coeffs.iter().skip(2) {
        h(&t_cur, &mut t_next);
        for (n, p) in t_next.iter_mut().zip(&t_prev) {
            *n = 2.0 * *n - p;
        }
        pk *= phase;
        let c = pk * 2.0 * ck;
        for (a, t) in acc.iter_mut().zip(&t_next) {
            *a += c * t;
        }
        std::mem::swap(&mut t_prev, &mut t_cur);
        std::mem::swap(&mut t_cur, &mut t_next);
    }
    acc
}

/// `e^{−itL}u` by Chebyshev expansion over the enclosure `[−R, R]`, `R = 2 + sup|V|`,
/// growing the window ahead of the light cone of each step.
pub fn propagate(fam: &CocycleFamily, theta: f64, u: &WavePacket, t: f64, cfg: &PropagateConfig) -> Result<WavePacket, EvolveError> {
    if !(cfg.tol > 0.0) {
        return Err(EvolveError::PreconditionViolated("tol must be positive".into()));
    }
    let radius = 2.0 + fam.sup_potential();
    let steps = (t.abs() * radius / cfg.step_scale).ceil().max(if t == 0.0 { 0.0 } else { 1.0 }) as usize;
    let mut state = u.clone();
    state.theta = theta;
    if steps == 0 {
        return Ok(state);
    }
    let dt = t / steps as f64;
    let reach = chebyshev_coefficients(radius * dt.abs()).len() + 2;
    let mut v = potential_on(fam, theta, state.half_width);
    for _ in 0..steps {
        let mut hw = state.half_width;
        while state.padded(hw).edge_mass(reach) > (cfg.tol / 10.0).powi(2) || hw < reach {
            hw = ((1.25 * hw as f64) + 2.0 * dt.abs() * radius).ceil() as usize + reach;
            if hw > cfg.max_half_width {
                return Err(EvolveError::WindowOverflow { required: hw, cap: cfg.max_half_width });
            }
        }
        if hw != state.half_width {
            state = state.padded(hw);
            v = potential_on(fam, theta, hw);
        }
        state.amplitudes = chebyshev_step(&v, radius, &state.amplitudes, dt);
        state.t += dt;
    }
    Ok(state)
}

/// Classical RK4 on a fixed window, for cross-validation.
pub fn propagate_rk4(fam: &CocycleFamily, theta: f64, u: &WavePacket, t: f64, dt: f64) -> WavePacket {
    let v = potential_on(fam, theta, u.half_width);
    let steps = (t.abs() / dt).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let len = u.amplitudes.len();
    let rhs = |w: &[Complex64]| -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); len];
        apply_with(&v, w, &mut out);
        out.iter().map(|x| Complex64::new(x.im, -x.re)).collect()
    };
    let mut y = u.amplitudes.clone();
    for _ in 0..steps {
        let k1 = rhs(&y);
        let y2: Vec<Complex64> = y.iter().zip(&k1).map(|(a, k)| a + k * (h / 2.0)).collect();
        let k2 = rhs(&y2);
        let y3: Vec<Complex64> = y.iter().zip(&k2).map(|(a, k)| a + k * (h / 2.0)).collect();
        let k3 = rhs(&y3);
        let y4: Vec<Complex64> = y.iter().zip(&k3).map(|(a, k)| a + k * h).collect();
        let k4 = rhs(&y4);
        for i in 0..len {
            y[i] += (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * (h / 6.0);
        }
    }
    WavePacket { half_width: u.half_width, amplitudes: y, theta, t: u.t + t }
}

/// `(Σ (|n|^p + 1)|u_n|²)^{1/2}`; `|0|^0 = 1`.
pub fn moment(u: &WavePacket, p: f64) -> Result<f64, EvolveError> {
    if !(p >= 0.0) {
        return Err(EvolveError::PreconditionViolated(format!("moment order {p} < 0")));
    }
    let s: f64 = u
        .amplitudes
        .iter()
        .enumerate()
        .map(|(i, a)| ((u.site(i).unsigned_abs() as f64).powf(p) + 1.0) * a.norm_sqr())
        .sum();
    Ok(s.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportReport {
    pub times: Vec<f64>,
    pub ps: Vec<f64>,
    /// `moments[j][i]` is `⟨u(t_i)⟩_{p_j}`.
    pub moments: Vec<Vec<f64>>,
    pub boundary_mass: Vec<f64>,
    pub norms: Vec<f64>,
    pub energies: Vec<f64>,
    pub half_widths: Vec<usize>,
}

impl TransportReport {
    /// Builds a report from given moment series (no dynamics).
    pub fn synthetic(times: Vec<f64>, ps: Vec<f64>, moments: Vec<Vec<f64>>) -> Self {
        let n = times.len();
        Self { times, ps, moments, boundary_mass: vec![0.0; n], norms: vec![1.0; n], energies: vec![0.0; n], half_widths: vec![0; n] }
    }

    pub fn series(&self, p: f64) -> Result<&[f64], EvolveError> {
        self.ps
            .iter()
            .position(|&q| (q - p).abs() < 1e-12)
            .map(|j| self.moments[j].as_slice())
            .ok_or(EvolveError::MissingMoment(p))
    }

    /// Local slope of `2 log⟨u⟩_p / (p log t)` at each interior time from the triple around it.
    pub fn local_slopes(&self, p: f64) -> Result<Vec<Option<f64>>, EvolveError> {
        let m = self.series(p)?;
        let n = self.times.len();
        Ok((0..n)
            .map(|i| {
                if i == 0 || i + 1 >= n || self.times[i - 1] <= 0.0 || p <= 0.0 {
                    None
                } else {
                    Some(triple_slope(&self.times[i - 1..=i + 1], &m[i - 1..=i + 1]) * 2.0 / p)
                }
            })
            .collect())
    }
}

fn triple_slope(t: &[f64], m: &[f64]) -> f64 {
    let xs: Vec<f64> = t.iter().map(|x| x.ln()).collect();
    let ys: Vec<f64> = m.iter().map(|y| y.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Log-spaced sample times on `[t0, t1]`.
pub fn log_times(t0: f64, t1: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![t0];
    }
    let (a, b) = (t0.ln(), t1.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Evolves `u0` through increasing `times`, recording moments for each `p`.
pub fn evolve(
    fam: &CocycleFamily,
    theta: f64,
    u0: &WavePacket,
    times: &[f64],
    ps: &[f64],
    cfg: &PropagateConfig,
) -> Result<TransportReport, EvolveError> {
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(EvolveError::PreconditionViolated("times must be nonnegative and strictly increasing".into()));
    }
    if let Some(&p) = ps.iter().find(|p| !(**p >= 0.0)) {
        return Err(EvolveError::PreconditionViolated(format!("moment order {p} < 0")));
    }
    let mut report = TransportReport {
        times: times.to_vec(),
        ps: ps.to_vec(),
        moments: vec![Vec::with_capacity(times.len()); ps.len()],
        boundary_mass: Vec::with_capacity(times.len()),
        norms: Vec::with_capacity(times.len()),
        energies: Vec::with_capacity(times.len()),
        half_widths: Vec::with_capacity(times.len()),
    };
    let mut state = u0.clone();
    let mut now = 0.0;
    for &t in times {
        state = propagate(fam, theta, &state, t - now, cfg)?;
        now = t;
        for (j, &p) in ps.iter().enumerate() {
            report.moments[j].push(moment(&state, p)?);
        }
        report.boundary_mass.push(state.boundary_mass());
        report.norms.push(state.norm());
        report.energies.push(energy(fam, theta, &state));
        report.half_widths.push(state.half_width);
    }
    Ok(report)
}

/// Independent trajectories for several phases.
pub fn evolve_phases(
    fam: &CocycleFamily,
    thetas: &[f64],
    u0: &WavePacket,
    times: &[f64],
    ps: &[f64],
    cfg: &PropagateConfig,
) -> Result<Vec<TransportReport>, EvolveError> {
    thetas.par_iter().map(|&th| evolve(fam, th, u0, times, ps, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportExponents {
    pub beta_plus: f64,
    pub beta_minus: f64,
    /// `(t_i, slope)` for each interior sample inside the window.
    pub slopes: Vec<(f64, f64)>,
}

pub const MIN_FIT_SAMPLES: usize = 8;

/// Finite-time proxies for `β±`: max/min of the local slopes inside `[t_min, t_max]`.
pub fn transport_exponents(report: &TransportReport, p: f64, window: (f64, f64)) -> Result<TransportExponents, EvolveError> {
    if !(p > 0.0) {
        return Err(EvolveError::PreconditionViolated("transport exponents need p > 0".into()));
    }
    let m = report.series(p)?;
    let idx: Vec<usize> = (0..report.times.len())
        .filter(|&i| report.times[i] >= window.0 * (1.0 - 1e-12) && report.times[i] <= window.1 * (1.0 + 1e-12))
        .collect();
    if idx.len() < MIN_FIT_SAMPLES {
        return Err(EvolveError::InsufficientSamples { found: idx.len(), needed: MIN_FIT_SAMPLES });
    }
    let slopes: Vec<(f64, f64)> = idx
        .windows(3)
        .map(|w| {
            let t = [report.times[w[0]], report.times[w[1]], report.times[w[2]]];
            let y = [m[w[0]], m[w[1]], m[w[2]]];
            (t[1], triple_slope(&t, &y) * 2.0 / p)
        })
        .collect();
    let beta_plus = slopes.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let beta_minus = slopes.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    Ok(TransportExponents { beta_plus, beta_minus, slopes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub ratios: Vec<(f64, f64)>,
    pub sup: f64,
    /// Log-log slope of the ratio over the later half of the samples.
    pub tail_slope: f64,
    pub violated: bool,
}

pub const GUARD_SLOPE_LIMIT: f64 = 0.05;

/// `⟨u(t)⟩_p / t^{p/2}` for sampled `t ≥ 1`; flags a ratio that keeps growing.
pub fn upper_bound_guard(report: &TransportReport, p: f64) -> Result<GuardReport, EvolveError> {
    let m = report.series(p)?;
    let ratios: Vec<(f64, f64)> = report
        .times
        .iter()
        .zip(m)
        .filter(|(t, _)| **t >= 1.0)
        .map(|(&t, &v)| (t, v / t.powf(p / 2.0)))
        .collect();
    if ratios.len() < 2 {
        return Err(EvolveError::InsufficientSamples { found: ratios.len(), needed: 2 });
    }
    let sup = ratios.iter().map(|r| r.1).fold(0.0, f64::max);
    let tail = &ratios[ratios.len() / 2..];
    let tail = if tail.len() < 2 { &ratios[ratios.len() - 2..] } else { tail };
    let ts: Vec<f64> = tail.iter().map(|r| r.0).collect();
    let vs: Vec<f64> = tail.iter().map(|r| r.1).collect();
    let tail_slope = if ts.first() == ts.last() { 0.0 } else { triple_slope(&ts, &vs) };
    Ok(GuardReport { ratios, sup, tail_slope, violated: tail_slope > GUARD_SLOPE_LIMIT })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationRow {
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// `m3^{(p1−p2)/(p1−p3)} · m1^{(p2−p3)/(p1−p3)}`.
pub fn interpolation_bound(m1: f64, m3: f64, p1: f64, p2: f64, p3: f64) -> f64 {
    if p1 == p3 {
        return m1;
    }
    let a = (p1 - p2) / (p1 - p3);
    let b = (p2 - p3) / (p1 - p3);
    m3.powf(a) * m1.powf(b)
}

/// Pointwise check of `⟨u⟩_{p2} ≤ ⟨u⟩_{p3}^a ⟨u⟩_{p1}^b` with constant 1.
pub fn interpolate_moments(report: &TransportReport, p1: f64, p2: f64, p3: f64) -> Result<(Vec<InterpolationRow>, f64), EvolveError> {
    if !(p1 >= p2 && p2 >= p3 && p3 >= 0.0) {
        return Err(EvolveError::BadOrder(p1, p2, p3));
    }
    let (s1, s2, s3) = (report.series(p1)?, report.series(p2)?, report.series(p3)?);
    let rows: Vec<InterpolationRow> = (0..report.times.len())
        .map(|i| {
            let rhs = interpolation_bound(s1[i], s3[i], p1, p2, p3);
            InterpolationRow { t: report.times[i], lhs: s2[i], rhs, ratio: s2[i] / rhs }
        })
        .collect();
    let worst = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok((rows, worst))
}
