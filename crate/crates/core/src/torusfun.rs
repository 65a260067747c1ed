//! Finite Fourier series on the torus with an analyticity strip.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::numberfield::AdmissibleSubsequence;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TorusError {
    #[error("point with imaginary part {im} lies outside the strip of radius {h}")]
    OutsideStrip { im: f64, h: f64 },
    #[error("invalid coefficients: {0}")]
    BadCoefficients(String),
}

/// Birkhoff sums switch to compensated summation from this length on.
pub const KAHAN_THRESHOLD: u64 = 100_000;

/// `Σ_{|n|≤N} ĉ(n) e^{2πinz}` on `|Im z| < h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTorusFunction {
    coeffs: Vec<Complex64>,
    strip_radius: f64,
}

impl AnalyticTorusFunction {
    /// `coeffs[n + N]` is `ĉ(n)`; the length must be odd.
    pub fn new(coeffs: Vec<Complex64>, strip_radius: f64) -> Result<Self, TorusError> {
        if coeffs.len() % 2 == 0 {
            return Err(TorusError::BadCoefficients(format!("expected odd length, got {}", coeffs.len())));
        }
        if !(strip_radius > 0.0) {
            return Err(TorusError::BadCoefficients(format!("strip radius {strip_radius} must be positive")));
        }
        if coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(TorusError::BadCoefficients("non-finite coefficient".into()));
        }
        Ok(Self { coeffs, strip_radius })
    }

    pub fn constant(c: f64, strip_radius: f64) -> Self {
        Self { coeffs: vec![Complex64::new(c, 0.0)], strip_radius }
    }

    /// From `(n, ĉ(n))` pairs; missing modes are zero.
    pub fn from_modes(modes: &[(i64, Complex64)], strip_radius: f64) -> Result<Self, TorusError> {
        let order = modes.iter().map(|(n, _)| n.unsigned_abs() as usize).max().unwrap_or(0);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); 2 * order + 1];
        for &(n, c) in modes {
            coeffs[(n + order as i64) as usize] += c;
        }
        Self::new(coeffs, strip_radius)
    }

    /// `amplitude · cos(2πθ)`.
    pub fn cosine(amplitude: f64, strip_radius: f64) -> Self {
        let half = Complex64::new(amplitude / 2.0, 0.0);
        Self { coeffs: vec![half, Complex64::new(0.0, 0.0), half], strip_radius }
    }

    /// Coefficients from `M` equispaced samples `f(j/M)`; the Nyquist mode of an even grid is dropped.
    pub fn from_samples(samples: &[Complex64], strip_radius: f64) -> Result<Self, TorusError> {
        let m = samples.len();
        if m == 0 {
            return Err(TorusError::BadCoefficients("no samples".into()));
        }
        let mut buf = samples.to_vec();
        FftPlanner::new().plan_fft_forward(m).process(&mut buf);
        let order = (m - 1) / 2;
        let scale = 1.0 / m as f64;
        let coeffs = (-(order as i64)..=order as i64)
            .map(|n| buf[n.rem_euclid(m as i64) as usize] * scale)
            .collect();
        Self::new(coeffs, strip_radius)
    }

    pub fn from_real_samples(samples: &[f64], strip_radius: f64) -> Result<Self, TorusError> {
        let c: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Self::from_samples(&c, strip_radius)
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() / 2
    }

    pub fn strip_radius(&self) -> f64 {
        self.strip_radius
    }

    pub fn with_strip_radius(mut self, h: f64) -> Self {
        self.strip_radius = h;
        self
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeff(&self, n: i64) -> Complex64 {
        let idx = n + self.order() as i64;
        if idx < 0 || idx as usize >= self.coeffs.len() {
            Complex64::new(0.0, 0.0)
        } else {
            self.coeffs[idx as usize]
        }
    }

    pub fn mean(&self) -> Complex64 {
        self.coeff(0)
    }

    pub fn modes(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        let n0 = self.order() as i64;
        self.coeffs.iter().enumerate().map(move |(i, &c)| (i as i64 - n0, c))
    }

    pub fn is_real(&self, tol: f64) -> bool {
        let scale = self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
        (1..=self.order() as i64).all(|n| (self.coeff(-n) - self.coeff(n).conj()).norm() <= tol * scale)
            && self.coeff(0).im.abs() <= tol * scale
    }

    fn eval_unchecked(&self, z: Complex64) -> Complex64 {
        let w = (Complex64::i() * 2.0 * PI * z).exp();
        let winv = w.inv();
        let n0 = self.order();
        let mut acc = self.coeffs[n0];
        let (mut up, mut down) = (Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
        for n in 1..=n0 {
            up *= w;
            down *= winv;
            acc += self.coeffs[n0 + n] * up + self.coeffs[n0 - n] * down;
        }
        acc
    }

    pub fn evaluate(&self, z: Complex64) -> Result<Complex64, TorusError> {
        if z.im.abs() >= self.strip_radius {
            return Err(TorusError::OutsideStrip { im: z.im, h: self.strip_radius });
        }
        Ok(self.eval_unchecked(z))
    }

    /// Value at a real point, real part for real-on-real functions.
    pub fn eval_real(&self, theta: f64) -> f64 {
        let n0 = self.order();
        let mut acc = self.coeffs[n0].re;
        for n in 1..=n0 {
            let (s, c) = (2.0 * PI * n as f64 * theta).sin_cos();
            let (a, b) = (self.coeffs[n0 + n], self.coeffs[n0 - n]);
            acc += (a.re + b.re) * c - (a.im - b.im) * s;
        }
        acc
    }

    /// Values on `Im z = y` at `x_j = j/m`.
    pub fn samples_at(&self, y: f64, m: usize) -> Vec<Complex64> {
        let n0 = self.order();
        if m < 2 * n0 + 1 {
            return (0..m)
                .map(|j| self.eval_unchecked(Complex64::new(j as f64 / m as f64, y)))
                .collect();
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for (n, c) in self.modes() {
            buf[n.rem_euclid(m as i64) as usize] += c * (-2.0 * PI * n as f64 * y).exp();
        }
        FftPlanner::new().plan_fft_inverse(m).process(&mut buf);
        buf
    }

    /// Upper bound `Σ|ĉ(n)|e^{2π|n|h'}` of the strip sup-norm.
    pub fn coefficient_bound(&self, h: f64) -> f64 {
        self.modes().map(|(n, c)| c.norm() * (2.0 * PI * n.abs() as f64 * h).exp()).sum()
    }

    pub fn strip_norm(&self, h: f64, grid: &StripGrid) -> Result<f64, TorusError> {
        if h > self.strip_radius || h < 0.0 {
            return Err(TorusError::OutsideStrip { im: h, h: self.strip_radius });
        }
        let m = grid.points_per_circle.max(4 * self.order()).max(1);
        let mut best: f64 = 0.0;
        for &y in &grid.imag_offsets {
            if y.abs() > h * (1.0 + 1e-12) {
                return Err(TorusError::OutsideStrip { im: y, h });
            }
            for v in self.samples_at(y, m) {
                best = best.max(v.norm());
            }
        }
        Ok(best)
    }

    /// `f(z + s)`.
    pub fn shifted(&self, s: f64) -> Self {
        let coeffs = self
            .modes()
            .map(|(n, c)| c * Complex64::from_polar(1.0, 2.0 * PI * n as f64 * s))
            .collect();
        Self { coeffs, strip_radius: self.strip_radius }
    }

    pub fn centered(&self) -> Self {
        let mut out = self.clone();
        let n0 = self.order();
        out.coeffs[n0] = Complex64::new(0.0, 0.0);
        out
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { coeffs: self.coeffs.iter().map(|c| c * k).collect(), strip_radius: self.strip_radius }
    }

    pub fn add(&self, other: &Self) -> Self {
        let order = self.order().max(other.order());
        let coeffs = (-(order as i64)..=order as i64).map(|n| self.coeff(n) + other.coeff(n)).collect();
        Self { coeffs, strip_radius: self.strip_radius.min(other.strip_radius) }
    }

    /// Drops modes with `|ĉ(n)| ≤ tol` at the edges.
    pub fn trimmed(&self, tol: f64) -> Self {
        let mut order = self.order();
        while order > 0
            && self.coeff(order as i64).norm() <= tol
            && self.coeff(-(order as i64)).norm() <= tol
        {
            order -= 1;
        }
        let coeffs = (-(order as i64)..=order as i64).map(|n| self.coeff(n)).collect();
        Self { coeffs, strip_radius: self.strip_radius }
    }
}

/// Imaginary offsets and horizontal resolution used to approximate strip sup-norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripGrid {
    pub imag_offsets: Vec<f64>,
    pub points_per_circle: usize,
}

impl StripGrid {
    /// Five offsets `±h', ±h'/2, 0` and at least `4N` points.
    pub fn standard(f: &AnalyticTorusFunction, h: f64) -> Self {
        Self::with_offsets(h, 5, (4 * f.order()).max(64))
    }

    pub fn with_offsets(h: f64, count: usize, points: usize) -> Self {
        let offsets = if count <= 1 {
            vec![0.0]
        } else {
            (0..count).map(|i| -h + 2.0 * h * i as f64 / (count - 1) as f64).collect()
        };
        Self { imag_offsets: offsets, points_per_circle: points }
    }

    pub fn refined(&self) -> Self {
        let h = self.imag_offsets.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        Self::with_offsets(h, 2 * self.imag_offsets.len() - 1, 2 * self.points_per_circle)
    }
}

#[derive(Default)]
struct Kahan {
    sum: Complex64,
    comp: Complex64,
}

impl Kahan {
    fn add(&mut self, x: Complex64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }
}

fn sum_orbit(f: &AnalyticTorusFunction, alpha: f64, z: Complex64, from: i64, count: u64) -> Complex64 {
    let point = |k: i64| {
        let x = (z.re + k as f64 * alpha).rem_euclid(1.0);
        f.eval_unchecked(Complex64::new(x, z.im))
    };
    if count >= KAHAN_THRESHOLD {
        let mut acc = Kahan::default();
        for k in 0..count as i64 {
            acc.add(point(from + k));
        }
        acc.sum
    } else {
        (0..count as i64).map(|k| point(from + k)).sum()
    }
}

/// `Σ_{k=0}^{n-1} f(θ+kα)` for `n > 0`; `Σ_{k=n}^{-1} f(θ+kα)` for `n < 0`.
pub fn birkhoff_sum(f: &AnalyticTorusFunction, n: i64, alpha: f64, theta: Complex64) -> Complex64 {
    match n {
        0 => Complex64::new(0.0, 0.0),
        n if n > 0 => sum_orbit(f, alpha, theta, 0, n as u64),
        n => sum_orbit(f, alpha, theta, n, n.unsigned_abs()),
    }
}

/// Cocycle-consistent sum: equals `birkhoff_sum` for `n ≥ 0` and its negative for `n < 0`,
/// so that `f^{[m+n]}(θ) = f^{[m]}(θ) + f^{[n]}(θ+mα)` for all integers.
pub fn signed_birkhoff_sum(f: &AnalyticTorusFunction, n: i64, alpha: f64, theta: Complex64) -> Complex64 {
    if n >= 0 {
        birkhoff_sum(f, n, alpha, theta)
    } else {
        -birkhoff_sum(f, n, alpha, theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayBound {
    pub constant: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub k: usize,
    pub q: f64,
    pub qbar: f64,
    pub strip: f64,
    pub norm: f64,
    pub bound: f64,
    pub ratio: f64,
    pub monotone: bool,
}

/// `sup |f^{[Q_k]} − Q_k f̂(0)|` on the strips `h_k = h(1 − η k^{-2})`, by direct summation.
pub fn birkhoff_decay_check(
    f: &AnalyticTorusFunction,
    qseq: &AdmissibleSubsequence,
    alpha: f64,
    h: f64,
    eta: f64,
    bound: DecayBound,
) -> Result<Vec<DecayRow>, TorusError> {
    if h > f.strip_radius() {
        return Err(TorusError::OutsideStrip { im: h, h: f.strip_radius() });
    }
    let mean = f.mean();
    let mut rows: Vec<DecayRow> = Vec::new();
    for (k, (&q, &qbar)) in qseq.q.iter().zip(&qseq.qbar).enumerate() {
        let hk = if k == 0 { h } else { h * (1.0 - eta / (k * k) as f64) };
        let grid = StripGrid::standard(f, hk);
        let m = grid.points_per_circle;
        let mut norm: f64 = 0.0;
        for &y in &grid.imag_offsets {
            for j in 0..m {
                let z = Complex64::new(j as f64 / m as f64, y);
                let s = birkhoff_sum(f, q as i64, alpha, z) - mean * q;
                norm = norm.max(s.norm());
            }
        }
        let b = bound.constant * (q.powf(-bound.exponent) + qbar.powf(-1.0 + 1.0 / bound.exponent));
        let monotone = rows.last().map_or(true, |r| norm <= r.norm * (1.0 + 1e-9) + 1e-12);
        rows.push(DecayRow { k, q, qbar, strip: hk, norm, bound: b, ratio: norm / b, monotone });
    }
    Ok(rows)
}
