//! Real functions sampled on the uniform torus grid `θ_j = j/M`.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Signed frequency of FFT bin `j` on a grid of size `m`.
pub fn frequency(j: usize, m: usize) -> i64 {
    if j <= m / 2 {
        j as i64
    } else {
        j as i64 - m as i64
    }
}

/// Normalized coefficients `f̂(k)` in FFT bin order.
pub fn coefficients(f: &[f64]) -> Vec<Complex64> {
    let m = f.len();
    let mut buf: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let inv = 1.0 / m as f64;
    buf.iter_mut().for_each(|c| *c *= inv);
    buf
}

/// Inverse of [`coefficients`], keeping the real part.
pub fn from_coefficients(c: &[Complex64]) -> Vec<f64> {
    let mut buf = c.to_vec();
    FftPlanner::new().plan_fft_inverse(c.len()).process(&mut buf);
    buf.iter().map(|z| z.re).collect()
}

/// Applies `f̂(k) ↦ mult(k) f̂(k)`; the Nyquist bin of an even grid gets the real part of
/// the multiplier averaged over `±M/2`.
fn multiply(f: &[f64], mult: impl Fn(i64) -> Complex64) -> Vec<f64> {
    let m = f.len();
    let mut c = coefficients(f);
    for (j, cj) in c.iter_mut().enumerate() {
        let k = frequency(j, m);
        if m % 2 == 0 && j == m / 2 {
            let avg = (mult(k) + mult(-k)) / 2.0;
            *cj *= avg;
        } else {
            *cj *= mult(k);
        }
    }
    from_coefficients(&c)
}

/// `θ ↦ f(θ + s)` by trigonometric interpolation.
pub fn shift(f: &[f64], s: f64) -> Vec<f64> {
    multiply(f, |k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 * s))
}

/// `Σ_{k=0}^{n-1} f(θ + kα)` for the trigonometric interpolant of `f`.
pub fn birkhoff(f: &[f64], n: u64, alpha: f64) -> Vec<f64> {
    multiply(f, |k| {
        if k == 0 {
            return Complex64::new(n as f64, 0.0);
        }
        let step = Complex64::from_polar(1.0, 2.0 * PI * k as f64 * alpha);
        let denom = step - 1.0;
        if denom.norm() < 1e-14 {
            Complex64::new(n as f64, 0.0)
        } else {
            (Complex64::from_polar(1.0, 2.0 * PI * k as f64 * (n as f64 * alpha).rem_euclid(1.0)) - 1.0) / denom
        }
    })
}

/// Zeroes every nonconstant coefficient below `floor·max|f|`.
pub fn denoise(f: &[f64], floor: f64) -> Vec<f64> {
    let cut = floor * sup(f);
    let mut c = coefficients(f);
    for z in c.iter_mut().skip(1) {
        if z.norm() < cut {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    from_coefficients(&c)
}

/// Resamples the trigonometric interpolant onto a grid of size `m`.
pub fn resample(f: &[f64], m: usize) -> Vec<f64> {
    let n = f.len();
    if n == m {
        return f.to_vec();
    }
    let c = coefficients(f);
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for (j, &cj) in c.iter().enumerate() {
        let k = frequency(j, n);
        if n % 2 == 0 && j == n / 2 {
            // split the Nyquist term symmetrically
            if (k.unsigned_abs() as usize) < m.div_ceil(2) {
                out[k as usize] += cj / 2.0;
                out[m - k as usize] += cj / 2.0;
            }
            continue;
        }
        if 2 * k.unsigned_abs() as usize >= m {
            continue;
        }
        let idx = if k >= 0 { k as usize } else { (m as i64 + k) as usize };
        out[idx] += cj;
    }
    from_coefficients(&out)
}

pub fn mean(f: &[f64]) -> f64 {
    f.iter().sum::<f64>() / f.len() as f64
}

pub fn sup(f: &[f64]) -> f64 {
    f.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest relative magnitude among the top quarter of frequencies; a resolution check.
pub fn tail_fraction(f: &[f64]) -> f64 {
    let m = f.len();
    let c = coefficients(f);
    let total: f64 = c.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if total == 0.0 {
        return 0.0;
    }
    let tail = c
        .iter()
        .enumerate()
        .filter(|(j, _)| 4 * frequency(*j, m).unsigned_abs() as usize >= m)
        .map(|(_, z)| z.norm())
        .fold(0.0, f64::max);
    tail / total
}

pub fn grid_points(m: usize) -> Vec<f64> {
    (0..m).map(|j| j as f64 / m as f64).collect()
}
