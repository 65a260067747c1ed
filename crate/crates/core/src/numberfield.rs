//! Continued fractions, denominator bridges, admissible subsequences and scale windows.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumberFieldError {
    #[error("frequency must lie strictly between 0 and 1, got {0}")]
    AlphaOutOfRange(String),
    #[error("cannot parse frequency {0:?}")]
    Parse(String),
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("fractional part at level {level} is below the working-precision floor")]
    NearRational { level: usize },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("admissible construction failed: {0}")]
    ConstructionFailed(String),
}

const GOLDEN: &str = "0.61803398874989484820458683436563811772030917980576286213544862270526046281890245";
const SILVER: &str = "0.41421356237309504880168872420969807856967187537694807317667973799073247846210704";
const BRONZE: &str = "0.30277563773199464655961063373524797312564828692262310635522652811358347414650522";
const EULER_FRAC: &str = "0.71828182845904523536028747135266249775724709369995957496696762772407663035354759";

/// Floor below which a fractional part is treated as zero.
pub const FRACTION_FLOOR: f64 = 1e-15;
/// Relative slack used by every log-space power comparison.
pub const LOG_SLACK: f64 = 1e-12;

/// A frequency held as an exact rational together with the uncertainty of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Frequency {
    exact: BigRational,
    uncertainty: f64,
    decimal: String,
}

impl Frequency {
    pub fn from_f64(alpha: f64) -> Result<Self, NumberFieldError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(NumberFieldError::AlphaOutOfRange(alpha.to_string()));
        }
        let exact = BigRational::from_float(alpha)
            .ok_or_else(|| NumberFieldError::AlphaOutOfRange(alpha.to_string()))?;
        Ok(Self {
            exact,
            uncertainty: 0.5 * f64::EPSILON * alpha,
            decimal: format!("{alpha:?}"),
        })
    }

    /// Accepts `golden`, `silver`, `bronze`, `e` or a plain decimal `0.ddd…`.
    pub fn parse(text: &str) -> Result<Self, NumberFieldError> {
        let t = text.trim();
        let digits = match t.to_ascii_lowercase().as_str() {
            "golden" => GOLDEN.to_string(),
            "silver" => SILVER.to_string(),
            "bronze" => BRONZE.to_string(),
            "e" => EULER_FRAC.to_string(),
            _ => t.to_string(),
        };
        let (int_part, frac_part) = digits
            .split_once('.')
            .ok_or_else(|| NumberFieldError::Parse(text.to_string()))?;
        if frac_part.is_empty()
            || !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return Err(NumberFieldError::Parse(text.to_string()));
        }
        let numer: BigInt = format!("{int_part}{frac_part}")
            .parse()
            .map_err(|_| NumberFieldError::Parse(text.to_string()))?;
        let denom = num_traits::pow(BigInt::from(10u32), frac_part.len());
        let exact = BigRational::new(numer, denom);
        if exact <= BigRational::zero() || exact >= BigRational::one() {
            return Err(NumberFieldError::AlphaOutOfRange(text.to_string()));
        }
        let uncertainty = 0.5 * 10f64.powi(-(frac_part.len().min(300) as i32));
        Ok(Self {
            exact,
            uncertainty,
            decimal: digits,
        })
    }

    pub fn value(&self) -> f64 {
        self.exact.to_f64().unwrap_or(f64::NAN)
    }

    pub fn decimal(&self) -> &str {
        &self.decimal
    }

    pub fn uncertainty(&self) -> f64 {
        self.uncertainty
    }

    pub fn exact(&self) -> &BigRational {
        &self.exact
    }
}

fn ln_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 1000 {
        return x.to_f64().map(f64::ln).unwrap_or(f64::INFINITY);
    }
    let shift = bits - 64;
    let top = (x >> shift).to_f64().unwrap_or(f64::INFINITY);
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

/// `x ≤ y^a` evaluated on logarithms.
pub fn pow_le(ln_x: f64, a: f64, ln_y: f64) -> bool {
    let rhs = a * ln_y;
    ln_x <= rhs + LOG_SLACK * rhs.abs().max(1.0)
}

/// `x < y^a`, the negation of `y^a ≤ x`.
pub fn pow_lt(ln_x: f64, a: f64, ln_y: f64) -> bool {
    let lhs = a * ln_y;
    !(lhs <= ln_x + LOG_SLACK * lhs.abs().max(1.0))
}

/// `x^a ≤ y` evaluated on logarithms.
fn pow_ge(ln_x: f64, a: f64, ln_y: f64) -> bool {
    let lhs = a * ln_x;
    lhs <= ln_y + LOG_SLACK * lhs.abs().max(1.0)
}

/// Continued-fraction data. `q[k]` for `0 ≤ k < depth`, `partial_quotients[k-1] = a_k` for
/// `1 ≤ k ≤ depth`; the last quotient only feeds `next_denominator`.
#[derive(Debug, Clone)]
pub struct ContinuedFraction {
    pub alpha: f64,
    pub frequency: Frequency,
    pub partial_quotients: Vec<BigUint>,
    pub p: Vec<BigUint>,
    pub q: Vec<BigUint>,
    pub next_denominator: Option<BigUint>,
    pub depth: usize,
    ln_q: Vec<f64>,
    ln_next: Option<f64>,
}

pub fn expand_cf(
    alpha: f64,
    depth: usize,
    denom_cap: impl Into<BigUint>,
) -> Result<ContinuedFraction, NumberFieldError> {
    ContinuedFraction::expand(&Frequency::from_f64(alpha)?, depth, denom_cap)
}

impl ContinuedFraction {
    pub fn expand(
        freq: &Frequency,
        depth: usize,
        denom_cap: impl Into<BigUint>,
    ) -> Result<Self, NumberFieldError> {
        if depth == 0 {
            return Err(NumberFieldError::ZeroDepth);
        }
        let cap: BigUint = denom_cap.into();
        let mut num = freq.exact.numer().to_biguint().unwrap_or_default();
        let mut den = freq.exact.denom().to_biguint().unwrap_or_default();
        let mut a = Vec::new();
        let mut p = vec![BigUint::zero()];
        let mut q = vec![BigUint::one()];
        let (mut p_prev, mut q_prev) = (BigUint::one(), BigUint::zero());
        let mut next = None;
        for k in 1..=depth {
            // fractional part alpha_{k-1} = num/den
            let frac = BigRational::new(num.clone().into(), den.clone().into())
                .to_f64()
                .unwrap_or(0.0);
            let qk1 = q.last().unwrap().to_f64().unwrap_or(f64::INFINITY);
            let qk2 = q_prev.to_f64().unwrap_or(f64::INFINITY);
            let spread = freq.uncertainty * (qk1 + frac * qk2).powi(2);
            if num.is_zero() || frac < FRACTION_FLOOR.max(4.0 * spread) {
                return Err(NumberFieldError::NearRational { level: k });
            }
            let (ak, rem) = den.div_rem(&num);
            den = std::mem::replace(&mut num, rem);
            let pk = &ak * p.last().unwrap() + &p_prev;
            let qk = &ak * q.last().unwrap() + &q_prev;
            a.push(ak);
            if k == depth || qk > cap {
                next = Some(qk);
                break;
            }
            p_prev = p.last().unwrap().clone();
            q_prev = q.last().unwrap().clone();
            p.push(pk);
            q.push(qk);
        }
        let ln_q = q.iter().map(ln_big).collect();
        let ln_next = next.as_ref().map(ln_big);
        Ok(Self {
            alpha: freq.value(),
            frequency: freq.clone(),
            partial_quotients: a,
            depth: q.len(),
            p,
            q,
            next_denominator: next,
            ln_q,
            ln_next,
        })
    }

    pub fn ln_q(&self, k: usize) -> Option<f64> {
        if k < self.depth {
            Some(self.ln_q[k])
        } else if k == self.depth {
            self.ln_next
        } else {
            None
        }
    }

    /// `q_k` for `k ≤ depth`, including the denominator past the end.
    pub fn denominator(&self, k: usize) -> Option<&BigUint> {
        if k < self.depth {
            Some(&self.q[k])
        } else if k == self.depth {
            self.next_denominator.as_ref()
        } else {
            None
        }
    }

    pub fn q_f64(&self, k: usize) -> f64 {
        self.q[k].to_f64().unwrap_or(f64::INFINITY)
    }

    /// Distance from `q_k α` to the nearest integer, computed exactly then rounded.
    pub fn q_alpha_distance(&self, k: usize) -> f64 {
        let qa = self.frequency.exact.clone() * BigRational::from_integer(self.q[k].clone().into());
        let frac = &qa - qa.floor();
        let d = frac.clone().min(BigRational::one() - frac);
        d.to_f64().unwrap_or(0.0)
    }
}

/// Literal bridge predicate, valid for any `l ≤ n` with `q_n` computed.
fn bridge_raw(cf: &ContinuedFraction, l: usize, n: usize, a: f64, b: f64, c: f64) -> bool {
    let lq = |k| cf.ln_q(k).unwrap_or(f64::INFINITY);
    let chain = (l..n).all(|i| pow_le(lq(i + 1), a, lq(i)));
    chain && pow_le(lq(n), c, lq(l)) && pow_ge(lq(l), b, lq(n))
}

pub fn is_cd_bridge(
    cf: &ContinuedFraction,
    l: usize,
    n: usize,
    a: f64,
    b: f64,
    c: f64,
) -> Result<bool, NumberFieldError> {
    if !(1 <= l && l < n && n < cf.depth) {
        return Err(NumberFieldError::IndexOutOfRange(format!(
            "need 1 <= l < n < {}, got l={l}, n={n}",
            cf.depth
        )));
    }
    Ok(bridge_raw(cf, l, n, a, b, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl AdmissibleParams {
    /// `(A, A³, A²¹, A²⁰)`
    pub fn primary(a: f64) -> Self {
        Self { a, b: a.powi(3), c: a.powi(21), d: a.powi(20) }
    }

    /// `(A, A, A²², A²¹)`
    pub fn secondary(a: f64) -> Self {
        Self { a, b: a, c: a.powi(22), d: a.powi(21) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// Larger denominators would be needed than the expansion holds.
    DepthExhausted,
    /// No later denominator can satisfy the predicates, even after backtracking.
    NoContinuation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibleSubsequence {
    pub indices: Vec<usize>,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    #[serde(rename = "Qbar")]
    pub qbar: Vec<f64>,
    pub params: AdmissibleParams,
    pub termination: Termination,
}

impl AdmissibleSubsequence {
    pub fn from_indices(
        cf: &ContinuedFraction,
        indices: Vec<usize>,
        params: AdmissibleParams,
    ) -> Result<Self, NumberFieldError> {
        let mut q = Vec::with_capacity(indices.len());
        let mut qbar = Vec::with_capacity(indices.len());
        for &n in &indices {
            let (Some(x), Some(y)) = (cf.denominator(n), cf.denominator(n + 1)) else {
                return Err(NumberFieldError::IndexOutOfRange(format!(
                    "index {n} needs q_{} but depth is {}",
                    n + 1,
                    cf.depth
                )));
            };
            q.push(x.to_f64().unwrap_or(f64::INFINITY));
            qbar.push(y.to_f64().unwrap_or(f64::INFINITY));
        }
        Ok(Self { indices, q, qbar, params, termination: Termination::DepthExhausted })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Index `n_0` carrying `Q_0 = 1`: the last index with `q = 1`.
pub fn base_index(cf: &ContinuedFraction) -> usize {
    if cf.depth > 1 && cf.q[1].is_one() {
        1
    } else {
        0
    }
}

struct Checker<'a> {
    cf: &'a ContinuedFraction,
    p: AdmissibleParams,
}

impl Checker<'_> {
    fn lq(&self, k: usize) -> f64 {
        self.cf.ln_q(k).unwrap_or(f64::INFINITY)
    }

    fn jump(&self, n: usize) -> bool {
        !pow_le(self.lq(n + 1), self.p.a, self.lq(n))
    }

    fn bridge(&self, l: usize, n: usize) -> bool {
        bridge_raw(self.cf, l, n, self.p.a, self.p.b, self.p.c)
    }

    fn d_ok(&self, prev: usize, n: usize) -> bool {
        pow_le(self.lq(n), self.p.d, self.lq(prev + 1))
    }

    /// Condition at position `k` of `idx`; the forward bridge is skipped for the last entry.
    fn level_ok(&self, idx: &[usize], k: usize) -> bool {
        if !self.d_ok(idx[k - 1], idx[k]) {
            return false;
        }
        if self.jump(idx[k]) {
            return true;
        }
        let back = self.bridge(idx[k - 1] + 1, idx[k]);
        let fwd = k + 1 >= idx.len() || self.bridge(idx[k], idx[k + 1]);
        back && fwd
    }
}

pub fn is_admissible(
    cf: &ContinuedFraction,
    sub: &AdmissibleSubsequence,
) -> Result<bool, NumberFieldError> {
    for &n in &sub.indices {
        if cf.denominator(n + 1).is_none() {
            return Err(NumberFieldError::IndexOutOfRange(format!(
                "index {n} needs q_{} but depth is {}",
                n + 1,
                cf.depth
            )));
        }
    }
    let Some(&first) = sub.indices.first() else {
        return Ok(false);
    };
    if !cf.q[first].is_one() {
        return Ok(false);
    }
    if sub.indices.windows(2).any(|w| w[1] <= w[0] || cf.q[w[1]] <= cf.q[w[0]]) {
        return Ok(false);
    }
    let ch = Checker { cf, p: sub.params };
    Ok((1..sub.indices.len()).all(|k| ch.level_ok(&sub.indices, k)))
}

#[derive(Clone, Copy, PartialEq)]
enum Fit {
    Ok,
    TooSmall,
    Impossible,
}

fn candidate(ch: &Checker, idx: &[usize], j: usize) -> Fit {
    let k = idx.len() - 1;
    let last = idx[k];
    if ch.cf.denominator(j + 1).is_none() {
        return Fit::Impossible;
    }
    if !ch.d_ok(last, j) {
        return Fit::Impossible;
    }
    let lq = |i| ch.lq(i);
    let below = |l: usize, n: usize| !pow_ge(lq(l), ch.p.b, lq(n));
    // level k now sees its forward neighbour
    let mut small = false;
    if k >= 1 && !ch.jump(last) {
        if !ch.bridge(idx[k - 1] + 1, last) {
            return Fit::Impossible;
        }
        if !ch.bridge(last, j) {
            if below(last, j) && bridge_raw(ch.cf, last, j, ch.p.a, 0.0, ch.p.c) {
                small = true;
            } else {
                return Fit::Impossible;
            }
        }
    }
    if !ch.jump(j) && !ch.bridge(last + 1, j) {
        if below(last + 1, j) && bridge_raw(ch.cf, last + 1, j, ch.p.a, 0.0, ch.p.c) {
            small = true;
        } else {
            return Fit::Impossible;
        }
    }
    if small {
        Fit::TooSmall
    } else {
        Fit::Ok
    }
}

fn extend(ch: &Checker, idx: &[usize], start: usize) -> (Option<usize>, bool) {
    let mut exhausted = true;
    for j in start..ch.cf.depth {
        if ch.cf.q[j] <= ch.cf.q[*idx.last().unwrap()] {
            continue;
        }
        match candidate(ch, idx, j) {
            Fit::Ok => return (Some(j), false),
            Fit::TooSmall => exhausted = true,
            Fit::Impossible => exhausted = false,
        }
    }
    (None, exhausted)
}

/// Greedy forward construction with one-step backtracking, re-verified before return.
pub fn construct_admissible(
    cf: &ContinuedFraction,
    a: f64,
) -> Result<AdmissibleSubsequence, NumberFieldError> {
    if !(a > 1.0) {
        return Err(NumberFieldError::ConstructionFailed(format!("exponent must exceed 1, got {a}")));
    }
    let params = AdmissibleParams::primary(a);
    let ch = Checker { cf, p: params };
    let base = base_index(cf);
    if cf.denominator(base + 1).is_none() {
        let mut s = AdmissibleSubsequence::from_indices(cf, vec![], params)?;
        s.termination = Termination::DepthExhausted;
        return Ok(s);
    }
    let mut idx = vec![base];
    let termination = loop {
        let last = *idx.last().unwrap();
        let (found, exhausted) = extend(&ch, &idx, last + 1);
        if let Some(j) = found {
            idx.push(j);
            continue;
        }
        if exhausted || idx.len() < 2 {
            break if exhausted { Termination::DepthExhausted } else { Termination::NoContinuation };
        }
        // one step back: try a later choice for the current last entry
        let dropped = idx.pop().unwrap();
        let mut advanced = false;
        let mut from = dropped + 1;
        while let (Some(alt), _) = extend(&ch, &idx, from) {
            idx.push(alt);
            let (next, ex) = extend(&ch, &idx, alt + 1);
            if next.is_some() || ex {
                advanced = true;
                break;
            }
            idx.pop();
            from = alt + 1;
        }
        if !advanced {
            idx.push(dropped);
            break Termination::NoContinuation;
        }
    };
    let mut sub = AdmissibleSubsequence::from_indices(cf, idx, params)?;
    sub.termination = termination;
    if !is_admissible(cf, &sub)? {
        return Err(NumberFieldError::ConstructionFailed(format!(
            "greedy output {:?} fails verification",
            sub.indices
        )));
    }
    Ok(sub)
}

/// Secondary scales `R_k`: the largest denominator in `[Q_k, Q_k^A)`.
pub fn derive_secondary(
    cf: &ContinuedFraction,
    qseq: &AdmissibleSubsequence,
    a: f64,
) -> Result<AdmissibleSubsequence, NumberFieldError> {
    if qseq.is_empty() {
        return AdmissibleSubsequence::from_indices(cf, vec![], AdmissibleParams::secondary(a));
    }
    let mut idx = vec![qseq.indices[0]];
    let mut truncated = false;
    for &n in &qseq.indices[1..] {
        let ln_qk = cf.ln_q(n).ok_or_else(|| {
            NumberFieldError::IndexOutOfRange(format!("index {n} beyond depth {}", cf.depth))
        })?;
        let mut r = n;
        let mut j = n + 1;
        loop {
            match cf.ln_q(j) {
                Some(l) if pow_lt(l, a, ln_qk) => {
                    r = j;
                    j += 1;
                }
                Some(_) => break,
                None => {
                    truncated = true;
                    break;
                }
            }
        }
        if truncated || cf.denominator(r + 1).is_none() {
            truncated = true;
            break;
        }
        idx.push(r);
    }
    let mut out = AdmissibleSubsequence::from_indices(cf, idx, AdmissibleParams::secondary(a))?;
    out.termination = if truncated { Termination::DepthExhausted } else { qseq.termination };
    Ok(out)
}

/// Checks `Q_k^A ≤ R_k^A ≤ Q_{k+1}` and `R̄_k ≥ Q_k^A` wherever the data are present.
pub fn secondary_conclusion_holds(
    cf: &ContinuedFraction,
    qseq: &AdmissibleSubsequence,
    rseq: &AdmissibleSubsequence,
    a: f64,
) -> bool {
    let lq = |k: usize| cf.ln_q(k).unwrap_or(f64::INFINITY);
    for k in 1..rseq.len() {
        let (qn, rn) = (qseq.indices[k], rseq.indices[k]);
        if !(pow_le(lq(qn), 1.0, lq(rn))) {
            return false;
        }
        if let Some(&qnext) = qseq.indices.get(k + 1) {
            if !pow_ge(lq(rn), a, lq(qnext)) {
                return false;
            }
        }
        if !pow_ge(lq(qn), a, lq(rn + 1)) {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleWindow {
    pub l: usize,
    pub ln_lo: f64,
    pub ln_hi: f64,
    pub empty: bool,
    pub tau0: f64,
    pub tau1: f64,
    pub nu: f64,
}

impl ScaleWindow {
    pub fn lo(&self) -> f64 {
        self.ln_lo.exp()
    }

    pub fn hi(&self) -> f64 {
        self.ln_hi.exp()
    }

    pub fn contains(&self, x: f64) -> bool {
        !self.empty && x > 0.0 && self.ln_lo <= x.ln() && x.ln() <= self.ln_hi
    }
}

/// Windows `[Q_l^{8τ0}, min(Q_{l+1}^{τ1/16}, Q̄_{l+1}^{ν/16})]` for `l ≥ 1`; the base scale
/// `Q_0 = 1` carries no window.
pub fn scale_windows(qseq: &AdmissibleSubsequence, tau0: f64, tau1: f64, nu: f64) -> Vec<ScaleWindow> {
    (1..qseq.len().saturating_sub(1))
        .map(|l| {
            let ln_lo = 8.0 * tau0 * qseq.q[l].ln();
            let ln_hi = (tau1 / 16.0 * qseq.q[l + 1].ln()).min(nu / 16.0 * qseq.qbar[l + 1].ln());
            ScaleWindow { l, ln_lo, ln_hi, empty: ln_lo >= ln_hi, tau0, tau1, nu }
        })
        .collect()
}
