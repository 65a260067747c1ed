use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    Free,
    AlmostMathieu,
    Fourier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `(1 − x²)³` on `psi`.
    C2,
    /// exp-bump on `psi`.
    Smooth,
    Indicator,
    /// Product weight over nonresonant reducible intervals inside `chi`.
    Omega,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Times {
    /// `t0:t1` or `t0:t1:count`, log-spaced.
    Range(String),
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Self::One(x) => vec![*x],
            Self::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub potential: PotentialKind,
    pub lambda: f64,
    /// `[k, re, im]` triples of `V(θ) = Σ c_k e^{2πikθ}`.
    pub fourier: Vec<[f64; 3]>,
    pub strip: f64,
    pub alpha: String,
    pub theta: f64,
    pub depth: usize,
    pub e_min: f64,
    pub e_max: f64,
    pub e_count: usize,
    pub rotation_iterations: usize,
    pub lyapunov_iterations: usize,
    pub energy: f64,
    pub max_level: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub nu: f64,
    pub admissibility: f64,
    pub eta: f64,
    pub tol: f64,
    pub t: Times,
    pub t_count: usize,
    pub p: OneOrMany,
    pub chi: [f64; 2],
    pub weight: WeightKind,
    pub psi: [f64; 2],
    pub k_max: i64,
    pub n_cap: i64,
    pub omega_count: usize,
    /// Quadrature tolerance; unset means 1e-6 for the free source and 1e-4 for reduced cocycles.
    pub quad_rel_tol: Option<f64>,
    /// Quadrature node budget; unset means 2^17 for the free source and 2^13 for reduced cocycles.
    pub quad_max_nodes: Option<usize>,
    pub output: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            potential: PotentialKind::AlmostMathieu,
            lambda: 0.01,
            fourier: Vec::new(),
            strip: 1.0,
            alpha: "golden".into(),
            theta: 0.0,
            depth: 30,
            e_min: -3.0,
            e_max: 3.0,
            e_count: 201,
            rotation_iterations: 100_000,
            lyapunov_iterations: 10_000,
            energy: 0.5,
            max_level: 3,
            epsilon: 0.1,
            tau: 2.0,
            tau0: 2.0,
            tau1: 2.0,
            nu: 0.4,
            admissibility: 1.1,
            eta: 0.1,
            tol: 1e-8,
            t: Times::Range("1:100".into()),
            t_count: 21,
            p: OneOrMany::Many(vec![2.0]),
            chi: [-1.8, 1.8],
            weight: WeightKind::C2,
            psi: [-1.2, 1.6],
            k_max: 256,
            n_cap: 64,
            omega_count: 400,
            quad_rel_tol: None,
            quad_max_nodes: None,
            output: None,
            seed: 0,
        }
    }
}

/// Keys whose command-line values are taken verbatim rather than parsed as JSON.
const TEXT_KEYS: &[&str] = &["alpha", "potential", "weight", "output"];

fn log_spaced(t0: f64, t1: f64, count: usize) -> Vec<f64> {
    qp_transport::evolve::log_times(t0, t1, count)
}

impl RunConfig {
    /// Reads the optional config file and applies `--key value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, String> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
                match serde_json::from_str::<Value>(&text).map_err(|e| format!("{}: {e}", p.display()))? {
                    Value::Object(m) => m,
                    _ => return Err(format!("{}: top level must be an object", p.display())),
                }
            }
            None => Map::new(),
        };
        let mut it = overrides.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| format!("expected --key, found {flag:?}"))?
                .replace('-', "_");
            let key = if key == "out" { "output".to_string() } else { key };
            let raw = it.next().ok_or_else(|| format!("--{key} needs a value"))?;
            let value = if key == "t" {
                match serde_json::from_str::<Value>(raw) {
                    Ok(list @ Value::Array(_)) => list,
                    _ => Value::String(raw.clone()),
                }
            } else if TEXT_KEYS.contains(&key.as_str()) {
                Value::String(raw.clone())
            } else {
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()))
            };
            doc.insert(key, value);
        }
        if let Some(Value::Number(n)) = doc.get("alpha") {
            let s = n.to_string();
            doc.insert("alpha".into(), Value::String(s));
        }
        let cfg: Self = serde_json::from_value(Value::Object(doc)).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn times(&self) -> Result<Vec<f64>, String> {
        let times = match &self.t {
            Times::List(v) => v.clone(),
            Times::Range(s) => {
                let parts: Vec<&str> = s.split(':').collect();
                let num = |x: &str| x.trim().parse::<f64>().map_err(|_| format!("bad time range {s:?}"));
                match parts.as_slice() {
                    [a] => vec![num(a)?],
                    [a, b] => log_spaced(num(a)?, num(b)?, self.t_count),
                    [a, b, c] => {
                        let count = c.trim().parse::<usize>().map_err(|_| format!("bad time count in {s:?}"))?;
                        log_spaced(num(a)?, num(b)?, count)
                    }
                    _ => return Err(format!("bad time range {s:?}")),
                }
            }
        };
        if times.is_empty() || times.iter().any(|t| !(t.is_finite() && *t > 0.0)) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(format!("times must be positive and increasing, got {:?}", self.t));
        }
        Ok(times)
    }

    fn validate(&self) -> Result<(), String> {
        let finite = |name: &str, x: f64| if x.is_finite() { Ok(()) } else { Err(format!("{name} must be finite")) };
        let positive = |name: &str, x: f64| if x > 0.0 && x.is_finite() { Ok(()) } else { Err(format!("{name} must be positive, got {x}")) };
        finite("lambda", self.lambda)?;
        finite("theta", self.theta)?;
        finite("energy", self.energy)?;
        positive("strip", self.strip)?;
        if self.potential == PotentialKind::Fourier && self.fourier.is_empty() {
            return Err("potential \"fourier\" needs a nonempty fourier list".into());
        }
        for c in &self.fourier {
            if c.iter().any(|x| !x.is_finite()) || c[0].fract() != 0.0 {
                return Err(format!("fourier entry {c:?} must be [integer k, re, im]"));
            }
        }
        qp_transport::numberfield::Frequency::parse(&self.alpha).map_err(|e| format!("alpha: {e}"))?;
        if !(1..=10_000).contains(&self.depth) {
            return Err(format!("depth must be in 1..=10000, got {}", self.depth));
        }
        if !(self.e_min < self.e_max) || !self.e_min.is_finite() || !self.e_max.is_finite() {
            return Err("need e_min < e_max".into());
        }
        if self.e_count < 2 {
            return Err("e_count must be at least 2".into());
        }
        if self.rotation_iterations == 0 || self.lyapunov_iterations == 0 {
            return Err("iteration counts must be positive".into());
        }
        if self.max_level == 0 {
            return Err("max_level must be at least 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err("epsilon must be nonnegative".into());
        }
        for (name, x) in [("tau", self.tau), ("tau0", self.tau0), ("tau1", self.tau1), ("nu", self.nu)] {
            positive(name, x)?;
        }
        if !(self.admissibility > 1.0 && self.admissibility.is_finite()) {
            return Err("admissibility must exceed 1".into());
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err("eta must lie in (0, 1)".into());
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err("tol must lie in (0, 1)".into());
        }
        if self.t_count == 0 {
            return Err("t_count must be positive".into());
        }
        self.times()?;
        let ps = self.p.values();
        if ps.is_empty() || ps.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err("p must be a nonempty list of nonnegative numbers".into());
        }
        for (name, iv) in [("chi", self.chi), ("psi", self.psi)] {
            if !(iv[0] < iv[1]) || !iv[0].is_finite() || !iv[1].is_finite() {
                return Err(format!("{name} must be an interval [lo, hi] with lo < hi"));
            }
        }
        if !(1..=100_000).contains(&self.k_max) {
            return Err("k_max must be in 1..=100000".into());
        }
        if !(2..=1_000_000).contains(&self.omega_count) {
            return Err("omega_count must be in 2..=1000000".into());
        }
        if let Some(tol) = self.quad_rel_tol {
            if !(tol > 0.0 && tol < 1.0) {
                return Err("quad_rel_tol must lie in (0, 1)".into());
            }
        }
        if let Some(n) = self.quad_max_nodes {
            if !(64..=1 << 24).contains(&n) {
                return Err("quad_max_nodes must be in 64..=16777216".into());
            }
        }
        if !(0..=10_000).contains(&self.n_cap) {
            return Err("n_cap must be in 0..=10000".into());
        }
        Ok(())
    }
}
