//! Risk functionals on empirical distributions.
//!
//! A sample is treated as the exact discrete law with uniform weights, so
//! VaR is an order statistic and CVaR is the exact Rockafellar–Uryasev
//! minimum (fractional weight on the VaR atom), not a top-k average.

use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

/// Absolute tolerance for dual-density membership.
pub const DENSITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("alpha must lie in {range}, got {alpha}")]
    BadAlpha { alpha: f64, range: &'static str },
    #[error("order q must be >= 1, got {0}")]
    BadOrder(f64),
    #[error("parameter {name} must be nonnegative and finite, got {value}")]
    BadParameter { name: &'static str, value: f64 },
    #[error("sample must be nonempty")]
    EmptySample,
    #[error("sample contains non-finite values")]
    NonFinite,
    #[error("paired sample lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("risk kind {0} cannot be evaluated on this input")]
    KindMismatch(&'static str),
}

pub type Result<T> = std::result::Result<T, RiskError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RiskSpecDoc")]
pub enum RiskSpec {
    Mean,
    Var { alpha: f64 },
    Cvar { alpha: f64 },
    #[serde(rename = "md")]
    MeanDeviation { q: f64, beta: f64 },
    #[serde(rename = "mus")]
    MeanUpperSemideviation { q: f64, beta: f64 },
    MeanCondVar { nu: f64 },
}

// Wire form. `Mean {}` instead of a unit variant so stray keys next to
// `"kind": "mean"` are rejected too.
#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RiskSpecDoc {
    Mean {},
    Var { alpha: f64 },
    Cvar { alpha: f64 },
    Md { q: f64, beta: f64 },
    Mus { q: f64, beta: f64 },
    MeanCondVar { nu: f64 },
}

impl TryFrom<RiskSpecDoc> for RiskSpec {
    type Error = RiskError;

    fn try_from(d: RiskSpecDoc) -> Result<Self> {
        let spec = match d {
            RiskSpecDoc::Mean {} => RiskSpec::Mean,
            RiskSpecDoc::Var { alpha } => RiskSpec::Var { alpha },
            RiskSpecDoc::Cvar { alpha } => RiskSpec::Cvar { alpha },
            RiskSpecDoc::Md { q, beta } => RiskSpec::MeanDeviation { q, beta },
            RiskSpecDoc::Mus { q, beta } => RiskSpec::MeanUpperSemideviation { q, beta },
            RiskSpecDoc::MeanCondVar { nu } => RiskSpec::MeanCondVar { nu },
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl RiskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RiskSpec::Mean => "mean",
            RiskSpec::Var { .. } => "var",
            RiskSpec::Cvar { .. } => "cvar",
            RiskSpec::MeanDeviation { .. } => "md",
            RiskSpec::MeanUpperSemideviation { .. } => "mus",
            RiskSpec::MeanCondVar { .. } => "mean_cond_var",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskSpec::Mean => Ok(()),
            RiskSpec::Var { alpha } => check_alpha_open(alpha),
            RiskSpec::Cvar { alpha } => check_alpha_closed(alpha),
            RiskSpec::MeanDeviation { q, beta } | RiskSpec::MeanUpperSemideviation { q, beta } => {
                check_order(q)?;
                check_nonneg("beta", beta)
            }
            RiskSpec::MeanCondVar { nu } => check_nonneg("nu", nu),
        }
    }

    /// True when the parameters fall in the range where the functional is
    /// coherent: MD needs `q = 1, β ≤ 1/2`, MUS needs `β ≤ 1`.
    pub fn is_coherent(&self) -> bool {
        if self.validate().is_err() {
            return false;
        }
        match *self {
            RiskSpec::Mean | RiskSpec::Cvar { .. } => true,
            RiskSpec::Var { .. } | RiskSpec::MeanCondVar { .. } => false,
            RiskSpec::MeanDeviation { q, beta } => q == 1.0 && beta <= 0.5,
            RiskSpec::MeanUpperSemideviation { beta, .. } => beta <= 1.0,
        }
    }
}

fn check_alpha_open(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(RiskError::BadAlpha {
            alpha,
            range: "(0, 1)",
        })
    }
}

fn check_alpha_closed(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(RiskError::BadAlpha {
            alpha,
            range: "(0, 1]",
        })
    }
}

fn check_order(q: f64) -> Result<()> {
    if q >= 1.0 && q.is_finite() {
        Ok(())
    } else {
        Err(RiskError::BadOrder(q))
    }
}

fn check_nonneg(name: &'static str, value: f64) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(RiskError::BadParameter { name, value })
    }
}

/// Uniformly weighted sample with a lazily sorted view.
#[derive(Debug, Clone)]
pub struct EmpiricalSample {
    values: Vec<f64>,
    sorted: OnceLock<Vec<f64>>,
}

impl EmpiricalSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(RiskError::EmptySample);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RiskError::NonFinite);
        }
        Ok(Self {
            values,
            sorted: OnceLock::new(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sorted(&self) -> &[f64] {
        self.sorted.get_or_init(|| {
            let mut v = self.values.clone();
            v.sort_by(f64::total_cmp);
            v
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Cost realizations paired with their one-step conditional means.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    costs: Vec<f64>,
    cond_means: Vec<f64>,
}

impl PairedSample {
    pub fn new(costs: Vec<f64>, cond_means: Vec<f64>) -> Result<Self> {
        if costs.len() != cond_means.len() {
            return Err(RiskError::LengthMismatch(costs.len(), cond_means.len()));
        }
        if costs.is_empty() {
            return Err(RiskError::EmptySample);
        }
        if costs.iter().chain(&cond_means).any(|v| !v.is_finite()) {
            return Err(RiskError::NonFinite);
        }
        Ok(Self { costs, cond_means })
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn cond_means(&self) -> &[f64] {
        &self.cond_means
    }
}

pub enum RiskInput<'a> {
    Sample(&'a EmpiricalSample),
    Paired(&'a PairedSample),
}

/// Index (1-based) of the VaR order statistic: `⌈(1−α)n⌉`, clamped to `[1, n]`.
fn var_rank(n: usize, alpha: f64) -> usize {
    let x = (1.0 - alpha) * n as f64;
    // guard against (1-α)n landing a hair above an integer through rounding
    let k = (x - 1e-9 * n as f64).ceil();
    (k.max(1.0) as usize).min(n)
}

pub fn var_alpha(s: &EmpiricalSample, alpha: f64) -> Result<f64> {
    check_alpha_open(alpha)?;
    Ok(s.sorted()[var_rank(s.len(), alpha) - 1])
}

/// `VaR + (1/α)·E[max(Z − VaR, 0)]`; at `α = 1` this is the mean.
pub fn cvar_alpha(s: &EmpiricalSample, alpha: f64) -> Result<f64> {
    check_alpha_closed(alpha)?;
    if alpha == 1.0 {
        return Ok(s.mean());
    }
    let v = var_alpha(s, alpha)?;
    let excess: f64 = s.sorted().iter().rev().take_while(|&&z| z > v).map(|z| z - v).sum();
    Ok(v + excess / (alpha * s.len() as f64))
}

fn lq_mean(values: impl Iterator<Item = f64>, q: f64, n: usize) -> f64 {
    if q == 1.0 {
        values.sum::<f64>() / n as f64
    } else {
        (values.map(|v| v.powf(q)).sum::<f64>() / n as f64).powf(1.0 / q)
    }
}

pub fn mean_deviation(s: &EmpiricalSample, q: f64, beta: f64) -> Result<f64> {
    check_order(q)?;
    check_nonneg("beta", beta)?;
    let m = s.mean();
    let dev = lq_mean(s.values.iter().map(|z| (z - m).abs()), q, s.len());
    Ok(m + beta * dev)
}

pub fn mean_upper_semidev(s: &EmpiricalSample, q: f64, beta: f64) -> Result<f64> {
    check_order(q)?;
    check_nonneg("beta", beta)?;
    let m = s.mean();
    let dev = lq_mean(s.values.iter().map(|z| (z - m).max(0.0)), q, s.len());
    Ok(m + beta * dev)
}

pub fn mean_cond_variance(p: &PairedSample, nu: f64) -> Result<f64> {
    check_nonneg("nu", nu)?;
    let n = p.costs.len() as f64;
    let mean = p.costs.iter().sum::<f64>() / n;
    let mse = p
        .costs
        .iter()
        .zip(&p.cond_means)
        .map(|(z, c)| (c - z) * (c - z))
        .sum::<f64>()
        / n;
    Ok(mean + nu * mse)
}

pub fn evaluate(spec: &RiskSpec, input: RiskInput<'_>) -> Result<f64> {
    spec.validate()?;
    let s = match (spec, input) {
        (RiskSpec::MeanCondVar { nu }, RiskInput::Paired(p)) => return mean_cond_variance(p, *nu),
        (RiskSpec::MeanCondVar { .. }, RiskInput::Sample(_)) => {
            return Err(RiskError::KindMismatch("mean_cond_var"))
        }
        (_, RiskInput::Sample(s)) => s.clone(),
        (_, RiskInput::Paired(p)) => EmpiricalSample::new(p.costs.clone())?,
    };
    evaluate_sample(spec, &s)
}

/// Same as [`evaluate`] for a plain sample.
pub fn evaluate_sample(spec: &RiskSpec, s: &EmpiricalSample) -> Result<f64> {
    match *spec {
        RiskSpec::Mean => Ok(s.mean()),
        RiskSpec::Var { alpha } => var_alpha(s, alpha),
        RiskSpec::Cvar { alpha } => cvar_alpha(s, alpha),
        RiskSpec::MeanDeviation { q, beta } => mean_deviation(s, q, beta),
        RiskSpec::MeanUpperSemideviation { q, beta } => mean_upper_semidev(s, q, beta),
        RiskSpec::MeanCondVar { .. } => Err(RiskError::KindMismatch("mean_cond_var")),
    }
}

/// Evaluates `spec` on the discrete law placing mass `weights[i]` on
/// `sorted[i]`. `sorted` must be ascending; weights are normalized here.
/// Bootstrap resamples are expressed this way as multiplicity counts over a
/// single sorted cross-section.
pub fn evaluate_weighted(spec: &RiskSpec, sorted: &[f64], weights: &[f64]) -> Result<f64> {
    if sorted.len() != weights.len() {
        return Err(RiskError::LengthMismatch(sorted.len(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    if sorted.is_empty() || total <= 0.0 {
        return Err(RiskError::EmptySample);
    }
    spec.validate()?;
    let mean = sorted.iter().zip(weights).map(|(z, w)| z * w).sum::<f64>() / total;
    let lq = |f: &dyn Fn(f64) -> f64, q: f64| {
        let acc = sorted
            .iter()
            .zip(weights)
            .map(|(&z, &w)| {
                let d = f(z - mean);
                w * if q == 1.0 { d } else { d.powf(q) }
            })
            .sum::<f64>()
            / total;
        if q == 1.0 {
            acc
        } else {
            acc.powf(1.0 / q)
        }
    };
    let var_w = |alpha: f64| {
        let target = (1.0 - alpha) * total - 1e-9 * total;
        let mut cum = 0.0;
        for (&z, &w) in sorted.iter().zip(weights) {
            cum += w;
            if w > 0.0 && cum >= target {
                return z;
            }
        }
        *sorted.last().unwrap()
    };
    match *spec {
        RiskSpec::Mean => Ok(mean),
        RiskSpec::Var { alpha } => Ok(var_w(alpha)),
        RiskSpec::Cvar { alpha } => {
            if alpha == 1.0 {
                return Ok(mean);
            }
            let v = var_w(alpha);
            let excess = sorted
                .iter()
                .zip(weights)
                .rev()
                .take_while(|(&z, _)| z > v)
                .map(|(z, w)| w * (z - v))
                .sum::<f64>()
                / total;
            Ok(v + excess / alpha)
        }
        RiskSpec::MeanDeviation { q, beta } => Ok(mean + beta * lq(&|d: f64| d.abs(), q)),
        RiskSpec::MeanUpperSemideviation { q, beta } => {
            Ok(mean + beta * lq(&|d: f64| d.max(0.0), q))
        }
        RiskSpec::MeanCondVar { .. } => Err(RiskError::KindMismatch("mean_cond_var")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DensityFamily {
    Cvar { alpha: f64 },
    /// `ξ = 1 + h − E(h)` with `‖h‖_{q*} ≤ β`.
    Md { q: f64, beta: f64 },
    /// `ξ = 1 + η − E(η)` with `η ≥ 0`, `‖η‖_{q*} ≤ β`.
    Mus { q: f64, beta: f64 },
}

/// Discrete reweighting of a sample, one value per sample point.
#[derive(Debug, Clone, PartialEq)]
pub struct DualDensity {
    pub values: Vec<f64>,
    pub family: DensityFamily,
}

impl DualDensity {
    /// `E(Zξ)` under uniform weights.
    pub fn expectation(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.values.len() {
            return Err(RiskError::LengthMismatch(z.len(), self.values.len()));
        }
        Ok(z.iter().zip(&self.values).map(|(a, b)| a * b).sum::<f64>() / z.len() as f64)
    }
}

/// Uniform-weight `ℓ_p` norm `(mean |v|^p)^{1/p}`, with `p = ∞` as the max.
fn dual_norm(v: impl Iterator<Item = f64> + Clone, p: f64) -> f64 {
    if p.is_infinite() {
        v.map(f64::abs).fold(0.0, f64::max)
    } else {
        let n = v.clone().count() as f64;
        (v.map(|x| x.abs().powf(p)).sum::<f64>() / n).powf(1.0 / p)
    }
}

fn conjugate_exponent(q: f64) -> f64 {
    if q == 1.0 {
        f64::INFINITY
    } else {
        q / (q - 1.0)
    }
}

pub fn check_density(d: &DualDensity) -> bool {
    check_density_tol(d, DENSITY_TOL)
}

/// Membership test for the dual density families with absolute tolerance
/// `tol`. Monte Carlo-built densities need a looser `tol` than the default.
pub fn check_density_tol(d: &DualDensity, tol: f64) -> bool {
    let v = &d.values;
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if (mean - 1.0).abs() > tol || v.iter().any(|&x| x < -tol) {
        return false;
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match d.family {
        DensityFamily::Cvar { alpha } => {
            alpha > 0.0 && alpha <= 1.0 && v.iter().all(|&x| x <= 1.0 / alpha + tol)
        }
        DensityFamily::Md { q, beta } => {
            if q < 1.0 || beta < 0.0 {
                return false;
            }
            if q == 1.0 {
                // h = ξ − 1 + c fits in [−β, β] for some c iff the range is ≤ 2β
                return max - min <= 2.0 * beta + tol;
            }
            // min over the free shift c of ‖ξ − 1 + c‖_{q*}; convex in c
            let p = conjugate_exponent(q);
            let f = |c: f64| dual_norm(v.iter().map(|x| x - 1.0 + c), p);
            let (mut lo, mut hi) = (1.0 - max, 1.0 - min);
            for _ in 0..200 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if f(m1) <= f(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            f(0.5 * (lo + hi)) <= beta + tol
        }
        DensityFamily::Mus { q, beta } => {
            if q < 1.0 || beta < 0.0 {
                return false;
            }
            // η = ξ − min ξ is the smallest nonnegative choice and every
            // other choice dominates it coordinatewise
            let p = conjugate_exponent(q);
            dual_norm(v.iter().map(|x| x - min), p) <= beta + tol
        }
    }
}

/// Maximizer of `E(Zξ)` over the CVaR density polytope.
pub fn cvar_optimal_density(s: &EmpiricalSample, alpha: f64) -> Result<DualDensity> {
    check_alpha_open(alpha)?;
    let n = s.len();
    let v = var_alpha(s, alpha)?;
    let z = s.values();
    let n_gt = z.iter().filter(|&&x| x > v).count() as f64;
    let n_eq = z.iter().filter(|&&x| x == v).count() as f64;
    let atom = ((n as f64 - n_gt / alpha) / n_eq).clamp(0.0, 1.0 / alpha);
    let values = z
        .iter()
        .map(|&x| {
            if x > v {
                1.0 / alpha
            } else if x == v {
                atom
            } else {
                0.0
            }
        })
        .collect();
    Ok(DualDensity {
        values,
        family: DensityFamily::Cvar { alpha },
    })
}
