//! Stability certificates for `x_{t+1} = A x_t + w_t` with state energy
//! `ψ(x) = xᵀRx`.
//!
//! A coherent-risk certificate `(λ, a, b)` bounds `ϱ(ψ(x_t)) ≤ aλᵗψ(𝐱) + b`.
//! The mean-conditional-variance certificate has an extra cross term driven
//! by the third-order noise statistic γ. Both can be checked against Monte
//! Carlo ensembles with [`verify_envelope`].

use crate::matcore::{self, MatError, SquareMatrix, SymMatrix};
use crate::riskfn::{self, EmpiricalSample, PairedSample, RiskError, RiskSpec};
use crate::stochsys::{
    self, EnergyPanel, LinearSystem, NoiseProcess, NoiseStats, SimError, StatsSource,
    TrajectoryEnsemble,
};
use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::io::{self, Write};
use thiserror::Error;

/// `|η − 1|` below this routes to the `λ = a = 0` branch.
pub const ETA_ONE_TOL: f64 = 1e-10;
pub const KAPPA_GRID_STEP: f64 = 1e-4;
pub const DEFAULT_CONFIDENCE: f64 = 0.99;

#[derive(Debug, Error)]
pub enum CertError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("risk functional {0} is not coherent in this parameter range")]
    NonCoherentRisk(String),
    #[error("kappa must lie in (0, 1), got {0}")]
    BadKappa(f64),
    #[error("eta must lie in (0, 1), got {0}")]
    BadEta(f64),
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("Sigma_u does not dominate Sigma_t at t = {t} (smallest eigenvalue of the gap {gap:e})")]
    SigmaDominanceViolated { t: usize, gap: f64 },
    #[error("fourth moments unavailable for the noise model")]
    FourthMomentUnavailable,
    #[error("transformations start from a mean certificate, got {0}")]
    BadSource(String),
    #[error("unsupported transformation target {0}")]
    BadTarget(String),
    #[error("operation needs a {expected} certificate")]
    KindMismatch { expected: &'static str },
    #[error("certificate does not match the system: {0}")]
    Mismatch(String),
    #[error("invalid certificate: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CertError>;

fn violated(msg: impl Into<String>) -> CertError {
    CertError::AssumptionViolated(msg.into())
}

/// Solves `X − AᵀXA = Q` and returns `H = R^{-1/2} X R^{-1/2}`, so that
/// `H_R − AᵀH_RA = Q`.
pub fn choose_h(a: &SquareMatrix, r: &SymMatrix, q: &SymMatrix) -> Result<SymMatrix> {
    if !matcore::is_pd(r)? {
        return Err(MatError::NotPd(matcore::lambda_min(r)?).into());
    }
    let x = matcore::solve_discrete_lyapunov(a, q)?;
    let ri = matcore::sym_inv_sqrt(r)?;
    Ok(x.congruence(ri.as_dmatrix())?)
}

/// `H_R − AᵀH_RA`.
pub fn lyapunov_gap(a: &SquareMatrix, r: &SymMatrix, h: &SymMatrix) -> Result<SymMatrix> {
    let hr = matcore::conjugate(h, r)?;
    Ok(hr.sub(&hr.congruence(a.as_dmatrix())?)?)
}

/// `η = λ_min(H_R − AᵀH_RA) / λ_max(H_R)`.
pub fn compute_eta(a: &SquareMatrix, r: &SymMatrix, h: &SymMatrix) -> Result<f64> {
    if !matcore::is_pd(h)? {
        return Err(violated("H must be positive definite"));
    }
    let hr = matcore::conjugate(h, r)?;
    let gap = lyapunov_gap(a, r, h)?;
    let lmin = matcore::lambda_min(&gap)?;
    if lmin <= gap.effective_tol() {
        return Err(violated(format!(
            "H_R - A^T H_R A is not positive definite (smallest eigenvalue {lmin:e}); A must be Schur stable"
        )));
    }
    Ok(lmin / matcore::lambda_max(&hr)?)
}

/// `c·λ_min(H) = (1 − κη) / (κη(η − κη))`.
pub fn kappa_value(eta: f64, kappa: f64) -> f64 {
    let ke = kappa * eta;
    (1.0 - ke) / (ke * (eta - ke))
}

pub fn kappa_tradeoff(eta: f64, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(CertError::BadEta(eta));
    }
    grid.iter()
        .map(|&k| {
            if k > 0.0 && k < 1.0 {
                Ok((k, kappa_value(eta, k)))
            } else {
                Err(CertError::BadKappa(k))
            }
        })
        .collect()
}

/// Exact minimizer of [`kappa_value`]: `κ* = (1 − √(1 − η)) / η`.
pub fn kappa_star_exact(eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(CertError::BadEta(eta));
    }
    Ok((1.0 - (1.0 - eta).sqrt()) / eta)
}

/// Minimizer of [`kappa_value`] over the grid `step, 2·step, … < 1`.
pub fn kappa_argmin(eta: f64, step: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(CertError::BadEta(eta));
    }
    let n = (1.0 / step).round() as usize;
    let mut best = (f64::NAN, f64::INFINITY);
    for i in 1..n {
        let k = i as f64 * step;
        let v = kappa_value(eta, k);
        if v < best.1 {
            best = (k, v);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaPolicy {
    Fixed(f64),
    GridArgmin,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HChoice {
    /// `H` from [`choose_h`] with this `Q`.
    Lyapunov(SymMatrix),
    Given(SymMatrix),
}

impl HChoice {
    pub fn identity_q(dim: usize) -> Self {
        HChoice::Lyapunov(SymMatrix::identity(dim))
    }

    fn resolve(&self, a: &SquareMatrix, r: &SymMatrix) -> Result<SymMatrix> {
        match self {
            HChoice::Lyapunov(q) => choose_h(a, r, q),
            HChoice::Given(h) => {
                if h.dim() != a.dim() {
                    return Err(MatError::DimMismatch(a.dim(), h.dim()).into());
                }
                Ok(h.clone())
            }
        }
    }

    fn q(&self) -> Option<SymMatrix> {
        match self {
            HChoice::Lyapunov(q) => Some(q.clone()),
            HChoice::Given(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEnergyConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Number of time steps searched for the sup; stationary noise uses one.
    pub horizon_for_sup: usize,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for NoiseEnergyConfig {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            seed: 0,
            horizon_for_sup: 50,
            bootstrap_resamples: 1000,
            confidence: DEFAULT_CONFIDENCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    EtaLtOne,
    EtaEqOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BPrimeMethod {
    /// `tr(H_RΣ) + w̄ᵀH_Rw̄`, exact for the mean.
    Analytic,
    /// Upper end of a percentile bootstrap interval on sampled noise energies.
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertProvenance {
    pub q: Option<SymMatrix>,
    pub kappa_policy: Option<KappaPolicy>,
    pub noise_energy: Option<NoiseEnergyConfig>,
    pub b_prime_method: BPrimeMethod,
    /// Point estimate of b′ before the confidence adjustment.
    pub b_prime_point: f64,
    pub transformed_from: Option<RiskSpec>,
}

/// Envelope `(λ, a, b)` for a coherent risk functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityCertificate {
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
    pub eta: f64,
    pub kappa: Option<f64>,
    pub h: SymMatrix,
    pub h_r: SymMatrix,
    pub b_prime: f64,
    pub c: f64,
    pub risk: RiskSpec,
    pub branch: Branch,
    pub a_matrix: SquareMatrix,
    pub r: SymMatrix,
    pub provenance: CertProvenance,
}

impl StabilityCertificate {
    pub fn envelope(&self, t: usize, psi_x: f64) -> f64 {
        self.a * self.lambda.powi(t as i32) * psi_x + self.b
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CertError::Invalid(m.to_string()));
        let nums = [self.lambda, self.a, self.b, self.eta, self.b_prime, self.c];
        if nums.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if !(0.0..1.0).contains(&self.lambda) || self.a < 0.0 {
            return bad("need lambda in [0, 1) and a >= 0");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0 + ETA_ONE_TOL) {
            return bad("eta outside (0, 1]");
        }
        let n = self.a_matrix.dim();
        if self.h.dim() != n || self.h_r.dim() != n || self.r.dim() != n {
            return bad("matrix dimensions disagree");
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0 && k < 1.0) {
                return bad("kappa outside (0, 1)");
            }
        }
        self.risk.validate()?;
        let eta = compute_eta(&self.a_matrix, &self.r, &self.h)?;
        if (eta - self.eta).abs() > 1e-10 * eta.max(1.0) {
            return bad("stored eta does not match H, A and R");
        }
        Ok(())
    }
}

/// Mean-conditional-variance certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McvCertificate {
    pub nu: f64,
    pub lambda_nu: f64,
    pub lambda_0: f64,
    pub a_nu: f64,
    pub a_0: f64,
    pub b_nu: f64,
    pub c_nu: f64,
    pub r_nu: SymMatrix,
    pub sigma_u: SymMatrix,
    pub h_nu: SymMatrix,
    pub h_0: SymMatrix,
    pub tilde_psi_nu_const: f64,
    pub tilde_psi_0_const: f64,
    pub gamma_sup: f64,
    /// `|γ_t|` for `t = 1, 2, …`; the last entry holds beyond the end.
    pub gamma_norms: Vec<f64>,
    /// `b_{ν,t}` for `t = 1, 2, …`.
    pub per_t_bias: Vec<f64>,
    /// `ρ_ν(ψ(d_t)) = tr(Σ_t R) + νδ_t` for `t = 1, 2, …`.
    pub noise_risk: Vec<f64>,
    /// `sup_t tr(Σ_t H^ν_{R_ν})`.
    pub s_nu: f64,
    pub a_matrix: SquareMatrix,
    pub r: SymMatrix,
    pub lambda_max_r: f64,
    pub stats_source: StatsSource,
}

impl McvCertificate {
    fn at<T: Copy>(v: &[T], t: usize) -> T {
        v[(t.max(1) - 1).min(v.len() - 1)]
    }

    pub fn tilde_psi_nu(&self, x: &DVector<f64>) -> f64 {
        4.0 * self.r_nu.quad_form(x) + self.tilde_psi_nu_const
    }

    pub fn tilde_psi_0(&self, x: &DVector<f64>) -> f64 {
        4.0 * self.r.quad_form(x) + self.tilde_psi_0_const
    }

    /// `a_ν λ_ν^t ψ̃_ν(𝐱) + 4ν|γ_t| √(a_0 λ_0^t λ_max(R) ψ̃_0(𝐱)) + b_ν`.
    pub fn envelope(&self, t: usize, x: &DVector<f64>) -> f64 {
        let decay = self.a_nu * self.lambda_nu.powi(t as i32) * self.tilde_psi_nu(x);
        let cross_inner =
            self.a_0 * self.lambda_0.powi(t as i32) * self.lambda_max_r * self.tilde_psi_0(x);
        let cross = 4.0 * self.nu * Self::at(&self.gamma_norms, t) * cross_inner.max(0.0).sqrt();
        decay + cross + self.b_nu
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CertError::Invalid(m.to_string()));
        let nums = [
            self.nu,
            self.lambda_nu,
            self.lambda_0,
            self.a_nu,
            self.a_0,
            self.b_nu,
            self.c_nu,
            self.tilde_psi_nu_const,
            self.tilde_psi_0_const,
            self.gamma_sup,
            self.s_nu,
            self.lambda_max_r,
        ];
        if nums.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.nu < 0.0
            || !(0.0..1.0).contains(&self.lambda_nu)
            || !(0.0..1.0).contains(&self.lambda_0)
            || self.a_nu < 0.0
            || self.a_0 < 0.0
        {
            return bad("parameters out of range");
        }
        if self.gamma_norms.is_empty()
            || self.per_t_bias.len() != self.gamma_norms.len()
            || self.noise_risk.len() != self.gamma_norms.len()
        {
            return bad("per-time sequences must be nonempty and of equal length");
        }
        let n = self.a_matrix.dim();
        let dims = [
            self.r_nu.dim(),
            self.sigma_u.dim(),
            self.h_nu.dim(),
            self.h_0.dim(),
            self.r.dim(),
        ];
        if dims.iter().any(|&d| d != n) {
            return bad("matrix dimensions disagree");
        }
        let r_nu = self.r.add(&SymMatrix::symmetrize(
            self.r.as_dmatrix() * self.sigma_u.as_dmatrix() * self.r.as_dmatrix() * (4.0 * self.nu),
        ))?;
        let scale = self.r_nu.frobenius().max(1.0);
        if (r_nu.as_dmatrix() - self.r_nu.as_dmatrix()).norm() > 1e-9 * scale {
            return bad("R_nu does not equal R + 4 nu R Sigma_u R");
        }
        Ok(())
    }
}

/// Any certificate produced by this module, tagged on disk by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    Coherent(StabilityCertificate),
    MeanCondVar(McvCertificate),
}

impl Certificate {
    pub fn a_matrix(&self) -> &SquareMatrix {
        match self {
            Certificate::Coherent(c) => &c.a_matrix,
            Certificate::MeanCondVar(c) => &c.a_matrix,
        }
    }

    pub fn r(&self) -> &SymMatrix {
        match self {
            Certificate::Coherent(c) => &c.r,
            Certificate::MeanCondVar(c) => &c.r,
        }
    }

    pub fn risk(&self) -> RiskSpec {
        match self {
            Certificate::Coherent(c) => c.risk,
            Certificate::MeanCondVar(c) => RiskSpec::MeanCondVar { nu: c.nu },
        }
    }

    pub fn envelope(&self, t: usize, x0: &DVector<f64>) -> f64 {
        match self {
            Certificate::Coherent(c) => c.envelope(t, c.r.quad_form(x0)),
            Certificate::MeanCondVar(c) => c.envelope(t, x0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Certificate::Coherent(c) => c.validate(),
            Certificate::MeanCondVar(c) => c.validate(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    /// Checks that the certificate was built for this `A` and `R`.
    pub fn check_matches(&self, sys: &LinearSystem, r: &SymMatrix) -> Result<()> {
        let close = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            x.shape() == y.shape() && (x - y).norm() <= 1e-12 * y.norm().max(1.0)
        };
        if !close(self.a_matrix().as_dmatrix(), sys.a.as_dmatrix()) {
            return Err(CertError::Mismatch("dynamics matrix differs".into()));
        }
        if !close(self.r().as_dmatrix(), r.as_dmatrix()) {
            return Err(CertError::Mismatch("state weight R differs".into()));
        }
        Ok(())
    }
}

/// Parses and validates a certificate document.
pub fn parse_certificate(json: &str) -> Result<Certificate> {
    let c: Certificate =
        serde_json::from_str(json).map_err(|e| CertError::Invalid(e.to_string()))?;
    c.validate()?;
    Ok(c)
}

pub fn limsup_bound(cert: &Certificate) -> f64 {
    match cert {
        Certificate::Coherent(c) => c.b,
        Certificate::MeanCondVar(c) => c.b_nu,
    }
}

fn bootstrap_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    // keep bootstrap streams away from the simulation key
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB007_5712_A9D3_C0DE);
    rng.set_stream(stream);
    rng
}

/// Percentile bootstrap interval for `spec` on a sorted sample. Resamples
/// are multiplicity counts over the sorted values, so each costs `O(n)`.
pub fn bootstrap_ci(
    spec: &RiskSpec,
    sorted: &[f64],
    resamples: usize,
    confidence: f64,
    seed: u64,
    stream: u64,
) -> Result<(f64, f64)> {
    let n = sorted.len();
    if n == 0 {
        return Err(RiskError::EmptySample.into());
    }
    if resamples == 0 {
        let v = riskfn::evaluate_weighted(spec, sorted, &vec![1.0; n])?;
        return Ok((v, v));
    }
    let mut rng = bootstrap_rng(seed, stream);
    let mut counts = vec![0u32; n];
    let mut weights = vec![0.0f64; n];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..n {
            // multiply-shift index; bias is O(n / 2^32)
            let i = ((rng.next_u32() as u64 * n as u64) >> 32) as usize;
            counts[i] += 1;
        }
        for (w, &c) in weights.iter_mut().zip(&counts) {
            *w = c as f64;
        }
        stats.push(riskfn::evaluate_weighted(spec, sorted, &weights)?);
    }
    stats.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - confidence);
    let pick = |q: f64| {
        let idx = (q * (resamples - 1) as f64).round() as usize;
        stats[idx.min(resamples - 1)]
    };
    Ok((pick(tail), pick(1.0 - tail)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BPrime {
    pub point: f64,
    pub upper: f64,
    pub method: BPrimeMethod,
}

/// `sup_t ϱ(w_tᵀH_Rw_t)` over the configured horizon.
pub fn estimate_b_prime(
    noise: &NoiseProcess,
    h_r: &SymMatrix,
    risk: &RiskSpec,
    cfg: &NoiseEnergyConfig,
) -> Result<BPrime> {
    let steps = if noise.is_stationary() {
        1
    } else {
        cfg.horizon_for_sup.max(1)
    };
    if *risk == RiskSpec::Mean {
        let mut best = f64::NEG_INFINITY;
        for t in 0..steps {
            let m = noise.at(t);
            let mean = m.mean();
            let v = (h_r.as_dmatrix() * m.covariance().as_dmatrix()).trace() + h_r.quad_form(&mean);
            best = best.max(v);
        }
        return Ok(BPrime {
            point: best,
            upper: best,
            method: BPrimeMethod::Analytic,
        });
    }
    let mut point = f64::NEG_INFINITY;
    let mut upper = f64::NEG_INFINITY;
    for t in 0..steps {
        let s = stochsys::noise_energy_sample(noise.at(t), h_r, t, cfg.n_samples.max(1), cfg.seed)?;
        let p = riskfn::evaluate_sample(risk, &s)?;
        let (_, hi) = bootstrap_ci(
            risk,
            s.sorted(),
            cfg.bootstrap_resamples,
            cfg.confidence,
            cfg.seed,
            t as u64,
        )?;
        point = point.max(p);
        upper = upper.max(hi.max(p));
    }
    Ok(BPrime {
        point,
        upper,
        method: BPrimeMethod::Bootstrap,
    })
}

/// Coherent-risk certificate for a Schur-stable linear system.
pub fn theorem2_certificate(
    sys: &LinearSystem,
    r: &SymMatrix,
    risk: &RiskSpec,
    kappa: KappaPolicy,
    h: &HChoice,
    cfg: &NoiseEnergyConfig,
) -> Result<StabilityCertificate> {
    risk.validate()?;
    if !risk.is_coherent() {
        return Err(CertError::NonCoherentRisk(format!("{risk:?}")));
    }
    if let KappaPolicy::Fixed(k) = kappa {
        if !(k > 0.0 && k < 1.0) {
            return Err(CertError::BadKappa(k));
        }
    }
    if r.dim() != sys.dim() {
        return Err(MatError::DimMismatch(sys.dim(), r.dim()).into());
    }
    let hm = h.resolve(&sys.a, r)?;
    let eta = compute_eta(&sys.a, r, &hm)?;
    let h_r = matcore::conjugate(&hm, r)?;
    let bp = estimate_b_prime(&sys.noise, &h_r, risk, cfg)?;
    let hmin = matcore::lambda_min(&hm)?;
    let hmax = matcore::lambda_max(&hm)?;
    let (lambda, a, c, kappa_used, branch) = if (eta - 1.0).abs() <= ETA_ONE_TOL {
        (0.0, 0.0, 1.0 / hmin, None, Branch::EtaEqOne)
    } else {
        let k = match kappa {
            KappaPolicy::Fixed(k) => k,
            KappaPolicy::GridArgmin => kappa_argmin(eta, KAPPA_GRID_STEP)?,
        };
        let lambda = 1.0 - k * eta;
        let c = lambda / (hmin * (1.0 - lambda) * (lambda - (1.0 - eta)));
        (lambda, hmax / hmin, c, Some(k), Branch::EtaLtOne)
    };
    Ok(StabilityCertificate {
        lambda,
        a,
        b: c * bp.upper,
        eta,
        kappa: kappa_used,
        h: hm,
        h_r,
        b_prime: bp.upper,
        c,
        risk: *risk,
        branch,
        a_matrix: sys.a.clone(),
        r: r.clone(),
        provenance: CertProvenance {
            q: h.q(),
            kappa_policy: Some(kappa),
            noise_energy: (bp.method == BPrimeMethod::Bootstrap).then_some(*cfg),
            b_prime_method: bp.method,
            b_prime_point: bp.point,
            transformed_from: None,
        },
    })
}

/// Rescales a mean certificate into one for CVaR, MD or MUS.
pub fn theorem1_transform(
    cert: &StabilityCertificate,
    target: &RiskSpec,
) -> Result<StabilityCertificate> {
    if cert.risk != RiskSpec::Mean {
        return Err(CertError::BadSource(cert.risk.name().into()));
    }
    let factor = match *target {
        RiskSpec::Cvar { alpha } if alpha > 0.0 && alpha < 1.0 => 1.0 / alpha,
        RiskSpec::MeanDeviation { q, beta } if q == 1.0 && (0.0..=0.5).contains(&beta) => {
            1.0 + 2.0 * beta
        }
        RiskSpec::MeanUpperSemideviation { q, beta } if q == 1.0 && (0.0..=1.0).contains(&beta) => {
            1.0 + 2.0 * beta
        }
        _ => return Err(CertError::BadTarget(format!("{target:?}"))),
    };
    let mut out = cert.clone();
    out.a *= factor;
    out.b *= factor;
    out.risk = *target;
    out.provenance.transformed_from = Some(RiskSpec::Mean);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    /// Risk estimate against the envelope; violation when `ci_lo > envelope`.
    Risk,
    /// Coverage frequency against `1 − α`; violation when `ci_hi < 1 − α`.
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub t: usize,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub envelope: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub kind: ReportKind,
    pub risk: RiskSpec,
    pub rows: Vec<ReportRow>,
}

impl VerificationReport {
    pub fn violations(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.violation).map(|r| r.t).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,estimate,ci_lo,ci_hi,envelope,violation")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{}",
                r.t, r.estimate, r.ci_lo, r.ci_hi, r.envelope, r.violation as u8
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            confidence: DEFAULT_CONFIDENCE,
            seed: 0,
        }
    }
}

/// Compares per-time risk estimates of an energy panel with `envelope(t)`.
/// Significance comes from a percentile bootstrap on each cross section.
pub fn verify_panel(
    risk: &RiskSpec,
    panel: &EnergyPanel,
    envelope: impl Fn(usize) -> f64 + Sync,
    boot: &BootstrapConfig,
) -> Result<VerificationReport> {
    if let RiskSpec::MeanCondVar { .. } = risk {
        return Err(CertError::KindMismatch {
            expected: "coherent or quantile",
        });
    }
    let rows = (1..=panel.horizon)
        .into_par_iter()
        .map(|t| {
            let s = EmpiricalSample::new(panel.cross_section(t).to_vec())?;
            let estimate = riskfn::evaluate_sample(risk, &s)?;
            let (lo, hi) = bootstrap_ci(
                risk,
                s.sorted(),
                boot.resamples,
                boot.confidence,
                boot.seed,
                t as u64,
            )?;
            let env = envelope(t);
            Ok(ReportRow {
                t,
                estimate,
                ci_lo: lo,
                ci_hi: hi,
                envelope: env,
                violation: lo > env,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport {
        kind: ReportKind::Risk,
        risk: *risk,
        rows,
    })
}

/// Exact `ρ_ν(ψ(x_t))`, `t = 0..=horizon`, by propagating the first two
/// moments of `x_t`. Entry 0 is `ψ(𝐱)`.
pub fn rho_nu_closed_form(
    sys: &LinearSystem,
    r: &SymMatrix,
    nu: f64,
    horizon: usize,
    source: StatsSource,
) -> Result<Vec<f64>> {
    let n = sys.dim();
    let a = sys.a.as_dmatrix();
    let rm = r.as_dmatrix();
    let mut m = sys.x0.clone();
    let mut p = &m * m.transpose();
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(r.quad_form(&m));
    let stationary = sys.noise.is_stationary();
    let mut cached: Option<(DVector<f64>, SymMatrix, DVector<f64>, f64)> = None;
    for t in 1..=horizon {
        let k = t - 1;
        let (wbar, sigma, gamma, delta) = match (&cached, stationary) {
            (Some(c), true) => c.clone(),
            _ => {
                let st = noise_moments(&sys.noise, &sys.a, r, k, source)?;
                let v = (st.mean, st.cov, st.gamma, st.delta);
                cached = Some(v.clone());
                v
            }
        };
        let am = a * &m;
        let sig = sigma.as_dmatrix();
        p = a * &p * a.transpose() + &am * wbar.transpose() + &wbar * am.transpose()
            + sig
            + &wbar * wbar.transpose();
        m = am + &wbar;
        let rs = sig * rm;
        let weight = rm + rm * sig * rm * (4.0 * nu);
        let val = (&weight * &p).trace() + 4.0 * nu * gamma.dot(&(rm * &m)) + nu * delta
            - 4.0 * nu * (&rs * &rs).trace();
        debug_assert_eq!(p.nrows(), n);
        out.push(val);
    }
    Ok(out)
}

fn noise_moments(
    noise: &NoiseProcess,
    a: &SquareMatrix,
    r: &SymMatrix,
    t: usize,
    source: StatsSource,
) -> Result<NoiseStats> {
    Ok(stochsys::noise_stats(noise, a, r, t, source)?)
}

/// Monte Carlo `ρ_ν(ψ(x_t))` from an ensemble via a paired sample of costs
/// and conditional means `ẑᵀRẑ + tr(ΣR)`, `ẑ = A x_{t−1} + w̄_{t−1}`.
/// Returns `(estimate, standard error)`.
pub fn rho_nu_monte_carlo(
    e: &TrajectoryEnsemble,
    sys: &LinearSystem,
    r: &SymMatrix,
    nu: f64,
    t: usize,
) -> Result<(f64, f64)> {
    if t == 0 || t > e.horizon {
        return Err(CertError::Invalid(format!("time {t} outside 1..={}", e.horizon)));
    }
    let model = sys.noise.at(t - 1);
    let wbar = model.mean();
    let tr = (model.covariance().as_dmatrix() * r.as_dmatrix()).trace();
    let a = sys.a.as_dmatrix();
    let rm = r.as_dmatrix();
    let mut costs = Vec::with_capacity(e.n_paths);
    let mut cond = Vec::with_capacity(e.n_paths);
    for p in 0..e.n_paths {
        let prev = DVector::from_row_slice(e.state(p, t - 1));
        let z = a * prev + &wbar;
        costs.push(stochsys::quad(rm, e.state(p, t)));
        cond.push(stochsys::quad(rm, z.as_slice()) + tr);
    }
    let paired = PairedSample::new(costs, cond)?;
    let est = riskfn::mean_cond_variance(&paired, nu)?;
    let y: Vec<f64> = paired
        .costs()
        .iter()
        .zip(paired.cond_means())
        .map(|(z, c)| z + nu * (c - z).powi(2))
        .collect();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((est, (var / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum SigmaUChoice {
    /// Σ for stationary noise, else `(max_t λ_max(Σ_t) + tol)·I`.
    Default,
    Given(SymMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanCondVarOptions {
    pub sigma_u: SigmaUChoice,
    pub h_nu: HChoice,
    pub h_0: HChoice,
    pub horizon: usize,
    pub stats: StatsSource,
}

impl MeanCondVarOptions {
    pub fn new(dim: usize, horizon: usize) -> Self {
        Self {
            sigma_u: SigmaUChoice::Default,
            h_nu: HChoice::identity_q(dim),
            h_0: HChoice::identity_q(dim),
            horizon,
            stats: StatsSource::Analytic,
        }
    }
}

/// Mean-conditional-variance certificate.
pub fn theorem3_certificate(
    sys: &LinearSystem,
    r: &SymMatrix,
    nu: f64,
    opts: &MeanCondVarOptions,
) -> Result<McvCertificate> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(RiskError::BadParameter { name: "nu", value: nu }.into());
    }
    let n = sys.dim();
    if r.dim() != n {
        return Err(MatError::DimMismatch(n, r.dim()).into());
    }
    if !matcore::is_pd(r)? {
        return Err(MatError::NotPd(matcore::lambda_min(r)?).into());
    }
    let rho = matcore::spectral_radius(&sys.a)?;
    if rho >= 1.0 - matcore::SCHUR_MARGIN {
        return Err(violated(format!(
            "A is not Schur stable (spectral radius {rho})"
        )));
    }
    let steps = if sys.noise.is_stationary() {
        1
    } else {
        opts.horizon.max(1)
    };
    let stats: Vec<NoiseStats> = (0..steps)
        .map(|k| noise_moments(&sys.noise, &sys.a, r, k, opts.stats))
        .collect::<Result<_>>()?;

    let sigma_u = match &opts.sigma_u {
        SigmaUChoice::Given(s) => s.clone(),
        SigmaUChoice::Default if sys.noise.is_stationary() => stats[0].cov.clone(),
        SigmaUChoice::Default => {
            let mut top = 0.0f64;
            for st in &stats {
                top = top.max(matcore::lambda_max(&st.cov)?);
            }
            SymMatrix::scaled_identity(n, top + matcore::DEFAULT_PSD_TOL * top.max(1.0))
        }
    };
    if sigma_u.dim() != n {
        return Err(MatError::DimMismatch(n, sigma_u.dim()).into());
    }
    for (k, st) in stats.iter().enumerate() {
        let gap = sigma_u.sub(&st.cov)?;
        if !matcore::is_psd(&gap)? {
            return Err(CertError::SigmaDominanceViolated {
                t: k + 1,
                gap: matcore::lambda_min(&gap)?,
            });
        }
    }

    let rm = r.as_dmatrix();
    let r_nu = r.add(&SymMatrix::symmetrize(
        rm * sigma_u.as_dmatrix() * rm * (4.0 * nu),
    ))?;
    let h_nu = opts.h_nu.resolve(&sys.a, &r_nu)?;
    let h_0 = opts.h_0.resolve(&sys.a, r)?;
    let lambda_nu = 1.0 - compute_eta(&sys.a, &r_nu, &h_nu)?;
    let lambda_0 = 1.0 - compute_eta(&sys.a, r, &h_0)?;
    let a_nu = matcore::lambda_max(&h_nu)? / matcore::lambda_min(&h_nu)?;
    let a_0 = matcore::lambda_max(&h_0)? / matcore::lambda_min(&h_0)?;
    let c_nu = 2.0 / (matcore::lambda_min(&h_nu)? * (1.0 - lambda_nu));
    let h_nu_r = matcore::conjugate(&h_nu, &r_nu)?;

    let s_nu = stats
        .iter()
        .map(|st| (st.cov.as_dmatrix() * h_nu_r.as_dmatrix()).trace())
        .fold(f64::NEG_INFINITY, f64::max);
    let wbar_sup = stats
        .iter()
        .map(|st| st.bold_mean.norm_squared())
        .fold(0.0, f64::max);
    let rnu_m = r_nu.as_dmatrix();
    let mut per_t_bias = Vec::with_capacity(steps);
    let mut noise_risk = Vec::with_capacity(steps);
    let mut gamma_norms = Vec::with_capacity(steps);
    for st in &stats {
        let sig = st.cov.as_dmatrix();
        let r_nu_t = rm + rm * sig * rm * (4.0 * nu);
        let wb = &st.bold_mean;
        let bias = c_nu * s_nu - (sig * r_nu_t).trace()
            + 2.0 * wb.dot(&(rnu_m * wb))
            + 4.0 * nu * st.gamma.dot(&(rm * wb));
        per_t_bias.push(bias);
        noise_risk.push((sig * rm).trace() + nu * st.delta);
        gamma_norms.push(st.gamma.norm());
    }
    let b_nu = per_t_bias
        .iter()
        .zip(&noise_risk)
        .map(|(b, q)| b + q)
        .fold(f64::NEG_INFINITY, f64::max);
    let lambda_max_r = matcore::lambda_max(r)?;
    Ok(McvCertificate {
        nu,
        lambda_nu,
        lambda_0,
        a_nu,
        a_0,
        b_nu,
        c_nu,
        tilde_psi_nu_const: 4.0 * matcore::lambda_max(&r_nu)? * wbar_sup,
        tilde_psi_0_const: 4.0 * lambda_max_r * wbar_sup,
        gamma_sup: gamma_norms.iter().copied().fold(0.0, f64::max),
        r_nu,
        sigma_u,
        h_nu,
        h_0,
        gamma_norms,
        per_t_bias,
        noise_risk,
        s_nu,
        a_matrix: sys.a.clone(),
        r: r.clone(),
        lambda_max_r,
        stats_source: opts.stats,
    })
}

/// Simulates the system and compares every `t = 1..=horizon` with the
/// certified envelope. Mean-conditional-variance certificates are checked
/// against the exact moment-propagated risk (zero-width interval).
pub fn verify_envelope(
    cert: &Certificate,
    sys: &LinearSystem,
    r: &SymMatrix,
    horizon: usize,
    n_paths: usize,
    seed: u64,
    boot: &BootstrapConfig,
) -> Result<VerificationReport> {
    cert.check_matches(sys, r)?;
    match cert {
        Certificate::Coherent(c) => {
            let e = stochsys::simulate(sys, horizon, n_paths, seed)?;
            let panel = stochsys::state_energy(&e, r)?;
            let psi = r.quad_form(&sys.x0);
            verify_panel(&c.risk, &panel, |t| c.envelope(t, psi), boot)
        }
        Certificate::MeanCondVar(c) => {
            let exact = rho_nu_closed_form(sys, r, c.nu, horizon, c.stats_source)?;
            let rows = (1..=horizon)
                .map(|t| {
                    let env = c.envelope(t, &sys.x0);
                    ReportRow {
                        t,
                        estimate: exact[t],
                        ci_lo: exact[t],
                        ci_hi: exact[t],
                        envelope: env,
                        violation: exact[t] > env,
                    }
                })
                .collect();
            Ok(VerificationReport {
                kind: ReportKind::Risk,
                risk: cert.risk(),
                rows,
            })
        }
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, confidence: f64) -> (f64, f64) {
    let z = normal_quantile(0.5 + 0.5 * confidence);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Per-time frequency of `ψ(x_t) ≤ aλᵗψ(𝐱) + b` for a CVaR certificate,
/// which must be at least `1 − α`.
pub fn probabilistic_check(
    cert: &StabilityCertificate,
    panel: &EnergyPanel,
    psi_x0: f64,
    confidence: f64,
) -> Result<VerificationReport> {
    let alpha = match cert.risk {
        RiskSpec::Cvar { alpha } => alpha,
        _ => return Err(CertError::KindMismatch { expected: "CVaR" }),
    };
    let required = 1.0 - alpha;
    let rows = (1..=panel.horizon)
        .map(|t| {
            let env = cert.envelope(t, psi_x0);
            let xs = panel.cross_section(t);
            let hits = xs.iter().filter(|&&v| v <= env).count();
            let (lo, hi) = wilson_interval(hits, xs.len(), confidence);
            ReportRow {
                t,
                estimate: hits as f64 / xs.len() as f64,
                ci_lo: lo,
                ci_hi: hi,
                envelope: required,
                violation: hi < required,
            }
        })
        .collect();
    Ok(VerificationReport {
        kind: ReportKind::Coverage,
        risk: cert.risk,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochsys::NoiseModel;

    fn a_illus() -> SquareMatrix {
        SquareMatrix::from_rows(&[vec![0.8, 0.4], vec![0.0, -0.8]]).unwrap()
    }

    fn small_cfg() -> NoiseEnergyConfig {
        NoiseEnergyConfig {
            n_samples: 4000,
            seed: 1,
            horizon_for_sup: 3,
            bootstrap_resamples: 200,
            confidence: 0.99,
        }
    }

    #[test]
    fn choose_h_examples() {
        let h = choose_h(&SquareMatrix::zeros(2), &SymMatrix::identity(2), &SymMatrix::identity(2)).unwrap();
        assert!((h.as_dmatrix() - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
        let a = SquareMatrix::new(1, vec![0.5]).unwrap();
        let h = choose_h(&a, &SymMatrix::identity(1), &SymMatrix::identity(1)).unwrap();
        assert!((h.as_dmatrix()[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        let r = SymMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let q = SymMatrix::identity(2);
        let h = choose_h(&a_illus(), &r, &q).unwrap();
        let gap = lyapunov_gap(&a_illus(), &r, &h).unwrap();
        assert!((gap.as_dmatrix() - q.as_dmatrix()).norm() < 1e-9);
    }

    #[test]
    fn eta_examples() {
        let eta = compute_eta(&SquareMatrix::zeros(2), &SymMatrix::identity(2), &SymMatrix::identity(2)).unwrap();
        assert!((eta - 1.0).abs() < 1e-15);
        let a = SquareMatrix::new(2, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let eta = compute_eta(&a, &SymMatrix::identity(2), &SymMatrix::identity(2)).unwrap();
        assert!((eta - 0.75).abs() < 1e-14);
        let unstable = SquareMatrix::new(1, vec![1.1]).unwrap();
        assert!(matches!(
            compute_eta(&unstable, &SymMatrix::identity(1), &SymMatrix::identity(1)),
            Err(CertError::AssumptionViolated(_))
        ));
    }

    #[test]
    fn coherent_closed_forms() {
        let a = SquareMatrix::new(2, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let sys = LinearSystem::new(a, NoiseModel::zero(2), vec![1.0, 1.0]).unwrap();
        let cert = theorem2_certificate(
            &sys,
            &SymMatrix::identity(2),
            &RiskSpec::Mean,
            KappaPolicy::Fixed(0.5),
            &HChoice::Given(SymMatrix::identity(2)),
            &small_cfg(),
        )
        .unwrap();
        assert!((cert.lambda - 0.625).abs() < 1e-14);
        assert!((cert.a - 1.0).abs() < 1e-14);
        assert!((cert.c - 0.625 / (0.375 * 0.375)).abs() < 1e-12);
        assert_eq!(cert.b, 0.0);
        assert_eq!(cert.branch, Branch::EtaLtOne);
    }

    #[test]
    fn coherent_eta_one_branch() {
        let noise = NoiseModel::uniform(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let sys = LinearSystem::new(SquareMatrix::zeros(2), noise, vec![1.0, 0.0]).unwrap();
        let cert = theorem2_certificate(
            &sys,
            &SymMatrix::identity(2),
            &RiskSpec::Cvar { alpha: 0.2 },
            KappaPolicy::GridArgmin,
            &HChoice::identity_q(2),
            &small_cfg(),
        )
        .unwrap();
        assert_eq!(cert.branch, Branch::EtaEqOne);
        assert_eq!((cert.lambda, cert.a), (0.0, 0.0));
        let hmin = matcore::lambda_min(&cert.h).unwrap();
        assert!((cert.b - cert.b_prime / hmin).abs() < 1e-12);
        assert!(cert.kappa.is_none());
    }

    #[test]
    fn coherent_rejects_noncoherent_and_bad_kappa() {
        let sys = LinearSystem::new(a_illus(), NoiseModel::zero(2), vec![1.0, 0.0]).unwrap();
        let r = SymMatrix::identity(2);
        let q = HChoice::identity_q(2);
        for risk in [RiskSpec::Var { alpha: 0.1 }, RiskSpec::MeanCondVar { nu: 1.0 }] {
            assert!(matches!(
                theorem2_certificate(&sys, &r, &risk, KappaPolicy::GridArgmin, &q, &small_cfg()),
                Err(CertError::NonCoherentRisk(_))
            ));
        }
        assert!(matches!(
            theorem2_certificate(&sys, &r, &RiskSpec::Mean, KappaPolicy::Fixed(1.0), &q, &small_cfg()),
            Err(CertError::BadKappa(_))
        ));
    }

    #[test]
    fn illustration_constants() {
        let sys = LinearSystem::new(a_illus(), NoiseModel::zero(2), vec![1.0, 0.0]).unwrap();
        let cert = theorem2_certificate(
            &sys,
            &SymMatrix::identity(2),
            &RiskSpec::Mean,
            KappaPolicy::GridArgmin,
            &HChoice::identity_q(2),
            &small_cfg(),
        )
        .unwrap();
        assert!((cert.eta - 0.28802).abs() < 1e-5, "{}", cert.eta);
        assert!((cert.kappa.unwrap() - 0.5424).abs() < 1e-9);
        assert!((cert.a - 1.47455).abs() < 1e-5);
    }

    #[test]
    fn transform_examples() {
        let sys = LinearSystem::new(a_illus(), NoiseModel::zero(2), vec![1.0, 0.0]).unwrap();
        let mut cert = theorem2_certificate(
            &sys,
            &SymMatrix::identity(2),
            &RiskSpec::Mean,
            KappaPolicy::Fixed(0.5),
            &HChoice::identity_q(2),
            &small_cfg(),
        )
        .unwrap();
        cert.lambda = 0.5;
        cert.a = 1.0;
        cert.b = 2.0;
        let c = theorem1_transform(&cert, &RiskSpec::Cvar { alpha: 0.5 }).unwrap();
        assert_eq!((c.lambda, c.a, c.b), (0.5, 2.0, 4.0));
        let m = theorem1_transform(&cert, &RiskSpec::MeanUpperSemideviation { q: 1.0, beta: 0.0 }).unwrap();
        assert_eq!((m.lambda, m.a, m.b), (0.5, 1.0, 2.0));
        let d = theorem1_transform(&cert, &RiskSpec::MeanDeviation { q: 1.0, beta: 0.5 }).unwrap();
        assert_eq!((d.a, d.b), (2.0, 4.0));
        assert!(matches!(
            theorem1_transform(&c, &RiskSpec::Cvar { alpha: 0.5 }),
            Err(CertError::BadSource(_))
        ));
        assert!(matches!(
            theorem1_transform(&cert, &RiskSpec::MeanDeviation { q: 2.0, beta: 0.5 }),
            Err(CertError::BadTarget(_))
        ));
    }

    #[test]
    fn kappa_examples() {
        let v = kappa_tradeoff(0.5, &[0.5]).unwrap();
        assert!((v[0].1 - 12.0).abs() < 1e-12);
        let ends = kappa_tradeoff(0.5, &[1e-6, 0.5, 1.0 - 1e-6]).unwrap();
        assert!(ends[0].1 > 1e5 && ends[2].1 > 1e5);
        assert!(matches!(kappa_tradeoff(1.0, &[0.5]), Err(CertError::BadEta(_))));
        assert!(matches!(kappa_tradeoff(0.5, &[0.0]), Err(CertError::BadKappa(_))));
    }

    #[test]
    fn exact_kappa_beats_every_grid_point() {
        for eta in [0.05, 0.28802, 0.5, 0.9, 0.999] {
            let ks = kappa_star_exact(eta).unwrap();
            let best = kappa_value(eta, ks);
            for i in 1..1000 {
                assert!(kappa_value(eta, i as f64 * 1e-3) >= best * (1.0 - 1e-12));
            }
            assert!((kappa_argmin(eta, 1e-4).unwrap() - ks).abs() <= 1e-4);
        }
        assert!((kappa_star_exact(0.28802).unwrap() - 0.5424).abs() < 1e-4);
    }

    #[test]
    fn noise_free_verification() {
        let sys = LinearSystem::new(a_illus(), NoiseModel::zero(2), vec![1.0, -2.0]).unwrap();
        let r = SymMatrix::identity(2);
        let cert = Certificate::Coherent(
            theorem2_certificate(
                &sys,
                &r,
                &RiskSpec::Mean,
                KappaPolicy::GridArgmin,
                &HChoice::identity_q(2),
                &small_cfg(),
            )
            .unwrap(),
        );
        assert_eq!(limsup_bound(&cert), 0.0);
        let boot = BootstrapConfig {
            resamples: 50,
            ..Default::default()
        };
        let rep = verify_envelope(&cert, &sys, &r, 30, 8, 3, &boot).unwrap();
        assert!(rep.violations().is_empty());
        for w in rep.rows.windows(2) {
            // ‖Aᵗx‖² need not be monotone, but it must vanish
            assert!(w[1].estimate.is_finite());
        }
        assert!(rep.rows.last().unwrap().estimate < 1e-4);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("t,estimate,ci_lo,ci_hi,envelope,violation\n"));
    }

    #[test]
    fn rho_nu_noise_free_and_nu_zero() {
        let sys = LinearSystem::new(a_illus(), NoiseModel::zero(2), vec![1.0, 1.0]).unwrap();
        let r = SymMatrix::identity(2);
        let v = rho_nu_closed_form(&sys, &r, 3.0, 5, StatsSource::Analytic).unwrap();
        for (t, val) in v.iter().enumerate() {
            let x = sys.a.pow(t) * &sys.x0;
            assert!((val - x.norm_squared()).abs() < 1e-12);
        }
        let noise = NoiseModel::gaussian(vec![0.5, 0.0], SymMatrix::identity(2)).unwrap();
        let sys = LinearSystem::new(a_illus(), noise, vec![1.0, 1.0]).unwrap();
        let v = rho_nu_closed_form(&sys, &r, 0.0, 1, StatsSource::Analytic).unwrap();
        let m = sys.a.as_dmatrix() * &sys.x0 + DVector::from_vec(vec![0.5, 0.0]);
        assert!((v[1] - (m.norm_squared() + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn mean_cond_var_nu_zero_and_symmetric_noise() {
        let noise = NoiseModel::gaussian(vec![0.0, 0.0], SymMatrix::identity(2)).unwrap();
        let sys = LinearSystem::new(a_illus(), noise, vec![1.0, 2.0]).unwrap();
        let r = SymMatrix::identity(2);
        let c0 = theorem3_certificate(&sys, &r, 0.0, &MeanCondVarOptions::new(2, 10)).unwrap();
        assert_eq!(c0.r_nu, r);
        assert_eq!(c0.tilde_psi_nu_const, 0.0);
        assert_eq!(c0.gamma_sup, 0.0);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let env = c0.envelope(3, &x);
        let manual = c0.a_nu * c0.lambda_nu.powi(3) * 4.0 * 5.0 + c0.b_nu;
        assert!((env - manual).abs() < 1e-9);
        let c1 = theorem3_certificate(&sys, &r, 2.0, &MeanCondVarOptions::new(2, 10)).unwrap();
        assert!((c1.tilde_psi_nu(&x) - 4.0 * c1.r_nu.quad_form(&x)).abs() < 1e-12);
        let exact = rho_nu_closed_form(&sys, &r, 2.0, 20, StatsSource::Analytic).unwrap();
        for t in 1..=20 {
            assert!(exact[t] <= c1.envelope(t, &x));
        }
    }

    #[test]
    fn sigma_dominance_checked() {
        let noise = NoiseModel::gaussian(vec![0.0, 0.0], SymMatrix::scaled_identity(2, 2.0)).unwrap();
        let sys = LinearSystem::new(a_illus(), noise, vec![0.0, 0.0]).unwrap();
        let mut opts = MeanCondVarOptions::new(2, 5);
        opts.sigma_u = SigmaUChoice::Given(SymMatrix::identity(2));
        assert!(matches!(
            theorem3_certificate(&sys, &SymMatrix::identity(2), 1.0, &opts),
            Err(CertError::SigmaDominanceViolated { .. })
        ));
    }

    #[test]
    fn wilson_and_quantile() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((normal_quantile(0.995) - 2.5758293035489).abs() < 1e-9);
        let (lo, hi) = wilson_interval(50, 100, 0.95);
        assert!(lo < 0.5 && hi > 0.5 && (hi - lo) < 0.2);
        assert_eq!(wilson_interval(10, 10, 0.99).1, 1.0);
    }

    #[test]
    fn certificate_json_roundtrip() {
        let noise = NoiseModel::uniform(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let sys = LinearSystem::new(a_illus(), noise, vec![1.0, 1.0]).unwrap();
        let r = SymMatrix::identity(2);
        let c = Certificate::Coherent(
            theorem2_certificate(
                &sys,
                &r,
                &RiskSpec::MeanUpperSemideviation { q: 1.0, beta: 1.0 },
                KappaPolicy::GridArgmin,
                &HChoice::identity_q(2),
                &small_cfg(),
            )
            .unwrap(),
        );
        let back = parse_certificate(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let m = Certificate::MeanCondVar(
            theorem3_certificate(&sys, &r, 1.0, &MeanCondVarOptions::new(2, 5)).unwrap(),
        );
        assert_eq!(parse_certificate(&m.to_json()).unwrap(), m);

        let tampered = c.to_json().replace("\"eta\": 0.", "\"eta\": 0.1");
        assert!(parse_certificate(&tampered).is_err());
        let extra = c.to_json().replacen('{', "{\"bogus\": 1,", 1);
        assert!(parse_certificate(&extra).is_err());
    }
}
