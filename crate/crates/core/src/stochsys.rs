//! Noise models, moment oracles and Monte Carlo simulation of
//! `x_{t+1} = A x_t + w_t`.
//!
//! Randomness is counter based: one ChaCha8 key per master seed, the path
//! index selects the stream and the time step selects the word offset
//! (`t << 32`). Every `(path, t)` draw is therefore fixed by the seed alone,
//! whatever the thread count.

use crate::matcore::{self, MatError, MatrixDoc, SquareMatrix, SymMatrix};
use crate::riskfn::{EmpiricalSample, RiskError};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

pub const RNG_SCHEME_ID: &str = "chacha8/key=seed/stream=path/word=t<<32";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("invalid noise model: {0}")]
    BadNoise(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("horizon and path count must be positive")]
    EmptyRun,
    #[error("bold mean needs a Schur-stable A (spectral radius {0})")]
    NotSchurStable(f64),
    #[error("analytic moments unavailable for this noise model")]
    AnalyticUnavailable,
    #[error("reality 2 requires the raw noise draws paired with each energy")]
    MissingPairedDraws,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Distribution of one disturbance vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    Gaussian {
        mean: Vec<f64>,
        cov: SymMatrix,
    },
    /// Independent coordinates, `w_i ~ U[lo_i, hi_i]`.
    Uniform {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<SymMatrix>,
    },
    Deterministic {
        value: Vec<f64>,
    },
}

/// Validated noise model with cached covariance square roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseKind", into = "NoiseKind")]
pub struct NoiseModel {
    kind: NoiseKind,
    dim: usize,
    roots: Vec<DMatrix<f64>>,
}

impl From<NoiseModel> for NoiseKind {
    fn from(m: NoiseModel) -> Self {
        m.kind
    }
}

impl TryFrom<NoiseKind> for NoiseModel {
    type Error = SimError;

    fn try_from(kind: NoiseKind) -> Result<Self> {
        NoiseModel::new(kind)
    }
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn bad(msg: impl Into<String>) -> SimError {
    SimError::BadNoise(msg.into())
}

impl NoiseModel {
    pub fn new(kind: NoiseKind) -> Result<Self> {
        let (dim, roots) = match &kind {
            NoiseKind::Gaussian { mean, cov } => {
                if mean.is_empty() || !finite(mean) {
                    return Err(bad("gaussian mean must be nonempty and finite"));
                }
                if cov.dim() != mean.len() {
                    return Err(SimError::DimMismatch(mean.len(), cov.dim()));
                }
                (mean.len(), vec![matcore::sym_sqrt(cov)?.as_dmatrix().clone()])
            }
            NoiseKind::Uniform { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(SimError::DimMismatch(lo.len(), hi.len()));
                }
                if !finite(lo) || !finite(hi) || lo.iter().zip(hi).any(|(l, h)| l > h) {
                    return Err(bad("uniform bounds must be finite with lo <= hi"));
                }
                (lo.len(), Vec::new())
            }
            NoiseKind::GaussianMixture {
                weights,
                means,
                covs,
            } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len()
                {
                    return Err(bad("mixture needs matching nonempty weights, means, covs"));
                }
                if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                    return Err(bad("mixture weights must be nonnegative"));
                }
                if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(bad("mixture weights must sum to 1"));
                }
                let dim = means[0].len();
                if dim == 0 {
                    return Err(bad("mixture means must be nonempty"));
                }
                let mut roots = Vec::with_capacity(covs.len());
                for (m, c) in means.iter().zip(covs) {
                    if m.len() != dim || !finite(m) {
                        return Err(SimError::DimMismatch(dim, m.len()));
                    }
                    if c.dim() != dim {
                        return Err(SimError::DimMismatch(dim, c.dim()));
                    }
                    roots.push(matcore::sym_sqrt(c)?.as_dmatrix().clone());
                }
                (dim, roots)
            }
            NoiseKind::Deterministic { value } => {
                if value.is_empty() || !finite(value) {
                    return Err(bad("deterministic value must be nonempty and finite"));
                }
                (value.len(), Vec::new())
            }
        };
        Ok(Self { kind, dim, roots })
    }

    pub fn gaussian(mean: Vec<f64>, cov: SymMatrix) -> Result<Self> {
        Self::new(NoiseKind::Gaussian { mean, cov })
    }

    pub fn uniform(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        Self::new(NoiseKind::Uniform { lo, hi })
    }

    pub fn mixture(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<SymMatrix>) -> Result<Self> {
        Self::new(NoiseKind::GaussianMixture {
            weights,
            means,
            covs,
        })
    }

    pub fn deterministic(value: Vec<f64>) -> Result<Self> {
        Self::new(NoiseKind::Deterministic { value })
    }

    pub fn zero(dim: usize) -> Self {
        Self::deterministic(vec![0.0; dim]).expect("zero noise is valid")
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Same law translated by `v`: only the mean moves.
    pub fn shifted(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.dim {
            return Err(SimError::DimMismatch(self.dim, v.len()));
        }
        let add = |x: &[f64]| x.iter().zip(v).map(|(a, b)| a + b).collect::<Vec<_>>();
        let kind = match &self.kind {
            NoiseKind::Gaussian { mean, cov } => NoiseKind::Gaussian {
                mean: add(mean),
                cov: cov.clone(),
            },
            NoiseKind::Uniform { lo, hi } => NoiseKind::Uniform {
                lo: add(lo),
                hi: add(hi),
            },
            NoiseKind::GaussianMixture {
                weights,
                means,
                covs,
            } => NoiseKind::GaussianMixture {
                weights: weights.clone(),
                means: means.iter().map(|m| add(m)).collect(),
                covs: covs.clone(),
            },
            NoiseKind::Deterministic { value } => NoiseKind::Deterministic { value: add(value) },
        };
        Self::new(kind)
    }

    /// Draws one vector into `out`. Returns the mixture component used
    /// (always 0 for the other kinds).
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> usize {
        match &self.kind {
            NoiseKind::Deterministic { value } => {
                out.copy_from_slice(value);
                0
            }
            NoiseKind::Uniform { lo, hi } => {
                for i in 0..self.dim {
                    out[i] = lo[i] + (hi[i] - lo[i]) * rng.gen::<f64>();
                }
                0
            }
            NoiseKind::Gaussian { mean, .. } => {
                self.gaussian_into(rng, mean, &self.roots[0], out);
                0
            }
            NoiseKind::GaussianMixture { weights, means, .. } => {
                let u: f64 = rng.gen();
                let mut k = weights.len() - 1;
                let mut cum = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    cum += w;
                    if u < cum {
                        k = i;
                        break;
                    }
                }
                self.gaussian_into(rng, &means[k], &self.roots[k], out);
                k
            }
        }
    }

    fn gaussian_into<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mean: &[f64],
        root: &DMatrix<f64>,
        out: &mut [f64],
    ) {
        let n = self.dim;
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if n <= 16 {
            &mut z[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..n {
            let mut acc = mean[i];
            for j in 0..n {
                acc += root[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(rng, &mut out);
        DVector::from_vec(out)
    }

    pub fn mean(&self) -> DVector<f64> {
        let v = match &self.kind {
            NoiseKind::Gaussian { mean, .. } => mean.clone(),
            NoiseKind::Uniform { lo, hi } => lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect(),
            NoiseKind::GaussianMixture { weights, means, .. } => {
                let mut acc = vec![0.0; self.dim];
                for (w, m) in weights.iter().zip(means) {
                    for i in 0..self.dim {
                        acc[i] += w * m[i];
                    }
                }
                acc
            }
            NoiseKind::Deterministic { value } => value.clone(),
        };
        DVector::from_vec(v)
    }

    /// Covariance `E((w − w̄)(w − w̄)ᵀ)`.
    pub fn covariance(&self) -> SymMatrix {
        let n = self.dim;
        match &self.kind {
            NoiseKind::Gaussian { cov, .. } => cov.clone(),
            NoiseKind::Uniform { lo, hi } => {
                let d: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| (h - l).powi(2) / 12.0).collect();
                SymMatrix::symmetrize(DMatrix::from_diagonal(&DVector::from_vec(d)))
            }
            NoiseKind::GaussianMixture {
                weights,
                means,
                covs,
            } => {
                let mbar = self.mean();
                let mut acc = DMatrix::zeros(n, n);
                for ((w, m), c) in weights.iter().zip(means).zip(covs) {
                    let d = DVector::from_row_slice(m) - &mbar;
                    acc += (c.as_dmatrix() + &d * d.transpose()) * *w;
                }
                SymMatrix::symmetrize(acc)
            }
            NoiseKind::Deterministic { .. } => SymMatrix::zeros(n),
        }
    }

    /// Exact `(γ, E(q²))` for `d = w − w̄`, `q = dᵀRd`.
    fn central_third_fourth(&self, r: &SymMatrix) -> (DVector<f64>, f64) {
        let n = self.dim;
        let rm = r.as_dmatrix();
        match &self.kind {
            NoiseKind::Deterministic { .. } => (DVector::zeros(n), 0.0),
            NoiseKind::Uniform { lo, hi } => {
                let h: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (h - l)).collect();
                let mu2: Vec<f64> = h.iter().map(|x| x * x / 3.0).collect();
                let mu4: Vec<f64> = h.iter().map(|x| x.powi(4) / 5.0).collect();
                let mut e2 = 0.0;
                for i in 0..n {
                    e2 += rm[(i, i)].powi(2) * mu4[i];
                    for k in 0..n {
                        if k != i {
                            e2 += (rm[(i, i)] * rm[(k, k)] + 2.0 * rm[(i, k)].powi(2))
                                * mu2[i]
                                * mu2[k];
                        }
                    }
                }
                (DVector::zeros(n), e2)
            }
            NoiseKind::Gaussian { cov, .. } => {
                let rs = rm * cov.as_dmatrix();
                let tr = rs.trace();
                (DVector::zeros(n), tr * tr + 2.0 * (&rs * &rs).trace())
            }
            NoiseKind::GaussianMixture {
                weights,
                means,
                covs,
            } => {
                // condition on the component: d = m_k + e, e ~ N(0, S_k)
                let mbar = self.mean();
                let mut gamma = DVector::zeros(n);
                let mut e2 = 0.0;
                for ((w, m), c) in weights.iter().zip(means).zip(covs) {
                    let mk = DVector::from_row_slice(m) - &mbar;
                    let s = c.as_dmatrix();
                    let rs = rm * s;
                    let trs = rs.trace();
                    let quad = mk.dot(&(rm * &mk));
                    gamma += (&mk * (quad + trs) + s * (rm * &mk) * 2.0) * *w;
                    let cross = (rm * &mk).dot(&(s * (rm * &mk)));
                    e2 += w * (4.0 * cross + 2.0 * (&rs * &rs).trace() + (quad + trs).powi(2));
                }
                (gamma, e2)
            }
        }
    }
}

/// Noise law over time: one stationary model, or a finite schedule whose
/// last entry holds for all later steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseProcess {
    Stationary(NoiseModel),
    Schedule(Vec<NoiseModel>),
}

impl NoiseProcess {
    pub fn at(&self, t: usize) -> &NoiseModel {
        match self {
            NoiseProcess::Stationary(m) => m,
            NoiseProcess::Schedule(v) => &v[t.min(v.len() - 1)],
        }
    }

    pub fn is_stationary(&self) -> bool {
        matches!(self, NoiseProcess::Stationary(_))
    }

    pub fn dim(&self) -> usize {
        self.at(0).dim()
    }

    fn validate(&self) -> Result<()> {
        if let NoiseProcess::Schedule(v) = self {
            if v.is_empty() {
                return Err(bad("noise schedule must be nonempty"));
            }
            let d = v[0].dim();
            if let Some(m) = v.iter().find(|m| m.dim() != d) {
                return Err(SimError::DimMismatch(d, m.dim()));
            }
        }
        Ok(())
    }

    pub fn shifted(&self, v: &[f64]) -> Result<Self> {
        Ok(match self {
            NoiseProcess::Stationary(m) => NoiseProcess::Stationary(m.shifted(v)?),
            NoiseProcess::Schedule(ms) => NoiseProcess::Schedule(
                ms.iter().map(|m| m.shifted(v)).collect::<Result<_>>()?,
            ),
        })
    }
}

impl From<NoiseModel> for NoiseProcess {
    fn from(m: NoiseModel) -> Self {
        NoiseProcess::Stationary(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: SquareMatrix,
    pub noise: NoiseProcess,
    pub x0: DVector<f64>,
}

impl LinearSystem {
    pub fn new(a: SquareMatrix, noise: impl Into<NoiseProcess>, x0: Vec<f64>) -> Result<Self> {
        let noise = noise.into();
        noise.validate()?;
        let n = a.dim();
        if noise.dim() != n {
            return Err(SimError::DimMismatch(n, noise.dim()));
        }
        if x0.len() != n {
            return Err(SimError::DimMismatch(n, x0.len()));
        }
        if !finite(&x0) {
            return Err(bad("initial state must be finite"));
        }
        Ok(Self {
            a,
            noise,
            x0: DVector::from_vec(x0),
        })
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn doc(&self) -> LinearSystemDoc {
        LinearSystemDoc {
            a: MatrixDoc {
                rows: self.dim(),
                cols: self.dim(),
                entries: self.a.row_major(),
            },
            noise: self.noise.clone(),
            x0: self.x0.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSystemDoc {
    pub a: MatrixDoc,
    pub noise: NoiseProcess,
    pub x0: Vec<f64>,
}

fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

fn position(rng: &mut ChaCha8Rng, t: usize) {
    rng.set_word_pos((t as u128) << 32);
}

/// States stored flat as `[path][t][coordinate]`, `t = 0..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub n_paths: usize,
    pub horizon: usize,
    pub dim: usize,
    pub seed: u64,
    pub rng_scheme_id: String,
    states: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn state(&self, path: usize, t: usize) -> &[f64] {
        let start = (path * (self.horizon + 1) + t) * self.dim;
        &self.states[start..start + self.dim]
    }

    pub fn raw(&self) -> &[f64] {
        &self.states
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = String::from("path,t");
        for i in 1..=self.dim {
            header.push_str(&format!(",x{i}"));
        }
        writeln!(w, "{header}")?;
        for p in 0..self.n_paths {
            for t in 0..=self.horizon {
                write!(w, "{p},{t}")?;
                for v in self.state(p, t) {
                    write!(w, ",{v:e}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn manifest(&self, sys: &LinearSystem) -> EnsembleManifest {
        EnsembleManifest {
            seed: self.seed,
            rng_scheme_id: self.rng_scheme_id.clone(),
            n_paths: self.n_paths,
            horizon: self.horizon,
            system: sys.doc(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub seed: u64,
    pub rng_scheme_id: String,
    pub n_paths: usize,
    pub horizon: usize,
    pub system: LinearSystemDoc,
}

fn simulate_path(sys: &LinearSystem, seed: u64, path: usize, out: &mut [f64]) {
    let n = sys.dim();
    let a = sys.a.as_dmatrix();
    let mut rng = path_rng(seed, path as u64);
    let mut w = vec![0.0; n];
    out[..n].copy_from_slice(sys.x0.as_slice());
    let steps = out.len() / n - 1;
    for t in 0..steps {
        position(&mut rng, t);
        sys.noise.at(t).sample_into(&mut rng, &mut w);
        let (prev, next) = out[t * n..(t + 2) * n].split_at_mut(n);
        for i in 0..n {
            let mut acc = w[i];
            for j in 0..n {
                acc += a[(i, j)] * prev[j];
            }
            next[i] = acc;
        }
    }
}

pub fn simulate(
    sys: &LinearSystem,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    simulate_with(sys, horizon, n_paths, seed, true)
}

/// [`simulate`] with explicit control over fan-out. Output is identical
/// either way.
pub fn simulate_with(
    sys: &LinearSystem,
    horizon: usize,
    n_paths: usize,
    seed: u64,
    parallel: bool,
) -> Result<TrajectoryEnsemble> {
    if horizon == 0 || n_paths == 0 {
        return Err(SimError::EmptyRun);
    }
    let n = sys.dim();
    let stride = (horizon + 1) * n;
    let mut states = vec![0.0; stride * n_paths];
    if parallel {
        states
            .par_chunks_mut(stride)
            .enumerate()
            .for_each(|(p, chunk)| simulate_path(sys, seed, p, chunk));
    } else {
        states
            .chunks_mut(stride)
            .enumerate()
            .for_each(|(p, chunk)| simulate_path(sys, seed, p, chunk));
    }
    Ok(TrajectoryEnsemble {
        n_paths,
        horizon,
        dim: n,
        seed,
        rng_scheme_id: RNG_SCHEME_ID.to_string(),
        states,
    })
}

/// `ψ(x) = xᵀRx` over an ensemble, stored time-major so each cross
/// section is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyPanel {
    pub n_paths: usize,
    pub horizon: usize,
    values: Vec<f64>,
}

impl EnergyPanel {
    pub fn cross_section(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_paths..(t + 1) * self.n_paths]
    }

    pub fn get(&self, path: usize, t: usize) -> f64 {
        self.values[t * self.n_paths + path]
    }
}

pub fn quad(r: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += r[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

pub fn state_energy(e: &TrajectoryEnsemble, r: &SymMatrix) -> Result<EnergyPanel> {
    if r.dim() != e.dim {
        return Err(SimError::DimMismatch(e.dim, r.dim()));
    }
    let rm = r.as_dmatrix();
    let np = e.n_paths;
    let mut values = vec![0.0; np * (e.horizon + 1)];
    values.par_chunks_mut(np).enumerate().for_each(|(t, row)| {
        for (p, v) in row.iter_mut().enumerate() {
            *v = quad(rm, e.state(p, t));
        }
    });
    Ok(EnergyPanel {
        n_paths: np,
        horizon: e.horizon,
        values,
    })
}

/// `n` i.i.d. draws of `wᵀMw` with `w` from `model`; stream `t` of `seed`.
pub fn noise_energy_sample(
    model: &NoiseModel,
    m: &SymMatrix,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<EmpiricalSample> {
    if m.dim() != model.dim() {
        return Err(SimError::DimMismatch(model.dim(), m.dim()));
    }
    if !matcore::is_psd(m)? {
        return Err(MatError::NotPsd(matcore::lambda_min(m)?).into());
    }
    let mm = m.as_dmatrix();
    let mut rng = path_rng(seed, t as u64);
    let mut w = vec![0.0; model.dim()];
    let values = (0..n)
        .map(|_| {
            model.sample_into(&mut rng, &mut w);
            quad(mm, &w).max(0.0)
        })
        .collect();
    Ok(EmpiricalSample::new(values)?)
}

/// Raw draws of `w` from stream `t` of `seed`.
pub fn noise_draws(model: &NoiseModel, t: usize, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = path_rng(seed, t as u64);
    (0..n).map(|_| model.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StatsSource {
    Analytic,
    MonteCarlo { n_samples: usize, seed: u64 },
}

/// First to fourth order statistics of the disturbance at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStats {
    pub t: usize,
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
    /// `E(d dᵀR d)` with `d = w_t − w̄_t`.
    pub gamma: DVector<f64>,
    /// `E((dᵀRd − tr(ΣR))²)`.
    pub delta: f64,
    /// `(I − A^{t+1})^{-1} Σ_{i=0}^{t} A^i w̄_{t−i}`.
    pub bold_mean: DVector<f64>,
    pub source: StatsSource,
}

fn moments(model: &NoiseModel, r: &SymMatrix, source: StatsSource) -> (DVector<f64>, SymMatrix, DVector<f64>, f64) {
    match source {
        StatsSource::Analytic => {
            let cov = model.covariance();
            let (gamma, e2) = model.central_third_fourth(r);
            let tr = (cov.as_dmatrix() * r.as_dmatrix()).trace();
            (model.mean(), cov, gamma, (e2 - tr * tr).max(0.0))
        }
        StatsSource::MonteCarlo { n_samples, seed } => {
            let draws = noise_draws(model, 0, n_samples.max(2), seed);
            monte_carlo_moments(&draws, r)
        }
    }
}

/// Sample mean, covariance, `γ̂` and `δ̂` of a set of draws.
pub fn monte_carlo_moments(draws: &[DVector<f64>], r: &SymMatrix) -> (DVector<f64>, SymMatrix, DVector<f64>, f64) {
    let n = draws[0].len();
    let k = draws.len() as f64;
    let mean = draws.iter().fold(DVector::zeros(n), |acc, w| acc + w) / k;
    let mut cov = DMatrix::zeros(n, n);
    for w in draws {
        let d = w - &mean;
        cov += &d * d.transpose();
    }
    let cov = SymMatrix::symmetrize(cov / k);
    let rm = r.as_dmatrix();
    let tr = (cov.as_dmatrix() * rm).trace();
    let mut gamma = DVector::zeros(n);
    let mut delta = 0.0;
    for w in draws {
        let d = w - &mean;
        let q = quad(rm, d.as_slice());
        gamma += &d * q;
        delta += (q - tr).powi(2);
    }
    (mean, cov, gamma / k, delta / k)
}

pub fn noise_stats(
    process: &NoiseProcess,
    a: &SquareMatrix,
    r: &SymMatrix,
    t: usize,
    source: StatsSource,
) -> Result<NoiseStats> {
    let n = a.dim();
    if process.dim() != n {
        return Err(SimError::DimMismatch(n, process.dim()));
    }
    if r.dim() != n {
        return Err(SimError::DimMismatch(n, r.dim()));
    }
    let (mean, cov, gamma, delta) = moments(process.at(t), r, source);
    let bold_mean = bold_mean(process, a, t)?;
    Ok(NoiseStats {
        t,
        mean,
        cov,
        gamma,
        delta,
        bold_mean,
        source,
    })
}

/// `𝐰̄_t = (I − A^{t+1})^{-1} Σ_{i=0}^{t} A^i w̄_{t−i}`.
pub fn bold_mean(process: &NoiseProcess, a: &SquareMatrix, t: usize) -> Result<DVector<f64>> {
    let rho = matcore::spectral_radius(a)?;
    if rho >= 1.0 - matcore::SCHUR_MARGIN {
        return Err(SimError::NotSchurStable(rho));
    }
    let n = a.dim();
    let am = a.as_dmatrix();
    let mut acc = DVector::zeros(n);
    let mut pow = DMatrix::identity(n, n);
    for i in 0..=t {
        acc += &pow * process.at(t - i).mean();
        pow = &pow * am;
    }
    // pow now holds A^{t+1}
    let lhs = DMatrix::identity(n, n) - pow;
    lhs.lu()
        .solve(&acc)
        .ok_or(SimError::NotSchurStable(rho))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reality {
    /// `η ~ U[0,1]` independent of the noise, `E(η) = 1/2`.
    Independent,
    /// `η = clip(−w + 1/4, 0, 1)` built from the paired draw; `eta_mean` is
    /// `E(η)` under the nominal law.
    Clipped { eta_mean: f64 },
}

/// `E(clip(−w + 1/4, 0, 1))` for `w ~ U[lo, hi]`, by integrating the clip.
pub fn clipped_eta_mean_uniform(lo: f64, hi: f64) -> f64 {
    let (a, b) = (0.25 - hi, 0.25 - lo);
    if b <= a {
        return clip01(a);
    }
    let g = |z: f64| {
        if z <= 0.0 {
            0.0
        } else if z <= 1.0 {
            0.5 * z * z
        } else {
            0.5 + (z - 1.0)
        }
    };
    (g(b) - g(a)) / (b - a)
}

/// Monte Carlo estimate of the same quantity for any scalar noise model.
pub fn clipped_eta_mean_mc(model: &NoiseModel, n: usize, seed: u64) -> f64 {
    let mut rng = path_rng(seed, 0);
    let mut w = [0.0];
    let mut acc = 0.0;
    for _ in 0..n {
        model.sample_into(&mut rng, &mut w);
        acc += clip01(0.25 - w[0]);
    }
    acc / n as f64
}

fn clip01(z: f64) -> f64 {
    z.clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct AltReality {
    pub energies: EmpiricalSample,
    /// The density `ξ = 1 + η − E(η)` applied to each energy.
    pub xi: Vec<f64>,
}

/// Perturbed energies `w²ξ` of the alternative realities.
pub fn alt_reality_energy(
    nominal: &EmpiricalSample,
    which: Reality,
    paired_w: Option<&[f64]>,
    seed: u64,
) -> Result<AltReality> {
    let n = nominal.len();
    let xi: Vec<f64> = match which {
        Reality::Independent => {
            let mut rng = path_rng(seed, 1);
            (0..n).map(|_| 0.5 + rng.gen::<f64>()).collect()
        }
        Reality::Clipped { eta_mean } => {
            let w = paired_w.ok_or(SimError::MissingPairedDraws)?;
            if w.len() != n {
                return Err(SimError::DimMismatch(n, w.len()));
            }
            w.iter().map(|&wi| 1.0 + clip01(0.25 - wi) - eta_mean).collect()
        }
    };
    let energies = EmpiricalSample::new(
        nominal
            .values()
            .iter()
            .zip(&xi)
            .map(|(e, x)| e * x)
            .collect(),
    )?;
    Ok(AltReality { energies, xi })
}
