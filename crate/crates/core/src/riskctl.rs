//! Myopic risk-aware state feedback for `x_{t+1} = Ǎx_t + B̌u_t + w̌_t`.
//!
//! The controller minimizes `ρ_ν(ψ(x_{t+1}) | x_t) + μ uᵀu` one step ahead,
//! which gives `u_t = −K x_t − T γ`.

use crate::certs::{self, CertError, HChoice, MeanCondVarOptions};
use crate::matcore::{self, MatError, RectMatrix, SquareMatrix, SymMatrix};
use crate::stochsys::{self, LinearSystem, NoiseModel, NoiseProcess, SimError, StatsSource};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

pub const MAX_GAIN_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum CtlError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cert(#[from] CertError),
    #[error("muI + B^T R_nu B is singular or ill conditioned (condition number {0:e})")]
    SingularGainSystem(f64),
    #[error("controller synthesis needs stationary noise")]
    NonStationaryNoise,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("parameter {name} must be finite and nonnegative, got {value}")]
    BadParameter { name: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, CtlError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: SquareMatrix,
    pub b: RectMatrix,
    pub r: SymMatrix,
    pub noise: NoiseProcess,
}

impl PlantModel {
    pub fn new(
        a: SquareMatrix,
        b: RectMatrix,
        r: SymMatrix,
        noise: impl Into<NoiseProcess>,
    ) -> Result<Self> {
        let noise = noise.into();
        let n = a.dim();
        if b.nrows() != n || r.dim() != n || noise.dim() != n {
            return Err(CtlError::DimMismatch(format!(
                "A is {n}x{n}, B has {} rows, R is {}, noise is {}",
                b.nrows(),
                r.dim(),
                noise.dim()
            )));
        }
        if !matcore::is_pd(&r)? {
            return Err(MatError::NotPd(matcore::lambda_min(&r)?).into());
        }
        Ok(Self { a, b, r, noise })
    }

    fn stationary_noise(&self) -> Result<&NoiseModel> {
        match &self.noise {
            NoiseProcess::Stationary(m) => Ok(m),
            NoiseProcess::Schedule(_) => Err(CtlError::NonStationaryNoise),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MyopicController {
    pub k: RectMatrix,
    pub t: RectMatrix,
    pub nu: f64,
    pub mu: f64,
    pub gamma: Vec<f64>,
    pub gamma_source: StatsSource,
}

impl MyopicController {
    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        -(self.k.as_dmatrix() * x) - self.bias()
    }

    /// `T γ`.
    pub fn bias(&self) -> DVector<f64> {
        self.t.as_dmatrix() * DVector::from_column_slice(&self.gamma)
    }
}

fn check_param(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(CtlError::BadParameter { name, value })
    }
}

/// `R_ν = R + 4νRΣR`.
pub fn r_nu(r: &SymMatrix, sigma: &SymMatrix, nu: f64) -> Result<SymMatrix> {
    let rm = r.as_dmatrix();
    Ok(r.add(&SymMatrix::symmetrize(rm * sigma.as_dmatrix() * rm * (4.0 * nu)))?)
}

pub fn synthesize(plant: &PlantModel, nu: f64, mu: f64) -> Result<MyopicController> {
    synthesize_with(plant, nu, mu, StatsSource::Analytic)
}

pub fn synthesize_with(
    plant: &PlantModel,
    nu: f64,
    mu: f64,
    source: StatsSource,
) -> Result<MyopicController> {
    check_param("nu", nu)?;
    check_param("mu", mu)?;
    let model = plant.stationary_noise()?;
    let n = plant.a.dim();
    // A = 0 so the stats call never needs a stable plant
    let st = stochsys::noise_stats(
        &plant.noise,
        &SquareMatrix::zeros(n),
        &plant.r,
        0,
        source,
    )?;
    let sigma = match source {
        StatsSource::Analytic => model.covariance(),
        StatsSource::MonteCarlo { .. } => st.cov.clone(),
    };
    let rn = r_nu(&plant.r, &sigma, nu)?;
    let b = plant.b.as_dmatrix();
    let m = b.ncols();
    let gram = DMatrix::identity(m, m) * mu + b.transpose() * rn.as_dmatrix() * b;
    let sv = gram.singular_values();
    let smin = sv.min();
    let cond = if smin > 0.0 { sv.max() / smin } else { f64::INFINITY };
    if cond.is_nan() || cond >= MAX_GAIN_CONDITION {
        return Err(CtlError::SingularGainSystem(cond));
    }
    let lu = gram.lu();
    let solve = |rhs: DMatrix<f64>| {
        lu.solve(&rhs)
            .ok_or(CtlError::SingularGainSystem(f64::INFINITY))
    };
    let k = solve(b.transpose() * rn.as_dmatrix() * plant.a.as_dmatrix())?;
    let t = solve(b.transpose() * plant.r.as_dmatrix() * (2.0 * nu))?;
    Ok(MyopicController {
        k: RectMatrix::from_dmatrix(k)?,
        t: RectMatrix::from_dmatrix(t)?,
        nu,
        mu,
        gamma: st.gamma.as_slice().to_vec(),
        gamma_source: source,
    })
}

/// Closed loop `x_{t+1} = (Ǎ − B̌K)x_t + (w̌_t − B̌Tγ)`.
pub fn close_loop(plant: &PlantModel, ctrl: &MyopicController, x0: Vec<f64>) -> Result<LinearSystem> {
    let n = plant.a.dim();
    let m = plant.b.ncols();
    if ctrl.k.nrows() != m || ctrl.k.ncols() != n || ctrl.t.nrows() != m || ctrl.t.ncols() != n {
        return Err(CtlError::DimMismatch("controller gains do not fit the plant".into()));
    }
    if ctrl.gamma.len() != n {
        return Err(CtlError::DimMismatch("gamma length".into()));
    }
    let b = plant.b.as_dmatrix();
    let a = SquareMatrix::from_dmatrix(plant.a.as_dmatrix() - b * ctrl.k.as_dmatrix())?;
    let shift = -(b * ctrl.bias());
    let noise = if shift.iter().all(|&v| v == 0.0) {
        plant.noise.clone()
    } else {
        plant.noise.shifted(shift.as_slice())?
    };
    Ok(LinearSystem::new(a, noise, x0)?)
}

/// Conditional myopic objective
/// `E(x⁺ᵀR_νx⁺ + 4νx⁺ᵀRγ | x) + μuᵀu`, `x⁺ = Ǎx + B̌u + w`, up to terms
/// that do not depend on `u`.
pub fn myopic_objective(
    plant: &PlantModel,
    rn: &SymMatrix,
    gamma: &DVector<f64>,
    nu: f64,
    mu: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    let model = plant.stationary_noise()?;
    let z = plant.a.as_dmatrix() * x + plant.b.as_dmatrix() * u + model.mean();
    let lin = 4.0 * nu * z.dot(&(plant.r.as_dmatrix() * gamma));
    Ok(rn.quad_form(&z) + lin + mu * u.norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub horizon: usize,
    pub stats: StatsSource,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            stats: StatsSource::Analytic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub nu: f64,
    pub rate_ratio: f64,
    pub bias_ratio: f64,
    pub feasible: bool,
    /// Why the point is infeasible, if it is.
    pub reason: Option<String>,
}

fn ratio_point(plant: &PlantModel, mu: f64, nu: f64, cfg: &CompareConfig) -> Result<(f64, f64)> {
    let n = plant.a.dim();
    let x0 = vec![0.0; n];
    let aware = close_loop(plant, &synthesize_with(plant, nu, mu, cfg.stats)?, x0.clone())?;
    let neutral = close_loop(plant, &synthesize_with(plant, 0.0, mu, cfg.stats)?, x0)?;
    let mut opts = MeanCondVarOptions::new(n, cfg.horizon);
    opts.h_nu = HChoice::identity_q(n);
    opts.h_0 = HChoice::identity_q(n);
    opts.stats = cfg.stats;
    let ca = certs::theorem3_certificate(&aware, &plant.r, nu, &opts)?;
    let cn = certs::theorem3_certificate(&neutral, &plant.r, nu, &opts)?;
    Ok((ca.lambda_nu / cn.lambda_nu, ca.b_nu / cn.b_nu))
}

/// Rate and bias ratios of the risk-aware against the risk-neutral
/// controller, both certified at the same `ν` with `Q = I`.
pub fn compare_controllers(
    plant: &PlantModel,
    mu: f64,
    nu_grid: &[f64],
    cfg: &CompareConfig,
) -> Vec<RatioRow> {
    nu_grid
        .par_iter()
        .map(|&nu| match ratio_point(plant, mu, nu, cfg) {
            Ok((rate, bias)) => RatioRow {
                nu,
                rate_ratio: rate,
                bias_ratio: bias,
                feasible: true,
                reason: None,
            },
            Err(e) => RatioRow {
                nu,
                rate_ratio: f64::NAN,
                bias_ratio: f64::NAN,
                feasible: false,
                reason: Some(e.to_string()),
            },
        })
        .collect()
}

pub fn write_ratio_csv<W: Write>(rows: &[RatioRow], mut w: W) -> io::Result<()> {
    writeln!(w, "nu,rate_ratio,bias_ratio,feasible")?;
    for r in rows {
        writeln!(
            w,
            "{},{:e},{:e},{}",
            r.nu, r.rate_ratio, r.bias_ratio, r.feasible as u8
        )?;
    }
    Ok(())
}

/// Plant of the worked example: `Ǎ = [[0.8, 0.4], [0, −0.8]]`, `B̌ = [0; 1]`,
/// `R = I` and the skewed mixture `0.7·N(0, I) + 0.3·N([2, 15], 10I)`.
pub fn example_plant() -> PlantModel {
    let a = SquareMatrix::from_rows(&[vec![0.8, 0.4], vec![0.0, -0.8]]).unwrap();
    let b = RectMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let noise = NoiseModel::mixture(
        vec![0.7, 0.3],
        vec![vec![0.0, 0.0], vec![2.0, 15.0]],
        vec![SymMatrix::identity(2), SymMatrix::scaled_identity(2, 10.0)],
    )
    .unwrap();
    PlantModel::new(a, b, SymMatrix::identity(2), noise).unwrap()
}
