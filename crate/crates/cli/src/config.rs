//! Run configuration: one JSON document, versioned, unknown keys rejected.

use crate::{CliError, Result};
use riskstab::certs::{BootstrapConfig, HChoice, KappaPolicy, NoiseEnergyConfig, SigmaUChoice, MeanCondVarOptions};
use riskstab::matcore::{self, RectMatrix, SquareMatrix, SymMatrix};
use riskstab::riskctl::{CompareConfig, PlantModel};
use riskstab::riskfn::RiskSpec;
use riskstab::stochsys::{LinearSystem, NoiseProcess, StatsSource};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

fn d_horizon() -> usize {
    50
}
fn d_paths() -> usize {
    100_000
}
fn d_export_paths() -> usize {
    1000
}
fn d_energy_samples() -> usize {
    100_000
}
fn d_resamples() -> usize {
    1000
}
fn d_confidence() -> f64 {
    0.99
}
fn d_kappa() -> KappaPolicy {
    KappaPolicy::GridArgmin
}
fn d_stats() -> StatsSource {
    StatsSource::Analytic
}
fn d_nu_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.5).collect()
}
fn d_step() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub a: SquareMatrix,
    /// Input matrix; only the controller commands need it.
    #[serde(default)]
    pub b: Option<RectMatrix>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertConfig {
    /// `Q` of the Lyapunov construction of `H`; identity when absent.
    #[serde(default)]
    pub q: Option<SymMatrix>,
    /// Fixed `H`, used instead of the Lyapunov construction.
    #[serde(default)]
    pub h: Option<SymMatrix>,
    #[serde(default = "d_kappa")]
    pub kappa: KappaPolicy,
    /// Upper bound on the noise covariance for the mean-conditional-variance
    /// certificate; defaults to the covariance itself for stationary noise.
    #[serde(default)]
    pub sigma_u: Option<SymMatrix>,
    #[serde(default = "d_energy_samples")]
    pub noise_energy_samples: usize,
    #[serde(default = "d_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "d_confidence")]
    pub confidence: f64,
    #[serde(default = "d_stats")]
    pub stats: StatsSource,
}

impl Default for CertConfig {
    fn default() -> Self {
        Self {
            q: None,
            h: None,
            kappa: d_kappa(),
            sigma_u: None,
            noise_energy_samples: d_energy_samples(),
            bootstrap_resamples: d_resamples(),
            confidence: d_confidence(),
            stats: d_stats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub mu: f64,
    pub nu: f64,
    #[serde(default = "d_nu_grid")]
    pub nu_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KappaSweepConfig {
    /// Values of η to sweep; the system's own η when absent.
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
    #[serde(default = "d_step")]
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub system: SystemConfig,
    pub noise: NoiseProcess,
    /// State weight `R`; identity when absent.
    #[serde(default)]
    pub r: Option<SymMatrix>,
    #[serde(default)]
    pub risk: Option<RiskSpec>,
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    #[serde(default = "d_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Paths written to `trajectories.csv` by `simulate`; summaries use all.
    #[serde(default = "d_export_paths")]
    pub export_paths: usize,
    #[serde(default)]
    pub certificate: CertConfig,
    #[serde(default)]
    pub controller: Option<ControllerConfig>,
    #[serde(default)]
    pub kappa_sweep: Option<KappaSweepConfig>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// Seeds derived from the run seed. Each consumer gets its own key so that
/// changing one sample size never shifts another stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub simulation: u64,
    pub noise_energy: u64,
    pub bootstrap: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        // a manifest embeds the config it ran with
        let value = match value {
            serde_json::Value::Object(mut m) if m.contains_key("manifest_version") => m
                .remove("config")
                .ok_or_else(|| CliError::Config("manifest has no config".into()))?,
            v => v,
        };
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.horizon == 0 || self.n_paths == 0 {
            return bad("horizon and n_paths must be positive".into());
        }
        let c = &self.certificate;
        if !(c.confidence > 0.0 && c.confidence < 1.0) {
            return bad(format!("confidence must lie in (0, 1), got {}", c.confidence));
        }
        if let KappaPolicy::Fixed(k) = c.kappa {
            if !(k > 0.0 && k < 1.0) {
                return bad(format!("certificate.kappa must lie in (0, 1), got {k}"));
            }
        }
        if c.noise_energy_samples == 0 {
            return bad("noise_energy_samples must be positive".into());
        }
        if c.q.is_some() && c.h.is_some() {
            return bad("give at most one of certificate.q and certificate.h".into());
        }
        if let Some(risk) = &self.risk {
            risk.validate()?;
        }
        let n = self.system.a.dim();
        let sys = self.linear_system()?;
        let r = self.r()?;
        if !matcore::is_pd(&r)? {
            return bad("R must be positive definite".into());
        }
        for (name, m) in [("q", &c.q), ("h", &c.h), ("sigma_u", &c.sigma_u)] {
            if let Some(m) = m {
                if m.dim() != n {
                    return bad(format!("certificate.{name} must be {n}x{n}"));
                }
            }
        }
        if let Some(b) = &self.system.b {
            if b.nrows() != n {
                return bad(format!("B must have {n} rows"));
            }
        }
        if let Some(ctl) = &self.controller {
            let ok = |v: f64| v.is_finite() && v >= 0.0;
            if !ok(ctl.mu) || !ok(ctl.nu) || !ctl.nu_grid.iter().all(|&v| ok(v)) {
                return bad("controller parameters must be finite and nonnegative".into());
            }
        }
        if let Some(k) = &self.kappa_sweep {
            if !(k.step > 0.0 && k.step < 0.5) {
                return bad("kappa_sweep.step must lie in (0, 0.5)".into());
            }
        }
        drop(sys);
        Ok(())
    }

    pub fn r(&self) -> Result<SymMatrix> {
        Ok(match &self.r {
            Some(r) => {
                if r.dim() != self.system.a.dim() {
                    return Err(CliError::Config("R has the wrong dimension".into()));
                }
                r.clone()
            }
            None => SymMatrix::identity(self.system.a.dim()),
        })
    }

    pub fn linear_system(&self) -> Result<LinearSystem> {
        Ok(LinearSystem::new(
            self.system.a.clone(),
            self.noise.clone(),
            self.system.x0.clone(),
        )?)
    }

    pub fn plant(&self) -> Result<PlantModel> {
        let b = self
            .system
            .b
            .clone()
            .ok_or_else(|| CliError::Config("system.b is required for controller synthesis".into()))?;
        Ok(PlantModel::new(self.system.a.clone(), b, self.r()?, self.noise.clone())?)
    }

    pub fn risk(&self) -> Result<RiskSpec> {
        self.risk
            .ok_or_else(|| CliError::Config("risk is required for this command".into()))
    }

    pub fn controller(&self) -> Result<&ControllerConfig> {
        self.controller
            .as_ref()
            .ok_or_else(|| CliError::Config("controller section is required".into()))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            simulation: self.seed,
            noise_energy: self.seed.wrapping_add(1),
            bootstrap: self.seed.wrapping_add(2),
        }
    }

    pub fn h_choice(&self) -> HChoice {
        let n = self.system.a.dim();
        match (&self.certificate.h, &self.certificate.q) {
            (Some(h), _) => HChoice::Given(h.clone()),
            (None, Some(q)) => HChoice::Lyapunov(q.clone()),
            (None, None) => HChoice::identity_q(n),
        }
    }

    pub fn noise_energy(&self) -> NoiseEnergyConfig {
        NoiseEnergyConfig {
            n_samples: self.certificate.noise_energy_samples,
            seed: self.seeds().noise_energy,
            horizon_for_sup: self.horizon,
            bootstrap_resamples: self.certificate.bootstrap_resamples,
            confidence: self.certificate.confidence,
        }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            resamples: self.certificate.bootstrap_resamples,
            confidence: self.certificate.confidence,
            seed: self.seeds().bootstrap,
        }
    }

    pub fn mean_cond_var_options(&self) -> MeanCondVarOptions {
        let n = self.system.a.dim();
        let mut o = MeanCondVarOptions::new(n, self.horizon);
        if let Some(q) = &self.certificate.q {
            o.h_nu = HChoice::Lyapunov(q.clone());
            o.h_0 = HChoice::Lyapunov(q.clone());
        }
        if let Some(h) = &self.certificate.h {
            o.h_nu = HChoice::Given(h.clone());
            o.h_0 = HChoice::Given(h.clone());
        }
        if let Some(s) = &self.certificate.sigma_u {
            o.sigma_u = SigmaUChoice::Given(s.clone());
        }
        o.stats = self.certificate.stats;
        o
    }

    pub fn compare_config(&self) -> CompareConfig {
        CompareConfig {
            horizon: self.horizon,
            stats: self.certificate.stats,
        }
    }
}
