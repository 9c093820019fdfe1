//! Configuration-driven front end for `riskstab`.
//!
//! Every command reads one JSON [`RunConfig`](config::RunConfig) (or a
//! manifest written by an earlier run), writes plot-ready CSV files
//! atomically into an output directory and finishes with `manifest.json`.

pub mod commands;
pub mod config;
pub mod output;
pub mod reproduce;

use riskstab::certs::CertError;
use riskstab::matcore::MatError;
use riskstab::riskctl::CtlError;
use riskstab::riskfn::RiskError;
use riskstab::stochsys::SimError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ASSUMPTION: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("certificate does not match the configuration: {0}")]
    Mismatch(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Mismatch(_) => EXIT_CONFIG,
            CliError::Assumption(_) => EXIT_ASSUMPTION,
            CliError::Verification(_) => EXIT_VERIFICATION,
            CliError::Io { .. } | CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<MatError> for CliError {
    fn from(e: MatError) -> Self {
        match e {
            MatError::NotSchurStable(_) => CliError::Assumption(e.to_string()),
            MatError::NonConvergence => CliError::Internal(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<RiskError> for CliError {
    fn from(e: RiskError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Mat(m) => m.into(),
            SimError::NotSchurStable(_) => CliError::Assumption(e.to_string()),
            SimError::Io(_) => CliError::Internal(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CertError> for CliError {
    fn from(e: CertError) -> Self {
        match e {
            CertError::Mat(m) => m.into(),
            CertError::Sim(s) => s.into(),
            CertError::Risk(r) => r.into(),
            CertError::AssumptionViolated(_)
            | CertError::SigmaDominanceViolated { .. }
            | CertError::NonCoherentRisk(_)
            | CertError::FourthMomentUnavailable => CliError::Assumption(e.to_string()),
            CertError::Mismatch(_) => CliError::Mismatch(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CtlError> for CliError {
    fn from(e: CtlError) -> Self {
        match e {
            CtlError::Mat(m) => m.into(),
            CtlError::Sim(s) => s.into(),
            CtlError::Cert(c) => c.into(),
            CtlError::SingularGainSystem(_) | CtlError::NonStationaryNoise => {
                CliError::Assumption(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}
