//! The subcommands. Each one renders into an [`OutputDir`] and returns the
//! derived constants recorded in the manifest.

use crate::config::RunConfig;
use crate::output::{self, OutputDir, RunManifest};
use crate::reproduce::{self, Bundle};
use crate::{CliError, Result};
use riskstab::certs::{
    self, Branch, Certificate, KappaPolicy, McvCertificate, StabilityCertificate,
    VerificationReport,
};
use riskstab::riskctl;
use riskstab::riskfn::{self, EmpiricalSample, RiskSpec};
use riskstab::stochsys::{self, EnergyPanel};
use serde_json::{json, Value};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Certify,
    Verify { certificate: PathBuf },
    Simulate,
    Controller,
    SweepKappa,
    Reproduce(Bundle),
}

impl Command {
    pub fn name(&self) -> String {
        match self {
            Command::Certify => "certify".into(),
            Command::Verify { .. } => "verify".into(),
            Command::Simulate => "simulate".into(),
            Command::Controller => "controller".into(),
            Command::SweepKappa => "sweep-kappa".into(),
            Command::Reproduce(b) => format!("reproduce {}", b.name()),
        }
    }
}

/// Command-line values that replace fields of the loaded config. The
/// manifest records the config after they are applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub horizon: Option<usize>,
    pub kappa: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.paths {
            cfg.n_paths = n;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(k) = self.kappa {
            cfg.certificate.kappa = KappaPolicy::Fixed(k);
        }
        cfg.validate()
    }
}

/// Result of a command body: manifest constants, plus the failure to
/// report once every file is on disk.
pub struct Outcome {
    pub derived: Value,
    pub failure: Option<CliError>,
}

impl From<Value> for Outcome {
    fn from(derived: Value) -> Self {
        Self {
            derived,
            failure: None,
        }
    }
}

/// Runs one command into `out_dir` and writes its manifest. A verification
/// failure still leaves the full output behind before it is returned.
pub fn execute(cmd: &Command, cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    let mut out = OutputDir::create(out_dir)?;
    let outcome = match cmd {
        Command::Certify => certify(cfg, &mut out)?,
        Command::Verify { certificate } => verify(cfg, certificate, &mut out)?,
        Command::Simulate => simulate(cfg, &mut out)?,
        Command::Controller => controller(cfg, &mut out)?,
        Command::SweepKappa => sweep_kappa(cfg, &mut out)?,
        Command::Reproduce(b) => reproduce::run(*b, cfg, &mut out)?,
    };
    let manifest = out.finish(&cmd.name(), cfg, outcome.derived)?;
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

pub fn certificate_for(cfg: &RunConfig) -> Result<Certificate> {
    let sys = cfg.linear_system()?;
    let r = cfg.r()?;
    let risk = cfg.risk()?;
    Ok(match risk {
        RiskSpec::MeanCondVar { nu } => Certificate::MeanCondVar(certs::theorem3_certificate(
            &sys,
            &r,
            nu,
            &cfg.mean_cond_var_options(),
        )?),
        _ => Certificate::Coherent(certs::theorem2_certificate(
            &sys,
            &r,
            &risk,
            cfg.certificate.kappa,
            &cfg.h_choice(),
            &cfg.noise_energy(),
        )?),
    })
}

fn coherent_summary(c: &StabilityCertificate) -> String {
    let branch = match c.branch {
        Branch::EtaLtOne => "eta < 1",
        Branch::EtaEqOne => "eta = 1",
    };
    let mut s = String::new();
    s.push_str(&format!("risk      {:?}\n", c.risk));
    s.push_str(&format!("branch    {branch}\n"));
    s.push_str(&format!("lambda    {:.6}\n", c.lambda));
    s.push_str(&format!("a         {:.6}\n", c.a));
    s.push_str(&format!("b         {:.6}\n", c.b));
    s.push_str(&format!("eta       {:.6}\n", c.eta));
    match c.kappa {
        Some(k) => s.push_str(&format!("kappa     {k:.6}\n")),
        None => s.push_str("kappa     -\n"),
    }
    s.push_str(&format!("c         {:.6}\n", c.c));
    s.push_str(&format!("b_prime   {:.6} (point {:.6})\n", c.b_prime, c.provenance.b_prime_point));
    s
}

fn mcv_summary(c: &McvCertificate) -> String {
    let mut s = String::new();
    s.push_str(&format!("risk       MeanCondVar {{ nu: {} }}\n", c.nu));
    s.push_str(&format!("lambda_nu  {:.6}\n", c.lambda_nu));
    s.push_str(&format!("lambda_0   {:.6}\n", c.lambda_0));
    s.push_str(&format!("a_nu       {:.6}\n", c.a_nu));
    s.push_str(&format!("a_0        {:.6}\n", c.a_0));
    s.push_str(&format!("b_nu       {:.6}\n", c.b_nu));
    s.push_str(&format!("c_nu       {:.6}\n", c.c_nu));
    s.push_str(&format!("gamma_sup  {:.6}\n", c.gamma_sup));
    s
}

fn certify(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome> {
    let cert = certificate_for(cfg)?;
    out.write("certificate.json", cert.to_json().as_bytes())?;
    let (summary, derived) = match &cert {
        Certificate::Coherent(c) => (
            coherent_summary(c),
            json!({
                "kind": "coherent",
                "lambda": c.lambda, "a": c.a, "b": c.b, "c": c.c,
                "eta": c.eta, "kappa": c.kappa, "branch": c.branch,
                "h": c.h.row_major(),
                "b_prime": {
                    "point": c.provenance.b_prime_point,
                    "upper": c.b_prime,
                    "method": c.provenance.b_prime_method,
                    "confidence": cfg.certificate.confidence,
                },
            }),
        ),
        Certificate::MeanCondVar(c) => (
            mcv_summary(c),
            json!({
                "kind": "mean_cond_var",
                "lambda_nu": c.lambda_nu, "lambda_0": c.lambda_0,
                "a_nu": c.a_nu, "a_0": c.a_0, "b_nu": c.b_nu, "c_nu": c.c_nu,
                "h_nu": c.h_nu.row_major(), "h_0": c.h_0.row_major(),
                "sigma_u": c.sigma_u.row_major(),
                "gamma_sup": c.gamma_sup, "gamma_norms": c.gamma_norms,
                "stats_source": c.stats_source,
            }),
        ),
    };
    out.write("certificate_summary.txt", summary.as_bytes())?;
    Ok(derived.into())
}

fn load_certificate(path: &Path) -> Result<Certificate> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    match certs::parse_certificate(&text) {
        Ok(c) => Ok(c),
        Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
    }
}

fn verify(cfg: &RunConfig, cert_path: &Path, out: &mut OutputDir) -> Result<Outcome> {
    let cert = load_certificate(cert_path)?;
    let sys = cfg.linear_system()?;
    let r = cfg.r()?;
    cert.check_matches(&sys, &r)?;
    if let Some(risk) = cfg.risk {
        if risk != cert.risk() {
            return Err(CliError::Mismatch(format!(
                "config risk {risk:?} but certificate is for {:?}",
                cert.risk()
            )));
        }
    }
    let boot = cfg.bootstrap();
    let mut coverage: Option<VerificationReport> = None;
    let report = match &cert {
        Certificate::Coherent(c) => {
            let e = stochsys::simulate(&sys, cfg.horizon, cfg.n_paths, cfg.seeds().simulation)?;
            let panel = stochsys::state_energy(&e, &r)?;
            let psi = r.quad_form(&sys.x0);
            if let RiskSpec::Cvar { .. } = c.risk {
                coverage = Some(certs::probabilistic_check(
                    c,
                    &panel,
                    psi,
                    cfg.certificate.confidence,
                )?);
            }
            certs::verify_panel(&c.risk, &panel, |t| c.envelope(t, psi), &boot)?
        }
        Certificate::MeanCondVar(_) => certs::verify_envelope(
            &cert,
            &sys,
            &r,
            cfg.horizon,
            cfg.n_paths,
            cfg.seeds().simulation,
            &boot,
        )?,
    };
    out.write_with("verification.csv", |w| report.write_csv(w))?;
    let violations = report.violations();
    let mut derived = json!({
        "risk": cert.risk(),
        "limsup_bound": certs::limsup_bound(&cert),
        "violations": violations,
    });
    let mut failures = Vec::new();
    if !violations.is_empty() {
        failures.push(format!("envelope exceeded at t = {violations:?}"));
    }
    if let Some(cov) = &coverage {
        out.write_with("coverage.csv", |w| cov.write_csv(w))?;
        let v = cov.violations();
        if !v.is_empty() {
            failures.push(format!("coverage below 1 - alpha at t = {v:?}"));
        }
        derived["coverage_violations"] = json!(v);
    }
    Ok(Outcome {
        derived,
        failure: (!failures.is_empty()).then(|| CliError::Verification(failures.join("; "))),
    })
}

type RiskColumn<'a> = &'a dyn Fn(usize, &EmpiricalSample) -> Result<f64>;

/// Per-time summary of the energy panel; `risk` is appended when the
/// config names one.
fn energy_summary(
    panel: &EnergyPanel,
    risk_col: Option<RiskColumn<'_>>,
    w: &mut Vec<u8>,
) -> Result<()> {
    let header = if risk_col.is_some() {
        "t,mean,q50,q90,q99,max,risk"
    } else {
        "t,mean,q50,q90,q99,max"
    };
    let io = |e: std::io::Error| CliError::Internal(e.to_string());
    writeln!(w, "{header}").map_err(io)?;
    for t in 0..=panel.horizon {
        let s = EmpiricalSample::new(panel.cross_section(t).to_vec())?;
        let sorted = s.sorted();
        write!(
            w,
            "{},{:e},{:e},{:e},{:e},{:e}",
            t,
            s.mean(),
            output::quantile(sorted, 0.5),
            output::quantile(sorted, 0.9),
            output::quantile(sorted, 0.99),
            sorted[sorted.len() - 1]
        )
        .map_err(io)?;
        if let Some(f) = risk_col {
            write!(w, ",{:e}", f(t, &s)?).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome> {
    let sys = cfg.linear_system()?;
    let r = cfg.r()?;
    let e = stochsys::simulate(&sys, cfg.horizon, cfg.n_paths, cfg.seeds().simulation)?;
    let export = cfg.export_paths.min(e.n_paths);
    out.write_with("trajectories.csv", |w| {
        let mut header = String::from("path,t");
        for i in 1..=e.dim {
            header.push_str(&format!(",x{i}"));
        }
        writeln!(w, "{header}")?;
        for p in 0..export {
            for t in 0..=e.horizon {
                write!(w, "{p},{t}")?;
                for v in e.state(p, t) {
                    write!(w, ",{v:e}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    })?;
    let ens = serde_json::to_string_pretty(&e.manifest(&sys)).expect("ensemble manifest");
    out.write("trajectories_manifest.json", ens.as_bytes())?;

    let panel = stochsys::state_energy(&e, &r)?;
    let mut buf = Vec::new();
    match cfg.risk {
        Some(RiskSpec::MeanCondVar { nu }) => {
            let psi0 = r.quad_form(&sys.x0);
            let f = |t: usize, _: &EmpiricalSample| -> Result<f64> {
                if t == 0 {
                    Ok(psi0)
                } else {
                    Ok(certs::rho_nu_monte_carlo(&e, &sys, &r, nu, t)?.0)
                }
            };
            energy_summary(&panel, Some(&f), &mut buf)?;
        }
        Some(spec) => {
            let f = |_: usize, s: &EmpiricalSample| -> Result<f64> {
                Ok(riskfn::evaluate_sample(&spec, s)?)
            };
            energy_summary(&panel, Some(&f), &mut buf)?;
        }
        None => energy_summary(&panel, None, &mut buf)?,
    }
    out.write("energy_summary.csv", &buf)?;
    Ok(json!({
        "n_paths": e.n_paths,
        "exported_paths": export,
        "horizon": e.horizon,
        "rng_scheme": e.rng_scheme_id,
    })
    .into())
}

fn controller(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome> {
    let plant = cfg.plant()?;
    let ctl = cfg.controller()?;
    let stats = cfg.certificate.stats;
    let k = riskctl::synthesize_with(&plant, ctl.nu, ctl.mu, stats)?;
    let text = serde_json::to_string_pretty(&k).expect("controller serializes");
    out.write("controller.json", text.as_bytes())?;
    let rows = riskctl::compare_controllers(&plant, ctl.mu, &ctl.nu_grid, &cfg.compare_config());
    out.write_with("ratios.csv", |w| riskctl::write_ratio_csv(&rows, w))?;
    let infeasible: Vec<_> = rows
        .iter()
        .filter(|r| !r.feasible)
        .map(|r| json!({"nu": r.nu, "reason": r.reason}))
        .collect();
    Ok(json!({
        "k": k.k.row_major(),
        "t": k.t.row_major(),
        "gamma": k.gamma,
        "bias": k.bias().as_slice(),
        "infeasible": infeasible,
    })
    .into())
}

/// `eta,kappa,c_lambda_min` on the grid `step, 2·step, … < 1`.
pub fn kappa_curve_csv(etas: &[f64], step: f64, w: &mut Vec<u8>) -> Result<()> {
    let io = |e: std::io::Error| CliError::Internal(e.to_string());
    writeln!(w, "eta,kappa,c_lambda_min").map_err(io)?;
    let n = (1.0 / step).round() as usize;
    let grid: Vec<f64> = (1..n).map(|i| i as f64 * step).collect();
    for &eta in etas {
        for (k, v) in certs::kappa_tradeoff(eta, &grid)? {
            writeln!(w, "{eta},{k},{v:e}").map_err(io)?;
        }
    }
    Ok(())
}

/// `eta,kappa_grid,c_grid,kappa_exact,c_exact` per `η`.
pub fn kappa_minima_csv(etas: &[f64], step: f64, w: &mut Vec<u8>) -> Result<()> {
    let io = |e: std::io::Error| CliError::Internal(e.to_string());
    writeln!(w, "eta,kappa_grid,c_grid,kappa_exact,c_exact").map_err(io)?;
    for &eta in etas {
        let kg = certs::kappa_argmin(eta, step)?;
        let ke = certs::kappa_star_exact(eta)?;
        writeln!(
            w,
            "{eta},{kg},{:e},{ke:e},{:e}",
            certs::kappa_value(eta, kg),
            certs::kappa_value(eta, ke)
        )
        .map_err(io)?;
    }
    Ok(())
}

fn system_eta(cfg: &RunConfig) -> Result<f64> {
    let sys = cfg.linear_system()?;
    let r = cfg.r()?;
    let h = match cfg.h_choice() {
        certs::HChoice::Lyapunov(q) => certs::choose_h(&sys.a, &r, &q)?,
        certs::HChoice::Given(h) => h,
    };
    Ok(certs::compute_eta(&sys.a, &r, &h)?)
}

fn sweep_kappa(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome> {
    let sweep = cfg.kappa_sweep.clone().unwrap_or(crate::config::KappaSweepConfig {
        eta: None,
        step: certs::KAPPA_GRID_STEP,
    });
    let etas = match &sweep.eta {
        Some(v) => v.clone(),
        None => {
            let eta = system_eta(cfg)?;
            if eta >= 1.0 - certs::ETA_ONE_TOL {
                return Err(CliError::Config(
                    "eta = 1 for this system, so kappa has no effect".into(),
                ));
            }
            vec![eta]
        }
    };
    let mut curve = Vec::new();
    kappa_curve_csv(&etas, sweep.step, &mut curve)?;
    out.write("kappa_sweep.csv", &curve)?;
    let mut minima = Vec::new();
    kappa_minima_csv(&etas, sweep.step, &mut minima)?;
    out.write("kappa_minima.csv", &minima)?;
    Ok(json!({ "eta": etas, "step": sweep.step }).into())
}
