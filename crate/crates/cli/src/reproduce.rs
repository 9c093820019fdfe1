//! Figure-data bundles for the four worked illustrations. Each has a
//! built-in config (see `configs/`) that `--config` may replace.

use crate::commands::{kappa_curve_csv, kappa_minima_csv, Outcome};
use crate::config::RunConfig;
use crate::output::{ecdf_csv, quantile, sort_values, OutputDir};
use crate::{CliError, Result};
use riskstab::certs;
use riskstab::riskctl::{self, MyopicController};
use riskstab::riskfn::{self, EmpiricalSample, RiskSpec};
use riskstab::stochsys::{self, LinearSystem, NoiseKind, Reality, TrajectoryEnsemble};
use nalgebra::DVector;
use serde_json::json;
use std::io::Write;

/// Points per ECDF file.
pub const ECDF_POINTS: usize = 1000;
/// Draws behind the cached `E(η)` of the clipped reality.
pub const ETA_MEAN_DRAWS: usize = 10_000_000;
/// Grid resolution of the κ minima.
pub const MINIMA_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bundle {
    Illus1,
    Illus2,
    Illus3,
    Fig4,
}

impl Bundle {
    pub fn name(&self) -> &'static str {
        match self {
            Bundle::Illus1 => "illus1",
            Bundle::Illus2 => "illus2",
            Bundle::Illus3 => "illus3",
            Bundle::Fig4 => "fig4",
        }
    }

    pub fn builtin_json(&self) -> &'static str {
        match self {
            Bundle::Illus1 => include_str!("../configs/illus1.json"),
            Bundle::Illus2 => include_str!("../configs/illus2.json"),
            Bundle::Illus3 => include_str!("../configs/illus3.json"),
            Bundle::Fig4 => include_str!("../configs/fig4.json"),
        }
    }

    pub fn builtin_config(&self) -> RunConfig {
        RunConfig::from_json(self.builtin_json()).expect("built-in config is valid")
    }
}

pub fn run(b: Bundle, cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome> {
    match b {
        Bundle::Illus1 => illus1(cfg, out),
        Bundle::Illus2 => illus2(cfg, out),
        Bundle::Illus3 => illus3(cfg, out),
        Bundle::Fig4 => fig4(cfg, out),
    }
}

/// Bootstrap standard error, read off as the half-width of the central
/// 68.27% percentile interval.
fn boot_se(spec: &RiskSpec, sorted: &[f64], cfg: &RunConfig, stream: u64) -> Result<f64> {
    let (lo, hi) = certs::bootstrap_ci(
        spec,
        sorted,
        cfg.certificate.bootstrap_resamples,
        0.682_689_492_137_086,
        cfg.seeds().bootstrap,
        stream,
    )?;
    Ok(0.5 * (hi - lo))
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

fn write_ecdf(out: &mut OutputDir, name: &str, values: Vec<f64>) -> Result<()> {
    let sorted = sort_values(values);
    out.write_with(name, |w| ecdf_csv(&sorted, ECDF_POINTS, w))?;
    Ok(())
}

fn illus1(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome> {
    if !cfg.noise.is_stationary() || cfg.noise.dim() != 1 {
        return Err(CliError::Config("illus1 needs stationary scalar noise".into()));
    }
    let model = cfg.noise.at(0);
    let n = cfg.n_paths;
    if n <= cfg.horizon {
        return Err(CliError::Config("illus1 needs n_paths > horizon".into()));
    }
    let seeds = cfg.seeds();
    let w: Vec<f64> = stochsys::noise_draws(model, 0, n, seeds.simulation)
        .into_iter()
        .map(|d| d[0])
        .collect();
    let nominal = EmpiricalSample::new(w.iter().map(|v| v * v).collect())?;

    let eta_mc = stochsys::clipped_eta_mean_mc(model, ETA_MEAN_DRAWS, seeds.noise_energy);
    let eta_exact = match model.kind() {
        NoiseKind::Uniform { lo, hi } => Some(stochsys::clipped_eta_mean_uniform(lo[0], hi[0])),
        _ => None,
    };
    let alt1 = stochsys::alt_reality_energy(&nominal, Reality::Independent, None, seeds.simulation)?;
    let alt2 = stochsys::alt_reality_energy(
        &nominal,
        Reality::Clipped { eta_mean: eta_mc },
        Some(&w),
        seeds.simulation,
    )?;

    out.write_with("trajectories.csv", |f| {
        writeln!(f, "t,nominal,alt_independent,alt_clipped")?;
        for t in 0..=cfg.horizon {
            writeln!(
                f,
                "{t},{:e},{:e},{:e}",
                nominal.values()[t],
                alt1.energies.values()[t],
                alt2.energies.values()[t]
            )?;
        }
        Ok(())
    })?;
    write_ecdf(out, "ecdf_nominal.csv", nominal.values().to_vec())?;
    write_ecdf(out, "ecdf_alt_independent.csv", alt1.energies.values().to_vec())?;
    write_ecdf(out, "ecdf_alt_clipped.csv", alt2.energies.values().to_vec())?;

    let mus2 = RiskSpec::MeanUpperSemideviation { q: 2.0, beta: 1.0 };
    let mus12 = RiskSpec::MeanUpperSemideviation { q: 12.0, beta: 1.0 };
    let (m, m_se) = mean_se(nominal.values());
    let (a1, a1_se) = mean_se(alt1.energies.values());
    let (a2, a2_se) = mean_se(alt2.energies.values());
    let rows = [
        ("mean", m, m_se),
        (
            "mus_q2",
            riskfn::evaluate_sample(&mus2, &nominal)?,
            boot_se(&mus2, nominal.sorted(), cfg, 0)?,
        ),
        (
            "mus_q12",
            riskfn::evaluate_sample(&mus12, &nominal)?,
            boot_se(&mus12, nominal.sorted(), cfg, 1)?,
        ),
        ("alt_independent_mean", a1, a1_se),
        ("alt_clipped_mean", a2, a2_se),
    ];
    out.write_with("estimates.csv", |f| {
        writeln!(f, "name,value,std_error")?;
        for (name, v, se) in rows {
            writeln!(f, "{name},{v:e},{se:e}")?;
        }
        Ok(())
    })?;
    Ok(json!({
        "draws": n,
        "clipped_eta_mean": {
            "monte_carlo": eta_mc,
            "draws": ETA_MEAN_DRAWS,
            "seed": seeds.noise_energy,
            "closed_form": eta_exact,
        },
        "std_error_method": "bootstrap 68.27% half-width for MUS, sample sd / sqrt(n) for means",
    })
    .into())
}

fn illus2(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome> {
    let sweep = cfg
        .kappa_sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("illus2 needs a kappa_sweep section".into()))?;
    let etas = sweep
        .eta
        .clone()
        .ok_or_else(|| CliError::Config("illus2 needs kappa_sweep.eta".into()))?;
    let mut curve = Vec::new();
    kappa_curve_csv(&etas, sweep.step, &mut curve)?;
    out.write("curves.csv", &curve)?;
    let mut minima = Vec::new();
    kappa_minima_csv(&etas, MINIMA_STEP, &mut minima)?;
    out.write("minima.csv", &minima)?;
    Ok(json!({ "eta": etas, "curve_step": sweep.step, "minima_step": MINIMA_STEP }).into())
}

/// `|u_t|²` along every path of a closed-loop ensemble.
fn efforts(e: &TrajectoryEnsemble, ctl: &MyopicController) -> Vec<Vec<f64>> {
    (0..e.n_paths)
        .map(|p| {
            (0..=e.horizon)
                .map(|t| {
                    let x = DVector::from_row_slice(e.state(p, t));
                    ctl.control(&x).norm_squared()
                })
                .collect()
        })
        .collect()
}

fn pooled(panel: &stochsys::EnergyPanel) -> Vec<f64> {
    (1..=panel.horizon)
        .flat_map(|t| panel.cross_section(t).iter().copied())
        .collect()
}

fn illus3(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome> {
    let plant = cfg.plant()?;
    let ctl = cfg.controller()?;
    let stats = cfg.certificate.stats;
    let neutral = riskctl::synthesize_with(&plant, 0.0, ctl.mu, stats)?;
    let aware = riskctl::synthesize_with(&plant, ctl.nu, ctl.mu, stats)?;
    let x0 = cfg.system.x0.clone();
    let open = LinearSystem::new(plant.a.clone(), plant.noise.clone(), x0.clone())?;
    let loops = [
        open,
        riskctl::close_loop(&plant, &neutral, x0.clone())?,
        riskctl::close_loop(&plant, &aware, x0)?,
    ];
    // one seed for all three loops, so they see the same disturbances
    let seed = cfg.seeds().simulation;
    let mut ens = Vec::new();
    for sys in &loops {
        ens.push(stochsys::simulate(sys, cfg.horizon, cfg.n_paths, seed)?);
    }
    let panels = ens
        .iter()
        .map(|e| stochsys::state_energy(e, &plant.r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let eff_n = efforts(&ens[1], &neutral);
    let eff_a = efforts(&ens[2], &aware);

    out.write_with("trajectories.csv", |f| {
        writeln!(f, "t,energy_none,energy_neutral,energy_aware,effort_neutral,effort_aware")?;
        for t in 0..=cfg.horizon {
            writeln!(
                f,
                "{t},{:e},{:e},{:e},{:e},{:e}",
                panels[0].get(0, t),
                panels[1].get(0, t),
                panels[2].get(0, t),
                eff_n[0][t],
                eff_a[0][t]
            )?;
        }
        Ok(())
    })?;

    let pool_eff = |e: &[Vec<f64>]| -> Vec<f64> {
        e.iter().flat_map(|p| p[1..].iter().copied()).collect()
    };
    let series = [
        ("energy_none", sort_values(pooled(&panels[0]))),
        ("energy_neutral", sort_values(pooled(&panels[1]))),
        ("energy_aware", sort_values(pooled(&panels[2]))),
        ("effort_neutral", sort_values(pool_eff(&eff_n))),
        ("effort_aware", sort_values(pool_eff(&eff_a))),
    ];
    for (name, sorted) in &series {
        out.write_with(&format!("ecdf_{name}.csv"), |w| ecdf_csv(sorted, ECDF_POINTS, w))?;
    }
    out.write_with("quantiles.csv", |f| {
        writeln!(f, "series,mean,q50,q90,q99,q999,max")?;
        for (name, s) in &series {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            writeln!(
                f,
                "{name},{mean:e},{:e},{:e},{:e},{:e},{:e}",
                quantile(s, 0.5),
                quantile(s, 0.9),
                quantile(s, 0.99),
                quantile(s, 0.999),
                s[s.len() - 1]
            )?;
        }
        Ok(())
    })?;
    Ok(json!({
        "neutral": { "k": neutral.k.row_major(), "t": neutral.t.row_major(), "gamma": neutral.gamma },
        "aware": { "k": aware.k.row_major(), "t": aware.t.row_major(), "gamma": aware.gamma },
        "pooled_times": [1, cfg.horizon],
        "trajectory_path": 0,
    })
    .into())
}

fn fig4(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome> {
    let plant = cfg.plant()?;
    let ctl = cfg.controller()?;
    let rows = riskctl::compare_controllers(&plant, ctl.mu, &ctl.nu_grid, &cfg.compare_config());
    out.write_with("ratios.csv", |w| riskctl::write_ratio_csv(&rows, w))?;
    Ok(json!({ "mu": ctl.mu, "nu_grid": ctl.nu_grid, "horizon": cfg.horizon }).into())
}
