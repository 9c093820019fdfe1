//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskstab::certs::{
    self, BootstrapConfig, Certificate, HChoice, KappaPolicy, MeanCondVarOptions,
};
use riskstab::matcore::{self, SquareMatrix, SymMatrix};
use riskstab::riskctl::{self, CompareConfig};
use riskstab::riskfn::{self, DensityFamily, DualDensity, EmpiricalSample, RiskSpec};
use riskstab::stochsys::{self, LinearSystem, NoiseModel, StatsSource};
use riskstab_cli::commands::{self, Command};
use riskstab_cli::config::RunConfig;
use riskstab_cli::reproduce::Bundle;

const OPEN_LOOP: &str = include_str!("../../cli/configs/open_loop_mus.json");
const PLANT: &str = include_str!("../../cli/configs/illus3.json");

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

// ---------------------------------------------------------------- helpers

fn gauss_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let m = gauss_matrix(rng, n, n);
    SymMatrix::symmetrize(&m * m.transpose() + DMatrix::identity(n, n) * 0.1)
}

/// Spectral radius by Gelfand's formula, `‖A^k‖^{1/k}` with `k = 2^12`,
/// squaring with renormalization so nothing overflows.
fn gelfand_radius(a: &DMatrix<f64>) -> f64 {
    let mut m = a.clone();
    let mut log_scale = 0.0;
    let mut k = 1.0;
    for _ in 0..12 {
        m = &m * &m;
        log_scale *= 2.0;
        k *= 2.0;
        let nrm = m.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        m /= nrm;
        log_scale += nrm.ln();
    }
    (log_scale / k).exp()
}

/// Random matrix rescaled to spectral radius `rho`.
fn with_radius(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> SquareMatrix {
    loop {
        let g = gauss_matrix(rng, n, n);
        let cur = matcore::spectral_radius(&SquareMatrix::from_dmatrix(g.clone()).unwrap()).unwrap();
        if cur > 1e-3 {
            return SquareMatrix::from_dmatrix(g * (rho / cur)).unwrap();
        }
    }
}

fn quad(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let text = fs::read_to_string(path).map_err(|x| format!("{}: {x}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty csv")?.split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    Ok((header, rows))
}

fn num(s: &str) -> Result<f64, String> {
    s.parse().map_err(|x| format!("{s}: {x}"))
}

fn run_bundle(b: Bundle, cfg: &RunConfig, dir: &Path) -> Result<(), String> {
    commands::execute(&Command::Reproduce(b), cfg, dir).map(|_| ()).map_err(e)
}

// -------------------------------------------------------------- criteria

fn lyapunov_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..=8);
        let rho = rng.gen_range(0.0..0.99);
        let a = with_radius(&mut rng, n, rho);
        let q = random_pd(&mut rng, n);
        let x = matcore::solve_discrete_lyapunov(&a, &q).map_err(e)?;
        let am = a.as_dmatrix();
        let res = x.as_dmatrix() - am.transpose() * x.as_dmatrix() * am - q.as_dmatrix();
        let rel = res.norm() / q.as_dmatrix().norm();
        worst = worst.max(rel);
        ensure(rel <= 1e-10, format!("residual {rel:e} at n = {n}"))?;
    }
    let (mut stable, mut unstable) = (0, 0);
    for i in 0..200 {
        let n = rng.gen_range(1..=6);
        let rho = if i % 2 == 0 {
            rng.gen_range(0.05..0.97)
        } else {
            rng.gen_range(1.03..2.0)
        };
        let a = with_radius(&mut rng, n, rho);
        let truly_stable = gelfand_radius(a.as_dmatrix()) < 1.0;
        let r = random_pd(&mut rng, n);
        let q = random_pd(&mut rng, n);
        let found = certs::choose_h(&a, &r, &q)
            .and_then(|h| {
                let gap = certs::lyapunov_gap(&a, &r, &h)?;
                Ok(matcore::is_pd(&h)? && matcore::is_pd(&gap)?)
            })
            .unwrap_or(false);
        ensure(found == truly_stable, format!("Lyapunov test disagrees at rho = {rho}"))?;
        if truly_stable {
            stable += 1;
        } else {
            unstable += 1;
            // no positive definite H works either
            for _ in 0..20 {
                let h = random_pd(&mut rng, n);
                let gap = certs::lyapunov_gap(&a, &r, &h).map_err(e)?;
                ensure(!matcore::is_pd(&gap).map_err(e)?, "unstable A admits an H")?;
            }
        }
    }
    Ok(format!(
        "200 solves, worst relative residual {worst:.1e}; equivalence on {stable} stable + {unstable} unstable"
    ))
}

fn coherence_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..1000 {
        let n = rng.gen_range(5..50);
        let scale = rng.gen_range(0.1..10.0);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let z2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let bump: Vec<f64> = z.iter().map(|v| v + rng.gen_range(0.0..1.0) * scale).collect();
        let c: f64 = rng.gen_range(-5.0..5.0);
        let s = rng.gen_range(0.1..5.0);
        let th = rng.gen_range(0.0..1.0);
        let alpha = rng.gen_range(0.01..=1.0);
        let specs = [
            RiskSpec::Cvar { alpha },
            RiskSpec::MeanDeviation { q: 1.0, beta: rng.gen_range(0.0..=0.5) },
            RiskSpec::MeanUpperSemideviation { q: 1.0, beta: rng.gen_range(0.0..=1.0) },
        ];
        let ev = |spec: &RiskSpec, v: &[f64]| -> Result<f64, String> {
            riskfn::evaluate_sample(spec, &EmpiricalSample::new(v.to_vec()).map_err(e)?).map_err(e)
        };
        let tol = 1e-9 * (1.0 + scale + c.abs()) * (1.0 + s);
        for spec in &specs {
            let r = ev(spec, &z)?;
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            ensure((ev(spec, &shifted)? - (r + c)).abs() <= tol, format!("translation {spec:?}"))?;
            let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
            ensure((ev(spec, &scaled)? - s * r).abs() <= tol, format!("homogeneity {spec:?}"))?;
            ensure(ev(spec, &bump)? >= r - tol, format!("monotonicity {spec:?}"))?;
            let mix: Vec<f64> = z.iter().zip(&z2).map(|(a, b)| th * a + (1.0 - th) * b).collect();
            let rhs = th * r + (1.0 - th) * ev(spec, &z2)?;
            ensure(ev(spec, &mix)? <= rhs + tol, format!("convexity {spec:?}"))?;
        }
        let sample = EmpiricalSample::new(z.clone()).map_err(e)?;
        if alpha < 1.0 {
            let var = riskfn::var_alpha(&sample, alpha).map_err(e)?;
            ensure(var <= riskfn::cvar_alpha(&sample, alpha).map_err(e)? + tol, "VaR > CVaR")?;
        }
        let (q, beta) = (rng.gen_range(1.0..6.0), rng.gen_range(0.0..2.0));
        let mus = riskfn::mean_upper_semidev(&sample, q, beta).map_err(e)?;
        let md = riskfn::mean_deviation(&sample, q, beta).map_err(e)?;
        ensure(mus <= md + tol, "MUS > MD")?;
        let c1 = riskfn::cvar_alpha(&sample, 1.0).map_err(e)?;
        ensure((c1 - sample.mean()).abs() <= tol, "CVaR_1 != mean")?;
    }
    Ok("1000 samples; four axioms on CVaR, MD(q=1), MUS(q=1); VaR <= CVaR, MUS <= MD, CVaR_1 = mean".into())
}

/// Vertices of `{0 ≤ ξ ≤ 1/α, mean ξ = 1}`: a set at the cap plus at most one
/// fractional coordinate.
fn cvar_vertices(n: usize, alpha: f64) -> Vec<Vec<f64>> {
    let cap = 1.0 / alpha;
    let total = n as f64;
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        let k = mask.count_ones() as f64;
        let rest = total - k * cap;
        if rest < -1e-12 || rest > cap + 1e-12 {
            continue;
        }
        let base: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { cap } else { 0.0 }).collect();
        if rest.abs() <= 1e-12 {
            out.push(base);
            continue;
        }
        for j in (0..n).filter(|j| mask >> j & 1 == 0) {
            let mut v = base.clone();
            v[j] = rest;
            out.push(v);
        }
    }
    out
}

fn cvar_duality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let alpha = rng.gen_range(0.05..0.999);
        let mut z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        if rng.gen_bool(0.2) && n > 1 {
            z[1] = z[0];
        }
        let zs: &[f64] = &z;
        let sample = EmpiricalSample::new(z.clone()).map_err(e)?;
        let cvar = riskfn::cvar_alpha(&sample, alpha).map_err(e)?;
        let verts = cvar_vertices(n, alpha);
        let value = |xi: &[f64]| xi.iter().zip(zs).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let lp = verts.iter().map(|v| value(v)).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((lp - cvar).abs());
        ensure((lp - cvar).abs() <= 1e-9, format!("LP {lp} vs cvar {cvar}"))?;
        let opt = riskfn::cvar_optimal_density(&sample, alpha).map_err(e)?;
        ensure(riskfn::check_density(&opt), "optimal density inadmissible")?;
        ensure((opt.expectation(&z).map_err(e)? - cvar).abs() <= 1e-9, "density misses sup")?;
        // random convex combination of vertices
        let k = rng.gen_range(1..=4);
        let mut xi = vec![0.0; n];
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let wsum: f64 = w.iter().sum();
        for wi in &w {
            let v = &verts[rng.gen_range(0..verts.len())];
            for (x, vi) in xi.iter_mut().zip(v) {
                *x += wi / wsum * vi;
            }
        }
        let d = DualDensity { values: xi.clone(), family: DensityFamily::Cvar { alpha } };
        ensure(riskfn::check_density(&d), "mixture density inadmissible")?;
        ensure(value(&xi) <= cvar + 1e-9, "admissible density exceeds CVaR")?;
    }
    Ok(format!("1000 samples n <= 12, worst |LP - CVaR| = {worst:.1e}"))
}

fn open_loop() -> Result<(RunConfig, LinearSystem, SymMatrix), String> {
    let cfg = RunConfig::from_json(OPEN_LOOP).map_err(e)?;
    let sys = cfg.linear_system().map_err(e)?;
    let r = cfg.r().map_err(e)?;
    Ok((cfg, sys, r))
}

fn coherent_envelope() -> Check {
    let (cfg, sys, r) = open_loop()?;
    let risk = RiskSpec::MeanUpperSemideviation { q: 1.0, beta: 1.0 };
    let cert = certs::theorem2_certificate(
        &sys,
        &r,
        &risk,
        KappaPolicy::GridArgmin,
        &HChoice::identity_q(2),
        &cfg.noise_energy(),
    )
    .map_err(e)?;
    let boot = BootstrapConfig { resamples: 1000, confidence: 0.99, seed: 2 };
    let main = certs::verify_envelope(
        &Certificate::Coherent(cert.clone()),
        &sys,
        &r,
        50,
        100_000,
        0,
        &boot,
    )
    .map_err(e)?;
    let main_v = main.violations().len();
    let max_est = main.rows.iter().map(|r| r.estimate).fold(0.0, f64::max);

    let mut halved = cert.clone();
    halved.b *= 0.5;
    let neg = certs::verify_envelope(&Certificate::Coherent(halved), &sys, &r, 50, 100_000, 0, &boot)
        .map_err(e)?;
    let neg_v = neg.violations().len();
    let min_env = neg.rows.iter().map(|r| r.envelope).fold(f64::INFINITY, f64::min);

    // a corruption the data can actually expose
    let mut shrunk = cert.clone();
    shrunk.a *= 0.05;
    shrunk.b *= 0.05;
    let strong = certs::verify_envelope(&Certificate::Coherent(shrunk), &sys, &r, 50, 10_000, 0, &boot)
        .map_err(e)?;
    let strong_v = strong.violations().len();

    let detail = format!(
        "lambda {:.4}, a {:.3}, b {:.3}; certified run: {main_v} violations, max estimate {max_est:.3}; \
         b-halved control: {neg_v} flagged (lowest envelope {min_env:.3}); a,b x0.05 control: {strong_v} flagged",
        cert.lambda, cert.a, cert.b
    );
    if main_v == 0 && neg_v >= 1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_to_cvar() -> Check {
    let (cfg, sys, r) = open_loop()?;
    let mean = certs::theorem2_certificate(
        &sys,
        &r,
        &RiskSpec::Mean,
        KappaPolicy::GridArgmin,
        &HChoice::identity_q(2),
        &cfg.noise_energy(),
    )
    .map_err(e)?;
    let target = RiskSpec::Cvar { alpha: 0.25 };
    let cv = certs::theorem1_transform(&mean, &target).map_err(e)?;
    ensure(cv.lambda == mean.lambda, "lambda changed")?;
    ensure((cv.a - 4.0 * mean.a).abs() <= 1e-12 * cv.a, "a != 4a")?;
    ensure((cv.b - 4.0 * mean.b).abs() <= 1e-12 * cv.b.max(1.0), "b != 4b")?;
    let e_ = stochsys::simulate(&sys, 50, 100_000, 0).map_err(e)?;
    let panel = stochsys::state_energy(&e_, &r).map_err(e)?;
    let psi = r.quad_form(&sys.x0);
    let boot = BootstrapConfig { resamples: 1000, confidence: 0.99, seed: 2 };
    let rep = certs::verify_panel(&target, &panel, |t| cv.envelope(t, psi), &boot).map_err(e)?;
    let cov = certs::probabilistic_check(&cv, &panel, psi, 0.99).map_err(e)?;
    let min_cov = cov.rows.iter().map(|r| r.estimate).fold(1.0, f64::min);
    let detail = format!(
        "CVaR(0.25) cert (lambda {:.4}, a {:.3}, b {:.3}): {} envelope violations, {} coverage violations, lowest coverage {min_cov:.5}",
        cv.lambda,
        cv.a,
        cv.b,
        rep.violations().len(),
        cov.violations().len()
    );
    if rep.violations().is_empty() && cov.violations().is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_cond_var_envelope() -> Check {
    let plant = riskctl::example_plant();
    let ctl = riskctl::synthesize(&plant, 10.0, 0.25).map_err(e)?;
    let sys = riskctl::close_loop(&plant, &ctl, vec![1.0, 1.0]).map_err(e)?;
    let r = plant.r.clone();
    let opts = MeanCondVarOptions::new(2, 50);
    let cert = certs::theorem3_certificate(&sys, &r, 10.0, &opts).map_err(e)?;
    let exact = certs::rho_nu_closed_form(&sys, &r, 10.0, 50, StatsSource::Analytic).map_err(e)?;
    let mut min_gap = f64::INFINITY;
    for t in 1..=50 {
        let env = cert.envelope(t, &sys.x0);
        ensure(exact[t] <= env, format!("closed form {} above envelope {env} at t = {t}", exact[t]))?;
        min_gap = min_gap.min(env - exact[t]);
    }
    let ens = stochsys::simulate(&sys, 50, 100_000, 0).map_err(e)?;
    let mut worst = 0.0f64;
    for t in 1..=50 {
        let (est, se) = certs::rho_nu_monte_carlo(&ens, &sys, &r, 10.0, t).map_err(e)?;
        let z = (est - exact[t]).abs() / se;
        worst = worst.max(z);
        ensure(z <= 5.0, format!("Monte Carlo off by {z:.2} SE at t = {t}"))?;
    }
    Ok(format!(
        "lambda_nu {:.4}, b_nu {:.2}; envelope above closed form at all 50 steps (min gap {min_gap:.3}); MC agrees within {worst:.2} SE",
        cert.lambda_nu, cert.b_nu
    ))
}

fn illustration2() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    run_bundle(Bundle::Illus2, &Bundle::Illus2.builtin_config(), dir.path())?;
    let f = |eta: f64, k: f64| (1.0 - k * eta) / (k * eta * (eta - k * eta));
    let (h, rows) = read_csv(&dir.path().join("curves.csv"))?;
    ensure(h == ["eta", "kappa", "c_lambda_min"], "curve header")?;
    let mut etas = BTreeMap::new();
    let mut worst = 0.0f64;
    for row in &rows {
        let (eta, k, v) = (num(&row[0])?, num(&row[1])?, num(&row[2])?);
        let rel = (v - f(eta, k)).abs() / f(eta, k).abs();
        worst = worst.max(rel);
        ensure(rel <= 1e-12, format!("curve off by {rel:e} at eta {eta}, kappa {k}"))?;
        *etas.entry(row[0].clone()).or_insert(0) += 1;
    }
    let want = ["0.1", "0.3", "0.5", "0.7", "0.9"];
    ensure(etas.keys().map(String::as_str).eq(want), format!("eta set {:?}", etas.keys()))?;
    let (_, mins) = read_csv(&dir.path().join("minima.csv"))?;
    for row in &mins {
        let eta = num(&row[0])?;
        let (mut bk, mut bv) = (0.0, f64::INFINITY);
        for i in 1..100_000 {
            let k = i as f64 * 1e-5;
            let v = f(eta, k);
            if v < bv {
                bk = k;
                bv = v;
            }
        }
        ensure(num(&row[1])? == bk, format!("grid minimum {} vs oracle {bk} at eta {eta}", row[1]))?;
        ensure((num(&row[2])? - bv).abs() <= 1e-12 * bv, "minimum value")?;
        ensure((num(&row[3])? - bk).abs() <= 1e-5, "exact minimizer far from grid")?;
    }
    Ok(format!(
        "{} curve points, worst relative error {worst:.1e}; {} minima match a 1e-5 grid search",
        rows.len(),
        mins.len()
    ))
}

fn illustration1() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let cfg = Bundle::Illus1.builtin_config();
    ensure(cfg.n_paths == 1_000_000, "expected 10^6 draws")?;
    run_bundle(Bundle::Illus1, &cfg, dir.path())?;
    let (_, rows) = read_csv(&dir.path().join("estimates.csv"))?;
    let mut est = BTreeMap::new();
    for r in &rows {
        est.insert(r[0].clone(), (num(&r[1])?, num(&r[2])?));
    }
    let g = |k: &str| est.get(k).copied().ok_or(format!("missing {k}"));
    let (mean, mean_se) = g("mean")?;
    let (m2, m2_se) = g("mus_q2")?;
    let (m12, _) = g("mus_q12")?;
    let (a1, a1_se) = g("alt_independent_mean")?;
    let (a2, a2_se) = g("alt_clipped_mean")?;
    ensure(m12 >= m2 && m2 >= mean, format!("ordering {m12} >= {m2} >= {mean}"))?;
    ensure((mean - 1.0 / 3.0).abs() <= 5.0 * mean_se, "nominal mean far from 1/3")?;
    let bound1 = m2 + 3.0 * (m2_se.powi(2) + a1_se.powi(2)).sqrt();
    let bound2 = m2 + 3.0 * (m2_se.powi(2) + a2_se.powi(2)).sqrt();
    ensure(a1 <= bound1 && a2 <= bound2, format!("alt means {a1}, {a2} vs MUS {m2}"))?;
    for f in ["ecdf_nominal.csv", "ecdf_alt_independent.csv", "ecdf_alt_clipped.csv"] {
        ensure(dir.path().join(f).exists(), format!("missing {f}"))?;
    }
    Ok(format!(
        "MUS12 {m12:.4} >= MUS2 {m2:.4} >= mean {mean:.4}; alternative means {a1:.4}, {a2:.4} <= MUS2 + 3 SE"
    ))
}

fn figure4() -> Check {
    let plant = riskctl::example_plant();
    let grid = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0];
    let rows = riskctl::compare_controllers(&plant, 0.25, &grid, &CompareConfig::default());
    for r in &rows {
        ensure(r.feasible, format!("nu = {} infeasible: {:?}", r.nu, r.reason))?;
        ensure(r.rate_ratio <= 1.0 + 1e-9, format!("rate ratio {} at nu = {}", r.rate_ratio, r.nu))?;
    }
    ensure((rows[0].bias_ratio - 1.0).abs() <= 1e-12, "bias ratio at nu = 0")?;
    for w in rows.windows(2) {
        ensure(
            w[1].bias_ratio <= w[0].bias_ratio + 1e-9,
            format!("bias ratio rises between nu = {} and {}", w[0].nu, w[1].nu),
        )?;
    }
    let last = rows.last().unwrap();
    ensure(last.bias_ratio < 0.8, format!("bias ratio {} at nu = 10", last.bias_ratio))?;
    let list: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.bias_ratio)).collect();
    Ok(format!(
        "bias ratios [{}] over nu {grid:?}; rate ratio at nu = 10: {:.4}",
        list.join(", "),
        last.rate_ratio
    ))
}

fn property_suites() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    // eta in (0, 1]
    let mut eta_range = (f64::INFINITY, 0.0f64);
    for _ in 0..200 {
        let n = rng.gen_range(1..=6);
        let rho = rng.gen_range(0.0..0.98);
        let a = with_radius(&mut rng, n, rho);
        let r = random_pd(&mut rng, n);
        let q = random_pd(&mut rng, n);
        let h = certs::choose_h(&a, &r, &q).map_err(e)?;
        let eta = certs::compute_eta(&a, &r, &h).map_err(e)?;
        ensure(eta > 0.0 && eta <= 1.0 + 1e-12, format!("eta = {eta}"))?;
        eta_range = (eta_range.0.min(eta), eta_range.1.max(eta));
    }
    // quadratic Young
    for _ in 0..1000 {
        let n = rng.gen_range(1..=6);
        let g = gauss_matrix(&mut rng, n, n);
        let m = &g * g.transpose();
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let z = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let eps: f64 = 10f64.powf(rng.gen_range(-3.0..3.0));
        let lhs = quad(&m, &(&y + &z));
        let rhs = (1.0 + eps) * quad(&m, &y) + (1.0 + 1.0 / eps) * quad(&m, &z);
        ensure(lhs <= rhs + 1e-12 * (1.0 + rhs.abs()), "quadratic Young")?;
    }
    // energy sandwich
    for _ in 0..1000 {
        let n = rng.gen_range(1..=6);
        let h = random_pd(&mut rng, n);
        let r = random_pd(&mut rng, n);
        let hr = matcore::conjugate(&h, &r).map_err(e)?;
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let psi = quad(r.as_dmatrix(), &x);
        let v = quad(hr.as_dmatrix(), &x);
        let (lo, hi) = (matcore::lambda_min(&h).map_err(e)?, matcore::lambda_max(&h).map_err(e)?);
        let tol = 1e-9 * (1.0 + hi * psi);
        ensure(lo * psi <= v + tol && v <= hi * psi + tol, "energy sandwich")?;
    }
    // geometric recursion
    for _ in 0..1000 {
        let lam: f64 = rng.gen_range(0.0..0.999);
        let nu = rng.gen_range(0.0..10.0);
        let s0 = rng.gen_range(0.0..100.0);
        let mut s = s0;
        for t in 1..=200 {
            s = lam * s + nu * rng.gen_range(0.0..=1.0);
            let bound = lam.powi(t) * s0 + nu / (1.0 - lam);
            ensure(s <= bound * (1.0 + 1e-12) + 1e-12, "geometric recursion")?;
        }
    }
    // one-step contraction on simulated systems
    let mut worst_z = f64::NEG_INFINITY;
    for i in 0..10 {
        let n = rng.gen_range(1..=4);
        let rho = rng.gen_range(0.2..0.95);
        let a = with_radius(&mut rng, n, rho);
        let mean: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cov = random_pd(&mut rng, n);
        let noise = NoiseModel::gaussian(mean.clone(), cov.clone()).map_err(e)?;
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let sys = LinearSystem::new(a.clone(), noise, x0).map_err(e)?;
        let r = random_pd(&mut rng, n);
        let h = certs::choose_h(&a, &r, &SymMatrix::identity(n)).map_err(e)?;
        let eta = certs::compute_eta(&a, &r, &h).map_err(e)?;
        let hr = matcore::conjugate(&h, &r).map_err(e)?;
        let hm = hr.as_dmatrix();
        let wbar = DVector::from_vec(mean);
        let bprime = (hm * cov.as_dmatrix()).trace() + quad(hm, &wbar);
        let kappa = if eta < 1.0 { certs::kappa_argmin(eta, 1e-4).map_err(e)? } else { 0.5 };
        let lam = 1.0 - kappa * eta;
        let offset = lam / (lam - (1.0 - eta)) * bprime;
        let ens = stochsys::simulate(&sys, 8, 20_000, 500 + i).map_err(e)?;
        for t in 0..7 {
            let d: Vec<f64> = (0..ens.n_paths)
                .map(|p| {
                    let v = |s: &[f64]| quad(hm, &DVector::from_row_slice(s));
                    v(ens.state(p, t + 1)) - lam * v(ens.state(p, t))
                })
                .collect();
            let k = d.len() as f64;
            let m = d.iter().sum::<f64>() / k;
            let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
            let z = (m - offset) / (sd / k.sqrt());
            worst_z = worst_z.max(z);
            ensure(z <= 3.0, format!("one-step contraction exceeded by {z:.2} SE (system {i}, t = {t})"))?;
        }
    }
    Ok(format!(
        "eta in [{:.3}, {:.3}] over 200 systems; Young, sandwich, recursion x1000 each; contraction slack >= {:.1} SE",
        eta_range.0,
        eta_range.1,
        -worst_z
    ))
}

fn csv_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(e)? {
        let p = entry.map_err(e)?.path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if name != "manifest.json" {
            out.push((name, fs::read(&p).map_err(e)?));
        }
    }
    out.sort();
    Ok(out)
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(e)?;
    let mut small = RunConfig::from_json(OPEN_LOOP).map_err(e)?;
    small.n_paths = 2000;
    small.horizon = 20;
    small.export_paths = 100;
    small.certificate.noise_energy_samples = 20_000;
    small.certificate.bootstrap_resamples = 100;
    let mut mcv = small.clone();
    mcv.risk = Some(RiskSpec::MeanCondVar { nu: 2.0 });
    let mut plant = RunConfig::from_json(PLANT).map_err(e)?;
    plant.n_paths = 2000;
    plant.horizon = 20;
    plant.controller.as_mut().unwrap().nu_grid = vec![0.0, 1.0, 5.0];
    let mut illus1 = Bundle::Illus1.builtin_config();
    illus1.n_paths = 20_000;
    illus1.certificate.bootstrap_resamples = 50;
    let mut illus3 = Bundle::Illus3.builtin_config();
    illus3.n_paths = 2000;
    let mut sweep = small.clone();
    sweep.kappa_sweep = None;

    // verify reads the certificate written by the serial certify run
    let cert_path = root.path().join("certify_serial").join("certificate.json");
    let jobs: Vec<(&str, Command, RunConfig)> = vec![
        ("certify", Command::Certify, small.clone()),
        ("verify", Command::Verify { certificate: cert_path }, small.clone()),
        ("certify-mcv", Command::Certify, mcv),
        ("simulate", Command::Simulate, small.clone()),
        ("controller", Command::Controller, plant.clone()),
        ("sweep-kappa", Command::SweepKappa, sweep),
        ("illus1", Command::Reproduce(Bundle::Illus1), illus1),
        ("illus2", Command::Reproduce(Bundle::Illus2), Bundle::Illus2.builtin_config()),
        ("illus3", Command::Reproduce(Bundle::Illus3), illus3),
        ("fig4", Command::Reproduce(Bundle::Fig4), plant),
    ];
    let mut names = Vec::new();
    for (tag, cmd, cfg) in &jobs {
        let a = root.path().join(format!("{tag}_serial"));
        let b = root.path().join(format!("{tag}_parallel"));
        let c = root.path().join(format!("{tag}_rerun"));
        in_pool(1, || commands::execute(cmd, cfg, &a)).map_err(|x| format!("{tag}: {x}"))?;
        in_pool(8, || commands::execute(cmd, cfg, &b)).map_err(|x| format!("{tag}: {x}"))?;
        let again = RunConfig::load(&a.join("manifest.json")).map_err(|x| format!("{tag}: {x}"))?;
        in_pool(8, || commands::execute(cmd, &again, &c)).map_err(|x| format!("{tag}: {x}"))?;
        let (fa, fb, fc) = (csv_files(&a)?, csv_files(&b)?, csv_files(&c)?);
        ensure(!fa.is_empty(), format!("{tag}: no output"))?;
        ensure(fa == fb, format!("{tag}: serial and 8-thread outputs differ"))?;
        ensure(fa == fc, format!("{tag}: manifest rerun differs"))?;
        names.push(*tag);
    }
    Ok(format!("byte-identical serial / 8 threads / manifest rerun for {}", names.join(", ")))
}

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "Lyapunov correctness", lyapunov_correctness),
        (2, "risk coherence", coherence_suite),
        (3, "CVaR duality", cvar_duality),
        (4, "coherent envelope", coherent_envelope),
        (5, "mean-to-CVaR transformation", mean_to_cvar),
        (6, "mean-conditional-variance envelope", mean_cond_var_envelope),
        (7, "kappa trade-off curves", illustration2),
        (8, "noise-energy estimates", illustration1),
        (9, "controller ratios", figure4),
        (10, "property suites", property_suites),
        (11, "determinism", determinism),
    ];
    let mut failed = Vec::new();
    let total = Instant::now();
    for (n, name, f) in criteria {
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {n}: PASS ({name}; {d}; {secs:.1}s)"),
            Err(d) => {
                println!("criterion {n}: FAIL ({name}; {d}; {secs:.1}s)");
                failed.push(n);
            }
        }
    }
    println!(
        "acceptance: {} of 11 passed in {:.1}s",
        11 - failed.len(),
        total.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
