//! Acceptance suite on instance B1. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use gridmarket::config::{Block, ScenarioConfig};
use gridmarket::hjb::{
    agent_hjb_residual, principal_hjb_residual, random_samples, shadow_price, solve_hjb_grid, solve_principal,
    solve_riccati_unchecked, GridSpec, RiccatiSolution, SpatialDomain, ValueSolution,
};
use gridmarket::instances::{b1, scalar_model};
use gridmarket::market::{build_wbar, FnPriceField, PriceField, ProfitFloor};
use gridmarket::model::{GridModel, TimeGrid};
use gridmarket::response::FnPolicy;
use gridmarket::scenario::{clearing_deviation_max, deviation_overrides, run_case_b, run_case_c, run_deviation_test};
use gridmarket::sim::{simulate, Estimate, NoiseBundle};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<(bool, String), String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Result<ScenarioConfig, String> {
    ScenarioConfig::load(&configs().join(name)).map_err(|e| e.to_string())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn wide() -> GridModel {
    b1().with_boxes(10.0)
}

/// Two `scenario a` runs of the shipped B1 configuration through the binary.
struct CliRuns {
    _dirs: [tempfile::TempDir; 2],
    paths: [PathBuf; 2],
    codes: [Option<i32>; 2],
    manifest: Value,
}

impl CliRuns {
    fn run() -> Result<Self, String> {
        let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
        let paths = [dirs[0].path().join("out"), dirs[1].path().join("out")];
        let mut codes = [None, None];
        for (code, dir) in codes.iter_mut().zip(&paths) {
            let status = Command::new(env!("CARGO_BIN_EXE_gridmarket"))
                .args(["scenario", "a"])
                .arg(configs().join("B1.json"))
                .arg("--out")
                .arg(dir)
                .arg("-q")
                .output()
                .map_err(err)?
                .status;
            *code = status.code();
        }
        let text = std::fs::read_to_string(paths[0].join("manifest.json")).map_err(err)?;
        let manifest = serde_json::from_str(&text).map_err(err)?;
        Ok(Self { _dirs: dirs, paths, codes, manifest })
    }

    /// `(passed, value)` of a named check.
    fn check(&self, name: &str) -> Result<(bool, f64), String> {
        self.manifest["checks"]
            .as_array()
            .and_then(|cs| cs.iter().find(|c| c["name"] == name))
            .map(|c| (c["passed"].as_bool().unwrap_or(false), c["value"].as_f64().unwrap_or(f64::NAN)))
            .ok_or_else(|| format!("check {name} missing from the manifest"))
    }

    fn files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
        let mut out = BTreeMap::new();
        for entry in std::fs::read_dir(dir).map_err(err)? {
            let entry = entry.map_err(err)?;
            out.insert(entry.file_name().to_string_lossy().into_owned(), std::fs::read(entry.path()).map_err(err)?);
        }
        Ok(out)
    }
}

fn hjb_residual() -> Outcome {
    let started = Instant::now();
    let m = wide();
    let v = ValueSolution::Riccati(solve_riccati_unchecked(&m).map_err(err)?);
    let r = principal_hjb_residual(&m, &v, &random_samples(&m, 500, 2.0, 1)).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    Ok((
        r.max_abs < 1e-6 && secs < 5.0,
        format!("max |residual| {:.3e} over {} samples (< 1e-6), {secs:.2} s (< 5 s)", r.max_abs, r.n),
    ))
}

/// Price field with row `a_i + G_i x + c_i sin(w t)` for every agent.
fn random_affine_field(n: usize, n_agents: usize, seed: u64) -> FnPriceField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let coeffs: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> = (0..n_agents)
        .map(|_| (draw(n), draw(n * n), draw(n), 1.0 + 4.0 * draw(1)[0].abs()))
        .collect();
    let level_coeffs = coeffs.clone();
    FnPriceField::new(
        n,
        n_agents,
        move |i, t, x| {
            let (a, _, _, w) = &level_coeffs[i];
            a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + (w * t).cos()
        },
        move |i, t, x, out| {
            let (a, g, c, w) = &coeffs[i];
            for r in 0..n {
                out[r] = a[r] + (0..n).map(|s| g[r * n + s] * x[s]).sum::<f64>() + c[r] * (w * t).sin();
            }
        },
    )
}

fn wbar_residual() -> Outcome {
    let started = Instant::now();
    let m = Arc::new(b1());
    let n = m.state_dim();
    let samples = random_samples(&m, 500, 2.0, 2);
    let zero = ValueSolution::Riccati(RiccatiSolution::zero(*m.time_grid(), n));
    let v = Arc::new(ValueSolution::Riccati(solve_riccati_unchecked(&m).map_err(err)?));
    let mut fields: Vec<(String, Arc<dyn PriceField>)> =
        vec![("shadow price".into(), Arc::new(shadow_price(v, ProfitFloor::constants(&[0.1, -0.05]))))];
    for s in 0..3 {
        fields.push((format!("random field {s}"), Arc::new(random_affine_field(n, m.n_agents(), 100 + s))));
    }
    let mut worst: f64 = 0.0;
    for (_, h) in &fields {
        let w = build_wbar(Arc::clone(h), Arc::clone(&m));
        for i in 0..m.n_agents() {
            worst = worst.max(agent_hjb_residual(&m, i, &w, &zero, &samples).map_err(err)?.max_abs);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        worst < 1e-8 && secs < 5.0,
        format!("max |residual| {worst:.3e} over {} fields x 500 samples (< 1e-8), {secs:.2} s (< 5 s)", fields.len()),
    ))
}

fn deviations() -> Outcome {
    let started = Instant::now();
    let cfg = load("B1.json")?;
    let m = run_deviation_test(&cfg, None).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    let counts: Vec<usize> = (0..cfg.model.n_agents()).map(|i| deviation_overrides(&cfg, i).len()).collect();
    let strict: Vec<f64> = m.checks.iter().filter(|c| c.name.starts_with("deviation_strict")).map(|c| c.value).collect();
    let passed = m.passed && counts.iter().all(|&c| c >= 20) && strict.len() == counts.len() && secs < 120.0;
    Ok((
        passed,
        format!(
            "{} paths, deviations per agent {counts:?}, additive +0.2 mean change in se {strict:.1?}, {secs:.1} s (< 120 s)",
            cfg.n_paths
        ),
    ))
}

fn clearing(cli: &CliRuns) -> Outcome {
    let cfg = load("B1.json")?;
    let mut ok = true;
    let mut errs = Vec::new();
    for i in 0..cfg.model.n_agents() {
        let (p, v) = cli.check(&format!("profit_identity[{i}]"))?;
        ok &= p;
        errs.push(format!("{v:.3e}"));
    }
    let v = Arc::new(solve_principal(&cfg.model, &cfg.x0, cfg.solver).map_err(err)?);
    let h: Arc<dyn PriceField> = Arc::new(shadow_price(v, ProfitFloor::constants(&cfg.floors)));
    let fine = Arc::new(NoiseBundle::generate(
        cfg.seed,
        2000,
        TimeGrid::with_step(0.0, 1.0, cfg.dt / 2.0).map_err(err)?,
        cfg.model.noise_dim(),
    ));
    let coarse = Arc::new(fine.coarsen(2).map_err(err)?);
    let d_fine = clearing_deviation_max(&cfg.model, &h, &fine, &cfg.x0).map_err(err)?;
    let d_coarse = clearing_deviation_max(&cfg.model, &h, &coarse, &cfg.x0).map_err(err)?;
    let ratio = d_fine / d_coarse;
    ok &= (0.4..=0.6).contains(&ratio);
    Ok((
        ok,
        format!(
            "profit minus floor {errs:?} (3 se and 5e-3), clearing deviation {d_coarse:.3e} -> {d_fine:.3e} on halving dt, ratio {ratio:.3} (in [0.4, 0.6])"
        ),
    ))
}

fn welfare(cli: &CliRuns) -> Outcome {
    let (p, v) = cli.check("welfare_forms")?;
    Ok((p, format!("paid minus collapsed {v:.3e} (3 paired se and 5e-3)")))
}

fn prices_and_grid(cli: &CliRuns) -> Outcome {
    let (pg, fd) = cli.check("price_gradient")?;
    let (pc, spread) = cli.check("price_commonality")?;
    let m = wide();
    let domain = SpatialDomain::from_pilot(&m, &DVector::zeros(3), 256, 11, 5.0).map_err(err)?;
    let spec = GridSpec::uniform(domain, 17);
    let g = solve_hjb_grid(&m, &spec).map_err(err)?;
    let r = solve_riccati_unchecked(&m).map_err(err)?;
    let nodes = g.nodes_in(&spec.domain.inner(0.6));
    let grid = *g.time_grid();
    let mut worst: f64 = 0.0;
    for k in 0..grid.n_nodes() {
        let t = grid.node(k);
        for &idx in &nodes {
            let exact = r.value(t, &g.node_state(idx));
            worst = worst.max((g.slice(k)[idx] - exact).abs() / (1.0 + exact.abs()));
        }
    }
    Ok((
        pg && pc && worst < 2e-2,
        format!(
            "rows vs differences of V {fd:.3e} (< 1e-4), row spread {spread:.1e}, grid vs Riccati {worst:.3e} relative on {} interior nodes (< 2e-2)",
            nodes.len()
        ),
    ))
}

fn case_b() -> Outcome {
    let m = run_case_b(&load("B1-sum.json")?, None).map_err(err)?;
    let gap = m.check("policy_gap").map(|c| c.value).unwrap_or(f64::NAN);
    let zero = m.checks.iter().filter(|c| c.name.starts_with("zero_profit")).all(|c| c.passed);
    Ok((m.passed && gap < 1e-6 && zero, format!("policy gap {gap:.3e} (< 1e-6), zero profits {zero}")))
}

fn case_c() -> Outcome {
    let m = run_case_c(&load("B1.json")?, None).map_err(err)?;
    let reports: Vec<_> = m.checks.iter().filter(|c| c.name.starts_with("truthful[")).collect();
    let identity = m.check("truthful[agent=0,Qx1]").map(|c| c.value);
    let covered = [Block::Q, Block::R].iter().all(|b| {
        [0.5, 0.8, 1.25, 2.0]
            .iter()
            .all(|f| m.check(&format!("truthful[agent=0,{b:?}x{f}]")).is_some())
    });
    let overhead = m.notes.iter().find(|n| n.contains("budget overhead")).cloned();
    let worst = reports.iter().filter(|c| !c.name.ends_with("x1]")).map(|c| c.value).fold(f64::NEG_INFINITY, f64::max);
    Ok((
        m.passed && covered && identity == Some(0.0) && overhead.is_some(),
        format!(
            "{} reports, largest misreport gain {worst:.3e}, identity {identity:?}, {}",
            reports.len(),
            overhead.unwrap_or_else(|| "overhead missing".into())
        ),
    ))
}

fn simulation(cli: &CliRuns) -> Outcome {
    let (a, d) = (-1.0, 0.3);
    let grid = TimeGrid::with_step(0.0, 1.0, 1.0 / 400.0).map_err(err)?;
    let m = scalar_model(a, 0.0, d);
    let zero = FnPolicy::zero(0);
    let noise = Arc::new(NoiseBundle::generate(17, 10_000, grid, 2));
    let b = simulate(&m, &[&zero], &noise, &DVector::from_vec(vec![0.0, 1.0])).map_err(err)?;
    let xt: Vec<f64> = (0..b.n_paths()).map(|p| b.terminal_state(p)[1]).collect();
    let e = Estimate::from_samples(&xt).map_err(err)?;
    let var = d * d * (1.0 - (2.0 * a).exp()) / (-2.0 * a);
    let sample_var = e.std_error.powi(2) * e.n as f64;
    let moments = e.within(a.exp(), 3.0) && (sample_var / var - 1.0).abs() < 0.1;

    let still = m.with_diffusion_scaled(0.0);
    let one = Arc::new(NoiseBundle::generate(1, 1, grid, 2));
    let decay = simulate(&still, &[&zero], &one, &DVector::from_vec(vec![0.0, 1.0])).map_err(err)?;
    let decay_err = (decay.terminal_state(0)[1] - (-1.0f64).exp()).abs();

    let first = CliRuns::files(&cli.paths[0])?;
    let second = CliRuns::files(&cli.paths[1])?;
    let identical = first == second && first.contains_key("manifest.json");
    let exits_ok = cli.codes == [Some(0), Some(0)];
    Ok((
        moments && decay_err < 2e-3 && identical && exits_ok,
        format!(
            "OU mean {:.4} (se {:.1e}) vs {:.4}, variance ratio {:.4}, decay error {decay_err:.2e} (< 2e-3), {} files byte-identical {identical}, exit codes {:?}",
            e.mean,
            e.std_error,
            a.exp(),
            sample_var / var,
            first.len(),
            cli.codes
        ),
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let cli = CliRuns::run();
    let with_cli = |f: fn(&CliRuns) -> Outcome| match &cli {
        Ok(c) => f(c),
        Err(e) => Err(format!("scenario a runs failed: {e}")),
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("principal HJB residual", Box::new(hjb_residual)),
        ("agent HJB residual under w-bar", Box::new(wbar_residual)),
        ("unilateral deviations", Box::new(deviations)),
        ("profit identity and clearing", Box::new(|| with_cli(clearing))),
        ("welfare identity", Box::new(|| with_cli(welfare))),
        ("prices are the value gradient", Box::new(|| with_cli(prices_and_grid))),
        ("case B decomposition", Box::new(case_b)),
        ("case C truthfulness", Box::new(case_c)),
        ("simulation fidelity", Box::new(|| with_cli(simulation))),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (passed, summary) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {} {}: {} ({:.1} s) {summary}",
            n + 1,
            if passed { "PASS" } else { "FAIL" },
            name,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1} s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
