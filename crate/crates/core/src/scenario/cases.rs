//! Case runners and the single-purpose subcommands.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::output::{paths_csv, prices_csv, series_csv, value_csv, Csv, Field};
use super::{domain_samples, nash_policies, policy_lattice, Check, Run, RunManifest};
use crate::config::{apply_misreport, Case, ScenarioConfig, UtilityRevenue};
use crate::error::{Error, Result};
use crate::hjb::{principal_hjb_residual, shadow_price, solve_principal, solve_riccati_unchecked, RiccatiSolution, ValueSolution};
use crate::market::{
    check_individual_rationality, settle, PriceField, ProbeLattice, ProfitFloor, Settlement, WelfareReport,
};
use crate::model::{GridModel, ModelSlice};
use crate::response::{Policy, PolicyAt};
use crate::sim::{deviation_test, simulate, DeviationReport, Estimate, NoiseBundle, PathBundle, PolicyOverride};

const RESIDUAL_SAMPLES: usize = 500;
const RESIDUAL_SEED: u64 = 0x5eed_0002;
const RESIDUAL_TOL: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-4;
const PROFIT_ABS_TOL: f64 = 5e-3;
const POLICY_GAP_TOL: f64 = 1e-6;
const CONSISTENCY_TOL: f64 = 1e-10;
const PATHS_IN_CSV: usize = 20;

fn solve(run: &mut Run<'_>, model: &GridModel) -> Result<Arc<ValueSolution>> {
    let v = solve_principal(model, run.x0(), run.cfg.solver)?;
    run.backend = v.backend().into();
    Ok(Arc::new(v))
}

fn floors(cfg: &ScenarioConfig) -> ProfitFloor {
    ProfitFloor::constants(&cfg.floors)
}

fn common_outputs(run: &mut Run<'_>, v: &ValueSolution, h: &dyn PriceField, lattice: &ProbeLattice) -> Result<()> {
    let points = lattice.points();
    run.sink.write("value.csv", &value_csv(v, &points))?;
    run.sink.write("prices.csv", &prices_csv(h, &points))?;
    if let ValueSolution::Riccati(r) = v {
        let mut text = serde_json::to_string_pretty(&r.to_json())?;
        text.push('\n');
        run.sink.write("riccati.json", text.as_bytes())?;
    }
    Ok(())
}

fn profits_csv(s: &Settlement, floors: &[f64]) -> Result<Vec<u8>> {
    let mut csv = Csv::new(&["agent", "floor", "mean", "std_error", "n"]);
    for (i, k) in floors.iter().enumerate() {
        let e = Estimate::from_samples(&s.profit_samples(i))?;
        csv.row(&[Field::Int(i), Field::Num(*k), Field::Num(e.mean), Field::Num(e.std_error), Field::Int(e.n)]);
    }
    Ok(csv.into_bytes())
}

fn welfare_csv(rows: &[(&str, Estimate)]) -> Vec<u8> {
    let mut csv = Csv::new(&["quantity", "mean", "std_error", "n"]);
    for (name, e) in rows {
        csv.row(&[Field::Text(name), Field::Num(e.mean), Field::Num(e.std_error), Field::Int(e.n)]);
    }
    csv.into_bytes()
}

fn deviations_csv(reports: &[DeviationReport]) -> Vec<u8> {
    let mut csv = Csv::new(&["agent", "deviation", "mean_change", "std_error", "n", "passed"]);
    for r in reports {
        for e in &r.entries {
            csv.row(&[
                Field::Int(r.agent),
                Field::Text(&e.label),
                Field::Num(e.mean),
                Field::Num(e.std_error),
                Field::Int(e.n_paths),
                Field::Text(if e.passed { "true" } else { "false" }),
            ]);
        }
    }
    csv.into_bytes()
}

/// Additive shifts and random feedback-gain perturbations for `agent`.
///
/// Gains have i.i.d. normal entries rescaled to a Frobenius norm drawn
/// uniformly from `(0, gain_norm]`.
pub fn deviation_overrides(cfg: &ScenarioConfig, agent: usize) -> Vec<PolicyOverride> {
    let m = cfg.model.agent(agent).control_dim();
    let n = cfg.model.state_dim();
    let d = &cfg.deviations;
    let mut out: Vec<PolicyOverride> = d
        .additive
        .iter()
        .map(|&delta| PolicyOverride::additive(agent, vec![delta; m]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed.wrapping_add(agent as u64));
    for _ in 0..d.random_gains {
        let raw = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = d.gain_norm * (1.0 - rng.gen::<f64>());
        out.push(PolicyOverride::gain(agent, raw.normalize() * norm));
    }
    out
}

fn deviation_checks(run: &mut Run<'_>, h: &Arc<dyn PriceField>) -> Result<Vec<DeviationReport>> {
    let mut reports = Vec::new();
    for i in 0..run.model.n_agents() {
        let overrides = deviation_overrides(run.cfg, i);
        let r = deviation_test(&run.model, Arc::clone(h), i, &overrides, &run.noise, run.x0())?;
        let worst = r.entries.iter().map(|e| e.mean - 3.0 * e.std_error).fold(f64::NEG_INFINITY, f64::max);
        run.check(Check::new(
            format!("deviation[{i}]"),
            r.passed,
            worst,
            format!("{} deviations, largest mean change minus 3 se", r.entries.len()),
        ));
        if let Some(pos) = run.cfg.deviations.additive.iter().position(|&d| d > 0.0) {
            let e = &r.entries[pos];
            run.check(Check::new(
                format!("deviation_strict[{i}]"),
                e.mean < -3.0 * e.std_error,
                e.mean / e.std_error.max(f64::MIN_POSITIVE),
                format!("{}: mean change in std errors", e.label),
            ));
        }
        reports.push(r);
    }
    Ok(reports)
}

/// Largest relative mismatch between the price rows and central differences
/// of `V`, and the largest spread of rows across agents.
fn gradient_checks(v: &ValueSolution, h: &dyn PriceField, lattice: &ProbeLattice) -> (f64, f64) {
    let n = h.state_dim();
    let mut worst_fd: f64 = 0.0;
    let mut worst_spread: f64 = 0.0;
    let mut row0 = vec![0.0; n];
    let mut row = vec![0.0; n];
    for (t, x) in lattice.points() {
        let at = h.at(t);
        let vat = v.at(t);
        at.row_into(0, &x, &mut row0);
        for i in 1..h.n_agents() {
            at.row_into(i, &x, &mut row);
            for c in 0..n {
                worst_spread = worst_spread.max((row[c] - row0[c]).abs());
            }
        }
        let mut fd = vec![0.0; n];
        for c in 0..n {
            let step = 1e-5 * (1.0 + x[c].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += step;
            xm[c] -= step;
            fd[c] = (vat.value(&xp) - vat.value(&xm)) / (xp[c] - xm[c]);
        }
        let scale = fd.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let err = row0.iter().zip(&fd).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        worst_fd = worst_fd.max(err / (1.0 + scale));
    }
    (worst_fd, worst_spread)
}

fn residual_check(run: &mut Run<'_>, v: &ValueSolution) -> Result<()> {
    let domain = run.probe_domain()?;
    let samples = domain_samples(&run.model, &domain, RESIDUAL_SAMPLES, RESIDUAL_SEED);
    let r = principal_hjb_residual(&run.model, v, &samples)?;
    match v {
        ValueSolution::Riccati(_) => run.check(Check::new(
            "hjb_residual",
            r.max_abs < RESIDUAL_TOL,
            r.max_abs,
            format!("max |residual| over {} interior samples", r.n),
        )),
        ValueSolution::Grid(_) => run.notes.push(format!(
            "grid backend: max |HJB residual| {:.3e} over {} samples (finite-difference consistency only)",
            r.max_abs, r.n
        )),
    }
    Ok(())
}

fn welfare_checks(run: &mut Run<'_>, s: &Settlement) -> Result<WelfareReport> {
    let w = WelfareReport::from_settlement(s)?;
    let d = w.difference;
    run.check(Check::new(
        "welfare_forms",
        d.mean.abs() <= 3.0 * d.std_error && d.mean.abs() <= PROFIT_ABS_TOL,
        d.mean,
        format!("paid minus collapsed form, paired se {:.3e}", d.std_error),
    ));
    run.check(Check::new(
        "welfare_budget",
        w.budget_residual <= 1e-12 * (1.0 + w.utility_revenue.mean.abs()),
        w.budget_residual,
        "|E[J0] - (welfare + sum of rewards)|",
    ));
    if w.paid.mean < 0.0 {
        run.notes.push(format!(
            "social welfare estimate is negative ({:.6e}) at floors {:?}",
            w.paid.mean, run.cfg.floors
        ));
    }
    Ok(w)
}

/// Case A: prices are the gradient of the principal value function and each
/// agent is assured its floor.
pub fn run_case_a(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<RunManifest> {
    let mut run = Run::start("scenario a", cfg, out)?;
    if cfg.case == Case::B || cfg.utility_revenue == UtilityRevenue::Sum {
        run.notes.push("configuration describes another case; running the Case A pipeline on its model".into());
    }
    let v = solve(&mut run, &cfg.model)?;
    run.stage("solved");
    let floors = floors(cfg);
    let h: Arc<dyn PriceField> = Arc::new(shadow_price(Arc::clone(&v), floors.clone()));

    residual_check(&mut run, &v)?;
    let domain = run.probe_domain()?;
    let lattice = ProbeLattice::standard(cfg.model.time_grid(), &domain);
    let ir = check_individual_rationality(h.as_ref(), &floors, &lattice);
    run.check(Check::new(
        "individual_rationality",
        ir.passed,
        ir.min_margin,
        format!("min h_i0 - k_i over {} lattice points", ir.n_points),
    ));
    let (fd_err, spread) = gradient_checks(&v, h.as_ref(), &lattice);
    run.check(Check::new("price_commonality", spread == 0.0, spread, "max |row_i - row_0| on the lattice"));
    if let ValueSolution::Riccati(_) = *v {
        run.check(Check::new(
            "price_gradient",
            fd_err <= GRADIENT_TOL,
            fd_err,
            "max relative gap between price rows and central differences of V",
        ));
    } else {
        run.notes.push(format!("grid backend: price rows vs differences of V {fd_err:.3e}"));
    }

    let bundle = run.nash_bundle(&cfg.model, &h)?;
    run.stage("simulated");
    let s = settle(h.as_ref(), &bundle, &cfg.model)?;
    for (i, k) in cfg.floors.iter().enumerate() {
        let e = Estimate::from_samples(&s.profit_samples(i))?;
        let err = e.mean - k;
        run.check(Check::new(
            format!("profit_identity[{i}]"),
            e.within(*k, 3.0) && err.abs() <= PROFIT_ABS_TOL,
            err,
            format!("profit {:.6e} vs floor {k}, se {:.3e}", e.mean, e.std_error),
        ));
    }
    let w = welfare_checks(&mut run, &s)?;
    let reports = deviation_checks(&mut run, &h)?;
    run.stage("deviations");

    common_outputs(&mut run, &v, h.as_ref(), &lattice)?;
    run.sink.write("profits.csv", &profits_csv(&s, &cfg.floors)?)?;
    run.sink.write(
        "welfare.csv",
        &welfare_csv(&[
            ("welfare_paid", w.paid),
            ("welfare_collapsed", w.collapsed),
            ("paid_minus_collapsed", w.difference),
            ("utility_revenue", w.utility_revenue),
        ]),
    )?;
    run.sink.write("deviations.csv", &deviations_csv(&reports))?;
    run.sink.write("series.csv", &series_csv(&bundle))?;
    run.finish()
}

/// Centralized linear feedback `-R^{-1} B' (P x + q)` from a Riccati solution,
/// projected onto the box.
pub struct CentralizedPolicy {
    agent: usize,
    solution: Arc<RiccatiSolution>,
}

impl CentralizedPolicy {
    pub fn new(agent: usize, solution: Arc<RiccatiSolution>) -> Self {
        Self { agent, solution }
    }

    /// Gain `K` and offset `k` with `u = K x + k` at `slice.t`.
    pub fn gain(&self, slice: &ModelSlice) -> (DMatrix<f64>, DVector<f64>) {
        let a = &slice.agents[self.agent];
        let (p, q, _) = self.solution.coefficients(slice.t);
        let b = slice.input.columns(a.control_block.start, a.control_dim()).into_owned();
        let chol = a.control_weight.clone().cholesky().expect("validated R");
        let bt = b.transpose();
        (-chol.solve(&(&bt * p)), -chol.solve(&(bt * q)))
    }
}

impl Policy for CentralizedPolicy {
    fn agent(&self) -> usize {
        self.agent
    }

    fn label(&self) -> String {
        format!("centralized[{}]", self.agent)
    }

    fn at<'a>(&'a self, slice: &'a ModelSlice) -> Box<dyn PolicyAt + 'a> {
        let (gain, offset) = self.gain(slice);
        Box::new(LinearAt {
            gain,
            offset,
            set: &slice.agents[self.agent].control_set,
        })
    }
}

struct LinearAt<'a> {
    gain: DMatrix<f64>,
    offset: DVector<f64>,
    set: &'a crate::model::ControlSet,
}

impl PolicyAt for LinearAt<'_> {
    fn control_into(&self, x: &[f64], u: &mut [f64]) -> Result<()> {
        for (r, ur) in u.iter_mut().enumerate() {
            let mut acc = self.offset[r];
            for (c, xc) in x.iter().enumerate() {
                acc += self.gain[(r, c)] * xc;
            }
            *ur = acc;
        }
        self.set.project(u);
        Ok(())
    }
}

/// Case B: summed revenue, zero floors. Decentralized best responses to `∇V`
/// reproduce the centralized optimum.
pub fn run_case_b(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<RunManifest> {
    if cfg.utility_revenue != UtilityRevenue::Sum {
        return Err(Error::Scenario("case B needs \"utility_revenue\": \"sum\"".into()));
    }
    let mut run = Run::start("scenario b", cfg, out)?;
    let model = &cfg.model;
    let n_agents = model.n_agents();
    let v = solve(&mut run, model)?;
    let zero = ProfitFloor::zero(n_agents);
    let h: Arc<dyn PriceField> = Arc::new(shadow_price(Arc::clone(&v), zero.clone()));
    let central = Arc::new(solve_riccati_unchecked(model)?);
    run.stage("solved");

    let domain = run.probe_domain()?;
    let lattice = policy_lattice(model, &domain);
    let pols = nash_policies(n_agents, &h);
    let cpols: Vec<CentralizedPolicy> = (0..n_agents).map(|i| CentralizedPolicy::new(i, Arc::clone(&central))).collect();
    let mut gap: f64 = 0.0;
    let states = lattice.states();
    for &t in &lattice.times {
        let slice = model.slice(t);
        for (a, pol) in slice.agents.iter().zip(&pols) {
            let nash = pol.at(&slice);
            let (k, k0) = cpols[a.index].gain(&slice);
            let mut u = vec![0.0; a.control_dim()];
            for x in &states {
                nash.control_into(x, &mut u)?;
                let c = &k * DVector::from_column_slice(x) + &k0;
                gap = gap.max(u.iter().zip(c.iter()).fold(0.0, |m, (p, q)| m.max((p - q).abs())));
            }
        }
    }
    run.check(Check::new(
        "policy_gap",
        gap < POLICY_GAP_TOL,
        gap,
        format!("max |mu_i(grad V) - centralized feedback| over {} lattice points", lattice.len()),
    ));

    let case_a = solve_principal(model, run.x0(), cfg.solver)?;
    let ha = shadow_price(Arc::new(case_a), zero.clone());
    let mut diff: f64 = 0.0;
    let (mut ra, mut rb) = (vec![0.0; model.state_dim()], vec![0.0; model.state_dim()]);
    for (t, x) in ProbeLattice::standard(model.time_grid(), &domain).points() {
        for i in 0..n_agents {
            ha.at(t).row_into(i, &x, &mut ra);
            h.at(t).row_into(i, &x, &mut rb);
            diff = diff.max(ra.iter().zip(&rb).fold(0.0, |m, (p, q)| m.max((p - q).abs())));
        }
    }
    run.check(Check::new(
        "case_a_consistency",
        diff < CONSISTENCY_TOL,
        diff,
        "max |h_i1 (case B) - h_i1 (case A, zero floors)| on the lattice",
    ));

    let dec = run.nash_bundle(model, &h)?;
    let refs: Vec<&dyn Policy> = cpols.iter().map(|p| p as &dyn Policy).collect();
    let cen = simulate(model, &refs, &run.noise, run.x0())?;
    run.stage("simulated");
    let s = settle(h.as_ref(), &dec, model)?;
    for i in 0..n_agents {
        let e = Estimate::from_samples(&s.profit_samples(i))?;
        run.check(Check::new(
            format!("zero_profit[{i}]"),
            e.within(0.0, 3.0),
            e.mean,
            format!("agent profit, se {:.3e}", e.std_error),
        ));
    }
    let wd = s.total_revenue();
    let wc = settle(h.as_ref(), &cen, model)?.total_revenue();
    let paired = Estimate::paired(&wd, &wc)?;
    let max_path = wd.iter().zip(&wc).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    run.check(Check::new(
        "welfare_centralized_match",
        max_path <= CONSISTENCY_TOL,
        max_path,
        format!("max per-path |welfare gap| (mean gap {:.3e})", paired.mean),
    ));

    common_outputs(&mut run, &v, h.as_ref(), &lattice)?;
    run.sink.write("profits.csv", &profits_csv(&s, &vec![0.0; n_agents])?)?;
    run.sink.write(
        "welfare.csv",
        &welfare_csv(&[
            ("welfare_decentralized", Estimate::from_samples(&wd)?),
            ("welfare_centralized", Estimate::from_samples(&wc)?),
            ("decentralized_minus_centralized", paired),
        ]),
    )?;
    run.sink.write("series.csv", &series_csv(&dec))?;
    run.finish()
}

/// Groves profit of each agent per path: its realized revenue, the side
/// payment equal to everyone else's realized revenue, and its floor.
fn groves_profit(s: &Settlement, agent: usize, floor: f64) -> Vec<f64> {
    (0..s.n_paths())
        .map(|p| {
            let others: f64 = (0..s.n_agents()).filter(|&j| j != agent).map(|j| s.agent_revenue[j][p]).sum();
            s.agent_revenue[agent][p] + s.utility_revenue[p] + others + floor
        })
        .collect()
}

/// Case C: each agent additionally receives the revenue of the utility and of
/// the other agents. Misreports are tested against the truthful run on shared
/// noise.
pub fn run_case_c(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<RunManifest> {
    let mut run = Run::start("scenario c", cfg, out)?;
    let model = &cfg.model;
    let v = solve(&mut run, model)?;
    let reference = solve_principal(model, run.x0(), cfg.solver)?;
    run.check(Check::new(
        "case_a_reduction",
        *v == reference,
        if *v == reference { 0.0 } else { 1.0 },
        "value function equals the case A solve bit for bit",
    ));
    let floors = floors(cfg);
    let h: Arc<dyn PriceField> = Arc::new(shadow_price(Arc::clone(&v), floors.clone()));
    let truthful = settle(h.as_ref(), &run.nash_bundle(model, &h)?, model)?;
    run.stage("truthful run");

    let n_agents = model.n_agents();
    let base: Vec<Vec<f64>> = (0..n_agents).map(|i| groves_profit(&truthful, i, cfg.floors[i])).collect();
    let overhead: Vec<f64> = (0..truthful.n_paths())
        .map(|p| (0..n_agents).map(|i| base[i][p] - truthful.agent_revenue[i][p] - cfg.floors[i]).sum())
        .collect();
    let overhead = Estimate::from_samples(&overhead)?;
    run.notes.push(format!(
        "budget overhead E[sum of side payments] = {:.6e} (se {:.3e}), paid from the social welfare budget",
        overhead.mean, overhead.std_error
    ));

    let mut csv = Csv::new(&["agent", "block", "factor", "mean_change", "std_error", "max_abs_path_change", "passed"]);
    let mut misreports = cfg.misreports.clone();
    if !misreports.iter().any(|m| m.factor == 1.0) {
        misreports.insert(0, crate::config::Misreport { agent: 0, block: crate::config::Block::Q, factor: 1.0 });
    }
    for m in &misreports {
        let reported = apply_misreport(model, m);
        let vr = Arc::new(solve_principal(&reported, run.x0(), cfg.solver)?);
        let hr: Arc<dyn PriceField> = Arc::new(shadow_price(vr, floors.clone()));
        let bundle = run.nash_bundle(model, &hr)?;
        let s = settle(hr.as_ref(), &bundle, model)?;
        let profit = groves_profit(&s, m.agent, cfg.floors[m.agent]);
        let d = Estimate::paired(&profit, &base[m.agent])?;
        let max_abs = profit.iter().zip(&base[m.agent]).fold(0.0_f64, |a, (p, q)| a.max((p - q).abs()));
        let name = format!("truthful[agent={},{:?}x{}]", m.agent, m.block, m.factor);
        let passed = if m.factor == 1.0 { max_abs == 0.0 } else { d.mean <= 3.0 * d.std_error };
        let detail = if m.factor == 1.0 {
            "identity report: max per-path profit change".to_string()
        } else {
            format!("misreported minus truthful profit, paired se {:.3e}", d.std_error)
        };
        run.check(Check::new(name, passed, if m.factor == 1.0 { max_abs } else { d.mean }, detail));
        csv.row(&[
            Field::Int(m.agent),
            Field::Text(&format!("{:?}", m.block)),
            Field::Num(m.factor),
            Field::Num(d.mean),
            Field::Num(d.std_error),
            Field::Num(max_abs),
            Field::Text(if passed { "true" } else { "false" }),
        ]);
    }
    run.stage("misreports");

    let domain = run.probe_domain()?;
    common_outputs(&mut run, &v, h.as_ref(), &ProbeLattice::standard(model.time_grid(), &domain))?;
    let mut pcsv = Csv::new(&["agent", "floor", "mean", "std_error", "n"]);
    for (i, b) in base.iter().enumerate() {
        let e = Estimate::from_samples(b)?;
        pcsv.row(&[Field::Int(i), Field::Num(cfg.floors[i]), Field::Num(e.mean), Field::Num(e.std_error), Field::Int(e.n)]);
    }
    run.sink.write("profits.csv", &pcsv.into_bytes())?;
    run.sink.write("misreports.csv", &csv.into_bytes())?;
    run.sink.write(
        "welfare.csv",
        &welfare_csv(&[
            ("total_revenue", Estimate::from_samples(&truthful.total_revenue())?),
            ("budget_overhead", overhead),
        ]),
    )?;
    run.finish()
}

/// Value function and prices only.
pub fn run_solve(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<RunManifest> {
    let mut run = Run::start("solve", cfg, out)?;
    let v = solve(&mut run, &cfg.model)?;
    let h = shadow_price(Arc::clone(&v), floors(cfg));
    residual_check(&mut run, &v)?;
    let domain = run.probe_domain()?;
    common_outputs(&mut run, &v, &h, &ProbeLattice::standard(cfg.model.time_grid(), &domain))?;
    run.finish()
}

/// Nash simulation with path statistics and settled profits.
pub fn run_simulate(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<RunManifest> {
    let mut run = Run::start("simulate", cfg, out)?;
    let v = solve(&mut run, &cfg.model)?;
    let h: Arc<dyn PriceField> = Arc::new(shadow_price(v, floors(cfg)));
    let bundle = run.nash_bundle(&cfg.model, &h)?;
    let s = settle(h.as_ref(), &bundle, &cfg.model)?;
    run.sink.write("profits.csv", &profits_csv(&s, &cfg.floors)?)?;
    run.sink.write("series.csv", &series_csv(&bundle))?;
    run.sink.write("paths.csv", &paths_csv(&bundle, PATHS_IN_CSV))?;
    run.finish()
}

/// Deviation tests for every agent.
pub fn run_deviation_test(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<RunManifest> {
    let mut run = Run::start("deviation-test", cfg, out)?;
    let v = solve(&mut run, &cfg.model)?;
    let h: Arc<dyn PriceField> = Arc::new(shadow_price(v, floors(cfg)));
    let reports = deviation_checks(&mut run, &h)?;
    run.sink.write("deviations.csv", &deviations_csv(&reports))?;
    run.finish()
}

/// Largest `|J_i + W_i - h_i0|` over agents and paths of the Nash bundle
/// driven by `noise`.
pub fn clearing_deviation_max(
    model: &GridModel,
    h: &Arc<dyn PriceField>,
    noise: &Arc<NoiseBundle>,
    x0: &DVector<f64>,
) -> Result<f64> {
    let pols = nash_policies(model.n_agents(), h);
    let refs: Vec<&dyn Policy> = pols.iter().map(|p| p as &dyn Policy).collect();
    let bundle: PathBundle = simulate(model, &refs, noise, x0)?;
    let s = settle(h.as_ref(), &bundle, model)?;
    Ok((0..model.n_agents())
        .flat_map(|i| s.clearing_deviation(i))
        .fold(0.0, |m, d| m.max(d.abs())))
}
