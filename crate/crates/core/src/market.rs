//! Price fields, the path reward they induce, agent profit and social welfare
//! accounting, and the individual-rationality check.
//!
//! A price field carries, per agent, an assured level `h_i0(t, x)` and a price
//! row `h_i1(t, x)` over the combined state. The reward paid to agent `i` along
//! a path is
//!
//! `W_i = h_i0(t0, x0) - φ_i(x_iT) - ∫ [h_i1·f(μ) + l_i(μ_i)] dt + ∫ h_i1 dx`
//!
//! with `μ` the best responses to the announced rows. The running integral uses
//! the left-endpoint rule and the stochastic integral uses left-endpoint prices
//! against realized increments. Rewards read states only.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hjb::{SpatialDomain, ValueAt, ValueSolution};
use crate::model::{terminal_value, GridModel, ModelSlice, TimeGrid};
use crate::response::respond;
use crate::sim::{Estimate, PathBundle};

/// Reward parameter `h = (h_i0, h_i1)` for every agent.
pub trait PriceField: Send + Sync {
    fn n_agents(&self) -> usize;

    fn state_dim(&self) -> usize;

    /// The field frozen at time `t`.
    fn at(&self, t: f64) -> Box<dyn PriceAt + '_>;

    fn level(&self, agent: usize, t: f64, x: &[f64]) -> f64 {
        self.at(t).level(agent, x)
    }

    fn row(&self, agent: usize, t: f64, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.state_dim());
        self.at(t).row_into(agent, x, out.as_mut_slice());
        out
    }
}

/// A price field at one time.
pub trait PriceAt {
    fn level(&self, agent: usize, x: &[f64]) -> f64;

    fn row_into(&self, agent: usize, x: &[f64], out: &mut [f64]);
}

/// `(t, x) -> value`.
pub type ScalarField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, x, out)` writing a row over the combined state.
pub type RowField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

type AgentScalar = Arc<dyn Fn(usize, f64, &[f64]) -> f64 + Send + Sync>;
type AgentRow = Arc<dyn Fn(usize, f64, &[f64], &mut [f64]) + Send + Sync>;

/// Price field given by closures.
#[derive(Clone)]
pub struct FnPriceField {
    state_dim: usize,
    n_agents: usize,
    level: AgentScalar,
    row: AgentRow,
}

impl FnPriceField {
    pub fn new(
        state_dim: usize,
        n_agents: usize,
        level: impl Fn(usize, f64, &[f64]) -> f64 + Send + Sync + 'static,
        row: impl Fn(usize, f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            state_dim,
            n_agents,
            level: Arc::new(level),
            row: Arc::new(row),
        }
    }

    /// `h ≡ 0`.
    pub fn zero(state_dim: usize, n_agents: usize) -> Self {
        Self::new(state_dim, n_agents, |_, _, _| 0.0, |_, _, _, out| out.fill(0.0))
    }
}

impl PriceField for FnPriceField {
    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn at(&self, t: f64) -> Box<dyn PriceAt + '_> {
        Box::new(FnAt { t, field: self })
    }
}

struct FnAt<'a> {
    t: f64,
    field: &'a FnPriceField,
}

impl PriceAt for FnAt<'_> {
    fn level(&self, agent: usize, x: &[f64]) -> f64 {
        (self.field.level)(agent, self.t, x)
    }

    fn row_into(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        (self.field.row)(agent, self.t, x, out)
    }
}

/// Profit floors `k_i(t, x)`.
#[derive(Clone)]
pub struct ProfitFloor {
    fields: Vec<ScalarField>,
    constants: Option<Vec<f64>>,
}

impl ProfitFloor {
    pub fn constants(values: &[f64]) -> Self {
        Self {
            fields: values
                .iter()
                .map(|&k| Arc::new(move |_: f64, _: &[f64]| k) as ScalarField)
                .collect(),
            constants: Some(values.to_vec()),
        }
    }

    pub fn zero(n_agents: usize) -> Self {
        Self::constants(&vec![0.0; n_agents])
    }

    pub fn from_fields(fields: Vec<ScalarField>) -> Self {
        Self { fields, constants: None }
    }

    pub fn n_agents(&self) -> usize {
        self.fields.len()
    }

    pub fn level(&self, agent: usize, t: f64, x: &[f64]) -> f64 {
        (self.fields[agent])(t, x)
    }

    /// Constant floors, when the floors were built from constants.
    pub fn as_constants(&self) -> Option<&[f64]> {
        self.constants.as_deref()
    }

    /// Every floor raised by `c`.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            fields: self
                .fields
                .iter()
                .map(|f| {
                    let f = Arc::clone(f);
                    Arc::new(move |t: f64, x: &[f64]| f(t, x) + c) as ScalarField
                })
                .collect(),
            constants: self.constants.as_ref().map(|v| v.iter().map(|k| k + c).collect()),
        }
    }
}

/// `h_i1 = ∇V` for every agent, `h_i0 = k_i`.
#[derive(Clone)]
pub struct ShadowPrice {
    value: Arc<ValueSolution>,
    floors: ProfitFloor,
}

impl ShadowPrice {
    pub fn new(value: Arc<ValueSolution>, floors: ProfitFloor) -> Self {
        Self { value, floors }
    }

    pub fn value(&self) -> &Arc<ValueSolution> {
        &self.value
    }

    pub fn floors(&self) -> &ProfitFloor {
        &self.floors
    }

    pub fn with_floors(&self, floors: ProfitFloor) -> Self {
        Self {
            value: Arc::clone(&self.value),
            floors,
        }
    }
}

impl PriceField for ShadowPrice {
    fn n_agents(&self) -> usize {
        self.floors.n_agents()
    }

    fn state_dim(&self) -> usize {
        self.value.state_dim()
    }

    fn at(&self, t: f64) -> Box<dyn PriceAt + '_> {
        Box::new(ShadowAt {
            t,
            value: self.value.at(t),
            floors: &self.floors,
        })
    }
}

struct ShadowAt<'a> {
    t: f64,
    value: ValueAt<'a>,
    floors: &'a ProfitFloor,
}

impl PriceAt for ShadowAt<'_> {
    fn level(&self, agent: usize, x: &[f64]) -> f64 {
        self.floors.level(agent, self.t, x)
    }

    fn row_into(&self, _agent: usize, x: &[f64], out: &mut [f64]) {
        self.value.gradient_into(x, out)
    }
}

/// Reward parameter `(w_if, w_i0, w_i1, w_i2)` of one agent.
#[derive(Clone)]
pub struct AgentRewardParameter {
    /// Terminal term, a function of the combined terminal state.
    pub terminal: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub level: ScalarField,
    pub running: ScalarField,
    pub row: RowField,
}

/// Reward parameters of all agents. The reward of agent `i` along a path is
/// `w_if(x_T) + w_i0(t0, x0) + ∫ w_i1 dt + ∫ w_i2 dx`.
#[derive(Clone)]
pub struct RewardParameterW {
    pub state_dim: usize,
    pub agents: Vec<AgentRewardParameter>,
}

impl RewardParameterW {
    /// Copy with `w_i1` of `agent` raised by `c`.
    pub fn with_running_shift(&self, agent: usize, c: f64) -> Self {
        let mut w = self.clone();
        let f = Arc::clone(&w.agents[agent].running);
        w.agents[agent].running = Arc::new(move |t, x| f(t, x) + c);
        w
    }
}

/// `w̄_if = -φ_i`, `w̄_i0 = h_i0`, `w̄_i1 = -h_i1·f(μ) - l_i(μ_i)`, `w̄_i2 = h_i1`.
pub fn build_wbar(h: Arc<dyn PriceField>, model: Arc<GridModel>) -> RewardParameterW {
    let n = model.state_dim();
    let agents = (0..model.n_agents())
        .map(|i| {
            let block = model.layout().agent_block(i);
            let rev = model.agent(i).revenue.clone();
            let terminal = Arc::new(move |x: &[f64]| -terminal_value(&rev.terminal_weight, &rev.terminal_linear, &x[block.clone()]));
            let hl = Arc::clone(&h);
            let level: ScalarField = Arc::new(move |t, x| hl.level(i, t, x));
            let (hr, m) = (Arc::clone(&h), Arc::clone(&model));
            let running: ScalarField = Arc::new(move |t, x| {
                let slice = m.slice(t);
                let at = hr.at(t);
                let mut scratch = Scratch::new(&slice);
                nash_terms(&slice, at.as_ref(), x, &mut scratch).expect("best response of a validated model");
                let row_dot_f: f64 = scratch.rows[i].iter().zip(&scratch.drift).map(|(a, b)| a * b).sum();
                let a = &slice.agents[i];
                -row_dot_f - a.stage_payoff(&x[a.state_block.clone()], &scratch.mu[a.control_block.clone()])
            });
            let hw = Arc::clone(&h);
            let row: RowField = Arc::new(move |t, x, out| hw.at(t).row_into(i, x, out));
            AgentRewardParameter {
                terminal,
                level,
                running,
                row,
            }
        })
        .collect();
    RewardParameterW { state_dim: n, agents }
}

/// Work arrays for one evaluation of the Nash terms at a state.
pub(crate) struct Scratch {
    pub rows: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub drift: Vec<f64>,
}

impl Scratch {
    pub fn new(slice: &ModelSlice) -> Self {
        Self {
            rows: vec![vec![0.0; slice.state_dim()]; slice.agents.len()],
            mu: vec![0.0; slice.control_dim()],
            drift: vec![0.0; slice.state_dim()],
        }
    }
}

/// Fills price rows, best responses `μ` and the drift `f(x, μ)` at `x`.
pub(crate) fn nash_terms(slice: &ModelSlice, price: &dyn PriceAt, x: &[f64], s: &mut Scratch) -> Result<()> {
    for a in &slice.agents {
        price.row_into(a.index, x, &mut s.rows[a.index]);
        respond(a, &s.rows[a.index][a.state_block.clone()], &mut s.mu[a.control_block.clone()])?;
    }
    slice.drift_into(x, &s.mu, &mut s.drift);
    Ok(())
}

/// Increment of each agent's reward over one step from `x` to `x_next`:
/// `-(h_i1·f(μ) + l_i(μ_i)) dt + h_i1·(x_next - x)`. Reads states only.
pub(crate) fn reward_increments(
    slice: &ModelSlice,
    price: &dyn PriceAt,
    x: &[f64],
    x_next: &[f64],
    dt: f64,
    s: &mut Scratch,
    out: &mut [f64],
) -> Result<()> {
    nash_terms(slice, price, x, s)?;
    for a in &slice.agents {
        let row = &s.rows[a.index];
        let mut priced_drift = 0.0;
        let mut priced_move = 0.0;
        for c in 0..x.len() {
            priced_drift += row[c] * s.drift[c];
            priced_move += row[c] * (x_next[c] - x[c]);
        }
        let l = a.stage_payoff(&x[a.state_block.clone()], &s.mu[a.control_block.clone()]);
        out[a.index] = -(priced_drift + l) * dt + priced_move;
    }
    Ok(())
}

/// Per-path revenues, rewards and assured levels of one bundle.
#[derive(Debug, Clone, Serialize)]
pub struct Settlement {
    /// `φ0 + ∫ l0` per path.
    pub utility_revenue: Vec<f64>,
    /// `φ_i + ∫ l_i` at the realized controls, per agent and path.
    pub agent_revenue: Vec<Vec<f64>>,
    /// `W_i` per agent and path.
    pub rewards: Vec<Vec<f64>>,
    /// `h_i0(t0, x0)` per agent and path.
    pub levels: Vec<Vec<f64>>,
}

impl Settlement {
    pub fn n_paths(&self) -> usize {
        self.utility_revenue.len()
    }

    pub fn n_agents(&self) -> usize {
        self.rewards.len()
    }

    /// `J_i + W_i` per path.
    pub fn profit_samples(&self, agent: usize) -> Vec<f64> {
        self.agent_revenue[agent]
            .iter()
            .zip(&self.rewards[agent])
            .map(|(j, w)| j + w)
            .collect()
    }

    /// `J_i + W_i - h_i0(t0, x0)` per path.
    pub fn clearing_deviation(&self, agent: usize) -> Vec<f64> {
        self.profit_samples(agent)
            .iter()
            .zip(&self.levels[agent])
            .map(|(p, h)| p - h)
            .collect()
    }

    /// `J0 - Σ W_i` per path.
    pub fn welfare_paid(&self) -> Vec<f64> {
        (0..self.n_paths())
            .map(|p| self.utility_revenue[p] - (0..self.n_agents()).map(|i| self.rewards[i][p]).sum::<f64>())
            .collect()
    }

    /// `J0 + Σ J_i - Σ h_i0` per path.
    pub fn welfare_collapsed(&self) -> Vec<f64> {
        (0..self.n_paths())
            .map(|p| {
                let revenues: f64 = (0..self.n_agents()).map(|i| self.agent_revenue[i][p]).sum();
                let levels: f64 = (0..self.n_agents()).map(|i| self.levels[i][p]).sum();
                self.utility_revenue[p] + revenues - levels
            })
            .collect()
    }

    /// `J0 + Σ J_i` per path.
    pub fn total_revenue(&self) -> Vec<f64> {
        (0..self.n_paths())
            .map(|p| self.utility_revenue[p] + (0..self.n_agents()).map(|i| self.agent_revenue[i][p]).sum::<f64>())
            .collect()
    }
}

/// Settles every path of `bundle` under the price field `h`.
pub fn settle(h: &dyn PriceField, bundle: &PathBundle, model: &GridModel) -> Result<Settlement> {
    settle_paths(h, bundle, model, 0..bundle.n_paths())
}

/// Settles the paths in `paths`.
pub fn settle_paths(h: &dyn PriceField, bundle: &PathBundle, model: &GridModel, paths: Range<usize>) -> Result<Settlement> {
    check_bundle(h, bundle, model)?;
    if paths.end > bundle.n_paths() {
        return Err(Error::PathGridMismatch(format!("path {} out of range", paths.end - 1)));
    }
    let grid = *bundle.grid();
    let dt = grid.dt();
    let n_agents = model.n_agents();
    let np = paths.len();
    let mut utility_revenue = vec![0.0; np];
    let mut agent_revenue = vec![vec![0.0; np]; n_agents];
    let mut rewards = vec![vec![0.0; np]; n_agents];
    let mut levels = vec![vec![0.0; np]; n_agents];
    let mut inc = vec![0.0; n_agents];

    let first = model.slice(grid.t0());
    let mut scratch = Scratch::new(&first);
    {
        let price = h.at(grid.t0());
        for (j, p) in paths.clone().enumerate() {
            let x0 = bundle.state(0, p);
            for i in 0..n_agents {
                levels[i][j] = price.level(i, x0);
                rewards[i][j] = levels[i][j];
            }
        }
    }
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let slice = model.slice(t);
        let price = h.at(t);
        for (j, p) in paths.clone().enumerate() {
            let x = bundle.state(k, p);
            let u = bundle.control(k, p);
            utility_revenue[j] += slice.utility_stage_payoff(x) * dt;
            for a in &slice.agents {
                agent_revenue[a.index][j] += a.stage_payoff(&x[a.state_block.clone()], &u[a.control_block.clone()]) * dt;
            }
            reward_increments(&slice, price.as_ref(), x, bundle.state(k + 1, p), dt, &mut scratch, &mut inc)?;
            for i in 0..n_agents {
                rewards[i][j] += inc[i];
            }
        }
    }
    let urev = &model.utility().revenue;
    for (j, p) in paths.enumerate() {
        let xt = bundle.terminal_state(p);
        utility_revenue[j] += terminal_value(&urev.terminal_weight, &urev.terminal_linear, xt);
        for i in 0..n_agents {
            let rev = &model.agent(i).revenue;
            let phi = terminal_value(&rev.terminal_weight, &rev.terminal_linear, &xt[model.layout().agent_block(i)]);
            agent_revenue[i][j] += phi;
            rewards[i][j] -= phi;
        }
    }
    Ok(Settlement {
        utility_revenue,
        agent_revenue,
        rewards,
        levels,
    })
}

fn check_bundle(h: &dyn PriceField, bundle: &PathBundle, model: &GridModel) -> Result<()> {
    if bundle.n_paths() == 0 {
        return Err(Error::EmptyBundle);
    }
    if bundle.state_dim() != model.state_dim() || h.state_dim() != model.state_dim() {
        return Err(Error::PathGridMismatch("state dimension differs from the model".into()));
    }
    if h.n_agents() != model.n_agents() {
        return Err(Error::dims("price field agents", model.n_agents(), h.n_agents()));
    }
    let g = bundle.grid();
    if (g.tf() - model.time_grid().tf()).abs() > 1e-12 || !model.time_grid().contains(g.t0()) {
        return Err(Error::PathGridMismatch(format!(
            "bundle covers [{}, {}], model horizon is [{}, {}]",
            g.t0(),
            g.tf(),
            model.time_grid().t0(),
            model.time_grid().tf()
        )));
    }
    Ok(())
}

/// `W_i` along one path of the bundle.
pub fn reward_along_path(h: &dyn PriceField, agent: usize, bundle: &PathBundle, path: usize, model: &GridModel) -> Result<f64> {
    Ok(settle_paths(h, bundle, model, path..path + 1)?.rewards[agent][0])
}

/// `w_if(x_T) + w_i0(t0, x0) + Σ w_i1 dt + Σ w_i2·Δx` along one path.
pub fn reward_from_parameter(w: &RewardParameterW, agent: usize, bundle: &PathBundle, path: usize) -> f64 {
    let grid = bundle.grid();
    let dt = grid.dt();
    let p = &w.agents[agent];
    let mut row = vec![0.0; w.state_dim];
    let mut total = (p.level)(grid.t0(), bundle.state(0, path));
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let x = bundle.state(k, path);
        let next = bundle.state(k + 1, path);
        (p.row)(t, x, &mut row);
        total += (p.running)(t, x) * dt;
        total += row.iter().zip(x.iter().zip(next)).map(|(r, (a, b))| r * (b - a)).sum::<f64>();
    }
    total + (p.terminal)(bundle.terminal_state(path))
}

/// Monte Carlo estimate of `J_i + E[W_i]`.
pub fn agent_profit(h: &dyn PriceField, agent: usize, bundle: &PathBundle, model: &GridModel) -> Result<Estimate> {
    Estimate::from_samples(&settle(h, bundle, model)?.profit_samples(agent))
}

#[derive(Debug, Clone, Serialize)]
pub struct WelfareReport {
    /// `J0 - Σ E[W_i]`.
    pub paid: Estimate,
    /// `J0 + Σ J_i - Σ h_i0`.
    pub collapsed: Estimate,
    /// Paired estimate of `paid - collapsed`.
    pub difference: Estimate,
    pub utility_revenue: Estimate,
    pub rewards: Vec<Estimate>,
    /// `|E[J0] - (paid + Σ E[W_i])|`.
    pub budget_residual: f64,
}

impl WelfareReport {
    pub fn from_settlement(s: &Settlement) -> Result<Self> {
        let a = s.welfare_paid();
        let b = s.welfare_collapsed();
        let paid = Estimate::from_samples(&a)?;
        let utility_revenue = Estimate::from_samples(&s.utility_revenue)?;
        let rewards = s
            .rewards
            .iter()
            .map(|r| Estimate::from_samples(r))
            .collect::<Result<Vec<_>>>()?;
        let budget_residual = (utility_revenue.mean - (paid.mean + rewards.iter().map(|r| r.mean).sum::<f64>())).abs();
        Ok(Self {
            paid,
            collapsed: Estimate::from_samples(&b)?,
            difference: Estimate::paired(&a, &b)?,
            utility_revenue,
            rewards,
            budget_residual,
        })
    }
}

/// Social welfare estimated in both forms on the same paths.
pub fn social_welfare(h: &dyn PriceField, bundle: &PathBundle, model: &GridModel) -> Result<WelfareReport> {
    WelfareReport::from_settlement(&settle(h, bundle, model)?)
}

/// Times and per-axis points at which fields are spot-checked.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeLattice {
    pub times: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
}

impl ProbeLattice {
    pub fn new(grid: &TimeGrid, domain: &SpatialDomain, n_times: usize, n_per_axis: usize) -> Self {
        let lin = |a: f64, b: f64, n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![0.5 * (a + b)];
            }
            (0..n).map(|j| a + (b - a) * j as f64 / (n - 1) as f64).collect()
        };
        Self {
            times: lin(grid.t0(), grid.tf(), n_times),
            axes: domain
                .lower
                .iter()
                .zip(&domain.upper)
                .map(|(&a, &b)| lin(a, b, n_per_axis))
                .collect(),
        }
    }

    /// 11 times and 5 points per axis.
    pub fn standard(grid: &TimeGrid, domain: &SpatialDomain) -> Self {
        Self::new(grid, domain, 11, 5)
    }

    pub fn len(&self) -> usize {
        self.times.len() * self.axes.iter().map(Vec::len).product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial points in lexicographic order, last axis fastest.
    pub fn states(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        out
    }

    pub fn points(&self) -> Vec<(f64, Vec<f64>)> {
        let states = self.states();
        self.times
            .iter()
            .flat_map(|&t| states.iter().map(move |x| (t, x.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IrViolation {
    pub agent: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IrReport {
    pub passed: bool,
    pub min_margin: f64,
    pub n_points: usize,
    pub violations: Vec<IrViolation>,
}

/// Passes iff `h_i0(t, x) >= k_i(t, x) - 1e-12` at every probe point.
pub fn check_individual_rationality(h: &dyn PriceField, floors: &ProfitFloor, lattice: &ProbeLattice) -> IrReport {
    let mut min_margin = f64::INFINITY;
    let mut violations = Vec::new();
    let states = lattice.states();
    for &t in &lattice.times {
        let at = h.at(t);
        for x in &states {
            for i in 0..h.n_agents() {
                let margin = at.level(i, x) - floors.level(i, t, x);
                min_margin = min_margin.min(margin);
                if !(margin >= -1e-12) {
                    violations.push(IrViolation {
                        agent: i,
                        t,
                        x: x.clone(),
                        margin,
                    });
                }
            }
        }
    }
    IrReport {
        passed: violations.is_empty(),
        min_margin,
        n_points: lattice.len(),
        violations,
    }
}

/// Lattice proxies for membership of a price field in the admissible class.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegularityReport {
    pub finite: bool,
    /// Largest finite-difference entry of `∂h_i1/∂x` over the lattice.
    pub max_jacobian: f64,
}

pub fn price_regularity(h: &dyn PriceField, lattice: &ProbeLattice) -> RegularityReport {
    let n = h.state_dim();
    let mut finite = true;
    let mut max_jacobian: f64 = 0.0;
    let (mut r0, mut r1) = (vec![0.0; n], vec![0.0; n]);
    let states = lattice.states();
    for &t in &lattice.times {
        let at = h.at(t);
        for x in &states {
            for i in 0..h.n_agents() {
                finite &= at.level(i, x).is_finite();
                for c in 0..n {
                    let step = 1e-4 * (1.0 + x[c].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[c] += step;
                    xm[c] -= step;
                    at.row_into(i, &xp, &mut r1);
                    at.row_into(i, &xm, &mut r0);
                    for r in 0..n {
                        finite &= r0[r].is_finite() && r1[r].is_finite();
                        max_jacobian = max_jacobian.max(((r1[r] - r0[r]) / (2.0 * step)).abs());
                    }
                }
            }
        }
    }
    RegularityReport { finite, max_jacobian }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::b1;
    use crate::response::{best_response_policy, Policy};
    use crate::sim::{simulate, NoiseBundle};

    fn nash_bundle(model: &GridModel, h: Arc<dyn PriceField>, n_paths: usize, seed: u64) -> PathBundle {
        let pols: Vec<_> = (0..model.n_agents())
            .map(|i| best_response_policy(i, Arc::clone(&h)))
            .collect();
        let refs: Vec<&dyn Policy> = pols.iter().map(|p| p as &dyn Policy).collect();
        let noise = Arc::new(NoiseBundle::generate(seed, n_paths, *model.time_grid(), model.noise_dim()));
        simulate(model, &refs, &noise, &DVector::from_vec(vec![0.1, -0.2, 0.3])).unwrap()
    }

    fn affine_field(n: usize, n_agents: usize) -> FnPriceField {
        FnPriceField::new(
            n,
            n_agents,
            |i, t, x| 0.1 * (i as f64 + 1.0) + 0.05 * t * x[0],
            |i, t, x, out| {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = 0.3 * (c as f64 - i as f64) - 0.2 * x[c] + 0.1 * t;
                }
            },
        )
    }

    #[test]
    fn zero_price_reward_is_floor_minus_own_revenue() {
        let m = b1();
        let k = 0.3;
        let h = FnPriceField::new(3, 2, move |_, _, _| k, |_, _, _, out| out.fill(0.0));
        let hb: Arc<dyn PriceField> = Arc::new(h.clone());
        let bundle = nash_bundle(&m, hb, 3, 4);
        let dt = bundle.grid().dt();
        for p in 0..3 {
            let w = reward_along_path(&h, 0, &bundle, p, &m).unwrap();
            // independent reconstruction: μ(0) = 0 so l_1 = -1/4 x_1^2
            let mut expect = k;
            for kk in 0..bundle.grid().n_steps() {
                let x1 = bundle.state(kk, p)[1];
                expect += 0.25 * x1 * x1 * dt;
            }
            let xt = bundle.terminal_state(p)[1];
            expect += 0.25 * xt * xt;
            assert!((w - expect).abs() < 1e-12, "{w} vs {expect}");
        }
    }

    #[test]
    fn deterministic_path_matches_wbar_formula() {
        let m = Arc::new(b1().with_diffusion_scaled(0.0));
        let h: Arc<dyn PriceField> = Arc::new(affine_field(3, 2));
        let bundle = nash_bundle(&m, Arc::clone(&h), 1, 1);
        let wbar = build_wbar(Arc::clone(&h), Arc::clone(&m));
        for i in 0..2 {
            let a = reward_along_path(h.as_ref(), i, &bundle, 0, &m).unwrap();
            let b = reward_from_parameter(&wbar, i, &bundle, 0);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn wbar_of_zero_price() {
        let m = Arc::new(b1());
        let h: Arc<dyn PriceField> = Arc::new(FnPriceField::zero(3, 2));
        let w = build_wbar(h, Arc::clone(&m));
        let x = [0.4, 1.2, -0.6];
        let mut row = [1.0; 3];
        (w.agents[0].row)(0.3, &x, &mut row);
        assert_eq!(row, [0.0; 3]);
        assert_eq!((w.agents[0].terminal)(&x), 0.25 * 1.2 * 1.2);
        assert!(((w.agents[1].running)(0.3, &x) - 0.25 * 0.36).abs() < 1e-15);
    }

    #[test]
    fn zero_model_has_zero_profit() {
        let base = b1();
        let mut m = base.clone();
        m.utility_mut().revenue = crate::model::QuadraticRevenue::zero(3, None);
        for a in m.agents_mut() {
            let r = a.revenue.control_weight.clone();
            a.revenue = crate::model::QuadraticRevenue {
                control_weight: r,
                ..crate::model::QuadraticRevenue::zero(1, None)
            };
        }
        let h = FnPriceField::zero(3, 2);
        let hb: Arc<dyn PriceField> = Arc::new(h.clone());
        let bundle = nash_bundle(&base, hb, 5, 2);
        let e = agent_profit(&h, 1, &bundle, &m).unwrap();
        assert_eq!(e.mean, 0.0);
        let w = social_welfare(&h, &bundle, &m).unwrap();
        assert_eq!(w.paid.mean, 0.0);
        assert_eq!(w.collapsed.mean, 0.0);
    }

    #[test]
    fn level_shift_moves_collapsed_welfare_by_total_shift() {
        let m = b1();
        let h0 = affine_field(3, 2);
        let c = 0.7;
        let base_level = Arc::clone(&h0.level);
        let row = Arc::clone(&h0.row);
        let h1 = FnPriceField::new(3, 2, move |i, t, x| base_level(i, t, x) + c, move |i, t, x, o| row(i, t, x, o));
        let bundle = nash_bundle(&m, Arc::new(h0.clone()), 50, 3);
        let a = settle(&h0, &bundle, &m).unwrap().welfare_collapsed();
        let b = settle(&h1, &bundle, &m).unwrap().welfare_collapsed();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y - 2.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn collapsed_welfare_ignores_price_rows_at_fixed_paths() {
        let m = b1();
        let h0 = affine_field(3, 2);
        let bundle = nash_bundle(&m, Arc::new(h0.clone()), 20, 5);
        let level = Arc::clone(&h0.level);
        let h1 = FnPriceField::new(3, 2, move |i, t, x| level(i, t, x), |_, _, x, o| o.copy_from_slice(x));
        let a = settle(&h0, &bundle, &m).unwrap().welfare_collapsed();
        let b = settle(&h1, &bundle, &m).unwrap().welfare_collapsed();
        assert_eq!(a, b);
    }

    #[test]
    fn budget_accounting_is_exact() {
        let m = b1();
        let h = affine_field(3, 2);
        let bundle = nash_bundle(&m, Arc::new(h.clone()), 200, 6);
        let w = social_welfare(&h, &bundle, &m).unwrap();
        assert!(w.budget_residual < 1e-12, "{}", w.budget_residual);
    }

    #[test]
    fn individual_rationality_cases() {
        let m = b1();
        let domain = SpatialDomain::new(vec![-1.0; 3], vec![1.0; 3]).unwrap();
        let lattice = ProbeLattice::standard(m.time_grid(), &domain);
        assert_eq!(lattice.len(), 11 * 125);
        let floors = ProfitFloor::constants(&[0.1, 0.2]);
        let exact = FnPriceField::new(3, 2, |i, _, _| [0.1, 0.2][i], |_, _, _, o| o.fill(0.0));
        let r = check_individual_rationality(&exact, &floors, &lattice);
        assert!(r.passed);
        assert_eq!(r.min_margin, 0.0);

        let bad = FnPriceField::new(
            3,
            2,
            |i, t, x| {
                let k = [0.1, 0.2][i];
                if i == 1 && t == 0.0 && x.iter().all(|v| *v == -1.0) {
                    k - 0.01
                } else {
                    k
                }
            },
            |_, _, _, o| o.fill(0.0),
        );
        let r = check_individual_rationality(&bad, &floors, &lattice);
        assert!(!r.passed);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].agent, 1);
        assert_eq!(r.violations[0].x, vec![-1.0; 3]);

        let zero = FnPriceField::zero(3, 2);
        assert!(check_individual_rationality(&zero, &ProfitFloor::zero(2), &lattice).passed);
    }

    #[test]
    fn regularity_of_affine_field() {
        let m = b1();
        let domain = SpatialDomain::new(vec![-1.0; 3], vec![1.0; 3]).unwrap();
        let lattice = ProbeLattice::standard(m.time_grid(), &domain);
        let r = price_regularity(&affine_field(3, 2), &lattice);
        assert!(r.finite);
        assert!((r.max_jacobian - 0.2).abs() < 1e-8);
    }
}
