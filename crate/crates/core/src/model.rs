//! Linearized grid model: utility and agent dynamics, quadratic revenues and
//! control sets, plus the admissibility checks run before any solve.
//!
//! The combined state is `x = (x0, x1, ..., xN)` with the utility block first.
//! Agents are indexed from zero.

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// Threshold for positive-definiteness checks.
pub const PD_EPS: f64 = 1e-10;

/// Uniform time grid on `[t0, tf]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    t0: f64,
    tf: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, tf: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && tf.is_finite()) || t0 >= tf {
            return Err(Error::InvalidTimeGrid(format!("need t0 < tf, got [{t0}, {tf}]")));
        }
        if n_steps < 2 {
            return Err(Error::InvalidTimeGrid(format!("need at least 2 steps, got {n_steps}")));
        }
        Ok(Self { t0, tf, n_steps })
    }

    /// Grid on `[t0, tf]` whose step is the closest uniform step to `dt`.
    pub fn with_step(t0: f64, tf: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidTimeGrid(format!("step must be positive, got {dt}")));
        }
        let n = ((tf - t0) / dt).round().max(1.0) as usize;
        Self::new(t0, tf, n)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.tf - self.t0) / self.n_steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.tf
        } else {
            self.t0 + (self.tf - self.t0) * (k as f64) / (self.n_steps as f64)
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.node(k))
    }

    /// Same interval, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.t0, self.tf, self.n_steps * factor.max(1))
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t0 - 1e-12 && t <= self.tf + 1e-12
    }

    /// Index of the interval containing `t` and the fractional position in it.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = ((t - self.t0) / self.dt()).clamp(0.0, self.n_steps as f64);
        let k = (s.floor() as usize).min(self.n_steps - 1);
        (k, s - k as f64)
    }
}

/// Matrix-valued coefficient sampled in time, evaluated by piecewise-linear
/// interpolation and held constant outside the sample range.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTrajectory {
    samples: Vec<(f64, DMatrix<f64>)>,
}

impl CoefficientTrajectory {
    pub fn constant(m: DMatrix<f64>) -> Self {
        Self { samples: vec![(0.0, m)] }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, v))
    }

    pub fn sampled(name: &str, samples: Vec<(f64, DMatrix<f64>)>) -> Result<Self> {
        let bad = |reason: String| Error::InvalidTrajectory {
            name: name.to_string(),
            reason,
        };
        let first = samples.first().ok_or_else(|| bad("no samples".into()))?;
        let shape = first.1.shape();
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(bad(format!("sample times not increasing at t = {}", w[1].0)));
            }
        }
        for (t, m) in &samples {
            if m.shape() != shape {
                return Err(bad(format!("sample at t = {t} has shape {:?}, expected {:?}", m.shape(), shape)));
            }
            if !t.is_finite() || m.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("non-finite sample at t = {t}")));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, DMatrix<f64>)] {
        &self.samples
    }

    pub fn is_constant(&self) -> bool {
        self.samples.len() == 1
    }

    pub fn shape(&self) -> (usize, usize) {
        self.samples[0].1.shape()
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let s = &self.samples;
        if s.len() == 1 || t <= s[0].0 {
            return s[0].1.clone();
        }
        let last = s.len() - 1;
        if t >= s[last].0 {
            return s[last].1.clone();
        }
        let j = s.partition_point(|(ts, _)| *ts <= t) - 1;
        let (ta, ma) = &s[j];
        let (tb, mb) = &s[j + 1];
        let w = (t - ta) / (tb - ta);
        ma * (1.0 - w) + mb * w
    }

    /// Largest entrywise slope between consecutive samples.
    pub fn lipschitz_bound(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (&w[1].1 - &w[0].1).amax() / (w[1].0 - w[0].0))
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Self {
            samples: self.samples.iter().map(|(t, m)| (*t, f(m))).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|m| m * factor)
    }

    /// Union of the sample times of several trajectories, sorted.
    pub(crate) fn knot_times<'a>(trajectories: impl IntoIterator<Item = &'a Self>) -> Vec<f64> {
        let mut ts: Vec<f64> = trajectories
            .into_iter()
            .filter(|c| !c.is_constant())
            .flat_map(|c| c.samples.iter().map(|(t, _)| *t))
            .collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }
}

/// Box control set `lower <= u <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> std::result::Result<Self, String> {
        if lower.len() != upper.len() {
            return Err(format!("lower has {} entries, upper has {}", lower.len(), upper.len()));
        }
        if let Some(j) = (0..lower.len()).find(|&j| !(lower[j] <= upper[j])) {
            return Err(format!("lower[{j}] = {} exceeds upper[{j}] = {}", lower[j], upper[j]));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        Self {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn project(&self, u: &mut [f64]) {
        for (j, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.lower[j], self.upper[j]);
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .enumerate()
            .all(|(j, v)| *v >= self.lower[j] && *v <= self.upper[j])
    }
}

/// Quadratic revenue: terminal payoff `-1/2 x'Qf x - qf'x` and stage payoff
/// `-1/2 x'Q(t)x - 1/2 u'R(t)u`. Revenues are maximized.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticRevenue {
    pub terminal_weight: DMatrix<f64>,
    pub terminal_linear: DVector<f64>,
    pub state_weight: CoefficientTrajectory,
    /// `None` for a control-independent stage payoff.
    pub control_weight: Option<CoefficientTrajectory>,
}

impl QuadraticRevenue {
    pub fn state_dim(&self) -> usize {
        self.terminal_weight.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.control_weight.as_ref().map_or(0, |r| r.shape().0)
    }

    pub fn zero(state_dim: usize, control_dim: Option<usize>) -> Self {
        Self {
            terminal_weight: DMatrix::zeros(state_dim, state_dim),
            terminal_linear: DVector::zeros(state_dim),
            state_weight: CoefficientTrajectory::constant(DMatrix::zeros(state_dim, state_dim)),
            control_weight: control_dim.map(|m| CoefficientTrajectory::constant(DMatrix::zeros(m, m))),
        }
    }

    pub fn stage_payoff(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        check_len("revenue state", self.state_dim(), x.len())?;
        check_len("revenue control", self.control_dim(), u.len())?;
        let q = self.state_weight.eval(t);
        let mut v = -0.5 * quad_form(&q, x.as_slice());
        if let Some(r) = &self.control_weight {
            v -= 0.5 * quad_form(&r.eval(t), u.as_slice());
        }
        Ok(v)
    }

    pub fn terminal_payoff(&self, x: &DVector<f64>) -> Result<f64> {
        check_len("revenue state", self.state_dim(), x.len())?;
        Ok(terminal_value(&self.terminal_weight, &self.terminal_linear, x.as_slice()))
    }
}

/// Free-function form of [`QuadraticRevenue::stage_payoff`].
pub fn stage_payoff(revenue: &QuadraticRevenue, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    revenue.stage_payoff(t, x, u)
}

pub fn terminal_payoff(revenue: &QuadraticRevenue, x: &DVector<f64>) -> Result<f64> {
    revenue.terminal_payoff(x)
}

/// One agent: `dx_i = (A_i x_i + B_i u_i) dt + D_i dβ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub drift: CoefficientTrajectory,
    pub input: CoefficientTrajectory,
    pub diffusion: CoefficientTrajectory,
    pub revenue: QuadraticRevenue,
    pub control_set: ControlSet,
}

impl AgentSpec {
    pub fn state_dim(&self) -> usize {
        self.drift.shape().0
    }

    pub fn control_dim(&self) -> usize {
        self.input.shape().1
    }
}

/// Utility: `dx_0 = (A_00 x_0 + Σ A_0i x_i) dt + D_0 dβ`, with a revenue over the
/// full combined state and no control term.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec {
    pub drift: CoefficientTrajectory,
    pub couplings: Vec<CoefficientTrajectory>,
    pub diffusion: CoefficientTrajectory,
    pub revenue: QuadraticRevenue,
}

impl UtilitySpec {
    pub fn state_dim(&self) -> usize {
        self.drift.shape().0
    }
}

/// Offsets of the utility and agent blocks inside the combined state and the
/// stacked control vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StateLayout {
    utility_dim: usize,
    state_dims: Vec<usize>,
    control_dims: Vec<usize>,
}

impl StateLayout {
    pub fn new(utility_dim: usize, state_dims: Vec<usize>, control_dims: Vec<usize>) -> Self {
        Self {
            utility_dim,
            state_dims,
            control_dims,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.state_dims.len()
    }

    pub fn utility_dim(&self) -> usize {
        self.utility_dim
    }

    pub fn state_dim(&self) -> usize {
        self.utility_dim + self.state_dims.iter().sum::<usize>()
    }

    pub fn control_dim(&self) -> usize {
        self.control_dims.iter().sum()
    }

    pub fn utility_block(&self) -> Range<usize> {
        0..self.utility_dim
    }

    pub fn agent_block(&self, i: usize) -> Range<usize> {
        let start = self.utility_dim + self.state_dims[..i].iter().sum::<usize>();
        start..start + self.state_dims[i]
    }

    pub fn control_block(&self, i: usize) -> Range<usize> {
        let start: usize = self.control_dims[..i].iter().sum();
        start..start + self.control_dims[i]
    }
}

/// Full grid model on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    time_grid: TimeGrid,
    utility: UtilitySpec,
    agents: Vec<AgentSpec>,
    layout: StateLayout,
    noise_dim: usize,
}

impl GridModel {
    /// Builds the model and checks every block dimension.
    pub fn new(time_grid: TimeGrid, utility: UtilitySpec, agents: Vec<AgentSpec>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::Config("model needs at least one agent".into()));
        }
        let n0 = utility.state_dim();
        let layout = StateLayout::new(
            n0,
            agents.iter().map(AgentSpec::state_dim).collect(),
            agents.iter().map(AgentSpec::control_dim).collect(),
        );
        let n = layout.state_dim();
        let noise_dim = utility.diffusion.shape().1;

        expect_shape("A00", &utility.drift, (n0, n0))?;
        expect_shape("D0", &utility.diffusion, (n0, noise_dim))?;
        if utility.couplings.len() != agents.len() {
            return Err(Error::dims("A0i couplings", agents.len(), utility.couplings.len()));
        }
        expect_revenue("utility revenue", &utility.revenue, n, None)?;
        for (i, (agent, coupling)) in agents.iter().zip(&utility.couplings).enumerate() {
            let (ni, mi) = (agent.state_dim(), agent.control_dim());
            expect_shape(&format!("A0{}", i + 1), coupling, (n0, ni))?;
            expect_shape(&format!("A (agent {i})"), &agent.drift, (ni, ni))?;
            expect_shape(&format!("B (agent {i})"), &agent.input, (ni, mi))?;
            expect_shape(&format!("D (agent {i})"), &agent.diffusion, (ni, noise_dim))?;
            expect_revenue(&format!("revenue (agent {i})"), &agent.revenue, ni, Some(mi))?;
            if agent.control_set.dim() != mi {
                return Err(Error::dims(format!("box (agent {i})"), mi, agent.control_set.dim()));
            }
        }
        Ok(Self {
            time_grid,
            utility,
            agents,
            layout,
            noise_dim,
        })
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.time_grid
    }

    pub fn utility(&self) -> &UtilitySpec {
        &self.utility
    }

    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentSpec {
        &self.agents[i]
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn state_dim(&self) -> usize {
        self.layout.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.layout.control_dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn with_time_grid(&self, grid: TimeGrid) -> Self {
        Self {
            time_grid: grid,
            ..self.clone()
        }
    }

    /// Copy with every agent's box replaced.
    pub fn with_boxes(&self, half_width: f64) -> Self {
        let mut m = self.clone();
        for a in &mut m.agents {
            a.control_set = ControlSet::symmetric(a.control_dim(), half_width);
        }
        m
    }

    /// Copy with all diffusion blocks scaled by `factor` (zero gives a
    /// deterministic model, which no longer passes validation).
    pub fn with_diffusion_scaled(&self, factor: f64) -> Self {
        let mut m = self.clone();
        m.utility.diffusion = m.utility.diffusion.scaled(factor);
        for a in &mut m.agents {
            a.diffusion = a.diffusion.scaled(factor);
        }
        m
    }

    pub(crate) fn agents_mut(&mut self) -> &mut [AgentSpec] {
        &mut self.agents
    }

    #[cfg(test)]
    pub(crate) fn utility_mut(&mut self) -> &mut UtilitySpec {
        &mut self.utility
    }

    /// All coefficients frozen at time `t`, assembled into combined matrices.
    pub fn slice(&self, t: f64) -> ModelSlice {
        let n = self.state_dim();
        let m = self.control_dim();
        let l = &self.layout;
        let mut drift = DMatrix::zeros(n, n);
        let mut input = DMatrix::zeros(n, m);
        let mut diffusion = DMatrix::zeros(n, self.noise_dim);
        let u0 = l.utility_block();
        drift
            .view_mut((u0.start, u0.start), (u0.len(), u0.len()))
            .copy_from(&self.utility.drift.eval(t));
        diffusion
            .view_mut((u0.start, 0), (u0.len(), self.noise_dim))
            .copy_from(&self.utility.diffusion.eval(t));
        let mut agents = Vec::with_capacity(self.agents.len());
        for (i, agent) in self.agents.iter().enumerate() {
            let xb = l.agent_block(i);
            let ub = l.control_block(i);
            let a = agent.drift.eval(t);
            let b = agent.input.eval(t);
            drift
                .view_mut((u0.start, xb.start), (u0.len(), xb.len()))
                .copy_from(&self.utility.couplings[i].eval(t));
            drift.view_mut((xb.start, xb.start), (xb.len(), xb.len())).copy_from(&a);
            input.view_mut((xb.start, ub.start), (xb.len(), ub.len())).copy_from(&b);
            diffusion
                .view_mut((xb.start, 0), (xb.len(), self.noise_dim))
                .copy_from(&agent.diffusion.eval(t));
            let r = agent
                .revenue
                .control_weight
                .as_ref()
                .map(|r| r.eval(t))
                .unwrap_or_else(|| DMatrix::zeros(ub.len(), ub.len()));
            agents.push(AgentSlice::new(
                i,
                xb,
                ub,
                a,
                b,
                agent.revenue.state_weight.eval(t),
                r,
                agent.control_set.clone(),
            ));
        }
        let covariance = &diffusion * diffusion.transpose();
        ModelSlice {
            t,
            drift,
            input,
            diffusion,
            covariance,
            utility_weight: self.utility.revenue.state_weight.eval(t),
            agents,
        }
    }

    /// Knot times of every time-varying coefficient plus the grid nodes.
    pub(crate) fn check_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.time_grid.nodes().collect();
        let mut coeffs: Vec<&CoefficientTrajectory> =
            vec![&self.utility.drift, &self.utility.diffusion, &self.utility.revenue.state_weight];
        coeffs.extend(self.utility.couplings.iter());
        for a in &self.agents {
            coeffs.extend([&a.drift, &a.input, &a.diffusion, &a.revenue.state_weight]);
            coeffs.extend(a.revenue.control_weight.iter());
        }
        ts.extend(
            CoefficientTrajectory::knot_times(coeffs)
                .into_iter()
                .filter(|t| self.time_grid.contains(*t)),
        );
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }
}

impl fmt::Display for GridModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "grid model: n = {} (utility {}, agents {:?}), m = {}, noise dim {}, t in [{}, {}] with {} steps",
            self.state_dim(),
            self.layout.utility_dim,
            self.layout.state_dims,
            self.control_dim(),
            self.noise_dim,
            self.time_grid.t0,
            self.time_grid.tf,
            self.time_grid.n_steps
        )
    }
}

/// Agent coefficients frozen at one time.
#[derive(Debug, Clone)]
pub struct AgentSlice {
    pub index: usize,
    pub state_block: Range<usize>,
    pub control_block: Range<usize>,
    pub drift: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub state_weight: DMatrix<f64>,
    pub control_weight: DMatrix<f64>,
    pub control_set: ControlSet,
    /// Diagonal of `R` when `R` is diagonal.
    pub(crate) diagonal_weight: Option<Vec<f64>>,
    pub(crate) weight_lambda_max: f64,
}

impl AgentSlice {
    #[allow(clippy::too_many_arguments)]
    fn new(
        index: usize,
        state_block: Range<usize>,
        control_block: Range<usize>,
        drift: DMatrix<f64>,
        input: DMatrix<f64>,
        state_weight: DMatrix<f64>,
        control_weight: DMatrix<f64>,
        control_set: ControlSet,
    ) -> Self {
        let m = control_weight.nrows();
        let is_diag = (0..m).all(|r| (0..m).all(|c| r == c || control_weight[(r, c)] == 0.0));
        let diagonal_weight = is_diag.then(|| (0..m).map(|j| control_weight[(j, j)]).collect());
        let weight_lambda_max = if m == 0 {
            0.0
        } else {
            SymmetricEigen::new(control_weight.clone()).eigenvalues.max()
        };
        Self {
            index,
            state_block,
            control_block,
            drift,
            input,
            state_weight,
            control_weight,
            control_set,
            diagonal_weight,
            weight_lambda_max,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_block.len()
    }

    pub fn control_dim(&self) -> usize {
        self.control_block.len()
    }

    /// `-1/2 x_i'Q_i x_i - 1/2 u_i'R_i u_i` with `x_i`, `u_i` the agent's own blocks.
    pub fn stage_payoff(&self, xi: &[f64], ui: &[f64]) -> f64 {
        -0.5 * quad_form(&self.state_weight, xi) - 0.5 * quad_form(&self.control_weight, ui)
    }
}

/// Every model coefficient frozen at time `t`.
#[derive(Debug, Clone)]
pub struct ModelSlice {
    pub t: f64,
    /// Combined drift matrix with the block structure of the grid model.
    pub drift: DMatrix<f64>,
    /// Stacked input matrix, `n x m`.
    pub input: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    /// `D D^T`.
    pub covariance: DMatrix<f64>,
    /// Utility running weight over the full state.
    pub utility_weight: DMatrix<f64>,
    pub agents: Vec<AgentSlice>,
}

impl ModelSlice {
    pub fn state_dim(&self) -> usize {
        self.drift.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.input.ncols()
    }

    /// `out = A x + B u`.
    pub fn drift_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        let m = self.control_dim();
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += self.drift[(r, c)] * x[c];
            }
            for c in 0..m {
                acc += self.input[(r, c)] * u[c];
            }
            out[r] = acc;
        }
    }

    /// `out = D Δβ`.
    pub fn diffusion_into(&self, dbeta: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        for r in 0..n {
            let mut acc = 0.0;
            for (c, db) in dbeta.iter().enumerate() {
                acc += self.diffusion[(r, c)] * db;
            }
            out[r] = acc;
        }
    }

    pub fn utility_stage_payoff(&self, x: &[f64]) -> f64 {
        -0.5 * quad_form(&self.utility_weight, x)
    }
}

/// `f(t, x, u) = f_0(t, x) + Σ f_i(t, x_i, u_i)`.
pub fn combined_drift(model: &GridModel, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("state", model.state_dim(), x.len())?;
    check_len("stacked control", model.control_dim(), u.len())?;
    let slice = model.slice(t);
    let mut out = DVector::zeros(x.len());
    slice.drift_into(x.as_slice(), u.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// One entry of a [`ValidationReport`].
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub assumption: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
    #[serde(skip)]
    failures: Vec<Error>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// First failure as an error, if any.
    pub fn into_result(self) -> Result<()> {
        match self.failures.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.assumption, c.detail)?;
        }
        Ok(())
    }
}

/// Checks continuity/positive-definite diffusion (A1), box controls (A2) and
/// strict concavity of stage payoffs in the control (A4) at every grid node
/// and coefficient knot.
pub fn validate_model(model: &GridModel) -> ValidationReport {
    let mut checks = Vec::new();
    let mut failures = Vec::new();
    let times = model.check_times();

    checks.push(AssumptionCheck {
        assumption: "dimensions".into(),
        passed: true,
        detail: model.to_string(),
    });

    // A1
    let mut worst = (f64::INFINITY, model.time_grid.t0);
    for &t in &times {
        let s = model.slice(t);
        let ev = SymmetricEigen::new(s.covariance.clone()).eigenvalues.min();
        if ev < worst.0 {
            worst = (ev, t);
        }
    }
    let a1 = worst.0 > PD_EPS;
    checks.push(AssumptionCheck {
        assumption: "diffusion D(t)D(t)^T positive definite".into(),
        passed: a1,
        detail: if a1 {
            format!("min eigenvalue {:.3e} at t = {}", worst.0, worst.1)
        } else {
            format!("D(t)D(t)^T not positive definite: min eigenvalue {:.3e} at t = {}", worst.0, worst.1)
        },
    });
    if !a1 {
        failures.push(Error::DegenerateDiffusion {
            t: worst.1,
            min_eigenvalue: worst.0,
        });
    }

    // Boxes are ordered by construction, recorded for completeness.
    let widths: Vec<String> = model
        .agents
        .iter()
        .map(|a| format!("{:?}..{:?}", a.control_set.lower(), a.control_set.upper()))
        .collect();
    checks.push(AssumptionCheck {
        assumption: "control sets compact and convex".into(),
        passed: true,
        detail: widths.join(", "),
    });

    // A4
    for (i, agent) in model.agents.iter().enumerate() {
        let r = agent.revenue.control_weight.as_ref().expect("agent revenue has control weight");
        let mut worst = (f64::INFINITY, model.time_grid.t0);
        let mut symmetric = true;
        for &t in &times {
            let m = r.eval(t);
            symmetric &= (&m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
            let ev = SymmetricEigen::new(m).eigenvalues.min();
            if ev < worst.0 {
                worst = (ev, t);
            }
        }
        let ok = worst.0 > PD_EPS && symmetric;
        checks.push(AssumptionCheck {
            assumption: format!("R(t) of agent {i} symmetric positive definite"),
            passed: ok,
            detail: if !symmetric {
                "R(t) not symmetric".to_string()
            } else {
                format!("min eigenvalue {:.3e} at t = {}", worst.0, worst.1)
            },
        });
        if !ok {
            failures.push(Error::IndefiniteControlWeight {
                agent: i,
                t: worst.1,
                min_eigenvalue: worst.0,
            });
        }
    }

    // A3/A4 symmetry of state weights (indefinite is allowed).
    let mut sym_ok = true;
    for &t in &times {
        let s = model.slice(t);
        sym_ok &= is_symmetric(&s.utility_weight) && s.agents.iter().all(|a| is_symmetric(&a.state_weight));
    }
    sym_ok &= is_symmetric(&model.utility.revenue.terminal_weight)
        && model.agents.iter().all(|a| is_symmetric(&a.revenue.terminal_weight));
    checks.push(AssumptionCheck {
        assumption: "quadratic state weights symmetric".into(),
        passed: sym_ok,
        detail: if sym_ok { "ok".into() } else { "a state weight is not symmetric".into() },
    });
    if !sym_ok {
        failures.push(Error::Config("a quadratic state weight is not symmetric".into()));
    }

    ValidationReport { checks, failures }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax())
}

pub(crate) fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for c in 0..n {
        let mut col = 0.0;
        for r in 0..n {
            col += v[r] * m[(r, c)];
        }
        acc += col * v[c];
    }
    acc
}

pub(crate) fn terminal_value(qf: &DMatrix<f64>, lin: &DVector<f64>, x: &[f64]) -> f64 {
    let lin_part: f64 = lin.iter().zip(x).map(|(a, b)| a * b).sum();
    -0.5 * quad_form(qf, x) - lin_part
}

fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::dims(what, expected, found));
    }
    Ok(())
}

fn expect_shape(name: &str, c: &CoefficientTrajectory, shape: (usize, usize)) -> Result<()> {
    if c.shape() != shape {
        return Err(Error::dims(
            name,
            format!("{}x{}", shape.0, shape.1),
            format!("{}x{}", c.shape().0, c.shape().1),
        ));
    }
    Ok(())
}

fn expect_revenue(name: &str, r: &QuadraticRevenue, n: usize, m: Option<usize>) -> Result<()> {
    if r.terminal_weight.shape() != (n, n) {
        return Err(Error::dims(format!("{name} Qf"), format!("{n}x{n}"), format!("{:?}", r.terminal_weight.shape())));
    }
    if r.terminal_linear.len() != n {
        return Err(Error::dims(format!("{name} qf"), n, r.terminal_linear.len()));
    }
    expect_shape(&format!("{name} Q"), &r.state_weight, (n, n))?;
    match (m, &r.control_weight) {
        (Some(m), Some(rw)) => expect_shape(&format!("{name} R"), rw, (m, m)),
        (Some(m), None) => Err(Error::dims(format!("{name} R"), format!("{m}x{m}"), "missing")),
        (None, Some(_)) => Err(Error::dims(format!("{name} R"), "none", "present")),
        (None, None) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{b1, scalar_model};

    #[test]
    fn time_grid_rejects_bad_intervals() {
        assert!(TimeGrid::new(1.0, 0.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 1).is_err());
        let g = TimeGrid::new(0.0, 1.0, 200).unwrap();
        assert_eq!(g.node(200), 1.0);
        let nodes: Vec<f64> = g.nodes().collect();
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(TimeGrid::with_step(0.0, 1.0, 1.0 / 400.0).unwrap().n_steps(), 400);
    }

    #[test]
    fn trajectory_interpolates_linearly() {
        let c = CoefficientTrajectory::sampled(
            "a",
            vec![(0.0, DMatrix::from_element(1, 1, 0.0)), (1.0, DMatrix::from_element(1, 1, 2.0))],
        )
        .unwrap();
        assert_eq!(c.eval(0.25)[(0, 0)], 0.5);
        assert_eq!(c.eval(2.0)[(0, 0)], 2.0);
        assert_eq!(c.lipschitz_bound(), 2.0);
        let bad = CoefficientTrajectory::sampled(
            "a",
            vec![(0.0, DMatrix::zeros(1, 1)), (1.0, DMatrix::zeros(2, 1))],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn scalar_model_passes_validation() {
        let m = scalar_model(1.0, 1.0, 1.0);
        let report = validate_model(&m);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn zero_diffusion_fails_validation() {
        let m = b1().with_diffusion_scaled(0.0);
        let report = validate_model(&m);
        assert!(!report.passed());
        assert!(report.to_string().contains("D(t)D(t)^T not positive definite"));
        assert!(matches!(report.into_result(), Err(Error::DegenerateDiffusion { .. })));
    }

    #[test]
    fn negative_control_weight_fails_naming_node() {
        let mut m = b1();
        let r = CoefficientTrajectory::sampled(
            "R",
            vec![
                (0.0, DMatrix::from_element(1, 1, 1.0)),
                (0.5, DMatrix::from_element(1, 1, -0.1)),
                (1.0, DMatrix::from_element(1, 1, 1.0)),
            ],
        )
        .unwrap();
        m.agents_mut()[1].revenue.control_weight = Some(r);
        match validate_model(&m).into_result() {
            Err(Error::IndefiniteControlWeight { agent, t, min_eigenvalue }) => {
                assert_eq!(agent, 1);
                assert_eq!(t, 0.5);
                assert!((min_eigenvalue + 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn construction_names_offending_block() {
        let m = b1();
        let mut agents = m.agents().to_vec();
        agents[0].input = CoefficientTrajectory::constant(DMatrix::zeros(2, 1));
        let err = GridModel::new(*m.time_grid(), m.utility().clone(), agents).unwrap_err();
        assert!(err.to_string().contains("B (agent 0)"), "{err}");
    }

    #[test]
    fn drift_at_origin_is_zero() {
        let m = b1();
        let f = combined_drift(&m, 0.3, &DVector::zeros(3), &DVector::zeros(2)).unwrap();
        assert_eq!(f, DVector::zeros(3));
    }

    #[test]
    fn stage_payoff_examples() {
        let rev = QuadraticRevenue {
            terminal_weight: DMatrix::from_element(1, 1, 0.0),
            terminal_linear: DVector::zeros(1),
            state_weight: CoefficientTrajectory::scalar(2.0),
            control_weight: Some(CoefficientTrajectory::scalar(1.0)),
        };
        let v = stage_payoff(&rev, 0.0, &DVector::from_element(1, 1.0), &DVector::from_element(1, 2.0)).unwrap();
        assert_eq!(v, -3.0);
        let z = stage_payoff(&rev, 0.0, &DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert_eq!(z, 0.0);
        assert!(stage_payoff(&rev, 0.0, &DVector::zeros(2), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn box_projection() {
        let b = ControlSet::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let mut u = [3.0, -1.0];
        b.project(&mut u);
        assert_eq!(u, [1.0, 0.0]);
        assert!(ControlSet::new(vec![1.0], vec![0.0]).is_err());
    }
}
