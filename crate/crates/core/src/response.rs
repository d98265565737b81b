//! Agent best response: the unique maximizer of `p·f_i(t, x_i, u_i) + l_i(t, x_i, u_i)`
//! over the agent's box, and the state-feedback policies built from it.

use std::cell::RefCell;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::market::PriceField;
use crate::model::{AgentSlice, GridModel, ModelSlice, StateLayout};

/// KKT tolerance of the projected-gradient fallback.
pub const KKT_TOL: f64 = 1e-10;
/// Iteration cap of the projected-gradient fallback.
pub const MAX_ITER: usize = 10_000;

/// Costate (price) row over the combined state.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateRow {
    p: DVector<f64>,
    layout: StateLayout,
}

impl CostateRow {
    pub fn new(p: DVector<f64>, layout: &StateLayout) -> Result<Self> {
        if p.len() != layout.state_dim() {
            return Err(Error::dims("costate row", layout.state_dim(), p.len()));
        }
        Ok(Self {
            p,
            layout: layout.clone(),
        })
    }

    pub fn zeros(layout: &StateLayout) -> Self {
        Self {
            p: DVector::zeros(layout.state_dim()),
            layout: layout.clone(),
        }
    }

    /// Sub-row aligned with agent `i`'s state block.
    pub fn block(&self, i: usize) -> &[f64] {
        &self.p.as_slice()[self.layout.agent_block(i)]
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.p
    }

    pub fn as_slice(&self) -> &[f64] {
        self.p.as_slice()
    }
}

/// Best response of agent `agent` at `(t, x_i)` to the price row `p`.
///
/// For the quadratic family the response does not depend on `x_i`; the
/// argument is kept so the call matches the general form.
pub fn best_response(
    model: &GridModel,
    agent: usize,
    t: f64,
    x_i: &DVector<f64>,
    p: &CostateRow,
) -> Result<DVector<f64>> {
    let slice = model.slice(t);
    let a = &slice.agents[agent];
    if x_i.len() != a.state_dim() {
        return Err(Error::dims(format!("state of agent {agent}"), a.state_dim(), x_i.len()));
    }
    let mut u = DVector::zeros(a.control_dim());
    respond(a, p.block(agent), u.as_mut_slice())?;
    Ok(u)
}

/// Best response computed by projected-gradient ascent from `init`, whatever
/// the structure of `R`. Used to check uniqueness of the maximizer.
pub fn best_response_from(
    model: &GridModel,
    agent: usize,
    t: f64,
    p: &CostateRow,
    init: &DVector<f64>,
) -> Result<DVector<f64>> {
    let slice = model.slice(t);
    let a = &slice.agents[agent];
    let g = priced_input(a, p.block(agent));
    let mut u = init.as_slice().to_vec();
    a.control_set.project(&mut u);
    projected_gradient(a, &g, &mut u)?;
    Ok(DVector::from_vec(u))
}

/// Objective maximized by the best response, `p·f_i + l_i`.
pub fn response_objective(model: &GridModel, agent: usize, t: f64, x_i: &DVector<f64>, p: &CostateRow, u: &DVector<f64>) -> f64 {
    let slice = model.slice(t);
    let a = &slice.agents[agent];
    let pb = p.block(agent);
    let mut drift = 0.0;
    for r in 0..a.state_dim() {
        let mut fr = 0.0;
        for c in 0..a.state_dim() {
            fr += a.drift[(r, c)] * x_i[c];
        }
        for c in 0..a.control_dim() {
            fr += a.input[(r, c)] * u[c];
        }
        drift += pb[r] * fr;
    }
    drift + a.stage_payoff(x_i.as_slice(), u.as_slice())
}

/// `B_i^T p_blk^T`.
fn priced_input(a: &AgentSlice, p_blk: &[f64]) -> Vec<f64> {
    (0..a.control_dim())
        .map(|j| (0..a.state_dim()).map(|r| a.input[(r, j)] * p_blk[r]).sum())
        .collect()
}

/// Writes the best response for the agent slice into `out`.
pub(crate) fn respond(a: &AgentSlice, p_blk: &[f64], out: &mut [f64]) -> Result<()> {
    let m = a.control_dim();
    if let Some(diag) = &a.diagonal_weight {
        for j in 0..m {
            let mut g = 0.0;
            for r in 0..a.state_dim() {
                g += a.input[(r, j)] * p_blk[r];
            }
            out[j] = (g / diag[j]).clamp(a.control_set.lower()[j], a.control_set.upper()[j]);
        }
        return Ok(());
    }
    let g = priced_input(a, p_blk);
    let chol = a
        .control_weight
        .clone()
        .cholesky()
        .ok_or(Error::IndefiniteControlWeight {
            agent: a.index,
            t: f64::NAN,
            min_eigenvalue: f64::NAN,
        })?;
    let unconstrained = chol.solve(&DVector::from_column_slice(&g));
    out.copy_from_slice(unconstrained.as_slice());
    if a.control_set.contains(out) {
        return Ok(());
    }
    a.control_set.project(out);
    projected_gradient(a, &g, out)
}

fn projected_gradient(a: &AgentSlice, g: &[f64], u: &mut [f64]) -> Result<()> {
    let r: &DMatrix<f64> = &a.control_weight;
    let m = u.len();
    let step = 1.0 / a.weight_lambda_max;
    let mut trial = vec![0.0; m];
    for _ in 0..MAX_ITER {
        // one ascent step and the KKT residual at the current point
        let mut kkt = 0.0_f64;
        for j in 0..m {
            let grad = g[j] - (0..m).map(|c| r[(j, c)] * u[c]).sum::<f64>();
            let full = (u[j] + grad).clamp(a.control_set.lower()[j], a.control_set.upper()[j]);
            kkt = kkt.max((full - u[j]).abs());
            trial[j] = u[j] + step * grad;
        }
        if kkt <= KKT_TOL {
            return Ok(());
        }
        a.control_set.project(&mut trial);
        u.copy_from_slice(&trial);
    }
    let residual = (0..m)
        .map(|j| {
            let grad = g[j] - (0..m).map(|c| r[(j, c)] * u[c]).sum::<f64>();
            ((u[j] + grad).clamp(a.control_set.lower()[j], a.control_set.upper()[j]) - u[j]).abs()
        })
        .fold(0.0, f64::max);
    Err(Error::BestResponseNotConverged {
        agent: a.index,
        iterations: MAX_ITER,
        residual,
    })
}

/// A state-feedback control law for one agent.
pub trait Policy: Send + Sync {
    fn agent(&self) -> usize;

    fn label(&self) -> String;

    /// The policy with its time dependence resolved at `slice.t`.
    fn at<'a>(&'a self, slice: &'a ModelSlice) -> Box<dyn PolicyAt + 'a>;

    fn control(&self, model: &GridModel, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let slice = model.slice(t);
        let mut u = DVector::zeros(slice.agents[self.agent()].control_dim());
        self.at(&slice).control_into(x.as_slice(), u.as_mut_slice())?;
        Ok(u)
    }
}

/// A policy frozen at one time.
pub trait PolicyAt {
    /// Writes the agent's control at combined state `x` into `u`.
    fn control_into(&self, x: &[f64], u: &mut [f64]) -> Result<()>;
}

/// `u_i(t, x) = μ_i(t, x_i, h_i1(t, x))`.
#[derive(Clone)]
pub struct NashPolicy {
    agent: usize,
    prices: Arc<dyn PriceField>,
}

/// Nash policy of agent `agent` for the price field `prices`.
pub fn best_response_policy(agent: usize, prices: Arc<dyn PriceField>) -> NashPolicy {
    NashPolicy { agent, prices }
}

impl NashPolicy {
    pub fn prices(&self) -> &Arc<dyn PriceField> {
        &self.prices
    }
}

impl Policy for NashPolicy {
    fn agent(&self) -> usize {
        self.agent
    }

    fn label(&self) -> String {
        format!("nash[{}]", self.agent)
    }

    fn at<'a>(&'a self, slice: &'a ModelSlice) -> Box<dyn PolicyAt + 'a> {
        Box::new(NashAt {
            agent: &slice.agents[self.agent],
            price: self.prices.at(slice.t),
            row: RefCell::new(vec![0.0; slice.state_dim()]),
        })
    }
}

struct NashAt<'a> {
    agent: &'a AgentSlice,
    price: Box<dyn crate::market::PriceAt + 'a>,
    row: RefCell<Vec<f64>>,
}

impl PolicyAt for NashAt<'_> {
    fn control_into(&self, x: &[f64], u: &mut [f64]) -> Result<()> {
        let mut row = self.row.borrow_mut();
        self.price.row_into(self.agent.index, x, &mut row);
        respond(self.agent, &row[self.agent.state_block.clone()], u)
    }
}

type FeedbackFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Policy given by a closure `(t, x, u_out)`.
#[derive(Clone)]
pub struct FnPolicy {
    agent: usize,
    label: String,
    f: Arc<FeedbackFn>,
}

impl FnPolicy {
    pub fn new(agent: usize, label: impl Into<String>, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            agent,
            label: label.into(),
            f: Arc::new(f),
        }
    }

    /// The zero control.
    pub fn zero(agent: usize) -> Self {
        Self::new(agent, format!("zero[{agent}]"), |_, _, u| u.iter_mut().for_each(|v| *v = 0.0))
    }
}

impl Policy for FnPolicy {
    fn agent(&self) -> usize {
        self.agent
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn at<'a>(&'a self, slice: &'a ModelSlice) -> Box<dyn PolicyAt + 'a> {
        Box::new(FnAt { t: slice.t, f: &*self.f })
    }
}

struct FnAt<'a> {
    t: f64,
    f: &'a FeedbackFn,
}

impl PolicyAt for FnAt<'_> {
    fn control_into(&self, x: &[f64], u: &mut [f64]) -> Result<()> {
        (self.f)(self.t, x, u);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::b1;
    use crate::model::{AgentSpec, CoefficientTrajectory, ControlSet, QuadraticRevenue, UtilitySpec, TimeGrid};
    use proptest::prelude::*;

    fn two_control_model() -> GridModel {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let agent = AgentSpec {
            drift: CoefficientTrajectory::constant(DMatrix::zeros(2, 2)),
            input: CoefficientTrajectory::constant(DMatrix::identity(2, 2)),
            diffusion: CoefficientTrajectory::constant(DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0])),
            revenue: QuadraticRevenue {
                control_weight: Some(CoefficientTrajectory::constant(r)),
                ..QuadraticRevenue::zero(2, None)
            },
            control_set: ControlSet::symmetric(2, 1.0),
        };
        let utility = UtilitySpec {
            drift: CoefficientTrajectory::scalar(0.0),
            couplings: vec![CoefficientTrajectory::constant(DMatrix::zeros(1, 2))],
            diffusion: CoefficientTrajectory::constant(DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])),
            revenue: QuadraticRevenue::zero(3, None),
        };
        GridModel::new(grid, utility, vec![agent]).unwrap()
    }

    fn row(model: &GridModel, vals: &[f64]) -> CostateRow {
        CostateRow::new(DVector::from_column_slice(vals), model.layout()).unwrap()
    }

    #[test]
    fn interior_and_clamped_scalar_cases() {
        let m = crate::instances::scalar_model(0.0, 1.0, 1.0);
        let x = DVector::zeros(1);
        let u = best_response(&m, 0, 0.0, &x, &row(&m, &[0.0, 0.5])).unwrap();
        assert_eq!(u[0], 0.5);
        let u = best_response(&m, 0, 0.0, &x, &row(&m, &[0.0, 3.0])).unwrap();
        assert_eq!(u[0], 1.0);
    }

    #[test]
    fn general_weight_matches_grid_search() {
        let m = two_control_model();
        let p = row(&m, &[0.0, 3.0, -2.0]);
        let x = DVector::zeros(2);
        let u = best_response(&m, 0, 0.0, &x, &p).unwrap();
        // exhaustive search over the box at resolution 1e-3
        let n = 2001;
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for a in 0..n {
            let u0 = -1.0 + 2.0 * a as f64 / (n - 1) as f64;
            for b in 0..n {
                let u1 = -1.0 + 2.0 * b as f64 / (n - 1) as f64;
                let v = 3.0 * u0 - 2.0 * u1 - 0.5 * (2.0 * u0 * u0 + u0 * u1 + u1 * u1);
                if v > best.0 {
                    best = (v, u0, u1);
                }
            }
        }
        assert!((u[0] - best.1).abs() < 2e-3, "{} vs {}", u[0], best.1);
        assert!((u[1] - best.2).abs() < 2e-3, "{} vs {}", u[1], best.2);
    }

    #[test]
    fn fallback_is_unique_across_initializations() {
        let m = two_control_model();
        let p = row(&m, &[0.0, 3.0, -2.0]);
        let a = best_response_from(&m, 0, 0.0, &p, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        let b = best_response_from(&m, 0, 0.0, &p, &DVector::from_vec(vec![-1.0, -1.0])).unwrap();
        assert!((a - b).amax() < 1e-8);
    }

    #[test]
    fn zero_price_gives_zero_policy() {
        let m = b1();
        let h: Arc<dyn PriceField> = Arc::new(crate::market::FnPriceField::zero(m.state_dim(), m.n_agents()));
        let pol = best_response_policy(0, h);
        for t in [0.0, 0.3, 1.0] {
            let u = pol.control(&m, t, &DVector::from_vec(vec![0.4, -1.0, 2.0])).unwrap();
            assert_eq!(u[0], 0.0);
        }
    }

    proptest! {
        #[test]
        fn optimality_certificate(p0 in -5.0..5.0f64, p1 in -5.0..5.0f64, p2 in -5.0..5.0f64, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let m = two_control_model();
            let p = row(&m, &[0.0, p1, p2]);
            let x = DVector::from_vec(vec![p0, -p0]);
            let u = best_response(&m, 0, 0.0, &x, &p).unwrap();
            let best = response_objective(&m, 0, 0.0, &x, &p, &u);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let v = DVector::from_vec(vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]);
                prop_assert!(best >= response_objective(&m, 0, 0.0, &x, &p, &v) - 1e-9);
            }
        }

        #[test]
        fn block_locality(p0 in -5.0..5.0f64, p1 in -5.0..5.0f64, p2 in -5.0..5.0f64, q in -5.0..5.0f64) {
            let m = b1();
            let x = DVector::zeros(1);
            let a = best_response(&m, 0, 0.2, &x, &row(&m, &[p0, p1, p2])).unwrap();
            let b = best_response(&m, 0, 0.2, &x, &row(&m, &[q, p1, -q])).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn nonexpansive_in_price(a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64, d in -5.0..5.0f64) {
            let m = two_control_model();
            let x = DVector::zeros(2);
            let ua = best_response(&m, 0, 0.0, &x, &row(&m, &[0.0, a, b])).unwrap();
            let ub = best_response(&m, 0, 0.0, &x, &row(&m, &[0.0, c, d])).unwrap();
            // |R^{-1}B^T| for this R is 1/λ_min(R)
            let lmin = (3.0 - (1.0f64 + 1.0).sqrt()) / 2.0;
            let dp = ((a - c).powi(2) + (b - d).powi(2)).sqrt();
            prop_assert!((ua - ub).norm() <= dp / lmin + 1e-9);
        }
    }
}
