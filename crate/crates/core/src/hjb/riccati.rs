//! Backward Riccati integration for `V = -1/2 x'Px - q'x + c`.
//!
//! With `S = B R^{-1} B'` over the controlled agents and `Σ = D D'`:
//!
//! `P' = -PA - A'P + PSP - Q`, `q' = -A'q + PSq`, `c' = 1/2 tr(PΣ) - 1/2 q'Sq`,
//!
//! integrated from the terminal payoff with classical RK4 on the model grid.
//! Dense output is cubic Hermite from node values and node derivatives.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use super::ValueSolution;
use crate::error::{Error, Result};
use crate::market::{ProfitFloor, ShadowPrice};
use crate::model::{GridModel, ModelSlice, TimeGrid};
use crate::response::{best_response_policy, Policy};
use crate::sim::{simulate, NoiseBundle};

/// Norm of `P` above which the integration is declared to have escaped.
pub const BLOW_UP_NORM: f64 = 1e8;
/// Paths of the pilot bundle used by the interior check and domain sizing.
pub const PILOT_PATHS: usize = 256;
pub const PILOT_SEED: u64 = 0x5eed_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    grid: TimeGrid,
    p: Vec<DMatrix<f64>>,
    q: Vec<DVector<f64>>,
    c: Vec<f64>,
    dp: Vec<DMatrix<f64>>,
    dq: Vec<DVector<f64>>,
    dc: Vec<f64>,
}

/// Which revenues enter the objective and which agents control.
struct Objective {
    utility: bool,
    agents: Vec<usize>,
}

struct Coefficients {
    a: DMatrix<f64>,
    s: DMatrix<f64>,
    sigma: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl Coefficients {
    fn new(model: &GridModel, t: f64, obj: &Objective) -> Result<Self> {
        let slice = model.slice(t);
        let n = slice.state_dim();
        let mut s = DMatrix::zeros(n, n);
        let mut q = if obj.utility {
            slice.utility_weight.clone()
        } else {
            DMatrix::zeros(n, n)
        };
        for &i in &obj.agents {
            let a = &slice.agents[i];
            let b = slice.input.columns(a.control_block.start, a.control_dim()).into_owned();
            let r_inv = a
                .control_weight
                .clone()
                .cholesky()
                .ok_or(Error::IndefiniteControlWeight {
                    agent: i,
                    t,
                    min_eigenvalue: f64::NAN,
                })?
                .inverse();
            s += &b * r_inv * b.transpose();
            let blk = a.state_block.clone();
            let mut view = q.view_mut((blk.start, blk.start), (blk.len(), blk.len()));
            view += &a.state_weight;
        }
        let ModelSlice { drift, covariance, .. } = slice;
        Ok(Self {
            a: drift,
            s,
            sigma: covariance,
            q,
        })
    }
}

#[derive(Clone)]
struct State {
    p: DMatrix<f64>,
    q: DVector<f64>,
    c: f64,
}

impl State {
    fn axpy(&self, h: f64, d: &State) -> State {
        State {
            p: &self.p + &d.p * h,
            q: &self.q + &d.q * h,
            c: self.c + h * d.c,
        }
    }
}

fn rhs(k: &Coefficients, y: &State) -> State {
    let pa = &y.p * &k.a;
    let ps = &y.p * &k.s;
    let p = -&pa - pa.transpose() + &ps * &y.p - &k.q;
    let q = -k.a.transpose() * &y.q + &ps * &y.q;
    let c = 0.5 * (&y.p * &k.sigma).trace() - 0.5 * (y.q.transpose() * &k.s * &y.q)[(0, 0)];
    State { p, q, c }
}

fn terminal(model: &GridModel, obj: &Objective) -> State {
    let n = model.state_dim();
    let (mut p, mut q) = if obj.utility {
        let r = &model.utility().revenue;
        (r.terminal_weight.clone(), r.terminal_linear.clone())
    } else {
        (DMatrix::zeros(n, n), DVector::zeros(n))
    };
    let all: Vec<usize> = if obj.utility {
        (0..model.n_agents()).collect()
    } else {
        obj.agents.clone()
    };
    for i in all {
        let blk = model.layout().agent_block(i);
        let r = &model.agent(i).revenue;
        let mut view = p.view_mut((blk.start, blk.start), (blk.len(), blk.len()));
        view += &r.terminal_weight;
        let mut qv = q.rows_mut(blk.start, blk.len());
        qv += &r.terminal_linear;
    }
    State { p, q, c: 0.0 }
}

fn integrate(model: &GridModel, obj: &Objective) -> Result<RiccatiSolution> {
    let grid = *model.time_grid();
    let n_nodes = grid.n_nodes();
    let dt = grid.dt();
    let mut y = terminal(model, obj);
    let mut nodes: Vec<Option<(State, State)>> = vec![None; n_nodes];
    let mut k_right = Coefficients::new(model, grid.tf(), obj)?;
    nodes[n_nodes - 1] = Some((y.clone(), rhs(&k_right, &y)));
    for k in (0..grid.n_steps()).rev() {
        let t_left = grid.node(k);
        let t_right = grid.node(k + 1);
        let k_mid = Coefficients::new(model, 0.5 * (t_left + t_right), obj)?;
        let k_left = Coefficients::new(model, t_left, obj)?;
        let d1 = rhs(&k_right, &y);
        let d2 = rhs(&k_mid, &y.axpy(-0.5 * dt, &d1));
        let d3 = rhs(&k_mid, &y.axpy(-0.5 * dt, &d2));
        let d4 = rhs(&k_left, &y.axpy(-dt, &d3));
        let mut next = State {
            p: &y.p - (&d1.p + &d2.p * 2.0 + &d3.p * 2.0 + &d4.p) * (dt / 6.0),
            q: &y.q - (&d1.q + &d2.q * 2.0 + &d3.q * 2.0 + &d4.q) * (dt / 6.0),
            c: y.c - (d1.c + 2.0 * d2.c + 2.0 * d3.c + d4.c) * (dt / 6.0),
        };
        next.p = (&next.p + next.p.transpose()) * 0.5;
        let norm = next.p.norm();
        if !(norm <= BLOW_UP_NORM) {
            return Err(Error::RiccatiBlowUp { t: t_left, norm });
        }
        let d = rhs(&k_left, &next);
        nodes[k] = Some((next.clone(), d));
        y = next;
        k_right = k_left;
    }
    let mut sol = RiccatiSolution {
        grid,
        p: Vec::with_capacity(n_nodes),
        q: Vec::with_capacity(n_nodes),
        c: Vec::with_capacity(n_nodes),
        dp: Vec::with_capacity(n_nodes),
        dq: Vec::with_capacity(n_nodes),
        dc: Vec::with_capacity(n_nodes),
    };
    for (v, d) in nodes.into_iter().map(|n| n.expect("every node visited")) {
        sol.p.push(v.p);
        sol.q.push(v.q);
        sol.c.push(v.c);
        sol.dp.push(d.p);
        sol.dq.push(d.q);
        sol.dc.push(d.c);
    }
    Ok(sol)
}

/// Principal value (utility plus all agent revenues, all agents controlling)
/// without the interior check.
pub fn solve_riccati_unchecked(model: &GridModel) -> Result<RiccatiSolution> {
    integrate(
        model,
        &Objective {
            utility: true,
            agents: (0..model.n_agents()).collect(),
        },
    )
}

/// Principal value, certified interior on a pilot bundle started at `x0`.
pub fn solve_riccati(model: &GridModel, x0: &DVector<f64>) -> Result<RiccatiSolution> {
    let sol = solve_riccati_unchecked(model)?;
    check_interior(model, &sol, x0, PILOT_PATHS, PILOT_SEED)?;
    Ok(sol)
}

/// Value of agent `agent` alone when it receives no reward and the other
/// agents apply zero control: the agent revenue is the only payoff.
pub fn agent_riccati(model: &GridModel, agent: usize) -> Result<RiccatiSolution> {
    integrate(
        model,
        &Objective {
            utility: false,
            agents: vec![agent],
        },
    )
}

/// Stacked `-R^{-1} B' (P x + q)` for every agent, without projection.
pub fn unconstrained_feedback(model: &GridModel, sol: &RiccatiSolution, t: f64, x: &[f64]) -> DVector<f64> {
    let slice = model.slice(t);
    let (p, q, _) = sol.coefficients(t);
    let costate = -(p * DVector::from_column_slice(x) + q);
    let mut u = DVector::zeros(slice.control_dim());
    for a in &slice.agents {
        let b = slice.input.columns(a.control_block.start, a.control_dim());
        let g = b.transpose() * &costate;
        let ui = a.control_weight.clone().cholesky().expect("validated R").solve(&g);
        u.rows_mut(a.control_block.start, a.control_dim()).copy_from(&ui);
    }
    u
}

/// Fails with the first time at which the unconstrained feedback leaves a box
/// along a pilot bundle driven by the (projected) feedback.
pub fn check_interior(model: &GridModel, sol: &RiccatiSolution, x0: &DVector<f64>, n_paths: usize, seed: u64) -> Result<()> {
    let value = Arc::new(ValueSolution::Riccati(sol.clone()));
    let prices: Arc<dyn crate::market::PriceField> =
        Arc::new(ShadowPrice::new(value, ProfitFloor::zero(model.n_agents())));
    let pols: Vec<_> = (0..model.n_agents())
        .map(|i| best_response_policy(i, Arc::clone(&prices)))
        .collect();
    let refs: Vec<&dyn Policy> = pols.iter().map(|p| p as &dyn Policy).collect();
    let noise = Arc::new(NoiseBundle::generate(seed, n_paths, *model.time_grid(), model.noise_dim()));
    let bundle = simulate(model, &refs, &noise, x0)?;
    let grid = model.time_grid();
    for k in 0..grid.n_nodes() {
        let t = grid.node(k);
        let slice = model.slice(t);
        for p in 0..n_paths {
            let u = unconstrained_feedback(model, sol, t, bundle.state(k, p));
            for a in &slice.agents {
                let ui = &u.as_slice()[a.control_block.clone()];
                if !a.control_set.contains(ui) {
                    return Err(Error::InteriorViolation { agent: a.index, t });
                }
            }
        }
    }
    Ok(())
}

impl RiccatiSolution {
    /// `V ≡ 0`.
    pub fn zero(grid: TimeGrid, n: usize) -> Self {
        let m = grid.n_nodes();
        Self {
            grid,
            p: vec![DMatrix::zeros(n, n); m],
            q: vec![DVector::zeros(n); m],
            c: vec![0.0; m],
            dp: vec![DMatrix::zeros(n, n); m],
            dq: vec![DVector::zeros(n); m],
            dc: vec![0.0; m],
        }
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.q[0].len()
    }

    pub fn node(&self, k: usize) -> (&DMatrix<f64>, &DVector<f64>, f64) {
        (&self.p[k], &self.q[k], self.c[k])
    }

    /// `(P, q, c)` at `t` by cubic Hermite interpolation.
    pub fn coefficients(&self, t: f64) -> (DMatrix<f64>, DVector<f64>, f64) {
        let (k, s) = self.grid.locate(t);
        if s == 0.0 {
            return (self.p[k].clone(), self.q[k].clone(), self.c[k]);
        }
        let h = self.grid.dt();
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = (s3 - 2.0 * s2 + s) * h;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = (s3 - s2) * h;
        (
            &self.p[k] * h00 + &self.dp[k] * h10 + &self.p[k + 1] * h01 + &self.dp[k + 1] * h11,
            &self.q[k] * h00 + &self.dq[k] * h10 + &self.q[k + 1] * h01 + &self.dq[k + 1] * h11,
            self.c[k] * h00 + self.dc[k] * h10 + self.c[k + 1] * h01 + self.dc[k + 1] * h11,
        )
    }

    /// Time derivatives of the Hermite interpolant.
    pub fn derivatives(&self, t: f64) -> (DMatrix<f64>, DVector<f64>, f64) {
        let (k, s) = self.grid.locate(t);
        let h = self.grid.dt();
        let s2 = s * s;
        let d00 = (6.0 * s2 - 6.0 * s) / h;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = (-6.0 * s2 + 6.0 * s) / h;
        let d11 = 3.0 * s2 - 2.0 * s;
        (
            &self.p[k] * d00 + &self.dp[k] * d10 + &self.p[k + 1] * d01 + &self.dp[k + 1] * d11,
            &self.q[k] * d00 + &self.dq[k] * d10 + &self.q[k + 1] * d01 + &self.dq[k + 1] * d11,
            self.c[k] * d00 + self.dc[k] * d10 + self.c[k + 1] * d01 + self.dc[k + 1] * d11,
        )
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let (p, q, c) = self.coefficients(t);
        -0.5 * crate::model::quad_form(&p, x) - q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + c
    }

    /// Largest `|P - P'|` entry over all nodes.
    pub fn max_asymmetry(&self) -> f64 {
        self.p.iter().map(|p| (p - p.transpose()).amax()).fold(0.0, f64::max)
    }

    /// Largest entrywise difference of `(P, q, c)` over the nodes shared with
    /// `finer`, whose grid must refine this one.
    pub fn max_node_difference(&self, finer: &RiccatiSolution) -> f64 {
        let factor = finer.grid.n_steps() / self.grid.n_steps();
        (0..self.grid.n_nodes())
            .map(|k| {
                let j = k * factor;
                (&self.p[k] - &finer.p[j])
                    .amax()
                    .max((&self.q[k] - &finer.q[j]).amax())
                    .max((self.c[k] - finer.c[j]).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Node times with `P`, `q`, `c`.
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<_> = (0..self.grid.n_nodes())
            .map(|k| {
                let p = &self.p[k];
                let rows: Vec<Vec<f64>> = (0..p.nrows()).map(|r| p.row(r).iter().copied().collect()).collect();
                json!({
                    "t": self.grid.node(k),
                    "P": rows,
                    "q": self.q[k].as_slice(),
                    "c": self.c[k],
                })
            })
            .collect();
        json!({ "nodes": nodes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{b1, scalar_model};
    use approx::assert_relative_eq;

    #[test]
    fn zero_data_gives_zero_solution() {
        let m = scalar_model(-1.0, 1.0, 0.2);
        let s = solve_riccati_unchecked(&m).unwrap();
        for k in 0..m.time_grid().n_nodes() {
            let (p, q, c) = s.node(k);
            assert_eq!(p.amax(), 0.0);
            assert_eq!(q.amax(), 0.0);
            assert_eq!(c, 0.0);
        }
    }

    #[test]
    fn terminal_node_is_assembled_payoff() {
        let m = b1();
        let s = solve_riccati_unchecked(&m).unwrap();
        let (p, _, c) = s.node(m.time_grid().n_steps());
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.5]));
        assert_eq!(p, &expect);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn scalar_riccati_matches_closed_form() {
        // dx = u dt, payoff -1/2 x_T^2 - 1/2 ∫u^2: P(t) = 1 / (1 + T - t)
        let mut m = scalar_model(0.0, 1.0, 0.3);
        m.agents_mut()[0].revenue.terminal_weight = DMatrix::from_element(1, 1, 1.0);
        let s = solve_riccati_unchecked(&m).unwrap();
        for &t in &[0.0, 0.25, 0.5, 0.913] {
            let (p, _, c) = s.coefficients(t);
            assert_relative_eq!(p[(1, 1)], 1.0 / (2.0 - t), epsilon = 1e-9);
            // c' = 1/2 P σ^2  →  c(t) = -σ^2/2 ln(1 + T - t)
            assert_relative_eq!(c, -0.045 * (2.0 - t).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn nodes_are_symmetric() {
        let s = solve_riccati_unchecked(&b1()).unwrap();
        assert!(s.max_asymmetry() < 1e-12);
    }

    #[test]
    fn refinement_order() {
        let m = b1();
        let g = *m.time_grid();
        let coarse = solve_riccati_unchecked(&m.with_time_grid(TimeGrid::new(0.0, 1.0, 10).unwrap())).unwrap();
        let mid = solve_riccati_unchecked(&m.with_time_grid(TimeGrid::new(0.0, 1.0, 20).unwrap())).unwrap();
        let fine = solve_riccati_unchecked(&m.with_time_grid(g.refined(4).unwrap())).unwrap();
        let e1 = coarse.max_node_difference(&fine);
        let e2 = mid.max_node_difference(&fine);
        let order = (e1 / e2).log2();
        assert!(order >= 3.5, "observed order {order} ({e1:e}, {e2:e})");
    }

    #[test]
    fn blow_up_is_detected() {
        // an unstable indefinite problem: Q = -50 drives P to finite escape
        let mut m = scalar_model(0.0, 1.0, 0.3);
        m.agents_mut()[0].revenue.state_weight = crate::model::CoefficientTrajectory::scalar(-5e3);
        m = m.with_time_grid(TimeGrid::new(0.0, 1.0, 400).unwrap());
        assert!(matches!(solve_riccati_unchecked(&m), Err(Error::RiccatiBlowUp { .. })));
    }

    #[test]
    fn tight_boxes_fail_the_interior_check() {
        let m = b1().with_boxes(1e-3);
        let x0 = DVector::from_vec(vec![0.5, 0.5, 0.5]);
        assert!(matches!(solve_riccati(&m, &x0), Err(Error::InteriorViolation { .. })));
        assert!(solve_riccati(&b1(), &x0).is_ok());
    }
}
