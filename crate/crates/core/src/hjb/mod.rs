//! Value functions of the principal and agent problems: Riccati integration
//! for the interior linear-quadratic case, an explicit upwind grid scheme for
//! low-dimensional constrained problems, and HJB residual checks.

mod grid;
mod residual;
mod riccati;

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub use grid::{sweep_terms, solve_hjb_grid, GridSpec, GridValueFunction, SweepTerms, SpatialDomain, CFL_SAFETY, MAX_SUBSTEPS};
pub use residual::{agent_hjb_residual, principal_hjb_residual, random_samples, ResidualStats};
pub use riccati::{
    agent_riccati, check_interior, solve_riccati, solve_riccati_unchecked, unconstrained_feedback, RiccatiSolution,
    BLOW_UP_NORM, PILOT_PATHS, PILOT_SEED,
};

use crate::error::{Error, Result};
use crate::market::{ProfitFloor, ShadowPrice};
use crate::model::{validate_model, GridModel, TimeGrid};

/// A solved value function `V(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueSolution {
    Riccati(RiccatiSolution),
    Grid(GridValueFunction),
}

impl ValueSolution {
    pub fn backend(&self) -> &'static str {
        match self {
            ValueSolution::Riccati(_) => "riccati",
            ValueSolution::Grid(_) => "grid",
        }
    }

    pub fn time_grid(&self) -> &TimeGrid {
        match self {
            ValueSolution::Riccati(r) => r.time_grid(),
            ValueSolution::Grid(g) => g.time_grid(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ValueSolution::Riccati(r) => r.state_dim(),
            ValueSolution::Grid(g) => g.state_dim(),
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.at(t).value(x)
    }

    pub fn gradient(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        self.at(t).gradient_into(x, g.as_mut_slice());
        g
    }

    pub fn hessian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        match self {
            ValueSolution::Riccati(r) => -r.coefficients(t).0,
            ValueSolution::Grid(g) => g.hessian(t, x),
        }
    }

    pub fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ValueSolution::Riccati(r) => {
                let (dp, dq, dc) = r.derivatives(t);
                -0.5 * crate::model::quad_form(&dp, x) - dq.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + dc
            }
            ValueSolution::Grid(g) => g.time_derivative(t, x),
        }
    }

    /// The value function frozen at `t`.
    pub fn at(&self, t: f64) -> ValueAt<'_> {
        match self {
            ValueSolution::Riccati(r) => {
                let (p, q, c) = r.coefficients(t);
                ValueAt::Quadratic { p, q, c }
            }
            ValueSolution::Grid(g) => {
                let (k, w) = g.time_grid().locate(t);
                ValueAt::Grid { grid: g, k, w }
            }
        }
    }

    /// Writes `t, x.., V, dV/dx..` rows for every lattice point.
    pub fn write_csv(&self, out: &mut impl Write, points: &[(f64, Vec<f64>)]) -> std::io::Result<()> {
        let n = self.state_dim();
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|c| format!("x{c}")));
        header.push("V".into());
        header.extend((0..n).map(|c| format!("dV/dx{c}")));
        writeln!(out, "{}", header.join(","))?;
        for (t, x) in points {
            let at = self.at(*t);
            let mut g = vec![0.0; n];
            at.gradient_into(x, &mut g);
            let mut fields = vec![fmt_num(*t)];
            fields.extend(x.iter().map(|v| fmt_num(*v)));
            fields.push(fmt_num(at.value(x)));
            fields.extend(g.iter().map(|v| fmt_num(*v)));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:.17e}")
}

/// [`ValueSolution`] at a fixed time.
pub enum ValueAt<'a> {
    Quadratic {
        p: DMatrix<f64>,
        q: DVector<f64>,
        c: f64,
    },
    Grid {
        grid: &'a GridValueFunction,
        k: usize,
        w: f64,
    },
}

impl ValueAt<'_> {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            ValueAt::Quadratic { p, q, c } => {
                -0.5 * crate::model::quad_form(p, x) - q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + c
            }
            ValueAt::Grid { grid, k, w } => {
                (1.0 - w) * grid.slice_value(*k, x) + w * grid.slice_value(*k + 1, x)
            }
        }
    }

    /// `∇V = -(P x + q)` or the gradient of the interpolant.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ValueAt::Quadratic { p, q, .. } => {
                let n = x.len();
                for r in 0..n {
                    let mut acc = q[r];
                    for c in 0..n {
                        acc += p[(r, c)] * x[c];
                    }
                    out[r] = -acc;
                }
            }
            ValueAt::Grid { grid, k, w } => {
                let n = x.len();
                let mut a = [0.0; 3];
                let mut b = [0.0; 3];
                grid.slice_gradient(*k, x, &mut a[..n]);
                grid.slice_gradient(*k + 1, x, &mut b[..n]);
                for c in 0..n {
                    out[c] = (1.0 - w) * a[c] + w * b[c];
                }
            }
        }
    }
}

/// Price field `h_i1 = ∇V`, `h_i0 = k_i`.
pub fn shadow_price(value: Arc<ValueSolution>, floors: ProfitFloor) -> ShadowPrice {
    ShadowPrice::new(value, floors)
}

/// Solver choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Auto,
    Riccati,
    Grid,
}

/// Grid resolution used when the grid backend is selected without a spec.
pub const DEFAULT_GRID_POINTS: usize = 33;

/// Solves the principal problem. `Auto` uses Riccati when its feedback stays
/// inside every box on the pilot bundle and falls back to the grid otherwise.
pub fn solve_principal(model: &GridModel, x0: &DVector<f64>, backend: Backend) -> Result<ValueSolution> {
    validate_model(model).into_result()?;
    let grid_solve = || -> Result<ValueSolution> {
        let domain = SpatialDomain::from_pilot(model, x0, PILOT_PATHS, PILOT_SEED, 5.0)?;
        let spec = GridSpec::uniform(domain, DEFAULT_GRID_POINTS);
        Ok(ValueSolution::Grid(solve_hjb_grid(model, &spec)?))
    };
    match backend {
        Backend::Riccati => Ok(ValueSolution::Riccati(solve_riccati(model, x0)?)),
        Backend::Grid => grid_solve(),
        Backend::Auto => match solve_riccati(model, x0) {
            Ok(r) => Ok(ValueSolution::Riccati(r)),
            Err(Error::InteriorViolation { agent, t }) if model.state_dim() <= 3 => {
                log::info!("Riccati feedback of agent {agent} leaves its box at t = {t}; using the grid solver");
                grid_solve()
            }
            Err(e) => Err(e),
        },
    }
}
