//! Built-in model instances.

use nalgebra::{DMatrix, DVector};

use crate::model::{
    AgentSpec, CoefficientTrajectory, ControlSet, GridModel, QuadraticRevenue, TimeGrid, UtilitySpec,
};

fn scalar(v: f64) -> CoefficientTrajectory {
    CoefficientTrajectory::scalar(v)
}

fn row(vals: &[f64]) -> CoefficientTrajectory {
    CoefficientTrajectory::constant(DMatrix::from_row_slice(1, vals.len(), vals))
}

/// Desk-scale instance B1: one utility state and two scalar agents on `[0, 1]`
/// with 200 steps. Coefficients are illustrative.
///
/// `A00 = -0.2`, `A01 = A02 = 1`, `A_i = -1`, `B_i = 1`,
/// `D = diag(0.1, 0.05, 0.05)`, `Q0 = 1` on the utility state, `Q_i = 0.5`,
/// `R_i = 1`, boxes `[-2, 2]`. Terminal weights equal the running weights.
pub fn b1() -> GridModel {
    let grid = TimeGrid::new(0.0, 1.0, 200).expect("valid grid");
    let mut q0 = DMatrix::zeros(3, 3);
    q0[(0, 0)] = 1.0;
    let utility = UtilitySpec {
        drift: scalar(-0.2),
        couplings: vec![scalar(1.0), scalar(1.0)],
        diffusion: row(&[0.1, 0.0, 0.0]),
        revenue: QuadraticRevenue {
            terminal_weight: q0.clone(),
            terminal_linear: DVector::zeros(3),
            state_weight: CoefficientTrajectory::constant(q0),
            control_weight: None,
        },
    };
    let agent = |k: usize| {
        let mut d = [0.0; 3];
        d[k] = 0.05;
        AgentSpec {
            drift: scalar(-1.0),
            input: scalar(1.0),
            diffusion: row(&d),
            revenue: QuadraticRevenue {
                terminal_weight: DMatrix::from_element(1, 1, 0.5),
                terminal_linear: DVector::zeros(1),
                state_weight: scalar(0.5),
                control_weight: Some(scalar(1.0)),
            },
            control_set: ControlSet::symmetric(1, 2.0),
        }
    };
    GridModel::new(grid, utility, vec![agent(1), agent(2)]).expect("B1 is dimensionally consistent")
}

/// One-dimensional utility with a single scalar agent: `A00 = 0`, `A01 = 0`,
/// agent drift `a`, input `b`, diffusion `d` on both states, `R = 1`,
/// `Q = 0`, box `[-1, 1]`.
pub fn scalar_model(a: f64, b: f64, d: f64) -> GridModel {
    let grid = TimeGrid::new(0.0, 1.0, 100).expect("valid grid");
    let utility = UtilitySpec {
        drift: scalar(0.0),
        couplings: vec![scalar(0.0)],
        diffusion: row(&[d, 0.0]),
        revenue: QuadraticRevenue::zero(2, None),
    };
    let agent = AgentSpec {
        drift: scalar(a),
        input: scalar(b),
        diffusion: row(&[0.0, d]),
        revenue: QuadraticRevenue {
            control_weight: Some(scalar(1.0)),
            ..QuadraticRevenue::zero(1, None)
        },
        control_set: ControlSet::symmetric(1, 1.0),
    };
    GridModel::new(grid, utility, vec![agent]).expect("scalar model is consistent")
}
