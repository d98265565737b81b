use gridmarket::instances::b1;
use gridmarket::model::{combined_drift, CoefficientTrajectory, GridModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// B1 with time-varying coefficients so the properties see interpolation.
fn varying() -> GridModel {
    let m = b1();
    let mut agents = m.agents().to_vec();
    for (i, a) in agents.iter_mut().enumerate() {
        let s = 1.0 + 0.5 * i as f64;
        a.drift = CoefficientTrajectory::sampled(
            "A",
            vec![(0.0, DMatrix::from_element(1, 1, -s)), (0.4, DMatrix::from_element(1, 1, -2.0 * s)), (1.0, DMatrix::from_element(1, 1, 0.3))],
        )
        .unwrap();
        a.input = CoefficientTrajectory::sampled(
            "B",
            vec![(0.0, DMatrix::from_element(1, 1, 1.0)), (1.0, DMatrix::from_element(1, 1, 2.0 + s))],
        )
        .unwrap();
    }
    GridModel::new(*m.time_grid(), m.utility().clone(), agents).unwrap()
}

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0..3.0f64, 3)
}

fn vec2() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0..2.0f64, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn utility_block_ignores_controls_and_agent_blocks_are_local(
        t in 0.0..1.0f64, x in vec3(), u in vec2(), du in vec2(), dx in -1.0..1.0f64,
    ) {
        let m = varying();
        let xv = DVector::from_vec(x.clone());
        let base = combined_drift(&m, t, &xv, &DVector::from_vec(u.clone())).unwrap();
        let u2: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + b).collect();
        let moved = combined_drift(&m, t, &xv, &DVector::from_vec(u2)).unwrap();
        prop_assert_eq!(base[0], moved[0]);

        // agent 0's block does not see agent 1's control or state
        let mut u3 = u.clone();
        u3[1] += du[1];
        let mut x3 = x.clone();
        x3[2] += dx;
        let other = combined_drift(&m, t, &DVector::from_vec(x3), &DVector::from_vec(u3)).unwrap();
        prop_assert_eq!(base[1], other[1]);
    }

    #[test]
    fn trajectories_are_lipschitz(t in 0.0..1.0f64, dt in 0.0..0.2f64) {
        let m = varying();
        for a in m.agents() {
            for c in [&a.drift, &a.input] {
                let l = c.lipschitz_bound();
                let s = (t + dt).min(1.0);
                let gap = (c.eval(s) - c.eval(t)).amax();
                prop_assert!(gap <= l * (s - t) + 1e-12, "{gap} > {l} * {}", s - t);
            }
        }
    }

    #[test]
    fn stage_payoff_is_strictly_midpoint_concave_in_control(
        t in 0.0..1.0f64, x in -2.0..2.0f64, ua in -2.0..2.0f64, ub in -2.0..2.0f64,
    ) {
        prop_assume!((ua - ub).abs() > 1e-6);
        let m = varying();
        let rev = &m.agent(0).revenue;
        let xv = DVector::from_element(1, x);
        let p = |u: f64| rev.stage_payoff(t, &xv, &DVector::from_element(1, u)).unwrap();
        prop_assert!(p(0.5 * (ua + ub)) > 0.5 * (p(ua) + p(ub)));
    }
}
