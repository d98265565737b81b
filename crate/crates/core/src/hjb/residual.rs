//! Pointwise HJB residuals of candidate value functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ValueSolution;
use crate::error::Result;
use crate::market::RewardParameterW;
use crate::model::GridModel;
use crate::response::respond;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualStats {
    pub max_abs: f64,
    pub mean_abs: f64,
    pub n: usize,
}

impl ResidualStats {
    fn from_values(r: &[f64]) -> Self {
        Self {
            max_abs: r.iter().fold(0.0, |m, v| m.max(v.abs())),
            mean_abs: r.iter().map(|v| v.abs()).sum::<f64>() / r.len().max(1) as f64,
            n: r.len(),
        }
    }
}

/// `n` points with `t` uniform on the horizon and each coordinate uniform in
/// `[-radius, radius]`.
pub fn random_samples(model: &GridModel, n: usize, radius: f64, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = model.time_grid();
    (0..n)
        .map(|_| {
            let t = rng.gen_range(g.t0()..=g.tf());
            let x = (0..model.state_dim()).map(|_| rng.gen_range(-radius..=radius)).collect();
            (t, x)
        })
        .collect()
}

fn diffusion_term(v: &ValueSolution, model: &GridModel, t: f64, x: &[f64]) -> f64 {
    let slice = model.slice(t);
    let h = v.hessian(t, x);
    0.5 * (h * &slice.covariance).trace()
}

/// Residual of the principal equation
/// `V_t + 1/2 tr(∇²V Σ) + ∇V·f(x, μ(∇V)) + l0(x) + Σ l_i(x_i, μ_i) = 0`.
pub fn principal_hjb_residual(model: &GridModel, v: &ValueSolution, samples: &[(f64, Vec<f64>)]) -> Result<ResidualStats> {
    let n = model.state_dim();
    let mut out = Vec::with_capacity(samples.len());
    let mut u = vec![0.0; model.control_dim()];
    let mut f = vec![0.0; n];
    for (t, x) in samples {
        let slice = model.slice(*t);
        let g = v.gradient(*t, x);
        for a in &slice.agents {
            respond(a, &g.as_slice()[a.state_block.clone()], &mut u[a.control_block.clone()])?;
        }
        slice.drift_into(x, &u, &mut f);
        let mut ham: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
        ham += slice.utility_stage_payoff(x);
        for a in &slice.agents {
            ham += a.stage_payoff(&x[a.state_block.clone()], &u[a.control_block.clone()]);
        }
        out.push(v.time_derivative(*t, x) + diffusion_term(v, model, *t, x) + ham);
    }
    Ok(ResidualStats::from_values(&out))
}

/// Residual of agent `agent`'s equation under the reward parameter `w`:
///
/// `V_t + 1/2 tr(∇²V Σ) + (∇V + w_i2)·f(μ_i(∇V + w_i2), μ_j(w_j2)) + l_i(μ_i) + w_i1 = 0`,
///
/// where every other agent `j` plays its best response to its own `w_j2`.
pub fn agent_hjb_residual(
    model: &GridModel,
    agent: usize,
    w: &RewardParameterW,
    v: &ValueSolution,
    samples: &[(f64, Vec<f64>)],
) -> Result<ResidualStats> {
    let n = model.state_dim();
    let mut out = Vec::with_capacity(samples.len());
    let mut u = vec![0.0; model.control_dim()];
    let mut f = vec![0.0; n];
    let mut row = vec![0.0; n];
    for (t, x) in samples {
        let slice = model.slice(*t);
        let g = v.gradient(*t, x);
        let mut own = vec![0.0; n];
        for a in &slice.agents {
            (w.agents[a.index].row)(*t, x, &mut row);
            if a.index == agent {
                for c in 0..n {
                    own[c] = g[c] + row[c];
                }
                respond(a, &own[a.state_block.clone()], &mut u[a.control_block.clone()])?;
            } else {
                respond(a, &row[a.state_block.clone()], &mut u[a.control_block.clone()])?;
            }
        }
        slice.drift_into(x, &u, &mut f);
        let a = &slice.agents[agent];
        let ham: f64 = own.iter().zip(&f).map(|(p, d)| p * d).sum::<f64>()
            + a.stage_payoff(&x[a.state_block.clone()], &u[a.control_block.clone()])
            + (w.agents[agent].running)(*t, x);
        out.push(v.time_derivative(*t, x) + diffusion_term(v, model, *t, x) + ham);
    }
    Ok(ResidualStats::from_values(&out))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::hjb::{agent_riccati, solve_riccati_unchecked, RiccatiSolution};
    use crate::instances::b1;
    use crate::market::{build_wbar, FnPriceField, PriceField};

    #[test]
    fn riccati_value_solves_principal_equation() {
        let m = b1().with_boxes(10.0);
        let v = ValueSolution::Riccati(solve_riccati_unchecked(&m).unwrap());
        let r = principal_hjb_residual(&m, &v, &random_samples(&m, 200, 2.0, 3)).unwrap();
        assert!(r.max_abs < 1e-6, "{r:?}");
    }

    #[test]
    fn zero_value_is_exact_under_wbar() {
        let m = Arc::new(b1());
        let h: Arc<dyn PriceField> = Arc::new(FnPriceField::new(
            3,
            2,
            |_, _, _| 0.0,
            |i, t, x, out| {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = (1.0 + i as f64) * x[c] - t;
                }
            },
        ));
        let w = build_wbar(h, Arc::clone(&m));
        let zero = ValueSolution::Riccati(RiccatiSolution::zero(*m.time_grid(), 3));
        let samples = random_samples(&m, 100, 2.0, 5);
        for i in 0..2 {
            assert!(agent_hjb_residual(&m, i, &w, &zero, &samples).unwrap().max_abs < 1e-8);
            let shifted = w.with_running_shift(i, 0.1);
            let r = agent_hjb_residual(&m, i, &shifted, &zero, &samples).unwrap();
            let min = samples
                .iter()
                .map(|s| agent_hjb_residual(&m, i, &shifted, &zero, std::slice::from_ref(s)).unwrap().max_abs)
                .fold(f64::INFINITY, f64::min);
            assert!(min >= 0.1 - 1e-8 && r.max_abs < 0.1 + 1e-8);
        }
    }

    #[test]
    fn agent_riccati_solves_zero_reward_equation() {
        let m = Arc::new(b1().with_boxes(10.0));
        let zero_w = build_wbar(Arc::new(FnPriceField::zero(3, 2)), Arc::clone(&m));
        // w ≡ 0 rather than w̄(0): strip the terminal, running and level terms
        let mut w = zero_w.clone();
        for a in &mut w.agents {
            a.running = Arc::new(|_, _| 0.0);
        }
        let samples = random_samples(&m, 200, 2.0, 9);
        for i in 0..2 {
            let v = ValueSolution::Riccati(agent_riccati(&m, i).unwrap());
            let r = agent_hjb_residual(&m, i, &w, &v, &samples).unwrap();
            assert!(r.max_abs < 1e-6, "{r:?}");
        }
    }
}
