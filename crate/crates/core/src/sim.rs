//! Euler–Maruyama simulation of the closed-loop grid SDE with pre-generated
//! noise, Monte Carlo estimators and the common-random-number deviation
//! harness.
//!
//! Arrays are stored node-major: entry `(k, p, c)` of a bundle lives at
//! `(k * n_paths + p) * dim + c`. Reductions over paths always run in path
//! order.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::market::{settle, PriceField};
use crate::model::{GridModel, ModelSlice, TimeGrid};
use crate::response::{best_response_policy, Policy, PolicyAt};

/// Identifier of the noise generator recorded in run manifests.
pub const GENERATOR_ID: &str = "chacha8(seed, stream=path)+standard-normal-ziggurat";

/// Pre-generated Brownian increments, one independent stream per path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    seed: u64,
    n_paths: usize,
    grid: TimeGrid,
    noise_dim: usize,
    coarsening: usize,
    increments: Vec<f64>,
}

impl NoiseBundle {
    /// Draws `n_paths x n_steps x noise_dim` increments scaled by `sqrt(dt)`.
    ///
    /// Memory: `8 * n_paths * n_steps * noise_dim` bytes.
    pub fn generate(seed: u64, n_paths: usize, grid: TimeGrid, noise_dim: usize) -> Self {
        let n_steps = grid.n_steps();
        let sq = grid.dt().sqrt();
        let mut increments = vec![0.0; n_paths * n_steps * noise_dim];
        for p in 0..n_paths {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            for k in 0..n_steps {
                let base = (k * n_paths + p) * noise_dim;
                for j in 0..noise_dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    increments[base + j] = z * sq;
                }
            }
        }
        Self {
            seed,
            n_paths,
            grid,
            noise_dim,
            coarsening: 1,
            increments,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Number of generated steps merged into one step of this bundle.
    pub fn coarsening(&self) -> usize {
        self.coarsening
    }

    pub fn increment(&self, k: usize, p: usize) -> &[f64] {
        let base = (k * self.n_paths + p) * self.noise_dim;
        &self.increments[base..base + self.noise_dim]
    }

    pub fn raw(&self) -> &[f64] {
        &self.increments
    }

    /// Same Brownian paths on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.grid.n_steps() % factor != 0 {
            return Err(Error::PathGridMismatch(format!(
                "cannot coarsen {} steps by {factor}",
                self.grid.n_steps()
            )));
        }
        let grid = TimeGrid::new(self.grid.t0(), self.grid.tf(), self.grid.n_steps() / factor)?;
        let mut increments = vec![0.0; self.n_paths * grid.n_steps() * self.noise_dim];
        for k in 0..grid.n_steps() {
            for p in 0..self.n_paths {
                let base = (k * self.n_paths + p) * self.noise_dim;
                for s in 0..factor {
                    let src = self.increment(k * factor + s, p);
                    for j in 0..self.noise_dim {
                        increments[base + j] += src[j];
                    }
                }
            }
        }
        Ok(Self {
            grid,
            coarsening: self.coarsening * factor,
            increments,
            ..self.clone()
        })
    }

    /// Hex SHA-256 of the increment array.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.increments {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Per-component mean of the standardized draws.
    pub fn standardized_mean(&self) -> Vec<f64> {
        let sq = self.grid.dt().sqrt();
        let count = (self.n_paths * self.grid.n_steps()) as f64;
        (0..self.noise_dim)
            .map(|j| {
                self.increments
                    .iter()
                    .skip(j)
                    .step_by(self.noise_dim)
                    .map(|v| v / sq)
                    .sum::<f64>()
                    / count
            })
            .collect()
    }
}

/// Simulated states and controls of a bundle of paths.
#[derive(Debug, Clone)]
pub struct PathBundle {
    grid: TimeGrid,
    n_paths: usize,
    state_dim: usize,
    control_dim: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
    policies: Vec<String>,
    noise: Arc<NoiseBundle>,
}

impl PathBundle {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        grid: TimeGrid,
        n_paths: usize,
        state_dim: usize,
        control_dim: usize,
        states: Vec<f64>,
        controls: Vec<f64>,
        policies: Vec<String>,
        noise: Arc<NoiseBundle>,
    ) -> Self {
        debug_assert_eq!(states.len(), grid.n_nodes() * n_paths * state_dim);
        debug_assert_eq!(controls.len(), grid.n_steps() * n_paths * control_dim);
        Self {
            grid,
            n_paths,
            state_dim,
            control_dim,
            states,
            controls,
            policies,
            noise,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// State of path `p` at node `k`.
    pub fn state(&self, k: usize, p: usize) -> &[f64] {
        let base = (k * self.n_paths + p) * self.state_dim;
        &self.states[base..base + self.state_dim]
    }

    /// Stacked control applied on path `p` over step `k`.
    pub fn control(&self, k: usize, p: usize) -> &[f64] {
        let base = (k * self.n_paths + p) * self.control_dim;
        &self.controls[base..base + self.control_dim]
    }

    pub fn terminal_state(&self, p: usize) -> &[f64] {
        self.state(self.grid.n_steps(), p)
    }

    pub fn policies(&self) -> &[String] {
        &self.policies
    }

    pub fn noise(&self) -> &Arc<NoiseBundle> {
        &self.noise
    }

    /// True when both bundles were driven by the same noise object.
    pub fn shares_noise_with(&self, other: &PathBundle) -> bool {
        Arc::ptr_eq(&self.noise, &other.noise)
    }

    /// Hex SHA-256 of states and controls.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.states.iter().chain(&self.controls) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Copy holding only the first `n` paths.
    pub fn truncated(&self, n: usize) -> PathBundle {
        let n = n.min(self.n_paths);
        let mut states = Vec::with_capacity(n * self.grid.n_nodes() * self.state_dim);
        let mut controls = Vec::with_capacity(n * self.grid.n_steps() * self.control_dim);
        for k in 0..self.grid.n_nodes() {
            for p in 0..n {
                states.extend_from_slice(self.state(k, p));
                if k < self.grid.n_steps() {
                    controls.extend_from_slice(self.control(k, p));
                }
            }
        }
        PathBundle {
            n_paths: n,
            states,
            controls,
            ..self.clone()
        }
    }
}

/// Euler–Maruyama: `x_{k+1} = x_k + f(t_k, x_k, u_k) dt + D(t_k) Δβ_k` with
/// `u_k` from the per-agent policies, each projected onto its box.
///
/// The bundle starts at the first node of the noise grid.
pub fn simulate(
    model: &GridModel,
    policies: &[&dyn Policy],
    noise: &Arc<NoiseBundle>,
    x0: &DVector<f64>,
) -> Result<PathBundle> {
    let n = model.state_dim();
    let m = model.control_dim();
    let grid = *noise.grid();
    if x0.len() != n {
        return Err(Error::dims("initial state", n, x0.len()));
    }
    if noise.noise_dim() != model.noise_dim() {
        return Err(Error::dims("noise dimension", model.noise_dim(), noise.noise_dim()));
    }
    if policies.len() != model.n_agents() {
        return Err(Error::dims("policies", model.n_agents(), policies.len()));
    }
    if let Some((i, _)) = policies.iter().enumerate().find(|(i, p)| p.agent() != *i) {
        return Err(Error::Config(format!("policy {i} is for agent {}", policies[i].agent())));
    }
    if !model.time_grid().contains(grid.t0()) || !model.time_grid().contains(grid.tf()) {
        return Err(Error::PathGridMismatch("noise grid outside the model horizon".into()));
    }
    let n_paths = noise.n_paths();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let mut states = vec![0.0; (n_steps + 1) * n_paths * n];
    let mut controls = vec![0.0; n_steps * n_paths * m];
    for p in 0..n_paths {
        states[p * n..(p + 1) * n].copy_from_slice(x0.as_slice());
    }
    let mut drift = vec![0.0; n];
    let mut shock = vec![0.0; n];
    for k in 0..n_steps {
        let slice = model.slice(grid.node(k));
        let laws: Vec<Box<dyn PolicyAt + '_>> = policies.iter().map(|p| p.at(&slice)).collect();
        let (head, tail) = states.split_at_mut((k + 1) * n_paths * n);
        let current = &head[k * n_paths * n..];
        for p in 0..n_paths {
            let x = &current[p * n..(p + 1) * n];
            let u = &mut controls[(k * n_paths + p) * m..(k * n_paths + p + 1) * m];
            controls_at(&slice, &laws, x, u)?;
            slice.drift_into(x, u, &mut drift);
            slice.diffusion_into(noise.increment(k, p), &mut shock);
            let next = &mut tail[p * n..(p + 1) * n];
            for c in 0..n {
                next[c] = x[c] + drift[c] * dt + shock[c];
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { path: p, step: k + 1 });
            }
        }
    }
    Ok(PathBundle {
        grid,
        n_paths,
        state_dim: n,
        control_dim: m,
        states,
        controls,
        policies: policies.iter().map(|p| p.label()).collect(),
        noise: Arc::clone(noise),
    })
}

/// Stacked controls of all agents at `x`, each projected onto its box.
pub(crate) fn controls_at(slice: &ModelSlice, laws: &[Box<dyn PolicyAt + '_>], x: &[f64], u: &mut [f64]) -> Result<()> {
    for (agent, law) in slice.agents.iter().zip(laws) {
        let ui = &mut u[agent.control_block.clone()];
        law.control_into(x, ui)?;
        agent.control_set.project(ui);
    }
    Ok(())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    /// Sample mean and `sample std / sqrt(n)`, summed in index order.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::EmptyBundle);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Ok(Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        })
    }

    /// Estimate of the per-sample difference `a - b`.
    pub fn paired(a: &[f64], b: &[f64]) -> Result<Self> {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Self::from_samples(&d)
    }

    /// `|mean - target| <= k * std_error`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

/// Integrand for [`estimate_functional`]: running term `(t, x, u)` and terminal
/// term `x`.
pub struct Integrand<'a> {
    pub running: Box<dyn Fn(f64, &[f64], &[f64]) -> f64 + 'a>,
    pub terminal: Box<dyn Fn(&[f64]) -> f64 + 'a>,
}

/// Left-endpoint rectangle rule along each path plus the terminal term,
/// averaged over paths.
pub fn estimate_functional(bundle: &PathBundle, integrand: &Integrand<'_>) -> Result<Estimate> {
    if bundle.n_paths == 0 {
        return Err(Error::EmptyBundle);
    }
    let grid = bundle.grid;
    let dt = grid.dt();
    let mut acc = vec![0.0; bundle.n_paths];
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        for (p, a) in acc.iter_mut().enumerate() {
            *a += (integrand.running)(t, bundle.state(k, p), bundle.control(k, p)) * dt;
        }
    }
    for (p, a) in acc.iter_mut().enumerate() {
        *a += (integrand.terminal)(bundle.terminal_state(p));
    }
    Estimate::from_samples(&acc)
}

/// Deviation applied to one agent's Nash policy.
#[derive(Clone)]
pub enum Perturbation {
    /// `u + δ`.
    Additive(DVector<f64>),
    /// `u + ΔK x` with `ΔK` of shape `m_i x n`.
    Gain(DMatrix<f64>),
    /// A different policy altogether.
    Replace(Arc<dyn Policy>),
}

#[derive(Clone)]
pub struct PolicyOverride {
    pub agent: usize,
    pub perturbation: Perturbation,
}

impl PolicyOverride {
    pub fn additive(agent: usize, delta: Vec<f64>) -> Self {
        Self {
            agent,
            perturbation: Perturbation::Additive(DVector::from_vec(delta)),
        }
    }

    pub fn gain(agent: usize, gain: DMatrix<f64>) -> Self {
        Self {
            agent,
            perturbation: Perturbation::Gain(gain),
        }
    }

    pub fn label(&self) -> String {
        match &self.perturbation {
            Perturbation::Additive(d) => format!("additive{:?}", d.as_slice()),
            Perturbation::Gain(k) => format!("gain(|dK|={:.4})", k.norm()),
            Perturbation::Replace(p) => format!("replace({})", p.label()),
        }
    }
}

/// A base policy with a [`Perturbation`] applied, re-projected onto the box.
pub struct DeviatedPolicy {
    base: Arc<dyn Policy>,
    perturbation: Perturbation,
}

impl DeviatedPolicy {
    pub fn new(base: Arc<dyn Policy>, perturbation: Perturbation) -> Self {
        Self { base, perturbation }
    }
}

impl Policy for DeviatedPolicy {
    fn agent(&self) -> usize {
        self.base.agent()
    }

    fn label(&self) -> String {
        let o = PolicyOverride {
            agent: self.agent(),
            perturbation: self.perturbation.clone(),
        };
        format!("{}+{}", self.base.label(), o.label())
    }

    fn at<'a>(&'a self, slice: &'a ModelSlice) -> Box<dyn PolicyAt + 'a> {
        let inner = match &self.perturbation {
            Perturbation::Replace(p) => p.at(slice),
            _ => self.base.at(slice),
        };
        Box::new(DeviatedAt {
            inner,
            perturbation: &self.perturbation,
            slice,
            agent: self.agent(),
        })
    }
}

struct DeviatedAt<'a> {
    inner: Box<dyn PolicyAt + 'a>,
    perturbation: &'a Perturbation,
    slice: &'a ModelSlice,
    agent: usize,
}

impl PolicyAt for DeviatedAt<'_> {
    fn control_into(&self, x: &[f64], u: &mut [f64]) -> Result<()> {
        self.inner.control_into(x, u)?;
        match self.perturbation {
            Perturbation::Additive(d) => u.iter_mut().zip(d.iter()).for_each(|(a, b)| *a += b),
            Perturbation::Gain(k) => {
                for (j, uj) in u.iter_mut().enumerate() {
                    *uj += (0..x.len()).map(|c| k[(j, c)] * x[c]).sum::<f64>();
                }
            }
            Perturbation::Replace(_) => {}
        }
        self.slice.agents[self.agent].control_set.project(u);
        Ok(())
    }
}

/// Paired profit change of one deviation.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationEntry {
    pub label: String,
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    /// `mean <= 3 * std_error`.
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationReport {
    pub agent: usize,
    pub nash_profit: Estimate,
    pub entries: Vec<DeviationEntry>,
    pub passed: bool,
}

/// Simulates the Nash profile and each deviation of `agent` on the same noise
/// and compares the agent's profit path by path.
pub fn deviation_test(
    model: &GridModel,
    prices: Arc<dyn PriceField>,
    agent: usize,
    overrides: &[PolicyOverride],
    noise: &Arc<NoiseBundle>,
    x0: &DVector<f64>,
) -> Result<DeviationReport> {
    let nash: Vec<Arc<dyn Policy>> = (0..model.n_agents())
        .map(|i| Arc::new(best_response_policy(i, Arc::clone(&prices))) as Arc<dyn Policy>)
        .collect();
    let refs: Vec<&dyn Policy> = nash.iter().map(|p| p.as_ref()).collect();
    let base = simulate(model, &refs, noise, x0)?;
    let base_profit = settle(prices.as_ref(), &base, model)?.profit_samples(agent);
    drop(base);
    let nash_profit = Estimate::from_samples(&base_profit)?;

    let mut entries = Vec::with_capacity(overrides.len());
    for o in overrides {
        if o.agent != agent {
            return Err(Error::Config(format!("override for agent {} in test of agent {agent}", o.agent)));
        }
        let deviated: Arc<dyn Policy> = Arc::new(DeviatedPolicy::new(Arc::clone(&nash[agent]), o.perturbation.clone()));
        let mut refs: Vec<&dyn Policy> = nash.iter().map(|p| p.as_ref()).collect();
        refs[agent] = deviated.as_ref();
        let bundle = simulate(model, &refs, noise, x0)?;
        let profit = settle(prices.as_ref(), &bundle, model)?.profit_samples(agent);
        let d = Estimate::paired(&profit, &base_profit)?;
        entries.push(DeviationEntry {
            label: o.label(),
            mean: d.mean,
            std_error: d.std_error,
            n_paths: d.n,
            passed: d.mean <= 3.0 * d.std_error,
        });
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(DeviationReport {
        agent,
        nash_profit,
        entries,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::scalar_model;
    use crate::response::FnPolicy;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = NoiseBundle::generate(7, 50, grid(40), 2);
        let b = NoiseBundle::generate(7, 50, grid(40), 2);
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), NoiseBundle::generate(8, 50, grid(40), 2).fingerprint());
    }

    #[test]
    fn standardized_mean_is_small() {
        let nb = NoiseBundle::generate(3, 2000, grid(100), 3);
        let bound = 4.0 / ((2000 * 100) as f64).sqrt();
        for m in nb.standardized_mean() {
            assert!(m.abs() <= bound, "{m} > {bound}");
        }
    }

    #[test]
    fn coarsening_preserves_brownian_endpoints() {
        let nb = NoiseBundle::generate(3, 5, grid(40), 2);
        let c = nb.coarsen(4).unwrap();
        assert_eq!(c.grid().n_steps(), 10);
        for p in 0..5 {
            for j in 0..2 {
                let fine: f64 = (0..40).map(|k| nb.increment(k, p)[j]).sum();
                let coarse: f64 = (0..10).map(|k| c.increment(k, p)[j]).sum();
                assert!((fine - coarse).abs() < 1e-12);
            }
        }
        assert!(nb.coarsen(3).is_err());
    }

    #[test]
    fn zero_dynamics_keep_paths_constant() {
        let m = scalar_model(0.0, 0.0, 1.0).with_diffusion_scaled(0.0);
        let noise = Arc::new(NoiseBundle::generate(1, 4, *m.time_grid(), 2));
        let zero = FnPolicy::zero(0);
        let x0 = DVector::from_vec(vec![0.3, -0.7]);
        let b = simulate(&m, &[&zero], &noise, &x0).unwrap();
        for p in 0..4 {
            assert_eq!(b.terminal_state(p), x0.as_slice());
        }
    }

    #[test]
    fn deterministic_decay_matches_exponential() {
        let m = scalar_model(-1.0, 0.0, 1.0).with_diffusion_scaled(0.0);
        let g = TimeGrid::with_step(0.0, 1.0, 1.0 / 400.0).unwrap();
        let noise = Arc::new(NoiseBundle::generate(1, 1, g, 2));
        let zero = FnPolicy::zero(0);
        let b = simulate(&m, &[&zero], &noise, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!((b.terminal_state(0)[1] - (-1.0f64).exp()).abs() < 2e-3);
    }

    #[test]
    fn constant_integrand_is_exact() {
        let m = scalar_model(-1.0, 1.0, 0.1);
        let noise = Arc::new(NoiseBundle::generate(1, 20, *m.time_grid(), 2));
        let zero = FnPolicy::zero(0);
        let b = simulate(&m, &[&zero], &noise, &DVector::zeros(2)).unwrap();
        let e = estimate_functional(
            &b,
            &Integrand {
                running: Box::new(|_, _, _| 1.0),
                terminal: Box::new(|_| 0.0),
            },
        )
        .unwrap();
        assert!((e.mean - 1.0).abs() < 1e-12);
        assert!(e.std_error < 1e-12);
    }

    #[test]
    fn controls_are_projected_onto_boxes() {
        let m = scalar_model(-1.0, 1.0, 0.1);
        let noise = Arc::new(NoiseBundle::generate(1, 10, *m.time_grid(), 2));
        let wild = FnPolicy::new(0, "wild", |t, _, u| u[0] = 10.0 * (20.0 * t).sin());
        let b = simulate(&m, &[&wild], &noise, &DVector::zeros(2)).unwrap();
        for k in 0..m.time_grid().n_steps() {
            for p in 0..10 {
                let u = b.control(k, p)[0];
                assert!((-1.0..=1.0).contains(&u));
            }
        }
    }

    #[test]
    fn empty_estimate_is_an_error() {
        assert!(matches!(Estimate::from_samples(&[]), Err(Error::EmptyBundle)));
    }
}
