//! Explicit backward scheme for the principal HJB on a uniform spatial grid
//! (state dimension at most 3).
//!
//! At every node the price row is the central-difference gradient of the
//! current slice, controls are the agents' best responses to it, and the
//! optimized drift is upwinded on its sign. Diffusion uses central second
//! differences. Boundary nodes use one-sided first differences and a shifted
//! second-difference stencil.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{terminal_value, GridModel, ModelSlice, TimeGrid};
use crate::response::{respond, FnPolicy, Policy};
use crate::sim::{simulate, NoiseBundle, PathBundle};

/// Cap on explicit substeps per model step.
pub const MAX_SUBSTEPS: usize = 10_000;
/// Fraction of the stability bound used as the substep.
pub const CFL_SAFETY: f64 = 0.9;

/// Axis-aligned box in state space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SpatialDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dims("domain bounds", lower.len(), upper.len()));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a < b)) {
            return Err(Error::Config(format!("empty spatial domain {lower:?}..{upper:?}")));
        }
        Ok(Self { lower, upper })
    }

    /// `mean ± n_std · std` per axis over all nodes of a zero-control pilot
    /// bundle started at `x0`.
    pub fn from_pilot(model: &GridModel, x0: &DVector<f64>, n_paths: usize, seed: u64, n_std: f64) -> Result<Self> {
        let zero: Vec<FnPolicy> = (0..model.n_agents()).map(FnPolicy::zero).collect();
        let refs: Vec<&dyn Policy> = zero.iter().map(|p| p as &dyn Policy).collect();
        let noise = Arc::new(NoiseBundle::generate(seed, n_paths, *model.time_grid(), model.noise_dim()));
        let bundle = simulate(model, &refs, &noise, x0)?;
        let n = model.state_dim();
        let mut lower = vec![f64::INFINITY; n];
        let mut upper = vec![f64::NEG_INFINITY; n];
        for k in 0..bundle.grid().n_nodes() {
            for c in 0..n {
                let vals: Vec<f64> = (0..n_paths).map(|p| bundle.state(k, p)[c]).collect();
                let mean = vals.iter().sum::<f64>() / n_paths as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_paths.max(2) - 1) as f64;
                let sd = var.sqrt();
                lower[c] = lower[c].min(mean - n_std * sd);
                upper[c] = upper[c].max(mean + n_std * sd);
            }
        }
        for c in 0..n {
            if upper[c] - lower[c] < 1e-8 {
                lower[c] -= 1.0;
                upper[c] += 1.0;
            }
        }
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(c, v)| *v >= self.lower[c] && *v <= self.upper[c])
    }

    /// Centered sub-box covering `fraction` of each axis.
    pub fn inner(&self, fraction: f64) -> Self {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| {
                let mid = 0.5 * (a + b);
                let half = 0.5 * fraction * (b - a);
                (mid - half, mid + half)
            })
            .unzip();
        Self { lower, upper }
    }

    /// Fraction of (path, node) states outside the domain.
    pub fn exit_fraction(&self, bundle: &PathBundle) -> f64 {
        let nodes = bundle.grid().n_nodes();
        let mut outside = 0usize;
        for k in 0..nodes {
            for p in 0..bundle.n_paths() {
                outside += usize::from(!self.contains(bundle.state(k, p)));
            }
        }
        outside as f64 / (nodes * bundle.n_paths()) as f64
    }
}

/// Domain and number of points per axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub domain: SpatialDomain,
    pub points: Vec<usize>,
}

impl GridSpec {
    pub fn uniform(domain: SpatialDomain, points: usize) -> Self {
        let d = domain.dim();
        Self {
            domain,
            points: vec![points; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Lattice {
    lower: Vec<f64>,
    points: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    size: usize,
}

impl Lattice {
    fn new(spec: &GridSpec) -> Result<Self> {
        let d = spec.points.len();
        if d != spec.domain.dim() {
            return Err(Error::dims("grid points", spec.domain.dim(), d));
        }
        if spec.points.iter().any(|&p| p < 3) {
            return Err(Error::Config("grid needs at least 3 points per axis".into()));
        }
        let spacing: Vec<f64> = (0..d)
            .map(|c| (spec.domain.upper[c] - spec.domain.lower[c]) / (spec.points[c] - 1) as f64)
            .collect();
        let mut strides = vec![1; d];
        for c in (0..d.saturating_sub(1)).rev() {
            strides[c] = strides[c + 1] * spec.points[c + 1];
        }
        Ok(Self {
            lower: spec.domain.lower.clone(),
            points: spec.points.clone(),
            spacing,
            strides,
            size: spec.points.iter().product(),
        })
    }

    fn dim(&self) -> usize {
        self.points.len()
    }

    fn decode(&self, idx: usize, multi: &mut [usize], x: &mut [f64]) {
        let mut rest = idx;
        for c in 0..self.dim() {
            multi[c] = rest / self.strides[c];
            rest %= self.strides[c];
            x[c] = self.lower[c] + multi[c] as f64 * self.spacing[c];
        }
    }

    /// Central first difference, one-sided at the boundary.
    fn first(&self, v: &[f64], idx: usize, i: usize, c: usize) -> f64 {
        let s = self.strides[c];
        let h = self.spacing[c];
        if i == 0 {
            (v[idx + s] - v[idx]) / h
        } else if i == self.points[c] - 1 {
            (v[idx] - v[idx - s]) / h
        } else {
            (v[idx + s] - v[idx - s]) / (2.0 * h)
        }
    }

    /// Upwind first difference for a drift component `f`.
    fn upwind(&self, v: &[f64], idx: usize, i: usize, c: usize, f: f64) -> f64 {
        let s = self.strides[c];
        let h = self.spacing[c];
        let forward = if f > 0.0 { i < self.points[c] - 1 } else { i == 0 };
        if forward {
            (v[idx + s] - v[idx]) / h
        } else {
            (v[idx] - v[idx - s]) / h
        }
    }

    /// Second difference, stencil shifted inward at the boundary.
    fn second(&self, v: &[f64], idx: usize, i: usize, c: usize) -> f64 {
        let s = self.strides[c];
        let h2 = self.spacing[c] * self.spacing[c];
        let centre = if i == 0 {
            idx + s
        } else if i == self.points[c] - 1 {
            idx - s
        } else {
            idx
        };
        (v[centre + s] - 2.0 * v[centre] + v[centre - s]) / h2
    }

    /// Mixed difference from first differences along `c` at the neighbours
    /// along `l`.
    fn mixed(&self, v: &[f64], idx: usize, multi: &[usize], c: usize, l: usize) -> f64 {
        let s = self.strides[l];
        let il = multi[l];
        let (plus, minus, width) = if il == 0 {
            (idx + s, idx, 1.0)
        } else if il == self.points[l] - 1 {
            (idx, idx - s, 1.0)
        } else {
            (idx + s, idx - s, 2.0)
        };
        (self.first(v, plus, multi[c], c) - self.first(v, minus, multi[c], c)) / (width * self.spacing[l])
    }
}

/// Quantities the sweep uses at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTerms {
    pub state: Vec<f64>,
    /// Central-difference gradient (the announced price row).
    pub gradient: Vec<f64>,
    pub control: Vec<f64>,
    pub drift: Vec<f64>,
    /// `f·∇V (upwind) + 1/2 tr(Σ ∇²V) + l0 + Σ l_i`.
    pub generator: f64,
}

struct Work {
    multi: Vec<usize>,
    x: Vec<f64>,
    grad: Vec<f64>,
    u: Vec<f64>,
    f: Vec<f64>,
}

impl Work {
    fn new(n: usize, m: usize) -> Self {
        Self {
            multi: vec![0; n],
            x: vec![0.0; n],
            grad: vec![0.0; n],
            u: vec![0.0; m],
            f: vec![0.0; n],
        }
    }
}

fn generator(lat: &Lattice, slice: &ModelSlice, v: &[f64], idx: usize, w: &mut Work) -> Result<f64> {
    let d = lat.dim();
    lat.decode(idx, &mut w.multi, &mut w.x);
    for c in 0..d {
        w.grad[c] = lat.first(v, idx, w.multi[c], c);
    }
    for a in &slice.agents {
        respond(a, &w.grad[a.state_block.clone()], &mut w.u[a.control_block.clone()])?;
    }
    slice.drift_into(&w.x, &w.u, &mut w.f);
    let mut total = slice.utility_stage_payoff(&w.x);
    for a in &slice.agents {
        total += a.stage_payoff(&w.x[a.state_block.clone()], &w.u[a.control_block.clone()]);
    }
    for c in 0..d {
        total += w.f[c] * lat.upwind(v, idx, w.multi[c], c, w.f[c]);
        total += 0.5 * slice.covariance[(c, c)] * lat.second(v, idx, w.multi[c], c);
        for l in c + 1..d {
            let s = slice.covariance[(c, l)];
            if s != 0.0 {
                total += s * lat.mixed(v, idx, &w.multi, c, l);
            }
        }
    }
    Ok(total)
}

/// Sweep quantities at node `idx` of `values` (one spatial slice laid out as
/// in [`GridValueFunction`]), with coefficients from `slice`.
pub fn sweep_terms(slice: &ModelSlice, spec: &GridSpec, values: &[f64], idx: usize) -> Result<SweepTerms> {
    let lat = Lattice::new(spec)?;
    let mut w = Work::new(slice.state_dim(), slice.control_dim());
    let generator = generator(&lat, slice, values, idx, &mut w)?;
    Ok(SweepTerms {
        state: w.x,
        gradient: w.grad,
        control: w.u,
        drift: w.f,
        generator,
    })
}

/// Value function on a uniform grid at every node of the model time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValueFunction {
    grid: TimeGrid,
    spec: GridSpec,
    lat: Lattice,
    values: Vec<f64>,
    substeps: Vec<usize>,
}

/// Explicit backward sweep from the terminal payoff.
pub fn solve_hjb_grid(model: &GridModel, spec: &GridSpec) -> Result<GridValueFunction> {
    let n = model.state_dim();
    if n > 3 {
        return Err(Error::GridDimension(n));
    }
    let lat = Lattice::new(spec)?;
    if lat.dim() != n {
        return Err(Error::dims("grid dimension", n, lat.dim()));
    }
    let grid = *model.time_grid();
    let size = lat.size;
    let mut values = vec![0.0; grid.n_nodes() * size];
    let mut w = Work::new(n, model.control_dim());

    let last = grid.n_steps();
    let urev = &model.utility().revenue;
    for idx in 0..size {
        lat.decode(idx, &mut w.multi, &mut w.x);
        let mut v = terminal_value(&urev.terminal_weight, &urev.terminal_linear, &w.x);
        for (i, a) in model.agents().iter().enumerate() {
            let blk = model.layout().agent_block(i);
            v += terminal_value(&a.revenue.terminal_weight, &a.revenue.terminal_linear, &w.x[blk]);
        }
        values[last * size + idx] = v;
    }

    let bound = |slice: &ModelSlice| -> f64 {
        // sup over the domain of Σ |f_c| / h_c + Σ_c Σ_cc / h_c^2 + Σ_{c≠l} |Σ_cl| / (h_c h_l)
        let mut u_max = vec![0.0; slice.control_dim()];
        for a in &slice.agents {
            for (j, r) in a.control_block.clone().enumerate() {
                u_max[r] = a.control_set.lower()[j].abs().max(a.control_set.upper()[j].abs());
            }
        }
        let mut rate = 0.0;
        for c in 0..n {
            let mut f = 0.0;
            for k in 0..n {
                let xm = spec.domain.lower[k].abs().max(spec.domain.upper[k].abs());
                f += slice.drift[(c, k)].abs() * xm;
            }
            for (j, um) in u_max.iter().enumerate() {
                f += slice.input[(c, j)].abs() * um;
            }
            rate += f / lat.spacing[c] + slice.covariance[(c, c)] / (lat.spacing[c] * lat.spacing[c]);
            for l in 0..n {
                if l != c {
                    rate += slice.covariance[(c, l)].abs() / (lat.spacing[c] * lat.spacing[l]);
                }
            }
        }
        rate
    };

    let dt = grid.dt();
    let mut substeps = vec![0; grid.n_steps()];
    let mut cur = values[last * size..].to_vec();
    let mut next = vec![0.0; size];
    for k in (0..grid.n_steps()).rev() {
        let t_right = grid.node(k + 1);
        let rate = bound(&model.slice(t_right)).max(bound(&model.slice(grid.node(k))));
        let required = if rate > 0.0 {
            (dt * rate / CFL_SAFETY).ceil().max(1.0) as usize
        } else {
            1
        };
        if required > MAX_SUBSTEPS {
            return Err(Error::CflInfeasible {
                required,
                cap: MAX_SUBSTEPS,
            });
        }
        substeps[k] = required;
        let h = dt / required as f64;
        for j in 0..required {
            let slice = model.slice(t_right - j as f64 * h);
            for idx in 0..size {
                next[idx] = cur[idx] + h * generator(&lat, &slice, &cur, idx, &mut w)?;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        if let Some(bad) = cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite grid value at node {bad}, t = {}", grid.node(k))));
        }
        values[k * size..(k + 1) * size].copy_from_slice(&cur);
    }
    Ok(GridValueFunction {
        grid,
        spec: spec.clone(),
        lat,
        values,
        substeps,
    })
}

impl GridValueFunction {
    pub fn time_grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn state_dim(&self) -> usize {
        self.lat.dim()
    }

    /// Number of spatial nodes per time slice.
    pub fn slice_len(&self) -> usize {
        self.lat.size
    }

    /// Spatial slice at time node `k`.
    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k * self.lat.size..(k + 1) * self.lat.size]
    }

    /// Explicit substeps used on each model step.
    pub fn substeps(&self) -> &[usize] {
        &self.substeps
    }

    pub fn node_state(&self, idx: usize) -> Vec<f64> {
        let d = self.lat.dim();
        let mut multi = vec![0; d];
        let mut x = vec![0.0; d];
        self.lat.decode(idx, &mut multi, &mut x);
        x
    }

    /// Spatial nodes lying in `domain`.
    pub fn nodes_in(&self, domain: &SpatialDomain) -> Vec<usize> {
        (0..self.lat.size)
            .filter(|&i| domain.contains(&self.node_state(i)))
            .collect()
    }

    fn cell(&self, x: &[f64], base: &mut usize, frac: &mut [f64]) {
        *base = 0;
        for c in 0..self.lat.dim() {
            let s = ((x[c] - self.lat.lower[c]) / self.lat.spacing[c]).clamp(0.0, (self.lat.points[c] - 1) as f64);
            let j = (s.floor() as usize).min(self.lat.points[c] - 2);
            frac[c] = s - j as f64;
            *base += j * self.lat.strides[c];
        }
    }

    /// Multilinear interpolation of slice `k` at `x` (clamped to the domain).
    pub fn slice_value(&self, k: usize, x: &[f64]) -> f64 {
        let d = self.lat.dim();
        let v = self.slice(k);
        let mut frac = [0.0; 3];
        let mut base = 0;
        self.cell(x, &mut base, &mut frac);
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut idx = base;
            for c in 0..d {
                if corner >> c & 1 == 1 {
                    weight *= frac[c];
                    idx += self.lat.strides[c];
                } else {
                    weight *= 1.0 - frac[c];
                }
            }
            total += weight * v[idx];
        }
        total
    }

    /// Gradient of the multilinear interpolant of slice `k`.
    pub fn slice_gradient(&self, k: usize, x: &[f64], out: &mut [f64]) {
        let d = self.lat.dim();
        let v = self.slice(k);
        let mut frac = [0.0; 3];
        let mut base = 0;
        self.cell(x, &mut base, &mut frac);
        out.fill(0.0);
        for corner in 0..(1usize << d) {
            let mut idx = base;
            for c in 0..d {
                if corner >> c & 1 == 1 {
                    idx += self.lat.strides[c];
                }
            }
            for g in 0..d {
                let mut weight = 1.0;
                for c in 0..d {
                    let hi = corner >> c & 1 == 1;
                    weight *= match (c == g, hi) {
                        (true, true) => 1.0 / self.lat.spacing[c],
                        (true, false) => -1.0 / self.lat.spacing[c],
                        (false, true) => frac[c],
                        (false, false) => 1.0 - frac[c],
                    };
                }
                out[g] += weight * v[idx];
            }
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let (k, w) = self.grid.locate(t);
        (1.0 - w) * self.slice_value(k, x) + w * self.slice_value(k + 1, x)
    }

    /// Forward difference in time between the bracketing slices.
    pub fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        let (k, _) = self.grid.locate(t);
        (self.slice_value(k + 1, x) - self.slice_value(k, x)) / self.grid.dt()
    }

    /// Second central differences of the interpolant with the cell size as step.
    pub fn hessian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let d = self.lat.dim();
        let mut h = DMatrix::zeros(d, d);
        let shifted = |moves: &[(usize, f64)]| {
            let mut y = x.to_vec();
            for &(c, s) in moves {
                y[c] += s;
            }
            self.value(t, &y)
        };
        let v0 = self.value(t, x);
        for c in 0..d {
            let hc = self.lat.spacing[c];
            h[(c, c)] = (shifted(&[(c, hc)]) - 2.0 * v0 + shifted(&[(c, -hc)])) / (hc * hc);
            for l in c + 1..d {
                let hl = self.lat.spacing[l];
                let m = (shifted(&[(c, hc), (l, hl)]) - shifted(&[(c, hc), (l, -hl)]) - shifted(&[(c, -hc), (l, hl)])
                    + shifted(&[(c, -hc), (l, -hl)]))
                    / (4.0 * hc * hl);
                h[(c, l)] = m;
                h[(l, c)] = m;
            }
        }
        h
    }
}
