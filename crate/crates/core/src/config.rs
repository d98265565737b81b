//! JSON configuration: model blocks, scenario keys and simulation settings.
//!
//! Matrices are row-major nested arrays. A time-varying coefficient is
//! `{"samples": [[t, matrix], ...]}`. Unknown keys are rejected.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hjb::Backend;
use crate::model::{AgentSpec, CoefficientTrajectory, ControlSet, GridModel, QuadraticRevenue, TimeGrid, UtilitySpec};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Constant(Vec<Vec<f64>>),
    Sampled { samples: Vec<(f64, Vec<Vec<f64>>)> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGridConfig {
    pub t0: f64,
    pub tf: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    #[serde(rename = "A00")]
    pub a00: MatrixSpec,
    /// One coupling block `A0i` per agent.
    #[serde(rename = "A0")]
    pub a0: Vec<MatrixSpec>,
    #[serde(rename = "D")]
    pub d: MatrixSpec,
    /// Running state weight, either `n0 x n0` (utility block) or `n x n`.
    #[serde(rename = "Q", default)]
    pub q: Option<MatrixSpec>,
    #[serde(rename = "Qf", default)]
    pub qf_matrix: Option<Vec<Vec<f64>>>,
    #[serde(rename = "qf", default)]
    pub qf: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(rename = "A")]
    pub a: MatrixSpec,
    #[serde(rename = "B")]
    pub b: MatrixSpec,
    #[serde(rename = "D")]
    pub d: MatrixSpec,
    #[serde(rename = "Q", default)]
    pub q: Option<MatrixSpec>,
    #[serde(rename = "R")]
    pub r: MatrixSpec,
    #[serde(rename = "Qf", default)]
    pub qf_matrix: Option<Vec<Vec<f64>>>,
    #[serde(rename = "qf", default)]
    pub qf: Option<Vec<f64>>,
    #[serde(rename = "box")]
    pub control_box: BoxConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub enum Case {
    A,
    B,
    C,
}

/// How the utility's revenue enters the welfare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityRevenue {
    /// The utility's own revenue; rewards are paid out of welfare.
    #[default]
    Own,
    /// Utility plus agent revenues; rewards are not liquidated.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub enum Block {
    Q,
    R,
    A,
    B,
}

/// Agent `agent` reports `factor` times its true block.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Misreport {
    pub agent: usize,
    pub block: Block,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub t_start: Option<f64>,
}

fn default_seed() -> u64 {
    20_240_601
}

fn default_paths() -> usize {
    10_000
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            n_paths: default_paths(),
            dt: None,
            x0: None,
            t_start: None,
        }
    }
}

/// Parametric deviations tried for every agent.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationConfig {
    #[serde(default = "default_additive")]
    pub additive: Vec<f64>,
    #[serde(default = "default_gains")]
    pub random_gains: usize,
    #[serde(default = "default_gain_norm")]
    pub gain_norm: f64,
    #[serde(default = "default_gain_seed")]
    pub seed: u64,
}

fn default_additive() -> Vec<f64> {
    vec![0.2, -0.2]
}

fn default_gains() -> usize {
    20
}

fn default_gain_norm() -> f64 {
    0.5
}

fn default_gain_seed() -> u64 {
    7
}

impl Default for DeviationConfig {
    fn default() -> Self {
        Self {
            additive: default_additive(),
            random_gains: default_gains(),
            gain_norm: default_gain_norm(),
            seed: default_gain_seed(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub description: Option<String>,
    pub time_grid: TimeGridConfig,
    pub utility: UtilityConfig,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub case: Option<Case>,
    #[serde(default)]
    pub floors: Option<Vec<f64>>,
    #[serde(default)]
    pub misreports: Option<Vec<Misreport>>,
    #[serde(default)]
    pub utility_revenue: UtilityRevenue,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub deviations: DeviationConfig,
    #[serde(default)]
    pub solver: Option<Backend>,
    #[serde(default)]
    pub output: Option<String>,
}

/// A parsed and resolved configuration.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub model: GridModel,
    pub case: Case,
    pub floors: Vec<f64>,
    pub misreports: Vec<Misreport>,
    pub utility_revenue: UtilityRevenue,
    pub seed: u64,
    pub n_paths: usize,
    /// Simulation step, a divisor of the model step's horizon.
    pub dt: f64,
    pub x0: DVector<f64>,
    pub t_start: f64,
    pub deviations: DeviationConfig,
    pub solver: Backend,
    pub output: Option<String>,
    /// Hex SHA-256 of the configuration bytes.
    pub config_hash: String,
}

/// Grid of misreport factors applied to `Q` and `R` of the first agent when
/// none are configured.
pub const DEFAULT_MISREPORT_FACTORS: [f64; 4] = [0.5, 0.8, 1.25, 2.0];

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ConfigFile = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::from_file(file)?;
        cfg.config_hash = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(cfg)
    }

    pub fn from_file(file: ConfigFile) -> Result<Self> {
        let model = build_model(&file)?;
        let n_agents = model.n_agents();
        let case = file.case.unwrap_or(Case::A);
        let mut floors = file.floors.unwrap_or_else(|| vec![0.0; n_agents]);
        if floors.len() != n_agents {
            return Err(Error::Config(format!("floors has {} entries for {n_agents} agents", floors.len())));
        }
        if case == Case::B {
            floors = vec![0.0; n_agents];
        }
        let misreports = file.misreports.unwrap_or_else(|| {
            [Block::Q, Block::R]
                .iter()
                .flat_map(|&block| {
                    DEFAULT_MISREPORT_FACTORS
                        .iter()
                        .map(move |&factor| Misreport { agent: 0, block, factor })
                })
                .collect()
        });
        if let Some(m) = misreports.iter().find(|m| m.agent >= n_agents || !(m.factor > 0.0)) {
            return Err(Error::Config(format!("invalid misreport {m:?}")));
        }
        let n = model.state_dim();
        let x0 = match file.sim.x0 {
            Some(v) if v.len() != n => return Err(Error::dims("sim.x0", n, v.len())),
            Some(v) => DVector::from_vec(v),
            None => DVector::zeros(n),
        };
        let dt = file.sim.dt.unwrap_or(model.time_grid().dt());
        let t_start = file.sim.t_start.unwrap_or(model.time_grid().t0());
        let cfg = Self {
            model,
            case,
            floors,
            misreports,
            utility_revenue: file.utility_revenue,
            seed: file.sim.seed,
            n_paths: file.sim.n_paths,
            dt,
            x0,
            t_start,
            deviations: file.deviations,
            solver: file.solver.unwrap_or(Backend::Auto),
            output: file.output,
            config_hash: String::new(),
        };
        cfg.sim_grid()?;
        Ok(cfg)
    }

    /// Replaces simulation settings given on the command line.
    pub fn override_sim(&mut self, seed: Option<u64>, n_paths: Option<usize>, dt: Option<f64>) -> Result<()> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(n) = n_paths {
            self.n_paths = n;
        }
        if let Some(d) = dt {
            self.dt = d;
        }
        self.sim_grid().map(|_| ())
    }

    /// Switches the case, zeroing the floors for case B.
    pub fn set_case(&mut self, case: Case) {
        self.case = case;
        if case == Case::B {
            self.floors.iter_mut().for_each(|k| *k = 0.0);
        }
    }

    /// Simulation grid from `t_start` to the horizon end with step `dt`.
    pub fn sim_grid(&self) -> Result<TimeGrid> {
        let g = self.model.time_grid();
        if !(self.n_paths > 0) {
            return Err(Error::Config("sim.n_paths must be positive".into()));
        }
        if !(g.t0() <= self.t_start && self.t_start < g.tf()) {
            return Err(Error::Config(format!("sim.t_start = {} outside the horizon", self.t_start)));
        }
        TimeGrid::with_step(self.t_start, g.tf(), self.dt)
    }
}

fn to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{name} is not a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn to_trajectory(name: &str, spec: &MatrixSpec) -> Result<CoefficientTrajectory> {
    match spec {
        MatrixSpec::Constant(rows) => Ok(CoefficientTrajectory::constant(to_matrix(name, rows)?)),
        MatrixSpec::Sampled { samples } => {
            let s = samples
                .iter()
                .map(|(t, rows)| Ok((*t, to_matrix(name, rows)?)))
                .collect::<Result<Vec<_>>>()?;
            CoefficientTrajectory::sampled(name, s)
        }
    }
}

fn build_model(file: &ConfigFile) -> Result<GridModel> {
    let g = &file.time_grid;
    let grid = TimeGrid::new(g.t0, g.tf, g.n_steps)?;
    let u = &file.utility;
    let drift = to_trajectory("utility.A00", &u.a00)?;
    let n0 = drift.shape().0;
    let agent_dims: Vec<usize> = file
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| Ok(to_trajectory(&format!("agents[{i}].A"), &a.a)?.shape().0))
        .collect::<Result<_>>()?;
    let n = n0 + agent_dims.iter().sum::<usize>();

    let embed = |m: DMatrix<f64>| -> Result<DMatrix<f64>> {
        match m.shape() {
            s if s == (n, n) => Ok(m),
            s if s == (n0, n0) => {
                let mut full = DMatrix::zeros(n, n);
                full.view_mut((0, 0), (n0, n0)).copy_from(&m);
                Ok(full)
            }
            s => Err(Error::dims("utility weight", format!("{n0}x{n0} or {n}x{n}"), format!("{}x{}", s.0, s.1))),
        }
    };
    let q0 = match &u.q {
        Some(spec) => {
            let t = to_trajectory("utility.Q", spec)?;
            let samples = t
                .samples()
                .iter()
                .map(|(s, m)| Ok((*s, embed(m.clone())?)))
                .collect::<Result<Vec<_>>>()?;
            CoefficientTrajectory::sampled("utility.Q", samples)?
        }
        None => CoefficientTrajectory::constant(DMatrix::zeros(n, n)),
    };
    let qf0 = match &u.qf_matrix {
        Some(rows) => embed(to_matrix("utility.Qf", rows)?)?,
        None => DMatrix::zeros(n, n),
    };
    let qlin0 = match &u.qf {
        Some(v) if v.len() == n => DVector::from_column_slice(v),
        Some(v) if v.len() == n0 => {
            let mut full = DVector::zeros(n);
            full.rows_mut(0, n0).copy_from_slice(v);
            full
        }
        Some(v) => return Err(Error::dims("utility.qf", format!("{n0} or {n}"), v.len())),
        None => DVector::zeros(n),
    };
    let utility = UtilitySpec {
        drift,
        couplings: u
            .a0
            .iter()
            .enumerate()
            .map(|(i, m)| to_trajectory(&format!("utility.A0[{i}]"), m))
            .collect::<Result<_>>()?,
        diffusion: to_trajectory("utility.D", &u.d)?,
        revenue: QuadraticRevenue {
            terminal_weight: qf0,
            terminal_linear: qlin0,
            state_weight: q0,
            control_weight: None,
        },
    };
    let agents = file
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let ni = agent_dims[i];
            let name = |k: &str| format!("agents[{i}].{k}");
            let control_set = ControlSet::new(a.control_box.lower.clone(), a.control_box.upper.clone())
                .map_err(|reason| Error::InvalidControlSet { agent: i, reason })?;
            Ok(AgentSpec {
                drift: to_trajectory(&name("A"), &a.a)?,
                input: to_trajectory(&name("B"), &a.b)?,
                diffusion: to_trajectory(&name("D"), &a.d)?,
                revenue: QuadraticRevenue {
                    terminal_weight: match &a.qf_matrix {
                        Some(rows) => to_matrix(&name("Qf"), rows)?,
                        None => DMatrix::zeros(ni, ni),
                    },
                    terminal_linear: match &a.qf {
                        Some(v) => DVector::from_column_slice(v),
                        None => DVector::zeros(ni),
                    },
                    state_weight: match &a.q {
                        Some(q) => to_trajectory(&name("Q"), q)?,
                        None => CoefficientTrajectory::constant(DMatrix::zeros(ni, ni)),
                    },
                    control_weight: Some(to_trajectory(&name("R"), &a.r)?),
                },
                control_set,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GridModel::new(grid, utility, agents)
}

/// Copy of `model` with agent `m.agent`'s block scaled by `m.factor`.
pub fn apply_misreport(model: &GridModel, m: &Misreport) -> GridModel {
    let mut out = model.clone();
    let a = &mut out.agents_mut()[m.agent];
    match m.block {
        Block::Q => a.revenue.state_weight = a.revenue.state_weight.scaled(m.factor),
        Block::R => a.revenue.control_weight = a.revenue.control_weight.as_ref().map(|r| r.scaled(m.factor)),
        Block::A => a.drift = a.drift.scaled(m.factor),
        Block::B => a.input = a.input.scaled(m.factor),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::b1;

    fn shipped(name: &str) -> String {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        std::fs::read_to_string(path).unwrap()
    }

    #[test]
    fn shipped_b1_matches_builtin_instance() {
        let cfg = ScenarioConfig::from_json(&shipped("B1.json")).unwrap();
        assert_eq!(cfg.model, b1());
        assert_eq!(cfg.case, Case::A);
        assert_eq!(cfg.config_hash.len(), 64);
    }

    #[test]
    fn sum_form_config_is_case_b() {
        let cfg = ScenarioConfig::from_json(&shipped("B1-sum.json")).unwrap();
        assert_eq!(cfg.case, Case::B);
        assert_eq!(cfg.utility_revenue, UtilityRevenue::Sum);
        assert!(cfg.floors.iter().all(|k| *k == 0.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = shipped("B1.json").replacen("\"time_grid\"", "\"bogus\": 1, \"time_grid\"", 1);
        let err = ScenarioConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn dimension_errors_name_the_block() {
        let text = shipped("B1.json").replacen("\"B\": [[1.0]]", "\"B\": [[1.0], [2.0]]", 1);
        let err = ScenarioConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("B (agent 0)"), "{err}");
    }

    #[test]
    fn sampled_coefficients_parse() {
        let text = shipped("B1.json").replacen(
            "\"A00\": [[-0.2]]",
            "\"A00\": {\"samples\": [[0.0, [[-0.2]]], [1.0, [[-0.4]]]]}",
            1,
        );
        let cfg = ScenarioConfig::from_json(&text).unwrap();
        assert!((cfg.model.utility().drift.eval(0.5)[(0, 0)] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn misreport_scales_one_block() {
        let m = b1();
        let d = apply_misreport(&m, &Misreport { agent: 0, block: Block::Q, factor: 2.0 });
        assert_eq!(d.agent(0).revenue.state_weight.eval(0.0)[(0, 0)], 1.0);
        assert_eq!(d.agent(1), m.agent(1));
        let same = apply_misreport(&m, &Misreport { agent: 0, block: Block::R, factor: 1.0 });
        assert_eq!(same, m);
    }
}
