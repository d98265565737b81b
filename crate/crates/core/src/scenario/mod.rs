//! End-to-end runs: the three market cases, the auction sequence, and the
//! artifacts they emit.
//!
//! Every run writes its CSV files first and `manifest.json` last. File
//! contents depend only on the configuration and the seed.

mod auction;
mod cases;
mod output;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Case, ScenarioConfig};
use crate::error::Result;
use crate::hjb::{SpatialDomain, PILOT_PATHS, PILOT_SEED};
use crate::market::{PriceField, ProbeLattice};
use crate::model::{validate_model, GridModel};
use crate::response::{best_response_policy, NashPolicy, Policy};
use crate::sim::{simulate, NoiseBundle, PathBundle, GENERATOR_ID};

pub use auction::{run_auction, AuctionLog, LogEntry, Stage};
pub use cases::{
    clearing_deviation_max, deviation_overrides, run_case_a, run_case_b, run_case_c, run_deviation_test, run_simulate,
    run_solve, CentralizedPolicy,
};
pub use output::OutputSink;

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The measured quantity the verdict is based on.
    pub value: f64,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, value: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Summary of a run. Written last, listing every other emitted file.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub case: Case,
    pub config_sha256: String,
    pub backend: String,
    pub seed: u64,
    pub n_paths: usize,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub generator: String,
    pub noise_fingerprint: String,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub files: Vec<FileEntry>,
    pub passed: bool,
}

impl RunManifest {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// State shared by the stages of one run.
pub(crate) struct Run<'a> {
    pub cfg: &'a ScenarioConfig,
    pub model: Arc<GridModel>,
    pub noise: Arc<NoiseBundle>,
    pub sink: OutputSink,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub backend: String,
    command: String,
    started: Instant,
}

impl<'a> Run<'a> {
    pub fn start(command: &str, cfg: &'a ScenarioConfig, out: Option<&Path>) -> Result<Self> {
        let started = Instant::now();
        validate_model(&cfg.model).into_result()?;
        let model = Arc::new(cfg.model.clone());
        let noise = Arc::new(NoiseBundle::generate(cfg.seed, cfg.n_paths, cfg.sim_grid()?, model.noise_dim()));
        log::info!("{command}: {} paths x {} steps", cfg.n_paths, noise.grid().n_steps());
        Ok(Self {
            cfg,
            model,
            noise,
            sink: OutputSink::new(out.map(PathBuf::from))?,
            checks: Vec::new(),
            notes: Vec::new(),
            backend: "none".into(),
            command: command.into(),
            started,
        })
    }

    pub fn check(&mut self, check: Check) {
        log::info!(
            "[{}] {}: {} ({})",
            if check.passed { "pass" } else { "FAIL" },
            check.name,
            check.value,
            check.detail
        );
        self.checks.push(check);
    }

    pub fn stage(&self, what: &str) {
        log::info!("{what} at {:.2} s", self.started.elapsed().as_secs_f64());
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.cfg.x0
    }

    /// Nash bundle for the price field `h` on the run's noise.
    pub fn nash_bundle(&self, model: &GridModel, h: &Arc<dyn PriceField>) -> Result<PathBundle> {
        let pols = nash_policies(model.n_agents(), h);
        let refs: Vec<&dyn Policy> = pols.iter().map(|p| p as &dyn Policy).collect();
        simulate(model, &refs, &self.noise, self.x0())
    }

    /// Spatial box for probe lattices: three pilot standard deviations.
    pub fn probe_domain(&self) -> Result<SpatialDomain> {
        SpatialDomain::from_pilot(&self.model, self.x0(), PILOT_PATHS, PILOT_SEED, 3.0)
    }

    pub fn finish(self) -> Result<RunManifest> {
        let cfg = self.cfg;
        let mut manifest = RunManifest {
            command: self.command,
            case: cfg.case,
            config_sha256: cfg.config_hash.clone(),
            backend: self.backend,
            seed: cfg.seed,
            n_paths: cfg.n_paths,
            dt: cfg.dt,
            x0: cfg.x0.iter().copied().collect(),
            generator: GENERATOR_ID.into(),
            noise_fingerprint: self.noise.fingerprint(),
            passed: self.checks.iter().all(|c| c.passed),
            checks: self.checks,
            notes: self.notes,
            files: Vec::new(),
        };
        self.sink.finish(&mut manifest)?;
        log::info!("finished in {:.2} s", self.started.elapsed().as_secs_f64());
        Ok(manifest)
    }
}

pub(crate) fn nash_policies(n_agents: usize, h: &Arc<dyn PriceField>) -> Vec<NashPolicy> {
    (0..n_agents).map(|i| best_response_policy(i, Arc::clone(h))).collect()
}

/// `n` points with `t` uniform on the horizon and `x` uniform in `domain`.
pub fn domain_samples(model: &GridModel, domain: &SpatialDomain, n: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = model.time_grid();
    (0..n)
        .map(|_| {
            let t = rng.gen_range(g.t0()..=g.tf());
            let x = domain
                .lower
                .iter()
                .zip(&domain.upper)
                .map(|(&a, &b)| rng.gen_range(a..=b))
                .collect();
            (t, x)
        })
        .collect()
}

/// Probe lattice with 8 times and 5 points per axis: `10³` points for a
/// three-dimensional state.
pub fn policy_lattice(model: &GridModel, domain: &SpatialDomain) -> ProbeLattice {
    ProbeLattice::new(model.time_grid(), domain, 8, 5)
}
