//! The auction as an explicit sequence between a utility desk and the agents.
//!
//! The desk only ever receives registered models and bid states. Agents turn
//! published price rows into controls with their own models, and the grid
//! moves. Every exchange is logged with the data the acting side read.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use super::output::{Csv, Field};
use super::{nash_policies, Check, Run, RunManifest};
use crate::config::ScenarioConfig;
use crate::error::Result;
use crate::hjb::{shadow_price, solve_principal};
use crate::market::{reward_increments, settle, PriceField, ProfitFloor, Scratch};
use crate::model::{terminal_value, AgentSpec, GridModel, UtilitySpec};
use crate::response::{respond, Policy};
use crate::sim::{simulate, PathBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Announcement,
    Registration,
    Pricing,
    Bid,
    Price,
    Control,
    Accrual,
    Settlement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Utility,
    Agents,
}

#[derive(Debug, Clone, Serialize)]
pub struct LogEntry {
    pub step: Option<usize>,
    pub t: f64,
    pub stage: Stage,
    pub actor: Actor,
    /// Data the acting side consumed.
    pub reads: Vec<&'static str>,
    pub summary: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AuctionLog {
    pub entries: Vec<LogEntry>,
}

impl AuctionLog {
    fn push(&mut self, step: Option<usize>, t: f64, stage: Stage, actor: Actor, reads: &[&'static str], summary: String) {
        self.entries.push(LogEntry {
            step,
            t,
            stage,
            actor,
            reads: reads.to_vec(),
            summary,
        });
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.entries.iter().filter(|e| e.stage == stage).count()
    }

    /// Utility-side entries that consumed control values.
    pub fn utility_control_reads(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.actor == Actor::Utility && e.reads.iter().any(|r| r.contains("control")))
            .count()
    }

    fn to_csv(&self) -> Vec<u8> {
        let mut csv = Csv::new(&["step", "t", "stage", "actor", "reads", "summary"]);
        for e in &self.entries {
            let step = e.step.map(|s| s.to_string()).unwrap_or_default();
            let stage = serde_json::to_value(e.stage).expect("unit enum");
            let actor = serde_json::to_value(e.actor).expect("unit enum");
            csv.row(&[
                Field::Text(&step),
                Field::Num(e.t),
                Field::Text(stage.as_str().unwrap_or_default()),
                Field::Text(actor.as_str().unwrap_or_default()),
                Field::Text(&e.reads.join(";")),
                Field::Text(&e.summary),
            ]);
        }
        csv.into_bytes()
    }
}

/// Utility side: holds registered models and the announced price; settles
/// rewards from bid states.
struct UtilityDesk {
    registered: GridModel,
    backend: &'static str,
    price: Arc<dyn PriceField>,
    rewards: Vec<Vec<f64>>,
    scratch: Scratch,
    increments: Vec<f64>,
}

impl UtilityDesk {
    fn open(utility: UtilitySpec, registrations: Vec<AgentSpec>, cfg: &ScenarioConfig) -> Result<Self> {
        let registered = GridModel::new(*cfg.model.time_grid(), utility, registrations)?;
        let v = solve_principal(&registered, &cfg.x0, cfg.solver)?;
        let backend = v.backend();
        let price: Arc<dyn PriceField> = Arc::new(shadow_price(Arc::new(v), ProfitFloor::constants(&cfg.floors)));
        let scratch = Scratch::new(&registered.slice(cfg.model.time_grid().t0()));
        let n_agents = registered.n_agents();
        Ok(Self {
            registered,
            backend,
            price,
            rewards: vec![vec![0.0; cfg.n_paths]; n_agents],
            scratch,
            increments: vec![0.0; n_agents],
        })
    }

    /// Assured levels at the opening bids.
    fn open_accounts(&mut self, t: f64, bids: &[f64], n: usize) {
        let at = self.price.at(t);
        for (p, x) in bids.chunks(n).enumerate() {
            for (i, acc) in self.rewards.iter_mut().enumerate() {
                acc[p] = at.level(i, x);
            }
        }
    }

    /// Price rows at every bid, laid out `[path][agent][state]`.
    fn publish(&self, t: f64, bids: &[f64], n: usize) -> Vec<f64> {
        let at = self.price.at(t);
        let n_agents = self.registered.n_agents();
        let mut rows = vec![0.0; bids.len() * n_agents];
        for (p, x) in bids.chunks(n).enumerate() {
            for i in 0..n_agents {
                let base = (p * n_agents + i) * n;
                at.row_into(i, x, &mut rows[base..base + n]);
            }
        }
        rows
    }

    /// Reward increments over one step from consecutive bids.
    fn accrue(&mut self, t: f64, dt: f64, bids: &[f64], next_bids: &[f64], n: usize) -> Result<()> {
        let slice = self.registered.slice(t);
        let at = self.price.at(t);
        for (p, (x, xn)) in bids.chunks(n).zip(next_bids.chunks(n)).enumerate() {
            reward_increments(&slice, at.as_ref(), x, xn, dt, &mut self.scratch, &mut self.increments)?;
            for (acc, inc) in self.rewards.iter_mut().zip(&self.increments) {
                acc[p] += inc;
            }
        }
        Ok(())
    }

    /// Subtracts each agent's registered terminal revenue at the final bids.
    fn close(&mut self, bids: &[f64], n: usize) {
        let layout = self.registered.layout().clone();
        for (p, x) in bids.chunks(n).enumerate() {
            for (i, acc) in self.rewards.iter_mut().enumerate() {
                let rev = &self.registered.agent(i).revenue;
                acc[p] -= terminal_value(&rev.terminal_weight, &rev.terminal_linear, &x[layout.agent_block(i)]);
            }
        }
    }
}

/// Runs the announcement, registration, per-step bid/price/control rounds
/// and settlement, and audits the information flow.
pub fn run_auction(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<RunManifest> {
    let mut run = Run::start("auction", cfg, out)?;
    let model = Arc::clone(&run.model);
    let noise = Arc::clone(&run.noise);
    let grid = *noise.grid();
    let (n, m, np) = (model.state_dim(), model.control_dim(), cfg.n_paths);
    let mut log = AuctionLog::default();

    log.push(
        None,
        grid.t0(),
        Stage::Announcement,
        Actor::Utility,
        &["configuration"],
        format!(
            "horizon [{}, {}], {} steps, case {:?}, floors {:?}",
            grid.t0(),
            grid.tf(),
            grid.n_steps(),
            cfg.case,
            cfg.floors
        ),
    );
    let registrations: Vec<AgentSpec> = model.agents().to_vec();
    log.push(
        None,
        grid.t0(),
        Stage::Registration,
        Actor::Agents,
        &["own_model"],
        format!("{} agents register their models", registrations.len()),
    );
    let mut desk = UtilityDesk::open(model.utility().clone(), registrations, cfg)?;
    run.backend = desk.backend.into();
    log.push(
        None,
        grid.t0(),
        Stage::Pricing,
        Actor::Utility,
        &["registered_models"],
        format!("price field computed with the {} backend", run.backend),
    );

    let mut states = vec![0.0; grid.n_nodes() * np * n];
    let mut controls = vec![0.0; grid.n_steps() * np * m];
    for p in 0..np {
        states[p * n..(p + 1) * n].copy_from_slice(cfg.x0.as_slice());
    }
    desk.open_accounts(grid.t0(), &states[..np * n], n);
    let dt = grid.dt();
    let n_agents = model.n_agents();
    let mut drift = vec![0.0; n];
    let mut shock = vec![0.0; n];
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let (head, tail) = states.split_at_mut((k + 1) * np * n);
        let bids = &head[k * np * n..];
        log.push(Some(k), t, Stage::Bid, Actor::Agents, &["own_state"], format!("{np} state bids"));

        let rows = desk.publish(t, bids, n);
        log.push(
            Some(k),
            t,
            Stage::Price,
            Actor::Utility,
            &["registered_models", "bid_states"],
            format!("{} price rows", np * n_agents),
        );

        let slice = model.slice(t);
        let next = &mut tail[..np * n];
        for p in 0..np {
            let x = &bids[p * n..(p + 1) * n];
            let u = &mut controls[(k * np + p) * m..(k * np + p + 1) * m];
            for a in &slice.agents {
                let row = &rows[(p * n_agents + a.index) * n..(p * n_agents + a.index + 1) * n];
                let ui = &mut u[a.control_block.clone()];
                respond(a, &row[a.state_block.clone()], ui)?;
                a.control_set.project(ui);
            }
            slice.drift_into(x, u, &mut drift);
            slice.diffusion_into(noise.increment(k, p), &mut shock);
            for c in 0..n {
                next[p * n + c] = x[c] + drift[c] * dt + shock[c];
            }
        }
        log.push(
            Some(k),
            t,
            Stage::Control,
            Actor::Agents,
            &["price_rows", "own_model", "own_state"],
            format!("{np} control decisions"),
        );

        desk.accrue(t, dt, bids, next, n)?;
        log.push(
            Some(k),
            t,
            Stage::Accrual,
            Actor::Utility,
            &["registered_models", "bid_states"],
            "reward increments from consecutive bids".into(),
        );
    }
    desk.close(&states[grid.n_steps() * np * n..], n);
    log.push(
        Some(grid.n_steps()),
        grid.tf(),
        Stage::Settlement,
        Actor::Utility,
        &["registered_models", "bid_states"],
        "terminal settlement".into(),
    );

    let reads = log.utility_control_reads();
    run.check(Check::new(
        "information_audit",
        reads == 0,
        reads as f64,
        "utility-side log entries that read control values",
    ));
    let per_step = [Stage::Bid, Stage::Price, Stage::Control, Stage::Accrual].map(|s| log.count(s));
    run.check(Check::new(
        "log_per_step",
        per_step.iter().all(|&c| c == grid.n_steps()),
        per_step.iter().copied().min().unwrap_or(0) as f64,
        format!("entries per round stage {per_step:?} for {} steps", grid.n_steps()),
    ));

    let policies = nash_policies(n_agents, &desk.price).iter().map(|p| p.label()).collect();
    let bundle = PathBundle::from_parts(grid, np, n, m, states, controls, policies, Arc::clone(&noise));
    let pols = nash_policies(n_agents, &desk.price);
    let refs: Vec<&dyn Policy> = pols.iter().map(|p| p as &dyn Policy).collect();
    let reference = simulate(&model, &refs, &noise, &cfg.x0)?;
    let same_paths = reference.fingerprint() == bundle.fingerprint();
    run.check(Check::new(
        "paths_match_simulation",
        same_paths,
        if same_paths { 0.0 } else { 1.0 },
        "auction paths equal the Nash simulation bit for bit",
    ));

    let s = settle(desk.price.as_ref(), &bundle, &model)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let desk_total: f64 = desk.rewards.iter().map(|r| mean(r)).sum();
    let market_total: f64 = s.rewards.iter().map(|r| mean(r)).sum();
    let gap = (desk_total - market_total).abs();
    run.check(Check::new(
        "settlement_total",
        gap <= 1e-12,
        gap,
        format!("desk total {desk_total:.12e} vs settled sum of E[W_i] {market_total:.12e}"),
    ));

    let mut pcsv = Csv::new(&["agent", "mean_reward", "mean_revenue", "mean_profit"]);
    for i in 0..n_agents {
        pcsv.row(&[
            Field::Int(i),
            Field::Num(mean(&desk.rewards[i])),
            Field::Num(mean(&s.agent_revenue[i])),
            Field::Num(mean(&s.profit_samples(i))),
        ]);
    }
    run.sink.write("auction_log.csv", &log.to_csv())?;
    run.sink.write("profits.csv", &pcsv.into_bytes())?;
    run.finish()
}
