//! One MPC step and the closed-loop simulator.
//!
//! Each step forecasts the signal over the horizon, ranks the modules,
//! fixes the activations from the lookup table and solves the resulting
//! QCP. The first-interval allocation is then rescaled to the realized
//! demand, converted to currents through the module model and applied.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{MarketConfig, ScenarioConfig};
use crate::error::{Error, Result};
use crate::formulation::{
    activations_from_matrix, build_realtime_problem, demand_of, fix_activations, CostBreakdown, Prices,
};
use crate::model::{
    current_for_module_power, current_limit, module_efficiency, module_power_balance, module_power_range, step_soc,
    Direction, ModuleSpec, ModuleState,
};
use crate::aging::aging_subgradient;
use crate::signal::{Predictor, PredictorConfig, RegDSeries};
use crate::solver::{solve_qcp, SolverConfig};

use super::baseline::{baseline_capacity, baseline_maxpower, Dispatch};
use super::lookup::LookupTable;
use super::metrics::{compute_metrics, RunReport};
use super::priority::{efficiency_estimates, score_modules, select_activations, PriorityConfig};
use super::Method;

/// Per-module outcome of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleRecord {
    /// External power, kW.
    pub p_mod: f64,
    /// Internal power, kW.
    pub p_bat: f64,
    pub i_bat: f64,
    /// Conduction plus switching loss, W.
    pub loss_w: f64,
    pub soc_prev: f64,
    pub soc: f64,
    pub alpha: bool,
    /// Marginal aging cost of the interval, $/kW.
    pub aging_subgrad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub r_actual: f64,
    pub r_pred: f64,
    /// Forecast over the horizon made before this step.
    pub forecast: Vec<f64>,
    pub direction: Direction,
    /// Realized demand magnitude, kW.
    pub demand_kw: f64,
    pub p_mbss_kw: f64,
    pub shortfall_kw: f64,
    pub penalty_cost: f64,
    pub loss_kwh: f64,
    pub throughput_kwh: f64,
    /// Dispatch-weighted fleet efficiency; zero when nothing is dispatched.
    pub eff_bess: f64,
    /// Mean absolute SoC deviation after the step.
    pub d_soc: f64,
    /// Objective of the horizon solve and its decomposition.
    pub objective: Option<f64>,
    pub breakdown: Option<CostBreakdown>,
    pub solver_calls: usize,
    pub solve_time: f64,
    pub step_time: f64,
    /// The plan was recomputed against the realized signal.
    pub replanned: bool,
    /// The optimizer failed and the capacity baseline was used.
    pub fallback: bool,
    pub modules: Vec<ModuleRecord>,
}

/// Read-only inputs shared by every step of a run.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub specs: &'a [ModuleSpec],
    pub method: Method,
    pub market: &'a MarketConfig,
    pub priority: &'a PriorityConfig,
    pub solver: &'a SolverConfig,
    pub lookup: Option<&'a LookupTable>,
}

impl RunContext<'_> {
    fn prices(&self) -> Prices {
        let mut p = self.market.prices;
        if self.method == Method::EfficiencyAware {
            p.pi_deg = 0.0;
        }
        p
    }
}

/// Mean absolute deviation of module SoCs from their average.
pub(crate) fn soc_deviation(socs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = socs.clone().count();
    if n == 0 {
        return 0.0;
    }
    let avg = socs.clone().sum::<f64>() / n as f64;
    socs.map(|s| (s - avg).abs()).sum::<f64>() / n as f64
}

fn eligible(spec: &ModuleSpec, state: &ModuleState, dt: f64, direction: Direction) -> bool {
    current_limit(spec, state.soc, dt, direction) > 1e-9 && module_power_range(spec, state.soc, dt, direction).1 > 0.0
}

struct Plan {
    /// First-interval external power per module, kW.
    p_mod: Vec<f64>,
    /// Module ranking of the first interval.
    ranking: Vec<usize>,
    direction: Direction,
    objective: f64,
    breakdown: CostBreakdown,
    solve_time: f64,
}

fn plan(ctx: &RunContext<'_>, states: &[ModuleState], r: &[f64]) -> Result<Plan> {
    let lookup = ctx
        .lookup
        .ok_or_else(|| Error::Validation(format!("method {} needs a lookup table", ctx.method)))?;
    let dt = ctx.market.dt;
    let n = ctx.specs.len();
    let mut rankings = Vec::with_capacity(r.len());
    for &rk in r {
        let (dir, demand) = demand_of(rk, ctx.market.c_bid);
        let count = lookup.count(rk).unwrap_or(n).max(1);
        let sets = efficiency_estimates(ctx.specs, states, demand / count as f64, dt);
        let ranking: Vec<usize> = score_modules(ctx.specs, states, &sets, dir, ctx.priority)
            .into_iter()
            .map(|s| s.index)
            .filter(|&m| eligible(&ctx.specs[m], &states[m], dt, dir))
            .collect();
        rankings.push(ranking);
    }
    let alpha = select_activations(lookup, &rankings, r, n);
    let problem = build_realtime_problem(ctx.specs, states, r, ctx.prices(), ctx.market.c_bid, dt)?;
    let fixed = fix_activations(&problem, &activations_from_matrix(&problem, &alpha))?;
    let sol = solve_qcp(&fixed, ctx.solver)?;
    if !sol.has_point() {
        return Err(Error::Solver(format!(
            "dispatch QCP returned {:?}{}",
            sol.status,
            sol.witness.map(|w| format!(": {w}")).unwrap_or_default()
        )));
    }
    Ok(Plan {
        p_mod: problem.vars.iter().map(|v| sol.values[v[0].p_mod].max(0.0)).collect(),
        ranking: rankings.swap_remove(0),
        direction: problem.directions[0],
        objective: sol.objective,
        breakdown: fixed.evaluate_objective(&sol.values),
        solve_time: sol.solve_time,
    })
}

/// Proportionally rescale `shape` so that the active modules deliver
/// `demand`, respecting each module's deliverable range. Modules are added
/// in ranking order while the active set cannot cover the demand and
/// dropped from the bottom while their minimum draw exceeds it.
fn rescale(
    ctx: &RunContext<'_>,
    states: &[ModuleState],
    shape: &[f64],
    ranking: &[usize],
    demand: f64,
    direction: Direction,
) -> Vec<f64> {
    let n = ctx.specs.len();
    let dt = ctx.market.dt;
    let range: Vec<(f64, f64)> = (0..n)
        .map(|m| module_power_range(&ctx.specs[m], states[m].soc, dt, direction))
        .collect();
    let mut weight = vec![0.0; n];
    let mut active: Vec<usize> = Vec::new();
    for &m in ranking {
        if shape[m] > 1e-9 {
            weight[m] = shape[m];
            active.push(m);
        }
    }
    for m in 0..n {
        if shape[m] > 1e-9 && !active.contains(&m) && eligible(&ctx.specs[m], &states[m], dt, direction) {
            weight[m] = shape[m];
            active.push(m);
        }
    }
    let spare_list: Vec<usize> = ranking.iter().copied().filter(|m| !active.contains(m)).collect();
    let mut spare = spare_list.into_iter();
    while active.iter().map(|&m| range[m].1).sum::<f64>() < demand {
        match spare.next() {
            Some(m) => {
                weight[m] = range[m].1;
                active.push(m);
            }
            None => break,
        }
    }
    while !active.is_empty() && active.iter().map(|&m| range[m].0).sum::<f64>() > demand {
        active.pop();
    }
    let mut out = vec![0.0; n];
    if active.is_empty() || demand <= 0.0 {
        return out;
    }
    let fill = |lambda: f64| -> f64 {
        active.iter().map(|&m| (lambda * weight[m]).clamp(range[m].0, range[m].1)).sum()
    };
    let mut hi = active
        .iter()
        .map(|&m| range[m].1 / weight[m].max(1e-12))
        .fold(0.0, f64::max);
    let mut lo = 0.0;
    if fill(hi) <= demand {
        lo = hi;
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if fill(mid) <= demand {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    for &m in &active {
        out[m] = (lo * weight[m]).clamp(range[m].0, range[m].1);
    }
    out
}

/// Apply external power targets through the module model: invert to
/// currents, advance SoC and record aging subgradients.
fn apply(
    specs: &[ModuleSpec],
    states: &mut [ModuleState],
    targets: &[f64],
    direction: Direction,
    dt: f64,
) -> Result<Vec<ModuleRecord>> {
    let mut out = Vec::with_capacity(specs.len());
    for ((spec, state), &target) in specs.iter().zip(states.iter_mut()).zip(targets) {
        let soc_prev = state.soc;
        let active = target > 0.0;
        let i_bat = if active {
            let (lo, hi) = module_power_range(spec, soc_prev, dt, direction);
            let p = target.clamp(lo, hi);
            let cap = current_limit(spec, soc_prev, dt, direction);
            current_for_module_power(spec, soc_prev, p, direction)
                .or_else(|| current_for_module_power(spec, soc_prev, p * (1.0 - 1e-12), direction))
                .unwrap_or(cap)
                .min(cap)
        } else {
            0.0
        };
        let pb = module_power_balance(spec, i_bat, soc_prev, direction, active)?;
        let soc = step_soc(state, spec, pb.p_bat, dt, direction)?
            .clamp(spec.pack.soc_min, spec.pack.soc_max);
        let mut subgrad = 0.0;
        if pb.p_bat > 0.0 {
            let fresh = state.tracker.observe(direction, soc_prev);
            subgrad = aging_subgradient(&state.tracker, soc_prev, &spec.aging, dt, fresh);
        }
        state.soc = soc;
        state.active = active;
        state.direction = direction;
        out.push(ModuleRecord {
            p_mod: pb.p_mod,
            p_bat: pb.p_bat,
            i_bat,
            loss_w: pb.conduction_w + pb.switching.total,
            soc_prev,
            soc,
            alpha: active,
            aging_subgrad: subgrad,
        });
    }
    Ok(out)
}

/// Run one closed-loop step at index `t` with realized signal `r_actual`.
/// `history` holds the realized signal before `t`.
pub fn mpc_step(
    ctx: &RunContext<'_>,
    states: &mut [ModuleState],
    predictor: &mut Predictor,
    history: &[f64],
    r_actual: f64,
    t: usize,
) -> Result<StepRecord> {
    let started = Instant::now();
    let dt = ctx.market.dt;
    let forecast: Vec<f64> = predictor
        .forecast(history, ctx.market.horizon)
        .into_iter()
        .map(|x| x.clamp(-1.0, 1.0))
        .collect();
    let (direction, demand) = demand_of(r_actual, ctx.market.c_bid);
    for st in states.iter_mut() {
        st.tracker.refresh_taylor_point(st.soc);
    }

    let mut objective = None;
    let mut breakdown = None;
    let mut solver_calls = 0;
    let mut solve_time = 0.0;
    let mut replanned = false;
    let mut fallback = false;

    let targets = if demand <= 0.0 {
        vec![0.0; ctx.specs.len()]
    } else if ctx.method.uses_solver() {
        let mut attempt = plan(ctx, states, &forecast);
        solver_calls += 1;
        let usable = matches!(&attempt, Ok(p) if p.direction == direction && p.p_mod.iter().sum::<f64>() > 0.0);
        if !usable {
            if let Ok(p) = &attempt {
                solve_time += p.solve_time;
            }
            replanned = true;
            solver_calls += 1;
            attempt = plan(ctx, states, &[r_actual]);
        }
        match attempt {
            Ok(p) => {
                solve_time += p.solve_time;
                objective = Some(p.objective);
                breakdown = Some(p.breakdown);
                rescale(ctx, states, &p.p_mod, &p.ranking, demand, direction)
            }
            Err(_) => {
                fallback = true;
                baseline_capacity(ctx.specs, states, demand, direction, dt).p_mod
            }
        }
    } else {
        let d: Dispatch = match ctx.method {
            Method::Maxpower => baseline_maxpower(ctx.specs, states, demand, direction, dt),
            _ => baseline_capacity(ctx.specs, states, demand, direction, dt),
        };
        d.p_mod
    };

    let modules = apply(ctx.specs, states, &targets, direction, dt)?;
    let p_mbss: f64 = modules.iter().map(|m| m.p_mod).sum();
    let dt_h = dt / 3600.0;
    let mut eff_bess = 0.0;
    if p_mbss > 0.0 {
        for m in modules.iter().filter(|m| m.p_mod > 0.0) {
            eff_bess += module_efficiency(m.p_mod, m.p_bat, direction).unwrap_or(0.0) * m.p_mod / p_mbss;
        }
    }
    let shortfall = (demand - p_mbss).abs();
    Ok(StepRecord {
        t,
        r_actual,
        r_pred: forecast.first().copied().unwrap_or(0.0),
        forecast,
        direction,
        demand_kw: demand,
        p_mbss_kw: p_mbss,
        shortfall_kw: shortfall,
        penalty_cost: ctx.market.prices.pi_reg * dt_h * shortfall,
        loss_kwh: modules.iter().map(|m| m.loss_w / 1000.0).sum::<f64>() * dt_h,
        throughput_kwh: p_mbss * dt_h,
        eff_bess,
        d_soc: soc_deviation(states.iter().map(|s| s.soc)),
        objective,
        breakdown,
        solver_calls,
        solve_time,
        step_time: started.elapsed().as_secs_f64(),
        replanned,
        fallback,
        modules,
    })
}

/// Closed-loop simulation of one method over a signal trace.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub specs: Vec<ModuleSpec>,
    pub states: Vec<ModuleState>,
    pub initial_socs: Vec<f64>,
    pub method: Method,
    pub market: MarketConfig,
    pub priority: PriorityConfig,
    pub solver: SolverConfig,
    pub lookup: Option<LookupTable>,
    predictor: Predictor,
    history: Vec<f64>,
    pub records: Vec<StepRecord>,
}

impl Simulator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        specs: Vec<ModuleSpec>,
        states: Vec<ModuleState>,
        method: Method,
        market: MarketConfig,
        priority: PriorityConfig,
        solver: SolverConfig,
        predictor: PredictorConfig,
        lookup: Option<LookupTable>,
    ) -> Result<Self> {
        if specs.len() != states.len() {
            return Err(Error::Validation(format!("{} specs but {} states", specs.len(), states.len())));
        }
        if method.uses_solver() && lookup.is_none() {
            return Err(Error::Validation(format!("method {method} needs a lookup table")));
        }
        Ok(Self {
            initial_socs: states.iter().map(|s| s.soc).collect(),
            specs,
            states,
            method,
            market,
            priority,
            solver,
            lookup,
            predictor: Predictor::new(predictor),
            history: Vec::new(),
            records: Vec::new(),
        })
    }

    /// Simulator for `method` built from a scenario.
    pub fn from_scenario(cfg: &ScenarioConfig, method: Method, lookup: Option<LookupTable>) -> Result<Self> {
        Self::new(
            cfg.build_fleet()?,
            cfg.initial_states(),
            method,
            cfg.market.clone(),
            cfg.priority.clone(),
            cfg.solver.clone(),
            cfg.predictor.clone(),
            lookup,
        )
    }

    /// Advance one interval with the realized signal value.
    pub fn step(&mut self, r_actual: f64) -> Result<&StepRecord> {
        if !(-1.0..=1.0).contains(&r_actual) {
            return Err(Error::Domain(format!("signal value {r_actual} outside [-1, 1]")));
        }
        let ctx = RunContext {
            specs: &self.specs,
            method: self.method,
            market: &self.market,
            priority: &self.priority,
            solver: &self.solver,
            lookup: self.lookup.as_ref(),
        };
        let t = self.history.len();
        let rec = mpc_step(&ctx, &mut self.states, &mut self.predictor, &self.history, r_actual, t)?;
        self.history.push(r_actual);
        self.records.push(rec);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn run(&mut self, signal: &[f64]) -> Result<()> {
        for &r in signal {
            self.step(r)?;
        }
        Ok(())
    }

    /// Metrics of the steps taken so far.
    pub fn report(&self) -> Result<RunReport> {
        compute_metrics(self.method, &self.records, &self.specs, &self.states, &self.initial_socs)
    }
}

/// Run `method` over `signal` from the scenario's initial state.
pub fn simulate(
    cfg: &ScenarioConfig,
    method: Method,
    signal: &RegDSeries,
    lookup: Option<&LookupTable>,
) -> Result<RunReport> {
    cfg.check_signal(signal)?;
    let lookup = if method.uses_solver() { lookup.cloned() } else { None };
    let mut sim = Simulator::from_scenario(cfg, method, lookup)?;
    sim.run(&signal.values)?;
    sim.report()
}
