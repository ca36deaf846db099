//! Solver-neutral optimization instances for module dispatch.
//!
//! An instance is a list of bounded variables, linear rows, convex
//! single-square quadratic rows and a linear objective whose terms are
//! tagged by cost category. Powers are in kW, currents in A, costs in $.
//!
//! The charge/discharge command `u` of every step is data (taken from the
//! sign of the regulation signal), so the only binaries are the module
//! activations. Open-circuit voltage is frozen at the horizon start SoC,
//! which makes the current/power relation linear.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aging::{omega_second, CycleTracker};
use crate::error::{Error, Result};
use crate::model::{validate_fleet, Direction, ModuleSpec, ModuleState};

/// Cost weights of the dispatch objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    /// $/kWh of conversion loss.
    pub pi_loss: f64,
    /// $/kWh of regulation shortfall.
    pub pi_reg: f64,
    /// Weight of the aging term.
    pub pi_deg: f64,
}

impl Default for Prices {
    fn default() -> Self {
        Self { pi_loss: 0.05, pi_reg: 10.0, pi_deg: 1.0 }
    }
}

impl Prices {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pi_loss", self.pi_loss), ("pi_reg", self.pi_reg), ("pi_deg", self.pi_deg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub lb: f64,
    pub ub: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Le,
    Eq,
}

/// `Σ a_j x_j (<= | =) rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
    pub label: String,
}

/// `coef · x² + Σ a_j x_j <= rhs` with `coef >= 0`.
///
/// `gate` names a binary that must be 1 whenever `x != 0`; solvers may use
/// it to strengthen relaxations. The row itself is valid regardless of the
/// gate value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadRow {
    pub var: usize,
    pub coef: f64,
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
    pub gate: Option<usize>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostCategory {
    Loss,
    Penalty,
    Aging,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerm {
    pub var: usize,
    pub coef: f64,
    pub category: CostCategory,
}

/// Cost split by category, in $.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub loss: f64,
    pub penalty: f64,
    pub aging: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.loss + self.penalty + self.aging
    }

    fn add(&mut self, category: CostCategory, v: f64) {
        match category {
            CostCategory::Loss => self.loss += v,
            CostCategory::Penalty => self.penalty += v,
            CostCategory::Aging => self.aging += v,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub terms: Vec<ObjectiveTerm>,
    pub constants: CostBreakdown,
}

/// A big-M constant together with the physical bound it must dominate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigM {
    pub label: String,
    pub m: f64,
    pub physical_bound: f64,
}

/// Variable ids of one module at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleStepVars {
    pub alpha: usize,
    pub i_bat: usize,
    pub p_bat: usize,
    pub p_mod: usize,
    pub p_con_pos: usize,
    pub p_con_neg: usize,
    pub p_sw_pos: usize,
    pub p_sw_neg: usize,
    pub soc: usize,
    pub omega: usize,
}

/// A run of steps with constant predicted direction for one module, over
/// which the aging cost is integrated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgingSegment {
    pub module: usize,
    pub start: usize,
    pub end: usize,
    pub direction: Direction,
    /// Depth already accumulated when the segment starts.
    pub base: f64,
    /// Ω' slope at the expansion point.
    pub g1: f64,
    /// Ω'' curvature at the expansion point.
    pub g2: f64,
    /// π_deg · κ · E · π_bat.
    pub scale: f64,
    pub epigraph: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Realtime,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub kind: ProblemKind,
    pub dt: f64,
    pub horizon: usize,
    pub modules: Vec<String>,
    pub directions: Vec<Direction>,
    /// |P^RegD| per step, kW.
    pub demand: Vec<f64>,
    pub variables: Vec<Variable>,
    pub linear: Vec<LinearRow>,
    pub quadratic: Vec<QuadRow>,
    pub objective: Objective,
    pub big_m: Vec<BigM>,
    /// `vars[module][step]`.
    pub vars: Vec<Vec<ModuleStepVars>>,
    pub p_mbss: Vec<usize>,
    pub segments: Vec<AgingSegment>,
}

/// Activation assignment keyed by (module id, step).
pub type Activations = BTreeMap<(String, usize), bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub status: SolveStatus,
    pub values: Vec<f64>,
    pub objective: f64,
    /// Relative gap between incumbent and best bound.
    pub gap: f64,
    pub bound: f64,
    pub nodes: usize,
    pub solve_time: f64,
    /// Short description of why the instance is infeasible, when known.
    pub witness: Option<String>,
}

impl Solution {
    pub fn infeasible(witness: Option<String>) -> Self {
        Self {
            status: SolveStatus::Infeasible,
            values: Vec::new(),
            objective: f64::INFINITY,
            gap: f64::INFINITY,
            bound: f64::INFINITY,
            nodes: 0,
            solve_time: 0.0,
            witness,
        }
    }

    pub fn has_point(&self) -> bool {
        matches!(self.status, SolveStatus::Optimal | SolveStatus::Feasible)
            || (self.status == SolveStatus::TimeLimit && !self.values.is_empty())
    }
}

struct Builder {
    variables: Vec<Variable>,
    linear: Vec<LinearRow>,
    quadratic: Vec<QuadRow>,
    objective: Objective,
    big_m: Vec<BigM>,
}

impl Builder {
    fn var(&mut self, name: String, kind: VarKind, lb: f64, ub: f64) -> usize {
        self.variables.push(Variable { name, kind, lb, ub });
        self.variables.len() - 1
    }

    fn row(&mut self, terms: Vec<(usize, f64)>, sense: Sense, rhs: f64, label: String) {
        self.linear.push(LinearRow { terms, sense, rhs, label });
    }

    fn cost(&mut self, var: usize, coef: f64, category: CostCategory) {
        if coef != 0.0 {
            self.objective.terms.push(ObjectiveTerm { var, coef, category });
        }
    }

    fn big_m(&mut self, label: String, m: f64, physical_bound: f64) -> Result<()> {
        if physical_bound > m * (1.0 + 1e-12) {
            return Err(Error::Construction(format!(
                "big-M {label} = {m} below physical bound {physical_bound}"
            )));
        }
        self.big_m.push(BigM { label, m, physical_bound });
        Ok(())
    }
}

/// Direction and demand magnitude for a signal value.
pub fn demand_of(r: f64, c_bid: f64) -> (Direction, f64) {
    (Direction::from_signed(r), (c_bid * r).abs())
}

struct Horizon<'a> {
    specs: &'a [ModuleSpec],
    socs: &'a [f64],
    trackers: Option<&'a [CycleTracker]>,
    r: &'a [f64],
    prices: Prices,
    c_bid: f64,
    dt: f64,
    kind: ProblemKind,
}

fn build(h: Horizon<'_>) -> Result<ProblemInstance> {
    if h.specs.is_empty() {
        return Err(Error::Construction("fleet is empty".into()));
    }
    if h.r.is_empty() {
        return Err(Error::Construction("horizon must contain at least one step".into()));
    }
    validate_fleet(h.specs).map_err(|e| Error::Construction(e.to_string()))?;
    h.prices.validate()?;
    if !(h.c_bid > 0.0 && h.dt > 0.0) {
        return Err(Error::Construction("c_bid and dt must be > 0".into()));
    }
    for (m, (spec, &soc)) in h.specs.iter().zip(h.socs).enumerate() {
        let p = &spec.pack;
        if !(p.soc_min - 1e-9..=p.soc_max + 1e-9).contains(&soc) {
            return Err(Error::Construction(format!(
                "module {} (#{m}) soc {soc} outside [{}, {}]",
                spec.id, p.soc_min, p.soc_max
            )));
        }
    }
    for &r in h.r {
        if !(-1.0..=1.0).contains(&r) {
            return Err(Error::Domain(format!("signal value {r} outside [-1, 1]")));
        }
    }

    let horizon = h.r.len();
    let dt_h = h.dt / 3600.0;
    let (directions, demand): (Vec<_>, Vec<_>) = h.r.iter().map(|&r| demand_of(r, h.c_bid)).unzip();

    let mut b = Builder {
        variables: Vec::new(),
        linear: Vec::new(),
        quadratic: Vec::new(),
        objective: Objective::default(),
        big_m: Vec::new(),
    };

    let mut p_mbss = Vec::with_capacity(horizon);
    for (t, &d) in demand.iter().enumerate() {
        let v = b.var(format!("p_mbss[{t}]"), VarKind::Continuous, 0.0, d);
        p_mbss.push(v);
        // π_reg Δt (D - P_mbss)
        b.cost(v, -h.prices.pi_reg * dt_h, CostCategory::Penalty);
        b.objective.constants.penalty += h.prices.pi_reg * dt_h * d;
    }

    let mut vars = Vec::with_capacity(h.specs.len());
    for (m, spec) in h.specs.iter().enumerate() {
        let id = &spec.id;
        let pack = &spec.pack;
        let conv = &spec.converter;
        let soc0 = h.socs[m].clamp(pack.soc_min, pack.soc_max);
        let v_ocv = pack.k0 + pack.k1 * soc0;
        let r_sum = spec.resistance();
        let c0 = conv.fixed_switching_w();
        let k_sw = conv.switching_w_per_amp();
        let m_con = r_sum * pack.i_max * pack.i_max / 1000.0;
        let m_sw = (c0 + k_sw * pack.i_max) / 1000.0;
        let p_bat_max = v_ocv * pack.i_max / 1000.0;
        b.big_m(format!("con[{id}]"), m_con, r_sum * pack.i_max.powi(2) / 1000.0)?;
        b.big_m(format!("sw[{id}]"), m_sw, (c0 + k_sw * pack.i_max) / 1000.0)?;
        b.big_m(
            format!("soc[{id}]"),
            1.0,
            (pack.soc_max - pack.soc_min) + 2.0 * p_bat_max * dt_h / pack.energy_capacity,
        )?;
        let soc_gain = dt_h / pack.energy_capacity;

        let mut row_vars: Vec<ModuleStepVars> = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let u = directions[t].u();
            let tag = format!("{id},{t}");
            let alpha = b.var(format!("alpha[{tag}]"), VarKind::Binary, 0.0, 1.0);
            let i_bat = b.var(format!("i_bat[{tag}]"), VarKind::Continuous, 0.0, pack.i_max);
            let p_bat = b.var(format!("p_bat[{tag}]"), VarKind::Continuous, 0.0, p_bat_max);
            let p_mod = b.var(format!("p_mod[{tag}]"), VarKind::Continuous, 0.0, pack.p_max);
            let p_con_pos = b.var(format!("p_con_pos[{tag}]"), VarKind::Continuous, 0.0, u * m_con);
            let p_con_neg = b.var(format!("p_con_neg[{tag}]"), VarKind::Continuous, 0.0, (1.0 - u) * m_con);
            let p_sw_pos = b.var(format!("p_sw_pos[{tag}]"), VarKind::Continuous, 0.0, u * m_sw);
            let p_sw_neg = b.var(format!("p_sw_neg[{tag}]"), VarKind::Continuous, 0.0, (1.0 - u) * m_sw);
            let soc = b.var(format!("soc[{tag}]"), VarKind::Continuous, pack.soc_min, pack.soc_max);
            let omega = b.var(format!("omega[{tag}]"), VarKind::Continuous, 0.0, 1.0);

            // current window gated by activation
            b.row(vec![(i_bat, 1.0), (alpha, -pack.i_max)], Sense::Le, 0.0, format!("i_max[{tag}]"));
            if pack.i_min > 0.0 {
                b.row(vec![(alpha, pack.i_min), (i_bat, -1.0)], Sense::Le, 0.0, format!("i_min[{tag}]"));
            }
            // internal power at frozen OCV
            b.row(vec![(p_bat, 1.0), (i_bat, -v_ocv / 1000.0)], Sense::Eq, 0.0, format!("p_bat[{tag}]"));
            // conduction loss and its chord over [0, i_max]
            b.quadratic.push(QuadRow {
                var: i_bat,
                coef: r_sum / 1000.0,
                terms: vec![(p_con_pos, -1.0), (p_con_neg, -1.0)],
                rhs: 0.0,
                gate: Some(alpha),
                label: format!("conduction[{tag}]"),
            });
            b.row(
                vec![(p_con_pos, 1.0), (p_con_neg, 1.0), (i_bat, -r_sum * pack.i_max / 1000.0)],
                Sense::Le,
                0.0,
                format!("conduction_chord[{tag}]"),
            );
            // switching loss of an active module
            b.row(
                vec![(p_sw_pos, 1.0), (p_sw_neg, 1.0), (alpha, -c0 / 1000.0), (i_bat, -k_sw / 1000.0)],
                Sense::Eq,
                0.0,
                format!("switching[{tag}]"),
            );
            // module power balance
            b.row(
                vec![
                    (p_bat, 1.0),
                    (p_mod, -1.0),
                    (p_con_pos, -1.0),
                    (p_con_neg, 1.0),
                    (p_sw_pos, -1.0),
                    (p_sw_neg, 1.0),
                ],
                Sense::Eq,
                0.0,
                format!("balance[{tag}]"),
            );
            b.row(vec![(p_mod, 1.0), (alpha, -pack.p_max)], Sense::Le, 0.0, format!("p_max[{tag}]"));

            // SoC transition as two gated equality pairs (M = 1)
            let prev = if t == 0 { None } else { Some(row_vars[t - 1].soc) };
            let mut delta = vec![(soc, 1.0)];
            let mut prev_const = 0.0;
            match prev {
                Some(p) => delta.push((p, -1.0)),
                None => prev_const = soc0,
            }
            let with_p = |sign: f64| {
                let mut d = delta.clone();
                d.push((p_bat, sign * soc_gain));
                d
            };
            // discharge: soc_t - soc_{t-1} + p Δt/E = 0 when u = 1
            let dis = with_p(1.0);
            b.row(dis.clone(), Sense::Le, (1.0 - u) + prev_const, format!("soc_dis_ub[{tag}]"));
            b.row(negate(&dis), Sense::Le, (1.0 - u) - prev_const, format!("soc_dis_lb[{tag}]"));
            // charge: soc_t - soc_{t-1} - p Δt/E = 0 when u = 0
            let ch = with_p(-1.0);
            b.row(ch.clone(), Sense::Le, u + prev_const, format!("soc_ch_ub[{tag}]"));
            b.row(negate(&ch), Sense::Le, u - prev_const, format!("soc_ch_lb[{tag}]"));

            b.cost(p_con_pos, h.prices.pi_loss * dt_h, CostCategory::Loss);
            b.cost(p_con_neg, h.prices.pi_loss * dt_h, CostCategory::Loss);
            b.cost(p_sw_pos, h.prices.pi_loss * dt_h, CostCategory::Loss);
            b.cost(p_sw_neg, h.prices.pi_loss * dt_h, CostCategory::Loss);

            row_vars.push(ModuleStepVars {
                alpha,
                i_bat,
                p_bat,
                p_mod,
                p_con_pos,
                p_con_neg,
                p_sw_pos,
                p_sw_neg,
                soc,
                omega,
            });
        }
        vars.push(row_vars);
    }

    // system balance and overshoot cap (the cap is the p_mbss upper bound)
    for t in 0..horizon {
        let mut terms: Vec<(usize, f64)> = vars.iter().map(|mv| (mv[t].p_mod, 1.0)).collect();
        terms.push((p_mbss[t], -1.0));
        b.row(terms, Sense::Eq, 0.0, format!("system_balance[{t}]"));
    }

    let mut segments = Vec::new();
    for (m, spec) in h.specs.iter().enumerate() {
        let soc0 = h.socs[m].clamp(spec.pack.soc_min, spec.pack.soc_max);
        let tracker = h.trackers.map(|tr| &tr[m]);
        let mut start = 0;
        while start < horizon {
            let dir = directions[start];
            let mut end = start;
            while end + 1 < horizon && directions[end + 1] == dir {
                end += 1;
            }
            let continuing = start == 0 && tracker.is_some_and(|tr| tr.continues(dir));
            let params = &spec.aging;
            let (base, g1, g2) = if continuing {
                let u0 = tracker.unwrap().depth_from(soc0);
                (u0, crate::aging::omega_prime(params, u0.max(params.xi)), omega_second(params, u0))
            } else {
                (0.0, params.xi, omega_second(params, params.xi))
            };
            let sigma = dir.soc_sign();
            for t in start..=end {
                let v = vars[m][t];
                let mut terms = vec![(v.omega, 1.0), (v.soc, -sigma)];
                let mut rhs = base;
                if start == 0 {
                    rhs -= sigma * soc0;
                } else {
                    terms.push((vars[m][start - 1].soc, sigma));
                }
                b.row(terms, Sense::Eq, rhs, format!("depth[{},{t}]", spec.id));
            }
            let scale = h.prices.pi_deg * params.half_cycle_weight * spec.pack.energy_capacity * params.unit_capacity_cost;
            let mut seg = AgingSegment {
                module: m,
                start,
                end,
                direction: dir,
                base,
                g1,
                g2,
                scale,
                epigraph: None,
            };
            if h.kind == ProblemKind::Realtime && scale > 0.0 {
                let w = vars[m][end].omega;
                b.cost(w, scale * g1, CostCategory::Aging);
                b.objective.constants.aging -= scale * g1 * base;
                if g2 > 0.0 {
                    let pack = &spec.pack;
                    let p_bat_max = (pack.k0 + pack.k1 * soc0) * pack.i_max / 1000.0;
                    let max_dev = ((end - start + 1) as f64 * p_bat_max * dt_h / pack.energy_capacity).min(1.0);
                    let tag = format!("{},{start}", spec.id);
                    let d = b.var(format!("aging_dev[{tag}]"), VarKind::Continuous, 0.0, max_dev);
                    let y = b.var(format!("aging_sq[{tag}]"), VarKind::Continuous, 0.0, max_dev * max_dev);
                    b.row(vec![(d, 1.0), (w, -1.0)], Sense::Eq, -base, format!("aging_dev[{tag}]"));
                    // (ω - base)² <= y
                    b.quadratic.push(QuadRow {
                        var: d,
                        coef: 1.0,
                        terms: vec![(y, -1.0)],
                        rhs: 0.0,
                        gate: None,
                        label: format!("aging_sq[{tag}]"),
                    });
                    b.cost(y, 0.5 * scale * g2, CostCategory::Aging);
                    seg.epigraph = Some(y);
                }
            }
            segments.push(seg);
            start = end + 1;
        }
    }

    Ok(ProblemInstance {
        kind: h.kind,
        dt: h.dt,
        horizon,
        modules: h.specs.iter().map(|s| s.id.clone()).collect(),
        directions,
        demand,
        variables: b.variables,
        linear: b.linear,
        quadratic: b.quadratic,
        objective: b.objective,
        big_m: b.big_m,
        vars,
        p_mbss,
        segments,
    })
}

fn negate(terms: &[(usize, f64)]) -> Vec<(usize, f64)> {
    terms.iter().map(|&(j, a)| (j, -a)).collect()
}

/// Horizon problem for the online controller.
pub fn build_realtime_problem(
    specs: &[ModuleSpec],
    states: &[ModuleState],
    predicted_regd: &[f64],
    prices: Prices,
    c_bid: f64,
    dt: f64,
) -> Result<ProblemInstance> {
    if specs.len() != states.len() {
        return Err(Error::Construction(format!(
            "{} specs but {} states",
            specs.len(),
            states.len()
        )));
    }
    let socs: Vec<f64> = states.iter().map(|s| s.soc).collect();
    let trackers: Vec<CycleTracker> = states.iter().map(|s| s.tracker.clone()).collect();
    build(Horizon {
        specs,
        socs: &socs,
        trackers: Some(&trackers),
        r: predicted_regd,
        prices,
        c_bid,
        dt,
        kind: ProblemKind::Realtime,
    })
}

/// Single-step problem at signal value `r` without aging cost, used to
/// build the activation lookup table.
pub fn build_offline_problem(
    specs: &[ModuleSpec],
    socs: &[f64],
    r: f64,
    c_bid: f64,
    prices: Prices,
    dt: f64,
) -> Result<ProblemInstance> {
    if specs.len() != socs.len() {
        return Err(Error::Construction(format!("{} specs but {} socs", specs.len(), socs.len())));
    }
    if !(-1.0..=1.0).contains(&r) {
        return Err(Error::Domain(format!("signal value {r} outside [-1, 1]")));
    }
    build(Horizon {
        specs,
        socs,
        trackers: None,
        r: &[r],
        prices,
        c_bid,
        dt,
        kind: ProblemKind::Offline,
    })
}

/// Substitute a complete activation assignment, leaving a binary-free QCP.
pub fn fix_activations(problem: &ProblemInstance, alpha: &Activations) -> Result<ProblemInstance> {
    let mut missing = Vec::new();
    let mut out = problem.clone();
    for (m, id) in problem.modules.iter().enumerate() {
        for t in 0..problem.horizon {
            match alpha.get(&(id.clone(), t)) {
                Some(&on) => {
                    let v = &mut out.variables[problem.vars[m][t].alpha];
                    let x = if on { 1.0 } else { 0.0 };
                    v.lb = x;
                    v.ub = x;
                    v.kind = VarKind::Continuous;
                }
                None => missing.push((id.clone(), t)),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingActivations(missing));
    }
    for (id, t) in alpha.keys() {
        if !problem.modules.contains(id) || *t >= problem.horizon {
            return Err(Error::Construction(format!("activation for unknown entry ({id}, {t})")));
        }
    }
    Ok(out)
}

/// Convert an `[module][step]` matrix to an [`Activations`] map.
pub fn activations_from_matrix(problem: &ProblemInstance, alpha: &[Vec<bool>]) -> Activations {
    let mut out = Activations::new();
    for (m, id) in problem.modules.iter().enumerate() {
        if let Some(row) = alpha.get(m) {
            for (t, &on) in row.iter().enumerate() {
                out.insert((id.clone(), t), on);
            }
        }
    }
    out
}

impl ProblemInstance {
    pub fn binary_vars(&self) -> Vec<usize> {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VarKind::Binary)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn n_binaries(&self) -> usize {
        self.variables.iter().filter(|v| v.kind == VarKind::Binary).count()
    }

    /// `(module, step)` of an activation variable.
    pub fn alpha_position(&self, var: usize) -> Option<(usize, usize)> {
        for (m, row) in self.vars.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                if v.alpha == var {
                    return Some((m, t));
                }
            }
        }
        None
    }

    /// Objective recomputed term by term from `values`.
    pub fn evaluate_objective(&self, values: &[f64]) -> CostBreakdown {
        let mut out = self.objective.constants;
        for term in &self.objective.terms {
            out.add(term.category, term.coef * values[term.var]);
        }
        out
    }

    /// Recompute every bound and row from the raw instance data and return a
    /// description of each violation larger than `tol` (scaled by row size).
    pub fn check_feasibility(&self, values: &[f64], tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        if values.len() != self.variables.len() {
            out.push(format!("expected {} values, got {}", self.variables.len(), values.len()));
            return out;
        }
        for (j, v) in self.variables.iter().enumerate() {
            let x = values[j];
            let scale = 1.0 + v.lb.abs().max(v.ub.abs()).min(1e6);
            if !x.is_finite() || x < v.lb - tol * scale || x > v.ub + tol * scale {
                out.push(format!("{} = {x} outside [{}, {}]", v.name, v.lb, v.ub));
            }
            if v.kind == VarKind::Binary && (x - x.round()).abs() > 1e-6 {
                out.push(format!("{} = {x} is not integral", v.name));
            }
        }
        for row in &self.linear {
            let (act, mag) = activity(&row.terms, values);
            let scale = 1.0 + mag.max(row.rhs.abs());
            let viol = match row.sense {
                Sense::Le => act - row.rhs,
                Sense::Eq => (act - row.rhs).abs(),
            };
            if viol > tol * scale {
                out.push(format!("{}: activity {act} vs rhs {} ({:?})", row.label, row.rhs, row.sense));
            }
        }
        for row in &self.quadratic {
            let (lin, mag) = activity(&row.terms, values);
            let sq = row.coef * values[row.var].powi(2);
            let scale = 1.0 + mag.max(sq).max(row.rhs.abs());
            if sq + lin - row.rhs > tol * scale {
                out.push(format!("{}: {} > {}", row.label, sq + lin, row.rhs));
            }
        }
        out
    }

    /// Write the instance as pretty JSON for external cross-checks.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn activity(terms: &[(usize, f64)], values: &[f64]) -> (f64, f64) {
    let mut act = 0.0;
    let mut mag = 0.0f64;
    for &(j, a) in terms {
        act += a * values[j];
        mag = mag.max((a * values[j]).abs());
    }
    (act, mag)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::aging::AgingParams;
    use crate::model::{ConverterParams, PackParams};

    pub(crate) fn small_spec(id: &str, p_max: f64, r_bat: f64) -> ModuleSpec {
        ModuleSpec {
            id: id.into(),
            pack: PackParams {
                r_bat,
                energy_capacity: 200.0,
                k0: 380.0,
                k1: 40.0,
                soc_min: 0.1,
                soc_max: 0.9,
                i_min: 0.0,
                i_max: 300.0,
                p_max,
            },
            converter: ConverterParams {
                r_on: 0.002,
                dcr: 0.003,
                v_dc: 800.0,
                v_ds: 2.0,
                v_gs: 15.0,
                f_sw: 10e3,
                t_r: 100e-9,
                t_f: 100e-9,
                c_oss: 50e-9,
                q_rr: 50e-6,
                q_g1: 5e-6,
                q_g2: 5e-6,
                vi_loss_current_scaled: false,
            },
            aging: AgingParams::with_cycle_life(3000.0, 300.0),
        }
    }

    #[test]
    fn zero_demand_instance() {
        let specs = vec![small_spec("a", 100.0, 0.05)];
        let states = vec![ModuleState::new(0.5)];
        let p = build_realtime_problem(&specs, &states, &[0.0], Prices::default(), 100.0, 2.0).unwrap();
        assert_eq!(p.directions, vec![Direction::Discharge]);
        assert_eq!(p.demand, vec![0.0]);
        assert_eq!(p.n_binaries(), 1);
        let zeros: Vec<f64> = p
            .variables
            .iter()
            .enumerate()
            .map(|(j, v)| if v.name.starts_with("soc") { 0.5 } else if j == p.vars[0][0].omega { 0.0 } else { v.lb.max(0.0) })
            .collect();
        assert!(p.check_feasibility(&zeros, 1e-9).is_empty(), "{:?}", p.check_feasibility(&zeros, 1e-9));
        assert_eq!(p.evaluate_objective(&zeros).total(), 0.0);
    }

    #[test]
    fn binary_count_scales_with_fleet_and_horizon() {
        let specs: Vec<_> = (0..10).map(|i| small_spec(&format!("m{i}"), 100.0, 0.05)).collect();
        let states: Vec<_> = (0..10).map(|_| ModuleState::new(0.5)).collect();
        let r = vec![0.3; 15];
        let p = build_realtime_problem(&specs, &states, &r, Prices::default(), 500.0, 2.0).unwrap();
        assert_eq!(p.n_binaries(), 150);
        for m in 0..10 {
            let count = p.binary_vars().iter().filter(|&&j| p.alpha_position(j).unwrap().0 == m).count();
            assert_eq!(count, 15);
        }
    }

    #[test]
    fn direction_follows_signal_sign() {
        let specs = vec![small_spec("a", 100.0, 0.05)];
        let p = build_offline_problem(&specs, &[0.5], -0.5, 100.0, Prices::default(), 2.0).unwrap();
        assert_eq!(p.directions, vec![Direction::Charge]);
        assert_eq!(p.demand, vec![50.0]);
        assert!(build_offline_problem(&specs, &[0.5], 1.5, 100.0, Prices::default(), 2.0).is_err());
    }

    #[test]
    fn construction_errors() {
        assert!(build_realtime_problem(&[], &[], &[0.1], Prices::default(), 1.0, 2.0).is_err());
        let specs = vec![small_spec("a", 100.0, 0.05)];
        let states = vec![ModuleState::new(0.5)];
        assert!(build_realtime_problem(&specs, &states, &[], Prices::default(), 1.0, 2.0).is_err());
    }

    #[test]
    fn fix_activations_reports_missing_entries() {
        let specs = vec![small_spec("a", 100.0, 0.05), small_spec("b", 100.0, 0.05)];
        let states = vec![ModuleState::new(0.5), ModuleState::new(0.5)];
        let p = build_realtime_problem(&specs, &states, &[0.2, 0.3], Prices::default(), 100.0, 2.0).unwrap();
        let mut alpha = Activations::new();
        alpha.insert(("a".into(), 0), true);
        alpha.insert(("a".into(), 1), true);
        match fix_activations(&p, &alpha) {
            Err(Error::MissingActivations(missing)) => {
                assert_eq!(missing, vec![("b".to_string(), 0), ("b".to_string(), 1)]);
            }
            other => panic!("expected missing activations, got {other:?}"),
        }
        alpha.insert(("b".into(), 0), false);
        alpha.insert(("b".into(), 1), true);
        let fixed = fix_activations(&p, &alpha).unwrap();
        assert_eq!(fixed.n_binaries(), 0);
        let a = &fixed.variables[p.vars[1][0].alpha];
        assert_eq!((a.lb, a.ub), (0.0, 0.0));
    }

    #[test]
    fn aging_segments_split_on_direction_changes() {
        let specs = vec![small_spec("a", 100.0, 0.05)];
        let mut state = ModuleState::new(0.5);
        state.tracker.last_direction = Some(Direction::Discharge);
        state.tracker.extrema.push(0.55);
        let p = build_realtime_problem(&specs, &[state], &[0.2, 0.3, -0.1, 0.4], Prices::default(), 100.0, 2.0)
            .unwrap();
        let segs: Vec<_> = p.segments.iter().map(|s| (s.start, s.end, s.direction)).collect();
        assert_eq!(
            segs,
            vec![
                (0, 1, Direction::Discharge),
                (2, 2, Direction::Charge),
                (3, 3, Direction::Discharge)
            ]
        );
        assert!((p.segments[0].base - 0.05).abs() < 1e-12);
        assert_eq!(p.segments[1].base, 0.0);
        assert_eq!(p.segments[1].g1, specs[0].aging.xi);
    }

    #[test]
    fn big_m_dominates_physical_bounds() {
        let specs = vec![small_spec("a", 100.0, 0.05)];
        let p = build_offline_problem(&specs, &[0.5], 0.5, 100.0, Prices::default(), 2.0).unwrap();
        assert!(!p.big_m.is_empty());
        for m in &p.big_m {
            assert!(m.physical_bound <= m.m, "{m:?}");
        }
    }

    #[test]
    fn json_dump_round_trips() {
        let specs = vec![small_spec("a", 100.0, 0.05)];
        let p = build_offline_problem(&specs, &[0.5], 0.5, 100.0, Prices::default(), 2.0).unwrap();
        let back: ProblemInstance = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
