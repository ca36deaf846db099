//! QCP and MIQCP solving.
//!
//! Continuous problems go through a small presolve (fixed-variable
//! elimination, singleton rows to bounds, forcing rows) and are then handed
//! to the Clarabel interior-point solver as a conic program: linear rows
//! become zero/nonnegative cones and every single-square quadratic row a
//! three-dimensional second-order cone. Mixed-integer problems are solved by
//! best-bound branch-and-bound on the activation binaries, with the
//! perspective of each gated quadratic row used in node relaxations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formulation::{ProblemInstance, Sense, Solution, SolveStatus, VarKind};

pub const INTEGRALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    MostFractional,
    PseudoCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Scaled feasibility tolerance for returned points.
    pub feas_tol: f64,
    /// Interior-point residual tolerance.
    pub opt_tol: f64,
    /// Interior-point duality-gap tolerance, absolute and relative. The
    /// penalty term adds a large constant to the objective, so this sits well
    /// below `opt_tol` to keep loss terms resolved.
    pub gap_tol: f64,
    pub mip_gap: f64,
    /// Seconds.
    pub time_limit: f64,
    pub node_limit: usize,
    pub branching: Branching,
    pub parallel_nodes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feas_tol: 1e-6,
            opt_tol: 1e-9,
            gap_tol: 1e-12,
            mip_gap: 1e-6,
            time_limit: 30.0,
            node_limit: 100_000,
            branching: Branching::MostFractional,
            parallel_nodes: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.feas_tol > 0.0 && self.opt_tol > 0.0 && self.gap_tol > 0.0 && self.mip_gap > 0.0) {
            return Err(Error::InvalidParams("solver tolerances must be > 0".into()));
        }
        if !(self.time_limit > 0.0) {
            return Err(Error::InvalidParams("solver time_limit must be > 0".into()));
        }
        if self.node_limit == 0 || self.parallel_nodes == 0 {
            return Err(Error::InvalidParams("node_limit and parallel_nodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one continuous solve under given bounds.
#[derive(Debug, Clone)]
enum Relaxed {
    Solved { x: Vec<f64>, objective: f64 },
    Infeasible(Option<String>),
    TimeLimit,
}

struct Row {
    terms: Vec<(usize, f64)>,
    sense: Sense,
    rhs: f64,
    label: usize,
}

struct Cone {
    var: usize,
    coef: f64,
    terms: Vec<(usize, f64)>,
    rhs: f64,
    gate: Option<usize>,
}

fn fixed(lb: f64, ub: f64) -> bool {
    ub - lb <= 1e-12 * (1.0 + lb.abs().max(ub.abs()))
}

/// Presolve outcome: tightened bounds plus the surviving rows.
struct Reduced {
    lb: Vec<f64>,
    ub: Vec<f64>,
    rows: Vec<Row>,
    cones: Vec<Cone>,
}

fn presolve(p: &ProblemInstance, mut lb: Vec<f64>, mut ub: Vec<f64>, tol: f64) -> std::result::Result<Reduced, String> {
    let names = |j: usize| p.variables[j].name.clone();
    let mut rows: Vec<Row> = p
        .linear
        .iter()
        .enumerate()
        .map(|(k, r)| Row { terms: r.terms.clone(), sense: r.sense, rhs: r.rhs, label: k })
        .collect();
    let mut cones: Vec<Cone> = p
        .quadratic
        .iter()
        .map(|q| Cone { var: q.var, coef: q.coef, terms: q.terms.clone(), rhs: q.rhs, gate: q.gate })
        .collect();

    for j in 0..lb.len() {
        if lb[j] > ub[j] + tol * (1.0 + lb[j].abs()) {
            return Err(format!("bounds of {} are contradictory: [{}, {}]", names(j), lb[j], ub[j]));
        }
        if lb[j] > ub[j] {
            let mid = 0.5 * (lb[j] + ub[j]);
            lb[j] = mid;
            ub[j] = mid;
        }
    }

    let mut changed = true;
    let mut passes = 0;
    while changed && passes < 50 {
        changed = false;
        passes += 1;

        // quadratic rows whose square is fixed turn linear
        let mut keep = Vec::with_capacity(cones.len());
        for c in cones.drain(..) {
            if fixed(lb[c.var], ub[c.var]) {
                let x = lb[c.var];
                rows.push(Row { terms: c.terms, sense: Sense::Le, rhs: c.rhs - c.coef * x * x, label: usize::MAX });
                changed = true;
            } else {
                keep.push(c);
            }
        }
        cones = keep;

        let mut next_rows = Vec::with_capacity(rows.len());
        for mut row in rows.drain(..) {
            let mut constant = 0.0;
            row.terms.retain(|&(j, a)| {
                if fixed(lb[j], ub[j]) {
                    constant += a * lb[j];
                    false
                } else {
                    a != 0.0
                }
            });
            row.rhs -= constant;
            let label = || {
                if row.label == usize::MAX {
                    "quadratic row".to_string()
                } else {
                    p.linear[row.label].label.clone()
                }
            };
            let scale = 1.0 + row.rhs.abs() + constant.abs();
            if row.terms.is_empty() {
                let ok = match row.sense {
                    Sense::Le => 0.0 <= row.rhs + tol * scale,
                    Sense::Eq => row.rhs.abs() <= tol * scale,
                };
                if !ok {
                    return Err(format!("{} cannot hold: 0 vs rhs {}", label(), row.rhs));
                }
                changed = true;
                continue;
            }
            let (mut lo, mut hi) = (0.0, 0.0);
            for &(j, a) in &row.terms {
                if a > 0.0 {
                    lo += a * lb[j];
                    hi += a * ub[j];
                } else {
                    lo += a * ub[j];
                    hi += a * lb[j];
                }
            }
            let act_scale = scale + row.terms.iter().map(|&(j, a)| (a * lb[j]).abs().max((a * ub[j]).abs())).fold(0.0, f64::max);
            if lo > row.rhs + tol * act_scale {
                return Err(format!("{} needs activity >= {lo} but rhs is {}", label(), row.rhs));
            }
            if row.sense == Sense::Eq && hi < row.rhs - tol * act_scale {
                return Err(format!("{} reaches at most {hi} but rhs is {}", label(), row.rhs));
            }
            if row.terms.len() == 1 {
                let (j, a) = row.terms[0];
                let v = row.rhs / a;
                match row.sense {
                    Sense::Eq => {
                        let v = v.clamp(lb[j], ub[j]);
                        lb[j] = v;
                        ub[j] = v;
                    }
                    Sense::Le if a > 0.0 => ub[j] = ub[j].min(v).max(lb[j]),
                    Sense::Le => lb[j] = lb[j].max(v).min(ub[j]),
                }
                changed = true;
                continue;
            }
            let tight = 1e-12 * act_scale;
            let forced_low = lo >= row.rhs - tight;
            let forced_high = row.sense == Sense::Eq && hi <= row.rhs + tight;
            if forced_low || forced_high {
                for &(j, a) in &row.terms {
                    let at_lb = (a > 0.0) == forced_low;
                    let v = if at_lb { lb[j] } else { ub[j] };
                    lb[j] = v;
                    ub[j] = v;
                }
                changed = true;
                continue;
            }
            next_rows.push(row);
        }
        rows = next_rows;
    }
    Ok(Reduced { lb, ub, rows, cones })
}

fn clarabel_status_name(s: SolverStatus) -> String {
    format!("{s:?}")
}

/// Solve the continuous problem under bounds `lb`/`ub`. Binaries with
/// non-fixed bounds are relaxed to `[0, 1]`, and gated quadratic rows take
/// their perspective form.
fn solve_relaxation(p: &ProblemInstance, lb: Vec<f64>, ub: Vec<f64>, config: &SolverConfig, deadline: Instant) -> Result<Relaxed> {
    let n = p.variables.len();
    let red = match presolve(p, lb, ub, config.feas_tol) {
        Ok(r) => r,
        Err(w) => return Ok(Relaxed::Infeasible(Some(w))),
    };
    let mut col = vec![usize::MAX; n];
    let mut free = Vec::new();
    for j in 0..n {
        if !fixed(red.lb[j], red.ub[j]) {
            col[j] = free.len();
            free.push(j);
        }
    }
    let value_of_fixed = |j: usize| red.lb[j];

    let mut x_full: Vec<f64> = red.lb.clone();
    if free.is_empty() {
        let objective = p.evaluate_objective(&x_full).total();
        return Ok(Relaxed::Solved { x: x_full, objective });
    }

    // shrink columns whose bounds are far below one (squared SoC deviations)
    // so their costs do not swamp the kW-scale terms
    let scale: Vec<f64> = (0..n)
        .map(|j| {
            let mag = [red.lb[j], red.ub[j]].iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
            if mag > 0.0 { mag.clamp(1e-8, 1.0) } else { 1.0 }
        })
        .collect();

    let nf = free.len();
    let mut q = vec![0.0; nf];
    for t in &p.objective.terms {
        if col[t.var] != usize::MAX {
            q[col[t.var]] += t.coef * scale[t.var];
        }
    }
    let qmax = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let qscale = if qmax > 0.0 { 1.0 / qmax } else { 1.0 };
    for v in &mut q {
        *v *= qscale;
    }

    let (mut ii, mut jj, mut vv) = (Vec::new(), Vec::new(), Vec::new());
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let mut m = 0usize;

    let push_row = |terms: &[(usize, f64)], rhs: f64, m: &mut usize, ii: &mut Vec<usize>, jj: &mut Vec<usize>, vv: &mut Vec<f64>, b: &mut Vec<f64>| {
        let mut r = rhs;
        let norm = terms
            .iter()
            .filter(|&&(j, _)| col[j] != usize::MAX)
            .fold(0.0f64, |acc, &(j, a)| acc.max((a * scale[j]).abs()))
            .max(1e-300);
        for &(j, a) in terms {
            if col[j] == usize::MAX {
                r -= a * value_of_fixed(j);
            } else {
                ii.push(*m);
                jj.push(col[j]);
                vv.push(a * scale[j] / norm);
            }
        }
        b.push(r / norm);
        *m += 1;
    };

    let eq: Vec<&Row> = red.rows.iter().filter(|r| r.sense == Sense::Eq).collect();
    let le: Vec<&Row> = red.rows.iter().filter(|r| r.sense == Sense::Le).collect();
    for r in &eq {
        push_row(&r.terms, r.rhs, &mut m, &mut ii, &mut jj, &mut vv, &mut b);
    }
    if !eq.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(eq.len()));
    }
    let mut n_nonneg = 0;
    for r in &le {
        push_row(&r.terms, r.rhs, &mut m, &mut ii, &mut jj, &mut vv, &mut b);
        n_nonneg += 1;
    }
    for &j in &free {
        if red.ub[j].is_finite() {
            push_row(&[(j, 1.0)], red.ub[j], &mut m, &mut ii, &mut jj, &mut vv, &mut b);
            n_nonneg += 1;
        }
        if red.lb[j].is_finite() {
            push_row(&[(j, -1.0)], -red.lb[j], &mut m, &mut ii, &mut jj, &mut vv, &mut b);
            n_nonneg += 1;
        }
    }
    if n_nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
    }

    for c in &red.cones {
        // coef x² <= w·g  <=>  ||(2√coef x, w/τ - τg)|| <= w/τ + τg
        let xmax = red.lb[c.var].abs().max(red.ub[c.var].abs());
        let tau = (c.coef.sqrt() * xmax).max(1e-8);
        let sq = 2.0 * c.coef.sqrt();
        let gate = c.gate.filter(|&g| !fixed(red.lb[g], red.ub[g]));
        let mut rhs = c.rhs;
        let mut lin: Vec<(usize, f64)> = Vec::new();
        for &(j, a) in &c.terms {
            if col[j] == usize::MAX {
                rhs -= a * value_of_fixed(j);
            } else {
                lin.push((col[j], a * scale[j] / tau));
            }
        }
        let rhs = rhs / tau;
        // s0 = w/τ + τg
        for &(cj, a) in &lin {
            ii.push(m);
            jj.push(cj);
            vv.push(a);
        }
        match gate {
            Some(g) => {
                ii.push(m);
                jj.push(col[g]);
                vv.push(-tau * scale[g]);
                b.push(rhs);
            }
            None => b.push(rhs + tau),
        }
        m += 1;
        // s1 = 2√coef x
        ii.push(m);
        jj.push(col[c.var]);
        vv.push(-sq * scale[c.var]);
        b.push(0.0);
        m += 1;
        // s2 = w/τ - τg
        for &(cj, a) in &lin {
            ii.push(m);
            jj.push(cj);
            vv.push(a);
        }
        match gate {
            Some(g) => {
                ii.push(m);
                jj.push(col[g]);
                vv.push(tau * scale[g]);
                b.push(rhs);
            }
            None => b.push(rhs - tau),
        }
        m += 1;
        cones.push(SupportedConeT::SecondOrderConeT(3));
    }

    let a = CscMatrix::new_from_triplets(m, nf, ii, jj, vv);
    let pm = CscMatrix::<f64>::zeros((nf, nf));
    let remaining = deadline.saturating_duration_since(Instant::now()).as_secs_f64();
    if remaining <= 0.0 {
        return Ok(Relaxed::TimeLimit);
    }
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(config.gap_tol)
        .tol_gap_rel(config.gap_tol)
        .tol_feas(config.opt_tol)
        .max_iter(200)
        .time_limit(remaining)
        .build()
        .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;
    let mut solver = DefaultSolver::new(&pm, &q, &a, &b, &cones, settings)
        .map_err(|e| Error::Solver(format!("setup: {e:?}")))?;
    solver.solve();
    let status = solver.solution.status;
    match status {
        SolverStatus::Solved | SolverStatus::AlmostSolved | SolverStatus::InsufficientProgress | SolverStatus::MaxIterations => {
            for (k, &j) in free.iter().enumerate() {
                x_full[j] = (solver.solution.x[k] * scale[j]).clamp(red.lb[j], red.ub[j]);
            }
            if status != SolverStatus::Solved && status != SolverStatus::AlmostSolved {
                // accept only if the point checks out
                let binaries_relaxed = relax_binaries(p);
                let viol = binaries_relaxed.check_feasibility(&x_full, config.feas_tol);
                if !viol.is_empty() {
                    return Err(Error::Solver(format!(
                        "interior-point solver stopped with {}: {}",
                        clarabel_status_name(status),
                        viol[0]
                    )));
                }
            }
            let objective = p.evaluate_objective(&x_full).total();
            Ok(Relaxed::Solved { x: x_full, objective })
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            Ok(Relaxed::Infeasible(Some("conic solver certificate of primal infeasibility".into())))
        }
        SolverStatus::MaxTime => Ok(Relaxed::TimeLimit),
        other => Err(Error::Solver(format!("interior-point solver stopped with {}", clarabel_status_name(other)))),
    }
}

fn relax_binaries(p: &ProblemInstance) -> ProblemInstance {
    let mut out = p.clone();
    for v in &mut out.variables {
        v.kind = VarKind::Continuous;
    }
    out
}

fn bounds(p: &ProblemInstance) -> (Vec<f64>, Vec<f64>) {
    (p.variables.iter().map(|v| v.lb).collect(), p.variables.iter().map(|v| v.ub).collect())
}

/// Solve a binary-free instance.
pub fn solve_qcp(instance: &ProblemInstance, config: &SolverConfig) -> Result<Solution> {
    config.validate()?;
    let unfixed: Vec<_> = instance
        .variables
        .iter()
        .filter(|v| v.kind == VarKind::Binary && !fixed(v.lb, v.ub))
        .map(|v| v.name.clone())
        .collect();
    if !unfixed.is_empty() {
        return Err(Error::Solver(format!(
            "solve_qcp needs a binary-free instance; {} binaries remain (first: {})",
            unfixed.len(),
            unfixed[0]
        )));
    }
    let start = Instant::now();
    let deadline = start + std::time::Duration::from_secs_f64(config.time_limit);
    let (lb, ub) = bounds(instance);
    let out = solve_relaxation(instance, lb, ub, config, deadline)?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(match out {
        Relaxed::Solved { x, objective } => Solution {
            status: SolveStatus::Optimal,
            values: x,
            objective,
            gap: 0.0,
            bound: objective,
            nodes: 0,
            solve_time: elapsed,
            witness: None,
        },
        Relaxed::Infeasible(w) => Solution { solve_time: elapsed, ..Solution::infeasible(w) },
        Relaxed::TimeLimit => Solution {
            status: SolveStatus::TimeLimit,
            solve_time: elapsed,
            ..Solution::infeasible(None)
        },
    })
}

#[derive(Debug, Clone, Copy)]
struct Key {
    bound: f64,
    id: usize,
}

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Key {
    // reversed: BinaryHeap pops the smallest bound, then the oldest node
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound).then(other.id.cmp(&self.id))
    }
}

struct Node {
    lb: Vec<f64>,
    ub: Vec<f64>,
    x: Vec<f64>,
    objective: f64,
}

#[derive(Default, Clone, Copy)]
struct Pseudo {
    down_sum: f64,
    down_n: f64,
    up_sum: f64,
    up_n: f64,
}

struct Search<'a> {
    p: &'a ProblemInstance,
    config: &'a SolverConfig,
    binaries: Vec<usize>,
    /// Lexicographic tie-break key of each binary: (module id, step).
    order: Vec<(String, usize)>,
    pseudo: Vec<Pseudo>,
    deadline: Instant,
}

impl Search<'_> {
    fn fractional(&self, x: &[f64]) -> Vec<usize> {
        (0..self.binaries.len())
            .filter(|&k| {
                let v = x[self.binaries[k]];
                (v - v.round()).abs() > INTEGRALITY_TOL
            })
            .collect()
    }

    fn pick(&self, x: &[f64], cand: &[usize]) -> usize {
        let better = |score: f64, k: usize, best: Option<(f64, usize)>| match best {
            None => true,
            Some((s, b)) => score > s + 1e-12 || ((score - s).abs() <= 1e-12 && self.order[k] < self.order[b]),
        };
        let mut best: Option<(f64, usize)> = None;
        for &k in cand {
            let f = x[self.binaries[k]];
            let score = match self.config.branching {
                Branching::MostFractional => f.min(1.0 - f),
                Branching::PseudoCost => {
                    let ps = &self.pseudo[k];
                    let avg = |s: f64, n: f64| if n > 0.0 { s / n } else { 1.0 };
                    let down = avg(ps.down_sum, ps.down_n) * f;
                    let up = avg(ps.up_sum, ps.up_n) * (1.0 - f);
                    down.max(1e-9) * up.max(1e-9)
                }
            };
            if better(score, k, best) {
                best = Some((score, k));
            }
        }
        best.expect("candidate list is non-empty").1
    }

    fn solve(&self, lb: Vec<f64>, ub: Vec<f64>) -> Result<Option<Node>> {
        match solve_relaxation(self.p, lb.clone(), ub.clone(), self.config, self.deadline)? {
            Relaxed::Solved { x, objective } => Ok(Some(Node { lb, ub, x, objective })),
            Relaxed::Infeasible(_) => Ok(None),
            Relaxed::TimeLimit => Err(Error::Solver("time limit".into())),
        }
    }

    /// Re-solve an integral relaxation point with its binaries fixed exactly.
    fn polish(&self, node: Node) -> Result<Option<Node>> {
        if self.binaries.iter().all(|&j| fixed(node.lb[j], node.ub[j])) {
            return Ok(Some(node));
        }
        self.dive(&node, f64::round)
    }

    /// Fix every binary by `round` and solve the resulting QCP.
    fn dive(&self, node: &Node, round: impl Fn(f64) -> f64) -> Result<Option<Node>> {
        let (mut lb, mut ub) = (node.lb.clone(), node.ub.clone());
        for &j in &self.binaries {
            let v = round(node.x[j]).clamp(lb[j], ub[j]);
            lb[j] = v;
            ub[j] = v;
        }
        self.solve(lb, ub)
    }
}

fn is_time_limit(e: &Error) -> bool {
    matches!(e, Error::Solver(m) if m == "time limit")
}

/// Branch-and-bound over the binaries of `instance`.
pub fn solve_miqcp(instance: &ProblemInstance, config: &SolverConfig) -> Result<Solution> {
    config.validate()?;
    let start = Instant::now();
    let deadline = start + std::time::Duration::from_secs_f64(config.time_limit);
    let binaries = instance.binary_vars();
    let order = binaries
        .iter()
        .map(|&j| match instance.alpha_position(j) {
            Some((m, t)) => (instance.modules[m].clone(), t),
            None => (instance.variables[j].name.clone(), 0),
        })
        .collect();
    let search = Search {
        p: instance,
        config,
        pseudo: vec![Pseudo::default(); binaries.len()],
        binaries,
        order,
        deadline,
    };
    let mut search = search;
    let (lb, ub) = bounds(instance);

    let timed_out = |nodes: usize, incumbent: Option<Node>, bound: f64| {
        let elapsed = start.elapsed().as_secs_f64();
        match incumbent {
            Some(inc) => Solution {
                status: SolveStatus::TimeLimit,
                gap: rel_gap(inc.objective, bound),
                objective: inc.objective,
                values: inc.x,
                bound,
                nodes,
                solve_time: elapsed,
                witness: None,
            },
            None => Solution {
                status: SolveStatus::TimeLimit,
                bound,
                nodes,
                solve_time: elapsed,
                ..Solution::infeasible(None)
            },
        }
    };

    let root = match search.solve(lb, ub) {
        Ok(Some(n)) => n,
        Ok(None) => {
            return Ok(Solution {
                solve_time: start.elapsed().as_secs_f64(),
                ..Solution::infeasible(Some("root relaxation is infeasible".into()))
            })
        }
        Err(e) if is_time_limit(&e) => return Ok(timed_out(0, None, f64::NEG_INFINITY)),
        Err(e) => return Err(e),
    };

    let mut incumbent: Option<Node> = None;
    let offer = |cand: Node, incumbent: &mut Option<Node>| {
        if search_feasible(instance, &cand.x, config) && incumbent.as_ref().is_none_or(|inc| cand.objective < inc.objective) {
            *incumbent = Some(cand);
        }
    };

    // rounding heuristics at the root
    if !search.fractional(&root.x).is_empty() {
        for heuristic in [0usize, 1] {
            let res = match heuristic {
                0 => search.dive(&root, |v| if v > INTEGRALITY_TOL { 1.0 } else { 0.0 }),
                _ => search.dive(&root, |v| if v >= 0.5 { 1.0 } else { 0.0 }),
            };
            match res {
                Ok(Some(n)) => offer(n, &mut incumbent),
                Ok(None) => {}
                Err(e) if is_time_limit(&e) => return Ok(timed_out(1, incumbent, root.objective)),
                Err(e) => return Err(e),
            }
        }
    }

    let mut heap: BinaryHeap<(Key, usize)> = BinaryHeap::new();
    let mut store: Vec<Option<Node>> = Vec::new();
    let mut next_id = 0usize;
    let mut push = |node: Node, heap: &mut BinaryHeap<(Key, usize)>, store: &mut Vec<Option<Node>>| {
        let key = Key { bound: node.objective, id: next_id };
        next_id += 1;
        store.push(Some(node));
        heap.push((key, store.len() - 1));
    };
    push(root, &mut heap, &mut store);
    let mut nodes = 0usize;

    loop {
        let best_bound = heap.peek().map(|(k, _)| k.bound);
        if let (Some(inc), Some(bb)) = (&incumbent, best_bound) {
            if rel_gap(inc.objective, bb) <= config.mip_gap {
                break;
            }
        }
        let Some((key, slot)) = heap.pop() else { break };
        let node = store[slot].take().expect("each node is popped once");
        if let Some(inc) = &incumbent {
            if rel_gap(inc.objective, key.bound) <= config.mip_gap {
                continue;
            }
        }
        if nodes >= config.node_limit || Instant::now() >= deadline {
            let bound = key.bound.min(heap.peek().map_or(f64::INFINITY, |(k, _)| k.bound));
            return Ok(timed_out(nodes, incumbent, bound));
        }
        nodes += 1;

        let frac = search.fractional(&node.x);
        if frac.is_empty() {
            match search.polish(node) {
                Ok(Some(n)) => offer(n, &mut incumbent),
                Ok(None) => {}
                Err(e) if is_time_limit(&e) => return Ok(timed_out(nodes, incumbent, key.bound)),
                Err(e) => return Err(e),
            }
            continue;
        }
        let k = search.pick(&node.x, &frac);
        let j = search.binaries[k];
        let f = node.x[j];
        let child = |v: f64| {
            let (mut lb, mut ub) = (node.lb.clone(), node.ub.clone());
            lb[j] = v;
            ub[j] = v;
            (lb, ub)
        };
        let (down, up) = (child(0.0), child(1.0));
        let (rd, ru) = if config.parallel_nodes > 1 {
            rayon::join(|| search.solve(down.0, down.1), || search.solve(up.0, up.1))
        } else {
            (search.solve(down.0, down.1), search.solve(up.0, up.1))
        };
        let mut children = Vec::with_capacity(2);
        for (res, is_up) in [(rd, false), (ru, true)] {
            match res {
                Ok(Some(c)) => {
                    let gain = (c.objective - node.objective).max(0.0);
                    let ps = &mut search.pseudo[k];
                    if is_up {
                        ps.up_sum += gain / (1.0 - f).max(1e-9);
                        ps.up_n += 1.0;
                    } else {
                        ps.down_sum += gain / f.max(1e-9);
                        ps.down_n += 1.0;
                    }
                    children.push(c);
                }
                Ok(None) => {}
                Err(e) if is_time_limit(&e) => {
                    return Ok(timed_out(nodes, incumbent, node.objective));
                }
                Err(e) => return Err(e),
            }
        }
        for c in children {
            if incumbent.as_ref().is_some_and(|inc| rel_gap(inc.objective, c.objective) <= config.mip_gap) {
                continue;
            }
            if search.fractional(&c.x).is_empty() {
                match search.polish(c) {
                    Ok(Some(n)) => offer(n, &mut incumbent),
                    Ok(None) => {}
                    Err(e) if is_time_limit(&e) => return Ok(timed_out(nodes, incumbent, node.objective)),
                    Err(e) => return Err(e),
                }
            } else {
                push(c, &mut heap, &mut store);
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    Ok(match incumbent {
        Some(inc) => {
            let bound = heap.peek().map_or(inc.objective, |(k, _)| k.bound.min(inc.objective));
            Solution {
                status: SolveStatus::Optimal,
                gap: rel_gap(inc.objective, bound),
                objective: inc.objective,
                values: round_binaries(&search.binaries, inc.x),
                bound,
                nodes,
                solve_time: elapsed,
                witness: None,
            }
        }
        None => Solution {
            nodes,
            solve_time: elapsed,
            ..Solution::infeasible(Some("no integer-feasible point in the search tree".into()))
        },
    })
}

fn round_binaries(binaries: &[usize], mut x: Vec<f64>) -> Vec<f64> {
    for &j in binaries {
        x[j] = x[j].round();
    }
    x
}

fn search_feasible(p: &ProblemInstance, x: &[f64], config: &SolverConfig) -> bool {
    p.check_feasibility(x, config.feas_tol).is_empty()
}

/// Relative gap `(incumbent - bound) / max(|incumbent|, 1e-9)`.
pub fn rel_gap(incumbent: f64, bound: f64) -> f64 {
    if !incumbent.is_finite() {
        return f64::INFINITY;
    }
    ((incumbent - bound) / incumbent.abs().max(1e-9)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::{LinearRow, Objective, ObjectiveTerm, CostCategory, QuadRow, Variable, ProblemKind};

    fn bare(variables: Vec<Variable>, linear: Vec<LinearRow>, quadratic: Vec<QuadRow>, terms: Vec<ObjectiveTerm>) -> ProblemInstance {
        ProblemInstance {
            kind: ProblemKind::Offline,
            dt: 2.0,
            horizon: 0,
            modules: vec![],
            directions: vec![],
            demand: vec![],
            variables,
            linear,
            quadratic,
            objective: Objective { terms, constants: Default::default() },
            big_m: vec![],
            vars: vec![],
            p_mbss: vec![],
            segments: vec![],
        }
    }

    fn var(name: &str, lb: f64, ub: f64) -> Variable {
        Variable { name: name.into(), kind: VarKind::Continuous, lb, ub }
    }

    #[test]
    fn one_dimensional_kkt_point() {
        // min -x + q y  s.t.  a x² <= y ; stationary point x = 1 / (2 a q)
        let (a, q) = (0.02, 3.0);
        let p = bare(
            vec![var("x", 0.0, 100.0), var("y", 0.0, 1e4)],
            vec![],
            vec![QuadRow { var: 0, coef: a, terms: vec![(1, -1.0)], rhs: 0.0, gate: None, label: "q".into() }],
            vec![
                ObjectiveTerm { var: 0, coef: -1.0, category: CostCategory::Loss },
                ObjectiveTerm { var: 1, coef: q, category: CostCategory::Loss },
            ],
        );
        let s = solve_qcp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        let x_star = 1.0 / (2.0 * a * q);
        assert!((s.values[0] - x_star).abs() < 1e-6 * x_star, "{} vs {x_star}", s.values[0]);
        assert!((s.objective - (-x_star + q * a * x_star * x_star)).abs() < 1e-8);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let p = bare(vec![var("x", 2.0, 1.0)], vec![], vec![], vec![]);
        let s = solve_qcp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
        assert!(s.witness.unwrap().contains('x'));
    }

    #[test]
    fn presolve_detects_row_conflicts() {
        let p = bare(
            vec![var("x", 0.0, 1.0), var("y", 0.0, 1.0)],
            vec![LinearRow { terms: vec![(0, 1.0), (1, 1.0)], sense: Sense::Eq, rhs: 3.0, label: "sum".into() }],
            vec![],
            vec![],
        );
        let s = solve_qcp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
        assert!(s.witness.unwrap().contains("sum"));
    }

    #[test]
    fn binaries_rejected_by_qcp() {
        let mut v = var("b", 0.0, 1.0);
        v.kind = VarKind::Binary;
        let p = bare(vec![v], vec![], vec![], vec![]);
        assert!(solve_qcp(&p, &SolverConfig::default()).is_err());
    }

    #[test]
    fn small_knapsack_by_branching() {
        // max 5a + 4b + 3c  s.t. 2a + 3b + c <= 4 (binary) -> a = c = 1, value 8
        let mut vars: Vec<Variable> = ["a", "b", "c"].iter().map(|n| var(n, 0.0, 1.0)).collect();
        for v in &mut vars {
            v.kind = VarKind::Binary;
        }
        let p = bare(
            vars,
            vec![LinearRow { terms: vec![(0, 2.0), (1, 3.0), (2, 1.0)], sense: Sense::Le, rhs: 4.0, label: "cap".into() }],
            vec![],
            [5.0, 4.0, 3.0]
                .iter()
                .enumerate()
                .map(|(j, &c)| ObjectiveTerm { var: j, coef: -c, category: CostCategory::Loss })
                .collect(),
        );
        for branching in [Branching::MostFractional, Branching::PseudoCost] {
            let cfg = SolverConfig { branching, ..Default::default() };
            let s = solve_miqcp(&p, &cfg).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);
            assert!((s.objective + 8.0).abs() < 1e-6, "{}", s.objective);
            assert_eq!(s.values, vec![1.0, 0.0, 1.0]);
        }
    }
}

#[cfg(test)]
mod model_tests {
    use super::*;
    use crate::formulation::tests::small_spec;
    use crate::formulation::{activations_from_matrix, build_offline_problem, fix_activations, Prices};

    fn enumerate(p: &ProblemInstance, cfg: &SolverConfig) -> f64 {
        let n = p.modules.len();
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << n) {
            let alpha: Vec<Vec<bool>> = (0..n).map(|m| vec![mask & (1 << m) != 0]).collect();
            let fixed = fix_activations(p, &activations_from_matrix(p, &alpha)).unwrap();
            let s = solve_qcp(&fixed, cfg).unwrap();
            if s.status == SolveStatus::Optimal {
                best = best.min(s.objective);
            }
        }
        best
    }

    #[test]
    fn offline_matches_enumeration() {
        let specs = vec![small_spec("a", 80.0, 0.05), small_spec("b", 100.0, 0.08), small_spec("c", 60.0, 0.03)];
        let cfg = SolverConfig::default();
        for r in [-0.9, -0.3, 0.05, 0.4, 1.0] {
            let p = build_offline_problem(&specs, &[0.5, 0.4, 0.6], r, 200.0, Prices::default(), 2.0).unwrap();
            let s = solve_miqcp(&p, &cfg).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);
            let e = enumerate(&p, &cfg);
            assert!(((s.objective - e) / e.abs().max(1e-12)).abs() < 1e-6, "r={r}: {} vs {e}", s.objective);
            let v = p.check_feasibility(&s.values, 1e-6);
            assert!(v.is_empty(), "{v:?}");
        }
    }
}
