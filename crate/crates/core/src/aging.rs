//! Cycle-depth aging: the power-law aging degree, real-time subgradients
//! with their Taylor linearization, SoC extremum tracking and rainflow
//! half-cycle extraction for the accumulated cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Direction;

pub const DEFAULT_KAPPA2: f64 = 2.03;
pub const DEFAULT_XI: f64 = 1e-6;

/// Aging-law and cost parameters of one module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgingParams {
    pub kappa1: f64,
    pub kappa2: f64,
    pub n_cycles_100: f64,
    /// Replacement cost, $/kWh.
    pub unit_capacity_cost: f64,
    pub half_cycle_weight: f64,
    pub xi: f64,
}

impl AgingParams {
    /// Parameters for a pack rated for `n_cycles` full-depth cycles.
    pub fn with_cycle_life(n_cycles: f64, unit_capacity_cost: f64) -> Self {
        Self {
            kappa1: 1.0 / n_cycles,
            kappa2: DEFAULT_KAPPA2,
            n_cycles_100: n_cycles,
            unit_capacity_cost,
            half_cycle_weight: 0.5,
            xi: DEFAULT_XI,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa1 > 0.0 && self.kappa1.is_finite()) {
            return Err(Error::InvalidParams(format!("kappa1 must be > 0, got {}", self.kappa1)));
        }
        if !(self.kappa2 >= 1.0 && self.kappa2.is_finite()) {
            return Err(Error::InvalidParams(format!("kappa2 must be >= 1, got {}", self.kappa2)));
        }
        if self.half_cycle_weight != 0.5 {
            return Err(Error::InvalidParams(format!(
                "half_cycle_weight must be 0.5, got {}",
                self.half_cycle_weight
            )));
        }
        if !(self.xi > 0.0 && self.xi < self.kappa1 * self.kappa2 * 0.01) {
            return Err(Error::InvalidParams(format!(
                "xi must lie in (0, kappa1*kappa2*0.01), got {}",
                self.xi
            )));
        }
        if !(self.unit_capacity_cost >= 0.0) {
            return Err(Error::InvalidParams("unit_capacity_cost must be >= 0".into()));
        }
        Ok(())
    }
}

/// κ1 = 1 / (υ_100 · N_100).
pub fn kappa1_from_cycle_life(upsilon_100: f64, n_cycles: f64) -> Result<f64> {
    if !(upsilon_100 > 0.0 && n_cycles > 0.0) {
        return Err(Error::Domain(format!(
            "cycle life inputs must be > 0 (depth {upsilon_100}, cycles {n_cycles})"
        )));
    }
    Ok(1.0 / (upsilon_100 * n_cycles))
}

/// Ω(υ) = κ1 · υ^κ2.
pub fn aging_degree(params: &AgingParams, upsilon: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&upsilon) {
        return Err(Error::Domain(format!("cycle depth {upsilon} outside [0, 1]")));
    }
    Ok(params.kappa1 * upsilon.powf(params.kappa2))
}

/// Ω'(υ) = κ1 κ2 υ^(κ2-1).
pub fn omega_prime(params: &AgingParams, upsilon: f64) -> f64 {
    let u = upsilon.max(0.0);
    if u == 0.0 && params.kappa2 > 1.0 {
        return 0.0;
    }
    params.kappa1 * params.kappa2 * u.powf(params.kappa2 - 1.0)
}

/// Ω''(υ) = κ1 κ2 (κ2-1) υ^(κ2-2), evaluated at `max(υ, ξ)`.
pub fn omega_second(params: &AgingParams, upsilon: f64) -> f64 {
    let u = upsilon.max(params.xi);
    params.kappa1 * params.kappa2 * (params.kappa2 - 1.0) * u.powf(params.kappa2 - 2.0)
}

/// First-order expansion of Ω' around `upsilon0`, evaluated at `omega`.
/// The expansion point is floored at ξ.
pub fn taylor_omega_prime(params: &AgingParams, upsilon0: f64, omega: f64) -> f64 {
    let u0 = upsilon0.max(params.xi);
    let k1k2 = params.kappa1 * params.kappa2;
    k1k2 * (u0.powf(params.kappa2 - 1.0)
        + (params.kappa2 - 1.0) * u0.powf(params.kappa2 - 2.0) * (omega - u0))
}

/// SoC extremum history of one module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTracker {
    pub extrema: Vec<f64>,
    pub last_direction: Option<Direction>,
    /// Depth at the start of the current horizon.
    pub taylor_point: f64,
}

impl CycleTracker {
    pub fn new(initial_soc: f64) -> Self {
        Self { extrema: vec![initial_soc], last_direction: None, taylor_point: 0.0 }
    }

    /// Most recent extremum.
    pub fn last(&self) -> f64 {
        *self.extrema.last().expect("tracker is seeded with the initial SoC")
    }

    /// Depth travelled since the last extremum.
    pub fn depth_from(&self, soc: f64) -> f64 {
        (soc - self.last()).abs()
    }

    /// On a sign change, record `soc_now` as a new extremum and flip the
    /// segment direction.
    pub fn update_extrema(&mut self, sign_changed: bool, soc_now: f64) {
        if !sign_changed {
            return;
        }
        self.extrema.push(soc_now);
        self.last_direction = self.last_direction.map(Direction::flip);
    }

    /// Register the direction of the coming interval. Returns `true` when
    /// it opens a fresh half-cycle (first movement, or a reversal, in which
    /// case `soc_prev` becomes an extremum).
    pub fn observe(&mut self, direction: Direction, soc_prev: f64) -> bool {
        match self.last_direction {
            Some(d) if d == direction => false,
            Some(_) => {
                self.update_extrema(true, soc_prev);
                true
            }
            None => {
                self.last_direction = Some(direction);
                true
            }
        }
    }

    /// Whether moving in `direction` continues the current half-cycle.
    pub fn continues(&self, direction: Direction) -> bool {
        self.last_direction == Some(direction)
    }

    /// Refresh the Taylor expansion point at the start of a horizon.
    pub fn refresh_taylor_point(&mut self, soc_t0: f64) {
        self.taylor_point = self.depth_from(soc_t0);
    }
}

/// Depth of a continuing half-cycle after carrying `p_bat` for `dt` seconds.
pub fn current_cycle_depth(tracker: &CycleTracker, soc_prev: f64, p_bat: f64, dt: f64, energy: f64) -> f64 {
    tracker.depth_from(soc_prev) + p_bat * (dt / 3600.0) / energy
}

/// Marginal aging cost per kW of internal power for one interval ($/kW).
pub fn aging_subgradient(
    tracker: &CycleTracker,
    soc_prev: f64,
    params: &AgingParams,
    dt: f64,
    fresh_half_cycle: bool,
) -> f64 {
    let slope = if fresh_half_cycle {
        params.xi
    } else {
        omega_prime(params, tracker.depth_from(soc_prev))
    };
    params.half_cycle_weight * (dt / 3600.0) * params.unit_capacity_cost * slope
}

/// One half-cycle of SoC movement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfCycle {
    pub depth: f64,
    pub direction: Direction,
}

/// A rainflow cycle: `count` is 1.0 for a closed cycle and 0.5 for a residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RainflowCycle {
    pub depth: f64,
    pub count: f64,
    /// Direction of a residual half-cycle; `None` for closed cycles.
    pub direction: Option<Direction>,
}

fn direction_between(from: f64, to: f64) -> Direction {
    if to > from {
        Direction::Charge
    } else {
        Direction::Discharge
    }
}

/// Reduce a SoC sequence to its turning points.
pub fn turning_points(series: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(series.len());
    for &x in series {
        if out.last() == Some(&x) {
            continue;
        }
        if out.len() >= 2 {
            let a = out[out.len() - 2];
            let b = out[out.len() - 1];
            if (b - a) * (x - b) > 0.0 {
                // b lies on a monotone run
                *out.last_mut().unwrap() = x;
                continue;
            }
        }
        out.push(x);
    }
    out
}

/// Four-point rainflow counting over an extremum sequence.
pub fn rainflow_cycles(extrema: &[f64]) -> Vec<RainflowCycle> {
    let points = turning_points(extrema);
    let mut cycles = Vec::new();
    let mut stack: Vec<f64> = Vec::with_capacity(points.len());
    for p in points {
        stack.push(p);
        while stack.len() >= 4 {
            let n = stack.len();
            let (a, b, c, d) = (stack[n - 4], stack[n - 3], stack[n - 2], stack[n - 1]);
            let inner = (b - c).abs();
            if inner <= (a - b).abs() && inner <= (c - d).abs() {
                cycles.push(RainflowCycle { depth: inner, count: 1.0, direction: None });
                stack.drain(n - 3..n - 1);
            } else {
                break;
            }
        }
    }
    for w in stack.windows(2) {
        cycles.push(RainflowCycle {
            depth: (w[1] - w[0]).abs(),
            count: 0.5,
            direction: Some(direction_between(w[0], w[1])),
        });
    }
    cycles
}

/// Rainflow decomposition into half-cycles; each closed cycle yields one
/// charge and one discharge half-cycle.
pub fn extract_half_cycles(extrema: &[f64]) -> Vec<HalfCycle> {
    let mut out = Vec::new();
    for c in rainflow_cycles(extrema) {
        match c.direction {
            None => {
                out.push(HalfCycle { depth: c.depth, direction: Direction::Charge });
                out.push(HalfCycle { depth: c.depth, direction: Direction::Discharge });
            }
            Some(direction) => out.push(HalfCycle { depth: c.depth, direction }),
        }
    }
    out
}

/// E · π · Σ κ · Ω(depth), in $.
pub fn accumulated_aging_cost(half_cycles: &[HalfCycle], params: &AgingParams, energy: f64) -> Result<f64> {
    let mut total = 0.0;
    for h in half_cycles {
        total += params.half_cycle_weight * aging_degree(params, h.depth)?;
    }
    Ok(energy * params.unit_capacity_cost * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(k1: f64, k2: f64, cost: f64) -> AgingParams {
        AgingParams {
            kappa1: k1,
            kappa2: k2,
            n_cycles_100: 1.0 / k1,
            unit_capacity_cost: cost,
            half_cycle_weight: 0.5,
            xi: 1e-6,
        }
    }

    #[test]
    fn kappa1_examples() {
        assert_relative_eq!(kappa1_from_cycle_life(1.0, 1500.0).unwrap(), 6.6667e-4, max_relative = 1e-4);
        assert_relative_eq!(kappa1_from_cycle_life(1.0, 6000.0).unwrap(), 1.6667e-4, max_relative = 1e-4);
        assert_eq!(kappa1_from_cycle_life(1.0, 1.0).unwrap(), 1.0);
        assert!(kappa1_from_cycle_life(0.0, 10.0).is_err());
    }

    #[test]
    fn aging_degree_examples() {
        let p = params(1e-3, 2.0, 300.0);
        assert_relative_eq!(aging_degree(&p, 1.0).unwrap(), 1e-3);
        assert_eq!(aging_degree(&p, 0.0).unwrap(), 0.0);
        assert_relative_eq!(aging_degree(&p, 0.5).unwrap(), 2.5e-4, max_relative = 1e-12);
        assert!(aging_degree(&p, 1.1).is_err());
    }

    #[test]
    fn extrema_updates() {
        let mut t = CycleTracker::new(0.5);
        t.last_direction = Some(Direction::Discharge);
        t.update_extrema(true, 0.45);
        assert_eq!(t.extrema, vec![0.5, 0.45]);
        assert_eq!(t.last_direction, Some(Direction::Charge));
        let before = t.clone();
        t.update_extrema(false, 0.9);
        assert_eq!(t, before);
        t.update_extrema(true, 0.47);
        assert_eq!(t.extrema, vec![0.5, 0.45, 0.47]);
    }

    #[test]
    fn observe_marks_fresh_segments() {
        let mut t = CycleTracker::new(0.5);
        assert!(t.observe(Direction::Discharge, 0.5));
        assert!(!t.observe(Direction::Discharge, 0.49));
        assert!(t.observe(Direction::Charge, 0.48));
        assert_eq!(t.extrema, vec![0.5, 0.48]);
    }

    #[test]
    fn cycle_depth_examples() {
        let mut t = CycleTracker::new(0.5);
        t.extrema.push(0.4);
        assert_relative_eq!(current_cycle_depth(&t, 0.5, 100.0, 2.0, 1000.0), 0.10005556, max_relative = 1e-7);
        assert_eq!(current_cycle_depth(&t, 0.4, 0.0, 2.0, 1000.0), 0.0);
        t.extrema.push(0.6);
        assert_relative_eq!(current_cycle_depth(&t, 0.4, 360.0, 10.0, 1000.0), 0.201, max_relative = 1e-12);
    }

    #[test]
    fn subgradient_examples() {
        let p = params(1e-3, 2.0, 300.0);
        let mut t = CycleTracker::new(0.6);
        t.extrema.push(0.5);
        assert_relative_eq!(aging_subgradient(&t, 0.4, &p, 2.0, false), 1.6667e-5, max_relative = 1e-4);
        // 0.5 * (2/3600) * 300 * 1e-6
        assert_relative_eq!(aging_subgradient(&t, 0.4, &p, 2.0, true), 8.3333e-8, max_relative = 1e-4);
    }

    #[test]
    fn subgradient_matches_forward_difference() {
        let p = params(1e-3, 2.0, 300.0);
        let (e, dt, upsilon, delta) = (1000.0, 2.0, 0.1, 1e-4);
        let f = |u: f64| e * p.unit_capacity_cost * 0.5 * aging_degree(&p, u).unwrap();
        let fd = (f(upsilon + delta) - f(upsilon)) / (delta * e / (dt / 3600.0));
        let mut t = CycleTracker::new(0.5);
        t.extrema.push(0.5);
        let g = aging_subgradient(&t, 0.5 - upsilon, &p, dt, false);
        assert_relative_eq!(g, fd, max_relative = 0.01);
    }

    #[test]
    fn taylor_examples() {
        let p = params(1e-3, 2.0, 300.0);
        assert_relative_eq!(taylor_omega_prime(&p, 0.1, 0.1), 2e-4, max_relative = 1e-12);
        assert_relative_eq!(taylor_omega_prime(&p, 0.1, 0.15), 3e-4, max_relative = 1e-12);
        let p = params(1e-3, 1.5, 300.0);
        let approx = taylor_omega_prime(&p, 0.04, 0.09);
        let exact = omega_prime(&p, 0.09);
        assert!(((approx - exact) / exact).abs() <= 0.2);
        // singular expansion point is floored
        assert!(taylor_omega_prime(&p, 0.0, 0.0).is_finite());
    }

    #[test]
    fn half_cycle_examples() {
        let h = extract_half_cycles(&[0.5, 0.3, 0.5]);
        assert_eq!(h.len(), 2);
        assert!(h.iter().all(|c| (c.depth - 0.2).abs() < 1e-12));
        assert!(h.iter().any(|c| c.direction == Direction::Charge));
        assert!(h.iter().any(|c| c.direction == Direction::Discharge));
        assert!(extract_half_cycles(&[0.5]).is_empty());
    }

    #[test]
    fn rainflow_five_point_example() {
        let seq = [0.8, 0.2, 0.6, 0.4, 0.7];
        let cycles = rainflow_cycles(&seq);
        let full: Vec<_> = cycles.iter().filter(|c| c.count == 1.0).collect();
        assert_eq!(full.len(), 1);
        assert!((full[0].depth - 0.2).abs() < 1e-12);
        let distinct_depth: f64 = cycles.iter().map(|c| c.depth).sum();
        assert_relative_eq!(distinct_depth, 1.3, max_relative = 1e-12);
        let halves: f64 = extract_half_cycles(&seq).iter().map(|h| h.depth).sum();
        assert_relative_eq!(halves, 1.5, max_relative = 1e-12);
    }

    #[test]
    fn turning_points_drop_monotone_runs() {
        assert_eq!(turning_points(&[0.5, 0.4, 0.4, 0.3, 0.6, 0.7, 0.2]), vec![0.5, 0.3, 0.7, 0.2]);
    }

    #[test]
    fn accumulated_cost_examples() {
        let p = params(1e-3, 2.0, 300.0);
        let h = extract_half_cycles(&[0.5, 0.3, 0.5]);
        assert_relative_eq!(accumulated_aging_cost(&h, &p, 1000.0).unwrap(), 12.0, max_relative = 1e-12);
        assert_eq!(accumulated_aging_cost(&[], &p, 1000.0).unwrap(), 0.0);
        let pb1 = AgingParams::with_cycle_life(1500.0, 200.0);
        let h = extract_half_cycles(&[1.0, 0.0, 1.0]);
        let cost = accumulated_aging_cost(&h, &pb1, 1066.0).unwrap();
        assert_relative_eq!(cost, 200.0 * 1066.0 / 1500.0, max_relative = 1e-12);
    }

    #[test]
    fn validation() {
        assert!(AgingParams::with_cycle_life(1500.0, 200.0).validate().is_ok());
        let mut p = AgingParams::with_cycle_life(1500.0, 200.0);
        p.kappa2 = 0.9;
        assert!(p.validate().is_err());
        let mut p = AgingParams::with_cycle_life(1500.0, 200.0);
        p.half_cycle_weight = 0.4;
        assert!(p.validate().is_err());
        let mut p = AgingParams::with_cycle_life(1e6, 200.0);
        p.xi = 1e-6;
        assert!(p.validate().is_err());
    }
}
