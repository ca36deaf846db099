//! Run-level metrics.

use serde::{Deserialize, Serialize};

use crate::aging::{accumulated_aging_cost, extract_half_cycles};
use crate::error::{Error, Result};
use crate::model::{ModuleSpec, ModuleState};

use super::mpc::{soc_deviation, StepRecord};
use super::Method;

/// Row names of the method comparison table, in order.
pub const TABLE_ROWS: [&str; 8] = [
    "Total energy throughput/kWh",
    "Total energy loss/kWh",
    "Regulation penalty cost/$",
    "Average prediction error/%",
    "Aging cost/$",
    "Total running time/s",
    "Average operation efficiency/%",
    "SoC deviation reduction/%",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub energy_throughput_kwh: f64,
    pub energy_loss_kwh: f64,
    pub penalty_cost: f64,
    pub aging_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocDeviation {
    pub initial: f64,
    pub r#final: f64,
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub steps: usize,
    pub totals: Totals,
    /// Throughput-weighted mean of the per-step fleet efficiency.
    pub average_efficiency: f64,
    pub soc_deviation: SocDeviation,
    /// Mean |r_pred - r_actual| of the one-step forecast, as a fraction of
    /// the bid capacity.
    pub avg_prediction_error: f64,
    /// Same over every forecast horizon position with a realized value.
    pub horizon_prediction_error: f64,
    /// Σ |demand - delivered| / Σ demand.
    pub tracking_error: f64,
    pub aging_cost_per_module: Vec<f64>,
    pub running_time_s: f64,
    pub mean_step_time_s: f64,
    pub p99_step_time_s: f64,
    pub solver_calls: usize,
    pub replanned_steps: usize,
    pub fallback_steps: usize,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
}

impl RunReport {
    /// Values in the order of [`TABLE_ROWS`], with fractions as percent.
    pub fn table_values(&self) -> [f64; 8] {
        [
            self.totals.energy_throughput_kwh,
            self.totals.energy_loss_kwh,
            self.totals.penalty_cost,
            100.0 * self.avg_prediction_error,
            self.totals.aging_cost,
            self.running_time_s,
            100.0 * self.average_efficiency,
            100.0 * self.soc_deviation.reduction,
        ]
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).ceil() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Aggregate a finished run. `states` are the final module states and
/// `initial_socs` the SoCs before the first step.
pub fn compute_metrics(
    method: Method,
    records: &[StepRecord],
    specs: &[ModuleSpec],
    states: &[ModuleState],
    initial_socs: &[f64],
) -> Result<RunReport> {
    if records.is_empty() {
        return Err(Error::Validation("cannot compute metrics of an empty run".into()));
    }
    let throughput: f64 = records.iter().map(|r| r.throughput_kwh).sum();
    let loss: f64 = records.iter().map(|r| r.loss_kwh).sum();
    let penalty: f64 = records.iter().map(|r| r.penalty_cost).sum();

    let mut aging_per_module = Vec::with_capacity(specs.len());
    for (spec, st) in specs.iter().zip(states) {
        let mut extrema = st.tracker.extrema.clone();
        extrema.push(st.soc);
        let halves = extract_half_cycles(&extrema);
        aging_per_module.push(accumulated_aging_cost(&halves, &spec.aging, spec.pack.energy_capacity)?);
    }
    let aging: f64 = aging_per_module.iter().sum();

    let average_efficiency = if throughput > 0.0 {
        records.iter().map(|r| r.eff_bess * r.throughput_kwh).sum::<f64>() / throughput
    } else {
        0.0
    };
    let initial = soc_deviation(initial_socs.iter().copied());
    let fin = soc_deviation(states.iter().map(|s| s.soc));

    let n = records.len() as f64;
    let avg_prediction_error = records.iter().map(|r| (r.r_pred - r.r_actual).abs()).sum::<f64>() / n;
    let mut h_err = 0.0;
    let mut h_cnt = 0usize;
    for (t, rec) in records.iter().enumerate() {
        for (k, &f) in rec.forecast.iter().enumerate() {
            if let Some(actual) = records.get(t + k) {
                h_err += (f - actual.r_actual).abs();
                h_cnt += 1;
            }
        }
    }
    let demand: f64 = records.iter().map(|r| r.demand_kw).sum();
    let mismatch: f64 = records.iter().map(|r| r.shortfall_kw).sum();

    let mut times: Vec<f64> = records.iter().map(|r| r.step_time).collect();
    let running: f64 = times.iter().sum();
    times.sort_by(f64::total_cmp);

    Ok(RunReport {
        method,
        steps: records.len(),
        totals: Totals {
            energy_throughput_kwh: throughput,
            energy_loss_kwh: loss,
            penalty_cost: penalty,
            aging_cost: aging,
        },
        average_efficiency,
        soc_deviation: SocDeviation { initial, r#final: fin, reduction: initial - fin },
        avg_prediction_error,
        horizon_prediction_error: if h_cnt > 0 { h_err / h_cnt as f64 } else { 0.0 },
        tracking_error: if demand > 0.0 { mismatch / demand } else { 0.0 },
        aging_cost_per_module: aging_per_module,
        running_time_s: running,
        mean_step_time_s: running / n,
        p99_step_time_s: percentile(&times, 0.99),
        solver_calls: records.iter().map(|r| r.solver_calls).sum(),
        replanned_steps: records.iter().filter(|r| r.replanned).count(),
        fallback_steps: records.iter().filter(|r| r.fallback).count(),
        records: records.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::tests::small_spec;
    use crate::model::{Direction, ModuleSpec};
    use crate::scheduler::mpc::ModuleRecord;
    use approx::assert_relative_eq;

    fn record(t: usize, p: f64, eff: f64) -> StepRecord {
        StepRecord {
            t,
            r_actual: 0.0,
            r_pred: 0.0,
            forecast: vec![],
            direction: Direction::Discharge,
            demand_kw: p,
            p_mbss_kw: p,
            shortfall_kw: 0.0,
            penalty_cost: 0.0,
            loss_kwh: 0.0,
            throughput_kwh: p / 1800.0,
            eff_bess: eff,
            d_soc: 0.0,
            objective: None,
            breakdown: None,
            solver_calls: 0,
            solve_time: 0.0,
            step_time: 0.0,
            replanned: false,
            fallback: false,
            modules: vec![ModuleRecord {
                p_mod: p,
                p_bat: p / eff.max(1e-9),
                i_bat: 0.0,
                loss_w: 0.0,
                soc_prev: 0.5,
                soc: 0.5,
                alpha: p > 0.0,
                aging_subgrad: 0.0,
            }],
        }
    }

    fn one() -> Vec<ModuleSpec> {
        vec![small_spec("a", 100.0, 0.05)]
    }

    #[test]
    fn constant_efficiency_average() {
        let recs: Vec<_> = (0..5).map(|t| record(t, 10.0 + t as f64, 0.95)).collect();
        let st = vec![ModuleState::new(0.5)];
        let rep = compute_metrics(Method::Maxpower, &recs, &one(), &st, &[0.5]).unwrap();
        assert_relative_eq!(rep.average_efficiency, 0.95, max_relative = 1e-12);
    }

    #[test]
    fn two_module_soc_deviation() {
        let specs = vec![small_spec("a", 100.0, 0.05), small_spec("b", 100.0, 0.05)];
        let st = vec![ModuleState::new(0.4), ModuleState::new(0.6)];
        let rep = compute_metrics(Method::Maxpower, &[record(0, 0.0, 0.0)], &specs, &st, &[0.4, 0.6]).unwrap();
        assert_relative_eq!(rep.soc_deviation.initial, 0.1, max_relative = 1e-12);
        assert_relative_eq!(rep.soc_deviation.r#final, 0.1, max_relative = 1e-12);
    }

    #[test]
    fn zero_dispatch_run() {
        let recs: Vec<_> = (0..3).map(|t| record(t, 0.0, 0.0)).collect();
        let st = vec![ModuleState::new(0.5)];
        let rep = compute_metrics(Method::Capacity, &recs, &one(), &st, &[0.5]).unwrap();
        assert_eq!(rep.totals.energy_throughput_kwh, 0.0);
        assert_eq!(rep.totals.energy_loss_kwh, 0.0);
        assert_eq!(rep.totals.aging_cost, 0.0);
    }

    #[test]
    fn empty_run_rejected() {
        assert!(compute_metrics(Method::Capacity, &[], &one(), &[ModuleState::new(0.5)], &[0.5]).is_err());
    }
}
