mod common;

use approx::assert_relative_eq;
use common::{enumerate_patterns, toy_fleet, toy_spec};
use ffr_core::config::MarketConfig;
use ffr_core::formulation::{build_offline_problem, Prices};
use ffr_core::model::{module_power_balance, ModuleState};
use ffr_core::report::Comparison;
use ffr_core::scheduler::{build_lookup_table, compute_metrics, LookupConfig, Method, PriorityConfig, Simulator};
use ffr_core::signal::PredictorConfig;
use ffr_core::solver::SolverConfig;

fn market(c_bid: f64) -> MarketConfig {
    MarketConfig { c_bid, dt: 2.0, horizon: 3, prices: Prices::default() }
}

fn coarse() -> LookupConfig {
    LookupConfig { step_size: 0.05, reference_soc: 0.5 }
}

#[test]
fn toy_lookup_matches_enumeration() {
    let specs = toy_fleet();
    let solver = SolverConfig::default();
    let table = build_lookup_table(&specs, 250.0, Prices::default(), 2.0, &coarse(), &solver).unwrap();
    assert_eq!(table.entries.len(), 41);
    assert_eq!(table.entry(0.0).count, 0);
    assert_eq!(table.n_flagged(), 0);
    for r in [1.0, -1.0, 0.35, -0.6] {
        let p = build_offline_problem(&specs, &[0.5; 3], r, 250.0, Prices::default(), 2.0).unwrap();
        let (_, alpha) = enumerate_patterns(&p, &solver).unwrap();
        let expect = alpha.iter().filter(|row| row[0]).count();
        assert_eq!(table.entry(r).count, expect, "r = {r}");
    }
}

fn simulator(specs: Vec<ffr_core::model::ModuleSpec>, socs: &[f64], method: Method, c_bid: f64) -> Simulator {
    let lookup = method
        .uses_solver()
        .then(|| build_lookup_table(&specs, c_bid, Prices::default(), 2.0, &coarse(), &SolverConfig::default()).unwrap());
    Simulator::new(
        specs,
        socs.iter().map(|&s| ModuleState::new(s)).collect(),
        method,
        market(c_bid),
        PriorityConfig::default(),
        SolverConfig::default(),
        PredictorConfig::default(),
        lookup,
    )
    .unwrap()
}

#[test]
fn zero_signal_gives_zero_dispatch() {
    let mut sim = simulator(toy_fleet(), &[0.4, 0.5, 0.6], Method::PerformanceAware, 200.0);
    sim.run(&[0.0; 20]).unwrap();
    for rec in &sim.records {
        assert_eq!(rec.p_mbss_kw, 0.0);
        assert!(rec.modules.iter().all(|m| m.p_mod == 0.0 && !m.alpha));
    }
    let socs: Vec<f64> = sim.states.iter().map(|s| s.soc).collect();
    assert_eq!(socs, vec![0.4, 0.5, 0.6]);
}

#[test]
fn single_module_tracks_small_constant_signal() {
    let spec = toy_spec("solo", 100.0, 0.04, 200.0, 3000.0);
    let mut sim = simulator(vec![spec.clone()], &[0.5], Method::PerformanceAware, 100.0);
    sim.run(&[0.2; 10]).unwrap();
    for rec in &sim.records {
        assert_relative_eq!(rec.demand_kw, 20.0, max_relative = 1e-12);
        assert_relative_eq!(rec.p_mbss_kw, 20.0, max_relative = 1e-9);
        let m = &rec.modules[0];
        let pb = module_power_balance(&spec, m.i_bat, m.soc_prev, rec.direction, true).unwrap();
        assert_relative_eq!(pb.p_mod, m.p_mod, max_relative = 1e-12);
        assert_relative_eq!(pb.p_bat, m.p_bat, max_relative = 1e-12);
        assert_relative_eq!(m.p_bat - m.p_mod, m.loss_w / 1000.0, max_relative = 1e-9);
        assert_relative_eq!((m.soc_prev - m.soc) * 200.0, m.p_bat * 2.0 / 3600.0, max_relative = 1e-9);
    }
}

#[test]
fn baselines_make_no_solver_calls() {
    let signal: Vec<f64> = (0..60).map(|k| (k as f64 * 0.2).sin() * 0.8).collect();
    for method in [Method::Maxpower, Method::Capacity] {
        let mut sim = simulator(toy_fleet(), &[0.4, 0.5, 0.6], method, 200.0);
        sim.run(&signal).unwrap();
        let rep = sim.report().unwrap();
        assert_eq!(rep.solver_calls, 0);
        assert!(rep.totals.energy_throughput_kwh > 0.0);
    }
}

#[test]
fn totals_match_record_sums() {
    let signal: Vec<f64> = (0..80).map(|k| (k as f64 * 0.15).sin() * 0.6).collect();
    let mut sim = simulator(toy_fleet(), &[0.45, 0.5, 0.62], Method::PerformanceAware, 200.0);
    sim.run(&signal).unwrap();
    let rep = sim.report().unwrap();
    let loss: f64 = rep.records.iter().map(|r| r.loss_kwh).sum();
    let tp: f64 = rep.records.iter().map(|r| r.throughput_kwh).sum();
    let pen: f64 = rep.records.iter().map(|r| r.penalty_cost).sum();
    assert_relative_eq!(rep.totals.energy_loss_kwh, loss, max_relative = 1e-9);
    assert_relative_eq!(rep.totals.energy_throughput_kwh, tp, max_relative = 1e-9);
    assert_relative_eq!(rep.totals.penalty_cost, pen, max_relative = 1e-9);
    assert_eq!(rep.fallback_steps, 0);
}

#[test]
fn identical_methods_give_identical_columns() {
    let signal: Vec<f64> = (0..40).map(|k| (k as f64 * 0.3).cos() * 0.5).collect();
    let run = || {
        let mut sim = simulator(toy_fleet(), &[0.4, 0.5, 0.6], Method::Capacity, 200.0);
        sim.run(&signal).unwrap();
        compute_metrics(Method::Capacity, &sim.records, &sim.specs, &sim.states, &sim.initial_socs).unwrap()
    };
    let table = Comparison::new(&[run(), run()]).unwrap();
    assert_eq!(table.rows.len(), 8);
    for row in &table.rows {
        if row.metric.starts_with("Total running time") {
            continue;
        }
        assert_eq!(row.values[0], row.values[1], "{}", row.metric);
    }
}
