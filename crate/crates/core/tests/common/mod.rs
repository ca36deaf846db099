#![allow(dead_code)]

use ffr_core::aging::AgingParams;
use ffr_core::formulation::{
    activations_from_matrix, build_realtime_problem, fix_activations, Prices, ProblemInstance, Solution,
};
use ffr_core::model::{ConverterParams, Direction, ModuleSpec, ModuleState, PackParams};
use ffr_core::solver::{solve_qcp, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn converter() -> ConverterParams {
    ConverterParams {
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
    }
}

pub fn toy_spec(id: &str, p_max: f64, r_bat: f64, energy: f64, cycles: f64) -> ModuleSpec {
    ModuleSpec {
        id: id.into(),
        pack: PackParams {
            r_bat,
            energy_capacity: energy,
            k0: 380.0,
            k1: 40.0,
            soc_min: 0.1,
            soc_max: 0.9,
            i_min: 0.0,
            i_max: 300.0,
            p_max,
        },
        converter: converter(),
        aging: AgingParams::with_cycle_life(cycles, 300.0),
    }
}

/// Three modules of different quality.
pub fn toy_fleet() -> Vec<ModuleSpec> {
    vec![
        toy_spec("a", 100.0, 0.03, 200.0, 3000.0),
        toy_spec("b", 80.0, 0.08, 150.0, 1500.0),
        toy_spec("c", 120.0, 0.05, 250.0, 5000.0),
    ]
}

/// Best objective over every activation pattern, each solved as a QCP.
pub fn enumerate_patterns(problem: &ProblemInstance, solver: &SolverConfig) -> Option<(f64, Vec<Vec<bool>>)> {
    let n = problem.modules.len();
    let h = problem.horizon;
    let mut best: Option<(f64, Vec<Vec<bool>>)> = None;
    for mask in 0u64..(1u64 << (n * h)) {
        let alpha: Vec<Vec<bool>> = (0..n).map(|m| (0..h).map(|t| mask >> (m * h + t) & 1 == 1).collect()).collect();
        let fixed = fix_activations(problem, &activations_from_matrix(problem, &alpha)).unwrap();
        let sol: Solution = solve_qcp(&fixed, solver).unwrap();
        if sol.has_point() && best.as_ref().is_none_or(|b| sol.objective < b.0) {
            best = Some((sol.objective, alpha));
        }
    }
    best
}

/// Random 2-3 module, 1-2 step real-time instance with aging history.
pub fn toy_instance(seed: u64) -> ProblemInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let n = if u(0.0, 1.0) < 0.5 { 2 } else { 3 };
    let h = if u(0.0, 1.0) < 0.5 { 1 } else { 2 };
    let specs: Vec<ModuleSpec> = (0..n)
        .map(|i| toy_spec(&format!("m{i}"), u(40.0, 150.0), u(0.02, 0.12), u(100.0, 300.0), u(1000.0, 6000.0)))
        .collect();
    let states: Vec<ModuleState> = (0..n)
        .map(|_| {
            let soc = u(0.2, 0.8);
            let mut st = ModuleState::new(soc);
            st.tracker.extrema = vec![(soc + u(-0.1, 0.1)).clamp(0.1, 0.9)];
            st.tracker.last_direction = Some(if u(0.0, 1.0) < 0.5 { Direction::Charge } else { Direction::Discharge });
            st
        })
        .collect();
    let r: Vec<f64> = (0..h).map(|_| u(-1.0, 1.0)).collect();
    build_realtime_problem(&specs, &states, &r, Prices::default(), u(50.0, 250.0), 2.0).unwrap()
}
