//! Proportional baseline allocators.

use serde::{Deserialize, Serialize};

use crate::model::{module_power_range, Direction, ModuleSpec, ModuleState};

/// External power target per module (kW) and the demand left unserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub p_mod: Vec<f64>,
    pub shortfall: f64,
}

/// Split `demand` by `weights` and clip each share to what the module can
/// deliver this interval. Clipped power is not redistributed.
fn proportional(
    specs: &[ModuleSpec],
    states: &[ModuleState],
    weights: &[f64],
    demand: f64,
    direction: Direction,
    dt: f64,
) -> Dispatch {
    let total: f64 = weights.iter().sum();
    if demand <= 0.0 || total <= 0.0 {
        return Dispatch { p_mod: vec![0.0; specs.len()], shortfall: demand.max(0.0) };
    }
    let p_mod: Vec<f64> = specs
        .iter()
        .zip(states)
        .zip(weights)
        .map(|((spec, st), w)| {
            let share = demand * w / total;
            let (lo, hi) = module_power_range(spec, st.soc, dt, direction);
            if share <= 0.0 || share < lo {
                0.0
            } else {
                share.min(hi)
            }
        })
        .collect();
    let served: f64 = p_mod.iter().sum();
    Dispatch { p_mod, shortfall: (demand - served).max(0.0) }
}

/// Shares proportional to rated power.
pub fn baseline_maxpower(
    specs: &[ModuleSpec],
    states: &[ModuleState],
    demand: f64,
    direction: Direction,
    dt: f64,
) -> Dispatch {
    let weights: Vec<f64> = specs.iter().map(|s| s.pack.p_max).collect();
    proportional(specs, states, &weights, demand, direction, dt)
}

/// Shares proportional to the energy each module can still move in
/// `direction` before reaching its SoC bound.
pub fn baseline_capacity(
    specs: &[ModuleSpec],
    states: &[ModuleState],
    demand: f64,
    direction: Direction,
    dt: f64,
) -> Dispatch {
    let weights: Vec<f64> = specs
        .iter()
        .zip(states)
        .map(|(s, st)| {
            let headroom = match direction {
                Direction::Discharge => st.soc - s.pack.soc_min,
                Direction::Charge => s.pack.soc_max - st.soc,
            };
            headroom.max(0.0) * s.pack.energy_capacity
        })
        .collect();
    proportional(specs, states, &weights, demand, direction, dt)
}
