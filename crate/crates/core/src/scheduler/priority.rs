//! Online module scoring and activation selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    current_for_module_power, module_efficiency, module_power_balance, module_power_range, Direction, ModuleSpec,
    ModuleState,
};

use super::lookup::LookupTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorityConfig {
    pub w_eff: f64,
    pub w_soc: f64,
    /// Normalize the discharge efficiency score by the charge-set range
    /// instead of the discharge-set range.
    pub discharge_norm_uses_charge_set: bool,
}

impl Default for PriorityConfig {
    fn default() -> Self {
        Self { w_eff: 0.5, w_soc: 0.5, discharge_norm_uses_charge_set: false }
    }
}

impl PriorityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_eff >= 0.0 && self.w_soc >= 0.0 && (self.w_eff + self.w_soc - 1.0).abs() < 1e-9) {
            return Err(Error::Validation(format!(
                "priority weights must be >= 0 and sum to 1, got {} and {}",
                self.w_eff, self.w_soc
            )));
        }
        Ok(())
    }
}

/// Per-module efficiency estimates in both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencySets {
    pub charge: Vec<f64>,
    pub discharge: Vec<f64>,
}

fn efficiency_at(spec: &ModuleSpec, soc: f64, p_mod: f64, dt: f64, direction: Direction) -> f64 {
    let (lo, hi) = module_power_range(spec, soc, dt, direction);
    if hi <= 0.0 {
        return 0.0;
    }
    let p = p_mod.clamp(lo, hi);
    let Some(i) = current_for_module_power(spec, soc, p, direction) else {
        return 0.0;
    };
    match module_power_balance(spec, i, soc, direction, true) {
        Ok(pb) => module_efficiency(pb.p_mod, pb.p_bat, direction).unwrap_or(0.0),
        Err(_) => 0.0,
    }
}

/// Efficiency of every module when carrying `p_per_module` kW external power,
/// clamped to what each module can deliver this interval.
pub fn efficiency_estimates(specs: &[ModuleSpec], states: &[ModuleState], p_per_module: f64, dt: f64) -> EfficiencySets {
    let eval = |d| {
        specs
            .iter()
            .zip(states)
            .map(|(s, st)| efficiency_at(s, st.soc, p_per_module, dt, d))
            .collect()
    };
    EfficiencySets { charge: eval(Direction::Charge), discharge: eval(Direction::Discharge) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredModule {
    pub index: usize,
    pub id: String,
    pub eff_score: f64,
    pub soc_score: f64,
    pub total: f64,
}

fn span(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn normalize(x: f64, lo: f64, range: f64) -> f64 {
    if range <= 0.0 {
        0.5
    } else {
        (x - lo) / range
    }
}

/// Rank modules for `direction`: highest total score first, ties by id.
pub fn score_modules(
    specs: &[ModuleSpec],
    states: &[ModuleState],
    sets: &EfficiencySets,
    direction: Direction,
    config: &PriorityConfig,
) -> Vec<ScoredModule> {
    let socs: Vec<f64> = states.iter().map(|s| s.soc).collect();
    let (soc_lo, soc_hi) = span(&socs);
    let (eta, norm_set) = match direction {
        Direction::Charge => (&sets.charge, &sets.charge),
        Direction::Discharge if config.discharge_norm_uses_charge_set => (&sets.discharge, &sets.charge),
        Direction::Discharge => (&sets.discharge, &sets.discharge),
    };
    let (eta_lo, _) = span(eta);
    let (n_lo, n_hi) = span(norm_set);
    let eta_range = n_hi - n_lo;
    let mut out: Vec<ScoredModule> = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let eff_score = normalize(eta[i], eta_lo, eta_range);
            let soc_score = match direction {
                // emptiest charges first
                Direction::Charge => normalize(soc_hi + soc_lo - socs[i], soc_lo, soc_hi - soc_lo),
                Direction::Discharge => normalize(socs[i], soc_lo, soc_hi - soc_lo),
            };
            ScoredModule {
                index: i,
                id: spec.id.clone(),
                eff_score,
                soc_score,
                total: config.w_eff * eff_score + config.w_soc * soc_score,
            }
        })
        .collect();
    out.sort_by(|a, b| b.total.partial_cmp(&a.total).unwrap_or(Ordering::Equal).then_with(|| a.id.cmp(&b.id)));
    out
}

/// Activation matrix `[module][step]`: at every step the top `N` modules of
/// that step's ranking, where `N` is the lookup count at the predicted
/// signal. A flagged entry activates every ranked module.
pub fn select_activations(
    lookup: &LookupTable,
    rankings: &[Vec<usize>],
    predicted: &[f64],
    n_modules: usize,
) -> Vec<Vec<bool>> {
    let mut alpha = vec![vec![false; predicted.len()]; n_modules];
    for (t, (&r, ranking)) in predicted.iter().zip(rankings).enumerate() {
        let n = lookup.count(r).unwrap_or(ranking.len());
        for &m in ranking.iter().take(n) {
            alpha[m][t] = true;
        }
    }
    alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::tests::small_spec;
    use crate::scheduler::lookup::LookupEntry;
    use approx::assert_relative_eq;

    fn fleet(n: usize) -> Vec<ModuleSpec> {
        (0..n).map(|i| small_spec(&format!("m{}", i + 1), 100.0, 0.05)).collect()
    }

    fn states(socs: &[f64]) -> Vec<ModuleState> {
        socs.iter().map(|&s| ModuleState::new(s)).collect()
    }

    #[test]
    fn midpoint_efficiency_scores_half() {
        let specs = fleet(3);
        let sets = EfficiencySets { charge: vec![0.90, 0.95, 1.00], discharge: vec![0.90, 0.95, 1.00] };
        let st = states(&[0.5, 0.5, 0.5]);
        for d in [Direction::Charge, Direction::Discharge] {
            let ranked = score_modules(&specs, &st, &sets, d, &PriorityConfig::default());
            let m2 = ranked.iter().find(|s| s.index == 1).unwrap();
            assert_relative_eq!(m2.eff_score, 0.5, max_relative = 1e-12);
            // identical SoCs: degenerate rule
            assert!(ranked.iter().all(|s| s.soc_score == 0.5));
        }
    }

    #[test]
    fn emptiest_charges_first() {
        let specs = fleet(2);
        let sets = EfficiencySets { charge: vec![0.9, 0.9], discharge: vec![0.9, 0.9] };
        let st = states(&[0.4, 0.6]);
        let ranked = score_modules(&specs, &st, &sets, Direction::Charge, &PriorityConfig::default());
        assert_eq!(ranked[0].index, 0);
        assert_eq!(ranked[0].soc_score, 1.0);
        assert_eq!(ranked[1].soc_score, 0.0);
        let ranked = score_modules(&specs, &st, &sets, Direction::Discharge, &PriorityConfig::default());
        assert_eq!(ranked[0].index, 1);
        assert_eq!(ranked[0].soc_score, 1.0);
    }

    #[test]
    fn ties_break_by_id() {
        let specs = fleet(3);
        let sets = EfficiencySets { charge: vec![0.9; 3], discharge: vec![0.9; 3] };
        let ranked = score_modules(&specs, &states(&[0.5; 3]), &sets, Direction::Charge, &PriorityConfig::default());
        let ids: Vec<_> = ranked.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["m1", "m2", "m3"]);
    }

    #[test]
    fn printed_discharge_normalization() {
        let specs = fleet(2);
        let sets = EfficiencySets { charge: vec![0.8, 1.0], discharge: vec![0.9, 0.95] };
        let st = states(&[0.5, 0.5]);
        let cfg = PriorityConfig { discharge_norm_uses_charge_set: true, ..Default::default() };
        let ranked = score_modules(&specs, &st, &sets, Direction::Discharge, &cfg);
        let top = ranked.iter().find(|s| s.index == 1).unwrap();
        assert_relative_eq!(top.eff_score, 0.25, max_relative = 1e-12);
        let ranked = score_modules(&specs, &st, &sets, Direction::Discharge, &PriorityConfig::default());
        let top = ranked.iter().find(|s| s.index == 1).unwrap();
        assert_relative_eq!(top.eff_score, 1.0, max_relative = 1e-12);
    }

    fn lookup_with(counts: &[(f64, usize)]) -> LookupTable {
        let entries = [-1.0, -0.5, 0.0, 0.5, 1.0]
            .iter()
            .map(|&r| LookupEntry {
                r,
                direction: Direction::from_signed(r),
                count: counts.iter().find(|c| c.0 == r).map_or(0, |c| c.1),
                active: vec![],
                flagged: false,
                objective: 0.0,
            })
            .collect();
        LookupTable { step_size: 0.5, reference_soc: 0.5, entries }
    }

    #[test]
    fn top_n_semantics() {
        let lookup = lookup_with(&[(0.5, 2), (1.0, 3)]);
        let ranking = vec![2, 0, 1];
        let alpha = select_activations(&lookup, &[ranking.clone(), ranking.clone(), ranking], &[0.5, 0.0, 1.0], 3);
        assert!(alpha[2][0]);
        assert!(alpha[0][0]);
        assert!(!alpha[1][0]);
        assert!((0..3).all(|m| !alpha[m][1]));
        assert!((0..3).all(|m| alpha[m][2]));
    }

    #[test]
    fn flagged_entry_activates_all() {
        let mut lookup = lookup_with(&[(0.5, 1)]);
        lookup.entries[3].flagged = true;
        let alpha = select_activations(&lookup, &[vec![1, 0]], &[0.5], 2);
        assert!(alpha[0][0] && alpha[1][0]);
    }

    #[test]
    fn estimates_are_fractions() {
        let specs = fleet(2);
        let sets = efficiency_estimates(&specs, &states(&[0.3, 0.7]), 20.0, 2.0);
        for e in sets.charge.iter().chain(&sets.discharge) {
            assert!(*e > 0.0 && *e < 1.0, "{e}");
        }
    }
}
