//! Offline activation lookup table over a uniform signal grid.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formulation::{build_offline_problem, Prices, SolveStatus};
use crate::model::{Direction, ModuleSpec};
use crate::solver::{solve_miqcp, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookupConfig {
    pub step_size: f64,
    /// SoC of every module when the table is built.
    pub reference_soc: f64,
}

impl Default for LookupConfig {
    fn default() -> Self {
        Self { step_size: 0.005, reference_soc: 0.5 }
    }
}

impl LookupConfig {
    pub fn validate(&self) -> Result<()> {
        grid_size(self.step_size)?;
        if !(0.0..=1.0).contains(&self.reference_soc) {
            return Err(Error::Validation(format!("reference_soc {} outside [0, 1]", self.reference_soc)));
        }
        Ok(())
    }
}

/// Number of grid intervals per side of zero.
fn grid_size(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Validation(format!("step_size must lie in (0, 1], got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("step_size {step} does not divide 1.0 into a whole grid")));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupEntry {
    pub r: f64,
    pub direction: Direction,
    /// Number of active modules at the optimum.
    pub count: usize,
    /// Ids of the active modules.
    pub active: Vec<String>,
    /// Set when the solve did not prove optimality.
    pub flagged: bool,
    pub objective: f64,
}

/// Optimal activation count per signal value.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    pub step_size: f64,
    pub reference_soc: f64,
    /// Entries in ascending grid order, from -1 to 1.
    pub entries: Vec<LookupEntry>,
}

#[derive(Serialize, Deserialize)]
struct LookupFile {
    step_size: f64,
    reference_soc: f64,
    entries: BTreeMap<String, LookupEntry>,
}

fn key(r: f64) -> String {
    format!("{r:.6}")
}

impl LookupTable {
    fn half(&self) -> usize {
        (self.entries.len() - 1) / 2
    }

    /// Grid value `k` steps from -1.
    pub fn grid_value(step: f64, half: usize, k: usize) -> f64 {
        (k as f64 - half as f64) * step
    }

    /// Index of the nearest grid point; exact midpoints go to the larger |r|.
    pub fn index_of(&self, r: f64) -> usize {
        let half = self.half() as f64;
        let x = r.clamp(-1.0, 1.0) / self.step_size;
        // f64::round rounds half away from zero
        let k = x.round().clamp(-half, half);
        (k + half) as usize
    }

    pub fn entry(&self, r: f64) -> &LookupEntry {
        &self.entries[self.index_of(r)]
    }

    /// Activation count at `r`, or `None` for a flagged entry.
    pub fn count(&self, r: f64) -> Option<usize> {
        let e = self.entry(r);
        (!e.flagged).then_some(e.count)
    }

    pub fn n_flagged(&self) -> usize {
        self.entries.iter().filter(|e| e.flagged).count()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LookupFile {
            step_size: self.step_size,
            reference_soc: self.reference_soc,
            entries: self.entries.iter().map(|e| (key(e.r), e.clone())).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LookupFile = serde_json::from_str(text)?;
        let half = grid_size(file.step_size)?;
        let mut entries = Vec::with_capacity(2 * half + 1);
        for k in 0..=2 * half {
            let r = Self::grid_value(file.step_size, half, k);
            let e = file
                .entries
                .get(&key(r))
                .ok_or_else(|| Error::Validation(format!("lookup file has no entry for r = {}", key(r))))?;
            entries.push(e.clone());
        }
        if file.entries.len() != entries.len() {
            return Err(Error::Validation(format!(
                "lookup file has {} entries, expected {}",
                file.entries.len(),
                entries.len()
            )));
        }
        Ok(Self { step_size: file.step_size, reference_soc: file.reference_soc, entries })
    }
}

/// Solve the single-step activation problem at every grid point with all
/// modules at `reference_soc`.
pub fn build_lookup_table(
    specs: &[ModuleSpec],
    c_bid: f64,
    prices: Prices,
    dt: f64,
    lookup: &LookupConfig,
    solver: &SolverConfig,
) -> Result<LookupTable> {
    lookup.validate()?;
    let half = grid_size(lookup.step_size)?;
    let socs: Vec<f64> = specs
        .iter()
        .map(|s| lookup.reference_soc.clamp(s.pack.soc_min, s.pack.soc_max))
        .collect();
    let entries = (0..=2 * half)
        .into_par_iter()
        .map(|k| {
            let r = LookupTable::grid_value(lookup.step_size, half, k);
            let problem = build_offline_problem(specs, &socs, r, c_bid, prices, dt)?;
            let direction = problem.directions[0];
            let fallback = |objective: f64| LookupEntry {
                r,
                direction,
                count: specs.len(),
                active: specs.iter().map(|s| s.id.clone()).collect(),
                flagged: true,
                objective,
            };
            let sol = match solve_miqcp(&problem, solver) {
                Ok(sol) => sol,
                Err(_) => return Ok(fallback(f64::NAN)),
            };
            if !sol.has_point() {
                return Ok(fallback(f64::NAN));
            }
            let active: Vec<String> = problem
                .vars
                .iter()
                .zip(&problem.modules)
                .filter(|(v, _)| sol.values[v[0].alpha] > 0.5)
                .map(|(_, id)| id.clone())
                .collect();
            Ok(LookupEntry {
                r,
                direction,
                count: active.len(),
                active,
                flagged: sol.status != SolveStatus::Optimal,
                objective: sol.objective,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LookupTable { step_size: lookup.step_size, reference_soc: lookup.reference_soc, entries })
}
