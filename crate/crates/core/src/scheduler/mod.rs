//! Priority-evaluation MPC: the offline activation lookup table, online
//! module scoring and selection, per-step dispatch, the proportional
//! baseline allocators and run metrics.

mod baseline;
mod lookup;
mod metrics;
mod mpc;
mod priority;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use baseline::{baseline_capacity, baseline_maxpower, Dispatch};
pub use lookup::{build_lookup_table, LookupConfig, LookupEntry, LookupTable};
pub use metrics::{compute_metrics, SocDeviation, Totals, RunReport, TABLE_ROWS};
pub use mpc::{mpc_step, simulate, ModuleRecord, RunContext, Simulator, StepRecord};
pub use priority::{
    efficiency_estimates, score_modules, select_activations, EfficiencySets, PriorityConfig, ScoredModule,
};

/// Dispatch strategy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Lookup-guided activation with loss, penalty and aging in the objective.
    #[default]
    PerformanceAware,
    /// As above without the aging term.
    EfficiencyAware,
    /// Shares proportional to rated power, all modules on.
    Maxpower,
    /// Shares proportional to remaining adjustable capacity.
    Capacity,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::PerformanceAware, Method::EfficiencyAware, Method::Maxpower, Method::Capacity];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PerformanceAware => "performance_aware",
            Method::EfficiencyAware => "efficiency_aware",
            Method::Maxpower => "maxpower",
            Method::Capacity => "capacity",
        }
    }

    /// Whether the method dispatches through the optimizer.
    pub fn uses_solver(self) -> bool {
        matches!(self, Method::PerformanceAware | Method::EfficiencyAware)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown method {s:?}; expected one of performance_aware, efficiency_aware, maxpower, capacity"
                ))
            })
    }
}
