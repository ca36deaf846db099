//! Scenario configuration: fleet description, market settings, predictor,
//! solver and method selection.
//!
//! Fleet entries use nameplate data (nominal power, energy, cycle life,
//! cell voltage, nominal current, operating efficiency) and are turned into
//! [`ModuleSpec`]s by [`FleetEntry::to_spec`]:
//!
//! - pack voltage is `P / I`, rounded to a whole number of cells;
//! - the OCV slope is `n_cells * k1_cell`, with the intercept chosen so the
//!   OCV at SoC 0.5 equals the nominal pack voltage;
//! - unless given explicitly, `r_bat` is calibrated so that the module loses
//!   `1 - efficiency` of its internal power at nominal current.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aging::{kappa1_from_cycle_life, AgingParams, DEFAULT_KAPPA2, DEFAULT_XI};
use crate::error::{Error, Result};
use crate::formulation::Prices;
use crate::model::{validate_fleet, ConverterParams, ModuleSpec, ModuleState, PackParams};
use crate::scheduler::{LookupConfig, Method, PriorityConfig};
use crate::signal::{load_regd_csv, synth_regd, PredictorConfig, RegDSeries, SynthParams};
use crate::solver::SolverConfig;

/// Bundled ten-module fleet with nameplate data from a field installation
/// and placeholder converter constants.
pub const M5BAT_FIXTURE: &str = include_str!("../fixtures/m5bat.json");

/// Placeholder converter constants used when a fleet entry has none.
pub fn placeholder_converter() -> ConverterParams {
    ConverterParams {
        r_on: 2e-3,
        dcr: 3e-3,
        v_dc: 1000.0,
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

fn default_soc_min() -> f64 {
    0.1
}
fn default_soc_max() -> f64 {
    0.9
}
fn default_k1_cell() -> f64 {
    0.3
}
fn default_kappa2() -> f64 {
    DEFAULT_KAPPA2
}
fn default_xi() -> f64 {
    DEFAULT_XI
}
fn default_depth_100() -> f64 {
    1.0
}

/// Aging block of a fleet entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgingBlock {
    /// Replacement cost, $/kWh.
    pub unit_capacity_cost: f64,
    #[serde(default = "default_kappa2")]
    pub kappa2: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// Depth at which the rated cycle number applies.
    #[serde(default = "default_depth_100")]
    pub depth_100: f64,
}

/// One module in nameplate form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetEntry {
    pub id: String,
    pub nominal_power_kw: f64,
    pub nominal_energy_kwh: f64,
    pub cycle_number: f64,
    /// Nominal cell voltage, V.
    pub cell_voltage: f64,
    /// Nominal current, A. Also the current limit.
    pub nominal_current_a: f64,
    /// Operating efficiency at nominal current, as a fraction.
    pub efficiency: f64,
    /// Initial SoC, as a fraction.
    pub initial_soc: f64,
    #[serde(default = "default_soc_min")]
    pub soc_min: f64,
    #[serde(default = "default_soc_max")]
    pub soc_max: f64,
    #[serde(default)]
    pub i_min: f64,
    /// OCV slope per cell, V per unit SoC.
    #[serde(default = "default_k1_cell")]
    pub k1_cell: f64,
    /// Pack resistance override, Ω.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_bat: Option<f64>,
    #[serde(default = "placeholder_converter")]
    pub converter: ConverterParams,
    pub aging: AgingBlock,
}

impl FleetEntry {
    pub fn n_cells(&self) -> Result<f64> {
        if !(self.nominal_power_kw > 0.0 && self.nominal_current_a > 0.0 && self.cell_voltage > 0.0) {
            return Err(Error::InvalidParams(format!(
                "module {}: power, current and cell voltage must be > 0",
                self.id
            )));
        }
        let pack_v = self.nominal_power_kw * 1000.0 / self.nominal_current_a;
        Ok((pack_v / self.cell_voltage).round().max(1.0))
    }

    /// Pack resistance that reproduces the nameplate efficiency at nominal
    /// current given the converter losses.
    pub fn calibrated_r_bat(&self) -> Result<f64> {
        let v = self.n_cells()? * self.cell_voltage;
        let i = self.nominal_current_a;
        let c = &self.converter;
        if !(self.efficiency > 0.0 && self.efficiency < 1.0) {
            return Err(Error::InvalidParams(format!(
                "module {}: efficiency must lie in (0, 1), got {}",
                self.id, self.efficiency
            )));
        }
        let loss = (1.0 - self.efficiency) * v * i;
        let r_sum = (loss - c.fixed_switching_w() - c.switching_w_per_amp() * i) / (i * i);
        let r_bat = r_sum - c.r_on - c.dcr;
        if !(r_bat > 0.0) {
            return Err(Error::InvalidParams(format!(
                "module {}: converter losses alone exceed the nameplate loss at nominal current",
                self.id
            )));
        }
        Ok(r_bat)
    }

    pub fn to_spec(&self) -> Result<ModuleSpec> {
        let n = self.n_cells()?;
        let k1 = n * self.k1_cell;
        let k0 = n * self.cell_voltage - 0.5 * k1;
        let r_bat = match self.r_bat {
            Some(r) => r,
            None => self.calibrated_r_bat()?,
        };
        let aging = AgingParams {
            kappa1: kappa1_from_cycle_life(self.aging.depth_100, self.cycle_number)?,
            kappa2: self.aging.kappa2,
            n_cycles_100: self.cycle_number,
            unit_capacity_cost: self.aging.unit_capacity_cost,
            half_cycle_weight: 0.5,
            xi: self.aging.xi,
        };
        let spec = ModuleSpec {
            id: self.id.clone(),
            pack: PackParams {
                r_bat,
                energy_capacity: self.nominal_energy_kwh,
                k0,
                k1,
                soc_min: self.soc_min,
                soc_max: self.soc_max,
                i_min: self.i_min,
                i_max: self.nominal_current_a,
                p_max: self.nominal_power_kw,
            },
            converter: self.converter.clone(),
            aging,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Market and horizon settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    /// Regulation capacity bid, kW.
    pub c_bid: f64,
    /// Dispatch interval, s.
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub prices: Prices,
}

fn default_dt() -> f64 {
    2.0
}
fn default_horizon() -> usize {
    15
}

/// Where the regulation signal comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSource {
    File { path: PathBuf },
    Synth(SynthParams),
}

/// Complete scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub fleet: Vec<FleetEntry>,
    pub market: MarketConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub priority: PriorityConfig,
    #[serde(default)]
    pub lookup: LookupConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<SignalSource>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The bundled ten-module fleet.
    pub fn m5bat() -> Self {
        Self::from_json(M5BAT_FIXTURE).expect("bundled fixture is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.fleet.is_empty() {
            return Err(Error::Validation("fleet must contain at least one module".into()));
        }
        let m = &self.market;
        if !(m.c_bid > 0.0 && m.c_bid.is_finite()) {
            return Err(Error::Validation(format!("c_bid must be > 0, got {}", m.c_bid)));
        }
        if !(m.dt > 0.0 && m.dt.is_finite()) {
            return Err(Error::Validation(format!("dt must be > 0, got {}", m.dt)));
        }
        if m.horizon == 0 {
            return Err(Error::Validation("horizon must be >= 1".into()));
        }
        m.prices.validate()?;
        self.solver.validate()?;
        self.priority.validate()?;
        self.lookup.validate()?;
        let specs = self.build_fleet()?;
        validate_fleet(&specs)?;
        for (e, s) in self.fleet.iter().zip(&specs) {
            if !(s.pack.soc_min..=s.pack.soc_max).contains(&e.initial_soc) {
                return Err(Error::Validation(format!(
                    "module {}: initial SoC {} outside [{}, {}]",
                    e.id, e.initial_soc, s.pack.soc_min, s.pack.soc_max
                )));
            }
        }
        Ok(())
    }

    pub fn build_fleet(&self) -> Result<Vec<ModuleSpec>> {
        self.fleet.iter().map(FleetEntry::to_spec).collect()
    }

    pub fn initial_states(&self) -> Vec<ModuleState> {
        self.fleet.iter().map(|e| ModuleState::new(e.initial_soc)).collect()
    }

    /// Load or generate the configured signal. Relative file paths resolve
    /// against `base_dir`; synthetic signals use the scenario seed.
    pub fn resolve_signal(&self, base_dir: Option<&Path>) -> Result<RegDSeries> {
        let series = match &self.signal {
            None => return Err(Error::Validation("the config has no signal source".into())),
            Some(SignalSource::File { path }) => match base_dir {
                Some(dir) if path.is_relative() => load_regd_csv(dir.join(path))?,
                _ => load_regd_csv(path)?,
            },
            Some(SignalSource::Synth(params)) => synth_regd(self.seed, params)?,
        };
        self.check_signal(&series)?;
        Ok(series)
    }

    /// Reject a signal whose cadence differs from the dispatch interval.
    pub fn check_signal(&self, series: &RegDSeries) -> Result<()> {
        if (series.cadence - self.market.dt).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "signal cadence {} s does not match dispatch interval {} s",
                series.cadence, self.market.dt
            )));
        }
        Ok(())
    }
}
