//! Electrical model of one battery module: a pack behind a bidirectional
//! half-bridge buck-boost converter.
//!
//! Powers are nonnegative magnitudes and [`Direction`] carries the sign.
//! Losses are computed in W (the converter constants are SI); module-level
//! powers are reported in kW.

use serde::{Deserialize, Serialize};

use crate::aging::{AgingParams, CycleTracker};
use crate::error::{Error, Result};

/// Tolerance applied when checking SoC bounds after a step.
pub const SOC_TOL: f64 = 1e-9;

/// Charge/discharge command. `u = 1` is discharge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Charge,
    Discharge,
}

impl Direction {
    /// Binary `u`: 1 for discharge, 0 for charge.
    pub fn u(self) -> f64 {
        match self {
            Direction::Discharge => 1.0,
            Direction::Charge => 0.0,
        }
    }

    /// Sign rule for a signed regulation command; zero maps to discharge.
    pub fn from_signed(p: f64) -> Self {
        if p >= 0.0 {
            Direction::Discharge
        } else {
            Direction::Charge
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Direction::Discharge => Direction::Charge,
            Direction::Charge => Direction::Discharge,
        }
    }

    /// Sign of the SoC change produced by positive internal power.
    pub fn soc_sign(self) -> f64 {
        match self {
            Direction::Discharge => -1.0,
            Direction::Charge => 1.0,
        }
    }
}

/// Converter constants. Voltages in V, times in s, charges in C,
/// capacitance in F, resistances in Ω.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterParams {
    pub r_on: f64,
    pub dcr: f64,
    pub v_dc: f64,
    pub v_ds: f64,
    pub v_gs: f64,
    pub f_sw: f64,
    pub t_r: f64,
    pub t_f: f64,
    pub c_oss: f64,
    pub q_rr: f64,
    pub q_g1: f64,
    pub q_g2: f64,
    /// Scale the V-I overlap term by |I| (sensitivity switch, off by default).
    #[serde(default)]
    pub vi_loss_current_scaled: bool,
}

impl ConverterParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("r_on", self.r_on),
            ("dcr", self.dcr),
            ("v_dc", self.v_dc),
            ("v_ds", self.v_ds),
            ("v_gs", self.v_gs),
            ("f_sw", self.f_sw),
            ("t_r", self.t_r),
            ("t_f", self.t_f),
            ("c_oss", self.c_oss),
            ("q_rr", self.q_rr),
            ("q_g1", self.q_g1),
            ("q_g2", self.q_g2),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("converter {name} must be > 0, got {v}")));
            }
        }
        if self.t_r + self.t_f >= 1.0 / self.f_sw {
            return Err(Error::InvalidParams(format!(
                "switching transition t_r + t_f = {} s does not fit in one period {} s",
                self.t_r + self.t_f,
                1.0 / self.f_sw
            )));
        }
        Ok(())
    }

    /// Switching loss of an active module at zero current (W).
    pub fn fixed_switching_w(&self) -> f64 {
        let s = switching_terms(self, 0.0);
        s.total
    }

    /// Slope of the switching loss in |I| (W/A).
    pub fn switching_w_per_amp(&self) -> f64 {
        let transition = self.f_sw * (self.t_r + self.t_f);
        let mut k = self.v_ds * transition;
        if self.vi_loss_current_scaled {
            k += (self.v_dc + self.v_ds) / 2.0 * transition;
        }
        k
    }
}

/// Pack constants. Energy in kWh, current in A, power in kW; `k0`, `k1`
/// describe the pack open-circuit voltage as `k0 + k1 * soc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackParams {
    pub r_bat: f64,
    pub energy_capacity: f64,
    pub k0: f64,
    pub k1: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub i_min: f64,
    pub i_max: f64,
    pub p_max: f64,
}

impl PackParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "soc range [{}, {}] must satisfy 0 <= min < max <= 1",
                self.soc_min, self.soc_max
            )));
        }
        if !(0.0 <= self.i_min && self.i_min < self.i_max) {
            return Err(Error::InvalidParams(format!(
                "current range [{}, {}] must satisfy 0 <= min < max",
                self.i_min, self.i_max
            )));
        }
        if !(self.r_bat > 0.0 && self.k0 > 0.0 && self.energy_capacity > 0.0 && self.p_max > 0.0) {
            return Err(Error::InvalidParams(
                "r_bat, k0, energy_capacity and p_max must be > 0".into(),
            ));
        }
        if self.k0 + self.k1 * self.soc_min <= 0.0 || self.k0 + self.k1 * self.soc_max <= 0.0 {
            return Err(Error::InvalidParams("open-circuit voltage must stay positive".into()));
        }
        Ok(())
    }
}

/// Immutable parameters of one battery module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub id: String,
    pub pack: PackParams,
    pub converter: ConverterParams,
    pub aging: AgingParams,
}

impl ModuleSpec {
    pub fn validate(&self) -> Result<()> {
        self.pack
            .validate()
            .and_then(|_| self.converter.validate())
            .and_then(|_| self.aging.validate())
            .map_err(|e| Error::InvalidParams(format!("module {}: {e}", self.id)))
    }

    /// R_bat + R_on + DCR (Ω).
    pub fn resistance(&self) -> f64 {
        self.pack.r_bat + self.converter.r_on + self.converter.dcr
    }
}

/// Check that ids are unique and every module is valid.
pub fn validate_fleet(fleet: &[ModuleSpec]) -> Result<()> {
    if fleet.is_empty() {
        return Err(Error::InvalidParams("fleet is empty".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for m in fleet {
        if !seen.insert(m.id.as_str()) {
            return Err(Error::InvalidParams(format!("duplicate module id {}", m.id)));
        }
        m.validate()?;
    }
    Ok(())
}

/// Evolving state of one module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleState {
    pub soc: f64,
    pub active: bool,
    pub direction: Direction,
    pub tracker: CycleTracker,
}

impl ModuleState {
    pub fn new(soc: f64) -> Self {
        Self {
            soc,
            active: false,
            direction: Direction::Discharge,
            tracker: CycleTracker::new(soc),
        }
    }
}

/// Open-circuit voltage (V).
pub fn ocv(pack: &PackParams, soc: f64) -> Result<f64> {
    if !(pack.soc_min - SOC_TOL..=pack.soc_max + SOC_TOL).contains(&soc) {
        return Err(Error::Domain(format!(
            "soc {soc} outside [{}, {}]",
            pack.soc_min, pack.soc_max
        )));
    }
    Ok(pack.k0 + pack.k1 * soc)
}

/// I² (R_bat + R_on + DCR), in W.
pub fn conduction_loss(spec: &ModuleSpec, i_bat: f64) -> f64 {
    i_bat * i_bat * spec.resistance()
}

/// The five converter switching-loss components (W).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingLoss {
    pub p_vi: f64,
    pub p_dt: f64,
    pub p_rr: f64,
    pub p_coss: f64,
    pub p_g: f64,
    pub total: f64,
}

impl SwitchingLoss {
    pub const ZERO: SwitchingLoss =
        SwitchingLoss { p_vi: 0.0, p_dt: 0.0, p_rr: 0.0, p_coss: 0.0, p_g: 0.0, total: 0.0 };
}

fn switching_terms(c: &ConverterParams, i_bat: f64) -> SwitchingLoss {
    let i = i_bat.abs();
    let transition = c.f_sw * (c.t_r + c.t_f);
    let mut p_vi = (c.v_dc + c.v_ds) / 2.0 * transition;
    if c.vi_loss_current_scaled {
        p_vi *= i;
    }
    let p_dt = c.v_ds * i * transition;
    let p_rr = c.q_rr * c.v_dc * c.f_sw;
    let p_coss = c.c_oss * c.v_dc * c.v_dc * c.f_sw;
    let p_g = (c.q_g1 + c.q_g2) * c.v_gs * c.f_sw;
    SwitchingLoss { p_vi, p_dt, p_rr, p_coss, p_g, total: p_vi + p_dt + p_rr + p_coss + p_g }
}

/// Switching loss of an active module carrying `i_bat`.
pub fn switching_loss(spec: &ModuleSpec, i_bat: f64) -> SwitchingLoss {
    switching_terms(&spec.converter, i_bat)
}

/// Internal power, external power and total loss of a module at one
/// operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBalance {
    /// Internal (pack-side) power, kW.
    pub p_bat: f64,
    /// External (bus-side) power, kW.
    pub p_mod: f64,
    /// Conduction plus switching loss, kW.
    pub p_loss: f64,
    pub conduction_w: f64,
    pub switching: SwitchingLoss,
    /// Set when losses exceed the internal power during discharge and
    /// `p_mod` was clamped to zero.
    pub clamped: bool,
}

/// Evaluate the module power balance at current `i_bat` (A, magnitude).
pub fn module_power_balance(
    spec: &ModuleSpec,
    i_bat: f64,
    soc: f64,
    direction: Direction,
    active: bool,
) -> Result<PowerBalance> {
    if i_bat < 0.0 || i_bat > spec.pack.i_max * (1.0 + 1e-9) {
        return Err(Error::Domain(format!(
            "module {}: current {i_bat} A outside [0, {}]",
            spec.id, spec.pack.i_max
        )));
    }
    if !active {
        if i_bat > 0.0 {
            return Err(Error::Domain(format!("module {}: inactive module carries current", spec.id)));
        }
        return Ok(PowerBalance {
            p_bat: 0.0,
            p_mod: 0.0,
            p_loss: 0.0,
            conduction_w: 0.0,
            switching: SwitchingLoss::ZERO,
            clamped: false,
        });
    }
    let v = ocv(&spec.pack, soc)?;
    let p_bat = v * i_bat / 1000.0;
    let conduction_w = conduction_loss(spec, i_bat);
    let switching = switching_loss(spec, i_bat);
    let p_loss = (conduction_w + switching.total) / 1000.0;
    let (p_mod, clamped) = match direction {
        Direction::Discharge => {
            let p = p_bat - p_loss;
            if p < 0.0 {
                (0.0, true)
            } else {
                (p, false)
            }
        }
        Direction::Charge => (p_bat + p_loss, false),
    };
    Ok(PowerBalance { p_bat, p_mod, p_loss, conduction_w, switching, clamped })
}

/// SoC after carrying internal power `p_bat` (kW) for `dt` seconds.
pub fn step_soc(
    state: &ModuleState,
    spec: &ModuleSpec,
    p_bat: f64,
    dt: f64,
    direction: Direction,
) -> Result<f64> {
    let delta = p_bat * (dt / 3600.0) / spec.pack.energy_capacity;
    let next = state.soc + direction.soc_sign() * delta;
    if next < spec.pack.soc_min - SOC_TOL || next > spec.pack.soc_max + SOC_TOL {
        return Err(Error::InfeasibleStep {
            module: spec.id.clone(),
            direction,
            soc: state.soc,
            next,
            min: spec.pack.soc_min,
            max: spec.pack.soc_max,
        });
    }
    Ok(next)
}

/// Operating efficiency: p_mod/p_bat when discharging, p_bat/p_mod when charging.
pub fn module_efficiency(p_mod: f64, p_bat: f64, direction: Direction) -> Result<f64> {
    let (num, den) = match direction {
        Direction::Discharge => (p_mod, p_bat),
        Direction::Charge => (p_bat, p_mod),
    };
    if den <= 0.0 {
        return Err(Error::Domain(format!(
            "efficiency undefined for p_mod={p_mod}, p_bat={p_bat}"
        )));
    }
    Ok(num / den)
}

/// Largest current the module can carry for `dt` seconds without leaving
/// its SoC band or exceeding `i_max`.
pub fn current_limit(spec: &ModuleSpec, soc: f64, dt: f64, direction: Direction) -> f64 {
    let v = spec.pack.k0 + spec.pack.k1 * soc;
    let headroom = match direction {
        Direction::Discharge => soc - spec.pack.soc_min,
        Direction::Charge => spec.pack.soc_max - soc,
    }
    .max(0.0);
    let i_soc = headroom * spec.pack.energy_capacity * 1000.0 * 3600.0 / (v * dt);
    spec.pack.i_max.min(i_soc)
}

/// External power (kW) of an active module as a function of current.
pub fn module_power_at(spec: &ModuleSpec, soc: f64, i_bat: f64, direction: Direction) -> f64 {
    let v = spec.pack.k0 + spec.pack.k1 * soc;
    let loss = conduction_loss(spec, i_bat) + switching_loss(spec, i_bat).total;
    match direction {
        Direction::Discharge => (v * i_bat - loss) / 1000.0,
        Direction::Charge => (v * i_bat + loss) / 1000.0,
    }
}

/// Deliverable external power range (kW) of an active module over one
/// interval: `(min, max)`. During discharge the minimum is zero (the pack
/// covers its own overhead); during charge the converter overhead is the floor.
pub fn module_power_range(spec: &ModuleSpec, soc: f64, dt: f64, direction: Direction) -> (f64, f64) {
    let i_cap = current_limit(spec, soc, dt, direction);
    match direction {
        Direction::Discharge => {
            let v = spec.pack.k0 + spec.pack.k1 * soc;
            let k = spec.converter.switching_w_per_amp();
            let vertex = (v - k) / (2.0 * spec.resistance());
            let i = i_cap.min(vertex);
            let p = module_power_at(spec, soc, i, direction).min(spec.pack.p_max);
            (0.0, p.max(0.0))
        }
        Direction::Charge => {
            let floor = spec.converter.fixed_switching_w() / 1000.0;
            let p = module_power_at(spec, soc, i_cap, direction).min(spec.pack.p_max);
            (floor, p.max(floor))
        }
    }
}

/// Current (A) at which an active module delivers external power `p_mod`
/// (kW), or `None` when the target is outside the reachable range.
pub fn current_for_module_power(
    spec: &ModuleSpec,
    soc: f64,
    p_mod: f64,
    direction: Direction,
) -> Option<f64> {
    let v = spec.pack.k0 + spec.pack.k1 * soc;
    let r = spec.resistance();
    let k = spec.converter.switching_w_per_amp();
    let c0 = spec.converter.fixed_switching_w();
    let target = p_mod * 1000.0;
    let i = match direction {
        Direction::Discharge => {
            // r i² - (v - k) i + (c0 + target) = 0, smaller root
            let b = v - k;
            let disc = b * b - 4.0 * r * (c0 + target);
            if disc < 0.0 {
                return None;
            }
            2.0 * (c0 + target) / (b + disc.sqrt())
        }
        Direction::Charge => {
            // r i² + (v + k) i + (c0 - target) = 0, positive root
            if target < c0 * (1.0 - 1e-12) {
                return None;
            }
            let b = v + k;
            let disc = b * b + 4.0 * r * (target - c0);
            2.0 * (target - c0).max(0.0) / (b + disc.sqrt())
        }
    };
    if i > spec.pack.i_max * (1.0 + 1e-9) {
        return None;
    }
    Some(i.min(spec.pack.i_max))
}
