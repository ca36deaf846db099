//! Python bindings: scenarios, module models, lookup tables, closed-loop
//! simulation and the synthetic signal generator. Structured results are
//! returned as plain dicts with the same keys as the JSON outputs.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use ffr_core::aging::{accumulated_aging_cost as aging_cost, extract_half_cycles, AgingParams};
use ffr_core::config::ScenarioConfig;
use ffr_core::model::{self, Direction, ModuleSpec};
use ffr_core::scheduler::{self, Method};
use ffr_core::signal::{synth_regd as synth, SynthParams};
use ffr_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Solver(_) | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn direction(discharge: bool) -> Direction {
    if discharge {
        Direction::Discharge
    } else {
        Direction::Charge
    }
}

fn parse_method(name: &str) -> PyResult<Method> {
    name.parse().map_err(to_py)
}

/// A complete scenario: fleet, market, predictor, solver and signal settings.
#[pyclass(name = "ScenarioConfig", module = "ffr_sim", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ScenarioConfig::from_json(text).map_err(to_py)? })
    }

    /// The bundled ten-module fleet.
    #[staticmethod]
    fn m5bat() -> Self {
        Self { inner: ScenarioConfig::m5bat() }
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn module_ids(&self) -> Vec<String> {
        self.inner.fleet.iter().map(|e| e.id.clone()).collect()
    }

    #[getter]
    fn c_bid(&self) -> f64 {
        self.inner.market.c_bid
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    /// Calibrated module models in fleet order.
    fn modules(&self) -> PyResult<Vec<PyModuleSpec>> {
        Ok(self.inner.build_fleet().map_err(to_py)?.into_iter().map(|inner| PyModuleSpec { inner }).collect())
    }

    fn __repr__(&self) -> String {
        format!("ScenarioConfig(modules={}, c_bid={})", self.inner.fleet.len(), self.inner.market.c_bid)
    }
}

/// Electrical model of one battery module with its converter.
#[pyclass(name = "ModuleSpec", module = "ffr_sim", skip_from_py_object)]
#[derive(Clone)]
struct PyModuleSpec {
    inner: ModuleSpec,
}

#[pymethods]
impl PyModuleSpec {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn energy_capacity(&self) -> f64 {
        self.inner.pack.energy_capacity
    }

    fn ocv(&self, soc: f64) -> PyResult<f64> {
        model::ocv(&self.inner.pack, soc).map_err(to_py)
    }

    /// Conduction loss in W.
    fn conduction_loss(&self, i_bat: f64) -> f64 {
        model::conduction_loss(&self.inner, i_bat)
    }

    /// Switching loss terms in W.
    fn switching_loss<'py>(&self, py: Python<'py>, i_bat: f64) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &model::switching_loss(&self.inner, i_bat))
    }

    /// Internal, external and lost power in kW at a current and SoC.
    #[pyo3(signature = (i_bat, soc, discharge=true))]
    fn power_balance<'py>(&self, py: Python<'py>, i_bat: f64, soc: f64, discharge: bool) -> PyResult<Bound<'py, PyAny>> {
        let pb = model::module_power_balance(&self.inner, i_bat, soc, direction(discharge), true).map_err(to_py)?;
        to_dict(py, &pb)
    }

    fn __repr__(&self) -> String {
        format!("ModuleSpec(id={:?}, energy_kwh={})", self.inner.id, self.inner.pack.energy_capacity)
    }
}

/// Activation counts over the normalized regulation signal grid.
#[pyclass(name = "LookupTable", module = "ffr_sim", skip_from_py_object)]
#[derive(Clone)]
struct PyLookup {
    inner: scheduler::LookupTable,
}

#[pymethods]
impl PyLookup {
    #[staticmethod]
    fn build(config: &PyScenario) -> PyResult<Self> {
        let cfg = &config.inner;
        let specs = cfg.build_fleet().map_err(to_py)?;
        let m = &cfg.market;
        let inner = scheduler::build_lookup_table(&specs, m.c_bid, m.prices, m.dt, &cfg.lookup, &cfg.solver)
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: scheduler::LookupTable::from_json(text).map_err(to_py)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    /// Modules to activate at signal value `r`; `None` for a flagged entry.
    fn count(&self, r: f64) -> Option<usize> {
        self.inner.count(r)
    }

    #[getter]
    fn n_flagged(&self) -> usize {
        self.inner.n_flagged()
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }
}

/// Closed-loop scheduler stepping through a regulation signal.
#[pyclass(name = "Simulator", module = "ffr_sim")]
struct PySimulator {
    inner: scheduler::Simulator,
}

#[pymethods]
impl PySimulator {
    #[new]
    #[pyo3(signature = (config, method=None, lookup=None))]
    fn new(config: &PyScenario, method: Option<&str>, lookup: Option<&PyLookup>) -> PyResult<Self> {
        let method = method.map(parse_method).transpose()?.unwrap_or(config.inner.method);
        let lookup = match (method.uses_solver(), lookup) {
            (false, _) => None,
            (true, Some(l)) => Some(l.inner.clone()),
            (true, None) => Some(PyLookup::build(config)?.inner),
        };
        let inner = scheduler::Simulator::from_scenario(&config.inner, method, lookup).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Advance one interval; returns the step record.
    fn step<'py>(&mut self, py: Python<'py>, r: f64) -> PyResult<Bound<'py, PyAny>> {
        let rec = self.inner.step(r).map_err(to_py)?.clone();
        to_dict(py, &rec)
    }

    fn run(&mut self, signal: Vec<f64>) -> PyResult<()> {
        self.inner.run(&signal).map_err(to_py)
    }

    /// Metrics of the steps taken so far.
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner.report().map_err(to_py)?)
    }

    #[getter]
    fn socs(&self) -> Vec<f64> {
        self.inner.states.iter().map(|s| s.soc).collect()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.records.len()
    }
}

/// Bounded mean-reverting RegD trace of `steps` samples.
#[pyfunction]
#[pyo3(signature = (seed, steps=1800))]
fn synth_regd(seed: u64, steps: usize) -> PyResult<Vec<f64>> {
    Ok(synth(seed, &SynthParams { n_steps: steps, ..Default::default() }).map_err(to_py)?.values)
}

/// Run `method` over `signal` and return the metrics dict.
#[pyfunction]
#[pyo3(signature = (config, method, signal, lookup=None))]
fn simulate<'py>(
    py: Python<'py>,
    config: &PyScenario,
    method: &str,
    signal: Vec<f64>,
    lookup: Option<&PyLookup>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut sim = PySimulator::new(config, Some(method), lookup)?;
    sim.run(signal)?;
    sim.report(py)
}

/// Rainflow aging cost ($) of a SoC extremum sequence.
#[pyfunction]
#[pyo3(signature = (extrema, energy_kwh, n_cycles, unit_capacity_cost, kappa2=None))]
fn accumulated_aging_cost(
    extrema: Vec<f64>,
    energy_kwh: f64,
    n_cycles: f64,
    unit_capacity_cost: f64,
    kappa2: Option<f64>,
) -> PyResult<f64> {
    let mut params = AgingParams::with_cycle_life(n_cycles, unit_capacity_cost);
    if let Some(k2) = kappa2 {
        params.kappa2 = k2;
    }
    params.validate().map_err(to_py)?;
    aging_cost(&extract_half_cycles(&extrema), &params, energy_kwh).map_err(to_py)
}

#[pymodule]
fn ffr_sim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyModuleSpec>()?;
    m.add_class::<PyLookup>()?;
    m.add_class::<PySimulator>()?;
    m.add_function(wrap_pyfunction!(synth_regd, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(accumulated_aging_cost, m)?)?;
    m.add("METHODS", Method::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
