//! Output files: per-step CSV log, metrics JSON and method comparison
//! tables. Floating-point values are written in plain decimal notation
//! with at least nine significant digits.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModuleSpec;
use crate::scheduler::{Method, RunReport, StepRecord, TABLE_ROWS};

/// Decimal rendering with at least nine significant digits.
pub fn fmt_number(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    if x == 0.0 {
        return "0.000000000".into();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(1) as usize;
    format!("{x:.decimals$}")
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => out.push_str(&u.to_string()),
            (None, Some(i)) => out.push_str(&i.to_string()),
            _ => out.push_str(&fmt_number(n.as_f64().unwrap_or(f64::NAN))),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(out, item, indent + 1);
                out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (k, (key, item)) in map.iter().enumerate() {
                let _ = write!(out, "{}{}: ", pad(indent + 1), Value::String(key.clone()));
                write_value(out, item, indent + 1);
                out.push_str(if k + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// Pretty JSON with fixed-precision floats.
pub fn to_json_fixed<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

/// Step log with the fleet columns followed by five columns per module.
pub fn steps_csv(records: &[StepRecord], specs: &[ModuleSpec]) -> String {
    let mut out = String::from("t,r_actual,r_pred,demand_kw,p_mbss_kw,eff_bess,d_soc");
    for s in specs {
        let id = &s.id;
        let _ = write!(out, ",p_mod_{id},soc_{id},alpha_{id},loss_w_{id},aging_subgrad_{id}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.t,
            fmt_number(r.r_actual),
            fmt_number(r.r_pred),
            fmt_number(r.demand_kw),
            fmt_number(r.p_mbss_kw),
            fmt_number(r.eff_bess),
            fmt_number(r.d_soc)
        );
        for m in &r.modules {
            let _ = write!(
                out,
                ",{},{},{},{},{}",
                fmt_number(m.p_mod),
                fmt_number(m.soc),
                u8::from(m.alpha),
                fmt_number(m.loss_w),
                fmt_number(m.aging_subgrad)
            );
        }
        out.push('\n');
    }
    out
}

pub fn metrics_json(report: &RunReport) -> Result<String> {
    to_json_fixed(report)
}

/// Write `steps.csv` and `metrics.json` into `dir`.
pub fn write_run(dir: &Path, report: &RunReport, specs: &[ModuleSpec]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("steps.csv"), steps_csv(&report.records, specs))?;
    std::fs::write(dir.join("metrics.json"), metrics_json(report)?)?;
    Ok(())
}

/// One column of metrics per method over the comparison row set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub methods: Vec<Method>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub values: Vec<f64>,
}

impl Comparison {
    pub fn new(reports: &[RunReport]) -> Result<Self> {
        if reports.len() < 2 {
            return Err(Error::Validation("a comparison needs at least two methods".into()));
        }
        let columns: Vec<[f64; 8]> = reports.iter().map(RunReport::table_values).collect();
        let rows = TABLE_ROWS
            .iter()
            .enumerate()
            .map(|(k, name)| ComparisonRow { metric: name.to_string(), values: columns.iter().map(|c| c[k]).collect() })
            .collect();
        Ok(Self { methods: reports.iter().map(|r| r.method).collect(), rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for m in &self.methods {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.metric);
            for v in &row.values {
                let _ = write!(out, ",{}", fmt_number(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        to_json_fixed(self)
    }
}
