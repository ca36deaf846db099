//! Regulation signal traces: CSV I/O, a synthetic generator, ARIMA
//! forecasting and the conversion to a power command.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeDelta};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Direction;

pub const DEFAULT_CADENCE: f64 = 2.0;

/// A normalized regulation signal sampled at a fixed cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegDSeries {
    pub start_time: NaiveDateTime,
    /// Seconds between samples.
    pub cadence: f64,
    pub values: Vec<f64>,
}

impl RegDSeries {
    pub fn new(start_time: NaiveDateTime, cadence: f64, values: Vec<f64>) -> Result<Self> {
        let s = Self { start_time, cadence, values };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cadence > 0.0) {
            return Err(Error::Validation(format!("cadence must be > 0, got {}", self.cadence)));
        }
        if let Some((k, v)) = self.values.iter().enumerate().find(|(_, v)| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("sample {k} = {v} outside [-1, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, k: usize) -> NaiveDateTime {
        self.start_time + TimeDelta::milliseconds((self.cadence * 1000.0 * k as f64).round() as i64)
    }
}

/// Default start of generated traces.
pub fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f").ok()
}

/// Parse a `timestamp,regd` CSV stream.
pub fn read_regd_csv<R: Read>(reader: R) -> Result<RegDSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() != 2 || &header[0] != "timestamp" || &header[1] != "regd" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `timestamp,regd`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 2 {
            return Err(Error::Parse { line, message: format!("expected 2 fields, found {}", rec.len()) });
        }
        let t = parse_timestamp(&rec[0])
            .ok_or_else(|| Error::Parse { line, message: format!("bad timestamp `{}`", &rec[0]) })?;
        let v: f64 = rec[1]
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("bad value `{}`", &rec[1]) })?;
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange { line, value: v });
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::Parse { line, message: "timestamps must increase".into() });
            }
        }
        times.push(t);
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::Validation("signal file has no data rows".into()));
    }
    let cadence = if times.len() >= 2 {
        (times[1] - times[0]).num_milliseconds() as f64 / 1000.0
    } else {
        DEFAULT_CADENCE
    };
    for (k, w) in times.windows(2).enumerate() {
        let step = (w[1] - w[0]).num_milliseconds() as f64 / 1000.0;
        if (step - cadence).abs() > 1e-3 {
            return Err(Error::Parse {
                line: k + 3,
                message: format!("irregular cadence: {step} s after {cadence} s"),
            });
        }
    }
    RegDSeries::new(times[0], cadence, values)
}

pub fn load_regd_csv(path: impl AsRef<Path>) -> Result<RegDSeries> {
    read_regd_csv(std::fs::File::open(path)?)
}

pub fn write_regd_csv<W: Write>(series: &RegDSeries, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["timestamp", "regd"])?;
    for (k, v) in series.values.iter().enumerate() {
        let ts = series.timestamp(k).format("%Y-%m-%dT%H:%M:%SZ").to_string();
        w.write_record([ts, format!("{v:.9}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_regd_csv(series: &RegDSeries, path: impl AsRef<Path>) -> Result<()> {
    write_regd_csv(series, std::fs::File::create(path)?)
}

/// Parameters of the synthetic regulation signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_steps: usize,
    /// Pull toward zero per step.
    pub mean_reversion: f64,
    /// Standard deviation of the per-step shock.
    pub volatility: f64,
    /// Block length for the zero-mean correction; `None` disables it.
    pub neutral_window: Option<usize>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { n_steps: 1800, mean_reversion: 0.01, volatility: 0.05, neutral_window: Some(450) }
    }
}

fn reflect(mut x: f64) -> f64 {
    // fold back into [-1, 1]
    for _ in 0..8 {
        if x > 1.0 {
            x = 2.0 - x;
        } else if x < -1.0 {
            x = -2.0 - x;
        } else {
            break;
        }
    }
    x.clamp(-1.0, 1.0)
}

/// Bounded mean-reverting random walk starting at 0.
pub fn synth_regd(seed: u64, params: &SynthParams) -> Result<RegDSeries> {
    if params.n_steps == 0 {
        return Err(Error::Validation("n_steps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = 0.0f64;
    let mut values = Vec::with_capacity(params.n_steps);
    for _ in 0..params.n_steps {
        values.push(x);
        let eps: f64 = StandardNormal.sample(&mut rng);
        x = reflect(x - params.mean_reversion * x + params.volatility * eps);
    }
    if let Some(w) = params.neutral_window.filter(|&w| w > 0) {
        for block in values.chunks_mut(w) {
            for _ in 0..20 {
                let mean = block.iter().sum::<f64>() / block.len() as f64;
                if mean.abs() < 1e-6 {
                    break;
                }
                for v in block.iter_mut() {
                    *v = (*v - mean).clamp(-1.0, 1.0);
                }
            }
        }
    }
    RegDSeries::new(default_start(), DEFAULT_CADENCE, values)
}

/// Signed power command (kW) and direction for a signal value.
pub fn regd_to_power(r: f64, c_bid: f64) -> (f64, Direction) {
    let p = c_bid * r;
    (p, Direction::from_signed(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl Default for ArimaOrder {
    fn default() -> Self {
        Self { p: 2, d: 1, q: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub ar_coeffs: Vec<f64>,
    pub ma_coeffs: Vec<f64>,
    pub intercept: f64,
    pub residual_variance: f64,
    /// Set when the history was constant; the model then predicts this value.
    pub flat: Option<f64>,
}

fn difference(x: &[f64], d: usize) -> Vec<f64> {
    let mut w = x.to_vec();
    for _ in 0..d {
        w = w.windows(2).map(|p| p[1] - p[0]).collect();
    }
    w
}

/// Residuals and their parameter derivatives under the conditional
/// sum-of-squares recursion. Parameter order: intercept, AR, MA.
fn css_residuals(w: &[f64], p: usize, q: usize, theta: &[f64], with_jac: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = 1 + p + q;
    let (c, phi, ma) = (theta[0], &theta[1..1 + p], &theta[1 + p..]);
    let n = w.len();
    let mut e = vec![0.0; n];
    let mut de = if with_jac { vec![vec![0.0; k]; n] } else { Vec::new() };
    for t in p..n {
        let mut pred = c;
        for i in 0..p {
            pred += phi[i] * w[t - 1 - i];
        }
        for j in 0..q {
            if t > j {
                pred += ma[j] * e[t - 1 - j];
            }
        }
        e[t] = w[t] - pred;
        if with_jac {
            let mut g = vec![0.0; k];
            g[0] = -1.0;
            for i in 0..p {
                g[1 + i] = -w[t - 1 - i];
            }
            for j in 0..q {
                if t > j {
                    g[1 + p + j] = -e[t - 1 - j];
                }
            }
            for j in 0..q {
                if t > j {
                    for (gi, dprev) in g.iter_mut().zip(&de[t - 1 - j]) {
                        *gi -= ma[j] * dprev;
                    }
                }
            }
            de[t] = g;
        }
    }
    (e[p..].to_vec(), if with_jac { de[p..].to_vec() } else { Vec::new() })
}

fn ols(y: &[f64], rows: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = rows.len();
    let k = rows.first()?.len();
    let x = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    let y = DVector::from_column_slice(y);
    let beta = x.svd(true, true).solve(&y, 1e-12).ok()?;
    Some(beta.iter().copied().collect())
}

/// Step-down (reverse Levinson) check: every partial autocorrelation of
/// the AR polynomial must lie strictly inside the unit interval.
fn stationary(coeffs: &[f64]) -> bool {
    let mut a = coeffs.to_vec();
    while let Some(&kappa) = a.last() {
        if kappa.abs() >= 1.0 - 1e-9 {
            return false;
        }
        let m = a.len();
        let denom = 1.0 - kappa * kappa;
        let prev: Vec<f64> = (0..m - 1).map(|i| (a[i] + kappa * a[m - 2 - i]) / denom).collect();
        a = prev;
    }
    true
}

fn shrink_to_stationary(coeffs: &mut [f64], negate: bool) {
    let view = |c: &[f64]| -> Vec<f64> { c.iter().map(|v| if negate { -v } else { *v }).collect() };
    let mut guard = 0;
    while !stationary(&view(coeffs)) && guard < 200 {
        for c in coeffs.iter_mut() {
            *c *= 0.95;
        }
        guard += 1;
    }
}

/// Fit by conditional least squares on the differenced series.
pub fn arima_fit(history: &[f64], order: ArimaOrder) -> Result<ArimaModel> {
    let ArimaOrder { p, d, q } = order;
    let min_len = (10 * (p + q + d)).max(3);
    if history.len() < min_len {
        return Err(Error::Validation(format!(
            "history of {} samples is shorter than {min_len}",
            history.len()
        )));
    }
    let w = difference(history, d);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let last = *history.last().unwrap();
    if var < 1e-14 && (d == 0 || mean.abs() < 1e-12) {
        return Ok(ArimaModel {
            order,
            ar_coeffs: vec![0.0; p],
            ma_coeffs: vec![0.0; q],
            intercept: 0.0,
            residual_variance: 0.0,
            flat: Some(last),
        });
    }

    // Hannan-Rissanen start: long autoregression for residual estimates
    let mut theta = vec![0.0; 1 + p + q];
    theta[0] = mean;
    let n = w.len();
    let long = (p + q + 2).max((n / 10).min(20));
    let mut e_hat = vec![0.0; n];
    if q > 0 && n > 2 * long + 2 {
        let rows: Vec<Vec<f64>> = (long..n)
            .map(|t| std::iter::once(1.0).chain((1..=long).map(|i| w[t - i])).collect())
            .collect();
        if let Some(b) = ols(&w[long..], &rows) {
            for t in long..n {
                let pred: f64 = b[0] + (1..=long).map(|i| b[i] * w[t - i]).sum::<f64>();
                e_hat[t] = w[t] - pred;
            }
        }
    }
    let start = long.max(p).max(q);
    if n > start + 1 + p + q {
        let rows: Vec<Vec<f64>> = (start..n)
            .map(|t| {
                std::iter::once(1.0)
                    .chain((1..=p).map(|i| w[t - i]))
                    .chain((1..=q).map(|j| e_hat[t - j]))
                    .collect()
            })
            .collect();
        if let Some(b) = ols(&w[start..], &rows) {
            theta = b;
        }
    }
    shrink_to_stationary(&mut theta[1..1 + p], false);
    shrink_to_stationary(&mut theta[1 + p..], true);

    // Levenberg-Marquardt on the conditional sum of squares
    let sse = |th: &[f64]| css_residuals(&w, p, q, th, false).0.iter().map(|e| e * e).sum::<f64>();
    let mut cur = sse(&theta);
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let (e, jac) = css_residuals(&w, p, q, &theta, true);
        let k = theta.len();
        let j = DMatrix::from_fn(e.len(), k, |i, c| jac[i][c]);
        let ev = DVector::from_column_slice(&e);
        let jtj = j.transpose() * &j;
        let jte = j.transpose() * ev;
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.lu().solve(&(-&jte)) else { break };
            let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            shrink_to_stationary(&mut cand[1..1 + p], false);
            shrink_to_stationary(&mut cand[1 + p..], true);
            let val = sse(&cand);
            if val < cur {
                let rel = (cur - val) / cur.max(1e-300);
                theta = cand;
                cur = val;
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel > 1e-10;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let m = (w.len() - p).max(1) as f64;
    Ok(ArimaModel {
        order,
        intercept: theta[0],
        ar_coeffs: theta[1..1 + p].to_vec(),
        ma_coeffs: theta[1 + p..].to_vec(),
        residual_variance: cur / m,
        flat: None,
    })
}

/// Iterated forecasts of the next `horizon` samples, clamped to [-1, 1].
pub fn arima_forecast(model: &ArimaModel, history: &[f64], horizon: usize) -> Vec<f64> {
    if let Some(v) = model.flat {
        return vec![v.clamp(-1.0, 1.0); horizon];
    }
    let ArimaOrder { p, d, q } = model.order;
    if history.is_empty() {
        return vec![0.0; horizon];
    }
    let mut levels = history.to_vec();
    let mut w = difference(&levels, d);
    let mut theta = vec![model.intercept];
    theta.extend(&model.ar_coeffs);
    theta.extend(&model.ma_coeffs);
    let (e_tail, _) = if w.len() > p { css_residuals(&w, p, q, &theta, false) } else { (Vec::new(), Vec::new()) };
    let mut e: Vec<f64> = vec![0.0; w.len() - e_tail.len()];
    e.extend(e_tail);
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let t = w.len();
        let mut next = model.intercept;
        for i in 0..p {
            if t > i {
                next += model.ar_coeffs[i] * w[t - 1 - i];
            }
        }
        for j in 0..q {
            if t > j {
                next += model.ma_coeffs[j] * e[t - 1 - j];
            }
        }
        // integrate back to levels
        let level = match d {
            0 => next,
            _ => {
                let mut diffs: Vec<Vec<f64>> = vec![levels.clone()];
                for k in 1..d {
                    diffs.push(difference(&diffs[k - 1], 1));
                }
                let mut acc = next;
                for k in (0..d).rev() {
                    acc += *diffs[k].last().unwrap();
                }
                acc
            }
        };
        let level = level.clamp(-1.0, 1.0);
        levels.push(level);
        w = difference(&levels, d);
        e.push(0.0);
        out.push(level);
    }
    out
}

/// Predictor configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub order: ArimaOrder,
    /// Samples used for each fit.
    pub window: usize,
    /// Steps between refits.
    pub refit_cadence: usize,
    /// Below this many samples the predictor repeats the last value.
    pub min_history: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { order: ArimaOrder::default(), window: 300, refit_cadence: 30, min_history: 40 }
    }
}

/// Rolling ARIMA forecaster with periodic refits and a persistence fallback.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub config: PredictorConfig,
    model: Option<ArimaModel>,
    fitted_at: usize,
}

impl Predictor {
    pub fn new(config: PredictorConfig) -> Self {
        Self { config, model: None, fitted_at: 0 }
    }

    pub fn model(&self) -> Option<&ArimaModel> {
        self.model.as_ref()
    }

    /// Forecast `horizon` values following `history`.
    pub fn forecast(&mut self, history: &[f64], horizon: usize) -> Vec<f64> {
        let o = self.config.order;
        let need = self.config.min_history.max(10 * (o.p + o.d + o.q));
        if history.len() < need {
            let last = history.last().copied().unwrap_or(0.0);
            return vec![last; horizon];
        }
        let tail = &history[history.len().saturating_sub(self.config.window)..];
        let stale = self.model.is_none() || history.len() >= self.fitted_at + self.config.refit_cadence.max(1);
        if stale {
            self.model = arima_fit(tail, o).ok();
            self.fitted_at = history.len();
        }
        match &self.model {
            Some(m) => arima_forecast(m, tail, horizon),
            None => vec![*history.last().unwrap(); horizon],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ar1(seed: u64, phi: f64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0;
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = phi * x + 0.1 * e;
                x
            })
            .collect()
    }

    #[test]
    fn csv_round_trip() {
        let text = "timestamp,regd\n2024-01-01T00:00:00Z,0.5\n2024-01-01T00:00:02Z,-0.25\n";
        let s = read_regd_csv(text.as_bytes()).unwrap();
        assert_eq!(s.values, vec![0.5, -0.25]);
        assert_eq!(s.cadence, 2.0);
        let mut buf = Vec::new();
        write_regd_csv(&s, &mut buf).unwrap();
        let back = read_regd_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(read_regd_csv("timestamp,regd\n".as_bytes()), Err(Error::Validation(_))));
        let bad = "timestamp,regd\n2024-01-01T00:00:00Z,0.5\n2024-01-01T00:00:02Z,1.2\n";
        match read_regd_csv(bad.as_bytes()) {
            Err(Error::OutOfRange { line, value }) => {
                assert_eq!(line, 3);
                assert_eq!(value, 1.2);
            }
            other => panic!("{other:?}"),
        }
        let garbled = "timestamp,regd\n2024-01-01T00:00:00Z,abc\n";
        assert!(matches!(read_regd_csv(garbled.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_regd_csv("time,value\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let p = SynthParams::default();
        let a = synth_regd(7, &p).unwrap();
        let b = synth_regd(7, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a, synth_regd(8, &p).unwrap());
        let flat = synth_regd(1, &SynthParams { volatility: 0.0, ..p.clone() }).unwrap();
        assert!(flat.values.iter().all(|&v| v == flat.values[0]));
        for block in a.values.chunks(450) {
            let mean = block.iter().sum::<f64>() / block.len() as f64;
            assert!(mean.abs() <= 0.05);
        }
    }

    #[test]
    fn power_conversion() {
        assert_eq!(regd_to_power(0.5, 6000.0), (3000.0, Direction::Discharge));
        assert_eq!(regd_to_power(-1.0, 6000.0), (-6000.0, Direction::Charge));
        assert_eq!(regd_to_power(0.0, 10.0), (0.0, Direction::Discharge));
    }

    #[test]
    fn ar1_coefficient_recovered() {
        let x = ar1(3, 0.8, 10_000);
        let m = arima_fit(&x, ArimaOrder { p: 1, d: 0, q: 0 }).unwrap();
        assert!((m.ar_coeffs[0] - 0.8).abs() < 0.1, "{:?}", m.ar_coeffs);
        let noise = ar1(4, 0.0, 10_000);
        let m = arima_fit(&noise, ArimaOrder { p: 1, d: 0, q: 0 }).unwrap();
        assert!(m.ar_coeffs[0].abs() < 0.1, "{:?}", m.ar_coeffs);
    }

    #[test]
    fn default_order_fits_signal() {
        let s = synth_regd(11, &SynthParams::default()).unwrap();
        let m = arima_fit(&s.values[..300], ArimaOrder::default()).unwrap();
        assert!(stationary(&m.ar_coeffs));
        assert!(m.residual_variance.is_finite());
    }

    #[test]
    fn forecast_examples() {
        let m = ArimaModel {
            order: ArimaOrder { p: 1, d: 0, q: 0 },
            ar_coeffs: vec![0.8],
            ma_coeffs: vec![],
            intercept: 0.0,
            residual_variance: 0.0,
            flat: None,
        };
        let f = arima_forecast(&m, &[0.1, 0.5], 2);
        assert!((f[0] - 0.4).abs() < 1e-12 && (f[1] - 0.32).abs() < 1e-12);
        let constant = vec![0.3; 50];
        let flat = arima_fit(&constant, ArimaOrder::default()).unwrap();
        assert_eq!(flat.flat, Some(0.3));
        assert_eq!(arima_forecast(&flat, &constant, 3), vec![0.3; 3]);
        let hot = ArimaModel { intercept: 0.9, ..m };
        assert_eq!(arima_forecast(&hot, &[0.9], 1), vec![1.0]);
    }

    #[test]
    fn step_down_check() {
        assert!(stationary(&[0.5, 0.3]));
        assert!(!stationary(&[1.2]));
        assert!(!stationary(&[0.5, 0.6]));
    }

    #[test]
    fn predictor_falls_back_to_persistence() {
        let mut p = Predictor::new(PredictorConfig::default());
        assert_eq!(p.forecast(&[0.2, 0.4], 3), vec![0.4; 3]);
        assert!(p.model().is_none());
    }
}
