//! `ffr-sim`: lookup-table building, closed-loop runs, method comparison and
//! synthetic RegD generation for a modular battery fleet.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ffr_core::config::ScenarioConfig;
use ffr_core::formulation::build_realtime_problem;
use ffr_core::report::{write_run, Comparison};
use ffr_core::scheduler::{build_lookup_table, LookupTable, Method, RunReport, Simulator};
use ffr_core::signal::{load_regd_csv, save_regd_csv, synth_regd, RegDSeries, SynthParams};

/// Share of flagged lookup entries above which `lookup` fails.
const MAX_FLAGGED_SHARE: f64 = 0.10;

#[derive(Parser)]
#[command(name = "ffr-sim", version, about = "Modular battery fast frequency response simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the activation lookup table and write it as JSON.
    Lookup {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one method and write steps.csv, metrics.json and instance.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// RegD CSV; defaults to the signal named in the config.
        #[arg(long)]
        signals: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the method in the config.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Lookup table to reuse; built and written here when missing.
        #[arg(long)]
        lookup: Option<PathBuf>,
    },
    /// Run several methods over the same signal and tabulate their metrics.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        signals: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true, value_parser = parse_method)]
        methods: Vec<Method>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lookup: Option<PathBuf>,
    },
    /// Write a synthetic RegD trace at the default 2 s cadence.
    SynthSignal {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: ffr_core::Error| e.to_string())
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    ScenarioConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn load_signal(cfg: &ScenarioConfig, config_path: &Path, signals: Option<&Path>) -> Result<RegDSeries> {
    let series = match signals {
        Some(p) => {
            let s = load_regd_csv(p).with_context(|| format!("reading signal {}", p.display()))?;
            cfg.check_signal(&s)?;
            s
        }
        None => cfg
            .resolve_signal(config_path.parent())
            .context("no --signals given and the config signal could not be loaded")?,
    };
    Ok(series)
}

fn build_lookup(cfg: &ScenarioConfig) -> Result<LookupTable> {
    let specs = cfg.build_fleet()?;
    let m = &cfg.market;
    Ok(build_lookup_table(&specs, m.c_bid, m.prices, m.dt, &cfg.lookup, &cfg.solver)?)
}

/// Load the table at `path` if it exists, otherwise build it and write it
/// there (or into `fallback_dir` when no path is given).
fn obtain_lookup(cfg: &ScenarioConfig, path: Option<&Path>, fallback_dir: &Path) -> Result<LookupTable> {
    if let Some(p) = path.filter(|p| p.exists()) {
        let text = fs::read_to_string(p).with_context(|| format!("reading lookup {}", p.display()))?;
        let table = LookupTable::from_json(&text)?;
        if (table.step_size - cfg.lookup.step_size).abs() > 1e-12 {
            bail!("lookup {} has step {} but the config asks for {}", p.display(), table.step_size, cfg.lookup.step_size);
        }
        return Ok(table);
    }
    eprintln!("building lookup table");
    let table = build_lookup(cfg)?;
    let target = path.map(Path::to_path_buf).unwrap_or_else(|| fallback_dir.join("lookup.json"));
    if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&target, table.to_json()?)?;
    Ok(table)
}

fn simulate(cfg: &ScenarioConfig, method: Method, signal: &RegDSeries, lookup: Option<&LookupTable>) -> Result<Simulator> {
    let lookup = if method.uses_solver() { lookup.cloned() } else { None };
    let mut sim = Simulator::from_scenario(cfg, method, lookup)?;
    sim.run(&signal.values).with_context(|| format!("simulating {method}"))?;
    Ok(sim)
}

fn cmd_lookup(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let table = build_lookup(&cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, table.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    let flagged = table.n_flagged();
    println!("{} entries, {} flagged -> {}", table.entries.len(), flagged, out.display());
    if flagged as f64 > MAX_FLAGGED_SHARE * table.entries.len() as f64 {
        bail!("{flagged} of {} lookup entries were flagged", table.entries.len());
    }
    Ok(())
}

fn cmd_run(
    config: &Path,
    signals: Option<&Path>,
    out: &Path,
    method: Option<Method>,
    lookup: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let method = method.unwrap_or(cfg.method);
    let signal = load_signal(&cfg, config, signals)?;
    fs::create_dir_all(out)?;
    let table = if method.uses_solver() { Some(obtain_lookup(&cfg, lookup, out)?) } else { None };
    let sim = simulate(&cfg, method, &signal, table.as_ref())?;
    let report = sim.report()?;
    write_run(out, &report, &sim.specs)?;

    // horizon instance at the first step under perfect foresight
    let h = cfg.market.horizon.min(signal.len());
    let instance = build_realtime_problem(
        &sim.specs,
        &cfg.initial_states(),
        &signal.values[..h],
        cfg.market.prices,
        cfg.market.c_bid,
        cfg.market.dt,
    )?;
    fs::write(out.join("instance.json"), instance.to_json()?)?;
    print_summary(&report);
    Ok(())
}

fn cmd_compare(
    config: &Path,
    signals: Option<&Path>,
    methods: &[Method],
    out: &Path,
    lookup: Option<&Path>,
) -> Result<()> {
    if methods.len() < 2 {
        bail!("compare needs at least two methods");
    }
    let cfg = load_config(config)?;
    let signal = load_signal(&cfg, config, signals)?;
    fs::create_dir_all(out)?;
    let table = if methods.iter().any(|m| m.uses_solver()) { Some(obtain_lookup(&cfg, lookup, out)?) } else { None };
    let mut reports = Vec::with_capacity(methods.len());
    for &m in methods {
        eprintln!("running {m}");
        reports.push(simulate(&cfg, m, &signal, table.as_ref())?.report()?);
    }
    let cmp = Comparison::new(&reports)?;
    fs::write(out.join("comparison.csv"), cmp.to_csv())?;
    fs::write(out.join("comparison.json"), cmp.to_json()?)?;
    print!("{}", cmp.to_csv());
    Ok(())
}

fn cmd_synth(seed: u64, steps: usize, out: &Path) -> Result<()> {
    let series = synth_regd(seed, &SynthParams { n_steps: steps, ..Default::default() })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_regd_csv(&series, out).with_context(|| format!("writing {}", out.display()))?;
    println!("{steps} samples -> {}", out.display());
    Ok(())
}

fn print_summary(r: &RunReport) {
    println!("method            {}", r.method);
    println!("steps             {}", r.steps);
    println!("throughput kWh    {:.4}", r.totals.energy_throughput_kwh);
    println!("loss kWh          {:.4}", r.totals.energy_loss_kwh);
    println!("penalty $         {:.4}", r.totals.penalty_cost);
    println!("aging $           {:.4}", r.totals.aging_cost);
    println!("efficiency %      {:.3}", 100.0 * r.average_efficiency);
    println!("D_soc             {:.4} -> {:.4}", r.soc_deviation.initial, r.soc_deviation.r#final);
    println!("mean step s       {:.4}", r.mean_step_time_s);
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Lookup { config, out } => cmd_lookup(&config, &out),
        Command::Run { config, signals, out, method, lookup } => {
            cmd_run(&config, signals.as_deref(), &out, method, lookup.as_deref())
        }
        Command::Compare { config, signals, methods, out, lookup } => {
            cmd_compare(&config, signals.as_deref(), &methods, &out, lookup.as_deref())
        }
        Command::SynthSignal { seed, steps, out } => cmd_synth(seed, steps, &out),
    }
}
