//! `windtrade`: solve, evaluate, benchmark and sweep from the command line.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use windtrade_core::data::load_dataset;
use windtrade_core::experiment::{
    benchmark_day, day_paths, evaluate_day, regularization_sweep, run_sweep, solve_day, write_pnl_csv, write_sweep_csv,
    DayInput, PnlRow, SolveSettings, Strategy, StrategySet, SweepAxis,
};
use windtrade_core::policy::{forward_trajectory, gain_stats, twap_rate, ControlSource, GainStats, Summary};
use windtrade_core::simulate::{simulate_batch, PathSpec};
use windtrade_core::snapshot::{atomic_write, params_hash, read_stack, write_stack, SnapshotMeta};
use windtrade_core::{build_grid, compute_domain_bounds, ErrorClass, Policy, RunConfig, ValueStack};

#[derive(Parser, Debug)]
#[command(name = "windtrade", version, about = "Optimal intraday trading of wind power")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding `production.csv` and `prices.csv`; synthetic days otherwise.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory (overrides `run.output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of days, or a comma-separated list of day indices or dates.
    #[arg(long, global = true)]
    days: Option<DaySelection>,
    /// Simulated paths per day.
    #[arg(long, global = true)]
    paths: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the truncated computational domain of one day.
    Bounds(DayArg),
    /// Run the three backward stages for one day and write the value stack.
    Solve(DayArg),
    /// Evaluate a stored value stack on simulated (and realised) paths.
    Evaluate {
        #[arg(long)]
        snapshot: PathBuf,
        #[command(flatten)]
        day: DayArg,
    },
    /// Optimal trading against TWAP and perfect foresight over a day list.
    Benchmark,
    /// Optimal-trading P&L for several jump intensities.
    SweepJumps {
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.4167, 2.083])]
        values: Vec<f64>,
    },
    /// Optimal-trading P&L for several delivery windows (hours).
    SweepDelivery {
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 1.0])]
        values: Vec<f64>,
    },
    /// Optimal-trading P&L for several horizons (hours).
    SweepHorizon {
        #[arg(long, value_delimiter = ',', default_values_t = [12.0, 18.0, 24.0])]
        values: Vec<f64>,
    },
    /// Sup-norm distance between exact and regularised value functions.
    SweepRegularization {
        #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 1e-3, 1e-4, 1e-5])]
        eps: Vec<f64>,
        #[command(flatten)]
        day: DayArg,
    },
    /// Simulate market paths for one day.
    Simulate(DayArg),
}

#[derive(Args, Debug, Clone, Copy)]
struct DayArg {
    /// Index of the day within the selection.
    #[arg(long, default_value_t = 0)]
    day: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum DaySelection {
    Count(usize),
    List(Vec<String>),
}

impl FromStr for DaySelection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Err("empty day selection".into());
        }
        if !s.contains(',') {
            if let Ok(n) = s.trim().parse() {
                return Ok(DaySelection::Count(n));
            }
        }
        Ok(DaySelection::List(s.split(',').map(|p| p.trim().to_string()).collect()))
    }
}

/// A selected day and its index in the full day list (used for seeding).
struct Selected {
    index: usize,
    day: DayInput,
}

struct Context_ {
    cfg: RunConfig,
    out: PathBuf,
    days: Vec<Selected>,
}

fn load_context(common: &Common) -> Result<Context_> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(n) = common.paths {
        cfg.benchmark.paths = n;
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir));
    let all: Vec<DayInput> = match &common.data {
        Some(dir) => {
            let set = load_dataset(dir, cfg.benchmark.n_w).with_context(|| format!("reading data in {}", dir.display()))?;
            for (date, e) in &set.rejected {
                log::warn!("day {date} rejected: {e}");
            }
            set.days
                .iter()
                .map(|d| DayInput::from_trading_day(d, cfg.benchmark.derivative_rule))
                .collect::<windtrade_core::Result<_>>()?
        }
        None => {
            let n = match &common.days {
                Some(DaySelection::Count(n)) => *n,
                Some(DaySelection::List(items)) => items.iter().filter_map(|s| s.parse::<usize>().ok()).max().map_or(0, |m| m + 1),
                None => cfg.benchmark.days,
            };
            (0..n).map(|i| windtrade_core::experiment::synthetic_day(cfg.run.seed, i)).collect()
        }
    };
    let days = select(all, common.days.as_ref().unwrap_or(&DaySelection::Count(cfg.benchmark.days)))?;
    Ok(Context_ { cfg, out, days })
}

fn select(all: Vec<DayInput>, sel: &DaySelection) -> Result<Vec<Selected>> {
    let mut out = Vec::new();
    match sel {
        DaySelection::Count(n) => {
            out.extend(all.into_iter().enumerate().take(*n).map(|(index, day)| Selected { index, day }));
        }
        DaySelection::List(items) => {
            for item in items {
                let index = match item.parse::<usize>() {
                    Ok(i) => i,
                    Err(_) => all.iter().position(|d| &d.label == item).with_context(|| format!("no day labelled `{item}`"))?,
                };
                let day = all.get(index).with_context(|| format!("day index {index} out of range ({} days)", all.len()))?;
                out.push(Selected { index, day: day.clone() });
            }
        }
    }
    if out.is_empty() {
        bail!(windtrade_core::Error::Data("no trading days selected".into()));
    }
    Ok(out)
}

impl Context_ {
    fn one(&self, arg: DayArg) -> Result<&Selected> {
        self.days.get(arg.day).with_context(|| format!("--day {} out of range ({} days selected)", arg.day, self.days.len()))
    }

    fn file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn strategies(&self) -> StrategySet {
        StrategySet { ot: true, twap: self.cfg.benchmark.twap, pf: self.cfg.benchmark.perfect_foresight }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn cmd_bounds(ctx: &Context_, arg: DayArg) -> Result<()> {
    let sel = ctx.one(arg)?;
    let model = sel.day.model(sel.day.params(&ctx.cfg.model, ctx.cfg.benchmark.day_beta))?;
    let (b, dev) = compute_domain_bounds(&model, &ctx.cfg.bounds)?;
    let grid = build_grid(&model.params, b.clone(), ctx.cfg.grid)?;
    let mut out = String::new();
    out.push_str(&format!("day = {}\n", sel.day.label));
    for (k, v) in [
        ("y_min", b.y_min),
        ("y_max", b.y_max),
        ("q_min", b.q_min),
        ("q_max", b.q_max),
        ("psi_min", b.psi_min),
        ("psi_max", b.psi_max),
        ("m_max", b.m_max),
        ("m_u", dev.m_u),
        ("k_u", dev.k_u),
        ("k_j", dev.k_j),
        ("dt", grid.dt),
    ] {
        out.push_str(&format!("{k} = {v:?}\n"));
    }
    out.push_str(&format!("n_t = {}\nidx_gc = {}\nidx_delivery = {}\n", grid.n_t, grid.idx_gc, grid.idx_delivery));
    print!("{out}");
    Ok(())
}

fn value_slices(stack: &ValueStack) -> Result<String> {
    let g = &stack.grid;
    let (im, jm, km) = (g.n_x / 2, g.n_y / 2, g.n_q / 2);
    let mut out = String::from("slice,t,x,y,q,value\n");
    for n in [0, g.idx_gc / 2] {
        let f = stack.at_time_index(n).context("time level not stored")?;
        let t = g.t(n);
        let mut row = |slice: &str, i: usize, j: usize, k: usize| {
            out.push_str(&format!("{slice},{t:?},{:?},{:?},{:?},{:?}\n", g.x(i), g.y(j), g.q(k), f.get(i, j, k)));
        };
        (0..=g.n_q).for_each(|k| row("q", im, jm, k));
        (0..=g.n_y).for_each(|j| row("y", im, j, km));
        (0..=g.n_x).for_each(|i| row("x", i, jm, km));
    }
    Ok(out)
}

fn cmd_solve(ctx: &Context_, arg: DayArg) -> Result<()> {
    let sel = ctx.one(arg)?;
    let model = sel.day.model(sel.day.params(&ctx.cfg.model, ctx.cfg.benchmark.day_beta))?;
    let settings = SolveSettings::from_config(&ctx.cfg);
    let sol = solve_day(&model, &settings, |d| {
        if d.step % 50 == 0 {
            log::info!("step {} t = {:.3} max|V| = {:.4e} picard mean {:.2}", d.step, d.t, d.max_abs, d.picard_mean);
        }
    })?;
    let label = &sel.day.label;
    if ctx.cfg.run.diagnostics {
        let mut text = String::new();
        for d in &sol.stage3.diagnostics {
            text.push_str(&serde_json::to_string(d)?);
            text.push('\n');
        }
        write_text(&ctx.file(&format!("{label}.diagnostics.jsonl"))?, &text)?;
    }
    write_text(&ctx.file(&format!("{label}.slices.csv"))?, &value_slices(&sol.stage3.stack)?)?;
    if ctx.cfg.run.snapshot {
        let path = ctx.file(&format!("{label}.snap"))?;
        write_stack(&path, &sol.stage3.stack, &SnapshotMeta { params_hash: params_hash(&model.params) })?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(ctx: &Context_, snapshot: &Path, arg: DayArg) -> Result<()> {
    let sel = ctx.one(arg)?;
    let model = sel.day.model(sel.day.params(&ctx.cfg.model, ctx.cfg.benchmark.day_beta))?;
    let (stack, meta) = read_stack(snapshot).with_context(|| format!("reading {}", snapshot.display()))?;
    if meta.params_hash != params_hash(&model.params) {
        log::warn!("snapshot {} was written for different model parameters", snapshot.display());
    }
    let spec = PathSpec::from_grid(&stack.grid);
    let mut paths = Vec::new();
    if let Some(real) = sel.day.realized_path(&spec) {
        paths.push((None, real));
    }
    paths.extend(day_paths(&model, &spec, ctx.cfg.benchmark.paths, ctx.cfg.run.seed, sel.index)?.into_iter().enumerate().map(|(i, p)| (Some(i), p)));
    let pf = windtrade_core::policy::PfOptions { n_q: ctx.cfg.benchmark.pf_n_q, eps_pad: ctx.cfg.bounds.eps_pad, picard: ctx.cfg.picard };
    let rows = evaluate_day(&model, &stack, &sel.day.label, &paths, ctx.cfg.benchmark.q0, ctx.strategies(), &pf)?;
    let label = &sel.day.label;
    atomic_write(&ctx.file(&format!("{label}.pnl.csv"))?, |w| write_pnl_csv(w, &rows))?;

    let policy = Policy::new(&stack, model.params.gamma)?;
    let (_, first) = &paths[0];
    let twap = twap_rate(&model.production, &model.params, ctx.cfg.benchmark.q0).0;
    let mut text = String::from("strategy,n,t,x,y,inventory,rate\n");
    for (name, source) in [("ot", ControlSource::Feedback(&policy)), ("twap", ControlSource::Constant(twap))] {
        let (_, tr) = forward_trajectory(source, first, &model.params, &spec, ctx.cfg.benchmark.q0)?;
        for n in 0..tr.rate.len() {
            text.push_str(&format!("{name},{n},{:?},{:?},{:?},{:?},{:?}\n", spec.t(n), first.x[n], first.y[n], tr.inventory[n], tr.rate[n]));
        }
    }
    write_text(&ctx.file(&format!("{label}.trajectories.csv"))?, &text)?;
    Ok(())
}

/// Day-level P&L of a strategy: the realised path when present, otherwise
/// the mean over simulated paths.
fn day_pnl(rows: &[PnlRow], day: &str, strategy: Strategy) -> Option<f64> {
    let of: Vec<&PnlRow> = rows.iter().filter(|r| r.day == day && r.strategy == strategy).collect();
    if let Some(r) = of.iter().find(|r| r.path.is_none()) {
        return Some(r.record.pnl);
    }
    Summary::of(&of.iter().map(|r| r.record.pnl).collect::<Vec<_>>()).map(|s| s.mean)
}

#[derive(Serialize)]
struct BenchmarkReport {
    days: Vec<String>,
    day_pnl: BTreeMap<String, BTreeMap<&'static str, f64>>,
    ot_vs_twap: Option<GainStats>,
    ot_vs_pf: Option<GainStats>,
}

fn cmd_benchmark(ctx: &Context_) -> Result<()> {
    let which = ctx.strategies();
    let mut rows = Vec::new();
    for sel in &ctx.days {
        log::info!("benchmark day {}", sel.day.label);
        rows.extend(benchmark_day(&ctx.cfg, &sel.day, sel.index, which)?);
    }
    atomic_write(&ctx.file("pnl.csv")?, |w| write_pnl_csv(w, &rows))?;
    let labels: Vec<String> = ctx.days.iter().map(|s| s.day.label.clone()).collect();
    let series = |s: Strategy| labels.iter().map(|d| day_pnl(&rows, d, s)).collect::<Option<Vec<f64>>>();
    let mut day_table = BTreeMap::new();
    for d in &labels {
        let mut m = BTreeMap::new();
        for s in [Strategy::Ot, Strategy::Twap, Strategy::Pf] {
            if let Some(v) = day_pnl(&rows, d, s) {
                m.insert(s.name(), v);
            }
        }
        day_table.insert(d.clone(), m);
    }
    let ot = series(Strategy::Ot);
    let gains = |other: Strategy| -> Result<Option<GainStats>> {
        match (&ot, series(other)) {
            (Some(a), Some(b)) => Ok(Some(gain_stats(a, &b)?)),
            _ => Ok(None),
        }
    };
    let report = BenchmarkReport {
        ot_vs_twap: if which.twap { gains(Strategy::Twap)? } else { None },
        ot_vs_pf: if which.pf { gains(Strategy::Pf)? } else { None },
        days: labels,
        day_pnl: day_table,
    };
    write_json(&ctx.file("gains.json")?, &report)
}

#[derive(Serialize)]
struct SweepSummary {
    value: f64,
    paths: usize,
    mean: f64,
    median: f64,
}

fn cmd_sweep(ctx: &Context_, axis: SweepAxis, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        bail!(windtrade_core::Error::invalid("values", "at least one value is required"));
    }
    let days: Vec<DayInput> = ctx.days.iter().map(|s| s.day.clone()).collect();
    let rows = run_sweep(&ctx.cfg, &days, axis, values)?;
    atomic_write(&ctx.file(&format!("sweep_{}.csv", axis.name()))?, |w| write_sweep_csv(w, axis, &rows))?;
    let summary: Vec<SweepSummary> = values
        .iter()
        .map(|&v| {
            let pnl: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.record.pnl).collect();
            let s = Summary::of(&pnl);
            SweepSummary { value: v, paths: pnl.len(), mean: s.map_or(f64::NAN, |s| s.mean), median: s.map_or(f64::NAN, |s| s.median) }
        })
        .collect();
    write_json(&ctx.file(&format!("sweep_{}.json", axis.name()))?, &summary)
}

fn cmd_regularization(ctx: &Context_, eps: &[f64], arg: DayArg) -> Result<()> {
    let sel = ctx.one(arg)?;
    let model = sel.day.model(sel.day.params(&ctx.cfg.model, ctx.cfg.benchmark.day_beta))?;
    let (b, _) = compute_domain_bounds(&model, &ctx.cfg.bounds)?;
    let grid = build_grid(&model.params, b, ctx.cfg.grid)?;
    let diffs = regularization_sweep(&model, &grid, ctx.cfg.picard, eps)?;
    let mut text = String::from("eps,sup_diff\n");
    for (e, d) in diffs {
        text.push_str(&format!("{e:?},{d:?}\n"));
    }
    write_text(&ctx.file("regularization.csv")?, &text)
}

fn cmd_simulate(ctx: &Context_, arg: DayArg) -> Result<()> {
    let sel = ctx.one(arg)?;
    let model = sel.day.model(sel.day.params(&ctx.cfg.model, ctx.cfg.benchmark.day_beta))?;
    let (b, _) = compute_domain_bounds(&model, &ctx.cfg.bounds)?;
    let spec = PathSpec::from_grid(&build_grid(&model.params, b, ctx.cfg.grid)?);
    let seed = windtrade_core::rng::stream_seed(ctx.cfg.run.seed, sel.index as u64);
    let batch = simulate_batch(&model, &spec, ctx.cfg.benchmark.paths, seed, true)?;
    let label = &sel.day.label;
    let mut text = String::from("path,n,t,x,y\n");
    for (p, path) in batch.paths.iter().enumerate() {
        for n in 0..path.len() {
            text.push_str(&format!("{p},{n},{:?},{:?},{:?}\n", path.times[n], path.x[n], path.y[n]));
        }
    }
    write_text(&ctx.file(&format!("{label}.paths.csv"))?, &text)?;
    let s = &batch.summary;
    let mut text = String::from("t,mean_x,var_x,mean_y,var_y,forecast_x,forecast_y\n");
    for n in 0..s.times.len() {
        let t = s.times[n];
        text.push_str(&format!(
            "{t:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            s.mean_x[n],
            s.var_x[n],
            s.mean_y[n],
            s.var_y[n],
            model.production.value(t),
            model.price.value(t)
        ));
    }
    write_text(&ctx.file(&format!("{label}.summary.csv"))?, &text)
}

fn run(cli: Cli) -> Result<()> {
    let ctx = load_context(&cli.common)?;
    match &cli.command {
        Command::Bounds(d) => cmd_bounds(&ctx, *d),
        Command::Solve(d) => cmd_solve(&ctx, *d),
        Command::Evaluate { snapshot, day } => cmd_evaluate(&ctx, snapshot, *day),
        Command::Benchmark => cmd_benchmark(&ctx),
        Command::SweepJumps { values } => cmd_sweep(&ctx, SweepAxis::Jumps, values),
        Command::SweepDelivery { values } => cmd_sweep(&ctx, SweepAxis::Delivery, values),
        Command::SweepHorizon { values } => cmd_sweep(&ctx, SweepAxis::Horizon, values),
        Command::SweepRegularization { eps, day } => cmd_regularization(&ctx, eps, *day),
        Command::Simulate(d) => cmd_simulate(&ctx, *d),
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    class: &'a str,
    kind: &'a str,
    message: String,
}

fn report(class: &str, kind: &str, message: String) {
    let record = ErrorRecord { class, kind, message };
    eprintln!("{}", serde_json::json!({ "error": record }));
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str, &'static str) {
    match err.chain().find_map(|e| e.downcast_ref::<windtrade_core::Error>()) {
        Some(e) => match e.class() {
            ErrorClass::Input => (2, "usage", e.tag()),
            ErrorClass::Data | ErrorClass::Io => (3, "data", e.tag()),
            ErrorClass::Solver => (4, "solver", e.tag()),
        },
        None if err.chain().any(|e| e.is::<std::io::Error>()) => (3, "data", "io"),
        None => (2, "usage", "usage"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if !usage {
                return ExitCode::SUCCESS;
            }
            report("usage", "usage", e.kind().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, class, kind) = exit_code(&err);
            eprintln!("error: {err:#}");
            report(class, kind, format!("{err:#}"));
            ExitCode::from(code)
        }
    }
}
