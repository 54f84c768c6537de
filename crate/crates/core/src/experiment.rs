//! Day-level pipelines: synthetic trading days, the three-stage solve,
//! strategy evaluation on simulated or realised paths, sensitivity sweeps,
//! and the P&L table format.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bounds::{build_grid, compute_domain_bounds, BoundsOptions, DeviationBound, Grid, Resolution};
use crate::config::RunConfig;
use crate::data::{TradingDay, QUARTER, QUARTERS_PER_DAY};
use crate::error::{Error, Result};
use crate::hjb::{solve_stage3_observed, terminal_from_stage2, PicardOptions, Stage3Options, Stage3Solution, StepDiagnostics, ValueStack};
use crate::kbe::{solve_post_gate, TerminalPenalty};
use crate::market::{DerivativeRule, ForecastCurve, MarketModel, ModelParams, SigmaMode};
use crate::policy::{forward_evaluate, pf_solve, twap_rate, ControlSource, PfOptions, PnlRecord, Policy};
use crate::rng::stream_seed;
use crate::simulate::{simulate_batch, MarketPath, PathSpec};

/// Forecasts (and optionally realised series) defining one trading day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayInput {
    pub label: String,
    pub production: ForecastCurve,
    pub price: ForecastCurve,
    /// Realised capacity fraction and price on quarter-hour knots.
    pub realized: Option<(ForecastCurve, ForecastCurve)>,
}

/// Smooth random forecasts on `[0, 24]` h with a merit-order tilt.
pub fn synthetic_day(seed: u64, index: usize) -> DayInput {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, index as u64));
    let tau = std::f64::consts::TAU;
    let (a1, f1) = (rng.random_range(0.1..0.25), rng.random_range(0.0..tau));
    let (a2, f2) = (rng.random_range(0.0..0.08), rng.random_range(0.0..tau));
    let level = rng.random_range(0.3..0.6);
    let base = rng.random_range(40.0..90.0);
    let (b1, b2) = (rng.random_range(10.0..30.0), rng.random_range(0.0..15.0));
    let tilt = rng.random_range(10.0..40.0);
    let n = QUARTERS_PER_DAY + 1;
    let mut px = Vec::with_capacity(n);
    let mut py = Vec::with_capacity(n);
    for s in 0..n {
        let t = s as f64 * QUARTER;
        let x = (level + a1 * (tau * t / 24.0 + f1).sin() + a2 * (tau * t / 8.0 + f2).sin()).clamp(0.02, 0.98);
        let y = base + b1 * (tau * (t - 13.0) / 24.0).sin() + b2 * (2.0 * tau * (t - 17.0) / 24.0).sin() - tilt * (x - level);
        px.push(x);
        py.push(y);
    }
    DayInput {
        label: format!("synthetic-{index:03}"),
        production: ForecastCurve::uniform(0.0, QUARTER, px, DerivativeRule::Interval).expect("valid knots"),
        price: ForecastCurve::uniform(0.0, QUARTER, py, DerivativeRule::Interval).expect("valid knots"),
        realized: None,
    }
}

impl DayInput {
    /// Day built from ingested records, curves extended flat to 24 h.
    pub fn from_trading_day(day: &TradingDay, rule: DerivativeRule) -> Result<Self> {
        let end = QUARTERS_PER_DAY as f64 * QUARTER;
        Ok(Self {
            label: day.date().to_string(),
            production: ForecastCurve::uniform(0.0, QUARTER, day.production.forecast.clone(), rule)?.extended_to(end),
            price: day.price_curve(rule)?.extended_to(end),
            realized: Some((day.production.actual_curve()?.extended_to(end), day.realized_price_curve()?.extended_to(end))),
        })
    }

    /// Parameters for this day; `beta` becomes the largest absolute forecast
    /// price when `day_beta` is set.
    pub fn params(&self, base: &ModelParams, day_beta: bool) -> ModelParams {
        let mut p = base.clone();
        if day_beta {
            let (lo, hi) = self.price.range_on(0.0, p.horizon());
            p.beta = lo.abs().max(hi.abs());
        }
        p
    }

    pub fn model(&self, params: ModelParams) -> Result<MarketModel> {
        MarketModel::new(params, &self.production, self.price.clone())
    }

    /// Realised path sampled on the solver axis; the price is frozen from
    /// gate closure.
    pub fn realized_path(&self, spec: &PathSpec) -> Option<MarketPath> {
        let (x, y) = self.realized.as_ref()?;
        let times = spec.times();
        let xs = times.iter().map(|&t| x.value(t).clamp(0.0, 1.0)).collect();
        let frozen = y.value(spec.t(spec.idx_gc));
        let ys = times.iter().enumerate().map(|(n, &t)| if n < spec.idx_gc { y.value(t) } else { frozen }).collect();
        Some(MarketPath { times, x: xs, y: ys, seed: 0, excursions: 0 })
    }
}

/// Numerical settings of a day solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveSettings {
    pub resolution: Resolution,
    pub bounds: BoundsOptions,
    pub picard: PicardOptions,
    pub keep_levels: bool,
}

impl SolveSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { resolution: cfg.grid, bounds: cfg.bounds.clone(), picard: cfg.picard, keep_levels: true }
    }
}

/// All three stages for one day.
#[derive(Debug, Clone)]
pub struct DaySolution {
    pub grid: Grid,
    pub deviation: DeviationBound,
    pub stage3: Stage3Solution,
}

/// Bounds, grid, Stages I–II and Stage III for one model.
pub fn solve_day(model: &MarketModel, settings: &SolveSettings, observe: impl FnMut(&StepDiagnostics)) -> Result<DaySolution> {
    let (bounds, deviation) = compute_domain_bounds(model, &settings.bounds)?;
    let grid = build_grid(&model.params, bounds, settings.resolution)?;
    let mode = model.sigma_mode();
    let stage2 = solve_post_gate(model, &grid, TerminalPenalty::Linear { beta: model.params.beta }, mode)?;
    let terminal = terminal_from_stage2(&grid, &stage2)?;
    let opts = Stage3Options { picard: settings.picard, sigma_mode: mode, keep_levels: settings.keep_levels, ..Stage3Options::default() };
    let stage3 = solve_stage3_observed(model, &grid, terminal, &opts, observe)?;
    Ok(DaySolution { grid, deviation, stage3 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ot,
    Twap,
    Pf,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ot => "ot",
            Strategy::Twap => "twap",
            Strategy::Pf => "pf",
        }
    }
}

/// Which strategies to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategySet {
    pub ot: bool,
    pub twap: bool,
    pub pf: bool,
}

/// One row of the P&L table.
#[derive(Debug, Clone, PartialEq)]
pub struct PnlRow {
    pub day: String,
    pub strategy: Strategy,
    /// Path index, or `None` for the realised path.
    pub path: Option<usize>,
    pub record: PnlRecord,
}

/// Simulated paths of a day; seeds depend only on `(seed, day_index, path)`
/// so that settings compared in a sweep share their random numbers.
pub fn day_paths(model: &MarketModel, spec: &PathSpec, n_paths: usize, seed: u64, day_index: usize) -> Result<Vec<MarketPath>> {
    Ok(simulate_batch(model, spec, n_paths, stream_seed(seed, day_index as u64), true)?.paths)
}

/// Evaluates the selected strategies on each path.
pub fn evaluate_day(
    model: &MarketModel,
    stack: &ValueStack,
    label: &str,
    paths: &[(Option<usize>, MarketPath)],
    q0: f64,
    which: StrategySet,
    pf: &PfOptions,
) -> Result<Vec<PnlRow>> {
    let spec = PathSpec::from_grid(&stack.grid);
    let params = &model.params;
    let policy = if which.ot { Some(Policy::new(stack, params.gamma)?) } else { None };
    let twap = twap_rate(&model.production, params, q0).0;
    let mut rows = Vec::new();
    for (idx, path) in paths {
        let mut push = |strategy, record| rows.push(PnlRow { day: label.to_string(), strategy, path: *idx, record });
        if let Some(p) = &policy {
            push(Strategy::Ot, forward_evaluate(ControlSource::Feedback(p), path, params, &spec, q0)?);
        }
        if which.twap {
            push(Strategy::Twap, forward_evaluate(ControlSource::Constant(twap), path, params, &spec, q0)?);
        }
        if which.pf {
            let sol = pf_solve(path, params, &spec, q0, pf)?;
            push(Strategy::Pf, forward_evaluate(ControlSource::Schedule(&sol.schedule), path, params, &spec, q0)?);
        }
    }
    Ok(rows)
}

/// Full benchmark for one day: solve, simulate (and take the realised path
/// when present), evaluate.
pub fn benchmark_day(cfg: &RunConfig, day: &DayInput, day_index: usize, which: StrategySet) -> Result<Vec<PnlRow>> {
    let model = day.model(day.params(&cfg.model, cfg.benchmark.day_beta))?;
    let settings = SolveSettings::from_config(cfg);
    let solution = solve_day(&model, &settings, |_| {})?;
    let spec = PathSpec::from_grid(&solution.grid);
    let mut paths: Vec<(Option<usize>, MarketPath)> = Vec::new();
    if let Some(real) = day.realized_path(&spec) {
        paths.push((None, real));
    }
    if cfg.benchmark.paths > 0 {
        let sims = day_paths(&model, &spec, cfg.benchmark.paths, cfg.run.seed, day_index)?;
        paths.extend(sims.into_iter().enumerate().map(|(i, p)| (Some(i), p)));
    }
    let pf = PfOptions { n_q: cfg.benchmark.pf_n_q, eps_pad: cfg.bounds.eps_pad, picard: cfg.picard };
    evaluate_day(&model, &solution.stage3.stack, &day.label, &paths, cfg.benchmark.q0, which, &pf)
}

/// Parameter axis of a sensitivity sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Jump intensity `lambda`.
    Jumps,
    /// Delivery window `L`; the horizon is kept and gate closure moves.
    Delivery,
    /// Horizon `T`; lead time and delivery window are kept.
    Horizon,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Jumps => "lambda",
            SweepAxis::Delivery => "delivery",
            SweepAxis::Horizon => "horizon",
        }
    }

    pub fn apply(self, base: &ModelParams, value: f64) -> Result<ModelParams> {
        let mut p = base.clone();
        match self {
            SweepAxis::Jumps => p.lambda = value,
            SweepAxis::Delivery => {
                let horizon = base.horizon();
                p.delivery = value;
                p.t_gc = horizon - p.lead - value;
            }
            SweepAxis::Horizon => p.t_gc = value - p.lead - p.delivery,
        }
        p.validate()?;
        Ok(p)
    }
}

/// One evaluated path of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub day: String,
    pub path: usize,
    pub record: PnlRecord,
}

/// Optimal-trading P&L for every sweep value, day and simulated path.
pub fn run_sweep(cfg: &RunConfig, days: &[DayInput], axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let settings = SolveSettings::from_config(cfg);
    let mut rows = Vec::new();
    for &value in values {
        for (d, day) in days.iter().enumerate() {
            let params = axis.apply(&day.params(&cfg.model, cfg.benchmark.day_beta), value)?;
            let model = day.model(params)?;
            let sol = solve_day(&model, &settings, |_| {})?;
            let spec = PathSpec::from_grid(&sol.grid);
            let paths: Vec<(Option<usize>, MarketPath)> =
                day_paths(&model, &spec, cfg.benchmark.paths, cfg.run.seed, d)?.into_iter().enumerate().map(|(i, p)| (Some(i), p)).collect();
            let which = StrategySet { ot: true, twap: false, pf: false };
            for r in evaluate_day(&model, &sol.stage3.stack, &day.label, &paths, cfg.benchmark.q0, which, &PfOptions::default())? {
                rows.push(SweepRow { value, day: r.day, path: r.path.unwrap_or(0), record: r.record });
            }
        }
    }
    Ok(rows)
}

/// Median of the sweep P&L for each value, in the order given.
pub fn sweep_medians(rows: &[SweepRow], values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let pnl: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.record.pnl).collect();
            crate::policy::Summary::of(&pnl).map_or(f64::NAN, |s| s.median)
        })
        .collect()
}

const PNL_HEADER: &str = "day,strategy,path,running_cost,terminal_penalty,delivered_energy,terminal_inventory,pnl";

fn record_fields(r: &PnlRecord) -> String {
    format!("{:?},{:?},{:?},{:?},{:?}", r.running_cost, r.terminal_penalty, r.delivered_energy, r.terminal_inventory, r.pnl)
}

/// P&L table; `path` is `realized` for the recorded path.
pub fn write_pnl_csv(w: &mut impl Write, rows: &[PnlRow]) -> Result<()> {
    writeln!(w, "{PNL_HEADER}")?;
    for r in rows {
        let path = r.path.map_or_else(|| "realized".to_string(), |p| p.to_string());
        writeln!(w, "{},{},{},{}", r.day, r.strategy.name(), path, record_fields(&r.record))?;
    }
    Ok(())
}

/// Sweep table with the swept value in the first column.
pub fn write_sweep_csv(w: &mut impl Write, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{},{PNL_HEADER}", axis.name())?;
    for r in rows {
        writeln!(w, "{:?},{},ot,{},{}", r.value, r.day, r.path, record_fields(&r.record))?;
    }
    Ok(())
}

/// Value at `t = 0` with one volatility treatment applied in all three stages.
pub fn initial_value(model: &MarketModel, grid: &Grid, picard: PicardOptions, mode: SigmaMode) -> Result<crate::hjb::Field3> {
    let stage2 = solve_post_gate(model, grid, TerminalPenalty::Linear { beta: model.params.beta }, mode)?;
    let terminal = terminal_from_stage2(grid, &stage2)?;
    let opts = Stage3Options { picard, sigma_mode: mode, keep_levels: false, ..Stage3Options::default() };
    Ok(solve_stage3_observed(model, grid, terminal, &opts, |_| {})?.stack.levels.pop().expect("one level"))
}

/// `sup |V - V^eps|` at `t = 0` for each `eps`, which must lie in `(0, 1/2)`
/// and be strictly decreasing.
pub fn regularization_sweep(model: &MarketModel, grid: &Grid, picard: PicardOptions, eps: &[f64]) -> Result<Vec<(f64, f64)>> {
    if let Some(&bad) = eps.iter().find(|&&e| !(e > 0.0 && e < 0.5)) {
        return Err(Error::Domain { what: "eps_regularization", value: bad });
    }
    if eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("eps", "values must be strictly decreasing"));
    }
    let exact = initial_value(model, grid, picard, SigmaMode::Exact)?;
    eps.iter()
        .map(|&e| {
            let reg = initial_value(model, grid, picard, SigmaMode::Regularized(e))?;
            let diff = exact.data.iter().zip(&reg.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok((e, diff))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_days_are_reproducible_and_valid() {
        let a = synthetic_day(3, 0);
        assert_eq!(a, synthetic_day(3, 0));
        assert_ne!(a.price, synthetic_day(3, 1).price);
        assert_eq!(a.production.end(), 24.0);
        assert!(a.production.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn sweep_axes_keep_the_stated_quantities() {
        let base = ModelParams::default();
        let d = SweepAxis::Delivery.apply(&base, 0.25).unwrap();
        assert!((d.horizon() - base.horizon()).abs() < 1e-12);
        let h = SweepAxis::Horizon.apply(&base, 12.0).unwrap();
        assert!((h.horizon() - 12.0).abs() < 1e-12);
        assert_eq!(h.delivery, base.delivery);
        assert_eq!(SweepAxis::Jumps.apply(&base, 2.083).unwrap().lambda, 2.083);
    }

    #[test]
    fn day_beta_is_the_largest_forecast_price() {
        let day = synthetic_day(1, 2);
        let p = day.params(&ModelParams::default(), true);
        let max = day.price.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(p.beta, max);
    }

    #[test]
    fn rejects_bad_regularization_lists() {
        let day = synthetic_day(1, 0);
        let model = day.model(ModelParams::default()).unwrap();
        let bounds = crate::bounds::DomainBounds::from_parts(&model.params, 0.0, 100.0, 1.0);
        let grid = build_grid(&model.params, bounds, Resolution { n_x: 4, n_y: 4, n_q: 4, n_m: 4, n_t: 288 }).unwrap();
        assert!(regularization_sweep(&model, &grid, PicardOptions::default(), &[0.6]).is_err());
        assert!(regularization_sweep(&model, &grid, PicardOptions::default(), &[1e-3, 1e-2]).is_err());
    }
}
