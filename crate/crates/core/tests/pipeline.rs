use std::fmt::Write as _;
use std::path::Path;

use windtrade_core::data::load_dataset;
use windtrade_core::experiment::{benchmark_day, solve_day, synthetic_day, DayInput, SolveSettings, Strategy, StrategySet};
use windtrade_core::policy::{forward_evaluate, ControlSource};
use windtrade_core::snapshot::{read_stack, write_stack, SnapshotMeta};
use windtrade_core::{DerivativeRule, ModelParams, PathSpec, Policy, Resolution, RunConfig};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.grid = Resolution { n_x: 6, n_y: 6, n_q: 40, n_m: 16, n_t: 200 };
    cfg.benchmark.paths = 4;
    cfg.benchmark.pf_n_q = 100;
    cfg
}

fn write_dataset(dir: &Path) {
    let mut prod = String::from("timestamp,forecast_MW,actual_MW,capacity_MW\n");
    for (day, quarters) in [("2024-03-02", 96), ("2024-03-03", 96), ("2024-03-04", 90)] {
        for q in 0..quarters {
            let (h, m) = (q / 4, (q % 4) * 15);
            let f = 40.0 + 20.0 * (q as f64 / 15.0).sin();
            let a = f + 5.0 * (q as f64 / 7.0).cos();
            writeln!(prod, "{day} {h:02}:{m:02}:00,{f},{a},100").unwrap();
        }
    }
    std::fs::write(dir.join("production.csv"), prod).unwrap();
    let mut prices = String::from("timestamp,price_EUR_MWh\n");
    for d in 1..=4 {
        for h in 0..24 {
            let p = 60.0 + 15.0 * ((h as f64 - 7.0) / 24.0 * std::f64::consts::TAU).sin() + d as f64;
            writeln!(prices, "2024-03-{d:02}T{h:02}:00:00,{p}").unwrap();
        }
    }
    std::fs::write(dir.join("prices.csv"), prices).unwrap();
}

#[test]
fn dataset_days_solve_and_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let cfg = small_config();
    let set = load_dataset(dir.path(), cfg.benchmark.n_w).unwrap();
    assert_eq!(set.days.len(), 2);
    assert_eq!(set.rejected.len(), 1);
    assert_eq!(set.rejected[0].0.to_string(), "2024-03-04");

    let day = DayInput::from_trading_day(&set.days[0], DerivativeRule::Interval).unwrap();
    let rows = benchmark_day(&cfg, &day, 0, StrategySet { ot: true, twap: true, pf: true }).unwrap();
    let realized: Vec<_> = rows.iter().filter(|r| r.path.is_none()).collect();
    assert_eq!(realized.len(), 3);
    assert_eq!(rows.len(), 3 * (cfg.benchmark.paths + 1));
    for r in &rows {
        assert!(r.record.pnl.is_finite());
        assert!((r.record.pnl + r.record.running_cost + r.record.terminal_penalty).abs() < 1e-6 * r.record.pnl.abs().max(1.0));
    }
    let pf = realized.iter().find(|r| r.strategy == Strategy::Pf).unwrap();
    let twap = realized.iter().find(|r| r.strategy == Strategy::Twap).unwrap();
    assert!(pf.record.pnl >= twap.record.pnl);
}

#[test]
fn solved_stack_survives_a_snapshot_round_trip() {
    let cfg = small_config();
    let day = synthetic_day(3, 1);
    let model = day.model(day.params(&cfg.model, true)).unwrap();
    let settings = SolveSettings::from_config(&cfg);
    let sol = solve_day(&model, &settings, |_| {}).unwrap();
    assert!(sol.stage3.stack.is_complete());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("day.snap");
    let meta = SnapshotMeta { params_hash: windtrade_core::snapshot::params_hash(&model.params) };
    write_stack(&path, &sol.stage3.stack, &meta).unwrap();
    let (back, m) = read_stack(&path).unwrap();
    assert_eq!(m, meta);

    let spec = PathSpec::from_grid(&sol.grid);
    let paths = windtrade_core::experiment::day_paths(&model, &spec, 3, 11, 0).unwrap();
    let a = Policy::new(&sol.stage3.stack, model.params.gamma).unwrap();
    let b = Policy::new(&back, model.params.gamma).unwrap();
    for p in &paths {
        let ra = forward_evaluate(ControlSource::Feedback(&a), p, &model.params, &spec, 0.0).unwrap();
        let rb = forward_evaluate(ControlSource::Feedback(&b), p, &model.params, &spec, 0.0).unwrap();
        assert_eq!(ra, rb);
    }
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let cfg = small_config();
    let day = synthetic_day(5, 0);
    let model = day.model(day.params(&ModelParams::default(), false)).unwrap();
    let settings = SolveSettings { keep_levels: false, ..SolveSettings::from_config(&cfg) };
    let a = solve_day(&model, &settings, |_| {}).unwrap();
    let b = solve_day(&model, &settings, |_| {}).unwrap();
    let (va, vb) = (a.stage3.stack.initial(), b.stage3.stack.initial());
    assert!(va.data.iter().zip(&vb.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.stage3.diagnostics, b.stage3.diagnostics);
}
