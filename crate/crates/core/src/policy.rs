//! Feedback control from a value stack, forward P&L evaluation, and the
//! constant-rate and perfect-foresight benchmarks.

use serde::{Deserialize, Serialize};

use crate::bounds::inventory_bounds;
use crate::error::{Error, Result};
use crate::hjb::{optimal_rate, q_line_step, Field3, PicardOptions, QLine, QLineWork, ValueStack};
use crate::market::{ForecastCurve, ModelParams};
use crate::simulate::{MarketPath, PathSpec};

/// Cadence of the delivery-energy quadrature for the constant-rate target, h.
pub const DELIVERY_STEP: f64 = 0.25;

const SNAP: f64 = 1e-9;

/// Cell index and weight on a uniform axis with `n` intervals, clamped.
fn locate(v: f64, lo: f64, h: f64, n: usize) -> (usize, f64) {
    let s = ((v - lo) / h).clamp(0.0, n as f64);
    let mut i = (s.floor() as usize).min(n - 1);
    let mut w = s - i as f64;
    if w < SNAP {
        w = 0.0;
    } else if w > 1.0 - SNAP {
        i += 1;
        w = 0.0;
        if i == n {
            i = n - 1;
            w = 1.0;
        }
    }
    (i, w)
}

fn trilinear(f: &Field3, (i, wx): (usize, f64), (j, wy): (usize, f64), (k, wq): (usize, f64)) -> f64 {
    let mut acc = 0.0;
    for (di, cx) in [(0, 1.0 - wx), (1, wx)] {
        if cx == 0.0 {
            continue;
        }
        for (dj, cy) in [(0, 1.0 - wy), (1, wy)] {
            if cy == 0.0 {
                continue;
            }
            for (dk, cq) in [(0, 1.0 - wq), (1, wq)] {
                if cq == 0.0 {
                    continue;
                }
                acc += cx * cy * cq * f.get(i + di, j + dj, k + dk);
            }
        }
    }
    acc
}

/// Centred difference of `f` with step `h`, one-sided where `q +- h` leaves
/// `[lo, hi]`.
fn slope_on_axis(f: impl Fn(f64) -> f64, q: f64, lo: f64, hi: f64, h: f64) -> f64 {
    let q = q.clamp(lo, hi);
    let a = (q - h).max(lo);
    let b = (q + h).min(hi);
    (f(b) - f(a)) / (b - a)
}

/// Feedback trading rate read from a solved value stack.
#[derive(Debug, Clone, Copy)]
pub struct Policy<'a> {
    pub stack: &'a ValueStack,
    pub gamma: f64,
}

impl<'a> Policy<'a> {
    pub fn new(stack: &'a ValueStack, gamma: f64) -> Result<Self> {
        if !stack.is_complete() {
            return Err(Error::Incomplete { detail: format!("value stack holds {} of {} levels", stack.levels.len(), stack.top_index + 1) });
        }
        Ok(Self { stack, gamma })
    }

    /// Multilinear interpolant in `(t, x, y, q)`; arguments are clamped to the domain.
    pub fn value(&self, t: f64, x: f64, y: f64, q: f64) -> f64 {
        let g = &self.stack.grid;
        let b = &g.bounds;
        let (n, wt) = locate(t, 0.0, g.dt, g.idx_gc);
        let lx = locate(x, 0.0, g.dx, g.n_x);
        let ly = locate(y, b.y_min, g.dy, g.n_y);
        let lq = locate(q, b.q_min, g.dq, g.n_q);
        let at = |m: usize| trilinear(self.stack.at_time_index(m).expect("complete stack"), lx, ly, lq);
        if wt == 0.0 {
            at(n)
        } else if wt == 1.0 {
            at(n + 1)
        } else {
            (1.0 - wt) * at(n) + wt * at(n + 1)
        }
    }

    /// `d/dq` of the interpolant by a grid-step centred difference.
    pub fn value_slope(&self, t: f64, x: f64, y: f64, q: f64) -> f64 {
        let g = &self.stack.grid;
        slope_on_axis(|s| self.value(t, x, y, s), q, g.q(0), g.q(g.n_q), g.dq)
    }

    pub fn psi(&self, t: f64, x: f64, y: f64, q: f64) -> f64 {
        let b = &self.stack.grid.bounds;
        optimal_rate(y, self.value_slope(t, x, y, q), self.gamma, b.psi_min, b.psi_max)
    }
}

/// Where the trading rate comes from during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum ControlSource<'a> {
    Feedback(&'a Policy<'a>),
    Constant(f64),
    /// One rate per trading node.
    Schedule(&'a [f64]),
}

/// Cost decomposition of one evaluated path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnlRecord {
    pub running_cost: f64,
    pub terminal_penalty: f64,
    pub delivered_energy: f64,
    pub terminal_inventory: f64,
    pub total_cost: f64,
    pub pnl: f64,
}

/// Delivered energy per unit capacity, `sum_{n >= idx_delivery} X_n dt`.
pub fn delivered_fraction(path: &MarketPath, spec: &PathSpec) -> f64 {
    path.x[spec.idx_delivery..spec.n_t].iter().sum::<f64>() * spec.dt
}

/// Inventory and rate trajectories of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub inventory: Vec<f64>,
    pub rate: Vec<f64>,
}

/// Forward Euler pass over the trading window; no trading after gate closure.
pub fn forward_evaluate(source: ControlSource<'_>, path: &MarketPath, params: &ModelParams, spec: &PathSpec, q0: f64) -> Result<PnlRecord> {
    forward_trajectory(source, path, params, spec, q0).map(|(r, _)| r)
}

/// As [`forward_evaluate`], also returning the inventory and rate paths.
pub fn forward_trajectory(
    source: ControlSource<'_>,
    path: &MarketPath,
    params: &ModelParams,
    spec: &PathSpec,
    q0: f64,
) -> Result<(PnlRecord, Trajectory)> {
    path.conforms_to(spec)?;
    if let ControlSource::Schedule(s) = source {
        if s.len() != spec.idx_gc {
            return Err(Error::Dimension { expected: spec.idx_gc, actual: s.len() });
        }
    }
    let dt = spec.dt;
    let mut q = q0;
    let mut cost = 0.0;
    let mut inventory = Vec::with_capacity(spec.idx_gc + 1);
    let mut rate = Vec::with_capacity(spec.idx_gc);
    inventory.push(q);
    for n in 0..spec.idx_gc {
        let y = path.y[n];
        let psi = match source {
            ControlSource::Feedback(p) => p.psi(spec.t(n), path.x[n], y, q),
            ControlSource::Constant(c) => c,
            ControlSource::Schedule(s) => s[n],
        };
        q += psi * dt;
        cost += (-psi * y + 0.5 * params.gamma * psi * psi) * dt;
        inventory.push(q);
        rate.push(psi);
    }
    let delivered = params.p_max * delivered_fraction(path, spec);
    let penalty = params.beta * (q - delivered).abs();
    let total = cost + penalty;
    let record = PnlRecord {
        running_cost: cost,
        terminal_penalty: penalty,
        delivered_energy: delivered,
        terminal_inventory: q,
        total_cost: total,
        pnl: -total,
    };
    Ok((record, Trajectory { inventory, rate }))
}

/// Forecast delivered energy on the 15-minute delivery nodes and the
/// constant rate reaching it from `q0`.
pub fn twap_rate(production: &ForecastCurve, params: &ModelParams, q0: f64) -> (f64, f64) {
    let nodes = (params.delivery / DELIVERY_STEP).round().max(1.0) as usize;
    let start = params.delivery_start();
    let energy = params.p_max * (0..nodes).map(|l| production.value(start + l as f64 * DELIVERY_STEP) * DELIVERY_STEP).sum::<f64>();
    ((energy - q0) / params.t_gc, energy)
}

// ───────────────────────── perfect foresight ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfOptions {
    /// Inventory intervals of the one-dimensional grid.
    pub n_q: usize,
    pub eps_pad: f64,
    pub picard: PicardOptions,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self { n_q: 1000, eps_pad: 1.0, picard: PicardOptions::default() }
    }
}

/// One-dimensional inventory axis of a perfect-foresight solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QAxis {
    pub q_min: f64,
    pub n_q: usize,
    pub dq: f64,
    pub psi_min: f64,
    pub psi_max: f64,
}

impl QAxis {
    pub fn q(&self, k: usize) -> f64 {
        self.q_min + k as f64 * self.dq
    }

    pub fn q_max(&self) -> f64 {
        self.q(self.n_q)
    }

    pub fn value(&self, line: &[f64], q: f64) -> f64 {
        let (k, w) = locate(q, self.q_min, self.dq, self.n_q);
        if w == 0.0 {
            line[k]
        } else {
            (1.0 - w) * line[k] + w * line[k + 1]
        }
    }

    pub fn slope(&self, line: &[f64], q: f64) -> f64 {
        slope_on_axis(|s| self.value(line, s), q, self.q_min, self.q_max(), self.dq)
    }
}

/// Perfect-foresight value levels and the realised control.
#[derive(Debug, Clone)]
pub struct PfSolution {
    pub axis: QAxis,
    /// `levels[r]` is the value at forward time index `idx_gc - r`.
    pub levels: Vec<Vec<f64>>,
    /// Delivered energy the solve targets.
    pub energy: f64,
    pub schedule: Vec<f64>,
    /// Value at `(0, q0)`.
    pub value0: f64,
}

/// Deterministic HJB in `(t, q)` along a known price path.
pub fn pf_solve_with_axis(path: &MarketPath, params: &ModelParams, spec: &PathSpec, axis: QAxis, energy: f64, q0: f64, picard: &PicardOptions) -> Result<PfSolution> {
    path.conforms_to(spec)?;
    picard.validate()?;
    if axis.n_q < 3 {
        return Err(Error::invalid("pf.n_q", "must be >= 3"));
    }
    let n1 = axis.n_q + 1;
    let steps = spec.idx_gc;
    let mut levels = Vec::with_capacity(steps + 1);
    levels.push((0..n1).map(|k| params.beta * (axis.q(k) - energy).abs()).collect::<Vec<f64>>());
    let mut ws = QLineWork::default();
    for r in 0..steps {
        let line = QLine {
            y: path.y[steps - r - 1],
            gamma: params.gamma,
            psi_min: axis.psi_min,
            psi_max: axis.psi_max,
            dq: axis.dq,
            dtau: spec.dt,
        };
        let mut next = vec![0.0; n1];
        q_line_step(&levels[r], &mut next, &line, picard, &mut ws)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "perfect foresight", step: r + 1 });
        }
        levels.push(next);
    }
    let mut q = q0;
    let mut schedule = Vec::with_capacity(steps);
    for n in 0..steps {
        let v = &levels[steps - n];
        let psi = optimal_rate(path.y[n], axis.slope(v, q), params.gamma, axis.psi_min, axis.psi_max);
        schedule.push(psi);
        q += psi * spec.dt;
    }
    let value0 = axis.value(&levels[steps], q0);
    Ok(PfSolution { axis, levels, energy, schedule, value0 })
}

/// Perfect-foresight benchmark on the inventory domain implied by the
/// realised price range; the target is the path's metered delivery.
pub fn pf_solve(path: &MarketPath, params: &ModelParams, spec: &PathSpec, q0: f64, opts: &PfOptions) -> Result<PfSolution> {
    let traded = &path.y[..=spec.idx_gc.min(path.y.len() - 1)];
    let y_min = traded.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = traded.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (q_min, q_max) = inventory_bounds(y_min, y_max, params.beta, params.gamma, params.t_gc, opts.eps_pad);
    let energy = params.p_max * delivered_fraction(path, spec);
    let q_min = q_min.min(energy.min(q0) - opts.eps_pad);
    let q_max = q_max.max(energy.max(q0) + opts.eps_pad);
    let axis = QAxis {
        q_min,
        n_q: opts.n_q,
        dq: (q_max - q_min) / opts.n_q as f64,
        psi_min: q_min / params.t_gc,
        psi_max: q_max / params.t_gc,
    };
    pf_solve_with_axis(path, params, spec, axis, energy, q0, &opts.picard)
}

// ───────────────────────── gain statistics ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Self { mean: v.iter().sum::<f64>() / n as f64, median, max: v[n - 1], min: v[0] })
    }
}

/// Daywise gains of strategy A over strategy B.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainStats {
    pub days: usize,
    pub absolute: Summary,
    /// Percent; `None` when every day had a zero reference P&L.
    pub relative: Option<Summary>,
    /// Days left out of the relative statistics.
    pub relative_excluded: usize,
    pub win_rate: f64,
}

pub fn gain_stats(pnl_a: &[f64], pnl_b: &[f64]) -> Result<GainStats> {
    if pnl_a.len() != pnl_b.len() {
        return Err(Error::Dimension { expected: pnl_a.len(), actual: pnl_b.len() });
    }
    if pnl_a.is_empty() {
        return Err(Error::invalid("days", "no records"));
    }
    let abs: Vec<f64> = pnl_a.iter().zip(pnl_b).map(|(a, b)| a - b).collect();
    let rel: Vec<f64> = abs.iter().zip(pnl_b).filter(|(_, b)| **b != 0.0).map(|(g, b)| 100.0 * g / b.abs()).collect();
    let wins = abs.iter().filter(|g| **g > 0.0).count();
    Ok(GainStats {
        days: abs.len(),
        absolute: Summary::of(&abs).unwrap(),
        relative: Summary::of(&rel),
        relative_excluded: abs.len() - rel.len(),
        win_rate: wins as f64 / abs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{build_grid, DomainBounds, Resolution};
    use approx::assert_relative_eq;

    fn spec_for(params: &ModelParams) -> PathSpec {
        PathSpec::with_step(params, params.horizon() / 576.0).unwrap()
    }

    fn flat_path(spec: &PathSpec, x: f64, y: f64) -> MarketPath {
        MarketPath { times: spec.times(), x: vec![x; spec.n_t + 1], y: vec![y; spec.n_t + 1], seed: 0, excursions: 0 }
    }

    #[test]
    fn locate_snaps_to_nodes() {
        assert_eq!(locate(2.0, 0.0, 0.5, 10), (4, 0.0));
        assert_eq!(locate(5.0, 0.0, 0.5, 10), (9, 1.0));
        assert_eq!(locate(-1.0, 0.0, 0.5, 10), (0, 0.0));
        let (i, w) = locate(1.2, 0.0, 0.5, 10);
        assert_eq!(i, 2);
        assert_relative_eq!(w, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn no_trading_pays_only_the_imbalance() {
        let p = ModelParams::default();
        let spec = spec_for(&p);
        let path = flat_path(&spec, 0.5, 60.0);
        let r = forward_evaluate(ControlSource::Constant(0.0), &path, &p, &spec, 10.0).unwrap();
        assert_eq!(r.running_cost, 0.0);
        assert_relative_eq!(r.delivered_energy, 50.0, epsilon = 1e-9);
        assert_relative_eq!(r.pnl, -p.beta * 40.0, epsilon = 1e-7);
    }

    #[test]
    fn constant_rate_at_zero_price_costs_friction() {
        let p = ModelParams::default();
        let spec = spec_for(&p);
        let path = flat_path(&spec, 0.5, 0.0);
        let r = forward_evaluate(ControlSource::Constant(3.0), &path, &p, &spec, 0.0).unwrap();
        assert_relative_eq!(r.running_cost, 0.5 * p.gamma * 9.0 * p.t_gc, max_relative = 1e-12);
        assert_relative_eq!(r.total_cost, r.running_cost + r.terminal_penalty);
    }

    #[test]
    fn twap_hits_the_target() {
        let p = ModelParams::default();
        let spec = spec_for(&p);
        let prod = ForecastCurve::constant(0.0, p.horizon(), 0.5).unwrap();
        let (rate, energy) = twap_rate(&prod, &p, 0.0);
        assert_relative_eq!(energy, 50.0, epsilon = 1e-12);
        assert_relative_eq!(rate, 50.0 / p.t_gc, epsilon = 1e-12);
        let r = forward_evaluate(ControlSource::Constant(rate), &flat_path(&spec, 0.5, 40.0), &p, &spec, 0.0).unwrap();
        assert_relative_eq!(r.terminal_inventory, 50.0, max_relative = 1e-12);
        assert!(r.terminal_penalty < 1e-8);
    }

    #[test]
    fn friction_is_additive() {
        let p = ModelParams::default();
        let spec = spec_for(&p);
        let path = MarketPath { y: (0..=spec.n_t).map(|n| 50.0 + (n as f64 * 0.1).sin()).collect(), ..flat_path(&spec, 0.4, 0.0) };
        let sched: Vec<f64> = (0..spec.idx_gc).map(|n| (n as f64 * 0.05).cos() * 4.0).collect();
        let with = forward_evaluate(ControlSource::Schedule(&sched), &path, &p, &spec, 0.0).unwrap();
        let without = forward_evaluate(ControlSource::Schedule(&sched), &path, &ModelParams { gamma: 0.0, ..p.clone() }, &spec, 0.0).unwrap();
        let friction: f64 = sched.iter().map(|s| 0.5 * p.gamma * s * s * spec.dt).sum();
        assert_relative_eq!(with.running_cost, without.running_cost + friction, max_relative = 1e-12);
    }

    #[test]
    fn pf_constant_price_closed_form() {
        let p = ModelParams { beta: 0.0, ..ModelParams::default() };
        let spec = spec_for(&p);
        let c = 40.0;
        let path = flat_path(&spec, 0.5, c);
        let sol = pf_solve(&path, &p, &spec, 0.0, &PfOptions::default()).unwrap();
        for &psi in &sol.schedule {
            assert_relative_eq!(psi, c / p.gamma, max_relative = 1e-9);
        }
        assert_relative_eq!(sol.value0, -c * c * p.t_gc / (2.0 * p.gamma), max_relative = 1e-9);
        let zero = pf_solve(&flat_path(&spec, 0.5, 0.0), &p, &spec, 0.0, &PfOptions::default()).unwrap();
        assert!(zero.schedule.iter().all(|&s| s == 0.0));
        assert_eq!(zero.value0, 0.0);
    }

    #[test]
    fn feedback_at_nodes_uses_nodal_differences() {
        let p = ModelParams::default();
        let bounds = DomainBounds::from_parts(&p, 0.0, 100.0, 1.0);
        let grid = build_grid(&p, bounds, Resolution { n_x: 4, n_y: 4, n_q: 6, n_m: 4, n_t: 288 }).unwrap();
        let levels: Vec<Field3> = (0..=grid.idx_gc)
            .map(|n| Field3::from_fn(5, 5, 7, |i, j, k| ((n * 31 + i * 7 + j * 3 + k * k * 11) % 17) as f64 * 1e3))
            .collect();
        let stack = ValueStack { grid: grid.clone(), levels, top_index: grid.idx_gc };
        let pol = Policy::new(&stack, p.gamma).unwrap();
        for (n, i, j, k) in [(0, 1, 2, 3), (10, 4, 0, 0), (grid.idx_gc, 2, 2, 6)] {
            let f = stack.at_time_index(n).unwrap();
            let slope = if k == 0 {
                (f.get(i, j, 1) - f.get(i, j, 0)) / grid.dq
            } else if k == 6 {
                (f.get(i, j, 6) - f.get(i, j, 5)) / grid.dq
            } else {
                (f.get(i, j, k + 1) - f.get(i, j, k - 1)) / (2.0 * grid.dq)
            };
            let expect = optimal_rate(grid.y(j), slope, p.gamma, grid.bounds.psi_min, grid.bounds.psi_max);
            assert_eq!(pol.psi(grid.t(n), grid.x(i), grid.y(j), grid.q(k)), expect);
        }
    }

    #[test]
    fn gain_statistics() {
        let g = gain_stats(&[110.0], &[100.0]).unwrap();
        assert_eq!(g.absolute.mean, 10.0);
        assert_eq!(g.relative.unwrap().mean, 10.0);
        assert_eq!(g.win_rate, 1.0);
        let same = gain_stats(&[1.0, -2.0], &[1.0, -2.0]).unwrap();
        assert_eq!(same.win_rate, 0.0);
        assert_eq!(same.absolute.max, 0.0);
        let z = gain_stats(&[5.0, 1.0], &[0.0, -4.0]).unwrap();
        assert_eq!(z.relative_excluded, 1);
        assert_eq!(z.relative.unwrap().mean, 125.0);
    }
}
