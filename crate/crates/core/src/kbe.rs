//! Post-gate-closure stages: backward Kolmogorov equations for the expected
//! imbalance penalty.
//!
//! Stage I runs on the delivery window in `(x, m)` where `m` is the delivered
//! energy per unit capacity; Stage II carries the `m = 0` slice back over the
//! lead time in `x` alone. Both are fully implicit with upwinded advection.

use serde::{Deserialize, Serialize};

use crate::bounds::Grid;
use crate::error::{Error, Result};
use crate::fd::{pos, Diagonals, SevenPointSystem, Tridiagonal, TridiagonalLu};
use crate::market::{MarketModel, SigmaMode};

/// Imbalance penalty `g(xi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalPenalty {
    /// `beta |xi|`
    Linear { beta: f64 },
    /// `beta xi^2 / 2`
    Quadratic { beta: f64 },
}

impl TerminalPenalty {
    pub fn eval(&self, xi: f64) -> f64 {
        match *self {
            TerminalPenalty::Linear { beta } => beta * xi.abs(),
            TerminalPenalty::Quadratic { beta } => 0.5 * beta * xi * xi,
        }
    }
}

/// Linear penalty `beta |xi|`.
pub fn terminal_penalty(xi: f64, beta: f64) -> f64 {
    beta * xi.abs()
}

/// Values on the `(x, m)` grid for one inventory level, `m` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct StageIField {
    pub q: f64,
    pub nx1: usize,
    pub nm1: usize,
    pub values: Vec<f64>,
}

impl StageIField {
    pub fn at(&self, i: usize, l: usize) -> f64 {
        self.values[i * self.nm1 + l]
    }

    /// The `m = 0` slice over all `x` nodes.
    pub fn m0_slice(&self) -> Vec<f64> {
        (0..self.nx1).map(|i| self.at(i, 0)).collect()
    }
}

/// Values on the `(x, q)` grid at gate closure, `q` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct StageIIField {
    pub nx1: usize,
    pub nq1: usize,
    pub values: Vec<f64>,
}

impl StageIIField {
    pub fn at(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.nq1 + k]
    }
}

/// Stage I for a single inventory level.
pub fn stage1_solve(model: &MarketModel, grid: &Grid, q: f64, penalty: TerminalPenalty) -> Result<StageIField> {
    Ok(stage1_solve_batch(model, grid, &[q], penalty, model.sigma_mode())?.remove(0))
}

/// Stage I for several inventory levels sharing one factorisation per step.
pub fn stage1_solve_batch(
    model: &MarketModel,
    grid: &Grid,
    qs: &[f64],
    penalty: TerminalPenalty,
    sigma_mode: SigmaMode,
) -> Result<Vec<StageIField>> {
    let p_max = model.params.p_max;
    stage1_solve_with(model, grid, qs, sigma_mode, |q, _x, m| penalty.eval(q - p_max * m))
}

/// Stage I with an arbitrary terminal datum `h(q, x, m)`.
pub fn stage1_solve_with(
    model: &MarketModel,
    grid: &Grid,
    qs: &[f64],
    sigma_mode: SigmaMode,
    terminal: impl Fn(f64, f64, f64) -> f64,
) -> Result<Vec<StageIField>> {
    let (nx, nm) = (grid.n_x, grid.n_m);
    let (nx1, nm1) = (nx + 1, nm + 1);
    let cols = qs.len();
    let (ni, nj) = (nx - 1, nm);
    let dtau = grid.dt;
    // Unknowns: interior x, m nodes 0..nm-1 (m = L is closed onto nm-1).
    let mut field: Vec<f64> = Vec::with_capacity(nx1 * nm1 * cols);
    for i in 0..nx1 {
        for l in 0..nm1 {
            for &q in qs {
                field.push(terminal(q, grid.x(i), grid.m(l)));
            }
        }
    }
    let mut rhs = vec![0.0; ni * nj * cols];
    for n in (grid.idx_delivery..grid.n_t).rev() {
        let t = grid.t(n);
        let mut sys = SevenPointSystem::zeros(ni, nj, Diagonals::SeNw);
        for a in 0..ni {
            let x = grid.x(a + 1);
            let mu = model.mu_x(t, x);
            let s2 = model.sigma_x_mode(x, sigma_mode).powi(2);
            let west = -dtau * (pos(-mu) / grid.dx + 0.5 * s2 / (grid.dx * grid.dx));
            let east = -dtau * (pos(mu) / grid.dx + 0.5 * s2 / (grid.dx * grid.dx));
            let north = -dtau * x / grid.dm;
            for b in 0..nj {
                let r = a * nj + b;
                sys.west[r] = west;
                sys.east[r] = east;
                sys.north[r] = north;
                sys.center[r] = 1.0 - west - east - north;
            }
        }
        let lu = sys.factorize()?;
        for a in 0..ni {
            for b in 0..nj {
                let src = ((a + 1) * nm1 + b) * cols;
                rhs[(a * nj + b) * cols..(a * nj + b + 1) * cols].copy_from_slice(&field[src..src + cols]);
            }
        }
        lu.solve_many(&mut rhs, cols);
        for a in 0..ni {
            for b in 0..nj {
                let dst = ((a + 1) * nm1 + b) * cols;
                field[dst..dst + cols].copy_from_slice(&rhs[(a * nj + b) * cols..(a * nj + b + 1) * cols]);
            }
        }
        close_xm(&mut field, nx1, nm1, cols);
        if field.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "stage I", step: n });
        }
    }
    Ok(qs
        .iter()
        .enumerate()
        .map(|(c, &q)| StageIField {
            q,
            nx1,
            nm1,
            values: (0..nx1 * nm1).map(|r| field[r * cols + c]).collect(),
        })
        .collect())
}

fn close_xm(field: &mut [f64], nx1: usize, nm1: usize, cols: usize) {
    let row = |i: usize, l: usize| (i * nm1 + l) * cols;
    for i in 1..nx1 - 1 {
        let (src, dst) = (row(i, nm1 - 2), row(i, nm1 - 1));
        field.copy_within(src..src + cols, dst);
    }
    let stride = nm1 * cols;
    field.copy_within(stride..2 * stride, 0);
    field.copy_within((nx1 - 2) * stride..(nx1 - 1) * stride, (nx1 - 1) * stride);
}

/// Stage II: implicit `x`-only solve from delivery start back to gate closure.
///
/// `start` holds, for each `q` node, the Stage I values at `m = 0` over all
/// `x` nodes.
pub fn stage2_solve(model: &MarketModel, grid: &Grid, start: &[Vec<f64>], sigma_mode: SigmaMode) -> Result<StageIIField> {
    let nx1 = grid.n_x + 1;
    let nq1 = start.len();
    if let Some(bad) = start.iter().find(|s| s.len() != nx1) {
        return Err(Error::Dimension { expected: nx1, actual: bad.len() });
    }
    let mut lines: Vec<Vec<f64>> = start.to_vec();
    let ni = grid.n_x - 1;
    let dtau = grid.dt;
    for n in (grid.idx_gc..grid.idx_delivery).rev() {
        let t = grid.t(n);
        let mut lower = vec![0.0; ni];
        let mut upper = vec![0.0; ni];
        let mut diag = vec![0.0; ni];
        for a in 0..ni {
            let x = grid.x(a + 1);
            let mu = model.mu_x(t, x);
            let s2 = model.sigma_x_mode(x, sigma_mode).powi(2);
            let w = -dtau * (pos(-mu) / grid.dx + 0.5 * s2 / (grid.dx * grid.dx));
            let e = -dtau * (pos(mu) / grid.dx + 0.5 * s2 / (grid.dx * grid.dx));
            diag[a] = 1.0 - w - e;
            lower[a] = w;
            upper[a] = e;
        }
        diag[0] += lower[0];
        diag[ni - 1] += upper[ni - 1];
        let lu = TridiagonalLu::factor(&Tridiagonal::new(lower, diag, upper)?)?;
        for line in lines.iter_mut() {
            lu.solve_in_place(&mut line[1..nx1 - 1]);
            line[0] = line[1];
            line[nx1 - 1] = line[nx1 - 2];
            if line.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { stage: "stage II", step: n });
            }
        }
    }
    let mut values = vec![0.0; nx1 * nq1];
    for (k, line) in lines.iter().enumerate() {
        for (i, &v) in line.iter().enumerate() {
            values[i * nq1 + k] = v;
        }
    }
    Ok(StageIIField { nx1, nq1, values })
}

/// Stages I and II over every inventory node of the grid.
pub fn solve_post_gate(model: &MarketModel, grid: &Grid, penalty: TerminalPenalty, sigma_mode: SigmaMode) -> Result<StageIIField> {
    let qs = grid.qs();
    let stage1 = stage1_solve_batch(model, grid, &qs, penalty, sigma_mode)?;
    let slices: Vec<Vec<f64>> = stage1.iter().map(StageIField::m0_slice).collect();
    stage2_solve(model, grid, &slices, sigma_mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{build_grid, DomainBounds, Resolution};
    use crate::market::{ForecastCurve, ModelParams};

    fn setup(alpha: f64) -> (MarketModel, Grid) {
        let params = ModelParams { alpha, ..ModelParams::default() };
        let prod = ForecastCurve::constant(0.0, params.horizon(), 0.4).unwrap();
        let price = ForecastCurve::constant(0.0, params.horizon(), 50.0).unwrap();
        let model = MarketModel::new(params.clone(), &prod, price).unwrap();
        let bounds = DomainBounds::from_parts(&params, 0.0, 100.0, 1.0);
        let grid = build_grid(&params, bounds, Resolution { n_x: 10, n_y: 4, n_q: 8, n_m: 10, n_t: 288 }).unwrap();
        (model, grid)
    }

    #[test]
    fn constant_terminal_is_preserved() {
        let (model, grid) = setup(0.012);
        let out = stage1_solve_with(&model, &grid, &[0.0, 1.0], model.sigma_mode(), |_, _, _| 7.5).unwrap();
        for f in &out {
            assert!(f.values.iter().all(|v| (v - 7.5).abs() < 1e-12));
        }
        let st2 = stage2_solve(&model, &grid, &[vec![3.0; grid.n_x + 1]], model.sigma_mode()).unwrap();
        assert!(st2.values.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn terminal_values_are_exact_before_stepping() {
        let (model, mut grid) = setup(0.012);
        grid.idx_delivery = grid.n_t;
        let pen = TerminalPenalty::Linear { beta: 40.0 };
        let f = stage1_solve(&model, &grid, 30.0, pen).unwrap();
        for i in 0..=grid.n_x {
            for l in 0..=grid.n_m {
                let expect = pen.eval(30.0 - model.params.p_max * grid.m(l));
                assert_eq!(f.at(i, l), expect);
            }
        }
    }

    #[test]
    fn stage1_is_monotone_in_terminal_data() {
        let (model, grid) = setup(0.012);
        let pen = TerminalPenalty::Linear { beta: 40.0 };
        let lo = stage1_solve_batch(&model, &grid, &[10.0], pen, model.sigma_mode()).unwrap();
        let hi = stage1_solve_with(&model, &grid, &[10.0], model.sigma_mode(), |q, _, m| pen.eval(q - 100.0 * m) + 0.5 * m).unwrap();
        for (a, b) in lo[0].values.iter().zip(&hi[0].values) {
            assert!(b >= a);
        }
    }
}
