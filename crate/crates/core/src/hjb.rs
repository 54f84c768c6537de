//! Pre-gate-closure stage: the HJB integro-differential equation in
//! `(x, y, q)` solved backward from gate closure by Lie–IMEX splitting.
//!
//! Each time step runs
//! 1. a semi-implicit `q`-substep (frozen-speed linearisation of the
//!    Hamiltonian refined by damped Picard iterations),
//! 2. an implicit `(x, y)`-substep with one banded factorisation reused over
//!    every inventory node,
//! 3. an explicit jump substep using exponential recurrences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::Grid;
use crate::error::{Error, Result};
use crate::fd::{pos, BandedLu, Diagonals, SevenPointSystem};
use crate::kbe::StageIIField;
use crate::market::{JumpLaw, MarketModel, SigmaMode};

// ───────────────────────────── fields ─────────────────────────────

/// Dense `(x, y, q)` samples, `q` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    pub nx1: usize,
    pub ny1: usize,
    pub nq1: usize,
    pub data: Vec<f64>,
}

impl Field3 {
    pub fn filled(nx1: usize, ny1: usize, nq1: usize, value: f64) -> Self {
        Self { nx1, ny1, nq1, data: vec![value; nx1 * ny1 * nq1] }
    }

    pub fn from_fn(nx1: usize, ny1: usize, nq1: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(nx1 * ny1 * nq1);
        for i in 0..nx1 {
            for j in 0..ny1 {
                for k in 0..nq1 {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { nx1, ny1, nq1, data }
    }

    pub fn for_grid(grid: &Grid, value: f64) -> Self {
        Self::filled(grid.n_x + 1, grid.n_y + 1, grid.n_q + 1, value)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.ny1 + j) * self.nq1 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    pub fn line(&self, i: usize, j: usize) -> &[f64] {
        let s = self.idx(i, j, 0);
        &self.data[s..s + self.nq1]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Field3) -> Result<()> {
        if (self.nx1, self.ny1, self.nq1) == (other.nx1, other.ny1, other.nq1) {
            Ok(())
        } else {
            Err(Error::Dimension { expected: self.data.len(), actual: other.data.len() })
        }
    }
}

/// Zero-order extrapolation on every face; edges and corners take the value
/// of the clamped interior index.
pub fn apply_closure(f: &mut Field3) {
    let (nx1, ny1, nq1) = (f.nx1, f.ny1, f.nq1);
    for line in f.data.chunks_mut(nq1) {
        line[0] = line[1];
        line[nq1 - 1] = line[nq1 - 2];
    }
    let plane = ny1 * nq1;
    for p in f.data.chunks_mut(plane) {
        p.copy_within(nq1..2 * nq1, 0);
        p.copy_within((ny1 - 2) * nq1..(ny1 - 1) * nq1, (ny1 - 1) * nq1);
    }
    f.data.copy_within(plane..2 * plane, 0);
    f.data.copy_within((nx1 - 2) * plane..(nx1 - 1) * plane, (nx1 - 1) * plane);
}

// ─────────────────────────── Hamiltonian ───────────────────────────

/// Minimiser of `-psi y + gamma psi^2 / 2 + psi p` over `[psi_min, psi_max]`.
#[inline]
pub fn optimal_rate(y: f64, p: f64, gamma: f64, psi_min: f64, psi_max: f64) -> f64 {
    ((y - p) / gamma).clamp(psi_min, psi_max)
}

/// Hamiltonian value and minimiser.
#[inline]
pub fn hamiltonian(y: f64, p: f64, gamma: f64, psi_min: f64, psi_max: f64) -> (f64, f64) {
    let free = (y - p) / gamma;
    if free < psi_min || free > psi_max {
        let b = if free < psi_min { psi_min } else { psi_max };
        (0.5 * gamma * b * b + b * (p - y), b)
    } else {
        (-(y - p) * (y - p) / (2.0 * gamma), free)
    }
}

/// Minimiser of `psi (p - y) + gamma psi^2 / 2` where a buying rate sees the
/// forward slope `p_fwd` and a selling rate the backward slope `p_bwd`.
#[inline]
pub fn upwind_rate(y: f64, p_fwd: f64, p_bwd: f64, gamma: f64, psi_min: f64, psi_max: f64) -> f64 {
    let cost = |psi: f64, p: f64| psi * (p - y) + 0.5 * gamma * psi * psi;
    let buy = ((y - p_fwd) / gamma).clamp(psi_min.max(0.0), psi_max.max(0.0));
    let sell = ((y - p_bwd) / gamma).clamp(psi_min.min(0.0), psi_max.min(0.0));
    let rate = if cost(buy, p_fwd) <= cost(sell, p_bwd) { buy } else { sell };
    rate.clamp(psi_min, psi_max)
}

// ─────────────────────────── q-substep ───────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub omega: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { max_iter: 15, tol: 1e-6, omega: 0.5 }
    }
}

impl PicardOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::invalid("picard.max_iter", "must be >= 1"));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::invalid("picard.omega", "must lie in (0, 1]"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("picard.tol", "must be >= 0"));
        }
        Ok(())
    }
}

/// Per-line inputs of the `q`-substep.
#[derive(Debug, Clone, Copy)]
pub struct QLine {
    pub y: f64,
    pub gamma: f64,
    pub psi_min: f64,
    pub psi_max: f64,
    pub dq: f64,
    pub dtau: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LineOutcome {
    pub iterations: usize,
    pub converged: bool,
}

/// Scratch buffers for one `q`-line.
#[derive(Debug, Clone, Default)]
pub struct QLineWork {
    /// Speeds of the last frozen linearisation, interior nodes only.
    pub speeds: Vec<f64>,
    next: Vec<f64>,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
    scratch: Vec<f64>,
}

impl QLineWork {
    fn resize(&mut self, m: usize) {
        for v in [
            &mut self.speeds,
            &mut self.next,
            &mut self.lower,
            &mut self.diag,
            &mut self.upper,
            &mut self.rhs,
            &mut self.scratch,
        ] {
            v.resize(m, 0.0);
        }
    }
}

/// One `q`-line of the semi-implicit Hamiltonian step; `u` receives the
/// result including the closed boundary nodes.
pub fn q_line_step(v: &[f64], u: &mut [f64], line: &QLine, picard: &PicardOptions, ws: &mut QLineWork) -> Result<LineOutcome> {
    let n = v.len();
    let m = n - 2;
    ws.resize(m);
    let QLine { y, gamma, psi_min, psi_max, dq, dtau } = *line;
    let lam = dtau / dq;
    for k in 1..n - 1 {
        let p0 = (v[k + 1] - v[k - 1]) / (2.0 * dq);
        ws.speeds[k - 1] = optimal_rate(y, p0, gamma, psi_min, psi_max);
    }
    u.copy_from_slice(v);
    let mut outcome = LineOutcome::default();
    for r in 0..picard.max_iter {
        for k in 1..n - 1 {
            let a = ws.speeds[k - 1];
            ws.rhs[k - 1] = v[k] + dtau * (0.5 * gamma * a * a - a * y);
            ws.lower[k - 1] = -lam * pos(-a);
            ws.upper[k - 1] = -lam * pos(a);
            ws.diag[k - 1] = 1.0 + lam * a.abs();
        }
        ws.diag[0] += ws.lower[0];
        ws.diag[m - 1] += ws.upper[m - 1];
        crate::fd::thomas_in_place(&ws.lower, &ws.diag, &ws.upper, &mut ws.rhs, &mut ws.scratch)?;
        u[1..n - 1].copy_from_slice(&ws.rhs);
        u[0] = u[1];
        u[n - 1] = u[n - 2];
        let mut delta = 0.0f64;
        for k in 1..n - 1 {
            let a = ws.speeds[k - 1];
            let target = upwind_rate(y, (u[k + 1] - u[k]) / dq, (u[k] - u[k - 1]) / dq, gamma, psi_min, psi_max);
            let next = (1.0 - picard.omega) * a + picard.omega * target;
            delta = delta.max((next - a).abs());
            ws.next[k - 1] = next;
        }
        outcome.iterations = r + 1;
        if delta <= picard.tol {
            outcome.converged = true;
            break;
        }
        if r + 1 < picard.max_iter {
            std::mem::swap(&mut ws.speeds, &mut ws.next);
        }
    }
    Ok(outcome)
}

/// Aggregate Picard statistics of one `q`-substep.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PicardStats {
    pub lines: usize,
    pub total_iterations: usize,
    pub max_iterations: usize,
    pub unconverged: usize,
}

impl PicardStats {
    fn add(&mut self, o: LineOutcome) {
        self.lines += 1;
        self.total_iterations += o.iterations;
        self.max_iterations = self.max_iterations.max(o.iterations);
        self.unconverged += usize::from(!o.converged);
    }

    fn merge(mut self, other: PicardStats) -> PicardStats {
        self.lines += other.lines;
        self.total_iterations += other.total_iterations;
        self.max_iterations = self.max_iterations.max(other.max_iterations);
        self.unconverged += other.unconverged;
        self
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.lines == 0 {
            0.0
        } else {
            self.total_iterations as f64 / self.lines as f64
        }
    }
}

/// Static inputs of the `q`-substep.
#[derive(Debug, Clone)]
pub struct QStepSpec {
    pub ys: Vec<f64>,
    pub gamma: f64,
    pub psi_min: f64,
    pub psi_max: f64,
    pub dq: f64,
    pub dtau: f64,
    pub picard: PicardOptions,
}

/// `q`-substep over every interior `(x, y)` line; all faces closed afterwards.
pub fn q_substep(v: &Field3, spec: &QStepSpec) -> Result<(Field3, PicardStats)> {
    let (nx1, ny1, nq1) = (v.nx1, v.ny1, v.nq1);
    let mut out = v.clone();
    let plane = ny1 * nq1;
    let stats = out.data[plane..(nx1 - 1) * plane]
        .par_chunks_mut(plane)
        .enumerate()
        .map(|(a, dst)| -> Result<PicardStats> {
            let i = a + 1;
            let mut ws = QLineWork::default();
            let mut stats = PicardStats::default();
            for j in 1..ny1 - 1 {
                let line = QLine {
                    y: spec.ys[j],
                    gamma: spec.gamma,
                    psi_min: spec.psi_min,
                    psi_max: spec.psi_max,
                    dq: spec.dq,
                    dtau: spec.dtau,
                };
                let src = v.line(i, j);
                let o = q_line_step(src, &mut dst[j * nq1..(j + 1) * nq1], &line, &spec.picard, &mut ws)?;
                stats.add(o);
            }
            Ok(stats)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(PicardStats::default(), PicardStats::merge);
    apply_closure(&mut out);
    Ok((out, stats))
}

// ─────────────────────────── (x, y)-substep ───────────────────────────

/// Coefficients of the `(x, y)` operator at interior nodes of one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct XyCoefficients {
    /// Wind drift per interior `x` node.
    pub mu_x: Vec<f64>,
    /// Wind volatility per interior `x` node.
    pub sigma_x: Vec<f64>,
    /// Price drift per interior `y` node.
    pub mu_y: Vec<f64>,
    pub sigma: f64,
    pub rho: f64,
}

impl XyCoefficients {
    pub fn from_model(model: &MarketModel, grid: &Grid, t: f64, mode: SigmaMode) -> Self {
        let xs: Vec<f64> = (1..grid.n_x).map(|i| grid.x(i)).collect();
        Self {
            mu_x: xs.iter().map(|&x| model.mu_x(t, x)).collect(),
            sigma_x: xs.iter().map(|&x| model.sigma_x_mode(x, mode)).collect(),
            mu_y: (1..grid.n_y).map(|j| model.mu_y(t, grid.y(j))).collect(),
            sigma: model.params.sigma,
            rho: model.params.rho,
        }
    }

    /// Implicit system `W - dtau L W = U` on the interior lattice.
    pub fn assemble(&self, dx: f64, dy: f64, dtau: f64) -> SevenPointSystem {
        let (ni, nj) = (self.mu_x.len(), self.mu_y.len());
        let mut s = SevenPointSystem::zeros(ni, nj, Diagonals::for_rho(self.rho));
        let sy2 = self.sigma * self.sigma;
        for a in 0..ni {
            let (mx, sx) = (self.mu_x[a], self.sigma_x[a]);
            let dxx = 0.5 * sx * sx / (dx * dx);
            let c = self.rho.abs() * sx * self.sigma / (2.0 * dx * dy);
            for b in 0..nj {
                let my = self.mu_y[b];
                let dyy = 0.5 * sy2 / (dy * dy);
                let r = a * nj + b;
                s.west[r] = -dtau * (pos(-mx) / dx + dxx - c);
                s.east[r] = -dtau * (pos(mx) / dx + dxx - c);
                s.south[r] = -dtau * (pos(-my) / dy + dyy - c);
                s.north[r] = -dtau * (pos(my) / dy + dyy - c);
                s.diag_a[r] = -dtau * c;
                s.diag_b[r] = -dtau * c;
                s.center[r] = 1.0 - (s.west[r] + s.east[r] + s.south[r] + s.north[r] + s.diag_a[r] + s.diag_b[r]);
            }
        }
        s
    }
}

/// Solves the factorised `(x, y)` system for every interior `q` node.
pub fn xy_substep(u: &Field3, lu: &BandedLu) -> Result<Field3> {
    let (nx1, ny1, nq1) = (u.nx1, u.ny1, u.nq1);
    let (ni, nj, cols) = (nx1 - 2, ny1 - 2, nq1 - 2);
    if lu.len() != ni * nj {
        return Err(Error::Dimension { expected: ni * nj, actual: lu.len() });
    }
    let mut rhs = vec![0.0; ni * nj * cols];
    for a in 0..ni {
        for b in 0..nj {
            let src = u.idx(a + 1, b + 1, 1);
            rhs[(a * nj + b) * cols..(a * nj + b + 1) * cols].copy_from_slice(&u.data[src..src + cols]);
        }
    }
    lu.solve_many(&mut rhs, cols);
    let mut out = u.clone();
    for a in 0..ni {
        for b in 0..nj {
            let dst = out.idx(a + 1, b + 1, 1);
            out.data[dst..dst + cols].copy_from_slice(&rhs[(a * nj + b) * cols..(a * nj + b + 1) * cols]);
        }
    }
    apply_closure(&mut out);
    Ok(out)
}

// ─────────────────────────── jump substep ───────────────────────────

/// Decay factors and weights of the localised jump operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpKernel {
    pub lambda: f64,
    pub p_plus: f64,
    pub r_plus: f64,
    pub r_minus: f64,
}

impl JumpKernel {
    pub fn new(law: &JumpLaw, dy: f64) -> Self {
        Self {
            lambda: law.lambda,
            p_plus: law.p_plus,
            r_plus: (-law.eta_plus * dy).exp(),
            r_minus: (-law.eta_minus * dy).exp(),
        }
    }

    pub fn p_minus(&self) -> f64 {
        1.0 - self.p_plus
    }

    pub fn check_cfl(&self, dtau: f64) -> Result<()> {
        if self.lambda > 0.0 && dtau * self.lambda > 1.0 + 1e-12 {
            return Err(Error::Cfl { dt: dtau, limit: 1.0 / self.lambda });
        }
        Ok(())
    }
}

/// Localised upward and downward jump integrals of one `y`-slice.
pub fn jump_recurrences(v: &[f64], r_plus: f64, r_minus: f64) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut up = vec![0.0; n];
    let mut down = vec![0.0; n];
    for j in (0..n - 1).rev() {
        up[j] = r_plus * up[j + 1] + (1.0 - r_plus) * v[j];
    }
    for j in 1..n {
        down[j] = r_minus * down[j - 1] + (1.0 - r_minus) * v[j];
    }
    (up, down)
}

/// `dtau * I_loc[v]` added to `base` at interior `y` nodes of one `x`-plane.
fn jump_plane(base: &mut [f64], v: &[f64], ny1: usize, nq1: usize, kernel: &JumpKernel, dtau: f64) {
    let (rp, rm) = (kernel.r_plus, kernel.r_minus);
    let (wp, wm) = (dtau * kernel.lambda * kernel.p_plus, dtau * kernel.lambda * kernel.p_minus());
    let c = dtau * kernel.lambda;
    let mut down = vec![0.0; ny1 * nq1];
    for j in 1..ny1 {
        let (prev, cur) = down.split_at_mut(j * nq1);
        let prev = &prev[(j - 1) * nq1..];
        let src = &v[j * nq1..(j + 1) * nq1];
        for k in 0..nq1 {
            cur[k] = rm * prev[k] + (1.0 - rm) * src[k];
        }
    }
    let mut up = vec![0.0; nq1];
    for j in (1..ny1 - 1).rev() {
        let src = &v[j * nq1..(j + 1) * nq1];
        let dn = &down[j * nq1..(j + 1) * nq1];
        let dst = &mut base[j * nq1..(j + 1) * nq1];
        for k in 0..nq1 {
            up[k] = rp * up[k] + (1.0 - rp) * src[k];
            dst[k] += wp * up[k] + wm * dn[k] - c * src[k];
        }
    }
}

/// Explicit jump update `W + dtau I_loc[V^n]` followed by closure.
pub fn jump_substep(w: &Field3, v_prev: &Field3, kernel: &JumpKernel, dtau: f64) -> Result<Field3> {
    kernel.check_cfl(dtau)?;
    w.same_shape(v_prev)?;
    let mut out = w.clone();
    if kernel.lambda == 0.0 {
        return Ok(out);
    }
    let (nx1, ny1, nq1) = (w.nx1, w.ny1, w.nq1);
    let plane = ny1 * nq1;
    out.data[plane..(nx1 - 1) * plane]
        .par_chunks_mut(plane)
        .zip(v_prev.data[plane..(nx1 - 1) * plane].par_chunks(plane))
        .for_each(|(dst, src)| jump_plane(dst, src, ny1, nq1, kernel, dtau));
    apply_closure(&mut out);
    Ok(out)
}

/// `v + dtau I_loc[v]` on a single `y`-slice (interior nodes only updated).
pub fn explicit_jump_map(v: &[f64], kernel: &JumpKernel, dtau: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    jump_plane(&mut out, v, v.len(), 1, kernel, dtau);
    out
}

/// Bound on the error of the localised jump integral at a node with
/// distances `d_plus`, `d_minus` to the price boundaries.
pub fn localization_error_bound(v_abs: f64, lipschitz: f64, d_plus: f64, d_minus: f64, law: &JumpLaw) -> f64 {
    let tail = |eta: f64, d: f64| (-eta * d).exp() * (v_abs + lipschitz * (d + 1.0 / eta));
    law.lambda * (law.p_plus * tail(law.eta_plus, d_plus) + law.p_minus() * tail(law.eta_minus, d_minus))
}

// ─────────────────────────── full solve ───────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage3Options {
    pub picard: PicardOptions,
    /// Jump substep and jump compensator.
    pub jumps: bool,
    /// Running cost and trading (the `q`-substep).
    pub trading: bool,
    pub sigma_mode: SigmaMode,
    /// Keep every time level; otherwise only the final one.
    pub keep_levels: bool,
}

impl Default for Stage3Options {
    fn default() -> Self {
        Self {
            picard: PicardOptions::default(),
            jumps: true,
            trading: true,
            sigma_mode: SigmaMode::Exact,
            keep_levels: true,
        }
    }
}

/// Scalar diagnostics of one backward step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub max_abs: f64,
    pub picard_mean: f64,
    pub picard_max: usize,
    pub picard_unconverged: usize,
    pub sign_violations: usize,
}

/// Value-function levels in reversed time: `levels[n]` is `t = T_gc - n dt`.
#[derive(Debug, Clone)]
pub struct ValueStack {
    pub grid: Grid,
    pub levels: Vec<Field3>,
    /// Time index of `levels[0]`; equals `grid.idx_gc` for a full stack.
    pub top_index: usize,
}

impl ValueStack {
    /// Field at forward time index `n` (`t = n dt`).
    pub fn at_time_index(&self, n: usize) -> Option<&Field3> {
        self.top_index.checked_sub(n).and_then(|r| self.levels.get(r))
    }

    pub fn initial(&self) -> &Field3 {
        self.levels.last().unwrap()
    }

    pub fn is_complete(&self) -> bool {
        self.levels.len() == self.top_index + 1
    }
}

#[derive(Debug, Clone)]
pub struct Stage3Solution {
    pub stack: ValueStack,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Terminal field at gate closure, constant in `y`.
pub fn terminal_from_stage2(grid: &Grid, stage2: &StageIIField) -> Result<Field3> {
    let (nx1, ny1, nq1) = (grid.n_x + 1, grid.n_y + 1, grid.n_q + 1);
    if stage2.nx1 != nx1 || stage2.nq1 != nq1 {
        return Err(Error::Dimension { expected: nx1 * nq1, actual: stage2.nx1 * stage2.nq1 });
    }
    Ok(Field3::from_fn(nx1, ny1, nq1, |i, _, k| stage2.at(i, k)))
}

/// Backward march from gate closure to `t = 0`.
pub fn solve_stage3(model: &MarketModel, grid: &Grid, terminal: Field3, opts: &Stage3Options) -> Result<Stage3Solution> {
    solve_stage3_observed(model, grid, terminal, opts, |_| {})
}

/// As [`solve_stage3`], reporting each step's diagnostics to `observe`.
pub fn solve_stage3_observed(
    model: &MarketModel,
    grid: &Grid,
    terminal: Field3,
    opts: &Stage3Options,
    mut observe: impl FnMut(&StepDiagnostics),
) -> Result<Stage3Solution> {
    opts.picard.validate()?;
    let expected = Field3::for_grid(grid, 0.0);
    expected.same_shape(&terminal)?;
    let dtau = grid.dt;
    let mut jump_model;
    let model = if opts.jumps {
        model
    } else {
        jump_model = model.clone();
        jump_model.compensate_jumps = false;
        jump_model.params.lambda = 0.0;
        &jump_model
    };
    let kernel = JumpKernel::new(&model.params.jump_law(), grid.dy);
    kernel.check_cfl(dtau)?;
    let qspec = QStepSpec {
        ys: grid.ys(),
        gamma: model.params.gamma,
        psi_min: grid.bounds.psi_min,
        psi_max: grid.bounds.psi_max,
        dq: grid.dq,
        dtau,
        picard: opts.picard,
    };
    let steps = grid.idx_gc;
    let mut levels = Vec::with_capacity(if opts.keep_levels { steps + 1 } else { 1 });
    let mut diagnostics = Vec::with_capacity(steps);
    let mut current = terminal;
    if !current.all_finite() {
        return Err(Error::NonFinite { stage: "stage III terminal", step: 0 });
    }
    for n in 0..steps {
        let t_new = grid.t(steps - n - 1);
        let (u, stats) = if opts.trading {
            q_substep(&current, &qspec)?
        } else {
            (current.clone(), PicardStats::default())
        };
        let coeffs = XyCoefficients::from_model(model, grid, t_new, opts.sigma_mode);
        let system = coeffs.assemble(grid.dx, grid.dy, dtau);
        let sign_violations = system.sign_violations();
        let lu = system.factorize()?;
        let w = xy_substep(&u, &lu)?;
        drop(u);
        let next = jump_substep(&w, &current, &kernel, dtau)?;
        drop(w);
        if !next.all_finite() {
            return Err(Error::NonFinite { stage: "stage III", step: n + 1 });
        }
        let diag = StepDiagnostics {
            step: n + 1,
            t: t_new,
            max_abs: next.max_abs(),
            picard_mean: stats.mean_iterations(),
            picard_max: stats.max_iterations,
            picard_unconverged: stats.unconverged,
            sign_violations,
        };
        observe(&diag);
        diagnostics.push(diag);
        let prev = std::mem::replace(&mut current, next);
        if opts.keep_levels {
            levels.push(prev);
        }
    }
    levels.push(current);
    let top_index = if opts.keep_levels { steps } else { 0 };
    Ok(Stage3Solution { stack: ValueStack { grid: grid.clone(), levels, top_index }, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::upwind_slope;
    use crate::bounds::{build_grid, DomainBounds, Resolution};
    use crate::market::{ForecastCurve, ModelParams};
    use approx::assert_relative_eq;

    fn small(params: ModelParams) -> (MarketModel, Grid) {
        let prod = ForecastCurve::constant(0.0, params.horizon(), 0.4).unwrap();
        let price = ForecastCurve::constant(0.0, params.horizon(), 50.0).unwrap();
        let model = MarketModel::new(params.clone(), &prod, price).unwrap();
        let bounds = DomainBounds::from_parts(&params, -100.0, 200.0, 1.0);
        let grid = build_grid(&params, bounds, Resolution { n_x: 6, n_y: 8, n_q: 10, n_m: 6, n_t: 288 }).unwrap();
        (model, grid)
    }

    #[test]
    fn hamiltonian_examples() {
        let (h, psi) = hamiltonian(50.0, 48.0, 0.02, -1e9, 1e9);
        assert_relative_eq!(psi, 100.0, epsilon = 1e-9);
        assert_relative_eq!(h, -100.0, epsilon = 1e-9);
        let (h, psi) = hamiltonian(50.0, 10.0, 0.02, -1000.0, 1000.0);
        assert_eq!(psi, 1000.0);
        assert_relative_eq!(h, -30_000.0, epsilon = 1e-9);
        assert_eq!(hamiltonian(3.0, 3.0, 0.5, -1.0, 1.0), (0.0, 0.0));
    }

    #[test]
    fn closure_copies_nearest_interior() {
        let mut f = Field3::from_fn(4, 5, 6, |i, j, k| (i * 100 + j * 10 + k) as f64);
        apply_closure(&mut f);
        assert_eq!(f.get(0, 0, 0), f.get(1, 1, 1));
        assert_eq!(f.get(3, 4, 5), f.get(2, 3, 4));
        assert_eq!(f.get(0, 2, 3), f.get(1, 2, 3));
        assert_eq!(f.get(2, 2, 5), f.get(2, 2, 4));
    }

    #[test]
    fn q_line_constant_data_is_one_hamiltonian_step() {
        let line = QLine { y: 40.0, gamma: 0.02, psi_min: -1e6, psi_max: 1e6, dq: 10.0, dtau: 0.1 };
        let v = vec![5.0; 12];
        let mut u = vec![0.0; 12];
        let mut ws = QLineWork::default();
        let o = q_line_step(&v, &mut u, &line, &PicardOptions::default(), &mut ws).unwrap();
        assert!(o.converged);
        assert_eq!(o.iterations, 1);
        let (h, _) = hamiltonian(40.0, 0.0, 0.02, -1e6, 1e6);
        for &x in &u {
            assert_relative_eq!(x, 5.0 + 0.1 * h, max_relative = 1e-12);
        }
    }

    #[test]
    fn q_line_solves_the_frozen_speed_system() {
        let line = QLine { y: 45.0, gamma: 0.5, psi_min: -200.0, psi_max: 200.0, dq: 2.0, dtau: 0.05 };
        let v: Vec<f64> = (0..30).map(|k| 40.0 * (k as f64 - 12.0).abs() + 3.0 * (k as f64 * 0.3).sin()).collect();
        for r_max in [1, 3, 15] {
            let mut u = vec![0.0; v.len()];
            let mut ws = QLineWork::default();
            let picard = PicardOptions { max_iter: r_max, ..Default::default() };
            q_line_step(&v, &mut u, &line, &picard, &mut ws).unwrap();
            for k in 1..v.len() - 1 {
                let a = ws.speeds[k - 1];
                let lhs = u[k] - line.dtau * a * upwind_slope(a, &u, k, line.dq);
                let rhs = v[k] + line.dtau * (0.5 * line.gamma * a * a - a * line.y);
                assert_relative_eq!(lhs, rhs, max_relative = 1e-10, epsilon = 1e-9);
            }
        }
    }

    fn kinked_line(dq: f64) -> (Vec<f64>, QLine) {
        let n = (4.0e4 / dq) as usize;
        let v = (0..=n).map(|k| 120.0 * (-2.0e4 + k as f64 * dq - 50.0).abs()).collect();
        (v, QLine { y: 50.0, gamma: 0.02, psi_min: -5e5, psi_max: 5e5, dq, dtau: 1.0 / 24.0 })
    }

    #[test]
    fn q_line_respects_dynamic_programming_bounds_at_a_kink() {
        for dq in [400.0, 100.0, 25.0] {
            let (v, line) = kinked_line(dq);
            let mut u = vec![0.0; v.len()];
            let mut ws = QLineWork::default();
            let picard = PicardOptions { max_iter: 200, ..Default::default() };
            q_line_step(&v, &mut u, &line, &picard, &mut ws).unwrap();
            let floor = v.iter().copied().fold(f64::INFINITY, f64::min) - line.dtau * line.y * line.y / (2.0 * line.gamma);
            for k in 1..v.len() - 1 {
                assert!(u[k] >= floor - 1e-6, "dq {dq} k {k}: {} < {floor}", u[k]);
                assert!(u[k] <= v[k] + 1e-6, "dq {dq} k {k}: {} > {}", u[k], v[k]);
            }
        }
    }

    #[test]
    fn converged_speeds_are_self_consistent() {
        let (v, line) = kinked_line(100.0);
        let mut u = vec![0.0; v.len()];
        let mut ws = QLineWork::default();
        let picard = PicardOptions { max_iter: 200, tol: 1e-6, omega: 0.5 };
        let o = q_line_step(&v, &mut u, &line, &picard, &mut ws).unwrap();
        assert!(o.converged, "{o:?}");
        for k in 1..v.len() - 1 {
            let fwd = (u[k + 1] - u[k]) / line.dq;
            let bwd = (u[k] - u[k - 1]) / line.dq;
            let target = upwind_rate(line.y, fwd, bwd, line.gamma, line.psi_min, line.psi_max);
            assert!((ws.speeds[k - 1] - target).abs() <= 1e-5, "k {k} a {} target {target} fwd {fwd} bwd {bwd}", ws.speeds[k - 1]);
        }
    }

    #[test]
    fn upwind_rate_rests_at_a_local_minimum() {
        assert_eq!(upwind_rate(60.0, 127.0, -101.0, 0.02, -1e5, 1e5), 0.0);
        assert_relative_eq!(upwind_rate(60.0, 10.0, 5.0, 0.02, -1e5, 1e5), 2500.0);
        assert_relative_eq!(upwind_rate(60.0, 90.0, 80.0, 0.02, -1e5, 1e5), -1000.0);
        assert_eq!(upwind_rate(60.0, 10.0, 5.0, 0.02, -1e5, 100.0), 100.0);
    }

    #[test]
    fn jump_recurrence_geometric_series() {
        let (up, down) = jump_recurrences(&[1.0; 9], 0.5, 0.25);
        for j in 0..9 {
            assert_relative_eq!(up[j], 1.0 - 0.5f64.powi(8 - j as i32), epsilon = 1e-15);
            assert_relative_eq!(down[j], 1.0 - 0.25f64.powi(j as i32), epsilon = 1e-15);
        }
    }

    #[test]
    fn explicit_jump_map_boundary_layer() {
        let k = JumpKernel { lambda: 2.0, p_plus: 0.6, r_plus: 0.3, r_minus: 0.7 };
        let n = 11;
        let out = explicit_jump_map(&vec![2.0; n], &k, 0.25);
        for j in 1..n - 1 {
            let expect = 2.0 - 0.25 * 2.0 * 2.0 * (0.6 * 0.3f64.powi((n - 1 - j) as i32) + 0.4 * 0.7f64.powi(j as i32));
            assert_relative_eq!(out[j], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let k = JumpKernel { lambda: 2.0, p_plus: 0.6, r_plus: 0.3, r_minus: 0.7 };
        let f = Field3::filled(4, 4, 4, 0.0);
        assert!(matches!(jump_substep(&f, &f, &k, 0.6), Err(Error::Cfl { .. })));
    }

    #[test]
    fn constants_survive_without_trading() {
        let (model, grid) = small(ModelParams { beta: 0.0, ..ModelParams::default() });
        let opts = Stage3Options { trading: false, jumps: false, ..Default::default() };
        let sol = solve_stage3(&model, &grid, Field3::for_grid(&grid, 3.5), &opts).unwrap();
        for level in &sol.stack.levels {
            assert!(level.data.iter().all(|v| (v - 3.5).abs() < 1e-11));
        }
        assert!(sol.stack.is_complete());
    }

    #[test]
    fn disabled_jumps_match_zero_intensity() {
        let (model, grid) = small(ModelParams::default());
        let terminal = Field3::from_fn(grid.n_x + 1, grid.n_y + 1, grid.n_q + 1, |i, _, k| (k as f64 - 4.0).abs() * 10.0 + i as f64);
        let off = Stage3Options { jumps: false, keep_levels: false, ..Default::default() };
        let a = solve_stage3(&model, &grid, terminal.clone(), &off).unwrap();
        let mut zero = model.clone();
        zero.params.lambda = 0.0;
        let on = Stage3Options { keep_levels: false, ..Default::default() };
        let b = solve_stage3(&zero, &grid, terminal, &on).unwrap();
        assert_eq!(a.stack.initial().data, b.stack.initial().data);
    }

    #[test]
    fn frozen_controls_and_no_noise_keep_stack_constant() {
        let params = ModelParams { alpha: 0.0, sigma: 0.0, lambda: 0.0, ..ModelParams::default() };
        let (model, mut grid) = small(params);
        grid.bounds.psi_min = 0.0;
        grid.bounds.psi_max = 0.0;
        let terminal = Field3::from_fn(grid.n_x + 1, grid.n_y + 1, grid.n_q + 1, |i, _, _| i as f64);
        let mut t = terminal.clone();
        apply_closure(&mut t);
        let sol = solve_stage3(&model, &grid, Field3 { data: vec![1.25; t.data.len()], ..t }, &Stage3Options::default()).unwrap();
        assert!(sol.stack.initial().data.iter().all(|v| (v - 1.25).abs() < 1e-12));
    }
}
