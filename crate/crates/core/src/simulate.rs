//! Monte Carlo paths of the wind and price processes.
//!
//! Euler–Maruyama on a uniform time grid. Wind is clamped to `[0, 1]` after
//! every step; the price carries per-step Poisson-aggregated jumps and is
//! frozen from gate closure on.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::bounds::Grid;
use crate::error::{Error, Result};
use crate::market::{JumpLaw, MarketModel, ModelParams};
use crate::rng::stream_seed;

/// Uniform time axis of a simulated path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSpec {
    /// Number of steps; the path has `n_t + 1` samples.
    pub n_t: usize,
    pub dt: f64,
    /// First index at which the price is frozen.
    pub idx_gc: usize,
    /// First index of the delivery window.
    pub idx_delivery: usize,
}

impl PathSpec {
    pub fn from_grid(grid: &Grid) -> Self {
        Self { n_t: grid.n_t, dt: grid.dt, idx_gc: grid.idx_gc, idx_delivery: grid.idx_delivery }
    }

    /// Axis on `[0, T]` with step close to `dt`; gate closure and delivery
    /// start are rounded to the nearest node.
    pub fn with_step(params: &ModelParams, dt: f64) -> Result<Self> {
        let horizon = params.horizon();
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        let n_t = (horizon / dt).round().max(1.0) as usize;
        let dt = horizon / n_t as f64;
        let idx_gc = ((params.t_gc / dt).round() as usize).min(n_t);
        let idx_delivery = ((params.delivery_start() / dt).round() as usize).clamp(idx_gc, n_t);
        Ok(Self { n_t, dt, idx_gc, idx_delivery })
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_t).map(|n| self.t(n)).collect()
    }
}

/// One joint sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
    /// Steps whose unclamped wind update left `[0, 1]`.
    pub excursions: usize,
}

impl MarketPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Checks that the path samples the given time axis.
    pub fn conforms_to(&self, spec: &PathSpec) -> Result<()> {
        if self.times.len() != spec.n_t + 1 || self.x.len() != self.times.len() || self.y.len() != self.times.len() {
            return Err(Error::Dimension { expected: spec.n_t + 1, actual: self.times.len() });
        }
        let off = self
            .times
            .iter()
            .enumerate()
            .map(|(n, &t)| (t - spec.t(n)).abs())
            .fold(0.0, f64::max);
        if off > 1e-9 * spec.t(spec.n_t).max(1.0) {
            return Err(Error::Data(format!("path times deviate from the grid by {off:e} h")));
        }
        Ok(())
    }
}

/// Unit normals `(w_x, w_y)` with correlation `rho`.
pub fn correlated_normals<R: Rng + ?Sized>(rng: &mut R, rho: f64) -> (f64, f64) {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    (a, rho * a + (1.0 - rho * rho).max(0.0).sqrt() * b)
}

/// Sum of the jumps arriving in one step.
fn step_jumps<R: Rng + ?Sized>(rng: &mut R, law: &JumpLaw, counts: Option<&Poisson<f64>>) -> f64 {
    let Some(dist) = counts else { return 0.0 };
    let k = dist.sample(rng) as u64;
    (0..k)
        .map(|_| {
            let u1: f64 = rng.sample(Open01);
            let u2: f64 = rng.sample(Open01);
            law.sample(u1, u2)
        })
        .sum()
}

/// Joint wind/price path started on the forecasts.
pub fn simulate_path(model: &MarketModel, spec: &PathSpec, seed: u64) -> MarketPath {
    let p = &model.params;
    let law = p.jump_law();
    let counts = (p.lambda > 0.0).then(|| Poisson::new(p.lambda * spec.dt).expect("positive Poisson mean"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = spec.dt.sqrt();
    let mut x = Vec::with_capacity(spec.n_t + 1);
    let mut y = Vec::with_capacity(spec.n_t + 1);
    x.push(model.production.value(0.0));
    y.push(model.price.value(0.0));
    let mut excursions = 0;
    for n in 0..spec.n_t {
        let t = spec.t(n);
        let (xn, yn) = (x[n], y[n]);
        let (wx, wy) = correlated_normals(&mut rng, p.rho);
        let (mu_x, mu_y) = model.step_drifts(t, spec.dt, xn, yn);
        let raw = xn + mu_x * spec.dt + model.sigma_x(xn) * sq * wx;
        if !(0.0..=1.0).contains(&raw) {
            excursions += 1;
        }
        x.push(raw.clamp(0.0, 1.0));
        let jumps = step_jumps(&mut rng, &law, counts.as_ref());
        if n < spec.idx_gc {
            y.push(yn + mu_y * spec.dt + p.sigma * sq * wy + jumps);
        } else {
            y.push(yn);
        }
    }
    MarketPath { times: spec.times(), x, y, seed, excursions }
}

/// Wind samples of [`simulate_path`].
pub fn simulate_wind_path(model: &MarketModel, spec: &PathSpec, seed: u64) -> Vec<f64> {
    simulate_path(model, spec, seed).x
}

/// Price samples of [`simulate_path`].
pub fn simulate_price_path(model: &MarketModel, spec: &PathSpec, seed: u64) -> Vec<f64> {
    simulate_path(model, spec, seed).y
}

/// Pointwise mean and sample variance trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub mean_x: Vec<f64>,
    pub var_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub var_y: Vec<f64>,
    pub excursions: usize,
}

impl BatchSummary {
    /// Standard error of the price mean at node `n`.
    pub fn std_err_y(&self, n: usize) -> f64 {
        (self.var_y[n] / self.n_paths as f64).sqrt()
    }

    pub fn std_err_x(&self, n: usize) -> f64 {
        (self.var_x[n] / self.n_paths as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, v: &[f64]) {
        self.count += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(v) {
            let d = x - *m;
            *m += d / self.count;
            *s += d * (x - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = other.clone();
            return;
        }
        let n = self.count + other.count;
        for k in 0..self.mean.len() {
            let d = other.mean[k] - self.mean[k];
            self.mean[k] += d * other.count / n;
            self.m2[k] += other.m2[k] + d * d * self.count * other.count / n;
        }
        self.count = n;
    }

    fn variance(&self) -> Vec<f64> {
        if self.count < 2.0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|s| s / (self.count - 1.0)).collect()
    }
}

const CHUNK: usize = 256;

/// Result of [`simulate_batch`].
#[derive(Debug, Clone)]
pub struct Batch {
    /// Empty unless paths were requested.
    pub paths: Vec<MarketPath>,
    pub summary: BatchSummary,
}

/// `n_paths` paths with seeds split from `master_seed`.
///
/// Work is partitioned into fixed chunks reduced in index order, so the
/// summary does not depend on the thread count.
pub fn simulate_batch(model: &MarketModel, spec: &PathSpec, n_paths: usize, master_seed: u64, keep_paths: bool) -> Result<Batch> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths", "must be >= 1"));
    }
    let len = spec.n_t + 1;
    let chunks: Vec<(Moments, Moments, usize, Vec<MarketPath>)> = (0..n_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let (mut mx, mut my) = (Moments::new(len), Moments::new(len));
            let mut exc = 0;
            let mut kept = Vec::new();
            for idx in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
                let path = simulate_path(model, spec, stream_seed(master_seed, idx as u64));
                mx.push(&path.x);
                my.push(&path.y);
                exc += path.excursions;
                if keep_paths {
                    kept.push(path);
                }
            }
            (mx, my, exc, kept)
        })
        .collect();
    let (mut mx, mut my) = (Moments::new(len), Moments::new(len));
    let mut excursions = 0;
    let mut paths = Vec::new();
    for (cx, cy, e, kept) in chunks {
        mx.merge(&cx);
        my.merge(&cy);
        excursions += e;
        paths.extend(kept);
    }
    let summary = BatchSummary {
        times: spec.times(),
        n_paths,
        var_x: mx.variance(),
        var_y: my.variance(),
        mean_x: mx.mean,
        mean_y: my.mean,
        excursions,
    };
    Ok(Batch { paths, summary })
}
