//! Computational domain: tail bounds for the price, inventory bounds and the
//! aligned space-time grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{MarketModel, ModelParams};
use crate::rng::stream_seed;

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Expected running maximum of the centred price OU component over `[0, horizon]`.
///
/// Transitions are exact; the maximum inside each step is sampled from the
/// Brownian bridge between the endpoints, so coarse steps carry no
/// discrete-monitoring bias to leading order.
pub fn estimate_m_u(
    kappa: f64,
    sigma: f64,
    horizon: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> McEstimate {
    assert!(n_paths > 0 && n_steps > 0);
    let dt = horizon / n_steps as f64;
    let decay = (-kappa * dt).exp();
    let sd = sigma * ((1.0 - decay * decay) / (2.0 * kappa)).sqrt();
    let bridge_var = sigma * sigma * dt;
    let maxima: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, p as u64));
            let mut u = 0.0f64;
            let mut running = 0.0f64;
            for _ in 0..n_steps {
                let z: f64 = rng.sample(StandardNormal);
                let next = decay * u + sd * z;
                let e: f64 = rng.random::<f64>();
                let e = 1.0 - e;
                let d = next - u;
                let peak = 0.5 * (u + next + (d * d - 2.0 * bridge_var * e.ln()).sqrt());
                running = running.max(peak);
                u = next;
            }
            running
        })
        .collect();
    summarize(&maxima)
}

pub(crate) fn summarize(samples: &[f64]) -> McEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    McEstimate { mean, std_err: (var / n).sqrt(), samples: samples.len() }
}

/// Tail-bound inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsOptions {
    /// Total tail probability allowed outside the price window.
    pub eps_tail: f64,
    /// Chernoff exponents; `None` selects half the jump rate.
    pub alpha_plus: Option<f64>,
    pub alpha_minus: Option<f64>,
    /// Padding added to the inventory bounds, in MWh.
    pub eps_pad: f64,
    pub mc_paths: usize,
    pub mc_steps: usize,
    pub seed: u64,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        Self {
            eps_tail: 0.01,
            alpha_plus: None,
            alpha_minus: None,
            eps_pad: 1.0,
            mc_paths: 20_000,
            mc_steps: 276,
            seed: 0x5eed_b0d5,
        }
    }
}

/// Components of the price deviation bound `K = K_U + K_J`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationBound {
    pub m_u: f64,
    pub sigma_sup: f64,
    pub k_u: f64,
    pub k_j: f64,
}

impl DeviationBound {
    pub fn total(&self) -> f64 {
        self.k_u + self.k_j
    }
}

/// `K_U` and `K_J` for a given expected OU maximum `m_u`.
pub fn deviation_bound(params: &ModelParams, eps_tail: f64, alphas: (f64, f64), m_u: f64) -> Result<DeviationBound> {
    if !(eps_tail > 0.0 && eps_tail < 1.0) {
        return Err(Error::invalid("eps_tail", "must lie in (0, 1)"));
    }
    let (a_plus, a_minus) = alphas;
    let law = params.jump_law();
    if !(a_plus > 0.0 && a_plus < law.eta_plus) {
        return Err(Error::invalid("alpha_plus", "must lie in (0, eta_plus)"));
    }
    if !(a_minus > 0.0 && a_minus < law.eta_minus) {
        return Err(Error::invalid("alpha_minus", "must lie in (0, eta_minus)"));
    }
    let t = params.t_gc;
    let sigma_sup = (params.sigma * params.sigma / (2.0 * params.kappa)
        * (1.0 - (-2.0 * params.kappa * t).exp()))
    .sqrt();
    let k_u = m_u + sigma_sup * (2.0 * (4.0 / eps_tail).ln()).sqrt();
    let log_tail = (eps_tail / 4.0).ln();
    let up = (law.compensated_cumulant(a_plus)? * t - log_tail) / a_plus;
    let down = (law.compensated_cumulant(-a_minus)? * t - log_tail) / a_minus;
    let k_j = 2.0 * up.max(down);
    Ok(DeviationBound { m_u, sigma_sup, k_u, k_j })
}

/// Inventory window implied by the price window and the impact coefficient.
pub fn inventory_bounds(y_min: f64, y_max: f64, beta: f64, gamma: f64, t_gc: f64, eps_pad: f64) -> (f64, f64) {
    let q_min = t_gc * ((y_min - beta) / gamma).min(0.0) - eps_pad;
    let q_max = t_gc * ((y_max + beta) / gamma).max(0.0) + eps_pad;
    (q_min, q_max)
}

/// Box on which the value function is approximated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    pub y_min: f64,
    pub y_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub psi_min: f64,
    pub psi_max: f64,
    pub m_max: f64,
}

impl DomainBounds {
    pub fn from_parts(params: &ModelParams, y_min: f64, y_max: f64, eps_pad: f64) -> Self {
        let (q_min, q_max) = inventory_bounds(y_min, y_max, params.beta, params.gamma, params.t_gc, eps_pad);
        Self {
            y_min,
            y_max,
            q_min,
            q_max,
            psi_min: q_min / params.t_gc,
            psi_max: q_max / params.t_gc,
            m_max: params.delivery,
        }
    }
}

/// Full bound computation for a market model.
pub fn compute_domain_bounds(model: &MarketModel, opts: &BoundsOptions) -> Result<(DomainBounds, DeviationBound)> {
    let p = &model.params;
    let m_u = estimate_m_u(p.kappa, p.sigma, p.t_gc, opts.mc_paths, opts.mc_steps, opts.seed).mean;
    let alphas = (
        opts.alpha_plus.unwrap_or(0.5 * p.eta_plus),
        opts.alpha_minus.unwrap_or(0.5 * p.eta_minus),
    );
    let dev = deviation_bound(p, opts.eps_tail, alphas, m_u)?;
    let (lo, hi) = model.price.range_on(0.0, p.t_gc);
    let k = dev.total();
    Ok((DomainBounds::from_parts(p, lo - k, hi + k, opts.eps_pad), dev))
}

// ───────────────────────────────── grid ─────────────────────────────────

/// Requested numbers of intervals per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Resolution {
    pub n_x: usize,
    pub n_y: usize,
    pub n_q: usize,
    pub n_m: usize,
    pub n_t: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Self { n_x: 50, n_y: 50, n_q: 200, n_m: 64, n_t: 300 }
    }
}

/// Uniform tensor grid. Every axis with `n` intervals has `n + 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub n_x: usize,
    pub n_y: usize,
    pub n_q: usize,
    pub n_m: usize,
    pub n_t: usize,
    pub dx: f64,
    pub dy: f64,
    pub dq: f64,
    pub dm: f64,
    pub dt: f64,
    pub horizon: f64,
    /// Time index of gate closure.
    pub idx_gc: usize,
    /// Time index of the start of delivery.
    pub idx_delivery: usize,
    pub bounds: DomainBounds,
}

const ALIGN_TOL: f64 = 1e-9;
const ALIGN_SEARCH: usize = 1_000_000;

/// Smallest `N >= requested` placing gate closure and delivery start on nodes
/// and satisfying `T/N <= 1/lambda`.
pub fn align_time_steps(params: &ModelParams, requested: usize) -> Result<usize> {
    if requested == 0 {
        return Err(Error::Alignment { requested, reason: "N_t must be positive".into() });
    }
    let t = params.horizon();
    let marks = [params.t_gc / t, params.delivery_start() / t];
    let min_cfl = if params.lambda > 0.0 { (params.lambda * t * (1.0 - 1e-12)).ceil() as usize } else { 1 };
    let start = requested.max(min_cfl);
    (start..start + ALIGN_SEARCH)
        .find(|&n| {
            marks.iter().all(|f| {
                let s = f * n as f64;
                (s - s.round()).abs() <= ALIGN_TOL * n as f64
            })
        })
        .ok_or_else(|| Error::Alignment {
            requested,
            reason: format!(
                "gate closure {} and delivery start {} share no node within {} steps of the request",
                params.t_gc,
                params.delivery_start(),
                ALIGN_SEARCH
            ),
        })
}

pub fn build_grid(params: &ModelParams, bounds: DomainBounds, res: Resolution) -> Result<Grid> {
    for (name, n) in [("n_x", res.n_x), ("n_y", res.n_y), ("n_q", res.n_q), ("n_m", res.n_m)] {
        if n < 3 {
            return Err(Error::invalid(name, "at least three intervals are required"));
        }
    }
    if !(bounds.y_max > bounds.y_min && bounds.q_max > bounds.q_min) {
        return Err(Error::invalid("bounds", "empty price or inventory window"));
    }
    let n_t = align_time_steps(params, res.n_t)?;
    let horizon = params.horizon();
    let dt = horizon / n_t as f64;
    let idx_gc = (params.t_gc / dt).round() as usize;
    let idx_delivery = (params.delivery_start() / dt).round() as usize;
    Ok(Grid {
        n_x: res.n_x,
        n_y: res.n_y,
        n_q: res.n_q,
        n_m: res.n_m,
        n_t,
        dx: 1.0 / res.n_x as f64,
        dy: (bounds.y_max - bounds.y_min) / res.n_y as f64,
        dq: (bounds.q_max - bounds.q_min) / res.n_q as f64,
        dm: bounds.m_max / res.n_m as f64,
        dt,
        horizon,
        idx_gc,
        idx_delivery,
        bounds,
    })
}

impl Grid {
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }
    pub fn y(&self, j: usize) -> f64 {
        self.bounds.y_min + j as f64 * self.dy
    }
    pub fn q(&self, k: usize) -> f64 {
        self.bounds.q_min + k as f64 * self.dq
    }
    pub fn m(&self, l: usize) -> f64 {
        l as f64 * self.dm
    }
    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
    pub fn xs(&self) -> Vec<f64> {
        (0..=self.n_x).map(|i| self.x(i)).collect()
    }
    pub fn ys(&self) -> Vec<f64> {
        (0..=self.n_y).map(|j| self.y(j)).collect()
    }
    pub fn qs(&self) -> Vec<f64> {
        (0..=self.n_q).map(|k| self.q(k)).collect()
    }
    /// Nodes per time level of the `(x, y, q)` value field.
    pub fn level_len(&self) -> usize {
        (self.n_x + 1) * (self.n_y + 1) * (self.n_q + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn inventory_bound_example() {
        let (lo, hi) = inventory_bounds(-50.0, 150.0, 100.0, 0.02, 22.9167, 1.0);
        assert_relative_eq!(hi, 286_459.75, epsilon = 1e-6);
        assert_relative_eq!(lo, 22.9167 * (-150.0 / 0.02) - 1.0, epsilon = 1e-6);
        let (lo, _) = inventory_bounds(200.0, 300.0, 100.0, 0.02, 10.0, 1.0);
        assert_relative_eq!(lo, -1.0);
    }

    #[test]
    fn default_day_aligns_to_multiple_of_288() {
        let p = ModelParams::default();
        assert_eq!(align_time_steps(&p, 300).unwrap(), 576);
        assert_eq!(align_time_steps(&p, 288).unwrap(), 288);
        let mut short = p.clone();
        short.t_gc = 12.0 - short.lead - short.delivery;
        assert_eq!(align_time_steps(&short, 100).unwrap() % 144, 0);
    }

    #[test]
    fn alignment_honours_jump_limit() {
        let mut p = ModelParams::default();
        p.lambda = 30.0;
        let n = align_time_steps(&p, 10).unwrap();
        assert!(p.horizon() / n as f64 <= 1.0 / p.lambda + 1e-12);
    }

    #[test]
    fn zero_volatility_has_zero_maximum() {
        let e = estimate_m_u(0.2, 0.0, 10.0, 100, 50, 1);
        assert_eq!(e.mean, 0.0);
        let stiff = estimate_m_u(1e3, 1.0, 10.0, 100, 40_000, 1);
        assert!(stiff.mean < 0.2, "{}", stiff.mean);
    }

    #[test]
    fn lambda_zero_jump_bound_reduces_to_log_term() {
        let mut p = ModelParams::default();
        p.lambda = 0.0;
        let d = deviation_bound(&p, 0.01, (p.eta_plus / 2.0, p.eta_minus / 2.0), 0.0).unwrap();
        let expect = -2.0 * (0.01f64 / 4.0).ln() / (p.eta_minus / 2.0);
        assert_relative_eq!(d.k_j, expect, max_relative = 1e-12);
    }

    #[test]
    fn bounds_are_monotone_in_tail_probability() {
        let p = ModelParams::default();
        let a = (p.eta_plus / 2.0, p.eta_minus / 2.0);
        let loose = deviation_bound(&p, 0.05, a, 10.0).unwrap().total();
        let tight = deviation_bound(&p, 0.001, a, 10.0).unwrap().total();
        assert!(tight > loose);
    }
}
