//! Market model: wind and price dynamics, forecast curves and the jump law.
//!
//! The normalised production `X` is a Jacobi-type diffusion reverting to a
//! forecast `p_X(t)`; the intraday price `Y` is an Ornstein–Uhlenbeck process
//! around the forecast `p_Y(t)` driven by a compensated compound Poisson
//! process with double-exponential jump sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar model parameters. Times are in hours, prices in EUR/MWh,
/// energies in MWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Wind volatility scale.
    pub alpha: f64,
    /// Floor of the time-dependent mean-reversion rate of the wind.
    pub theta0: f64,
    /// Price volatility.
    pub sigma: f64,
    /// Price mean-reversion rate.
    pub kappa: f64,
    /// Correlation between wind and price Brownian motions.
    pub rho: f64,
    /// Jump intensity per hour.
    pub lambda: f64,
    /// Probability of an upward jump.
    pub p_plus: f64,
    /// Rate of upward jump sizes (mean size `1/eta_plus`).
    pub eta_plus: f64,
    /// Rate of downward jump sizes (mean size `1/eta_minus`).
    pub eta_minus: f64,
    /// Temporary impact coefficient.
    pub gamma: f64,
    /// Imbalance penalty slope.
    pub beta: f64,
    /// Installed capacity in MW.
    pub p_max: f64,
    /// Gate closure time.
    pub t_gc: f64,
    /// Lead time between gate closure and the start of delivery.
    pub lead: f64,
    /// Length of the delivery window.
    pub delivery: f64,
    /// Production forecasts are clamped into `[eps_truncation, 1 - eps_truncation]`.
    pub eps_truncation: f64,
    /// Width of the boundary layer of the regularised wind volatility; the
    /// solvers use the exact volatility when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_regularization: Option<f64>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            alpha: 0.012,
            theta0: 0.0933,
            sigma: 4.70,
            kappa: 0.2083,
            rho: -0.3,
            lambda: 0.4167,
            p_plus: 0.65,
            eta_plus: 1.0 / 15.0,
            eta_minus: 1.0 / 30.0,
            gamma: 0.02,
            beta: 100.0,
            p_max: 100.0,
            t_gc: 22.0 + 11.0 / 12.0,
            lead: 1.0 / 12.0,
            delivery: 1.0,
            eps_truncation: 0.01,
            eps_regularization: None,
        }
    }
}

impl ModelParams {
    /// End of the delivery window.
    pub fn horizon(&self) -> f64 {
        self.t_gc + self.lead + self.delivery
    }

    pub fn delivery_start(&self) -> f64 {
        self.t_gc + self.lead
    }

    pub fn jump_law(&self) -> JumpLaw {
        JumpLaw {
            lambda: self.lambda,
            p_plus: self.p_plus,
            eta_plus: self.eta_plus,
            eta_minus: self.eta_minus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, name: &'static str, reason: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(name, reason))
            }
        }
        let all = [
            self.alpha,
            self.theta0,
            self.sigma,
            self.kappa,
            self.rho,
            self.lambda,
            self.p_plus,
            self.eta_plus,
            self.eta_minus,
            self.gamma,
            self.beta,
            self.p_max,
            self.t_gc,
            self.lead,
            self.delivery,
            self.eps_truncation,
            self.eps_regularization.unwrap_or(0.25),
        ];
        check(all.iter().all(|v| v.is_finite()), "params", "all parameters must be finite")?;
        check(self.alpha >= 0.0, "alpha", "must be >= 0")?;
        check(self.theta0 > 0.0, "theta0", "must be > 0")?;
        check(self.sigma >= 0.0, "sigma", "must be >= 0")?;
        check(self.kappa > 0.0, "kappa", "must be > 0")?;
        check((-1.0..=1.0).contains(&self.rho), "rho", "must lie in [-1, 1]")?;
        check(self.lambda >= 0.0, "lambda", "must be >= 0")?;
        check((0.0..=1.0).contains(&self.p_plus), "p_plus", "must lie in [0, 1]")?;
        check(self.eta_plus > 0.0, "eta_plus", "must be > 0")?;
        check(self.eta_minus > 0.0, "eta_minus", "must be > 0")?;
        check(self.gamma > 0.0, "gamma", "must be > 0")?;
        check(self.beta >= 0.0, "beta", "must be >= 0")?;
        check(self.p_max > 0.0, "p_max", "must be > 0")?;
        check(self.t_gc > 0.0, "t_gc", "must be > 0")?;
        check(self.lead >= 0.0, "lead", "must be >= 0")?;
        check(self.delivery > 0.0, "delivery", "must be > 0")?;
        check(
            self.eps_truncation > 0.0 && self.eps_truncation < 0.5,
            "eps_truncation",
            "must lie in (0, 0.5)",
        )?;
        let eps = self.eps_regularization.unwrap_or(0.25);
        check(eps > 0.0 && eps < 0.5, "eps_regularization", "must lie in (0, 0.5)")
    }
}

// ───────────────────────────── jump law ─────────────────────────────

/// Double-exponential jump-size law together with the jump intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpLaw {
    pub lambda: f64,
    pub p_plus: f64,
    pub eta_plus: f64,
    pub eta_minus: f64,
}

impl JumpLaw {
    pub fn p_minus(&self) -> f64 {
        1.0 - self.p_plus
    }

    pub fn density(&self, z: f64) -> f64 {
        if z >= 0.0 {
            self.p_plus * self.eta_plus * (-self.eta_plus * z).exp()
        } else {
            self.p_minus() * self.eta_minus * (self.eta_minus * z).exp()
        }
    }

    pub fn mean(&self) -> f64 {
        self.p_plus / self.eta_plus - self.p_minus() / self.eta_minus
    }

    pub fn second_moment(&self) -> f64 {
        2.0 * self.p_plus / (self.eta_plus * self.eta_plus)
            + 2.0 * self.p_minus() / (self.eta_minus * self.eta_minus)
    }

    /// Moment generating function `E[e^{aZ}]`, finite for `-eta_minus < a < eta_plus`.
    pub fn mgf(&self, a: f64) -> Result<f64> {
        if !(a < self.eta_plus && a > -self.eta_minus) {
            return Err(Error::Domain { what: "mgf argument", value: a });
        }
        Ok(self.p_plus * self.eta_plus / (self.eta_plus - a)
            + self.p_minus() * self.eta_minus / (self.eta_minus + a))
    }

    /// Cumulant of the compensated jump part per unit time.
    pub fn compensated_cumulant(&self, a: f64) -> Result<f64> {
        Ok(self.lambda * (self.mgf(a)? - 1.0 - a * self.mean()))
    }

    /// Inverse-transform sample from two independent uniforms in (0, 1].
    pub fn sample(&self, u_sign: f64, u_size: f64) -> f64 {
        let e = -u_size.max(f64::MIN_POSITIVE).ln();
        if u_sign < self.p_plus {
            e / self.eta_plus
        } else {
            -e / self.eta_minus
        }
    }
}

// ─────────────────────────── forecast curves ───────────────────────────

/// How the time derivative of a piecewise-linear forecast is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeRule {
    /// Slope of the linear piece containing `t`.
    #[default]
    Interval,
    /// Centred knot differences (one-sided at the ends), held constant on
    /// `[t_i, t_{i+1})`.
    Centered,
}

/// Piecewise-linear curve on strictly increasing knots.
///
/// Evaluation outside the knot range holds the boundary value.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastCurve {
    times: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
    rule: DerivativeRule,
}

impl ForecastCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>, rule: DerivativeRule) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Knots(format!(
                "{} knot times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.len() < 2 {
            return Err(Error::Knots("at least two knots are required".into()));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Knots(format!(
                "knot times not strictly increasing at index {}",
                i + 1
            )));
        }
        if let Some(i) = times.iter().chain(&values).position(|v| !v.is_finite()) {
            return Err(Error::Knots(format!("non-finite entry at position {i}")));
        }
        let slopes = knot_slopes(&times, &values, rule);
        Ok(Self { times, values, slopes, rule })
    }

    /// Curve sampled on a uniform cadence starting at `t0`.
    pub fn uniform(t0: f64, step: f64, values: Vec<f64>, rule: DerivativeRule) -> Result<Self> {
        let times = (0..values.len()).map(|i| t0 + step * i as f64).collect();
        Self::new(times, values, rule)
    }

    /// Constant curve on `[t0, t1]`.
    pub fn constant(t0: f64, t1: f64, value: f64) -> Result<Self> {
        Self::new(vec![t0, t1], vec![value, value], DerivativeRule::Interval)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rule(&self) -> DerivativeRule {
        self.rule
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn interval(&self, t: f64) -> usize {
        let n = self.times.len();
        let idx = self.times.partition_point(|&s| s <= t);
        idx.clamp(1, n - 1) - 1
    }

    pub fn value(&self, t: f64) -> f64 {
        if t <= self.times[0] {
            return self.values[0];
        }
        let n = self.times.len();
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let i = self.interval(t);
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.values[i] + w * (self.values[i + 1] - self.values[i])
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.slopes[self.interval(t)]
    }

    /// Copy with every knot value clamped into `[eps, 1 - eps]`.
    pub fn truncated(&self, eps: f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|v| v.clamp(eps, 1.0 - eps)).collect();
        let slopes = knot_slopes(&self.times, &values, self.rule);
        Self { times: self.times.clone(), values, slopes, rule: self.rule }
    }

    /// Copy extended by a flat knot at `t_end` if the curve stops short of it.
    pub fn extended_to(&self, t_end: f64) -> Self {
        if t_end <= self.end() {
            return self.clone();
        }
        let mut times = self.times.clone();
        let mut values = self.values.clone();
        times.push(t_end);
        values.push(*values.last().unwrap());
        let slopes = knot_slopes(&times, &values, self.rule);
        Self { times, values, slopes, rule: self.rule }
    }

    /// Minimum and maximum of the curve over `[t0, t1]` (attained at knots or ends).
    pub fn range_on(&self, t0: f64, t1: f64) -> (f64, f64) {
        let mut lo = self.value(t0).min(self.value(t1));
        let mut hi = self.value(t0).max(self.value(t1));
        for (&t, &v) in self.times.iter().zip(&self.values) {
            if t > t0 && t < t1 {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }
}

/// Slope held on each interval `[t_i, t_{i+1})`; one entry per interval.
fn knot_slopes(times: &[f64], values: &[f64], rule: DerivativeRule) -> Vec<f64> {
    let n = times.len();
    let forward: Vec<f64> = (0..n - 1)
        .map(|i| (values[i + 1] - values[i]) / (times[i + 1] - times[i]))
        .collect();
    match rule {
        DerivativeRule::Interval => forward,
        DerivativeRule::Centered => (0..n - 1)
            .map(|i| {
                if i == 0 {
                    forward[0]
                } else {
                    (values[i + 1] - values[i - 1]) / (times[i + 1] - times[i - 1])
                }
            })
            .collect(),
    }
}

// ─────────────────────────── coefficient oracle ───────────────────────────

/// Which wind volatility the PDE solvers use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Exact,
    /// Linear ramps to zero on `[0, eps)` and `(1 - eps, 1]`.
    Regularized(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub mu_x: f64,
    pub sigma_x: f64,
    pub mu_y: f64,
}

/// Parameters together with the production and price forecasts.
///
/// The production forecast is stored already truncated.
#[derive(Debug, Clone)]
pub struct MarketModel {
    pub params: ModelParams,
    pub production: ForecastCurve,
    pub price: ForecastCurve,
    /// When false the jump compensator is dropped from the price drift.
    pub compensate_jumps: bool,
}

impl MarketModel {
    pub fn new(params: ModelParams, production: &ForecastCurve, price: ForecastCurve) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            production: production.truncated(params.eps_truncation),
            price,
            params,
            compensate_jumps: true,
        })
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        match self.params.eps_regularization {
            Some(eps) => SigmaMode::Regularized(eps),
            None => SigmaMode::Exact,
        }
    }

    /// Time-dependent wind mean-reversion rate.
    pub fn theta(&self, t: f64) -> f64 {
        self.theta_with_slope(t, self.production.derivative(t))
    }

    fn theta_with_slope(&self, t: f64, dp: f64) -> f64 {
        let p = self.production.value(t);
        self.params.theta0.max(dp.abs() / p.min(1.0 - p))
    }

    pub fn mu_x(&self, t: f64, x: f64) -> f64 {
        let dp = self.production.derivative(t);
        dp - self.theta_with_slope(t, dp) * (x - self.production.value(t))
    }

    /// Wind and price drifts for a step `[t, t + dt]`, with forecast slopes
    /// read at the step midpoint so that knot-aligned steps never straddle
    /// two linear pieces.
    pub fn step_drifts(&self, t: f64, dt: f64, x: f64, y: f64) -> (f64, f64) {
        let mid = t + 0.5 * dt;
        let dp = self.production.derivative(mid);
        let mu_x = dp - self.theta_with_slope(t, dp) * (x - self.production.value(t));
        let mu_y = self.price.derivative(mid) - self.params.kappa * (y - self.price.value(t)) + self.jump_drift();
        (mu_x, mu_y)
    }

    pub fn sigma_x(&self, x: f64) -> f64 {
        (2.0 * self.params.alpha * self.params.theta0 * x * (1.0 - x)).max(0.0).sqrt()
    }

    pub fn sigma_x_mode(&self, x: f64, mode: SigmaMode) -> f64 {
        match mode {
            SigmaMode::Exact => self.sigma_x(x),
            SigmaMode::Regularized(eps) => regularized_sigma(|s| self.sigma_x(s), x, eps),
        }
    }

    pub fn jump_drift(&self) -> f64 {
        if self.compensate_jumps {
            -self.params.lambda * self.params.jump_law().mean()
        } else {
            0.0
        }
    }

    pub fn mu_y(&self, t: f64, y: f64) -> f64 {
        let p = self.price.value(t);
        self.price.derivative(t) - self.params.kappa * (y - p) + self.jump_drift()
    }

    pub fn coefficients(&self, t: f64, x: f64, y: f64) -> Result<Coefficients> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain { what: "x", value: x });
        }
        Ok(Coefficients { mu_x: self.mu_x(t, x), sigma_x: self.sigma_x(x), mu_y: self.mu_y(t, y) })
    }
}

/// Boundary-layer regularisation of a volatility vanishing at 0 and 1.
pub fn regularized_sigma(sigma: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    if eps <= 0.0 {
        return sigma(x);
    }
    if x < eps {
        sigma(eps) / eps * x.max(0.0)
    } else if x > 1.0 - eps {
        sigma(1.0 - eps) / eps * (1.0 - x).max(0.0)
    } else {
        sigma(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn table_jump_moments() {
        let law = ModelParams::default().jump_law();
        assert_relative_eq!(law.mean(), -0.75, epsilon = 1e-12);
        assert_relative_eq!(law.second_moment(), 922.5, epsilon = 1e-9);
    }

    #[test]
    fn jump_moments_match_quadrature() {
        let law = ModelParams::default().jump_law();
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        let h = 0.01;
        let mut z = -3000.0 + 0.5 * h;
        while z < 3000.0 {
            let f = law.density(z) * h;
            m0 += f;
            m1 += z * f;
            m2 += z * z * f;
            z += h;
        }
        assert_relative_eq!(m0, 1.0, epsilon = 1e-6);
        assert_relative_eq!(m1, law.mean(), epsilon = 1e-4);
        assert_relative_eq!(m2, law.second_moment(), max_relative = 1e-6);
    }

    #[test]
    fn mgf_domain() {
        let law = ModelParams::default().jump_law();
        assert!(law.mgf(law.eta_plus).is_err());
        assert!(law.mgf(-law.eta_minus).is_err());
        assert_relative_eq!(law.mgf(0.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(law.compensated_cumulant(0.0).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn curve_rejects_bad_knots() {
        assert!(ForecastCurve::new(vec![0.0, 0.0], vec![1.0, 2.0], DerivativeRule::Interval).is_err());
        assert!(ForecastCurve::new(vec![0.0], vec![1.0], DerivativeRule::Interval).is_err());
    }

    #[test]
    fn interval_derivative_is_exact_slope() {
        let c = ForecastCurve::new(vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 3.0], DerivativeRule::Interval).unwrap();
        assert_relative_eq!(c.value(0.5), 1.0);
        assert_relative_eq!(c.derivative(0.5), 2.0);
        assert_relative_eq!(c.derivative(1.0), 0.5);
        assert_relative_eq!(c.derivative(3.0), 0.5);
        let d = ForecastCurve::new(vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 3.0], DerivativeRule::Centered).unwrap();
        assert_relative_eq!(d.derivative(1.5), 1.0);
    }

    #[test]
    fn mean_reversion_condition_holds() {
        let times: Vec<f64> = (0..=96).map(|i| i as f64 * 0.25).collect();
        let values: Vec<f64> = times.iter().map(|t| 0.5 + 0.6 * (t * 0.7).sin()).collect();
        let curve = ForecastCurve::new(times, values, DerivativeRule::Interval).unwrap();
        let model = MarketModel::new(ModelParams::default(), &curve, ForecastCurve::constant(0.0, 24.0, 50.0).unwrap()).unwrap();
        let mut t = 0.0;
        while t <= 24.0 {
            let p = model.production.value(t);
            assert!((0.01..=0.99).contains(&p));
            assert!(model.production.derivative(t).abs() <= model.theta(t) * p.min(1.0 - p) + 1e-12);
            t += 0.01;
        }
    }

    #[test]
    fn regularized_sigma_is_continuous() {
        let m = ModelParams::default();
        let s = |x: f64| (2.0 * m.alpha * m.theta0 * x * (1.0 - x)).sqrt();
        let eps = 0.05;
        assert_relative_eq!(regularized_sigma(s, eps - 1e-12, eps), s(eps), max_relative = 1e-9);
        assert_relative_eq!(regularized_sigma(s, 1.0 - eps + 1e-12, eps), s(1.0 - eps), max_relative = 1e-9);
        assert_eq!(regularized_sigma(s, 0.0, eps), 0.0);
        assert_eq!(regularized_sigma(s, 0.5, eps), s(0.5));
    }

    #[test]
    fn coefficients_reject_out_of_range_x() {
        let c = ForecastCurve::constant(0.0, 24.0, 0.4).unwrap();
        let model = MarketModel::new(ModelParams::default(), &c, ForecastCurve::constant(0.0, 24.0, 50.0).unwrap()).unwrap();
        assert!(model.coefficients(1.0, 1.2, 0.0).is_err());
        let co = model.coefficients(1.0, 0.4, 50.0).unwrap();
        assert_relative_eq!(co.mu_x, 0.0, epsilon = 1e-14);
        assert_relative_eq!(co.mu_y, 0.4167 * 0.75, epsilon = 1e-12);
    }
}
