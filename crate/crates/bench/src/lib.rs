//! Fixtures shared by the kernel benchmarks.

use windtrade_core::experiment::synthetic_day;
use windtrade_core::fd::{SevenPointSystem, Tridiagonal};
use windtrade_core::hjb::{JumpKernel, QStepSpec, XyCoefficients};
use windtrade_core::{build_grid, DomainBounds, Field3, Grid, MarketModel, ModelParams, PicardOptions, Resolution, SigmaMode};

/// Diagonally dominant tridiagonal system of size `n` with a smooth right-hand side.
pub fn tridiagonal(n: usize) -> (Tridiagonal, Vec<f64>) {
    let lower = vec![-0.4; n];
    let upper = vec![-0.5; n];
    let diag = vec![2.0; n];
    let rhs = (0..n).map(|i| (i as f64 * 0.01).sin()).collect();
    (Tridiagonal::new(lower, diag, upper).expect("valid bands"), rhs)
}

/// Model, grid and terminal level for a Stage III step at the given resolution.
pub struct StepFixture {
    pub model: MarketModel,
    pub grid: Grid,
    pub terminal: Field3,
}

impl StepFixture {
    pub fn new(n_x: usize, n_y: usize, n_q: usize) -> Self {
        let day = synthetic_day(7, 0);
        let params = day.params(&ModelParams::default(), true);
        let model = day.model(params).expect("synthetic day is valid");
        let bounds = DomainBounds::from_parts(&model.params, 0.0, 120.0, 1.0);
        let grid = build_grid(&model.params, bounds, Resolution { n_x, n_y, n_q, n_m: 16, n_t: 300 }).expect("grid");
        let terminal = Field3::from_fn(n_x + 1, n_y + 1, n_q + 1, |i, _, k| {
            let d = grid.q(k) - 100.0 * grid.x(i);
            0.5 * model.params.beta * d.abs()
        });
        Self { model, grid, terminal }
    }

    pub fn xy_system(&self) -> SevenPointSystem {
        let c = XyCoefficients::from_model(&self.model, &self.grid, 1.0, SigmaMode::Exact);
        c.assemble(self.grid.dx, self.grid.dy, self.grid.dt)
    }

    pub fn q_spec(&self) -> QStepSpec {
        QStepSpec {
            ys: self.grid.ys(),
            gamma: self.model.params.gamma,
            psi_min: self.grid.bounds.psi_min,
            psi_max: self.grid.bounds.psi_max,
            dq: self.grid.dq,
            dtau: self.grid.dt,
            picard: PicardOptions::default(),
        }
    }

    pub fn jump_kernel(&self) -> JumpKernel {
        JumpKernel::new(&self.model.params.jump_law(), self.grid.dy)
    }
}
