//! Optimal intraday trading of wind power: model, bounds, finite-difference
//! kernels, the three backward stages, simulation and policy evaluation.

pub mod bounds;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fd;
pub mod hjb;
pub mod kbe;
pub mod market;
pub mod policy;
pub mod rng;
pub mod simulate;
pub mod snapshot;

pub use error::{Error, ErrorClass, Result};
pub use bounds::{build_grid, compute_domain_bounds, BoundsOptions, DomainBounds, Grid, Resolution};
pub use config::RunConfig;
pub use hjb::{solve_stage3, Field3, PicardOptions, Stage3Options, ValueStack};
pub use market::{DerivativeRule, ForecastCurve, MarketModel, ModelParams, SigmaMode};
pub use policy::{PnlRecord, Policy};
pub use simulate::{MarketPath, PathSpec};
