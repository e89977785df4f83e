//! Equilibrium engine for a three-party sponsored mobile data market.
//!
//! Mobile users (MUs) choose among content/service providers (CSPs) or opt
//! out; CSPs choose how much of the subscription price to sponsor and how much
//! delivery bandwidth to buy; the network operator (MNO) sets both prices.
//!
//! * [`market_model`]: parameters, strategies and payoff formulas.
//! * [`replicator`]: user dynamics (replicator ODE, pairwise imitation),
//!   potential function, equilibrium residuals.
//! * [`delay_stability`]: delayed dynamics, linearization and stability
//!   certificates.
//! * [`ne_search`]: projected-gradient search for the provider Nash
//!   equilibrium and its quasi-variational residual.
//! * [`se_search`]: Stackelberg layer (follower-anticipating best responses,
//!   relaxed MPEC solves, diagonalization, KKT and second-order checks).
//!
//! Model and dynamics code is generic over [`Scalar`] (`f32`, `f64`).
//! Spectral computations and the Stackelberg layer run in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod delay_stability;
pub mod error;
pub mod geometry;
pub mod market_model;
pub mod ne_search;
pub mod replicator;
pub mod scalar;
pub mod se_search;

pub use error::{MarketError, Result};
pub use scalar::Scalar;

pub type CspParamsF64 = market_model::CspParams<f64>;
pub type MarketParamsF64 = market_model::MarketParams<f64>;
pub type ProviderStrategyF64 = market_model::ProviderStrategy<f64>;
pub type PopulationStateF64 = market_model::PopulationState<f64>;
pub type TrajectoryF64 = replicator::Trajectory<f64>;
pub type OdeConfigF64 = replicator::OdeConfig<f64>;
pub type AgentConfigF64 = replicator::AgentConfig<f64>;
pub type FollowerConfigF64 = replicator::FollowerConfig<f64>;
pub type NeSolverConfigF64 = ne_search::NeSolverConfig<f64>;
pub type EquilibriumReportF64 = ne_search::EquilibriumReport<f64>;
pub type JointStrategyF64 = ne_search::JointStrategy<f64>;
pub type DelaySpecF64 = delay_stability::DelaySpec<f64>;
pub type InitialHistoryF64 = delay_stability::InitialHistory<f64>;

pub type MarketParamsF32 = market_model::MarketParams<f32>;
pub type ProviderStrategyF32 = market_model::ProviderStrategy<f32>;
pub type PopulationStateF32 = market_model::PopulationState<f32>;
pub type TrajectoryF32 = replicator::Trajectory<f32>;
pub type NeSolverConfigF32 = ne_search::NeSolverConfig<f32>;
pub type DelaySpecF32 = delay_stability::DelaySpec<f32>;
