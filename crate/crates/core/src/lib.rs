//! Hypernetwork meta-learning for families of related forecasting tasks.
//!
//! A base network `f(x; β)` produces predictions; a meta module
//! `g(θ; ω)` maps a low-dimensional per-task mesa vector `θ` to the base
//! parameters `β`. Meta parameters `ω` and every task's `θ` are trained
//! jointly in one single-level problem, and a new task is fitted by
//! optimizing `θ` alone with `ω` frozen.
//!
//! The crate also contains the closed-form linear special case
//! ([`linear`]), the quintile-forecasting data pipeline ([`quintile`]),
//! the portfolio rank-game machinery ([`portfolio`]) and the experiment
//! drivers ([`benchmarks`]).

pub mod autodiff;
pub mod benchmarks;
pub mod error;
pub mod linear;
pub mod losses;
pub mod mtms;
pub mod nn;
pub mod optimize;
pub mod portfolio;
pub mod quintile;
pub mod rng;

pub use error::{Error, Result};
