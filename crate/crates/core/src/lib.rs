//! Numerical toolkit for stochastic recursive control problems whose BSDE
//! driver is monotone but not Lipschitz in the utility variable.
//!
//! The pieces, bottom up:
//! - [`sde`]: seeded Euler-Maruyama simulation of the controlled state.
//! - [`aggregator`]: drivers, condition audits, mollification and truncation,
//!   and the Epstein-Zin aggregator.
//! - [`bsde`]: least-squares Monte Carlo BSDE solver with an implicit
//!   `y`-step, the backward semigroup and a comparison harness.
//! - [`hjb`]: explicit monotone finite differences for the HJB equation.
//! - [`dpp`]: dynamic-programming checks tying the two routes together.
//! - [`ez`]: the two-asset Epstein-Zin consumption/investment scenario.

pub mod aggregator;
pub mod bsde;
pub mod dpp;
pub mod error;
pub mod ez;
pub mod hjb;
pub mod output;
pub mod problem;
pub mod quadrature;
pub mod regression;
pub mod rng;
pub mod sde;

pub use error::Error;
