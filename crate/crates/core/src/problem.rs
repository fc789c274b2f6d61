use serde::Serialize;

use crate::aggregator::DriverSpec;
use crate::sde::{ControlSet, ControlledSDE};

/// The full control problem: state dynamics, driver with terminal map, and
/// the compact control set (carried by the SDE).
#[derive(Clone, Debug)]
pub struct ControlProblem {
    pub name: String,
    pub sde: ControlledSDE,
    pub spec: DriverSpec,
}

impl ControlProblem {
    pub fn new(name: impl Into<String>, sde: ControlledSDE, spec: DriverSpec) -> Self {
        Self { name: name.into(), sde, spec }
    }

    pub fn horizon(&self) -> f64 {
        self.sde.horizon
    }

    pub fn controls(&self) -> &ControlSet {
        &self.sde.controls
    }
}

/// Monte Carlo settings shared by the probabilistic checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McConfig {
    pub n_paths: usize,
    /// Euler steps per unit of time; at least one step per interval.
    pub steps_per_unit: f64,
    pub seed: u64,
    pub regression: crate::regression::RegressionConfig,
    /// Tolerance multiplier on standard errors.
    pub tol_factor: f64,
    /// Largest number of control sequences a brute-force search may enumerate.
    pub budget: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            steps_per_unit: 200.0,
            seed: 0,
            regression: Default::default(),
            tol_factor: 5.0,
            budget: 4096,
        }
    }
}

impl McConfig {
    pub fn steps_for(&self, span: f64) -> usize {
        ((span * self.steps_per_unit).round() as usize).max(1)
    }
}
