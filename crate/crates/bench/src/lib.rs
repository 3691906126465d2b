//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use lent_core::poisson_measure::{simulate_configuration, PowerLaw, RadialPowerLaw};
use lent_core::{JumpConfiguration, Result, TruncatedLevyModel};

/// Symmetric 1-d power law truncated to about `jumps` atoms on `[0, 1]`.
pub fn line_model(jumps: f64) -> Result<TruncatedLevyModel> {
    let m = PowerLaw::symmetric(0.5, 1.0, 0.9)?;
    let eps = m.epsilon_for_mass(jumps)?;
    TruncatedLevyModel::new(Arc::new(m), eps)
}

/// Isotropic planar power law truncated to about `jumps` atoms on `[0, 1]`.
pub fn planar_model(jumps: f64) -> Result<TruncatedLevyModel> {
    let m = RadialPowerLaw::isotropic(2, 0.5, 1.0, 0.9)?;
    let eps = m.epsilon_for_mass(jumps)?;
    TruncatedLevyModel::new(Arc::new(m), eps)
}

pub fn path(model: &TruncatedLevyModel, seed: u64) -> Result<JumpConfiguration> {
    simulate_configuration(model, 1.0, seed)
}
