//! Lent-particle Malliavin calculus for Poisson-driven SDEs.

pub mod bottom_structure;
pub mod density_criteria;
pub mod error;
pub mod expr;
pub mod lent_particle;
pub mod poisson_measure;
pub mod quadrature;
pub mod rng;
pub mod scenarios;
pub mod sde;
pub mod stats;

pub use bottom_structure::BottomStructure;
pub use density_criteria::{RankReport, RankTable};
pub use error::{Error, Result};
pub use lent_particle::{FormulaTag, GammaMatrix};
pub use poisson_measure::{Atom, JumpConfiguration, LevyMeasure, Mark, TruncatedLevyModel};
pub use sde::{Coefficients, InverseMethod, State, Trajectory};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
