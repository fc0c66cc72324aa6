//! Design-based estimation for multi-armed and factorial randomized experiments.
//!
//! Treatment levels are indexed `0..Q` internally; CSV files use `1..Q`.
//! Covariate-by-level vectors such as `γ` and `x̂` are stacked level-major:
//! entry `q * J + j` belongs to level `q`, covariate `j`.

pub mod design;
pub mod error;
pub mod estimators;
pub mod factorial;
pub mod harness;
pub mod linalg;
pub mod lsq;
pub mod oracle;
pub mod rng;
pub mod special;

pub use design::{Assignment, BalanceFilter, TreatmentStructure};
pub use error::{Error, Result};
pub use estimators::{ContrastMatrix, EstimationResult, ExperimentData, SpecKind};
pub use factorial::{EffectSet, FactorCoding};
pub use lsq::{ColumnLabel, DesignMatrix, FitResult, Restriction, RestrictionKind};
pub use oracle::PotentialTable;

pub use nalgebra::{DMatrix, DVector};
