//! Stochastic simulation of spontaneous parametric down-conversion in
//! transversely and longitudinally modulated χ⁽²⁾ crystals, with reverse-mode
//! gradients for learning the crystal modulation and the pump profile.
//!
//! Pipeline: [`grid`] samples vacuum fields, [`medium`] builds the pump and the
//! clipped hologram, [`propagator`] runs the split-step evolution, [`correlations`]
//! turns output mode coefficients into the pair matrix `P`, and [`optimizer`]
//! fits `P` to a target using gradients from [`adjoint`].

pub mod adjoint;
pub mod correlations;
pub mod error;
pub mod grid;
pub mod matrix;
pub mod medium;
pub mod model;
pub mod modes;
pub mod optimizer;
pub mod propagator;

pub use error::{Result, SimError};
pub use grid::{ComplexField, GridSpec, VacuumBatch};
pub use matrix::{CMatrix, Matrix, RMatrix};
pub use model::Model;
pub use modes::{ModeBasis, ModeFamily, ModeIndex};
