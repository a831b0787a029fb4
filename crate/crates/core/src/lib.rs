//! Transductive few-shot classification of feature vectors.
//!
//! Each class is modelled by a centroid and a sparse precision matrix fitted
//! with the Graphical Lasso on its support shots. Query samples are assigned by
//! minimising a Mahalanobis data term plus a class-proportion penalty, either
//! per task or over a sliding window that scans a slide grid.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod io;
pub mod objective;
pub mod ppm;
pub mod precision;
pub mod solver;
pub mod stain;
pub mod synth;
pub mod types;
pub mod windowing;

pub use error::{Error, Result};
pub use nalgebra;
pub use types::{
    argmax, on_simplex, AssignmentMatrix, ClassModel, FeatureMatrix, FewShotTask, Proportions,
    ValidationReport, Violation, CLASS_NAMES, SIMPLEX_TOL,
};
