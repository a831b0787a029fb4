//! Exact evaluation of the transductive objective `f(U, W) + g(U) + λ·h(U)`.
//!
//! * `f` — Gaussian data fidelity over support and query samples,
//! * `g` — entropic barrier `Σ u ln u` over query rows,
//! * `h` — entropy of the query class proportions π.
//!
//! `0·ln 0` is taken as 0 everywhere; no flooring happens here.

use crate::error::{Error, Result};
use crate::types::{AssignmentMatrix, ClassModel, FeatureMatrix, FewShotTask, Proportions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveBreakdown {
    pub f_value: f64,
    pub g_value: f64,
    pub h_value: f64,
    pub lambda: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    pub fn new(f_value: f64, g_value: f64, h_value: f64, lambda: f64) -> Self {
        Self {
            f_value,
            g_value,
            h_value,
            lambda,
            total: f_value + g_value + lambda * h_value,
        }
    }
}

pub(crate) fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn check_shapes(
    u: &AssignmentMatrix,
    centroids: &[Vec<f64>],
    models: &[ClassModel],
    features: &FeatureMatrix,
    task: &FewShotTask,
) -> Result<()> {
    let k = u.n_classes();
    if centroids.len() != k || models.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{k} classes in U, {} centroids, {} models",
            centroids.len(),
            models.len()
        )));
    }
    if u.n_rows() != task.n_total() || u.n_support() != task.n_support() {
        return Err(Error::DimensionMismatch(
            "assignment matrix does not match the task".into(),
        ));
    }
    let d = features.dim();
    if centroids.iter().any(|w| w.len() != d) || models.iter().any(|m| m.dim() != d) {
        return Err(Error::DimensionMismatch(format!(
            "class parameters do not match feature dimension {d}"
        )));
    }
    Ok(())
}

/// `½ Σ_k Σ_n u_nk (w_k − z_n)ᵀ Ŝ_k (w_k − z_n) − ½ Σ_k Σ_n u_nk ln det Ŝ_k`
/// over every support and query sample of the task.
pub fn data_fidelity(
    u: &AssignmentMatrix,
    centroids: &[Vec<f64>],
    models: &[ClassModel],
    features: &FeatureMatrix,
    task: &FewShotTask,
) -> Result<f64> {
    check_shapes(u, centroids, models, features, task)?;
    let mut total = 0.0;
    for (n, row) in u.rows().enumerate() {
        let z = features.row(task.sample_index(n));
        for (k, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let maha = models[k].mahalanobis_sq(&centroids[k], z);
            total += 0.5 * w * (maha - models[k].log_det);
        }
    }
    Ok(total)
}

/// `Σ_{n∈ℚ} Σ_k u_nk ln u_nk`; never positive.
pub fn entropic_barrier(u: &AssignmentMatrix) -> f64 {
    u.query_rows().flat_map(|r| r.iter()).map(|&v| xlnx(v)).sum()
}

/// Query-mean proportions and their entropy `h = −Σ π_k ln π_k`.
pub fn partition_entropy(u: &AssignmentMatrix) -> (f64, Proportions) {
    let pi = query_proportions(u);
    let h = -pi.iter().map(|&p| xlnx(p)).sum::<f64>();
    (h.max(0.0), Proportions::from_raw(pi))
}

pub(crate) fn query_proportions(u: &AssignmentMatrix) -> Vec<f64> {
    let k = u.n_classes();
    let mut pi = vec![0.0; k];
    for row in u.query_rows() {
        for (p, v) in pi.iter_mut().zip(row) {
            *p += v;
        }
    }
    let q = u.n_query().max(1) as f64;
    for p in &mut pi {
        *p /= q;
    }
    pi
}

pub fn total_objective(
    u: &AssignmentMatrix,
    centroids: &[Vec<f64>],
    models: &[ClassModel],
    features: &FeatureMatrix,
    task: &FewShotTask,
    lambda: f64,
) -> Result<ObjectiveBreakdown> {
    let f = data_fidelity(u, centroids, models, features, task)?;
    let g = entropic_barrier(u);
    let (h, _) = partition_entropy(u);
    Ok(ObjectiveBreakdown::new(f, g, h, lambda))
}
