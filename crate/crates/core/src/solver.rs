//! Alternating minimization of the transductive objective (PADDLE-Cov).
//!
//! Each iteration performs, in order:
//!
//! 1. assignment step: every query row becomes the softmax of
//!    `−½ (w_k − z)ᵀ Ŝ_k (w_k − z) + ½ ln det Ŝ_k + (λ/|ℚ|) ln π_k`;
//! 2. centroid step: `w_k` becomes the `u_·k`-weighted mean of all samples;
//! 3. proportion step: `π` becomes the mean of the query rows.
//!
//! The assignment step is an exact minimizer of a majorizer of the objective
//! (the concave `h` is linearized at the current π) and the centroid step is an
//! exact minimizer over `W`, so the total objective never increases.

use crate::error::{Error, Result};
use crate::objective::{query_proportions, total_objective, ObjectiveBreakdown};
use crate::types::{
    argmax, AssignmentMatrix, ClassModel, FeatureMatrix, FewShotTask, Proportions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrecisionMode {
    /// Use the fitted per-class precisions.
    Glasso,
    /// Replace every precision by the identity (the original PADDLE metric).
    Identity,
}

impl std::str::FromStr for PrecisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glasso" => Ok(Self::Glasso),
            "identity" => Ok(Self::Identity),
            other => Err(Error::InvalidInput(format!(
                "unknown precision mode {other:?} (expected glasso or identity)"
            ))),
        }
    }
}

impl std::fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Glasso => "glasso",
            Self::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the relative change of the total objective falls below this
    /// and the pending assignment step would move no query entry by more than it.
    pub rel_tol: f64,
    pub precision_mode: PrecisionMode,
    /// Floor applied to π before taking its logarithm.
    pub pi_floor: f64,
}

pub const DEFAULT_LAMBDA: f64 = 1250.0;

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            max_iters: 100,
            rel_tol: 1e-6,
            precision_mode: PrecisionMode::Glasso,
            pi_floor: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be >= 1".into()));
        }
        if self.rel_tol.is_nan() || self.rel_tol <= 0.0 {
            return Err(Error::InvalidInput("rel_tol must be > 0".into()));
        }
        if !(self.pi_floor > 0.0 && self.pi_floor < 1.0) {
            return Err(Error::InvalidInput("pi_floor must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub assignments: AssignmentMatrix,
    pub centroids: Vec<Vec<f64>>,
    pub proportions: Proportions,
    /// Objective at the initial state followed by one entry per iteration.
    pub objective_trace: Vec<ObjectiveBreakdown>,
    pub iterations: usize,
    pub converged: bool,
}

impl SolveResult {
    /// Hard label per query sample (lowest class id on ties).
    pub fn predictions(&self) -> Vec<usize> {
        self.assignments.query_rows().map(argmax).collect()
    }

    pub fn query_posteriors(&self) -> Vec<Vec<f64>> {
        self.assignments.query_rows().map(<[f64]>::to_vec).collect()
    }
}

/// Models as seen by the solver under `mode`.
pub fn effective_models(models: &[ClassModel], mode: PrecisionMode) -> Vec<ClassModel> {
    match mode {
        PrecisionMode::Glasso => models.to_vec(),
        PrecisionMode::Identity => models
            .iter()
            .map(|m| ClassModel::identity(m.centroid.clone()))
            .collect(),
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Per-class means of the support samples.
pub fn support_means(task: &FewShotTask, features: &FeatureMatrix) -> Vec<Vec<f64>> {
    let d = features.dim();
    let mut sums = vec![vec![0.0; d]; task.n_classes];
    let mut counts = vec![0usize; task.n_classes];
    for (&idx, &c) in task.support.iter().zip(&task.support_labels) {
        for (s, v) in sums[c].iter_mut().zip(features.row(idx)) {
            *s += v;
        }
        counts[c] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for v in s.iter_mut() {
                *v /= n as f64;
            }
        }
    }
    sums
}

fn check_inputs(task: &FewShotTask, features: &FeatureMatrix, models: &[ClassModel]) -> Result<()> {
    task.validate(features.n_samples()).into_result()?;
    if models.len() != task.n_classes {
        return Err(Error::DimensionMismatch(format!(
            "{} class models for a {}-class task",
            models.len(),
            task.n_classes
        )));
    }
    if let Some(m) = models.iter().find(|m| m.dim() != features.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "model dimension {} vs feature dimension {}",
            m.dim(),
            features.dim()
        )));
    }
    Ok(())
}

fn logits_row(
    z: &[f64],
    centroids: &[Vec<f64>],
    models: &[ClassModel],
    log_pi: Option<&[f64]>,
    weight: f64,
    out: &mut [f64],
) {
    for (k, slot) in out.iter_mut().enumerate() {
        let mut a = -0.5 * models[k].mahalanobis_sq(&centroids[k], z) + 0.5 * models[k].log_det;
        if let Some(lp) = log_pi {
            a += weight * lp[k];
        }
        *slot = a;
    }
}

/// U⁰, W⁰ and π⁰: support means, π-free Gaussian softmax on query rows.
pub fn initialize(
    task: &FewShotTask,
    features: &FeatureMatrix,
    models: &[ClassModel],
) -> Result<(AssignmentMatrix, Vec<Vec<f64>>, Proportions)> {
    check_inputs(task, features, models)?;
    let centroids = support_means(task, features);
    let mut u = AssignmentMatrix::clamped(task);
    let rows = query_softmax(task, features, &centroids, models, None, 0.0)?;
    for (j, r) in rows.iter().enumerate() {
        u.set_query_row(j, r);
    }
    let pi = proportion_update(&u);
    Ok((u, centroids, pi))
}

fn query_softmax(
    task: &FewShotTask,
    features: &FeatureMatrix,
    centroids: &[Vec<f64>],
    models: &[ClassModel],
    log_pi: Option<&[f64]>,
    weight: f64,
) -> Result<Vec<Vec<f64>>> {
    let k = task.n_classes;
    let mut logits = vec![0.0; k];
    let mut rows = Vec::with_capacity(task.n_query());
    for (j, &idx) in task.query.iter().enumerate() {
        logits_row(features.row(idx), centroids, models, log_pi, weight, &mut logits);
        if let Some(class) = logits.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFiniteLogit {
                sample: task.n_support() + j,
                class,
            });
        }
        rows.push(softmax(&logits));
    }
    Ok(rows)
}

/// Floors π at `floor`, renormalizes, and returns the logarithms.
pub fn floored_log_proportions(pi: &[f64], floor: f64) -> Vec<f64> {
    let floored: Vec<f64> = pi.iter().map(|&p| p.max(floor)).collect();
    let sum: f64 = floored.iter().sum();
    floored.iter().map(|&p| (p / sum).ln()).collect()
}

/// New query rows of U for fixed centroids and proportions.
#[allow(clippy::too_many_arguments)]
pub fn assignment_update(
    task: &FewShotTask,
    features: &FeatureMatrix,
    centroids: &[Vec<f64>],
    models: &[ClassModel],
    pi: &Proportions,
    lambda: f64,
    pi_floor: f64,
) -> Result<Vec<Vec<f64>>> {
    let log_pi = floored_log_proportions(pi.as_slice(), pi_floor);
    let weight = lambda / task.n_query() as f64;
    query_softmax(task, features, centroids, models, Some(&log_pi), weight)
}

/// Weighted means `w_k = Σ_n u_nk z_n / Σ_n u_nk` over support and query samples.
///
/// Panics if a class carries zero total weight, which cannot happen when every
/// class has at least one clamped support row.
pub fn centroid_update(
    task: &FewShotTask,
    features: &FeatureMatrix,
    u: &AssignmentMatrix,
) -> Vec<Vec<f64>> {
    let k = u.n_classes();
    let d = features.dim();
    let mut sums = vec![vec![0.0; d]; k];
    let mut mass = vec![0.0; k];
    for (n, row) in u.rows().enumerate() {
        let z = features.row(task.sample_index(n));
        for (c, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            mass[c] += w;
            for (s, v) in sums[c].iter_mut().zip(z) {
                *s += w * v;
            }
        }
    }
    for (c, s) in sums.iter_mut().enumerate() {
        assert!(mass[c] > 0.0, "class {c} has zero total assignment weight");
        for v in s.iter_mut() {
            *v /= mass[c];
        }
    }
    sums
}

/// `π_k = (1/|ℚ|) Σ_{n∈ℚ} u_nk`.
pub fn proportion_update(u: &AssignmentMatrix) -> Proportions {
    Proportions::from_raw(query_proportions(u))
}

fn max_row_change(u: &AssignmentMatrix, rows: &[Vec<f64>]) -> f64 {
    u.query_rows()
        .zip(rows)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Runs the alternating minimization from [`initialize`] until convergence or
/// `cfg.max_iters` iterations. Non-convergence is reported, not an error.
pub fn solve(
    task: &FewShotTask,
    features: &FeatureMatrix,
    models: &[ClassModel],
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    solve_observed(task, features, models, cfg, |_, _| {})
}

/// [`solve`] with a callback receiving `(iteration, U)` for the initial state
/// and after every completed iteration.
pub fn solve_observed(
    task: &FewShotTask,
    features: &FeatureMatrix,
    models: &[ClassModel],
    cfg: &SolverConfig,
    mut observe: impl FnMut(usize, &AssignmentMatrix),
) -> Result<SolveResult> {
    cfg.validate()?;
    let models = effective_models(models, cfg.precision_mode);
    let (mut u, mut centroids, mut pi) = initialize(task, features, &models)?;
    let mut trace = vec![total_objective(
        &u, &centroids, &models, features, task, cfg.lambda,
    )?];
    observe(0, &u);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let rows = assignment_update(
            task,
            features,
            &centroids,
            &models,
            &pi,
            cfg.lambda,
            cfg.pi_floor,
        )?;
        if iterations > 0 {
            let prev = trace[trace.len() - 2].total;
            let last = trace[trace.len() - 1].total;
            let rel = (last - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.rel_tol && max_row_change(&u, &rows) <= cfg.rel_tol {
                converged = true;
                break;
            }
        }
        for (j, r) in rows.iter().enumerate() {
            u.set_query_row(j, r);
        }
        centroids = centroid_update(task, features, &u);
        pi = proportion_update(&u);
        iterations += 1;
        trace.push(total_objective(
            &u, &centroids, &models, features, task, cfg.lambda,
        )?);
        observe(iterations, &u);
    }

    Ok(SolveResult {
        assignments: u,
        centroids,
        proportions: pi,
        objective_trace: trace,
        iterations,
        converged,
    })
}
