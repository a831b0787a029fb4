//! Sparse per-class precision matrices via the Graphical Lasso.
//!
//! The estimator maximizes `ln det Θ − tr(SΘ) − ρ‖Θ‖₁` over positive-definite
//! `Θ`. It is solved in the dual by block coordinate descent over the columns
//! of the covariance estimate `W = Θ⁻¹`: each column update is a lasso problem
//!
//! ```text
//! minimize_β  ½ βᵀ W₁₁ β − s₁₂ᵀ β + ρ ‖β‖₁
//! ```
//!
//! solved by cyclic coordinate descent, after which `w₁₂ = W₁₁ β`. The diagonal
//! of `W` stays at `S_ii + ρ` throughout.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{ClassModel, FeatureMatrix, FewShotTask, Violation};

/// Relative asymmetry accepted on input matrices.
const SYMMETRY_TOL: f64 = 1e-10;
/// Once the sweep tolerance is met, keep sweeping until changes fall below
/// this multiple of the mean diagonal (or the sweep budget runs out).
const POLISH_TOL: f64 = 1e-14;
const INNER_TOL: f64 = 1e-15;
const INNER_MAX_PASSES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoConfig {
    /// ℓ1 penalty. `None` selects `0.1 · mean(diag S)` per matrix.
    pub rho: Option<f64>,
    pub max_sweeps: usize,
    /// Convergence threshold on the largest per-sweep change of `W`.
    pub kkt_tol: f64,
    /// Added to the diagonal when an unpenalized covariance is singular.
    pub jitter: f64,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        Self {
            rho: None,
            max_sweeps: 200,
            kkt_tol: 1e-4,
            jitter: 1e-6,
        }
    }
}

impl GlassoConfig {
    pub fn with_rho(rho: f64) -> Self {
        Self {
            rho: Some(rho),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.rho {
            if !(rho >= 0.0 && rho.is_finite()) {
                return Err(Error::InvalidInput(format!("rho must be >= 0, got {rho}")));
            }
        }
        if self.kkt_tol.is_nan() || self.kkt_tol <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "kkt_tol must be > 0, got {}",
                self.kkt_tol
            )));
        }
        if self.jitter.is_nan() || self.jitter < 0.0 {
            return Err(Error::InvalidInput("jitter must be >= 0".into()));
        }
        Ok(())
    }

    /// Penalty actually applied to covariance `s`.
    pub fn effective_rho(&self, s: &DMatrix<f64>) -> f64 {
        self.rho.unwrap_or_else(|| 0.1 * mean_diagonal(s))
    }
}

/// Result of [`graphical_lasso`].
#[derive(Debug, Clone)]
pub struct GlassoFit {
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub rho: f64,
    pub sweeps: usize,
    /// Diagonal jitter that had to be added to `S` (0 when none).
    pub jitter: f64,
}

fn mean_diagonal(s: &DMatrix<f64>) -> f64 {
    let d = s.nrows().max(1);
    s.diagonal().iter().sum::<f64>() / d as f64
}

/// Maximum-likelihood covariance (normalized by m) around the sample mean.
pub fn empirical_covariance(samples: &[&[f64]]) -> Result<DMatrix<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("covariance of zero samples".into()))?;
    let d = first.len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::DimensionMismatch("samples of unequal length".into()));
    }
    let m = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (acc, v) in mean.iter_mut().zip(s.iter()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for s in samples {
        for (c, (v, mu)) in centered.iter_mut().zip(s.iter().zip(&mean)) {
            *c = v - mu;
        }
        for j in 0..d {
            for i in j..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for j in 0..d {
        for i in j..d {
            let v = cov[(i, j)] / m;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..d {
        for i in (j + 1)..d {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// `ln det M` as twice the log-sum of the Cholesky diagonal.
pub fn log_det_pd(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn inverse_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let inv = chol.inverse();
    Ok(symmetrize(&inv))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    DMatrix::from_fn(d, d, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Largest violation of the Graphical Lasso optimality conditions
/// `W = S + ρ·Γ`, `Γ ∈ ∂‖Θ‖₁`, for a candidate `(Θ, W)` pair.
///
/// Diagonal entries must satisfy `W_ii = S_ii + ρ`. Off-diagonal entries with
/// `Θ_ij = 0` must satisfy `|S_ij − W_ij| ≤ ρ`; nonzero ones must satisfy
/// `W_ij = S_ij + ρ·sign(Θ_ij)`.
pub fn kkt_residual(
    s: &DMatrix<f64>,
    precision: &DMatrix<f64>,
    covariance: &DMatrix<f64>,
    rho: f64,
) -> f64 {
    let d = s.nrows();
    let mut worst = 0.0f64;
    for j in 0..d {
        for i in 0..d {
            let gap = covariance[(i, j)] - s[(i, j)];
            let r = if i == j {
                (gap - rho).abs()
            } else if precision[(i, j)] == 0.0 {
                (gap.abs() - rho).max(0.0)
            } else {
                (gap - rho * precision[(i, j)].signum()).abs()
            };
            worst = worst.max(r);
        }
    }
    worst
}

/// Solves the column-`j` lasso subproblem in place, warm-started from `beta`.
///
/// `beta[j]` is unused and stays zero. `v` receives `W₁₁ β` (with `v[j]` unused).
fn column_lasso(
    w: &DMatrix<f64>,
    s: &DMatrix<f64>,
    j: usize,
    rho: f64,
    beta: &mut [f64],
    v: &mut [f64],
) {
    let d = w.nrows();
    for (l, out) in v.iter_mut().enumerate() {
        *out = if l == j {
            0.0
        } else {
            (0..d)
                .filter(|&m| m != j)
                .map(|m| w[(l, m)] * beta[m])
                .sum()
        };
    }
    let scale = w[(j, j)].abs().max(f64::MIN_POSITIVE);
    for _ in 0..INNER_MAX_PASSES {
        let mut max_step = 0.0f64;
        for i in 0..d {
            if i == j {
                continue;
            }
            let wii = w[(i, i)];
            let partial = v[i] - wii * beta[i];
            let next = soft_threshold(s[(i, j)] - partial, rho) / wii;
            let delta = next - beta[i];
            if delta != 0.0 {
                beta[i] = next;
                for l in 0..d {
                    if l != j {
                        v[l] += w[(l, i)] * delta;
                    }
                }
                max_step = max_step.max((delta * wii).abs());
            }
        }
        if max_step <= INNER_TOL * scale {
            break;
        }
    }
}

/// Graphical Lasso by block coordinate descent over columns.
///
/// Requires `S` symmetric PSD with `ρ > 0`, or `S` positive-definite. An
/// unpenalized singular `S` receives `cfg.jitter` on its diagonal.
pub fn graphical_lasso(s: &DMatrix<f64>, cfg: &GlassoConfig) -> Result<GlassoFit> {
    cfg.validate()?;
    check_symmetric(s)?;
    let d = s.nrows();
    if d == 0 {
        return Err(Error::InvalidInput("empty covariance matrix".into()));
    }
    let rho = cfg.effective_rho(s);
    let mut s = symmetrize(s);
    let mut jitter = 0.0;
    let penalized_pd = rho > 0.0 && s.diagonal().iter().all(|&v| v + rho > 0.0);
    if !penalized_pd && s.clone().cholesky().is_none() {
        if cfg.jitter > 0.0 {
            jitter = cfg.jitter;
            for i in 0..d {
                s[(i, i)] += jitter;
            }
            if s.clone().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite);
            }
            log::debug!("covariance singular at rho = 0; added jitter {jitter}");
        } else {
            return Err(Error::NotPositiveDefinite);
        }
    }

    let mut w = s.clone();
    for i in 0..d {
        w[(i, i)] += rho;
    }
    // beta[j] holds the lasso coefficients of column j
    let mut beta = vec![vec![0.0; d]; d];
    let mut v = vec![0.0; d];
    let mut sweeps = 0;
    let mut reached = d == 1;
    let mut last_change = 0.0;
    let polish = POLISH_TOL * mean_diagonal(&w).abs().max(f64::MIN_POSITIVE);

    while d > 1 && sweeps < cfg.max_sweeps {
        sweeps += 1;
        let mut change = 0.0f64;
        for j in 0..d {
            column_lasso(&w, &s, j, rho, &mut beta[j], &mut v);
            for i in 0..d {
                if i == j {
                    continue;
                }
                change = change.max((w[(i, j)] - v[i]).abs());
                w[(i, j)] = v[i];
                w[(j, i)] = v[i];
            }
        }
        last_change = change;
        if change < cfg.kkt_tol {
            reached = true;
        }
        if change <= polish {
            break;
        }
    }

    let mut precision = match inverse_pd(&w) {
        Ok(p) => p,
        Err(_) => {
            return Err(Error::GlassoNotConverged {
                sweeps,
                last_change,
                kkt_residual: f64::INFINITY,
            })
        }
    };
    // Entries the lasso set to zero from both sides are structural zeros.
    let dense = precision.clone();
    for j in 0..d {
        for i in 0..d {
            if i != j && beta[j][i] == 0.0 && beta[i][j] == 0.0 {
                precision[(i, j)] = 0.0;
            }
        }
    }
    if precision.clone().cholesky().is_none() {
        precision = dense;
    }

    if !reached {
        let kkt = kkt_residual(&s, &precision, &w, rho);
        return Err(Error::GlassoNotConverged {
            sweeps,
            last_change,
            kkt_residual: kkt,
        });
    }
    Ok(GlassoFit {
        precision,
        covariance: w,
        rho,
        sweeps,
        jitter,
    })
}

/// Per-class centroids and Graphical Lasso precisions from the support set.
///
/// The query set may be empty.
/// Classes with fewer than two shots get an identity precision (log-det 0).
/// Classes are estimated in parallel; each estimate is sequential and deterministic.
pub fn fit_class_models(
    task: &FewShotTask,
    features: &FeatureMatrix,
    cfg: &GlassoConfig,
) -> Result<Vec<ClassModel>> {
    let mut report = task.validate(features.n_samples());
    // fitting only reads the support
    report.violations.retain(|v| *v != Violation::EmptyQuery);
    report.into_result()?;
    cfg.validate()?;
    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); task.n_classes];
    for (&idx, &c) in task.support.iter().zip(&task.support_labels) {
        members[c].push(features.row(idx));
    }
    members
        .par_iter()
        .enumerate()
        .map(|(class, rows)| {
            fit_one(rows, cfg).map_err(|e| Error::Class {
                class,
                source: Box::new(e),
            })
        })
        .collect()
}

fn fit_one(rows: &[&[f64]], cfg: &GlassoConfig) -> Result<ClassModel> {
    let d = rows[0].len();
    let m = rows.len() as f64;
    let mut centroid = vec![0.0; d];
    for r in rows {
        for (c, v) in centroid.iter_mut().zip(r.iter()) {
            *c += v;
        }
    }
    for c in &mut centroid {
        *c /= m;
    }
    if rows.len() < 2 {
        return Ok(ClassModel::identity(centroid));
    }
    let cov = empirical_covariance(rows)?;
    let fit = graphical_lasso(&cov, cfg)?;
    ClassModel::new(centroid, fit.precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn covariance_examples() {
        let c = empirical_covariance(&[&[0.0, 0.0], &[2.0, 0.0]]).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let c = empirical_covariance(&[&[3.0, -1.0]]).unwrap();
        assert_eq!(c, DMatrix::zeros(2, 2));
        let c = empirical_covariance(&[&[1.0, 1.0], &[-1.0, -1.0]]).unwrap();
        assert_eq!(c, DMatrix::from_element(2, 2, 1.0));
        assert!(empirical_covariance(&[]).is_err());
    }

    #[test]
    fn log_det_examples() {
        assert_eq!(log_det_pd(&DMatrix::identity(3, 3)).unwrap(), 0.0);
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0]));
        assert!((log_det_pd(&m).unwrap() - 6f64.ln()).abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(log_det_pd(&bad), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn identity_is_a_fixed_point_at_zero_penalty() {
        let fit = graphical_lasso(&DMatrix::identity(2, 2), &GlassoConfig::with_rho(0.0)).unwrap();
        assert!(close(&fit.precision, &DMatrix::identity(2, 2), 1e-15));
    }

    #[test]
    fn diagonal_input_shifts_by_rho() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let fit = graphical_lasso(&s, &GlassoConfig::with_rho(0.5)).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0 / 2.5, 0.0, 0.0, 1.0 / 4.5]);
        assert!(close(&fit.precision, &want, 1e-15));
        assert_eq!(fit.covariance[(0, 0)], 2.5);
        assert_eq!(fit.covariance[(1, 1)], 4.5);
        assert!(kkt_residual(&s, &fit.precision, &fit.covariance, 0.5) < 1e-12);
    }

    #[test]
    fn large_penalty_zeroes_off_diagonal() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let fit = graphical_lasso(&s, &GlassoConfig::with_rho(1.0)).unwrap();
        assert_eq!(fit.precision[(0, 1)], 0.0);
        assert_eq!(fit.precision[(1, 0)], 0.0);
        assert!((fit.precision[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((fit.precision[(1, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]);
        assert!(matches!(
            graphical_lasso(&s, &GlassoConfig::with_rho(0.1)),
            Err(Error::NotSymmetric(_))
        ));
    }

    #[test]
    fn singular_unpenalized_input_uses_jitter() {
        let s = DMatrix::from_element(2, 2, 1.0);
        let fit = graphical_lasso(&s, &GlassoConfig::with_rho(0.0)).unwrap();
        assert_eq!(fit.jitter, 1e-6);
        let strict = GlassoConfig {
            jitter: 0.0,
            ..GlassoConfig::with_rho(0.0)
        };
        assert!(graphical_lasso(&s, &strict).is_err());
    }

    #[test]
    fn sweep_budget_exhaustion_reports_residual() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.8, 0.3, 0.8, 1.5, -0.4, 0.3, -0.4, 1.0]);
        let cfg = GlassoConfig {
            max_sweeps: 1,
            kkt_tol: 1e-300,
            ..GlassoConfig::with_rho(0.2)
        };
        match graphical_lasso(&s, &cfg) {
            Err(Error::GlassoNotConverged { sweeps, kkt_residual, .. }) => {
                assert_eq!(sweeps, 1);
                assert!(kkt_residual.is_finite());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn default_rho_is_scale_relative() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        assert!((GlassoConfig::default().effective_rho(&s) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn single_shot_class_falls_back_to_identity() {
        let f = FeatureMatrix::from_rows(&[
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![3.0, 0.0],
            vec![5.0, 5.0],
        ])
        .unwrap();
        let task = FewShotTask::new(vec![0, 1, 2], vec![0, 1, 1], vec![3], 2);
        let models = fit_class_models(&task, &f, &GlassoConfig::default()).unwrap();
        assert_eq!(models[0].precision, DMatrix::identity(2, 2));
        assert_eq!(models[0].log_det, 0.0);
        assert_eq!(models[0].centroid, vec![0.0, 1.0]);
        assert_eq!(models[1].centroid, vec![2.0, 0.0]);
    }
}
