//! Domain types shared by every stage of the pipeline.
//!
//! Samples live in a [`FeatureMatrix`]; a [`FewShotTask`] selects a labeled
//! support block and an unlabeled query block out of it. Soft assignments are
//! held in an [`AssignmentMatrix`] whose rows follow the task's local order:
//! all support samples first, then all query samples.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Class names in id order.
pub const CLASS_NAMES: [&str; 5] = ["NT", "RE", "AM", "VE", "AN"];

/// Tolerance used when checking that a row lies on the unit simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// N×d sample embeddings, row-major, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_samples: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_samples: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if n_samples == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!(
                "feature matrix must be non-empty (got {n_samples}x{dim})"
            )));
        }
        if values.len() != n_samples * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {n_samples}x{dim} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite feature at sample {}, component {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            n_samples,
            dim,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged feature rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }
}

/// One violated [`FewShotTask`] invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Overlap { index: usize },
    IndexOutOfRange { index: usize, n_samples: usize },
    DuplicateIndex { index: usize },
    EmptyQuery,
    LabelCountMismatch { support: usize, labels: usize },
    NotOneHot { row: usize },
    LabelOutOfRange { row: usize, class: usize },
    MissingClass { class: usize },
    NoClasses,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Overlap { index } => write!(f, "overlap at index {index}"),
            Violation::IndexOutOfRange { index, n_samples } => {
                write!(f, "index {index} out of range for {n_samples} samples")
            }
            Violation::DuplicateIndex { index } => write!(f, "duplicate index {index}"),
            Violation::EmptyQuery => write!(f, "query set is empty"),
            Violation::LabelCountMismatch { support, labels } => {
                write!(f, "{support} support indices but {labels} labels")
            }
            Violation::NotOneHot { row } => write!(f, "support label row {row} is not one-hot"),
            Violation::LabelOutOfRange { row, class } => {
                write!(f, "support label row {row} has class {class} out of range")
            }
            Violation::MissingClass { class } => write!(f, "class {class} has no shots"),
            Violation::NoClasses => write!(f, "task has zero classes"),
        }
    }
}

/// Outcome of [`FewShotTask::validate`]; empty means the task is valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let msg = self
            .violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidTask(msg))
    }
}

/// Support/query split over a [`FeatureMatrix`].
///
/// Labels are stored as class ids, one per support index; [`FewShotTask::one_hot`]
/// gives the equivalent one-hot rows and [`FewShotTask::from_one_hot`] decodes them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotTask {
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub n_classes: usize,
}

impl FewShotTask {
    pub fn new(
        support: Vec<usize>,
        support_labels: Vec<usize>,
        query: Vec<usize>,
        n_classes: usize,
    ) -> Self {
        Self {
            support,
            support_labels,
            query,
            n_classes,
        }
    }

    /// Builds a task from one-hot label rows, reporting rows that are not one-hot.
    pub fn from_one_hot(
        support: Vec<usize>,
        labels: &[Vec<f64>],
        query: Vec<usize>,
        n_classes: usize,
    ) -> std::result::Result<Self, ValidationReport> {
        let mut violations = Vec::new();
        let mut ids = Vec::with_capacity(labels.len());
        for (row, y) in labels.iter().enumerate() {
            let ones: Vec<usize> = y
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(k, _)| k)
                .collect();
            let zeros = y.iter().filter(|&&v| v == 0.0).count();
            if y.len() != n_classes || ones.len() != 1 || zeros != n_classes - 1 {
                violations.push(Violation::NotOneHot { row });
                ids.push(usize::MAX);
            } else {
                ids.push(ones[0]);
            }
        }
        if !violations.is_empty() {
            return Err(ValidationReport { violations });
        }
        Ok(Self::new(support, ids, query, n_classes))
    }

    pub fn one_hot(&self) -> Vec<Vec<f64>> {
        self.support_labels
            .iter()
            .map(|&c| {
                let mut y = vec![0.0; self.n_classes];
                y[c] = 1.0;
                y
            })
            .collect()
    }

    pub fn n_support(&self) -> usize {
        self.support.len()
    }

    pub fn n_query(&self) -> usize {
        self.query.len()
    }

    /// Support plus query count: the N the objective sums over.
    pub fn n_total(&self) -> usize {
        self.support.len() + self.query.len()
    }

    /// Feature-row index of local sample `n` (support first, then query).
    pub fn sample_index(&self, n: usize) -> usize {
        if n < self.support.len() {
            self.support[n]
        } else {
            self.query[n - self.support.len()]
        }
    }

    /// Number of support samples per class.
    pub fn shots(&self) -> Vec<usize> {
        let mut shots = vec![0; self.n_classes];
        for &c in &self.support_labels {
            if c < self.n_classes {
                shots[c] += 1;
            }
        }
        shots
    }

    pub fn validate(&self, n_samples: usize) -> ValidationReport {
        let mut violations = Vec::new();
        if self.n_classes == 0 {
            violations.push(Violation::NoClasses);
        }
        if self.query.is_empty() {
            violations.push(Violation::EmptyQuery);
        }
        if self.support.len() != self.support_labels.len() {
            violations.push(Violation::LabelCountMismatch {
                support: self.support.len(),
                labels: self.support_labels.len(),
            });
        }
        let mut seen_support = BTreeSet::new();
        for &i in &self.support {
            if i >= n_samples {
                violations.push(Violation::IndexOutOfRange {
                    index: i,
                    n_samples,
                });
            }
            if !seen_support.insert(i) {
                violations.push(Violation::DuplicateIndex { index: i });
            }
        }
        let mut seen_query = BTreeSet::new();
        for &i in &self.query {
            if i >= n_samples {
                violations.push(Violation::IndexOutOfRange {
                    index: i,
                    n_samples,
                });
            }
            if !seen_query.insert(i) {
                violations.push(Violation::DuplicateIndex { index: i });
            }
        }
        for &i in seen_support.intersection(&seen_query) {
            violations.push(Violation::Overlap { index: i });
        }
        for (row, &c) in self.support_labels.iter().enumerate() {
            if c >= self.n_classes {
                violations.push(Violation::LabelOutOfRange { row, class: c });
            }
        }
        for (class, &s) in self.shots().iter().enumerate() {
            if s == 0 {
                violations.push(Violation::MissingClass { class });
            }
        }
        ValidationReport { violations }
    }
}

/// Soft assignments U over a task's samples, support rows first.
///
/// Support rows are fixed to their one-hot labels at construction and are
/// never written afterwards; only query rows can be replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    n_classes: usize,
    n_support: usize,
    values: Vec<f64>,
}

impl AssignmentMatrix {
    /// Support rows clamped to the labels, query rows uniform.
    pub fn clamped(task: &FewShotTask) -> Self {
        let k = task.n_classes;
        let mut values = vec![0.0; task.n_total() * k];
        for (n, &c) in task.support_labels.iter().enumerate() {
            values[n * k + c] = 1.0;
        }
        let uniform = 1.0 / k as f64;
        for v in &mut values[task.n_support() * k..] {
            *v = uniform;
        }
        Self {
            n_classes: k,
            n_support: task.n_support(),
            values,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.n_classes
    }

    pub fn n_support(&self) -> usize {
        self.n_support
    }

    pub fn n_query(&self) -> usize {
        self.n_rows() - self.n_support
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_classes..(n + 1) * self.n_classes]
    }

    pub fn query_row(&self, j: usize) -> &[f64] {
        self.row(self.n_support + j)
    }

    pub fn query_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.values[self.n_support * self.n_classes..].chunks_exact(self.n_classes)
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_classes)
    }

    pub fn set_query_row(&mut self, j: usize, row: &[f64]) {
        assert_eq!(row.len(), self.n_classes, "assignment row length");
        let start = (self.n_support + j) * self.n_classes;
        self.values[start..start + self.n_classes].copy_from_slice(row);
    }

    /// Checks the simplex constraint on query rows and exact clamping of support rows.
    pub fn check(&self, task: &FewShotTask) -> std::result::Result<(), String> {
        if self.n_support != task.n_support() || self.n_rows() != task.n_total() {
            return Err("assignment shape does not match task".into());
        }
        for (n, &c) in task.support_labels.iter().enumerate() {
            let row = self.row(n);
            if row.iter().enumerate().any(|(k, &v)| v != if k == c { 1.0 } else { 0.0 }) {
                return Err(format!("support row {n} is not clamped to class {c}"));
            }
        }
        for (j, row) in self.query_rows().enumerate() {
            if !on_simplex(row, SIMPLEX_TOL) {
                return Err(format!("query row {j} is off the simplex: {row:?}"));
            }
        }
        Ok(())
    }
}

pub fn on_simplex(row: &[f64], tol: f64) -> bool {
    row.iter().all(|&v| v >= 0.0 && v.is_finite()) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Per-class Gaussian parameters: centroid, precision and its cached log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub centroid: Vec<f64>,
    pub precision: DMatrix<f64>,
    pub log_det: f64,
}

impl ClassModel {
    /// Validates the precision (symmetric, Cholesky-factorizable) and caches its log-determinant.
    pub fn new(centroid: Vec<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let d = centroid.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "centroid of length {d} with {}x{} precision",
                precision.nrows(),
                precision.ncols()
            )));
        }
        let log_det = crate::precision::log_det_pd(&precision)?;
        Ok(Self {
            centroid,
            precision,
            log_det,
        })
    }

    pub fn identity(centroid: Vec<f64>) -> Self {
        let d = centroid.len();
        Self {
            centroid,
            precision: DMatrix::identity(d, d),
            log_det: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }

    /// (w − z)ᵀ Ŝ (w − z) for an arbitrary center `w`.
    pub fn mahalanobis_sq(&self, w: &[f64], z: &[f64]) -> f64 {
        let d = w.len();
        let diff: Vec<f64> = w.iter().zip(z).map(|(a, b)| a - b).collect();
        let p = self.precision.as_slice();
        let mut acc = 0.0;
        // column-major storage; symmetric so column j is row j
        for j in 0..d {
            let col = &p[j * d..(j + 1) * d];
            let dot: f64 = col.iter().zip(&diff).map(|(a, b)| a * b).sum();
            acc += diff[j] * dot;
        }
        acc
    }
}

/// Query-set class proportions π, on the unit simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Proportions(Vec<f64>);

impl Proportions {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() || !on_simplex(&pi, SIMPLEX_TOL) {
            return Err(Error::InvalidInput(format!(
                "proportions must lie on the simplex, got {pi:?}"
            )));
        }
        Ok(Self(pi))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub(crate) fn from_raw(pi: Vec<f64>) -> Self {
        Self(pi)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}
