//! Seeded synthetic data: Gaussian few-shot tasks and spatially coherent slides.
//!
//! All randomness comes from a single ChaCha8 stream seeded by the caller, and
//! generated features are rounded to f32 so they match what a save/load cycle
//! through the feature file would produce.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::quantize_f32;
use crate::types::{on_simplex, FeatureMatrix, FewShotTask};
use crate::windowing::{GridCell, SlideGrid, SupportBlock};

/// Class frequencies (NT, RE, AM, VE, AN) of the annotated reference cohort.
pub const TABLE1_PRIORS: [f64; 5] = [0.26, 0.14, 0.08, 0.12, 0.40];

/// Eigenvalues of generated covariances are drawn log-uniformly from this range,
/// which caps the condition number at 100.
const EIGEN_RANGE: (f64, f64) = (0.1, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovarianceSpec {
    Identity,
    /// Independent log-uniform variances.
    Diagonal,
    /// Random rotation of log-uniform eigenvalues.
    Spd,
}

impl FromStr for CovarianceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "diagonal" => Ok(Self::Diagonal),
            "spd" => Ok(Self::Spd),
            other => Err(Error::InvalidInput(format!(
                "unknown covariance spec {other:?} (expected identity, diagonal or spd)"
            ))),
        }
    }
}

impl fmt::Display for CovarianceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Diagonal => "diagonal",
            Self::Spd => "spd",
        })
    }
}

/// Shape of the per-class Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassParams {
    pub n_classes: usize,
    pub dim: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    pub covariance: CovarianceSpec,
}

/// Class-conditional Gaussians sharing one random draw.
#[derive(Debug, Clone)]
pub struct GaussianClasses {
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    factors: Vec<DMatrix<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// `count` orthonormal vectors in R^d (count ≤ d) by Gram–Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, d: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, d);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        if normalize(&mut v) {
            basis.push(v);
        }
    }
    basis
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn random_covariance(rng: &mut ChaCha8Rng, d: usize, spec: CovarianceSpec) -> DMatrix<f64> {
    match spec {
        CovarianceSpec::Identity => DMatrix::identity(d, d),
        CovarianceSpec::Diagonal => {
            let diag: Vec<f64> = (0..d).map(|_| log_uniform(rng, EIGEN_RANGE)).collect();
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag))
        }
        CovarianceSpec::Spd => {
            let q = orthonormal(rng, d, d);
            let eig: Vec<f64> = (0..d).map(|_| log_uniform(rng, EIGEN_RANGE)).collect();
            let mut m = DMatrix::<f64>::zeros(d, d);
            for (qv, &e) in q.iter().zip(&eig) {
                for j in 0..d {
                    for i in 0..d {
                        m[(i, j)] += e * qv[i] * qv[j];
                    }
                }
            }
            DMatrix::from_fn(d, d, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
        }
    }
}

impl GaussianClasses {
    pub fn generate(params: &ClassParams, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (k, d) = (params.n_classes, params.dim);
        if k < 2 || d < 1 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes and 1 dimension (got K={k}, d={d})"
            )));
        }
        if !(params.separation >= 0.0 && params.separation.is_finite()) {
            return Err(Error::InvalidInput("separation must be finite and >= 0".into()));
        }
        let directions = if k <= d {
            orthonormal(rng, d, k)
        } else {
            (0..k)
                .map(|_| loop {
                    let mut v = gaussian_vec(rng, d);
                    if normalize(&mut v) {
                        break v;
                    }
                })
                .collect()
        };
        let means = directions
            .into_iter()
            .map(|v| v.into_iter().map(|x| x * params.separation).collect())
            .collect();
        let covariances: Vec<DMatrix<f64>> = (0..k)
            .map(|_| random_covariance(rng, d, params.covariance))
            .collect();
        let factors = covariances
            .iter()
            .map(|c| {
                c.clone()
                    .cholesky()
                    .map(|ch| ch.l())
                    .ok_or(Error::NotPositiveDefinite)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            means,
            covariances,
            factors,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// One draw from class `k`, rounded to f32 precision.
    pub fn sample(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.dim();
        let eps = gaussian_vec(rng, d);
        let l = &self.factors[k];
        let mut z = self.means[k].clone();
        for i in 0..d {
            for j in 0..=i {
                z[i] += l[(i, j)] * eps[j];
            }
        }
        quantize_f32(&mut z);
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub classes: ClassParams,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub task: FewShotTask,
    pub features: FeatureMatrix,
    /// True class of each query sample, in task query order.
    pub truth: Vec<usize>,
}

/// Support rows come first (class-major), then query rows (class-major).
pub fn gen_task(params: &TaskParams) -> Result<SyntheticTask> {
    if params.shots == 0 || params.queries == 0 {
        return Err(Error::InvalidInput("shots and queries per class must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let world = GaussianClasses::generate(&params.classes, &mut rng)?;
    let k = params.classes.n_classes;
    let mut rows = Vec::with_capacity(k * (params.shots + params.queries));
    let mut labels = Vec::new();
    for c in 0..k {
        for _ in 0..params.shots {
            rows.push(world.sample(c, &mut rng));
            labels.push(c);
        }
    }
    let mut truth = Vec::new();
    for c in 0..k {
        for _ in 0..params.queries {
            rows.push(world.sample(c, &mut rng));
            truth.push(c);
        }
    }
    let n_support = labels.len();
    let task = FewShotTask::new(
        (0..n_support).collect(),
        labels,
        (n_support..rows.len()).collect(),
        k,
    );
    Ok(SyntheticTask {
        task,
        features: FeatureMatrix::from_rows(&rows)?,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideParams {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Side of the square regions, in cells.
    pub block: usize,
    /// Class priors; their length fixes the number of classes.
    pub priors: Vec<f64>,
    /// Support samples drawn per class.
    pub shots: usize,
    pub dim: usize,
    pub separation: f64,
    pub covariance: CovarianceSpec,
    pub seed: u64,
}

impl SlideParams {
    pub fn class_params(&self) -> ClassParams {
        ClassParams {
            n_classes: self.priors.len(),
            dim: self.dim,
            separation: self.separation,
            covariance: self.covariance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub grid: SlideGrid,
    /// Support rows first, then one row per cell in row-major order.
    pub features: FeatureMatrix,
    /// True class per cell, row-major.
    pub truth: Vec<usize>,
    pub support: SupportBlock,
}

fn categorical(rng: &mut ChaCha8Rng, priors: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding slack: last class with positive mass
    priors.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Slide made of aligned `block × block` regions (randomly offset lattice),
/// each of a single class drawn from the priors.
pub fn gen_slide(params: &SlideParams) -> Result<SyntheticSlide> {
    if params.block == 0 {
        return Err(Error::InvalidInput("block size must be >= 1".into()));
    }
    if params.n_rows == 0 || params.n_cols == 0 {
        return Err(Error::InvalidInput("slide must have at least one cell".into()));
    }
    if !on_simplex(&params.priors, 1e-9) {
        return Err(Error::InvalidInput(format!(
            "class priors must lie on the simplex, got {:?}",
            params.priors
        )));
    }
    if params.shots == 0 {
        return Err(Error::InvalidInput("shots per class must be >= 1".into()));
    }
    let k = params.priors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let world = GaussianClasses::generate(&params.class_params(), &mut rng)?;

    let mut rows = Vec::with_capacity(k * params.shots + params.n_rows * params.n_cols);
    let mut labels = Vec::new();
    for c in 0..k {
        for _ in 0..params.shots {
            rows.push(world.sample(c, &mut rng));
            labels.push(c);
        }
    }
    let n_support = rows.len();

    let b = params.block;
    let off_r = rng.random_range(0..b);
    let off_c = rng.random_range(0..b);
    let block_rows = (params.n_rows + off_r).div_ceil(b);
    let block_cols = (params.n_cols + off_c).div_ceil(b);
    let block_class: Vec<usize> = (0..block_rows * block_cols)
        .map(|_| categorical(&mut rng, &params.priors))
        .collect();

    let mut cells = Vec::with_capacity(params.n_rows * params.n_cols);
    let mut truth = Vec::with_capacity(params.n_rows * params.n_cols);
    for r in 0..params.n_rows {
        for c in 0..params.n_cols {
            let class = block_class[((r + off_r) / b) * block_cols + (c + off_c) / b];
            cells.push(GridCell {
                row: r,
                col: c,
                feature_index: rows.len(),
                true_class: Some(class),
            });
            rows.push(world.sample(class, &mut rng));
            truth.push(class);
        }
    }
    Ok(SyntheticSlide {
        grid: SlideGrid::new(params.n_rows, params.n_cols, k, cells)?,
        features: FeatureMatrix::from_rows(&rows)?,
        truth,
        support: SupportBlock {
            indices: (0..n_support).collect(),
            labels,
            n_classes: k,
        },
    })
}
