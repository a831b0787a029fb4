//! Inductive nearest-centroid baseline (SimpleShot).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::types::{FeatureMatrix, FewShotTask};

/// Feature transform applied before nearest-centroid matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimpleShotVariant {
    /// Unnormalized.
    Un,
    /// Row-wise unit L2 normalization.
    L2n,
    /// Subtract the support mean, then L2-normalize.
    Cl2n,
}

impl SimpleShotVariant {
    pub const ALL: [SimpleShotVariant; 3] = [Self::Un, Self::L2n, Self::Cl2n];
}

impl FromStr for SimpleShotVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "un" => Ok(Self::Un),
            "l2n" => Ok(Self::L2n),
            "cl2n" => Ok(Self::Cl2n),
            other => Err(Error::InvalidInput(format!(
                "unknown SimpleShot variant {other:?} (expected un, l2n or cl2n)"
            ))),
        }
    }
}

impl fmt::Display for SimpleShotVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Un => "un",
            Self::L2n => "l2n",
            Self::Cl2n => "cl2n",
        })
    }
}

// Zero vectors are left as they are.
fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hard prediction per query sample, in task query order.
pub fn simpleshot(
    task: &FewShotTask,
    features: &FeatureMatrix,
    variant: SimpleShotVariant,
) -> Result<Vec<usize>> {
    task.validate(features.n_samples()).into_result()?;
    let d = features.dim();
    let center = match variant {
        SimpleShotVariant::Cl2n => {
            let mut mean = vec![0.0; d];
            for &i in &task.support {
                for (m, v) in mean.iter_mut().zip(features.row(i)) {
                    *m += v;
                }
            }
            let n = task.support.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Some(mean)
        }
        _ => None,
    };
    let transform = |z: &[f64]| -> Vec<f64> {
        let mut v = z.to_vec();
        if let Some(c) = &center {
            v.iter_mut().zip(c).for_each(|(x, m)| *x -= m);
        }
        if variant != SimpleShotVariant::Un {
            l2_normalize(&mut v);
        }
        v
    };

    let mut centroids = vec![vec![0.0; d]; task.n_classes];
    let mut counts = vec![0usize; task.n_classes];
    for (&i, &c) in task.support.iter().zip(&task.support_labels) {
        let v = transform(features.row(i));
        centroids[c].iter_mut().zip(&v).for_each(|(s, x)| *s += x);
        counts[c] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|x| *x /= *n as f64);
    }

    Ok(task
        .query
        .iter()
        .map(|&i| {
            let v = transform(features.row(i));
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let dist = squared_distance(&v, c);
                if dist < best_dist {
                    best = k;
                    best_dist = dist;
                }
            }
            best
        })
        .collect())
}
