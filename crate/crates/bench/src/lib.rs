//! Fixed inputs for the criterion benchmarks.

use transduct_core::precision::{empirical_covariance, fit_class_models, GlassoConfig};
use transduct_core::synth::{gen_slide, gen_task, ClassParams, CovarianceSpec, SlideParams, SyntheticSlide, SyntheticTask, TaskParams, TABLE1_PRIORS};
use transduct_core::{ClassModel, FewShotTask};

pub use transduct_core::nalgebra::DMatrix;

/// Sample covariance of one class of a `d`-dimensional task with `shots` samples.
pub fn class_covariance(d: usize, shots: usize) -> DMatrix<f64> {
    let t = task(d, shots, 1);
    let rows: Vec<&[f64]> = t
        .task
        .support
        .iter()
        .zip(&t.task.support_labels)
        .filter(|(_, &c)| c == 0)
        .map(|(&i, _)| t.features.row(i))
        .collect();
    empirical_covariance(&rows).expect("fixture covariance")
}

pub fn task(d: usize, shots: usize, queries: usize) -> SyntheticTask {
    gen_task(&TaskParams {
        classes: ClassParams {
            n_classes: 5,
            dim: d,
            separation: 3.0,
            covariance: CovarianceSpec::Spd,
        },
        shots,
        queries,
        seed: 17,
    })
    .expect("fixture task")
}

pub fn slide(n: usize, d: usize) -> SyntheticSlide {
    gen_slide(&SlideParams {
        n_rows: n,
        n_cols: n,
        block: 6,
        priors: TABLE1_PRIORS.to_vec(),
        shots: 10,
        dim: d,
        separation: 3.0,
        covariance: CovarianceSpec::Spd,
        seed: 17,
    })
    .expect("fixture slide")
}

pub fn slide_models(s: &SyntheticSlide) -> Vec<ClassModel> {
    let task = FewShotTask::new(s.support.indices.clone(), s.support.labels.clone(), Vec::new(), s.support.n_classes);
    fit_class_models(&task, &s.features, &GlassoConfig::default()).expect("fixture models")
}
