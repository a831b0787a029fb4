use std::path::Path;

use nalgebra::DMatrix;
use proptest::prelude::*;

use transduct_core::io::{
    decode_features, encode_features, labels_csv, manifest_text, parse_labels, parse_manifest, ModelFile,
};
use transduct_core::objective::{data_fidelity, entropic_barrier, partition_entropy};
use transduct_core::precision::{graphical_lasso, kkt_residual, GlassoConfig};
use transduct_core::ppm::RgbImage;
use transduct_core::solver::{solve_observed, SolverConfig};
use transduct_core::stain::{compute_stats, normalize};
use transduct_core::windowing::{anchors, class_map_csv, parse_class_map_csv, ClassMap, GridCell, MapCell, SlideGrid};
use transduct_core::{on_simplex, AssignmentMatrix, ClassModel, FeatureMatrix, FewShotTask, SIMPLEX_TOL};

fn f32_value() -> impl Strategy<Value = f64> {
    (-1e6f32..1e6f32).prop_map(f64::from)
}

fn feature_matrix(max_n: usize, max_d: usize) -> impl Strategy<Value = FeatureMatrix> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(f32_value(), n * d).prop_map(move |v| FeatureMatrix::new(n, d, v).unwrap())
    })
}

fn simplex_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        if s == 0.0 {
            vec![1.0 / w.len() as f64; w.len()]
        } else {
            w.iter().map(|x| x / s).collect()
        }
    })
}

/// Task with `k` classes (one shot each), `q` queries, and `k + q` 2-d samples.
fn tiny_task(k: usize, q: usize) -> (FewShotTask, FeatureMatrix) {
    let rows: Vec<Vec<f64>> = (0..k + q).map(|i| vec![i as f64 * 0.7, (i * i % 5) as f64]).collect();
    let task = FewShotTask::new((0..k).collect(), (0..k).collect(), (k..k + q).collect(), k);
    (task, FeatureMatrix::from_rows(&rows).unwrap())
}

fn with_rows(task: &FewShotTask, rows: &[Vec<f64>]) -> AssignmentMatrix {
    let mut u = AssignmentMatrix::clamped(task);
    for (j, r) in rows.iter().enumerate() {
        u.set_query_row(j, r);
    }
    u
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_file_round_trip(m in feature_matrix(12, 9)) {
        let back = decode_features(&encode_features(&m), Path::new("m")).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn label_file_round_trip(labels in prop::collection::btree_map(0usize..10_000, 0usize..5, 0..40)) {
        let text = labels_csv(&labels);
        prop_assert_eq!(parse_labels(&text, 5, Path::new("l")).unwrap(), labels);
    }

    #[test]
    fn manifest_round_trip(n_rows in 1usize..8, n_cols in 1usize..8, keep in prop::collection::vec(any::<bool>(), 64), classes in prop::collection::vec(prop::option::of(0usize..5), 64)) {
        let mut cells = Vec::new();
        for r in 0..n_rows {
            for c in 0..n_cols {
                let i = r * n_cols + c;
                if keep[i] || cells.is_empty() {
                    cells.push(GridCell { row: r, col: c, feature_index: 100 + i, true_class: classes[i] });
                }
            }
        }
        let grid = SlideGrid::new(n_rows, n_cols, 5, cells).unwrap();
        let back = parse_manifest(&manifest_text(&grid), Path::new("g")).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn model_file_round_trip(seed in 0u64..1000, d in 1usize..6) {
        let models: Vec<ClassModel> = (0..3).map(|c| {
            let p = DMatrix::from_fn(d, d, |i, j| {
                if i == j { 1.0 + ((seed + c as u64) % 7) as f64 } else { 0.1 / (1 + i + j) as f64 }
            });
            ClassModel::new((0..d).map(|i| (i + c) as f64 * 0.3).collect(), p).unwrap()
        }).collect();
        let file = ModelFile::from_models(&models, 12.5, Some(0.1));
        let text = serde_json::to_string(&file).unwrap();
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back.to_models().unwrap(), models);
    }

    #[test]
    fn glasso_output_is_positive_definite(d in 2usize..=16, seed in any::<u64>(), rho in 0.01f64..1.0) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // rank-deficient sample covariance from few shots, like real support sets
        let m = 3 + (seed % 6) as usize;
        let a = DMatrix::<f64>::from_fn(d, m, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let s: DMatrix<f64> = &a * a.transpose() / m as f64;
        let fit = graphical_lasso(&s, &GlassoConfig::with_rho(rho)).unwrap();
        prop_assert!(fit.precision.clone().cholesky().is_some());
        prop_assert!(fit.precision.relative_eq(&fit.precision.transpose(), 0.0, 0.0));
        prop_assert!(kkt_residual(&s, &fit.precision, &fit.covariance, rho) <= 1e-4);
    }

    #[test]
    fn fidelity_is_linear_in_assignments(a in prop::collection::vec(simplex_row(3), 4), b in prop::collection::vec(simplex_row(3), 4), t in 0.0f64..1.0) {
        let (task, features) = tiny_task(3, 4);
        let models: Vec<ClassModel> = (0..3).map(|c| ClassModel::new(vec![c as f64, 1.0], DMatrix::from_diagonal_element(2, 2, 1.0 + c as f64)).unwrap()).collect();
        let w: Vec<Vec<f64>> = models.iter().map(|m| m.centroid.clone()).collect();
        let mix: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| t * p + (1.0 - t) * q).collect()).collect();
        let f = |rows: &[Vec<f64>]| data_fidelity(&with_rows(&task, rows), &w, &models, &features, &task).unwrap();
        let lhs = f(&mix);
        let rhs = t * f(&a) + (1.0 - t) * f(&b);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn barrier_is_strictly_convex(a in simplex_row(4), b in simplex_row(4), t in 0.05f64..0.95) {
        let (task, _) = tiny_task(4, 1);
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        prop_assume!(dist > 1e-3);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let g = |r: &Vec<f64>| entropic_barrier(&with_rows(&task, std::slice::from_ref(r)));
        prop_assert!(g(&mix) < t * g(&a) + (1.0 - t) * g(&b));
    }

    #[test]
    fn partition_entropy_ignores_class_order(rows in prop::collection::vec(simplex_row(5), 1..6), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let (task, _) = tiny_task(5, rows.len());
        let permuted: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect();
        let (h1, _) = partition_entropy(&with_rows(&task, &rows));
        let (h2, _) = partition_entropy(&with_rows(&task, &permuted));
        prop_assert!((h1 - h2).abs() <= 1e-12);
    }

    #[test]
    fn anchors_match_enumeration(extent in 1usize..=20, span_frac in 0.0f64..1.0, stride_frac in 0.0f64..1.0) {
        let span = 1 + ((extent - 1) as f64 * span_frac) as usize;
        let stride = 1 + ((span - 1) as f64 * stride_frac) as usize;
        let got = anchors(extent, span, stride);
        let mut want: Vec<usize> = (0..=extent - span).filter(|a| a % stride == 0).collect();
        if *want.last().unwrap() != extent - span {
            want.push(extent - span);
        }
        prop_assert_eq!(got, want);
    }

    #[test]
    fn solver_iterates_stay_on_the_simplex(seed in 0u64..500, lambda in 0.0f64..200.0) {
        let t = transduct_core::synth::gen_task(&transduct_core::synth::TaskParams {
            classes: transduct_core::synth::ClassParams { n_classes: 4, dim: 3, separation: 2.0, covariance: transduct_core::synth::CovarianceSpec::Diagonal },
            shots: 3,
            queries: 5,
            seed,
        }).unwrap();
        let models = transduct_core::precision::fit_class_models(&t.task, &t.features, &GlassoConfig::default()).unwrap();
        let cfg = SolverConfig { lambda, ..SolverConfig::default() };
        let mut ok = true;
        solve_observed(&t.task, &t.features, &models, &cfg, |_, u| {
            ok &= u.check(&t.task).is_ok() && u.query_rows().all(|r| on_simplex(r, SIMPLEX_TOL));
        }).unwrap();
        prop_assert!(ok);
    }

    #[test]
    fn class_map_csv_round_trip(n_rows in 1usize..6, n_cols in 1usize..6, rows in prop::collection::vec(prop::option::of(simplex_row(3)), 36), cov in prop::collection::vec(1usize..4, 36)) {
        let cells = (0..n_rows * n_cols).map(|i| match &rows[i] {
            Some(p) => MapCell { argmax: Some(transduct_core::argmax(p)), posterior: Some(p.clone()), coverage: cov[i] },
            None => MapCell { posterior: None, argmax: None, coverage: 0 },
        }).collect();
        let map = ClassMap { n_rows, n_cols, n_classes: 3, cells };
        let back = parse_class_map_csv(&class_map_csv(&map), Path::new("c")).unwrap();
        prop_assert_eq!(back.cells.iter().map(|c| c.argmax).collect::<Vec<_>>(), map.cells.iter().map(|c| c.argmax).collect::<Vec<_>>());
        prop_assert_eq!(back, map);
    }

    #[test]
    fn self_target_normalization_is_identity(px in prop::collection::vec(prop::array::uniform3(20u8..235), 4..60)) {
        let img = RgbImage::new(px.len(), 1, px).unwrap();
        let out = normalize(&img, &compute_stats(&img).unwrap()).unwrap();
        for (a, b) in img.pixels.iter().zip(&out.pixels) {
            for c in 0..3 {
                prop_assert!((i16::from(a[c]) - i16::from(b[c])).abs() <= 1);
            }
        }
    }
}

#[test]
fn label_parse_keeps_first_error_line() {
    let e = parse_labels("index,class\n0,1\n0,2\n", 5, Path::new("x.csv")).unwrap_err();
    assert!(e.to_string().starts_with("x.csv:3:"), "{e}");
}
