use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use transduct_core::eval::{self, BenchOptions, TaskSource};
use transduct_core::io::{self, ModelFile};
use transduct_core::precision::{fit_class_models, GlassoConfig};
use transduct_core::solver::{solve, PrecisionMode, SolverConfig, DEFAULT_LAMBDA};
use transduct_core::stain;
use transduct_core::synth::{self, ClassParams, CovarianceSpec, SlideParams, TaskParams, TABLE1_PRIORS};
use transduct_core::windowing::{self, SupportBlock, WindowSpec, DEFAULT_SPAN};
use transduct_core::{ppm, FeatureMatrix, FewShotTask};

use crate::args::*;
use crate::CliError;

const DEFAULT_METHODS: &str =
    "paddle-cov:tuned,paddle-cov:0,paddle:0,simpleshot:un,simpleshot:l2n,simpleshot:cl2n";

fn covariance(value: Option<String>) -> Result<CovarianceSpec, CliError> {
    value.map_or(Ok(CovarianceSpec::Spd), |v| parse_value(&v, "covariance"))
}

fn priors(value: Option<String>) -> Result<Vec<f64>, CliError> {
    value.map_or(Ok(TABLE1_PRIORS.to_vec()), |v| parse_list(&v, "priors"))
}

fn precision_mode(value: Option<String>) -> Result<PrecisionMode, CliError> {
    value.map_or(Ok(PrecisionMode::Glasso), |v| parse_value(&v, "precision"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn synth_task(a: SynthTaskArgs, seed: u64) -> Result<(), CliError> {
    let params = TaskParams {
        classes: ClassParams {
            n_classes: a.classes.unwrap_or(5),
            dim: a.dim.unwrap_or(32),
            separation: a.separation.unwrap_or(3.0),
            covariance: covariance(a.covariance)?,
        },
        shots: a.shots.unwrap_or(5),
        queries: a.queries.unwrap_or(20),
        seed,
    };
    let out_features = required(a.out_features, "out-features")?;
    let out_labels = required(a.out_labels, "out-labels")?;
    let t = synth::gen_task(&params)?;
    io::write_features(&t.features, &out_features)?;
    let support: BTreeMap<usize, usize> = t.task.support.iter().copied().zip(t.task.support_labels.iter().copied()).collect();
    io::write_labels(&support, &out_labels)?;
    if let Some(path) = a.out_truth {
        let truth: BTreeMap<usize, usize> = t.task.query.iter().copied().zip(t.truth.iter().copied()).collect();
        io::write_labels(&truth, path)?;
    }
    Ok(())
}

pub fn synth_slide(a: SynthSlideArgs, seed: u64) -> Result<(), CliError> {
    let params = SlideParams {
        n_rows: a.rows.unwrap_or(40),
        n_cols: a.cols.unwrap_or(40),
        block: a.block.unwrap_or(6),
        priors: priors(a.priors)?,
        shots: a.shots.unwrap_or(10),
        dim: a.dim.unwrap_or(32),
        separation: a.separation.unwrap_or(3.0),
        covariance: covariance(a.covariance)?,
        seed,
    };
    let out_features = required(a.out_features, "out-features")?;
    let out_manifest = required(a.out_manifest, "out-manifest")?;
    let out_labels = required(a.out_labels, "out-labels")?;
    let s = synth::gen_slide(&params)?;
    io::write_features(&s.features, &out_features)?;
    io::write_manifest(&s.grid, &out_manifest)?;
    let support: BTreeMap<usize, usize> = s.support.indices.iter().copied().zip(s.support.labels.iter().copied()).collect();
    io::write_labels(&support, &out_labels)?;
    Ok(())
}

fn support_of(labels: &BTreeMap<usize, usize>) -> (Vec<usize>, Vec<usize>) {
    (labels.keys().copied().collect(), labels.values().copied().collect())
}

pub fn fit(a: FitArgs) -> Result<(), CliError> {
    let features = io::read_features(required(a.features, "features")?)?;
    let k = a.classes.unwrap_or(5);
    let labels = io::read_labels(required(a.labels, "labels")?, k)?;
    let out = required(a.out, "out")?;
    let mut cfg = GlassoConfig {
        rho: a.rho,
        ..GlassoConfig::default()
    };
    if let Some(s) = a.max_sweeps {
        cfg.max_sweeps = s;
    }
    if let Some(t) = a.kkt_tol {
        cfg.kkt_tol = t;
    }
    let lambda = a.lambda.unwrap_or(DEFAULT_LAMBDA);
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(CliError::Usage("--lambda must be >= 0".into()));
    }
    let (support, support_labels) = support_of(&labels);
    let task = FewShotTask::new(support, support_labels, Vec::new(), k);
    let models = fit_class_models(&task, &features, &cfg)?;
    io::write_model(&ModelFile::from_models(&models, lambda, a.rho), out)?;
    Ok(())
}

struct Loaded {
    features: FeatureMatrix,
    model: ModelFile,
    labels: BTreeMap<usize, usize>,
}

fn load(model: Option<std::path::PathBuf>, features: Option<std::path::PathBuf>, labels: Option<std::path::PathBuf>) -> Result<Loaded, CliError> {
    let model = io::read_model(required(model, "model")?)?;
    let features = io::read_features(required(features, "features")?)?;
    if features.dim() != model.dim {
        return Err(CliError::Data(format!(
            "features have dimension {} but the model expects {}",
            features.dim(),
            model.dim
        )));
    }
    let labels = io::read_labels(required(labels, "labels")?, model.n_classes)?;
    Ok(Loaded { features, model, labels })
}

fn solver_config(
    lambda: Option<f64>,
    model: &ModelFile,
    precision: Option<String>,
    max_iters: Option<usize>,
    rel_tol: Option<f64>,
) -> Result<SolverConfig, CliError> {
    let mut cfg = SolverConfig {
        lambda: lambda.unwrap_or(model.lambda),
        precision_mode: precision_mode(precision)?,
        ..SolverConfig::default()
    };
    if let Some(m) = max_iters {
        cfg.max_iters = m;
    }
    if let Some(t) = rel_tol {
        cfg.rel_tol = t;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn classify(a: ClassifyArgs) -> Result<(), CliError> {
    let out = required(a.out, "out")?;
    let l = load(a.model, a.features, a.labels)?;
    let cfg = solver_config(a.lambda, &l.model, a.precision, a.max_iters, a.rel_tol)?;
    let models = l.model.to_models()?;
    let (support, support_labels) = support_of(&l.labels);
    let query: Vec<usize> = (0..l.features.n_samples()).filter(|i| !l.labels.contains_key(i)).collect();
    let task = FewShotTask::new(support, support_labels, query, l.model.n_classes);
    let result = solve(&task, &l.features, &models, &cfg)?;
    if !result.converged {
        log::warn!("solver stopped after {} iterations without converging", result.iterations);
    }
    write_text(&out, &io::posterior_csv(&task.query, &result.query_posteriors(), task.n_classes))
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let out_csv = required(a.out_csv, "out-csv")?;
    let out_ppm = required(a.out_ppm, "out-ppm")?;
    let grid = io::read_manifest(required(a.manifest, "manifest")?)?;
    let l = load(a.model, a.features, a.labels)?;
    if grid.n_classes() != l.model.n_classes {
        return Err(CliError::Data(format!(
            "manifest has {} classes but the model has {}",
            grid.n_classes(),
            l.model.n_classes
        )));
    }
    let cfg = solver_config(a.lambda, &l.model, a.precision, a.max_iters, a.rel_tol)?;
    let spec = WindowSpec::new(a.span.unwrap_or(DEFAULT_SPAN), a.stride.unwrap_or(1))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let models = l.model.to_models()?;
    let (indices, labels) = support_of(&l.labels);
    let support = SupportBlock {
        indices,
        labels,
        n_classes: l.model.n_classes,
    };
    let out = windowing::sweep(&grid, spec, &support, &l.features, |task| {
        Ok(solve(task, &l.features, &models, &cfg)?.query_posteriors())
    })?;
    windowing::render_class_map(&out.map, &out_csv, &out_ppm)?;
    Ok(())
}

pub fn bench(a: BenchArgs, seed: u64) -> Result<(), CliError> {
    let out = required(a.out, "out")?;
    let methods = eval::parse_methods(a.methods.as_deref().unwrap_or(DEFAULT_METHODS))
        .map_err(|e| CliError::Usage(format!("--methods: {e}")))?;
    let dim = a.dim.unwrap_or(32);
    let separation = a.separation.unwrap_or(3.0);
    let cov = covariance(a.covariance)?;
    let source = match a.source.as_deref().unwrap_or("slides") {
        "tasks" => TaskSource::Tasks(TaskParams {
            classes: ClassParams {
                n_classes: a.classes.unwrap_or(5),
                dim,
                separation,
                covariance: cov,
            },
            shots: a.shots.unwrap_or(5),
            queries: a.queries.unwrap_or(20),
            seed: 0,
        }),
        "slides" => TaskSource::Slides {
            params: SlideParams {
                n_rows: a.rows.unwrap_or(20),
                n_cols: a.cols.unwrap_or(20),
                block: a.block.unwrap_or(6),
                priors: priors(a.priors)?,
                shots: a.shots.unwrap_or(10),
                dim,
                separation,
                covariance: cov,
                seed: 0,
            },
            window: WindowSpec::new(a.span.unwrap_or(DEFAULT_SPAN), a.stride.unwrap_or(3))
                .map_err(|e| CliError::Usage(e.to_string()))?,
        },
        other => return Err(CliError::Usage(format!("--source must be tasks or slides, got {other:?}"))),
    };
    let mut opts = BenchOptions::default();
    opts.glasso.rho = a.rho;
    if let Some(m) = a.max_iters {
        opts.solver.max_iters = m;
    }
    if let Some(g) = a.lambda_grid {
        opts.lambda_grid = parse_list(&g, "lambda-grid")?;
    }
    if let Some(t) = a.tuning_tasks {
        opts.tuning_tasks = t;
    }
    let rows = eval::benchmark_run(&methods, &source, a.reps.unwrap_or(100), seed, &opts)?;
    for r in &rows {
        if let Some(l) = r.tuned_lambda {
            log::info!("{} used lambda {l}", r.method);
        }
        if r.n_failed > 0 {
            log::warn!("{} failed on {} tasks", r.method, r.n_failed);
        }
    }
    write_text(&out, &eval::results_csv(&rows))
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let pred_path = required(a.predictions, "predictions")?;
    let k = a.classes.unwrap_or(5);
    let text = std::fs::read_to_string(&pred_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", pred_path.display())))?;
    let pred = io::parse_posterior_predictions(&text, &pred_path)?;
    let truth = io::read_labels(required(a.truth, "truth")?, k)?;
    let (p, t): (Vec<Option<usize>>, Vec<usize>) = truth.iter().map(|(i, &c)| (pred.get(i).copied(), c)).unzip();
    let cm = eval::confusion_matrix(&p, &t, k)?;

    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "accuracy,{}", cm.accuracy());
    let _ = writeln!(out, "macro_f1,{}", cm.macro_f1());
    let _ = writeln!(out, "weighted_f1,{}", cm.weighted_f1());
    let _ = writeln!(out, "n_scored,{}", cm.total());
    let _ = writeln!(out, "n_unlabeled,{}", cm.unlabeled);
    for (c, f1) in cm.per_class_f1().iter().enumerate() {
        if let Some(f1) = f1 {
            let _ = writeln!(out, "f1_class_{c},{f1}");
        }
    }
    match a.out {
        Some(path) => write_text(&path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

pub fn stain_normalize(a: StainArgs) -> Result<(), CliError> {
    let input = ppm::read_ppm(required(a.input, "input")?)?;
    let out = required(a.out, "out")?;
    let target = match (a.target_stats, a.target_image) {
        (Some(p), None) => stain::read_stats(p)?,
        (None, Some(p)) => stain::compute_stats(&ppm::read_ppm(p)?)?,
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --target-stats or --target-image".into(),
            ))
        }
    };
    if let Some(p) = a.stats_out {
        stain::write_stats(&target, p)?;
    }
    ppm::write_ppm(&stain::normalize(&input, &target)?, out)?;
    Ok(())
}
