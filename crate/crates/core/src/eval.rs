//! Classification metrics and the method-comparison benchmark.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines::{simpleshot, SimpleShotVariant};
use crate::error::{Error, Result};
use crate::precision::{fit_class_models, GlassoConfig};
use crate::solver::{solve, PrecisionMode, SolverConfig};
use crate::synth::{gen_slide, gen_task, SlideParams, TaskParams};
use crate::types::{ClassModel, FeatureMatrix, FewShotTask};
use crate::windowing::{one_hot_rows, sweep, ClassMap, SlideGrid, SupportBlock, WindowSpec};

/// K×K counts indexed `[truth][prediction]`, plus samples left unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
    pub unlabeled: usize,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    /// Number of scored (labeled) samples.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.n_classes).map(|k| self.get(k, k)).sum()
    }

    fn truth_count(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(k, p)).sum()
    }

    fn pred_count(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, k)).sum()
    }

    /// Per-class F1, `None` for classes absent from both truth and predictions.
    pub fn per_class_f1(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|k| {
                let tp = self.get(k, k) as f64;
                let t = self.truth_count(k) as f64;
                let p = self.pred_count(k) as f64;
                if t + p == 0.0 {
                    None
                } else {
                    // 2PR/(P+R) written without the 0/0 cases
                    Some(2.0 * tp / (t + p))
                }
            })
            .collect()
    }

    /// trace / total; 0 when nothing was scored.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Unweighted mean of per-class F1 over classes present in truth or predictions.
    pub fn macro_f1(&self) -> f64 {
        let f1: Vec<f64> = self.per_class_f1().into_iter().flatten().collect();
        if f1.is_empty() {
            0.0
        } else {
            f1.iter().sum::<f64>() / f1.len() as f64
        }
    }

    /// Per-class F1 weighted by truth support.
    pub fn weighted_f1(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.per_class_f1()
            .iter()
            .enumerate()
            .map(|(k, f)| f.unwrap_or(0.0) * self.truth_count(k) as f64)
            .sum::<f64>()
            / total as f64
    }
}

/// Builds the confusion matrix; `None` predictions are counted as unlabeled.
pub fn confusion_matrix(pred: &[Option<usize>], truth: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no samples to score".into()));
    }
    let mut cm = ConfusionMatrix {
        n_classes: k,
        counts: vec![0; k * k],
        unlabeled: 0,
    };
    for (p, &t) in pred.iter().zip(truth) {
        if t >= k {
            return Err(Error::InvalidInput(format!("truth label {t} out of range")));
        }
        match p {
            None => cm.unlabeled += 1,
            Some(p) if *p >= k => {
                return Err(Error::InvalidInput(format!("predicted label {p} out of range")))
            }
            Some(p) => cm.counts[t * k + p] += 1,
        }
    }
    Ok(cm)
}

pub fn confusion_from_labels(pred: &[usize], truth: &[usize], k: usize) -> Result<ConfusionMatrix> {
    let pred: Vec<Option<usize>> = pred.iter().copied().map(Some).collect();
    confusion_matrix(&pred, truth, k)
}

/// Scores a class map against the true classes recorded in the grid.
pub fn score_class_map(map: &ClassMap, grid: &SlideGrid) -> Result<ConfusionMatrix> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for cell in grid.cells() {
        if let Some(t) = cell.true_class {
            pred.push(map.get(cell.row, cell.col).argmax);
            truth.push(t);
        }
    }
    confusion_matrix(&pred, &truth, grid.n_classes())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    /// Picked from the benchmark's λ grid on held-out tasks.
    Tuned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    SimpleShot(SimpleShotVariant),
    Paddle {
        precision: PrecisionMode,
        lambda: LambdaChoice,
    },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::SimpleShot(v) => write!(f, "simpleshot:{v}"),
            Method::Paddle { precision, lambda } => {
                let family = match precision {
                    PrecisionMode::Glasso => "paddle-cov",
                    PrecisionMode::Identity => "paddle",
                };
                match lambda {
                    LambdaChoice::Fixed(l) => write!(f, "{family}:{l}"),
                    LambdaChoice::Tuned => write!(f, "{family}:tuned"),
                }
            }
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// `simpleshot:{un,l2n,cl2n}`, `paddle-cov:<λ|tuned>` or `paddle:<λ|tuned>`
    /// (the latter with identity precisions).
    fn from_str(s: &str) -> Result<Self> {
        let (family, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidInput(format!("method {s:?} must look like family:argument")))?;
        let lambda = |arg: &str| -> Result<LambdaChoice> {
            if arg == "tuned" {
                return Ok(LambdaChoice::Tuned);
            }
            let l: f64 = arg
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad lambda {arg:?} in method {s:?}")))?;
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidInput(format!("lambda must be >= 0 in {s:?}")));
            }
            Ok(LambdaChoice::Fixed(l))
        };
        match family {
            "simpleshot" => Ok(Method::SimpleShot(arg.parse()?)),
            "paddle-cov" => Ok(Method::Paddle {
                precision: PrecisionMode::Glasso,
                lambda: lambda(arg)?,
            }),
            "paddle" => Ok(Method::Paddle {
                precision: PrecisionMode::Identity,
                lambda: lambda(arg)?,
            }),
            other => Err(Error::InvalidInput(format!("unknown method family {other:?}"))),
        }
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    /// Independent Gaussian tasks; each repetition reseeds the generator.
    Tasks(TaskParams),
    /// Coherent synthetic slides scanned with a sliding window.
    Slides { params: SlideParams, window: WindowSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub glasso: GlassoConfig,
    /// Solver settings; `lambda` and `precision_mode` are overridden per method.
    pub solver: SolverConfig,
    /// Candidates for tuned methods, tried in order; ties keep the earlier one.
    pub lambda_grid: Vec<f64>,
    pub tuning_tasks: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            glasso: GlassoConfig::default(),
            solver: SolverConfig::default(),
            lambda_grid: vec![0.0, 10.0, 50.0, 100.0, 250.0, 500.0, 1250.0, 2500.0],
            tuning_tasks: 50,
        }
    }
}

/// One generated benchmark instance with its fitted models.
pub struct BenchTask {
    pub features: FeatureMatrix,
    pub kind: BenchTaskKind,
    pub models: Vec<ClassModel>,
}

pub enum BenchTaskKind {
    Task { task: FewShotTask, truth: Vec<usize> },
    Slide { grid: SlideGrid, support: SupportBlock, window: WindowSpec },
}

/// Derives the seed of the `index`-th task of a stream.
pub fn task_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TEST_STREAM: u64 = 0;
const TUNING_STREAM: u64 = 1;

pub fn generate_bench_task(source: &TaskSource, seed: u64, glasso: &GlassoConfig) -> Result<BenchTask> {
    match source {
        TaskSource::Tasks(p) => {
            let t = gen_task(&TaskParams { seed, ..p.clone() })?;
            let models = fit_class_models(&t.task, &t.features, glasso)?;
            Ok(BenchTask {
                features: t.features,
                kind: BenchTaskKind::Task {
                    task: t.task,
                    truth: t.truth,
                },
                models,
            })
        }
        TaskSource::Slides { params, window } => {
            let s = gen_slide(&SlideParams { seed, ..params.clone() })?;
            let fit_task = FewShotTask::new(
                s.support.indices.clone(),
                s.support.labels.clone(),
                Vec::new(),
                s.support.n_classes,
            );
            let models = fit_class_models(&fit_task, &s.features, glasso)?;
            Ok(BenchTask {
                features: s.features,
                kind: BenchTaskKind::Slide {
                    grid: s.grid,
                    support: s.support,
                    window: *window,
                },
                models,
            })
        }
    }
}

/// Posterior rows for one task under a resolved method.
fn classify_task(
    method: &Method,
    lambda: f64,
    task: &FewShotTask,
    features: &FeatureMatrix,
    models: &[ClassModel],
    solver: &SolverConfig,
) -> Result<Vec<Vec<f64>>> {
    match method {
        Method::SimpleShot(v) => Ok(one_hot_rows(&simpleshot(task, features, *v)?, task.n_classes)),
        Method::Paddle { precision, .. } => {
            let cfg = SolverConfig {
                lambda,
                precision_mode: *precision,
                ..solver.clone()
            };
            Ok(solve(task, features, models, &cfg)?.query_posteriors())
        }
    }
}

/// Scores `method` (with λ already resolved) on one benchmark task.
pub fn evaluate_on(method: &Method, lambda: f64, bt: &BenchTask, solver: &SolverConfig) -> Result<ConfusionMatrix> {
    match &bt.kind {
        BenchTaskKind::Task { task, truth } => {
            let rows = classify_task(method, lambda, task, &bt.features, &bt.models, solver)?;
            let pred: Vec<usize> = rows.iter().map(|r| crate::types::argmax(r)).collect();
            confusion_from_labels(&pred, truth, task.n_classes)
        }
        BenchTaskKind::Slide { grid, support, window } => {
            let out = sweep(grid, *window, support, &bt.features, |t| {
                classify_task(method, lambda, t, &bt.features, &bt.models, solver)
            })?;
            score_class_map(&out.map, grid)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub mean_accuracy: f64,
    pub stderr_accuracy: f64,
    pub mean_macro_f1: f64,
    pub stderr_macro_f1: f64,
    pub mean_weighted_f1: f64,
    pub n_tasks: usize,
    pub n_failed: usize,
    /// λ actually used when the method was tuned.
    pub tuned_lambda: Option<f64>,
}

/// Mean and standard error (sample standard deviation / √n).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Picks the grid λ with the best mean accuracy on the tuning tasks.
pub fn tune_lambda(
    precision: PrecisionMode,
    tasks: &[BenchTask],
    opts: &BenchOptions,
) -> Result<f64> {
    let method = Method::Paddle {
        precision,
        lambda: LambdaChoice::Tuned,
    };
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &opts.lambda_grid {
        let accs: Vec<f64> = tasks
            .par_iter()
            .map(|bt| evaluate_on(&method, lambda, bt, &opts.solver).map(|cm| cm.accuracy()))
            .collect::<Result<_>>()?;
        let (mean, _) = mean_stderr(&accs);
        log::info!("tuning {precision} lambda {lambda}: accuracy {mean:.4}");
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((lambda, mean));
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::InvalidInput("empty lambda grid".into()))
}

/// Runs every method on the same `reps` generated tasks.
///
/// Tasks are generated from `seed`; tuned methods pick λ on a separate,
/// held-out stream of `opts.tuning_tasks` tasks. A method failing on a task is
/// counted in `n_failed` and that task is left out of its averages.
pub fn benchmark_run(
    methods: &[Method],
    source: &TaskSource,
    reps: usize,
    seed: u64,
    opts: &BenchOptions,
) -> Result<Vec<MethodSummary>> {
    if methods.is_empty() {
        return Err(Error::InvalidInput("benchmark needs at least one method".into()));
    }
    if reps == 0 {
        return Err(Error::InvalidInput("benchmark needs at least one task".into()));
    }
    let generate = |stream: u64, count: usize| -> Result<Vec<BenchTask>> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| generate_bench_task(source, task_seed(seed, stream, i), &opts.glasso))
            .collect()
    };

    let mut tuned = std::collections::BTreeMap::new();
    let needs_tuning: Vec<PrecisionMode> = methods
        .iter()
        .filter_map(|m| match m {
            Method::Paddle {
                precision,
                lambda: LambdaChoice::Tuned,
            } => Some(*precision),
            _ => None,
        })
        .collect();
    if !needs_tuning.is_empty() {
        let tuning = generate(TUNING_STREAM, opts.tuning_tasks.max(1))?;
        for p in needs_tuning {
            if let std::collections::btree_map::Entry::Vacant(slot) = tuned.entry(p.to_string()) {
                let l = tune_lambda(p, &tuning, opts)?;
                log::info!("tuned lambda for {p}: {l}");
                slot.insert(l);
            }
        }
    }

    let tasks = generate(TEST_STREAM, reps)?;
    let resolved: Vec<(Method, f64, Option<f64>)> = methods
        .iter()
        .map(|m| match m {
            Method::SimpleShot(_) => (*m, 0.0, None),
            Method::Paddle { precision, lambda } => match lambda {
                LambdaChoice::Fixed(l) => (*m, *l, None),
                LambdaChoice::Tuned => {
                    let l = tuned[&precision.to_string()];
                    (*m, l, Some(l))
                }
            },
        })
        .collect();

    // per task, per method
    let scores: Vec<Vec<Option<ConfusionMatrix>>> = tasks
        .par_iter()
        .map(|bt| {
            resolved
                .iter()
                .map(|(m, l, _)| match evaluate_on(m, *l, bt, &opts.solver) {
                    Ok(cm) => Some(cm),
                    Err(e) => {
                        log::warn!("{m} failed on a task: {e}");
                        None
                    }
                })
                .collect()
        })
        .collect();

    Ok(resolved
        .iter()
        .enumerate()
        .map(|(j, (m, _, tuned_lambda))| {
            let ok: Vec<&ConfusionMatrix> = scores.iter().filter_map(|row| row[j].as_ref()).collect();
            let acc: Vec<f64> = ok.iter().map(|cm| cm.accuracy()).collect();
            let f1: Vec<f64> = ok.iter().map(|cm| cm.macro_f1()).collect();
            let wf1: Vec<f64> = ok.iter().map(|cm| cm.weighted_f1()).collect();
            let (mean_accuracy, stderr_accuracy) = mean_stderr(&acc);
            let (mean_macro_f1, stderr_macro_f1) = mean_stderr(&f1);
            MethodSummary {
                method: m.to_string(),
                mean_accuracy,
                stderr_accuracy,
                mean_macro_f1,
                stderr_macro_f1,
                mean_weighted_f1: mean_stderr(&wf1).0,
                n_tasks: ok.len(),
                n_failed: tasks.len() - ok.len(),
                tuned_lambda: *tuned_lambda,
            }
        })
        .collect())
}

pub fn results_csv(rows: &[MethodSummary]) -> String {
    let mut out = String::from("method,mean_accuracy,stderr_accuracy,mean_macro_f1,stderr_macro_f1,n_tasks\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method, r.mean_accuracy, r.stderr_accuracy, r.mean_macro_f1, r.stderr_macro_f1, r.n_tasks
        );
    }
    out
}
