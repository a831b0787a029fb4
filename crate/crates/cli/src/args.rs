//! Command-line flags and the matching TOML config file.
//!
//! Every subcommand flag is optional at parse time so values from `--config`
//! can fill the gaps; flags given on the command line win.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::CliError;

/// Declares an options struct whose fields are all `Option`s, plus a
/// field-by-field `or` used to layer the config file under the flags.
macro_rules! layered {
    (
        $(#[$m:meta])*
        pub struct $name:ident {
            $( $(#[$fm:meta])* pub $f:ident : Option<$t:ty>, )*
        }
    ) => {
        $(#[$m])*
        #[derive(Args, Deserialize, Debug, Clone, Default)]
        #[serde(deny_unknown_fields, rename_all = "kebab-case")]
        pub struct $name {
            $( $(#[$fm])* pub $f: Option<$t>, )*
        }

        impl $name {
            pub fn or(self, fallback: Self) -> Self {
                Self { $( $f: self.$f.or(fallback.$f), )* }
            }
        }
    };
}

#[derive(Parser, Debug)]
#[command(name = "transduct", version, about = "Transductive few-shot classification of slide feature grids")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for the parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a Gaussian few-shot task.
    SynthTask(SynthTaskArgs),
    /// Generate a synthetic slide of class blocks.
    SynthSlide(SynthSlideArgs),
    /// Fit per-class centroids and precisions from labeled features.
    Fit(FitArgs),
    /// Classify the unlabeled rows of a feature file.
    Classify(ClassifyArgs),
    /// Slide a window over a slide grid and write the fused class map.
    Sweep(SweepArgs),
    /// Compare methods on generated tasks or slides.
    Bench(BenchArgs),
    /// Score predictions against true labels.
    Eval(EvalArgs),
    /// Reinhard colour normalization of a PPM image.
    StainNormalize(StainArgs),
}

layered! {
    pub struct SynthTaskArgs {
        #[arg(long)]
        pub classes: Option<usize>,
        #[arg(long)]
        pub dim: Option<usize>,
        /// Support samples per class.
        #[arg(long)]
        pub shots: Option<usize>,
        /// Query samples per class.
        #[arg(long)]
        pub queries: Option<usize>,
        #[arg(long)]
        pub separation: Option<f64>,
        /// identity, diagonal or spd
        #[arg(long)]
        pub covariance: Option<String>,
        #[arg(long)]
        pub out_features: Option<PathBuf>,
        /// Support labels.
        #[arg(long)]
        pub out_labels: Option<PathBuf>,
        /// True classes of the query rows.
        #[arg(long)]
        pub out_truth: Option<PathBuf>,
    }
}

layered! {
    pub struct SynthSlideArgs {
        #[arg(long)]
        pub rows: Option<usize>,
        #[arg(long)]
        pub cols: Option<usize>,
        #[arg(long)]
        pub block: Option<usize>,
        /// Comma-separated class priors.
        #[arg(long)]
        pub priors: Option<String>,
        #[arg(long)]
        pub shots: Option<usize>,
        #[arg(long)]
        pub dim: Option<usize>,
        #[arg(long)]
        pub separation: Option<f64>,
        #[arg(long)]
        pub covariance: Option<String>,
        #[arg(long)]
        pub out_features: Option<PathBuf>,
        #[arg(long)]
        pub out_manifest: Option<PathBuf>,
        #[arg(long)]
        pub out_labels: Option<PathBuf>,
    }
}

layered! {
    pub struct FitArgs {
        #[arg(long)]
        pub features: Option<PathBuf>,
        #[arg(long)]
        pub labels: Option<PathBuf>,
        #[arg(long)]
        pub classes: Option<usize>,
        /// Graphical Lasso penalty; defaults to a tenth of the mean variance.
        #[arg(long)]
        pub rho: Option<f64>,
        /// λ recorded in the model as the default for classify and sweep.
        #[arg(long)]
        pub lambda: Option<f64>,
        #[arg(long)]
        pub max_sweeps: Option<usize>,
        #[arg(long)]
        pub kkt_tol: Option<f64>,
        #[arg(long)]
        pub out: Option<PathBuf>,
    }
}

layered! {
    pub struct ClassifyArgs {
        #[arg(long)]
        pub model: Option<PathBuf>,
        #[arg(long)]
        pub features: Option<PathBuf>,
        /// Support labels; every other row is a query.
        #[arg(long)]
        pub labels: Option<PathBuf>,
        #[arg(long)]
        pub lambda: Option<f64>,
        #[arg(long)]
        pub precision: Option<String>,
        #[arg(long)]
        pub max_iters: Option<usize>,
        #[arg(long)]
        pub rel_tol: Option<f64>,
        #[arg(long)]
        pub out: Option<PathBuf>,
    }
}

layered! {
    pub struct SweepArgs {
        #[arg(long)]
        pub manifest: Option<PathBuf>,
        #[arg(long)]
        pub features: Option<PathBuf>,
        #[arg(long)]
        pub model: Option<PathBuf>,
        /// Support labels (rows outside the grid).
        #[arg(long)]
        pub labels: Option<PathBuf>,
        #[arg(long)]
        pub span: Option<usize>,
        #[arg(long)]
        pub stride: Option<usize>,
        #[arg(long)]
        pub lambda: Option<f64>,
        #[arg(long)]
        pub precision: Option<String>,
        #[arg(long)]
        pub max_iters: Option<usize>,
        #[arg(long)]
        pub rel_tol: Option<f64>,
        #[arg(long)]
        pub out_csv: Option<PathBuf>,
        #[arg(long)]
        pub out_ppm: Option<PathBuf>,
    }
}

layered! {
    pub struct BenchArgs {
        /// Comma-separated, e.g. paddle-cov:tuned,paddle:0,simpleshot:cl2n
        #[arg(long)]
        pub methods: Option<String>,
        /// tasks or slides
        #[arg(long)]
        pub source: Option<String>,
        #[arg(long)]
        pub reps: Option<usize>,
        #[arg(long)]
        pub tuning_tasks: Option<usize>,
        /// Comma-separated λ candidates for tuned methods.
        #[arg(long)]
        pub lambda_grid: Option<String>,
        #[arg(long)]
        pub classes: Option<usize>,
        #[arg(long)]
        pub dim: Option<usize>,
        #[arg(long)]
        pub shots: Option<usize>,
        #[arg(long)]
        pub queries: Option<usize>,
        #[arg(long)]
        pub separation: Option<f64>,
        #[arg(long)]
        pub covariance: Option<String>,
        #[arg(long)]
        pub rows: Option<usize>,
        #[arg(long)]
        pub cols: Option<usize>,
        #[arg(long)]
        pub block: Option<usize>,
        #[arg(long)]
        pub priors: Option<String>,
        #[arg(long)]
        pub span: Option<usize>,
        #[arg(long)]
        pub stride: Option<usize>,
        #[arg(long)]
        pub rho: Option<f64>,
        #[arg(long)]
        pub max_iters: Option<usize>,
        #[arg(long)]
        pub out: Option<PathBuf>,
    }
}

layered! {
    pub struct EvalArgs {
        /// Posterior CSV from classify.
        #[arg(long)]
        pub predictions: Option<PathBuf>,
        /// index,class file of true labels.
        #[arg(long)]
        pub truth: Option<PathBuf>,
        #[arg(long)]
        pub classes: Option<usize>,
        /// Metrics CSV; stdout when absent.
        #[arg(long)]
        pub out: Option<PathBuf>,
    }
}

layered! {
    pub struct StainArgs {
        #[arg(long)]
        pub input: Option<PathBuf>,
        /// JSON file with lαβ mean and std.
        #[arg(long)]
        pub target_stats: Option<PathBuf>,
        /// Image whose statistics are the target.
        #[arg(long)]
        pub target_image: Option<PathBuf>,
        #[arg(long)]
        pub out: Option<PathBuf>,
        /// Also write the target statistics here.
        #[arg(long)]
        pub stats_out: Option<PathBuf>,
    }
}

/// `--config` contents: global keys plus one optional table per subcommand.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub synth_task: SynthTaskArgs,
    #[serde(default)]
    pub synth_slide: SynthSlideArgs,
    #[serde(default)]
    pub fit: FitArgs,
    #[serde(default)]
    pub classify: ClassifyArgs,
    #[serde(default)]
    pub sweep: SweepArgs,
    #[serde(default)]
    pub bench: BenchArgs,
    #[serde(default)]
    pub eval: EvalArgs,
    #[serde(default)]
    pub stain_normalize: StainArgs,
}

pub fn read_config(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))
}

/// Unwraps a required option or reports the missing flag.
pub fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

/// Parses a flag value, reporting a usage error that names the flag.
pub fn parse_value<T: std::str::FromStr>(value: &str, flag: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("--{flag}: {e}")))
}

pub fn parse_list(value: &str, flag: &str) -> Result<Vec<f64>, CliError> {
    value
        .split(',')
        .map(|s| parse_value(s.trim(), flag))
        .collect()
}
