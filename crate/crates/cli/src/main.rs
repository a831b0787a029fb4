use std::fmt;
use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;

use args::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<transduct_core::Error> for CliError {
    fn from(e: transduct_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => args::read_config(path)?,
        None => args::ConfigFile::default(),
    };
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let threads = cli.threads.or(config.threads);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker threads: {e}")))?;

    pool.install(|| match cli.command {
        Command::SynthTask(a) => commands::synth_task(a.or(config.synth_task), seed),
        Command::SynthSlide(a) => commands::synth_slide(a.or(config.synth_slide), seed),
        Command::Fit(a) => commands::fit(a.or(config.fit)),
        Command::Classify(a) => commands::classify(a.or(config.classify)),
        Command::Sweep(a) => commands::sweep(a.or(config.sweep)),
        Command::Bench(a) => commands::bench(a.or(config.bench), seed),
        Command::Eval(a) => commands::eval(a.or(config.eval)),
        Command::StainNormalize(a) => commands::stain_normalize(a.or(config.stain_normalize)),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
