//! `dfm`: data generation, fitting, guided sampling, evaluation and rendering
//! for the 2-D guidance experiments.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4 precondition
//! violation.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfm_guidance::energy2d::Shape;
use dfm_guidance::paths::Init;
use dfm_guidance::{Error, ErrorClass, Result};

use commands::FitKind;
use config::RunConfig;
use run::RunDir;

#[derive(Parser)]
#[command(name = "dfm", version, about = "Guided discrete flow matching on 2-D toy data")]
struct Cli {
    /// TOML run config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for all outputs (default: runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replaces every seed in the config.
    #[arg(long, global = true, env = "DFM_SEED")]
    seed: Option<u64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a 2-D dataset; writes <shape>.csv and <shape>.pmf.csv.
    GenData(DataArgs),
    /// Fit a posterior, a guidance model or a density ratio.
    Fit(FitArgs),
    /// Run a guided sampler; writes samples.csv and calls.json.
    Sample(SampleArgs),
    /// Score samples against the exact guided target; writes metrics.json.
    Eval(EvalArgs),
    /// Arrange sample histograms into a PGM panel grid.
    Render(RenderArgs),
    /// Exact-guidance runs over gamma and init with the figure layout.
    ReproduceFig3(Fig3Args),
    /// Finite-difference checks of every training loss.
    GradCheck,
}

#[derive(Args)]
struct DataArgs {
    /// rings, moons, 8gaussians, 2spirals, checkerboard or swissroll.
    #[arg(long)]
    shape: Option<Shape>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct PathArgs {
    /// mixture or metric.
    #[arg(long = "path")]
    path_kind: Option<String>,
    /// masked or uniform.
    #[arg(long)]
    init: Option<Init>,
}

#[derive(Args)]
struct GuidanceArgs {
    /// none, posterior, rate, predictor:<gamma> or first-order.
    #[arg(long)]
    guidance: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(value_enum)]
    kind: FitKind,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    path: PathArgs,
    #[arg(long)]
    gamma: Option<f64>,
    /// Regularizer weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Target shape for the regularizer or the density ratio.
    #[arg(long)]
    target: Option<Shape>,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Store the exact guidance instead of training.
    #[arg(long)]
    exact: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    path: PathArgs,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    /// Learned guidance model (DFMP).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Learned posterior model (DFMP).
    #[arg(long)]
    posterior: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// samples.csv from `sample`; a calls.json next to it is picked up.
    #[arg(long)]
    samples: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct RenderArgs {
    /// Sample files, one panel each, in row-major order.
    #[arg(long, num_args = 1..)]
    samples: Vec<PathBuf>,
    #[arg(long, default_value_t = 4)]
    columns: usize,
    /// Prepend the exact target for --gamma.
    #[arg(long)]
    with_target: bool,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct Fig3Args {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    /// Comma-separated guidance strengths.
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
}

impl DataArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(s) = self.shape {
            c.data.shape = s;
        }
        if let Some(n) = self.size {
            c.data.size = n;
        }
    }
}

impl PathArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(k) = &self.path_kind {
            c.path.kind = k.clone();
        }
        if let Some(i) = self.init {
            c.path.init = i;
        }
    }
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Fit(_) => "fit",
        Command::Sample(_) => "sample",
        Command::Eval(_) => "eval",
        Command::Render(_) => "render",
        Command::ReproduceFig3(_) => "reproduce-fig3",
        Command::GradCheck => "grad-check",
    }
}

/// Builds the effective config: file, then flags, then the seed override.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::GenData(a) => a.apply(&mut c),
        Command::Fit(a) => {
            a.data.apply(&mut c);
            a.path.apply(&mut c);
            set(&mut c.guidance.gamma, &a.gamma);
            set(&mut c.fit.optimizer.lambda, &a.lambda);
            set(&mut c.fit.optimizer.steps, &a.steps);
            if a.target.is_some() {
                c.fit.target = a.target;
            }
            c.fit.exact |= a.exact;
        }
        Command::Sample(a) => {
            a.data.apply(&mut c);
            a.path.apply(&mut c);
            set(&mut c.guidance.scheme, &a.guidance.guidance);
            set(&mut c.guidance.gamma, &a.guidance.gamma);
            set(&mut c.sample.steps, &a.steps);
            set(&mut c.sample.chains, &a.chains);
            if a.model.is_some() {
                c.guidance.model = a.model.clone();
            }
            if a.posterior.is_some() {
                c.guidance.posterior = a.posterior.clone();
            }
        }
        Command::Eval(a) => {
            a.data.apply(&mut c);
            set(&mut c.guidance.gamma, &a.gamma);
        }
        Command::Render(a) => {
            a.data.apply(&mut c);
            set(&mut c.guidance.gamma, &a.gamma);
        }
        Command::ReproduceFig3(a) => {
            set(&mut c.experiment.steps, &a.steps);
            set(&mut c.experiment.chains, &a.chains);
            set(&mut c.experiment.gammas, &a.gammas);
        }
        Command::GradCheck => {}
    }
    if let Some(seed) = cli.seed {
        c.override_seeds(seed);
    }
    c.guidance.parsed_scheme()?;
    Ok(c)
}

fn execute(cli: &Cli) -> Result<ExitCode> {
    let name = command_name(&cli.command);
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let config = resolve(cli)?;
    run::init_logging(cli.verbose, Some(&out.join("run.log")))?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let mut run = RunDir::create(&out, name)?;
    let mut code = ExitCode::SUCCESS;
    match &cli.command {
        Command::GenData(_) => commands::gen_data(&config, &mut run)?,
        Command::Fit(a) => commands::fit(a.kind, &config, &mut run)?,
        Command::Sample(_) => commands::sample(&config, &mut run)?,
        Command::Eval(a) => commands::eval(&config, &a.samples, &mut run)?,
        Command::Render(a) => commands::render(&config, &a.samples, a.columns, a.with_target, &mut run)?,
        Command::ReproduceFig3(_) => commands::reproduce_fig3(&config, &mut run)?,
        Command::GradCheck => {
            if !commands::grad_check(&config, &mut run)? {
                log::error!("gradient check above tolerance {}", commands::GRAD_TOLERANCE);
                code = ExitCode::from(3);
            }
        }
    }
    run.finish(&config)?;
    log::info!("outputs in {}", out.display());
    Ok(code)
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Numeric => 3,
        ErrorClass::Precondition => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
