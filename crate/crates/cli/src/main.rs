use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use pipetune::bench::{self, AblationKind, ExperimentSpec};
use pipetune::pipeline::synthetic_suite;
use pipetune::{Budget, Error, EtaSchedule, Method, PipelineSpec, PrefixPolicy, RunConfig};

const USAGE_ERROR: u8 = 2;
const RUNTIME_ERROR: u8 = 1;

#[derive(Parser)]
#[command(
    name = "pipetune",
    version,
    about = "Cost-aware Bayesian optimization benchmarks for multi-stage pipelines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run methods × repeats and write traces plus summary.csv.
    Run(RunArgs),
    /// Sweep one setting at its default levels.
    Ablate {
        /// cache_size, prefix_policy, eta or epsilon
        kind: AblationKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Re-aggregate a results directory into summary.csv and curves.csv.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Built-in pipeline: synth3, synth5 or synth10.
    #[arg(long, conflicts_with = "pipeline_file")]
    pipeline: Option<String>,
    /// JSON pipeline definition.
    #[arg(long)]
    pipeline_file: Option<PathBuf>,
    /// Comma-separated methods (eeipu, ei, eips, carbo). Defaults to all for
    /// `run` and eeipu for `ablate`.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `auto` (five times the warmup spend) or an amount in the pipeline's
    /// cost units.
    #[arg(long, default_value = "auto", value_parser = parse_budget)]
    budget: Budget,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    cache_size: usize,
    #[arg(long, default_value = "all")]
    prefix_policy: PrefixPolicy,
    /// budget, constant, exp_decay or exp_decay(<rate>)
    #[arg(long, default_value = "budget")]
    eta_schedule: EtaSchedule,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Candidates drawn per restart.
    #[arg(long, default_value_t = 512)]
    raw_samples: usize,
    /// Monte Carlo cost draws per candidate.
    #[arg(long, default_value_t = 1000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Parallel independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn parse_budget(s: &str) -> Result<Budget, String> {
    if s == "auto" {
        return Ok(Budget::Auto);
    }
    match s.parse::<f64>() {
        Ok(b) if b > 0.0 && b.is_finite() => Ok(Budget::Fixed(b)),
        _ => Err(format!("expected `auto` or a positive number, got `{s}`")),
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl RunArgs {
    fn experiment(self, default_methods: &[Method]) -> Result<ExperimentSpec, Failure> {
        let pipeline = match (&self.pipeline, &self.pipeline_file) {
            (Some(name), None) => synthetic_suite(name)?,
            (None, Some(path)) => {
                PipelineSpec::load(path).map_err(|e| Failure::Usage(e.to_string()))?
            }
            _ => {
                return Err(Failure::Usage(
                    "one of --pipeline or --pipeline-file is required".into(),
                ))
            }
        };
        let methods = if self.methods.is_empty() {
            default_methods.to_vec()
        } else {
            self.methods
        };
        let config = RunConfig {
            method: methods[0],
            warmup: self.warmup,
            raw_samples: self.raw_samples,
            mc_samples: self.mc_samples,
            restarts: self.restarts,
            cache_size: self.cache_size,
            epsilon: self.epsilon,
            eta_schedule: self.eta_schedule,
            prefix_policy: self.prefix_policy,
            budget: self.budget,
            seed: self.seed,
        };
        let spec = ExperimentSpec {
            pipeline,
            methods,
            repeats: self.repeats,
            base_seed: self.seed,
            config,
            out_dir: self.out,
            cache_root: None,
            jobs: self.jobs,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => {
            let spec = args.experiment(&Method::ALL)?;
            let out = bench::run_experiment(&spec)?;
            print!("{}", bench::format_summary(&out.summary));
            failures(
                out.failures()
                    .map(|r| (&r.label, r.seed, r.error.as_deref())),
            )
        }
        Command::Ablate { kind, run } => {
            let spec = run.experiment(&[Method::Eeipu])?;
            let out = bench::run_ablation(kind, &spec)?;
            for (level, rows) in &out.levels {
                println!("== {kind} = {level}");
                print!("{}", bench::format_summary(rows));
            }
            let s = out.sensitivity;
            println!(
                "spread of mean best {:.4}, pooled s.e. {:.4}: {}",
                s.spread,
                s.pooled_se,
                if s.insensitive() {
                    "insensitive"
                } else {
                    "sensitive"
                }
            );
            failures(
                out.runs
                    .iter()
                    .filter(|r| r.error.is_some())
                    .map(|r| (&r.label, r.seed, r.error.as_deref())),
            )
        }
        Command::Report { dir } => {
            let rows = bench::report(&dir)?;
            print!("{}", bench::format_summary(&rows));
            Ok(())
        }
    }
}

fn failures<'a>(
    it: impl Iterator<Item = (&'a String, u64, Option<&'a str>)>,
) -> Result<(), Failure> {
    let msgs: Vec<String> = it
        .map(|(label, seed, e)| format!("{label} seed {seed}: {}", e.unwrap_or("failed")))
        .collect();
    if msgs.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(msgs.join("\n")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let _ = Cli::command().write_help(&mut std::io::stderr());
            ExitCode::from(USAGE_ERROR)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(RUNTIME_ERROR)
        }
    }
}
