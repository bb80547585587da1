use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kahler_lab::experiment::{self, ExperimentConfig, Outcome};
use kahler_lab::{LabError, Polytope};

#[derive(Parser, Debug)]
#[command(name = "kahler-lab", version, about = "Entropy, invariants and flow experiments on toric polytopes")]
struct Cli {
    /// Experiment configuration (TOML). Defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `perturbation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run independent continuity runs one after another. Reductions are
    /// always sequential, so results do not depend on this flag.
    #[arg(long, global = true)]
    deterministic_reduce: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extremal field, N_X and the bound on sup λ.
    Invariants {
        /// `catalog:<name>` or a polytope file; overrides the config.
        polytope: Option<String>,
    },
    /// Runs the flow and writes trace.csv, trace.json and the final snapshot.
    Flow,
    /// λ of a snapshot document, or of the configured starting metric.
    Entropy { snapshot: Option<PathBuf> },
    /// Backward heat flow from t0 on a trace written by `flow`.
    Backward {
        trace_dir: PathBuf,
        #[arg(long)]
        t0: Option<f64>,
    },
    /// J of the configured perturbation at the reference metric.
    Jfunc,
    /// Flow from the soliton plus s·φ for each configured s.
    Continuity,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Invariants { .. } => "invariants",
            Command::Flow => "flow",
            Command::Entropy { .. } => "entropy",
            Command::Backward { .. } => "backward",
            Command::Jfunc => "jfunc",
            Command::Continuity => "continuity",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, LabError> {
    let mut config = match (&cli.config, &cli.command) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Command::Invariants { polytope: Some(p) }) => {
            ExperimentConfig::defaults(p, Polytope::load(p)?.dim)
        }
        (None, _) => ExperimentConfig::defaults("catalog:cp1", 1),
    };
    if let Command::Invariants { polytope: Some(p) } = &cli.command {
        config.polytope = p.clone();
    }
    if let Some(seed) = cli.seed {
        config.perturbation.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli, config: &ExperimentConfig) -> Result<Outcome, LabError> {
    let out = config.output_dir.clone();
    experiment::with_manifest(cli.command.name(), config, &out, || match &cli.command {
        Command::Invariants { .. } => experiment::run_invariants(config, &out),
        Command::Flow => experiment::run_flow(config, &out),
        Command::Entropy { snapshot } => experiment::run_entropy(config, snapshot.as_deref(), &out),
        Command::Backward { trace_dir, t0 } => experiment::run_backward(config, trace_dir, *t0, &out),
        Command::Jfunc => experiment::run_jfunc(config, &out),
        Command::Continuity => experiment::run_continuity(config, cli.deterministic_reduce, &out),
    })
}

fn fail(command: &str, e: &LabError) -> ExitCode {
    let code = if e.is_validation() { 2 } else { 3 };
    let message = e.to_string().replace(['\n', '\r'], " ");
    eprintln!("error command={command} code={code} kind={} message={message:?}", e.kind());
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return fail("parse", &LabError::Invalid(e.kind().to_string()));
        }
    };
    let name = cli.command.name();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(name, &e),
    };
    match run(&cli, &config) {
        Ok(outcome) => {
            println!(
                "ok command={name} config_hash={} out={} {}",
                config.hash(),
                config.output_dir.display(),
                outcome.summary
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(name, &e),
    }
}
