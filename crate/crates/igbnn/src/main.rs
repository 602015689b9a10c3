use clap::{Parser, Subcommand};
use igbnn::commands::{self, CliError, TrainOverrides};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "igbnn",
    about = "Robust Bayesian ensembles: adversarial SVGD training with an information-gain constraint",
    version
)]
struct Cli {
    /// Worker threads for attack/evaluation parallelism. 1 is the
    /// determinism-guaranteed setting; larger counts produce identical
    /// results through order-preserving reductions.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ensemble from a config file into an output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Allow writing into a non-empty output directory.
        #[arg(long, default_value_t = false)]
        overwrite: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// ig_bnn | svgd_only | plain_adv | invert_ig
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        particles: Option<usize>,
        /// Information-gain penalty weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Repulsive-force weight.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        step_size: Option<f64>,
        /// Training-time attack budget.
        #[arg(long)]
        eps_max: Option<f64>,
        /// Training-time attack iterations.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Robust accuracy over a budget grid, as epsilon,accuracy CSV.
    Curve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// "start:end:step" or comma-separated budgets; defaults to the
        /// config grid.
        #[arg(long)]
        eps_list: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Attack each budget independently instead of the monotone
        /// nested-ball evaluation.
        #[arg(long, default_value_t = false)]
        independent: bool,
    },
    /// Attack the evaluation split at one budget; optionally dump the
    /// adversarial dataset with a provenance sidecar.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Per-particle transfer matrix CSV.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Risks, gap, bound and information-gain means as one JSON record.
    Riskgap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient verification; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Cases per operation.
        #[arg(long, default_value_t = 8)]
        cases: usize,
        /// Deliberately corrupt one op's gradient (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Generate a dataset file (IGDS binary, or CSV with --csv).
    GenData {
        /// two_moons | gaussian_blobs
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        spread: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        csv: bool,
    },
}

/// "start:end:step" (inclusive end within tolerance) or comma-separated
/// values.
fn parse_eps_list(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = |msg: String| CliError::Config(format!("bad --eps-list: {msg}"));
    let values: Vec<f64> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:end:step".into()));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
        let (start, end, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        if step <= 0.0 {
            return Err(bad(format!("step must be positive, got {step}")));
        }
        let mut out = Vec::new();
        let mut k = 0u64;
        loop {
            let v = start + k as f64 * step;
            if v > end + 1e-12 {
                break;
            }
            out.push(v);
            k += 1;
        }
        out
    } else {
        text.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    if values.is_empty() {
        return Err(bad("empty grid".into()));
    }
    if values.windows(2).any(|w| w[0] > w[1]) {
        return Err(bad("budgets must be ascending".into()));
    }
    Ok(values)
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;

    match cli.command {
        Command::Train {
            config,
            out,
            overwrite,
            seed,
            epochs,
            mode,
            particles,
            lambda,
            gamma,
            step_size,
            eps_max,
            steps,
            eval_every,
        } => {
            let overrides = TrainOverrides {
                seed,
                epochs,
                mode,
                particles,
                lambda,
                gamma,
                step_size,
                eps_max,
                steps,
                eval_every,
            };
            commands::run_train(&config, &out, overwrite, &overrides)
        }
        Command::Curve {
            checkpoint,
            config,
            eps_list,
            out,
            independent,
        } => {
            let grid = eps_list.as_deref().map(parse_eps_list).transpose()?;
            commands::run_curve(&checkpoint, &config, grid, out.as_deref(), independent)
        }
        Command::Attack {
            checkpoint,
            config,
            eps,
            dump,
        } => commands::run_attack(&checkpoint, &config, eps, dump.as_deref()),
        Command::Transfer {
            checkpoint,
            config,
            eps,
            out,
        } => commands::run_transfer(&checkpoint, &config, eps, out.as_deref()),
        Command::Riskgap {
            checkpoint,
            config,
            eps,
            out,
        } => commands::run_riskgap(&checkpoint, &config, eps, out.as_deref()),
        Command::Gradcheck {
            seed,
            cases,
            inject_fault,
        } => commands::run_gradcheck(seed, cases, inject_fault.as_deref()),
        Command::GenData {
            kind,
            count,
            noise,
            classes,
            spread,
            seed,
            out,
            csv,
        } => commands::run_gen_data(&kind, count, noise, classes, spread, seed, &out, csv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.kind(),
                "message": e.message(),
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code())
        }
    }
}
