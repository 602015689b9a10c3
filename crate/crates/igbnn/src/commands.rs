//! Command implementations behind the CLI binary: each returns a
//! machine-mappable error class so exit codes stay a stable API
//! (0 success, 2 config, 3 numeric, 4 I/O).

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{self, LabeledDataset};
use crate::evaluation;
use crate::gradcheck;
use crate::seeds;
use crate::svgd::ParticleEnsemble;
use crate::training::{self, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Error classes with fixed exit codes; the binary prints one JSON object
/// on stderr per failure.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: the config (or command usage) is invalid.
    Config(String),
    /// Exit 3: a numeric guarantee failed (non-finite loss, gradcheck
    /// failure, bound violation).
    Numeric(String),
    /// Exit 4: filesystem and format problems.
    Io(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Numeric(_) => "numeric",
            CliError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read(io) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Io(io) => CliError::Io(io.to_string()),
            TrainError::CorruptCheckpoint(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        match e {
            data::DataError::Invalid(_) => CliError::Config(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<evaluation::EvalError> for CliError {
    fn from(e: evaluation::EvalError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Config fields the CLI may override; echoed values reflect overrides so
/// replay-from-echo holds.
#[derive(Debug, Default, Clone)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub mode: Option<String>,
    pub particles: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub step_size: Option<f64>,
    pub eps_max: Option<f64>,
    pub steps: Option<usize>,
    pub eval_every: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            config.train.seed = v;
        }
        if let Some(v) = self.epochs {
            config.train.epochs = v;
        }
        if let Some(v) = &self.mode {
            config.train.mode = v.clone();
        }
        if let Some(v) = self.particles {
            config.svgd.particles = v;
        }
        if let Some(v) = self.lambda {
            config.ig.lambda = v;
        }
        if let Some(v) = self.gamma {
            config.svgd.gamma = v;
        }
        if let Some(v) = self.step_size {
            config.svgd.step_size = v;
        }
        if let Some(v) = self.eps_max {
            config.attack.eps_max = v;
        }
        if let Some(v) = self.steps {
            config.attack.steps = v;
        }
        if let Some(v) = self.eval_every {
            config.train.eval_every = v;
        }
    }
}

fn load_config(path: &Path, overrides: Option<&TrainOverrides>) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(o) = overrides {
        o.apply(&mut config);
    }
    config.validate()?;
    Ok(config)
}

/// The evaluation split: test when non-empty, else val, else train.
fn eval_split(config: &ExperimentConfig) -> Result<LabeledDataset, CliError> {
    let (train, val, test) = config.build_datasets()?;
    Ok(if !test.is_empty() {
        test
    } else if !val.is_empty() {
        val
    } else {
        train
    })
}

fn load_ensemble(path: &Path) -> Result<ParticleEnsemble, CliError> {
    Ok(training::read_checkpoint(path)?.ensemble)
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            std::fs::write(path, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    status: &'a str,
    epochs: usize,
    steps: usize,
    config_digest: String,
    checkpoint: String,
    final_record: &'a evaluation::MetricsRecord,
}

/// `train`: run the configured experiment into an output directory
/// containing `config.echo`, `metrics.jsonl` and `checkpoint.igck`.
pub fn run_train(
    config_path: &Path,
    out_dir: &Path,
    overwrite: bool,
    overrides: &TrainOverrides,
) -> Result<(), CliError> {
    let config = load_config(config_path, Some(overrides))?;

    std::fs::create_dir_all(out_dir)?;
    let occupied = std::fs::read_dir(out_dir)?.next().is_some();
    if occupied && !overwrite {
        return Err(CliError::Io(format!(
            "output directory {} is not empty (pass --overwrite to reuse it)",
            out_dir.display()
        )));
    }

    std::fs::write(out_dir.join("config.echo"), config.echo())?;

    let (train_ds, val_ds, test_ds) = config.build_datasets()?;
    let eval_ds = if !val_ds.is_empty() {
        Some(val_ds)
    } else if !test_ds.is_empty() {
        Some(test_ds)
    } else {
        None
    };

    let mut train_config = config.train_config()?;
    train_config.checkpoint_path = Some(out_dir.join("checkpoint.igck"));

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::fs::File::create(&metrics_path)?;
    let mut sink = |record: &evaluation::MetricsRecord| -> std::io::Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(metrics, "{line}")
    };

    let (_, report) = training::train_with_sink(&train_ds, eval_ds.as_ref(), &train_config, &mut sink)?;

    let summary = TrainSummary {
        status: "ok",
        epochs: train_config.epochs,
        steps: report.steps.len(),
        config_digest: format!("{:016x}", config.digest()),
        checkpoint: out_dir.join("checkpoint.igck").display().to_string(),
        final_record: report.records.last().expect("final record always emitted"),
    };
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

/// `curve`: robust accuracy across a budget grid, as `epsilon,accuracy`
/// CSV.
pub fn run_curve(
    checkpoint: &Path,
    config_path: &Path,
    eps_list: Option<Vec<f64>>,
    out: Option<&Path>,
    independent: bool,
) -> Result<(), CliError> {
    let config = load_config(config_path, None)?;
    let ensemble = load_ensemble(checkpoint)?;
    let ds = eval_split(&config)?;
    let grid = eps_list.unwrap_or_else(|| config.eps_grid());
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.train.seed, "curve", 0));
    let curve = evaluation::robustness_curve(
        &ensemble,
        &ds,
        &grid,
        &config.eval_attack_config(),
        config.eval.nested && !independent,
        &mut rng,
    )?;
    let mut csv = String::from("epsilon,accuracy\n");
    for (eps, acc) in curve {
        csv.push_str(&format!("{eps},{acc}\n"));
    }
    write_or_print(out, &csv)
}

#[derive(Serialize)]
struct AttackSummary {
    eps: f64,
    clean_acc: f64,
    robust_acc: f64,
    attack: &'static str,
    config_digest: String,
    dump: Option<String>,
}

/// `attack`: generate adversarials for the evaluation split at one budget,
/// report accuracy, optionally dump the adversarial dataset plus a
/// provenance sidecar.
pub fn run_attack(
    checkpoint: &Path,
    config_path: &Path,
    eps: Option<f64>,
    dump: Option<&Path>,
) -> Result<(), CliError> {
    let config = load_config(config_path, None)?;
    let ensemble = load_ensemble(checkpoint)?;
    let ds = eval_split(&config)?;
    let attack = crate::attacks::AttackConfig {
        eps_max: eps.unwrap_or_else(|| config.eval_eps()),
        ..config.eval_attack_config()
    };
    attack
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.train.seed, "attack-cmd", 0));
    let labels = ds.labels_usize();
    let x = ds.features_tensor();
    let x_adv = evaluation::eot_pgd_dataset(&ensemble, &ds, &attack, &mut rng)?;
    let clean_acc = evaluation::ensemble_accuracy(&ensemble, &x, &labels)?;
    let robust_acc = evaluation::ensemble_accuracy(&ensemble, &x_adv, &labels)?;

    let mut dumped = None;
    if let Some(path) = dump {
        let adv_ds = LabeledDataset::new(
            x_adv.data().to_vec(),
            labels.iter().map(|&l| l as u16).collect(),
            ds.dim(),
            ds.class_count(),
            format!("eot_pgd(eps={},source={})", attack.eps_max, ds.provenance()),
        )?;
        data::save_dataset(&adv_ds, path)?;
        let sidecar = serde_json::json!({
            "attack": "eot_pgd",
            "eps": attack.eps_max,
            "steps": attack.steps,
            "config_digest": format!("{:016x}", config.digest()),
            "source": ds.provenance(),
            "source_digest": format!("{:016x}", ds.digest()),
            "robust_acc": robust_acc,
        });
        std::fs::write(
            path.with_extension("provenance.json"),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )?;
        dumped = Some(path.display().to_string());
    }

    let summary = AttackSummary {
        eps: attack.eps_max,
        clean_acc,
        robust_acc,
        attack: "eot_pgd",
        config_digest: format!("{:016x}", config.digest()),
        dump: dumped,
    };
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

/// `transfer`: per-particle transfer matrix CSV at one budget.
pub fn run_transfer(
    checkpoint: &Path,
    config_path: &Path,
    eps: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let config = load_config(config_path, None)?;
    let ensemble = load_ensemble(checkpoint)?;
    let ds = eval_split(&config)?;
    let attack = crate::attacks::AttackConfig {
        eps_max: eps.unwrap_or_else(|| config.eval_eps()),
        ..config.eval_attack_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.train.seed, "transfer", 0));
    let matrix = evaluation::transfer_matrix(&ensemble, &ds, &attack, &mut rng)?;
    for s in 0..matrix.n() {
        for t in 0..matrix.n() {
            let v = matrix.get(s, t);
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::Numeric(format!(
                    "transfer entry ({s},{t}) = {v} outside [0,1]"
                )));
            }
        }
    }
    write_or_print(out, &matrix.to_csv())
}

#[derive(Serialize)]
struct RiskGapRecord {
    eps: f64,
    risk: f64,
    risk_adv: f64,
    gap: f64,
    bound_rhs: f64,
    bound_rhs_linearized: f64,
    ig_clean: f64,
    ig_adv: f64,
    clean_acc: f64,
    robust_acc: f64,
    risk_argmax: f64,
    risk_adv_argmax: f64,
    lambda: f64,
    config_digest: String,
}

/// `riskgap`: risks, gap, bound and information-gain means as one JSON
/// record; fails (exit 3) if the bound does not dominate the gap.
pub fn run_riskgap(
    checkpoint: &Path,
    config_path: &Path,
    eps: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let config = load_config(config_path, None)?;
    let ensemble = load_ensemble(checkpoint)?;
    let ds = eval_split(&config)?;
    let attack = crate::attacks::AttackConfig {
        eps_max: eps.unwrap_or_else(|| config.eval_eps()),
        ..config.eval_attack_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.train.seed, "riskgap", 0));
    let summary = evaluation::evaluate(&ensemble, &ds, &attack, config.ig.lambda, &mut rng)?;

    if summary.bound.bound < summary.gap - 1e-6 {
        return Err(CliError::Numeric(format!(
            "bound {} fails to dominate the risk gap {}",
            summary.bound.bound, summary.gap
        )));
    }

    let record = RiskGapRecord {
        eps: attack.eps_max,
        risk: summary.risk,
        risk_adv: summary.risk_adv,
        gap: summary.gap,
        bound_rhs: summary.bound.bound,
        bound_rhs_linearized: summary.bound.linearized,
        ig_clean: summary.ig_clean,
        ig_adv: summary.ig_adv,
        clean_acc: summary.clean_acc,
        robust_acc: summary.robust_acc,
        risk_argmax: summary.risk_argmax,
        risk_adv_argmax: summary.risk_adv_argmax,
        lambda: config.ig.lambda,
        config_digest: format!("{:016x}", config.digest()),
    };
    let mut json = serde_json::to_string_pretty(&record).expect("record serializes");
    json.push('\n');
    write_or_print(out, &json)
}

/// `gradcheck`: run the finite-difference suite; nonzero exit on failure,
/// with per-op maxima on stdout.
pub fn run_gradcheck(seed: u64, cases: usize, inject: Option<&str>) -> Result<(), CliError> {
    if let Some(op) = inject {
        if !gradcheck::known_ops().contains(&op) {
            return Err(CliError::Config(format!(
                "unknown op {op:?} for fault injection; known: {:?}",
                gradcheck::known_ops()
            )));
        }
    }
    let report = gradcheck::run_gradcheck(seed, cases, inject);
    for op in &report.per_op {
        println!(
            "{:<14} cases={:<4} max_rel_err={:.3e}",
            op.op, op.cases, op.max_rel_err
        );
    }
    if report.passed() {
        println!(
            "[PASS] gradcheck: {} cases, tolerance {:.0e}",
            report.total_cases(),
            gradcheck::REL_TOL
        );
        Ok(())
    } else {
        for f in report.failures.iter().take(10) {
            println!("[FAIL] {f}");
        }
        Err(CliError::Numeric(format!(
            "gradcheck failed on {} case(s)",
            report.failures.len()
        )))
    }
}

/// `gen-data`: write a generated dataset as IGDS (or CSV).
#[allow(clippy::too_many_arguments)]
pub fn run_gen_data(
    kind: &str,
    count: usize,
    noise: f64,
    classes: usize,
    spread: f64,
    seed: u64,
    out: &Path,
    csv: bool,
) -> Result<(), CliError> {
    let ds = match kind {
        "two_moons" => data::gen_two_moons(count, noise, seed)?,
        "gaussian_blobs" => data::gen_gaussian_blobs(count, classes, spread, seed)?,
        k => return Err(CliError::Config(format!("unknown dataset kind {k:?}"))),
    };
    if csv || out.extension().is_some_and(|e| e == "csv") {
        data::export_csv(&ds, out)?;
    } else {
        data::save_dataset(&ds, out)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "kind": kind,
            "count": ds.len(),
            "dim": ds.dim(),
            "classes": ds.class_count(),
            "digest": format!("{:016x}", ds.digest()),
            "path": out.display().to_string(),
        })
    );
    Ok(())
}
