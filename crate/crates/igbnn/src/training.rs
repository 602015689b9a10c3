//! The training loop: per-batch adversarial generation against the current
//! ensemble, one backward pass through the constrained objective for all
//! particle gradients, then an SVGD ensemble step.
//!
//! Per batch, in order:
//! 1. generate `x_adv` with the ensemble-aware iterated attack against the
//!    ensemble state *before* this batch's update;
//! 2. record the objective (adversarial cross-entropy plus the
//!    information-gain penalty) over all particles and take its gradient
//!    per particle;
//! 3. form the kernel-weighted SVGD directions and step every particle.
//!
//! Training modes select the objective: the full constrained objective,
//! the penalty-free ensemble (`svgd_only`), single-particle adversarial
//! training (`plain_adv`, which reduces to the classic loop exactly), and
//! the diagnostic `invert_ig` mode that flips the penalty sign to force
//! clean/adversarial information inconsistency.

use crate::attacks::{self, AttackConfig};
use crate::data::{self, LabeledDataset};
use crate::evaluation::{self, MetricsRecord, RecordTag};
use crate::infogain::{self, IgConfig, ObjectiveOptions};
use crate::network::{self, NetworkShape};
use crate::seeds;
use crate::svgd::{self, ParticleEnsemble, StepState, SvgdConfig};
use crate::tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {source}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Svgd(#[from] crate::svgd::SvgdError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error(transparent)]
    Attack(#[from] crate::attacks::AttackError),
    #[error(transparent)]
    InfoGain(#[from] crate::infogain::InfoGainError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which objective the trainer optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Adversarial training + SVGD + information-gain penalty.
    IgBnn,
    /// Adversarial training + SVGD, no penalty.
    SvgdOnly,
    /// Single-particle adversarial training (requires n = 1; repulsion and
    /// penalty forced off).
    PlainAdv,
    /// Diagnostic: maximize the information-gain inconsistency (penalty
    /// weight applied with a negative sign).
    InvertIg,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::IgBnn => "ig_bnn",
            TrainMode::SvgdOnly => "svgd_only",
            TrainMode::PlainAdv => "plain_adv",
            TrainMode::InvertIg => "invert_ig",
        }
    }
}

/// Step-size schedule across training steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepSchedule {
    Constant,
    /// Cosine decay from the configured step size to zero over the run.
    Cosine,
}

/// Everything `train` needs beyond the dataset.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden layer widths; input dim and class count come from the data.
    pub hidden: Vec<usize>,
    pub particles: usize,
    pub svgd: SvgdConfig,
    /// Training-time attack (iteration count T).
    pub attack: AttackConfig,
    pub ig: IgConfig,
    pub seed: u64,
    /// Evaluate every k epochs (0 disables per-epoch evaluation); a final
    /// record is always emitted.
    pub eval_every: usize,
    /// Test-time attack for evaluation records (iteration count T').
    pub eval_attack: AttackConfig,
    pub checkpoint_path: Option<PathBuf>,
    pub mode: TrainMode,
    pub schedule: StepSchedule,
    /// Optional isotropic Gaussian prior: adds `prior_lambda * theta` to
    /// each particle's loss gradient (off at 0, matching the update rule
    /// as published).
    pub prior_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            hidden: vec![16, 16],
            particles: 10,
            svgd: SvgdConfig::default(),
            attack: AttackConfig::default(),
            ig: IgConfig::default(),
            seed: 42,
            eval_every: 0,
            eval_attack: AttackConfig {
                steps: 20,
                ..AttackConfig::default()
            },
            checkpoint_path: None,
            mode: TrainMode::IgBnn,
            schedule: StepSchedule::Constant,
            prior_lambda: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.particles == 0 {
            return Err(TrainError::InvalidConfig("need at least one particle".into()));
        }
        if self.mode == TrainMode::PlainAdv && self.particles != 1 {
            return Err(TrainError::InvalidConfig(format!(
                "plain_adv is single-particle training, got n = {}",
                self.particles
            )));
        }
        if !self.prior_lambda.is_finite() || self.prior_lambda < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "prior_lambda must be >= 0, got {}",
                self.prior_lambda
            )));
        }
        self.svgd.validate()?;
        self.attack.validate()?;
        self.eval_attack.validate()?;
        self.ig.validate()?;
        Ok(())
    }

    /// Penalty weight with the mode's sign applied; zero when the mode has
    /// no penalty.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            TrainMode::IgBnn => self.ig.lambda,
            TrainMode::SvgdOnly | TrainMode::PlainAdv => 0.0,
            TrainMode::InvertIg => -self.ig.lambda,
        }
    }

    /// Repulsion weight with the mode applied (plain_adv turns it off).
    fn effective_gamma(&self) -> f64 {
        match self.mode {
            TrainMode::PlainAdv => 0.0,
            _ => self.svgd.gamma,
        }
    }
}

/// Loss components recorded at every step; `total = ce + lambda * penalty`
/// holds to 1e-10 by construction and is asserted during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
}

/// What a training run produced, besides the ensemble itself.
#[derive(Debug, Default)]
pub struct TrainReport {
    /// Evaluation records (per eval epoch, plus one final record).
    pub records: Vec<MetricsRecord>,
    /// Loss components for every optimization step, in order.
    pub steps: Vec<StepLoss>,
    /// Wall-clock seconds per completed epoch.
    pub epoch_seconds: Vec<f64>,
    /// Where the final checkpoint landed, when one was requested.
    pub checkpoint: Option<PathBuf>,
}

/// Train a fresh seeded ensemble. See [`train_with_sink`] for streaming
/// metrics consumers.
pub fn train(
    train_ds: &LabeledDataset,
    val_ds: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<(ParticleEnsemble, TrainReport)> {
    train_with_sink(train_ds, val_ds, config, &mut |_| Ok(()))
}

/// Train a fresh seeded ensemble, handing each metrics record to `sink` as
/// it is produced.
pub fn train_with_sink(
    train_ds: &LabeledDataset,
    val_ds: Option<&LabeledDataset>,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> std::io::Result<()>,
) -> Result<(ParticleEnsemble, TrainReport)> {
    config.validate()?;
    let shape = network_shape(train_ds, config)?;
    // Particle-distinct init seeds are derived inside init from the root.
    let ensemble = ParticleEnsemble::init(shape.clone(), config.particles, config.seed)?;
    let state = StepState::new(config.particles, shape.param_count());
    run_loop(ensemble, state, 0, train_ds, val_ds, config, sink)
}

/// Continue a checkpointed run up to `config.epochs`. With a constant step
/// size (and the saved adaptive state otherwise) the continuation
/// reproduces the uninterrupted trajectory exactly.
pub fn resume(
    checkpoint: &Path,
    train_ds: &LabeledDataset,
    val_ds: Option<&LabeledDataset>,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> std::io::Result<()>,
) -> Result<(ParticleEnsemble, TrainReport)> {
    config.validate()?;
    let loaded = read_checkpoint(checkpoint)?;
    let shape = network_shape(train_ds, config)?;
    if loaded.ensemble.shape() != &shape {
        return Err(TrainError::InvalidConfig(format!(
            "checkpoint shape {:?} does not match config/data shape {:?}",
            loaded.ensemble.shape().widths(),
            shape.widths()
        )));
    }
    run_loop(
        loaded.ensemble,
        loaded.step_state,
        loaded.epoch as usize,
        train_ds,
        val_ds,
        config,
        sink,
    )
}

fn network_shape(ds: &LabeledDataset, config: &TrainConfig) -> Result<NetworkShape> {
    let mut widths = vec![ds.dim()];
    widths.extend_from_slice(&config.hidden);
    widths.push(ds.class_count());
    Ok(NetworkShape::mlp(widths)?)
}

fn run_loop(
    mut ensemble: ParticleEnsemble,
    mut state: StepState,
    start_epoch: usize,
    train_ds: &LabeledDataset,
    val_ds: Option<&LabeledDataset>,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> std::io::Result<()>,
) -> Result<(ParticleEnsemble, TrainReport)> {
    let mut report = TrainReport::default();
    let objective = ObjectiveOptions {
        effective_lambda: config.effective_lambda(),
        entropy_floor: config.ig.entropy_floor,
        batch_mean_penalty: config.ig.batch_mean_penalty,
    };
    let batches_per_epoch = train_ds.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch).max(1);
    let eval_ds = val_ds.unwrap_or(train_ds);

    for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let epoch_batches = data::batches(
            train_ds,
            config.batch_size,
            config.seed,
            epoch as u64,
        );
        for (bi, batch) in epoch_batches.iter().enumerate() {
            let global_step = epoch * batches_per_epoch + bi;
            let step_loss = train_step(
                &mut ensemble,
                &mut state,
                batch,
                config,
                &objective,
                global_step,
                total_steps,
            )
            .map_err(|e| {
                if is_non_finite(&e) {
                    TrainError::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        source: Box::new(e),
                    }
                } else {
                    e
                }
            })?;
            report.steps.push(step_loss);
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());

        let do_eval = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        if do_eval {
            let record = evaluate_epoch(
                &ensemble,
                eval_ds,
                &config.eval_attack,
                config.ig.lambda,
                seeds::derive(config.seed, "eval", epoch as u64),
                RecordTag::Epoch(epoch as u64),
            )?;
            sink(&record)?;
            report.records.push(record);
        }
    }

    // Final evaluation record, independent of the eval cadence.
    let record = evaluate_epoch(
        &ensemble,
        eval_ds,
        &config.eval_attack,
        config.ig.lambda,
        seeds::derive(config.seed, "eval", u64::MAX),
        RecordTag::Final,
    )?;
    sink(&record)?;
    report.records.push(record);

    if let Some(path) = &config.checkpoint_path {
        write_checkpoint(
            &Checkpoint {
                ensemble: ensemble.clone(),
                epoch: config.epochs as u64,
                step_state: state,
            },
            path,
        )?;
        report.checkpoint = Some(path.clone());
    }
    Ok((ensemble, report))
}

/// Did a numeric blow-up (rather than a usage error) cause this failure?
/// Non-finite losses abort with a diagnostic instead of being skipped:
/// silent skipping would mask penalty instabilities.
fn is_non_finite(e: &TrainError) -> bool {
    use crate::attacks::AttackError;
    use crate::infogain::InfoGainError;
    use crate::network::NetworkError;
    use crate::tensor::TensorError;
    match e {
        TrainError::Attack(AttackError::NonFiniteGradient(_)) => true,
        TrainError::Attack(AttackError::Tensor(TensorError::NonFinite { .. })) => true,
        TrainError::Attack(AttackError::Network(NetworkError::Tensor(
            TensorError::NonFinite { .. },
        ))) => true,
        TrainError::InfoGain(InfoGainError::Tensor(TensorError::NonFinite { .. })) => true,
        TrainError::InfoGain(InfoGainError::Network(NetworkError::Tensor(
            TensorError::NonFinite { .. },
        ))) => true,
        TrainError::Network(NetworkError::Tensor(TensorError::NonFinite { .. })) => true,
        TrainError::Network(NetworkError::NonFiniteParams) => true,
        TrainError::Svgd(crate::svgd::SvgdError::NonFinite(_)) => true,
        _ => false,
    }
}

fn train_step(
    ensemble: &mut ParticleEnsemble,
    state: &mut StepState,
    batch: &data::Batch,
    config: &TrainConfig,
    objective: &ObjectiveOptions,
    global_step: usize,
    total_steps: usize,
) -> Result<StepLoss> {
    // (1) Adversarials against the pre-update ensemble.
    let mut attack_rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        config.seed,
        "attack",
        global_step as u64,
    ));
    let adv = attacks::eot_pgd(
        ensemble,
        &batch.x,
        &batch.labels,
        &config.attack,
        &mut attack_rng,
    )?;

    // (2) One backward pass through the objective for all particles.
    let mut tape = Tape::new();
    let parts = infogain::ig_objective(
        &mut tape,
        ensemble,
        &batch.x,
        adv.x_adv(),
        &batch.labels,
        objective,
    )?;
    let total = tape.value(parts.total).item();
    let ce = tape.value(parts.cross_entropy).item();
    let penalty = parts.penalty.map(|p| tape.value(p).item()).unwrap_or(0.0);
    assert!(
        (total - (ce + objective.effective_lambda * penalty)).abs() <= 1e-10,
        "loss accounting drifted: {total} vs {ce} + {} * {penalty}",
        objective.effective_lambda
    );

    let grads = tape.backward(parts.total).map_err(crate::infogain::InfoGainError::from)?;
    let mut loss_grads: Vec<_> = parts
        .leaves
        .iter()
        .map(|leaf| leaf.grad_to_flat(&grads))
        .collect();
    if config.prior_lambda > 0.0 {
        for (g, p) in loss_grads.iter_mut().zip(ensemble.particles()) {
            for (gv, pv) in g.values_mut().iter_mut().zip(p.values()) {
                *gv += config.prior_lambda * pv;
            }
        }
    }

    // (3) SVGD directions and step, with the schedule applied to the step
    // size only.
    let scale = match config.schedule {
        StepSchedule::Constant => 1.0,
        StepSchedule::Cosine => {
            0.5 * (1.0
                + (std::f64::consts::PI * global_step as f64 / total_steps as f64).cos())
        }
    };
    let step_config = SvgdConfig {
        gamma: config.effective_gamma(),
        step_size: config.svgd.step_size * scale,
        step_mode: config.svgd.step_mode,
        bandwidth: config.svgd.bandwidth,
    };
    let directions = svgd::svgd_direction(ensemble, &loss_grads, &step_config)?;
    svgd::apply_step(ensemble, &directions, &step_config, state)?;

    Ok(StepLoss {
        total,
        cross_entropy: ce,
        penalty,
    })
}

/// Clean/robust accuracy, risks, gap, bound and information-gain means on
/// an evaluation set, tagged for the metrics stream.
pub fn evaluate_epoch(
    ensemble: &ParticleEnsemble,
    ds: &LabeledDataset,
    eval_attack: &AttackConfig,
    lambda: f64,
    seed: u64,
    tag: RecordTag,
) -> Result<MetricsRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let summary = evaluation::evaluate(ensemble, ds, eval_attack, lambda, &mut rng)?;
    Ok(summary.into_record(tag))
}

/// A resumable training state: the ensemble, the completed-epoch cursor and
/// the adaptive-step accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub ensemble: ParticleEnsemble,
    pub epoch: u64,
    pub step_state: StepState,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"IGCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint byte format: the parameter snapshot wrapped with a training
/// cursor and a checksum.
///
/// ```text
/// offset  size  field
/// 0       4     magic "IGCK"
/// 4       4     version (u32 LE, currently 1)
/// 8       8     completed epochs (u64 LE)
/// 16      4     snapshot length S (u32 LE)
/// 20      S     embedded IGPS parameter snapshot
/// 20+S    8*n*param_count   adaptive-step accumulators, f64 LE
/// last 8        FNV-1a 64 checksum of all preceding bytes (u64 LE)
/// ```
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let snapshot = network::encode_snapshot(ck.ensemble.shape(), ck.ensemble.particles());
    let mut out = Vec::with_capacity(snapshot.len() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    out.extend_from_slice(&(snapshot.len() as u32).to_le_bytes());
    out.extend_from_slice(&snapshot);
    for acc in ck.step_state.accumulators() {
        for v in acc {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = seeds::fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |msg: String| TrainError::CorruptCheckpoint(msg);
    if bytes.len() < 28 {
        return Err(fail(format!("only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = seeds::fnv1a64(body);
    if stored != actual {
        return Err(fail(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    if &body[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let epoch = u64::from_le_bytes(body[8..16].try_into().unwrap());
    let snap_len = u32::from_le_bytes(body[16..20].try_into().unwrap()) as usize;
    if body.len() < 20 + snap_len {
        return Err(fail("truncated snapshot".into()));
    }
    let (shape, particles) = network::decode_snapshot(&body[20..20 + snap_len])
        .map_err(|e| fail(e.to_string()))?;
    let n = particles.len();
    let pc = shape.param_count();
    let accum_bytes = &body[20 + snap_len..];
    if accum_bytes.len() != 8 * n * pc {
        return Err(fail(format!(
            "accumulator block is {} bytes, expected {}",
            accum_bytes.len(),
            8 * n * pc
        )));
    }
    let mut accum = Vec::with_capacity(n);
    let mut off = 0;
    for _ in 0..n {
        let mut acc = Vec::with_capacity(pc);
        for _ in 0..pc {
            acc.push(f64::from_le_bytes(
                accum_bytes[off..off + 8].try_into().unwrap(),
            ));
            off += 8;
        }
        accum.push(acc);
    }
    let ensemble = ParticleEnsemble::new(shape, particles)
        .map_err(|e| fail(e.to_string()))?;
    Ok(Checkpoint {
        ensemble,
        epoch,
        step_state: StepState::from_accumulators(accum),
    })
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(ck))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Binding, FlatParams};

    fn small_config(mode: TrainMode, particles: usize) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            hidden: vec![8],
            particles,
            svgd: SvgdConfig {
                gamma: 0.01,
                step_size: 0.2,
                ..Default::default()
            },
            attack: AttackConfig {
                eps_max: 0.1,
                alpha: 0.025,
                steps: 3,
                ..Default::default()
            },
            ig: IgConfig {
                lambda: 1.0,
                ..Default::default()
            },
            seed: 7,
            eval_every: 0,
            eval_attack: AttackConfig {
                eps_max: 0.1,
                alpha: 0.025,
                steps: 5,
                ..Default::default()
            },
            checkpoint_path: None,
            mode,
            schedule: StepSchedule::Constant,
            prior_lambda: 0.0,
        }
    }

    fn tiny_moons() -> LabeledDataset {
        crate::data::gen_two_moons(48, 0.15, 3).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = tiny_moons();
        let mut config = small_config(TrainMode::IgBnn, 3);
        config.epochs = 0;
        let (ensemble, report) = train(&ds, None, &config).unwrap();
        let shape = NetworkShape::mlp(vec![2, 8, 2]).unwrap();
        let want = ParticleEnsemble::init(shape, 3, 7).unwrap();
        assert_eq!(ensemble.particles(), want.particles());
        assert!(report.steps.is_empty());
        // A final record is still emitted.
        assert_eq!(report.records.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_moons();
        let config = small_config(TrainMode::IgBnn, 2);
        let (e1, r1) = train(&ds, None, &config).unwrap();
        let (e2, r2) = train(&ds, None, &config).unwrap();
        assert_eq!(e1.particles(), e2.particles());
        assert_eq!(r1.steps, r2.steps);
    }

    #[test]
    fn loss_accounting_holds_every_step() {
        let ds = tiny_moons();
        let config = small_config(TrainMode::IgBnn, 2);
        let (_, report) = train(&ds, None, &config).unwrap();
        for s in &report.steps {
            assert!(
                (s.total - (s.cross_entropy + config.ig.lambda * s.penalty)).abs() <= 1e-10
            );
        }
    }

    #[test]
    fn invert_mode_flips_only_the_penalty_sign() {
        // On the shared seed the first step sees the same ensemble, batch
        // and adversarials, so CE and penalty agree exactly and the totals
        // differ by 2 * lambda * penalty.
        let ds = tiny_moons();
        let mut ig = small_config(TrainMode::IgBnn, 2);
        ig.epochs = 1;
        let mut inv = ig.clone();
        inv.mode = TrainMode::InvertIg;
        let (_, r_ig) = train(&ds, None, &ig).unwrap();
        let (_, r_inv) = train(&ds, None, &inv).unwrap();
        let (a, b) = (&r_ig.steps[0], &r_inv.steps[0]);
        assert_eq!(a.cross_entropy.to_bits(), b.cross_entropy.to_bits());
        assert_eq!(a.penalty.to_bits(), b.penalty.to_bits());
        let want_gap = 2.0 * ig.ig.lambda * a.penalty;
        assert!((a.total - b.total - want_gap).abs() < 1e-12);
    }

    #[test]
    fn plain_adv_matches_hand_rolled_adversarial_training() {
        // Reference loop: PGD attack, mean cross-entropy gradient, plain
        // gradient descent. Trajectories must agree bitwise.
        let ds = tiny_moons();
        let mut config = small_config(TrainMode::PlainAdv, 1);
        config.epochs = 2;
        let (ensemble, _) = train(&ds, None, &config).unwrap();

        let shape = NetworkShape::mlp(vec![2, 8, 2]).unwrap();
        let mut params = network::init_params(&shape, seeds::derive(config.seed, "init", 0));
        let batches_per_epoch = ds.len().div_ceil(config.batch_size);
        for epoch in 0..config.epochs {
            let batches = data::batches(&ds, config.batch_size, config.seed, epoch as u64);
            for (bi, batch) in batches.iter().enumerate() {
                let global_step = epoch * batches_per_epoch + bi;
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                    config.seed,
                    "attack",
                    global_step as u64,
                ));
                let adv = attacks::pgd(
                    &shape,
                    &params,
                    &batch.x,
                    &batch.labels,
                    &config.attack,
                    &mut rng,
                )
                .unwrap();
                let mut tape = Tape::new();
                let leaves =
                    network::bind_params(&mut tape, &shape, &params, Binding::Differentiable)
                        .unwrap();
                let x_id = tape.constant(adv.x_adv().clone());
                let logits = network::forward_bound(&mut tape, &shape, &leaves, x_id).unwrap();
                let ce = network::cross_entropy(&mut tape, logits, &batch.labels).unwrap();
                let ce_mean = tape.scale(ce, 1.0).unwrap();
                let grads = tape.backward(ce_mean).unwrap();
                let flat = leaves.grad_to_flat(&grads);
                for (p, g) in params.values_mut().iter_mut().zip(flat.values()) {
                    *p -= config.svgd.step_size * g;
                }
            }
        }
        let got = ensemble.particle(0).values();
        for (a, b) in got.iter().zip(params.values()) {
            assert_eq!(a.to_bits(), b.to_bits(), "trajectory diverged");
        }
    }

    #[test]
    fn n1_constant_step_trajectory_is_plain_gradient_descent() {
        // SVGD with one particle must be exactly gradient descent on the
        // same loss path (kernel 1, repulsion 0), bitwise.
        let ds = tiny_moons();
        let mut config = small_config(TrainMode::SvgdOnly, 1);
        config.svgd.gamma = 3.0; // irrelevant with n = 1
        config.epochs = 1;
        let (svgd_result, _) = train(&ds, None, &config).unwrap();

        let mut plain = config.clone();
        plain.mode = TrainMode::PlainAdv;
        plain.svgd.gamma = 0.0;
        let (plain_result, _) = train(&ds, None, &plain).unwrap();
        // Same seed, same attack stream; eot with n=1 equals pgd bitwise, so
        // the whole trajectory matches.
        assert_eq!(svgd_result.particles(), plain_result.particles());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let shape = NetworkShape::mlp(vec![2, 5, 2]).unwrap();
        let ensemble = ParticleEnsemble::init(shape.clone(), 3, 11).unwrap();
        let mut state = StepState::new(3, shape.param_count());
        // Make the accumulators non-trivial.
        state = StepState::from_accumulators(
            state
                .accumulators()
                .iter()
                .enumerate()
                .map(|(i, acc)| acc.iter().map(|v| v + i as f64 * 0.25).collect())
                .collect(),
        );
        let ck = Checkpoint {
            ensemble,
            epoch: 17,
            step_state: state,
        };
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck, back);
        assert_eq!(bytes, encode_checkpoint(&back));
    }

    #[test]
    fn truncated_or_tampered_checkpoint_is_rejected() {
        let shape = NetworkShape::mlp(vec![2, 4, 2]).unwrap();
        let ck = Checkpoint {
            ensemble: ParticleEnsemble::init(shape.clone(), 2, 1).unwrap(),
            epoch: 3,
            step_state: StepState::new(2, shape.param_count()),
        };
        let bytes = encode_checkpoint(&ck);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(TrainError::CorruptCheckpoint(_))
        ));
        let mut tampered = bytes.clone();
        tampered[30] ^= 0xff;
        assert!(matches!(
            decode_checkpoint(&tampered),
            Err(TrainError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let ds = tiny_moons();
        let dir = tempfile::tempdir().unwrap();
        let ck_path = dir.path().join("mid.igck");

        // Uninterrupted: 3 epochs.
        let mut full = small_config(TrainMode::IgBnn, 2);
        full.epochs = 3;
        let (want, _) = train(&ds, None, &full).unwrap();

        // Interrupted: 1 epoch, checkpoint, then resume to 3.
        let mut first = full.clone();
        first.epochs = 1;
        first.checkpoint_path = Some(ck_path.clone());
        train(&ds, None, &first).unwrap();
        let (got, _) = resume(&ck_path, &ds, None, &full, &mut |_| Ok(())).unwrap();

        for (a, b) in want.particles().iter().zip(got.particles()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn eval_records_follow_the_cadence() {
        let ds = tiny_moons();
        let mut config = small_config(TrainMode::SvgdOnly, 2);
        config.epochs = 4;
        config.eval_every = 2;
        let mut streamed = 0;
        let (_, report) =
            train_with_sink(&ds, None, &config, &mut |_| {
                streamed += 1;
                Ok(())
            })
            .unwrap();
        // Epochs 2 and 4 evaluate, plus the final record.
        assert_eq!(report.records.len(), 3);
        assert_eq!(streamed, 3);
        assert!(matches!(report.records[0].tag, RecordTag::Epoch(1)));
        assert!(matches!(report.records[2].tag, RecordTag::Final));
    }

    #[test]
    fn plain_adv_rejects_multiple_particles() {
        let config = small_config(TrainMode::PlainAdv, 3);
        assert!(matches!(
            config.validate(),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_budget_eval_has_equal_clean_and_robust_accuracy() {
        let ds = tiny_moons();
        let shape = NetworkShape::mlp(vec![2, 6, 2]).unwrap();
        let ensemble = ParticleEnsemble::init(shape, 2, 9).unwrap();
        let attack = AttackConfig {
            eps_max: 0.0,
            steps: 5,
            ..Default::default()
        };
        let record =
            evaluate_epoch(&ensemble, &ds, &attack, 5.0, 1, RecordTag::Epoch(0)).unwrap();
        assert_eq!(record.clean_acc, record.robust_acc);
        assert_eq!(record.gap, 0.0);
    }
}
