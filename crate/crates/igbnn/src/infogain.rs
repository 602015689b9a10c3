//! Information gain of the particle ensemble and the constrained training
//! objective built from it.
//!
//! For one input, with per-particle predictive distributions p_1..p_n,
//!
//! ```text
//! IG = H[mean_i p_i] - mean_i H[p_i]
//! ```
//!
//! the mutual information between the label and the parameters: how much of
//! the predictive entropy comes from disagreement between particles rather
//! than from per-particle noise. Jensen's inequality keeps it in
//! `[0, ln K]`, and it vanishes when all particles agree (or n = 1).
//!
//! The training objective penalizes the absolute difference between the
//! information gained from a clean batch and from its adversarial
//! counterpart:
//!
//! ```text
//! total = mean_i CE(f(x_adv; theta_i), y) + lambda * |IG(x) - IG(x_adv)|
//! ```
//!
//! averaged per instance over the batch. A robust model should extract the
//! same information from an input and its perturbed twin; driving the gap
//! to zero also tightens the risk-gap bound checked in `evaluation`.

use crate::network::{self, Binding, ParamLeaves, PredictiveDistribution};
use crate::svgd::ParticleEnsemble;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InfoGainError {
    #[error("probability entry {value} is negative")]
    NegativeProbability { value: f64 },
    #[error("probabilities sum to {sum}, outside tolerance of 1")]
    NotNormalized { sum: f64 },
    #[error("empty distribution set")]
    Empty,
    #[error("distribution sizes disagree: {0}")]
    SizeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

pub type Result<T> = std::result::Result<T, InfoGainError>;

/// Default probability floor applied before logs.
pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-12;

/// Weight and numeric guards for the information-gain penalty.
#[derive(Clone, Copy, Debug)]
pub struct IgConfig {
    /// Penalty weight lambda >= 0. The conjecture-inversion training mode
    /// applies the sign flip itself; the configured value stays nonnegative.
    pub lambda: f64,
    /// Probability clamp applied before `p * ln p`; in [0, 1e-6].
    pub entropy_floor: f64,
    /// Penalize |mean IG(x) - mean IG(x_adv)| over the batch instead of the
    /// per-instance absolute difference (ablation variant).
    pub batch_mean_penalty: bool,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            lambda: 5.0,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
            batch_mean_penalty: false,
        }
    }
}

impl IgConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(InfoGainError::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1e-6).contains(&self.entropy_floor) {
            return Err(InfoGainError::InvalidConfig(format!(
                "entropy floor must lie in [0, 1e-6], got {}",
                self.entropy_floor
            )));
        }
        Ok(())
    }
}

/// Shannon entropy `-sum p ln p` (natural log, 0 ln 0 := 0).
pub fn entropy(p: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    let mut h = 0.0;
    for &v in p {
        if v < 0.0 {
            return Err(InfoGainError::NegativeProbability { value: v });
        }
        sum += v;
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(InfoGainError::NotNormalized { sum });
    }
    Ok(h)
}

/// Information gain for one input from its per-particle class distributions
/// (one row per particle).
pub fn information_gain(per_particle: &[&[f64]]) -> Result<f64> {
    let n = per_particle.len();
    if n == 0 {
        return Err(InfoGainError::Empty);
    }
    let k = per_particle[0].len();
    let mut mean = vec![0.0; k];
    let mut mean_entropy = 0.0;
    for row in per_particle {
        if row.len() != k {
            return Err(InfoGainError::SizeMismatch(format!(
                "row of length {} among rows of length {k}",
                row.len()
            )));
        }
        mean_entropy += entropy(row)?;
        for (m, &v) in mean.iter_mut().zip(*row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean_entropy /= n as f64;
    Ok(entropy(&mean)? - mean_entropy)
}

/// Per-instance information gain over a batch: `per_particle[i]` is
/// particle i's distribution over the same batch.
pub fn information_gain_batch(per_particle: &[PredictiveDistribution]) -> Result<Vec<f64>> {
    let n = per_particle.len();
    if n == 0 {
        return Err(InfoGainError::Empty);
    }
    let batch = per_particle[0].batch();
    let k = per_particle[0].class_count();
    for d in per_particle {
        if d.batch() != batch || d.class_count() != k {
            return Err(InfoGainError::SizeMismatch(format!(
                "{}x{} vs {batch}x{k}",
                d.batch(),
                d.class_count()
            )));
        }
    }
    (0..batch)
        .map(|i| {
            let rows: Vec<&[f64]> = per_particle.iter().map(|d| d.row(i)).collect();
            information_gain(&rows)
        })
        .collect()
}

/// Mean absolute per-instance difference between clean and adversarial
/// information gain.
pub fn ig_penalty(
    clean: &[PredictiveDistribution],
    adv: &[PredictiveDistribution],
) -> Result<f64> {
    let ig_c = information_gain_batch(clean)?;
    let ig_a = information_gain_batch(adv)?;
    if ig_c.len() != ig_a.len() {
        return Err(InfoGainError::SizeMismatch(format!(
            "batch {} vs {}",
            ig_c.len(),
            ig_a.len()
        )));
    }
    let batch = ig_c.len() as f64;
    Ok(ig_c
        .iter()
        .zip(&ig_a)
        .map(|(c, a)| (c - a).abs())
        .sum::<f64>()
        / batch)
}

/// Record softmax probabilities `p = exp(z - lse(z))` per row. Division-free
/// and numerically stable through the max subtraction.
pub fn softmax_rows(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    let (batch, k) = (shape[0], shape[1]);
    let m = tape.max_axis(logits, 1)?;
    let mb = tape.broadcast(m, &[batch, k])?;
    let centered = tape.sub(logits, mb)?;
    let e = tape.exp(centered)?;
    let s = tape.sum_axis(e, 1)?;
    let ls = tape.log(s)?;
    let lse = tape.add(ls, m)?;
    let lseb = tape.broadcast(lse, &[batch, k])?;
    let shifted = tape.sub(logits, lseb)?;
    Ok(tape.exp(shifted)?)
}

/// Record per-row entropy `-sum p ln(clamp(p, floor, inf))` -> batch x 1.
pub fn entropy_rows(tape: &mut Tape, probs: NodeId, floor: f64) -> Result<NodeId> {
    let clamped = tape.clamp(probs, floor.max(f64::MIN_POSITIVE), f64::INFINITY)?;
    let logp = tape.log(clamped)?;
    let plogp = tape.mul(probs, logp)?;
    let s = tape.sum_axis(plogp, 1)?;
    Ok(tape.neg(s)?)
}

/// Record per-instance information gain of `prob_nodes` (one batch x K
/// probability node per particle) -> batch x 1.
pub fn information_gain_rows(
    tape: &mut Tape,
    prob_nodes: &[NodeId],
    floor: f64,
) -> Result<NodeId> {
    let n = prob_nodes.len();
    if n == 0 {
        return Err(InfoGainError::Empty);
    }
    let mut sum_p = prob_nodes[0];
    for &p in &prob_nodes[1..] {
        sum_p = tape.add(sum_p, p)?;
    }
    let mean_p = tape.scale(sum_p, 1.0 / n as f64)?;
    let h_of_mean = entropy_rows(tape, mean_p, floor)?;

    let mut sum_h = entropy_rows(tape, prob_nodes[0], floor)?;
    for &p in &prob_nodes[1..] {
        let h = entropy_rows(tape, p, floor)?;
        sum_h = tape.add(sum_h, h)?;
    }
    let mean_h = tape.scale(sum_h, 1.0 / n as f64)?;
    Ok(tape.sub(h_of_mean, mean_h)?)
}

/// Options threaded into [`ig_objective`]. `effective_lambda` carries the
/// training mode's sign (negative in the conjecture-inversion mode).
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveOptions {
    pub effective_lambda: f64,
    pub entropy_floor: f64,
    pub batch_mean_penalty: bool,
}

impl ObjectiveOptions {
    pub fn from_config(cfg: &IgConfig, invert: bool) -> Self {
        ObjectiveOptions {
            effective_lambda: if invert { -cfg.lambda } else { cfg.lambda },
            entropy_floor: cfg.entropy_floor,
            batch_mean_penalty: cfg.batch_mean_penalty,
        }
    }
}

/// Handles into the recorded objective graph.
pub struct ObjectiveParts {
    /// The full objective (scalar node).
    pub total: NodeId,
    /// Particle-mean adversarial cross-entropy (scalar node).
    pub cross_entropy: NodeId,
    /// The information-gain penalty term (scalar node), absent when the
    /// effective lambda is exactly zero and the penalty graph is skipped.
    pub penalty: Option<NodeId>,
    /// Per-particle parameter leaves, in ensemble order.
    pub leaves: Vec<ParamLeaves>,
}

/// Record the constrained objective
/// `mean_i CE(f(x_adv; theta_i), y) + lambda * |IG(x) - IG(x_adv)|`
/// with every particle's parameters bound as gradient leaves. One backward
/// pass from `total` yields all particle gradients, including the coupling
/// through the ensemble-mean distribution inside IG.
///
/// `x_adv` is treated as data: gradients do not flow back into the attack
/// that produced it.
pub fn ig_objective(
    tape: &mut Tape,
    ensemble: &ParticleEnsemble,
    x: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    opts: &ObjectiveOptions,
) -> Result<ObjectiveParts> {
    let n = ensemble.len();
    let shape = ensemble.shape();
    if x.shape() != x_adv.shape() {
        return Err(InfoGainError::SizeMismatch(format!(
            "clean {:?} vs adversarial {:?}",
            x.shape(),
            x_adv.shape()
        )));
    }

    let leaves: Vec<ParamLeaves> = ensemble
        .particles()
        .iter()
        .map(|p| network::bind_params(tape, shape, p, Binding::Differentiable))
        .collect::<std::result::Result<_, _>>()?;

    let xadv_id = tape.constant(x_adv.clone());
    let mut adv_logits = Vec::with_capacity(n);
    let mut ce_sum = None;
    for leaf in &leaves {
        let logits = network::forward_bound(tape, shape, leaf, xadv_id)?;
        let ce = network::cross_entropy(tape, logits, labels)?;
        adv_logits.push(logits);
        ce_sum = Some(match ce_sum {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    let ce_mean = tape.scale(ce_sum.expect("n >= 1"), 1.0 / n as f64)?;

    if opts.effective_lambda == 0.0 {
        return Ok(ObjectiveParts {
            total: ce_mean,
            cross_entropy: ce_mean,
            penalty: None,
            leaves,
        });
    }

    let x_id = tape.constant(x.clone());
    let mut clean_probs = Vec::with_capacity(n);
    let mut adv_probs = Vec::with_capacity(n);
    for (leaf, &adv_l) in leaves.iter().zip(&adv_logits) {
        let clean_logits = network::forward_bound(tape, shape, leaf, x_id)?;
        clean_probs.push(softmax_rows(tape, clean_logits)?);
        adv_probs.push(softmax_rows(tape, adv_l)?);
    }
    let ig_clean = information_gain_rows(tape, &clean_probs, opts.entropy_floor)?;
    let ig_adv = information_gain_rows(tape, &adv_probs, opts.entropy_floor)?;

    let penalty = if opts.batch_mean_penalty {
        let mc = tape.mean(ig_clean)?;
        let ma = tape.mean(ig_adv)?;
        let diff = tape.sub(mc, ma)?;
        tape.abs(diff)?
    } else {
        let diff = tape.sub(ig_clean, ig_adv)?;
        let per_instance = tape.abs(diff)?;
        tape.mean(per_instance)?
    };

    let weighted = tape.scale(penalty, opts.effective_lambda)?;
    let total = tape.add(ce_mean, weighted)?;
    Ok(ObjectiveParts {
        total,
        cross_entropy: ce_mean,
        penalty: Some(penalty),
        leaves,
    })
}

/// Evaluate the objective without keeping the recording: returns
/// (total, cross-entropy part, penalty part).
pub fn ig_objective_value(
    ensemble: &ParticleEnsemble,
    x: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    opts: &ObjectiveOptions,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let parts = ig_objective(&mut tape, ensemble, x, x_adv, labels, opts)?;
    let total = tape.value(parts.total).item();
    let ce = tape.value(parts.cross_entropy).item();
    let pen = parts.penalty.map(|p| tape.value(p).item()).unwrap_or(0.0);
    Ok((total, ce, pen))
}
