//! Adversarial example generation: FGSM, PGD, expectation-over-particles
//! PGD, and a query-limited black-box square-perturbation search.
//!
//! All attacks operate on a batch at once (batch elements are independent)
//! and treat model parameters as constants: only input gradients are
//! recorded. Every emitted [`AdversarialBatch`] is validated against the
//! norm-ball and input-bound invariants as a checked postcondition.

use crate::network::{self, Binding, FlatParams, NetworkShape, PredictiveDistribution};
use crate::svgd::ParticleEnsemble;
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient during {0}")]
    NonFiniteGradient(&'static str),
    #[error("black-box oracle returned an invalid distribution: {0}")]
    BadOracle(String),
    #[error("postcondition violated: {0}")]
    Postcondition(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// Perturbation norm of the threat model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    LInf,
    L2,
}

/// Closed interval of valid input values, applied componentwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const UNIT: Bounds = Bounds { lo: 0.0, hi: 1.0 };

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// The adversary's contract: norm, budget, step size, iteration count,
/// projection domain and (for the black-box search) a query budget.
#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub norm: Norm,
    /// Perturbation budget epsilon >= 0.
    pub eps_max: f64,
    /// Per-iteration step size alpha > 0.
    pub alpha: f64,
    /// Iteration count (training-time and test-time differ by convention).
    pub steps: usize,
    /// Start from a uniform point inside the ball instead of the origin.
    pub random_start: bool,
    pub input_bounds: Bounds,
    /// Oracle-call budget for the black-box attack.
    pub query_budget: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            norm: Norm::LInf,
            eps_max: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            random_start: false,
            input_bounds: Bounds::UNIT,
            query_budget: 1000,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_max >= 0.0) {
            return Err(AttackError::InvalidConfig(format!(
                "eps_max must be >= 0, got {}",
                self.eps_max
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(AttackError::InvalidConfig(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.input_bounds.lo < self.input_bounds.hi) {
            return Err(AttackError::InvalidConfig(format!(
                "input bounds [{}, {}] are empty",
                self.input_bounds.lo, self.input_bounds.hi
            )));
        }
        Ok(())
    }

    /// Stable hash over the fields that define the threat model.
    pub fn digest(&self) -> u64 {
        let repr = format!(
            "{:?}|{:.17e}|{:.17e}|{}|{}|{:.17e}|{:.17e}|{}",
            self.norm,
            self.eps_max,
            self.alpha,
            self.steps,
            self.random_start,
            self.input_bounds.lo,
            self.input_bounds.hi,
            self.query_budget
        );
        crate::seeds::fnv1a64(repr.as_bytes())
    }
}

/// Which attack produced a batch; recorded as provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Identity,
    Fgsm,
    Pgd,
    EotPgd,
    Square,
}

/// Provenance of an adversarial batch: attack kind plus a digest of the
/// config that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub kind: AttackKind,
    pub config_digest: u64,
}

/// Adversarial inputs with provenance; guaranteed inside the epsilon-ball
/// around the source and inside the input bounds.
#[derive(Clone, Debug)]
pub struct AdversarialBatch {
    x_adv: Tensor,
    provenance: Provenance,
}

impl AdversarialBatch {
    /// Validate the ball and bound invariants before admitting the batch.
    pub fn new(
        x_adv: Tensor,
        origin: &Tensor,
        config: &AttackConfig,
        kind: AttackKind,
    ) -> Result<Self> {
        if x_adv.shape() != origin.shape() {
            return Err(AttackError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                x_adv.shape(),
                origin.shape()
            )));
        }
        let tol = 1e-9;
        let rows = origin.shape()[0];
        for i in 0..rows {
            let xa = x_adv.row(i);
            let xo = origin.row(i);
            let dist = match config.norm {
                Norm::LInf => xa
                    .iter()
                    .zip(xo)
                    .map(|(a, o)| (a - o).abs())
                    .fold(0.0, f64::max),
                Norm::L2 => xa
                    .iter()
                    .zip(xo)
                    .map(|(a, o)| (a - o) * (a - o))
                    .sum::<f64>()
                    .sqrt(),
            };
            if dist > config.eps_max + tol {
                return Err(AttackError::Postcondition(format!(
                    "row {i} leaves the epsilon ball: {dist} > {}",
                    config.eps_max
                )));
            }
            if xa.iter().any(|&v| !config.input_bounds.contains(v)) {
                return Err(AttackError::Postcondition(format!(
                    "row {i} leaves the input bounds"
                )));
            }
        }
        Ok(AdversarialBatch {
            x_adv,
            provenance: Provenance {
                kind,
                config_digest: config.digest(),
            },
        })
    }

    pub fn x_adv(&self) -> &Tensor {
        &self.x_adv
    }

    pub fn into_tensor(self) -> Tensor {
        self.x_adv
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// sign with sign(0) = 0: stationary coordinates do not move.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Project a candidate back onto the epsilon-ball around `origin`, then
/// clamp into the input bounds (ball first, bounds second).
pub fn project(candidate: &Tensor, origin: &Tensor, config: &AttackConfig) -> Result<Tensor> {
    if candidate.shape() != origin.shape() {
        return Err(AttackError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            candidate.shape(),
            origin.shape()
        )));
    }
    let b = config.input_bounds;
    let rows = origin.shape()[0];
    let mut out = Vec::with_capacity(candidate.len());
    for i in 0..rows {
        let xc = candidate.row(i);
        let xo = origin.row(i);
        match config.norm {
            Norm::LInf => {
                for (c, o) in xc.iter().zip(xo) {
                    let v = c.clamp(o - config.eps_max, o + config.eps_max);
                    out.push(v.clamp(b.lo, b.hi));
                }
            }
            Norm::L2 => {
                let dist: f64 = xc
                    .iter()
                    .zip(xo)
                    .map(|(c, o)| (c - o) * (c - o))
                    .sum::<f64>()
                    .sqrt();
                let scale = if dist > config.eps_max && dist > 0.0 {
                    config.eps_max / dist
                } else {
                    1.0
                };
                for (c, o) in xc.iter().zip(xo) {
                    let v = o + (c - o) * scale;
                    out.push(v.clamp(b.lo, b.hi));
                }
            }
        }
    }
    Ok(Tensor::new(origin.shape().to_vec(), out)?)
}

/// Mean over particles of the input gradient of the batch cross-entropy.
/// Particles are processed on independent tapes (order-preserving parallel
/// map, then a sequential mean in particle order, so results do not depend
/// on thread count).
fn ensemble_input_gradient(
    ensemble: &ParticleEnsemble,
    x: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let grads: Vec<Result<Tensor>> = ensemble
        .particles()
        .par_iter()
        .map(|params| input_gradient(ensemble.shape(), params, x, labels))
        .collect();
    let mut acc: Option<Vec<f64>> = None;
    for g in grads {
        let g = g?;
        match &mut acc {
            None => acc = Some(g.data().to_vec()),
            Some(a) => {
                for (av, gv) in a.iter_mut().zip(g.data()) {
                    *av += gv;
                }
            }
        }
    }
    let mut mean = acc.expect("ensemble is non-empty");
    let n = ensemble.len() as f64;
    for v in &mut mean {
        *v /= n;
    }
    Ok(Tensor::new(x.shape().to_vec(), mean)?)
}

/// Input gradient of the batch cross-entropy for a single parameter vector.
fn input_gradient(
    shape: &NetworkShape,
    params: &FlatParams,
    x: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x_id = tape.leaf(x.clone());
    let (logits, _) = network::forward(&mut tape, shape, params, Binding::Constant, x_id)?;
    let loss = network::cross_entropy(&mut tape, logits, labels)?;
    let grads = tape.backward(loss)?;
    let g = grads.wrt(x_id).clone();
    if !g.is_finite() {
        return Err(AttackError::NonFiniteGradient("input gradient"));
    }
    Ok(g)
}

fn random_start_point(
    x: &Tensor,
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.len());
    match config.norm {
        Norm::LInf => {
            for &v in x.data() {
                let d = rng.random_range(-config.eps_max..=config.eps_max);
                data.push(v + d);
            }
        }
        Norm::L2 => {
            // Uniform in the ball per row: Gaussian direction, radius ~ u^(1/d).
            let rows = x.shape()[0];
            let dim = x.shape()[1];
            for i in 0..rows {
                let dir: Vec<f64> = (0..dim)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let u: f64 = rng.random_range(0.0..1.0);
                let radius = config.eps_max * u.powf(1.0 / dim as f64);
                for (j, &o) in x.row(i).iter().enumerate() {
                    data.push(o + dir[j] / norm * radius);
                }
            }
        }
    }
    let candidate = Tensor::new(x.shape().to_vec(), data)?;
    project(&candidate, x, config)
}

fn iterate_signed_steps<G>(
    x: &Tensor,
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
    mut grad_fn: G,
) -> Result<Tensor>
where
    G: FnMut(&Tensor) -> Result<Tensor>,
{
    config.validate()?;
    let mut current = if config.random_start && config.eps_max > 0.0 {
        random_start_point(x, config, rng)?
    } else {
        x.clone()
    };
    for _ in 0..config.steps {
        let g = grad_fn(&current)?;
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(g.data())
            .map(|(v, gv)| v + config.alpha * sign(*gv))
            .collect();
        let candidate = Tensor::new(current.shape().to_vec(), stepped)?;
        current = project(&candidate, x, config)?;
    }
    Ok(current)
}

/// Single-step sign-gradient attack. For ensembles the gradient is the
/// particle-averaged input gradient.
pub fn fgsm(
    ensemble: &ParticleEnsemble,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<AdversarialBatch> {
    config.validate()?;
    let g = ensemble_input_gradient(ensemble, x, labels)?;
    let stepped: Vec<f64> = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(v, gv)| v + config.eps_max * sign(*gv))
        .collect();
    let candidate = Tensor::new(x.shape().to_vec(), stepped)?;
    let projected = project(&candidate, x, config)?;
    AdversarialBatch::new(projected, x, config, AttackKind::Fgsm)
}

/// Iterated projected sign-gradient attack against a single parameter
/// vector (the point-estimate threat).
pub fn pgd(
    shape: &NetworkShape,
    params: &FlatParams,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialBatch> {
    let x_adv = iterate_signed_steps(x, config, rng, |current| {
        input_gradient(shape, params, current, labels)
    })?;
    AdversarialBatch::new(x_adv, x, config, AttackKind::Pgd)
}

/// PGD whose per-step gradient is the exact mean of the input gradients
/// over all particles — the ensemble-aware white-box attack. With n = 1 the
/// output is bitwise identical to [`pgd`].
pub fn eot_pgd(
    ensemble: &ParticleEnsemble,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialBatch> {
    let x_adv = iterate_signed_steps(x, config, rng, |current| {
        ensemble_input_gradient(ensemble, current, labels)
    })?;
    AdversarialBatch::new(x_adv, x, config, AttackKind::EotPgd)
}

/// Margin loss of a single-row distribution: max other-class probability
/// minus true-class probability. Positive means misclassified.
fn margin_loss(probs: &PredictiveDistribution, label: usize) -> f64 {
    let row = probs.row(0);
    let p_true = row[label];
    let p_other = row
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != label)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    p_other - p_true
}

/// Gradient-free random search: propose axis-aligned runs of coordinates
/// set to +-eps, accept whenever the candidate's margin loss does not drop
/// below the incumbent's. The patch length starts at the full input width
/// and halves every quarter of the budget (minimum 1). Consumes at most
/// `query_budget` oracle calls per instance.
pub fn square_attack<F>(
    predict_fn: F,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialBatch>
where
    F: Fn(&Tensor) -> Result<PredictiveDistribution>,
{
    config.validate()?;
    if config.norm != Norm::LInf {
        return Err(AttackError::InvalidConfig(
            "square attack supports the linf norm only".into(),
        ));
    }
    let rows = x.shape()[0];
    let dim = x.shape()[1];
    if labels.len() != rows {
        return Err(AttackError::ShapeMismatch(format!(
            "{rows} rows vs {} labels",
            labels.len()
        )));
    }
    let b = config.input_bounds;

    let oracle = |row: &[f64]| -> Result<PredictiveDistribution> {
        let t = Tensor::matrix(1, dim, row.to_vec())?;
        let p = predict_fn(&t)?;
        if p.batch() != 1 {
            return Err(AttackError::BadOracle(format!(
                "expected 1 row, got {}",
                p.batch()
            )));
        }
        Ok(p)
    };

    let mut out = Vec::with_capacity(x.len());
    for i in 0..rows {
        let origin = x.row(i).to_vec();
        let label = labels[i];
        let budget = config.query_budget;
        let mut incumbent = origin.clone();
        let mut queries = 0;
        let mut best_loss = f64::NEG_INFINITY;

        if budget > 0 {
            best_loss = margin_loss(&oracle(&incumbent)?, label);
            queries += 1;
        }

        while queries < budget && best_loss <= 0.0 {
            // Patch side halves every quarter of the budget, minimum 1.
            let quarter = (4 * queries / budget.max(1)).min(3) as u32;
            let side = (dim >> quarter).max(1);
            let start = if dim > side {
                rng.random_range(0..=dim - side)
            } else {
                0
            };
            // Patch coordinates jump to origin +- eps (clamped into bounds,
            // which only shrinks the perturbation); the rest keeps the
            // incumbent, so the candidate stays inside the ball by
            // construction.
            let mut candidate = incumbent.clone();
            for (j, c) in candidate.iter_mut().enumerate().skip(start).take(side) {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                *c = (origin[j] + s * config.eps_max).clamp(b.lo, b.hi);
            }
            let loss = margin_loss(&oracle(&candidate)?, label);
            queries += 1;
            if loss >= best_loss {
                best_loss = loss;
                incumbent = candidate;
            }
        }
        out.extend_from_slice(&incumbent);
    }

    let x_adv = Tensor::new(x.shape().to_vec(), out)?;
    AdversarialBatch::new(x_adv, x, config, AttackKind::Square)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkShape;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// A 2-input linear 2-class model with logit margin w . x: params for
    /// NetworkShape [2, 2] with weights [[w0, -w0], [w1, -w1]] and no bias,
    /// so class 0's logit minus class 1's is 2 w . x.
    fn linear_model(w: [f64; 2]) -> (NetworkShape, FlatParams) {
        let shape = NetworkShape::mlp(vec![2, 2]).unwrap();
        let params =
            FlatParams::new(vec![w[0], -w[0], w[1], -w[1], 0.0, 0.0]).unwrap();
        (shape, params)
    }

    fn single(shape: &NetworkShape, params: &FlatParams) -> ParticleEnsemble {
        ParticleEnsemble::new(shape.clone(), vec![params.clone()]).unwrap()
    }

    #[test]
    fn project_is_identity_inside_ball() {
        let config = AttackConfig {
            eps_max: 0.5,
            ..Default::default()
        };
        let origin = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let candidate = Tensor::matrix(1, 2, vec![0.6, 0.4]).unwrap();
        let p = project(&candidate, &origin, &config).unwrap();
        assert_eq!(p.data(), candidate.data());
    }

    #[test]
    fn project_linf_clamp_arithmetic() {
        let config = AttackConfig {
            eps_max: 0.1,
            ..Default::default()
        };
        let origin = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let candidate = Tensor::matrix(1, 1, vec![0.9]).unwrap();
        let p = project(&candidate, &origin, &config).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn project_l2_radial_rescale() {
        let config = AttackConfig {
            norm: Norm::L2,
            eps_max: 1.0,
            input_bounds: Bounds { lo: -10.0, hi: 10.0 },
            ..Default::default()
        };
        let origin = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let candidate = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let p = project(&candidate, &origin, &config).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-12);
        assert!((p.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn fgsm_zero_budget_is_identity() {
        let (shape, params) = linear_model([1.0, -0.5]);
        let ensemble = single(&shape, &params);
        let x = Tensor::matrix(1, 2, vec![0.4, 0.6]).unwrap();
        let config = AttackConfig {
            eps_max: 0.0,
            ..Default::default()
        };
        let batch = fgsm(&ensemble, &x, &[0], &config).unwrap();
        assert_eq!(batch.x_adv().data(), x.data());
    }

    #[test]
    fn fgsm_moves_against_the_margin_on_linear_model() {
        // For label 0 the loss increases when w . x decreases, so FGSM must
        // step along -sign(w).
        let (shape, params) = linear_model([1.0, -2.0]);
        let ensemble = single(&shape, &params);
        let x = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let config = AttackConfig {
            eps_max: 0.1,
            ..Default::default()
        };
        let batch = fgsm(&ensemble, &x, &[0], &config).unwrap();
        assert!((batch.x_adv().data()[0] - 0.4).abs() < 1e-12);
        assert!((batch.x_adv().data()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn fgsm_never_helps_the_defender_on_linear_model() {
        use rand::Rng;
        let mut r = rng(9);
        for _ in 0..20 {
            let (shape, params) =
                linear_model([r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
            let ensemble = single(&shape, &params);
            let x =
                Tensor::matrix(1, 2, vec![r.random_range(0.2..0.8), r.random_range(0.2..0.8)])
                    .unwrap();
            let label = [r.random_range(0..2)];
            let config = AttackConfig {
                eps_max: 0.05,
                ..Default::default()
            };
            let batch = fgsm(&ensemble, &x, &label, &config).unwrap();

            let before = network::cross_entropy_value(
                &network::forward_value(&shape, &params, &x).unwrap(),
                &label,
            )
            .unwrap();
            let after = network::cross_entropy_value(
                &network::forward_value(&shape, &params, batch.x_adv()).unwrap(),
                &label,
            )
            .unwrap();
            assert!(after >= before - 1e-12, "{after} < {before}");
        }
    }

    #[test]
    fn pgd_zero_steps_is_identity() {
        let (shape, params) = linear_model([1.0, 1.0]);
        let x = Tensor::matrix(2, 2, vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        let config = AttackConfig {
            steps: 0,
            ..Default::default()
        };
        let batch = pgd(&shape, &params, &x, &[0, 1], &config, &mut rng(0)).unwrap();
        assert_eq!(batch.x_adv().data(), x.data());
    }

    #[test]
    fn pgd_reaches_linear_worst_case_in_one_big_step() {
        let (shape, params) = linear_model([0.7, -1.3]);
        let x = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let eps = 0.1;
        let config = AttackConfig {
            eps_max: eps,
            alpha: eps * 1.5,
            steps: 1,
            ..Default::default()
        };
        let batch = pgd(&shape, &params, &x, &[0], &config, &mut rng(0)).unwrap();
        // Worst case for label 0: x - eps * sign(w), clamped.
        assert!((batch.x_adv().data()[0] - 0.4).abs() < 1e-12);
        assert!((batch.x_adv().data()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pgd_iterates_respect_ball_and_bounds() {
        let shape = NetworkShape::mlp(vec![2, 8, 2]).unwrap();
        let params = network::init_params(&shape, 21);
        let x = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.99, 0.5, 0.0, 1.0, 0.45, 0.55]).unwrap();
        let config = AttackConfig {
            eps_max: 0.3,
            alpha: 0.15,
            steps: 12,
            random_start: true,
            ..Default::default()
        };
        // AdversarialBatch::new re-checks the postcondition; also verify
        // fields by hand.
        let batch = pgd(&shape, &params, &x, &[0, 1, 0, 1], &config, &mut rng(3)).unwrap();
        for (a, o) in batch.x_adv().data().iter().zip(x.data()) {
            assert!((a - o).abs() <= config.eps_max + 1e-9);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn eot_pgd_single_particle_is_bitwise_pgd() {
        let shape = NetworkShape::mlp(vec![2, 6, 2]).unwrap();
        let params = network::init_params(&shape, 8);
        let ensemble = single(&shape, &params);
        let x = Tensor::matrix(3, 2, vec![0.3, 0.7, 0.2, 0.9, 0.55, 0.45]).unwrap();
        let labels = [0, 1, 1];
        let config = AttackConfig {
            eps_max: 0.08,
            alpha: 0.02,
            steps: 7,
            ..Default::default()
        };
        let a = pgd(&shape, &params, &x, &labels, &config, &mut rng(5)).unwrap();
        let b = eot_pgd(&ensemble, &x, &labels, &config, &mut rng(5)).unwrap();
        for (u, v) in a.x_adv().data().iter().zip(b.x_adv().data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn eot_pgd_opposite_gradients_cancel() {
        // Particle 2 is particle 1 with the class columns swapped, and x
        // sits on the shared decision boundary (w . x = 0), so the two
        // input gradients are exactly opposite there. The mean gradient is
        // 0, sign 0 moves nothing, and x stays on the boundary for every
        // iteration.
        let (shape, p1) = linear_model([1.0, -0.5]);
        let p2 = FlatParams::new(vec![-1.0, 1.0, 0.5, -0.5, 0.0, 0.0]).unwrap();
        let ensemble = ParticleEnsemble::new(shape, vec![p1, p2]).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.5, 1.0]).unwrap();
        let config = AttackConfig {
            eps_max: 0.2,
            alpha: 0.05,
            steps: 5,
            ..Default::default()
        };
        let batch = eot_pgd(&ensemble, &x, &[0], &config, &mut rng(1)).unwrap();
        assert_eq!(batch.x_adv().data(), x.data());
    }

    #[test]
    fn square_attack_zero_budget_is_identity() {
        let (shape, params) = linear_model([1.0, 1.0]);
        let x = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let config = AttackConfig {
            query_budget: 0,
            ..Default::default()
        };
        let oracle =
            |t: &Tensor| Ok(network::predict_proba_for(&shape, &params, t).unwrap());
        let batch = square_attack(oracle, &x, &[0], &config, &mut rng(2)).unwrap();
        assert_eq!(batch.x_adv().data(), x.data());
    }

    #[test]
    fn square_attack_succeeds_on_crossable_linear_boundary() {
        // Margin 2 w.x with w = (1, 1); x on the positive side at (0.55,
        // 0.55) vs center (0.5, 0.5): crossing needs perturbation > 0.05 in
        // the mean coordinate, so eps = 0.2 is ample.
        let w = [1.0, 1.0];
        let shape = NetworkShape::mlp(vec![2, 2]).unwrap();
        let params =
            FlatParams::new(vec![w[0], -w[0], w[1], -w[1], -1.0, 1.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.55, 0.55]).unwrap();
        let config = AttackConfig {
            eps_max: 0.2,
            query_budget: 500,
            ..Default::default()
        };
        let oracle =
            |t: &Tensor| Ok(network::predict_proba_for(&shape, &params, t).unwrap());

        let mut successes = 0;
        let total = 20;
        for seed in 0..total {
            let batch = square_attack(oracle, &x, &[0], &config, &mut rng(seed)).unwrap();
            let p = network::predict_proba_for(&shape, &params, batch.x_adv()).unwrap();
            if crate::network::argmax_row(p.row(0)) != 0 {
                successes += 1;
            }
        }
        assert!(
            successes * 10 >= total * 9,
            "only {successes}/{total} seeds succeeded"
        );
    }

    #[test]
    fn square_attack_incumbent_loss_is_monotone() {
        // Track the margin loss of the incumbent by replaying the
        // acceptance rule through the oracle: the final incumbent can never
        // be worse than the clean input.
        let shape = NetworkShape::mlp(vec![2, 4, 2]).unwrap();
        let params = network::init_params(&shape, 77);
        let x = Tensor::matrix(1, 2, vec![0.3, 0.6]).unwrap();
        let config = AttackConfig {
            eps_max: 0.15,
            query_budget: 200,
            ..Default::default()
        };
        let oracle =
            |t: &Tensor| Ok(network::predict_proba_for(&shape, &params, t).unwrap());
        let batch = square_attack(oracle, &x, &[1], &config, &mut rng(6)).unwrap();

        let loss_of = |t: &Tensor| {
            let p = network::predict_proba_for(&shape, &params, t).unwrap();
            margin_loss(&p, 1)
        };
        assert!(loss_of(batch.x_adv()) >= loss_of(&x) - 1e-12);
    }

    #[test]
    fn adversarial_batch_rejects_ball_violation() {
        let config = AttackConfig {
            eps_max: 0.01,
            ..Default::default()
        };
        let origin = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let bad = Tensor::matrix(1, 2, vec![0.9, 0.5]).unwrap();
        assert!(matches!(
            AdversarialBatch::new(bad, &origin, &config, AttackKind::Pgd),
            Err(AttackError::Postcondition(_))
        ));
    }
}
