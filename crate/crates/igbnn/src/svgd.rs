//! Stein variational gradient descent over parameter particles.
//!
//! The ensemble update moves every particle along
//!
//! ```text
//! phi(theta_i) = sum_j [ k(theta_j, theta_i) * g_j
//!                        - (gamma / n) * grad_{theta_j} k(theta_j, theta_i) ]
//! theta_i <- theta_i - eps * phi(theta_i)
//! ```
//!
//! where `g_j` is the loss gradient at particle j and `k` is an RBF kernel
//! whose bandwidth is the median pairwise particle distance, recomputed
//! every step. The kernel-gradient term is a repulsive force: it pushes
//! particles apart and keeps the ensemble from collapsing onto one mode.
//! The driving term is deliberately not divided by `n` and `gamma` scales
//! only the repulsion; with `n = 1` the update degenerates to plain
//! gradient descent exactly.

use crate::network::{FlatParams, NetworkShape};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SvgdError {
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("particle length mismatch: {got} vs {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("need at least {need} particles, got {got}")]
    TooFewParticles { need: usize, got: usize },
    #[error("expected {want} gradients, got {got}")]
    GradCount { got: usize, want: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SvgdError>;

/// The SVGD posterior approximation: n flat parameter vectors plus the
/// network shape they instantiate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    shape: NetworkShape,
    particles: Vec<FlatParams>,
}

impl ParticleEnsemble {
    pub fn new(shape: NetworkShape, particles: Vec<FlatParams>) -> Result<Self> {
        if particles.is_empty() {
            return Err(SvgdError::TooFewParticles { need: 1, got: 0 });
        }
        let want = shape.param_count();
        for p in &particles {
            if p.len() != want {
                return Err(SvgdError::LengthMismatch {
                    got: p.len(),
                    want,
                });
            }
            if !p.is_finite() {
                return Err(SvgdError::InvalidConfig("non-finite particle".into()));
            }
        }
        Ok(ParticleEnsemble { shape, particles })
    }

    /// Seeded He-init ensemble with particle-distinct seeds.
    pub fn init(shape: NetworkShape, n: usize, seed: u64) -> Result<Self> {
        let particles = crate::network::init_particles(&shape, n, seed);
        ParticleEnsemble::new(shape, particles)
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[FlatParams] {
        &self.particles
    }

    pub fn particle(&self, i: usize) -> &FlatParams {
        &self.particles[i]
    }

    pub fn particles_mut(&mut self) -> &mut [FlatParams] {
        &mut self.particles
    }
}

/// Step-size handling for [`apply_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// Fixed step size. Reduction tests are exact in this mode.
    Constant,
    /// Elementwise accumulated-squared-direction scaling. The accumulator
    /// initializes to 1, so the first step coincides with constant mode.
    Adaptive,
}

/// Repulsion weight, step size and bandwidth policy for the SVGD update.
#[derive(Clone, Debug)]
pub struct SvgdConfig {
    /// Repulsive-force weight (gamma >= 0).
    pub gamma: f64,
    /// Step size (> 0).
    pub step_size: f64,
    pub step_mode: StepMode,
    /// Fixed kernel bandwidth; `None` selects the median heuristic.
    pub bandwidth: Option<f64>,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        SvgdConfig {
            gamma: 0.01,
            step_size: 0.1,
            step_mode: StepMode::Constant,
            bandwidth: None,
        }
    }
}

impl SvgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(SvgdError::InvalidConfig(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(SvgdError::InvalidConfig(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0) {
                return Err(SvgdError::BadBandwidth(h));
            }
        }
        Ok(())
    }
}

/// RBF kernel `k(a, b) = exp(-||a - b||^2 / (2 h^2))`, in (0, 1].
pub fn rbf_kernel(a: &[f64], b: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(SvgdError::BadBandwidth(h));
    }
    if a.len() != b.len() {
        return Err(SvgdError::LengthMismatch {
            got: b.len(),
            want: a.len(),
        });
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-sq / (2.0 * h * h)).exp())
}

/// Gradient of the RBF kernel with respect to its first argument:
/// `grad_a k(a, b) = k(a, b) * (b - a) / h^2`.
pub fn rbf_kernel_grad(a: &[f64], b: &[f64], h: f64) -> Result<Vec<f64>> {
    let k = rbf_kernel(a, b, h)?;
    let h2 = h * h;
    Ok(a.iter().zip(b).map(|(x, y)| k * (y - x) / h2).collect())
}

/// Median of the n(n-1)/2 pairwise Euclidean distances. Even counts take
/// the mean of the two central order statistics. A zero median (coincident
/// particles) falls back to 1.0.
pub fn median_bandwidth(ensemble: &ParticleEnsemble) -> Result<f64> {
    let n = ensemble.len();
    if n < 2 {
        return Err(SvgdError::TooFewParticles { need: 2, got: n });
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let sq: f64 = ensemble.particles[i]
                .values()
                .iter()
                .zip(ensemble.particles[j].values())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dists.push(sq.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok(if median == 0.0 { 1.0 } else { median })
}

fn bandwidth_for(ensemble: &ParticleEnsemble, config: &SvgdConfig) -> Result<f64> {
    match config.bandwidth {
        Some(h) if h > 0.0 => Ok(h),
        Some(h) => Err(SvgdError::BadBandwidth(h)),
        None if ensemble.len() >= 2 => median_bandwidth(ensemble),
        // Single particle: kernel terms are k(t,t)=1 and grad 0 for any h.
        None => Ok(1.0),
    }
}

/// The per-particle update direction phi(theta_i). The caller applies
/// `theta_i <- theta_i - eps * phi(theta_i)` (see [`apply_step`]).
///
/// `loss_grads[j]` must be the gradient of the training objective with
/// respect to particle j.
pub fn svgd_direction(
    ensemble: &ParticleEnsemble,
    loss_grads: &[FlatParams],
    config: &SvgdConfig,
) -> Result<Vec<FlatParams>> {
    config.validate()?;
    let n = ensemble.len();
    if loss_grads.len() != n {
        return Err(SvgdError::GradCount {
            got: loss_grads.len(),
            want: n,
        });
    }
    let dim = ensemble.shape.param_count();
    for g in loss_grads {
        if g.len() != dim {
            return Err(SvgdError::LengthMismatch {
                got: g.len(),
                want: dim,
            });
        }
    }

    let h = bandwidth_for(ensemble, config)?;
    let h2 = h * h;
    let repulsion = config.gamma / n as f64;

    // Symmetric kernel matrix.
    let mut kernel = vec![1.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let k = rbf_kernel(
                ensemble.particles[i].values(),
                ensemble.particles[j].values(),
                h,
            )?;
            kernel[i * n + j] = k;
            kernel[j * n + i] = k;
        }
    }

    let mut directions = Vec::with_capacity(n);
    for i in 0..n {
        let theta_i = ensemble.particles[i].values();
        let mut phi = vec![0.0; dim];
        for j in 0..n {
            let k_ji = kernel[j * n + i];
            let theta_j = ensemble.particles[j].values();
            let g_j = loss_grads[j].values();
            // grad_{theta_j} k(theta_j, theta_i) = k * (theta_i - theta_j) / h^2
            for d in 0..dim {
                phi[d] += k_ji * (g_j[d] - repulsion * (theta_i[d] - theta_j[d]) / h2);
            }
        }
        directions.push(FlatParams::new(phi).map_err(|_| SvgdError::NonFinite("svgd direction"))?);
    }
    Ok(directions)
}

/// Adaptive-step accumulators, one per particle, initialized to 1 so the
/// first adaptive step equals the constant step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepState {
    accum: Vec<Vec<f64>>,
}

impl StepState {
    pub fn new(n: usize, dim: usize) -> Self {
        StepState {
            accum: vec![vec![1.0; dim]; n],
        }
    }

    pub fn matches(&self, n: usize, dim: usize) -> bool {
        self.accum.len() == n && self.accum.iter().all(|a| a.len() == dim)
    }

    pub(crate) fn accumulators(&self) -> &[Vec<f64>] {
        &self.accum
    }

    pub(crate) fn from_accumulators(accum: Vec<Vec<f64>>) -> Self {
        StepState { accum }
    }
}

/// Apply one ensemble step along `directions`.
pub fn apply_step(
    ensemble: &mut ParticleEnsemble,
    directions: &[FlatParams],
    config: &SvgdConfig,
    state: &mut StepState,
) -> Result<()> {
    let n = ensemble.len();
    let dim = ensemble.shape.param_count();
    if directions.len() != n {
        return Err(SvgdError::GradCount {
            got: directions.len(),
            want: n,
        });
    }
    if !state.matches(n, dim) {
        return Err(SvgdError::InvalidConfig(
            "step state does not match ensemble".into(),
        ));
    }
    let eps = config.step_size;
    for (i, dir) in directions.iter().enumerate() {
        let theta = ensemble.particles[i].values_mut();
        match config.step_mode {
            StepMode::Constant => {
                for (t, d) in theta.iter_mut().zip(dir.values()) {
                    *t -= eps * d;
                }
            }
            StepMode::Adaptive => {
                let acc = &mut state.accum[i];
                for ((t, d), a) in theta.iter_mut().zip(dir.values()).zip(acc.iter_mut()) {
                    *t -= eps * d / a.sqrt();
                    *a += d * d;
                }
            }
        }
    }
    Ok(())
}
