//! Robustness and risk diagnostics for a trained ensemble: empirical and
//! adversarial risk, the risk gap and its upper bound, per-particle
//! transfer matrices, and robustness-versus-budget curves.
//!
//! Risks use the expected 0-1 loss under the predictive distribution:
//! `E[1(y' != y)] = 1 - p(y_true | x, theta)`, averaged over particles and
//! instances. The argmax 0-1 variant (ensemble-mean prediction) is emitted
//! alongside it.
//!
//! The bound on `|R_adv - R|` evaluated here is
//!
//! ```text
//! 1 - E_(x,y) [ exp( mean_theta[r_theta] - lambda * |IG(x) - IG(x_adv)| ) ]
//! r_theta = sum_c p(c | x, theta) * ln p(c | x_adv, theta)
//! ```
//!
//! with probabilities floored at 1e-12 before the log. Since `r_theta <= 0`
//! and `lambda >= 0`, the exponent is nonpositive and the bound lies in
//! [0, 1]. The exp-free linearization `E[-arg]` used as a training
//! surrogate is reported next to it.

use crate::attacks::{self, AttackConfig, AttackKind};
use crate::data::LabeledDataset;
use crate::infogain;
use crate::network::{self, PredictiveDistribution};
use crate::svgd::ParticleEnsemble;
use crate::tensor::Tensor;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {need} particles, got {got}")]
    TooFewParticles { need: usize, got: usize },
    #[error("dataset dim {got} does not match network input {want}")]
    DimMismatch { got: usize, want: usize },
    #[error(transparent)]
    Attack(#[from] crate::attacks::AttackError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error(transparent)]
    InfoGain(#[from] crate::infogain::InfoGainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Attack chunk width: datasets are attacked in fixed-size row chunks so
/// chunks can run in parallel with per-chunk derived RNG streams. Chunking
/// never changes results (batch elements are independent and the chunk
/// width is fixed).
const CHUNK: usize = 64;

/// What a metrics record is indexed by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordTag {
    Epoch(u64),
    Epsilon(f64),
    Final,
}

/// Per-epoch or per-epsilon scalar diagnostics, serialized as one JSON
/// object per line in metrics streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub tag: RecordTag,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub risk: f64,
    pub risk_adv: f64,
    pub gap: f64,
    pub bound_rhs: f64,
    pub bound_rhs_linear: f64,
    pub ig_clean: f64,
    pub ig_adv: f64,
    pub risk_argmax: f64,
    pub risk_adv_argmax: f64,
}

/// Proposition-style bound value plus its exp-free linearization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValues {
    pub bound: f64,
    pub linearized: f64,
}

/// n x n robustness of target particles against adversarials crafted on
/// source particles. Entry (s, t) = accuracy of particle t on x_adv(s);
/// the diagonal is source-on-source.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix {
    n: usize,
    eps: f64,
    values: Vec<f64>,
}

impl TransferMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.values[source * self.n + target]
    }

    /// CSV with a header row/column of particle ids.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for t in 0..self.n {
            out.push_str(&format!(",t{t}"));
        }
        out.push('\n');
        for s in 0..self.n {
            out.push_str(&format!("s{s}"));
            for t in 0..self.n {
                out.push_str(&format!(",{}", self.get(s, t)));
            }
            out.push('\n');
        }
        out
    }

    /// Fraction of rows whose diagonal entry is the row minimum.
    pub fn diagonal_row_min_fraction(&self) -> f64 {
        let mut hits = 0;
        for s in 0..self.n {
            let diag = self.get(s, s);
            let min = (0..self.n)
                .map(|t| self.get(s, t))
                .fold(f64::INFINITY, f64::min);
            if diag <= min + 1e-12 {
                hits += 1;
            }
        }
        hits as f64 / self.n as f64
    }
}

fn check_dims(ensemble: &ParticleEnsemble, ds: &LabeledDataset) -> Result<()> {
    if ds.dim() != ensemble.shape().input_dim() {
        return Err(EvalError::DimMismatch {
            got: ds.dim(),
            want: ensemble.shape().input_dim(),
        });
    }
    Ok(())
}

/// Per-particle predictive distributions on a batch.
pub fn particle_distributions(
    ensemble: &ParticleEnsemble,
    x: &Tensor,
) -> Result<Vec<PredictiveDistribution>> {
    ensemble
        .particles()
        .iter()
        .map(|p| Ok(network::predict_proba_for(ensemble.shape(), p, x)?))
        .collect()
}

/// Ensemble-mean class probabilities (the Monte Carlo posterior
/// predictive).
pub fn mean_distribution(per_particle: &[PredictiveDistribution]) -> PredictiveDistribution {
    let n = per_particle.len();
    let batch = per_particle[0].batch();
    let k = per_particle[0].class_count();
    let mut mean = vec![0.0; batch * k];
    for d in per_particle {
        for (m, v) in mean.iter_mut().zip(d.probs().data()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    PredictiveDistribution::new(Tensor::new(vec![batch, k], mean).expect("finite mean"))
        .expect("mean of distributions is a distribution")
}

/// Accuracy of the ensemble-mean argmax prediction.
pub fn ensemble_accuracy(ensemble: &ParticleEnsemble, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let dists = particle_distributions(ensemble, x)?;
    let mean = mean_distribution(&dists);
    Ok(accuracy_of(&mean, labels))
}

fn accuracy_of(dist: &PredictiveDistribution, labels: &[usize]) -> f64 {
    let preds = dist.argmax();
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy of one particle's own argmax prediction.
pub fn particle_accuracy(
    ensemble: &ParticleEnsemble,
    particle: usize,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let d = network::predict_proba_for(ensemble.shape(), ensemble.particle(particle), x)?;
    Ok(accuracy_of(&d, labels))
}

fn smooth_risk_of(per_particle: &[PredictiveDistribution], labels: &[usize]) -> f64 {
    let n = per_particle.len() as f64;
    let batch = labels.len() as f64;
    let mut total = 0.0;
    for d in per_particle {
        for (i, &y) in labels.iter().enumerate() {
            total += 1.0 - d.row(i)[y];
        }
    }
    total / (n * batch)
}

/// Expected 0-1 misclassification under the predictive distribution,
/// averaged over particles and instances.
pub fn empirical_risk(ensemble: &ParticleEnsemble, ds: &LabeledDataset) -> Result<f64> {
    check_dims(ensemble, ds)?;
    let dists = particle_distributions(ensemble, &ds.features_tensor())?;
    Ok(smooth_risk_of(&dists, &ds.labels_usize()))
}

/// Attack a whole dataset with the ensemble-aware iterated attack, in
/// fixed-width chunks with per-chunk derived randomness.
pub fn eot_pgd_dataset(
    ensemble: &ParticleEnsemble,
    ds: &LabeledDataset,
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    check_dims(ensemble, ds)?;
    let labels = ds.labels_usize();
    let x = ds.features_tensor();
    let rows = ds.len();
    let dim = ds.dim();

    let chunk_ranges: Vec<(usize, usize)> = (0..rows)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(rows)))
        .collect();
    let chunk_seeds: Vec<u64> = chunk_ranges.iter().map(|_| rng.next_u64()).collect();

    let chunks: Vec<Result<Vec<f64>>> = chunk_ranges
        .par_iter()
        .zip(chunk_seeds)
        .map(|(&(start, end), seed)| {
            let xs = Tensor::new(
                vec![end - start, dim],
                x.data()[start * dim..end * dim].to_vec(),
            )
            .expect("slice of validated features");
            let mut chunk_rng = ChaCha8Rng::seed_from_u64(seed);
            let batch =
                attacks::eot_pgd(ensemble, &xs, &labels[start..end], config, &mut chunk_rng)?;
            Ok(batch.into_tensor().data().to_vec())
        })
        .collect();

    let mut out = Vec::with_capacity(rows * dim);
    for c in chunks {
        out.extend(c?);
    }
    Ok(Tensor::new(vec![rows, dim], out).expect("projected values are finite"))
}

/// As [`empirical_risk`] but on adversarial inputs generated per instance.
pub fn adversarial_risk(
    ensemble: &ParticleEnsemble,
    ds: &LabeledDataset,
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let x_adv = eot_pgd_dataset(ensemble, ds, config, rng)?;
    let dists = particle_distributions(ensemble, &x_adv)?;
    Ok(smooth_risk_of(&dists, &ds.labels_usize()))
}

/// |R_adv - R| on the given dataset and attack.
pub fn risk_gap(
    ensemble: &ParticleEnsemble,
    ds: &LabeledDataset,
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let r = empirical_risk(ensemble, ds)?;
    let r_adv = adversarial_risk(ensemble, ds, config, rng)?;
    Ok((r_adv - r).abs())
}

const PROB_FLOOR: f64 = 1e-12;

fn bound_from_distributions(
    clean: &[PredictiveDistribution],
    adv: &[PredictiveDistribution],
    lambda: f64,
) -> BoundValues {
    let n = clean.len();
    let batch = clean[0].batch();
    let k = clean[0].class_count();
    let mut sum_exp = 0.0;
    let mut sum_neg_arg = 0.0;
    for i in 0..batch {
        let mut r_mean = 0.0;
        for p in 0..n {
            let pc = clean[p].row(i);
            let pa = adv[p].row(i);
            for c in 0..k {
                r_mean += pc[c] * pa[c].max(PROB_FLOOR).ln();
            }
        }
        r_mean /= n as f64;

        let clean_rows: Vec<&[f64]> = clean.iter().map(|d| d.row(i)).collect();
        let adv_rows: Vec<&[f64]> = adv.iter().map(|d| d.row(i)).collect();
        let ig_c = infogain::information_gain(&clean_rows).expect("valid distribution rows");
        let ig_a = infogain::information_gain(&adv_rows).expect("valid distribution rows");

        let arg = r_mean - lambda * (ig_c - ig_a).abs();
        sum_exp += arg.exp();
        sum_neg_arg += -arg;
    }
    BoundValues {
        bound: 1.0 - sum_exp / batch as f64,
        linearized: sum_neg_arg / batch as f64,
    }
}

/// Upper bound on the risk gap, plus its exp-free linearization.
pub fn bound_rhs(
    ensemble: &ParticleEnsemble,
    ds: &LabeledDataset,
    config: &AttackConfig,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BoundValues> {
    let x_adv = eot_pgd_dataset(ensemble, ds, config, rng)?;
    let clean = particle_distributions(ensemble, &ds.features_tensor())?;
    let adv = particle_distributions(ensemble, &x_adv)?;
    Ok(bound_from_distributions(&clean, &adv, lambda))
}

/// Everything the per-epoch metrics record needs, computed from one shared
/// adversarial generation.
pub struct EvalSummary {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub risk: f64,
    pub risk_adv: f64,
    pub gap: f64,
    pub bound: BoundValues,
    pub ig_clean: f64,
    pub ig_adv: f64,
    pub risk_argmax: f64,
    pub risk_adv_argmax: f64,
}

impl EvalSummary {
    pub fn into_record(self, tag: RecordTag) -> MetricsRecord {
        MetricsRecord {
            tag,
            clean_acc: self.clean_acc,
            robust_acc: self.robust_acc,
            risk: self.risk,
            risk_adv: self.risk_adv,
            gap: self.gap,
            bound_rhs: self.bound.bound,
            bound_rhs_linear: self.bound.linearized,
            ig_clean: self.ig_clean,
            ig_adv: self.ig_adv,
            risk_argmax: self.risk_argmax,
            risk_adv_argmax: self.risk_adv_argmax,
        }
    }
}

/// Evaluate accuracy, risks, gap, bound and mean information gain in one
/// pass over the dataset.
pub fn evaluate(
    ensemble: &ParticleEnsemble,
    ds: &LabeledDataset,
    config: &AttackConfig,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EvalSummary> {
    check_dims(ensemble, ds)?;
    let labels = ds.labels_usize();
    let x = ds.features_tensor();
    let x_adv = eot_pgd_dataset(ensemble, ds, config, rng)?;

    let clean = particle_distributions(ensemble, &x)?;
    let adv = particle_distributions(ensemble, &x_adv)?;
    let clean_mean = mean_distribution(&clean);
    let adv_mean = mean_distribution(&adv);

    let risk = smooth_risk_of(&clean, &labels);
    let risk_adv = smooth_risk_of(&adv, &labels);
    let clean_acc = accuracy_of(&clean_mean, &labels);
    let robust_acc = accuracy_of(&adv_mean, &labels);
    let bound = bound_from_distributions(&clean, &adv, lambda);

    let ig_clean_values = infogain::information_gain_batch(&clean)?;
    let ig_adv_values = infogain::information_gain_batch(&adv)?;
    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    Ok(EvalSummary {
        clean_acc,
        robust_acc,
        risk,
        risk_adv,
        gap: (risk_adv - risk).abs(),
        bound,
        ig_clean: mean_of(&ig_clean_values),
        ig_adv: mean_of(&ig_adv_values),
        risk_argmax: 1.0 - clean_acc,
        risk_adv_argmax: 1.0 - robust_acc,
    })
}

/// Robust accuracy across an ascending list of budgets.
///
/// In nested mode an instance counts as fooled at epsilon as soon as any
/// attack at a budget <= epsilon fooled it (a perturbation feasible at a
/// smaller budget stays feasible at a larger one), so the curve is
/// non-increasing by construction.
pub fn robustness_curve(
    ensemble: &ParticleEnsemble,
    ds: &LabeledDataset,
    eps_list: &[f64],
    base: &AttackConfig,
    nested: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(f64, f64)>> {
    check_dims(ensemble, ds)?;
    if eps_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::Attack(attacks::AttackError::InvalidConfig(
            "epsilon list must be ascending".into(),
        )));
    }
    let labels = ds.labels_usize();
    let mut fooled = vec![false; ds.len()];
    let mut curve = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let config = AttackConfig {
            eps_max: eps,
            ..base.clone()
        };
        let x_adv = eot_pgd_dataset(ensemble, ds, &config, rng)?;
        let dists = particle_distributions(ensemble, &x_adv)?;
        let mean = mean_distribution(&dists);
        let preds = mean.argmax();
        let mut correct = 0;
        for i in 0..ds.len() {
            let wrong_now = preds[i] != labels[i];
            if nested {
                fooled[i] = fooled[i] || wrong_now;
                if !fooled[i] {
                    correct += 1;
                }
            } else if !wrong_now {
                correct += 1;
            }
        }
        curve.push((eps, correct as f64 / ds.len() as f64));
    }
    Ok(curve)
}

/// Per-particle transfer study: craft single-particle iterated attacks per
/// source and score every target particle on them. Sources always use the
/// point-estimate attack (asserted via provenance), never the
/// ensemble-aware one.
pub fn transfer_matrix(
    ensemble: &ParticleEnsemble,
    ds: &LabeledDataset,
    config: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TransferMatrix> {
    check_dims(ensemble, ds)?;
    let n = ensemble.len();
    if n < 2 {
        return Err(EvalError::TooFewParticles { need: 2, got: n });
    }
    let labels = ds.labels_usize();
    let x = ds.features_tensor();
    let dim = ds.dim();
    let rows = ds.len();

    let mut values = Vec::with_capacity(n * n);
    for s in 0..n {
        // Chunked single-particle attack, same scheme as eot_pgd_dataset.
        let chunk_ranges: Vec<(usize, usize)> = (0..rows)
            .step_by(CHUNK)
            .map(|st| (st, (st + CHUNK).min(rows)))
            .collect();
        let chunk_seeds: Vec<u64> = chunk_ranges.iter().map(|_| rng.next_u64()).collect();
        let chunks: Vec<Result<Vec<f64>>> = chunk_ranges
            .par_iter()
            .zip(chunk_seeds)
            .map(|(&(start, end), seed)| {
                let xs = Tensor::new(
                    vec![end - start, dim],
                    x.data()[start * dim..end * dim].to_vec(),
                )
                .expect("slice of validated features");
                let mut chunk_rng = ChaCha8Rng::seed_from_u64(seed);
                let batch = attacks::pgd(
                    ensemble.shape(),
                    ensemble.particle(s),
                    &xs,
                    &labels[start..end],
                    config,
                    &mut chunk_rng,
                )?;
                assert_eq!(
                    batch.provenance().kind,
                    AttackKind::Pgd,
                    "transfer sources must use the single-particle attack"
                );
                Ok(batch.into_tensor().data().to_vec())
            })
            .collect();
        let mut adv = Vec::with_capacity(rows * dim);
        for c in chunks {
            adv.extend(c?);
        }
        let x_adv = Tensor::new(vec![rows, dim], adv).expect("projected values are finite");

        for t in 0..n {
            values.push(particle_accuracy(ensemble, t, &x_adv, &labels)?);
        }
    }
    Ok(TransferMatrix {
        n,
        eps: config.eps_max,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{FlatParams, NetworkShape};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform_predictor(k: usize) -> ParticleEnsemble {
        // All-zero parameters emit zero logits, i.e. uniform probabilities.
        let shape = NetworkShape::mlp(vec![2, k]).unwrap();
        let params = FlatParams::zeros(shape.param_count());
        ParticleEnsemble::new(shape, vec![params]).unwrap()
    }

    fn confident_pair(p_true: [f64; 2]) -> (ParticleEnsemble, LabeledDataset) {
        // Two 2-class particles with bias-only logits chosen so particle i
        // puts probability p_true[i] on class 0; a single instance of
        // class 0 at an arbitrary point.
        let shape = NetworkShape::mlp(vec![2, 2]).unwrap();
        let particles = p_true
            .iter()
            .map(|&p| {
                let logit = (p / (1.0 - p)).ln();
                FlatParams::new(vec![0.0, 0.0, 0.0, 0.0, logit, 0.0]).unwrap()
            })
            .collect();
        let ensemble = ParticleEnsemble::new(shape, particles).unwrap();
        let ds = LabeledDataset::new(vec![0.5, 0.5], vec![0], 2, 2, "fixture".into()).unwrap();
        (ensemble, ds)
    }

    #[test]
    fn risk_zero_for_certain_correct_predictor() {
        // Huge bias toward the true class: p(true) ~ 1 within double
        // precision.
        let (ensemble, ds) = confident_pair([1.0 - 1e-15, 1.0 - 1e-15]);
        let r = empirical_risk(&ensemble, &ds).unwrap();
        assert!(r < 1e-12);
    }

    #[test]
    fn risk_of_uniform_predictor_is_one_minus_one_over_k() {
        for k in [2, 3, 5] {
            let ensemble = uniform_predictor(k);
            let ds = LabeledDataset::new(
                vec![0.2, 0.8, 0.5, 0.5, 0.9, 0.1],
                vec![0, 1, (k - 1) as u16],
                2,
                k,
                "fixture".into(),
            )
            .unwrap();
            let r = empirical_risk(&ensemble, &ds).unwrap();
            assert!((r - (1.0 - 1.0 / k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn risk_hand_average() {
        // n=2, K=2, p(true) = {0.9, 0.7} on one instance -> R = 0.2
        let (ensemble, ds) = confident_pair([0.9, 0.7]);
        let r = empirical_risk(&ensemble, &ds).unwrap();
        assert!((r - 0.2).abs() < 1e-9);
    }

    #[test]
    fn zero_budget_adversarial_risk_equals_empirical() {
        let shape = NetworkShape::mlp(vec![2, 8, 2]).unwrap();
        let ensemble = ParticleEnsemble::init(shape, 3, 5).unwrap();
        let ds = crate::data::gen_two_moons(40, 0.15, 3).unwrap();
        let config = AttackConfig {
            eps_max: 0.0,
            steps: 5,
            ..Default::default()
        };
        let r = empirical_risk(&ensemble, &ds).unwrap();
        let r_adv = adversarial_risk(&ensemble, &ds, &config, &mut rng(1)).unwrap();
        assert_eq!(r.to_bits(), r_adv.to_bits());
        let gap = risk_gap(&ensemble, &ds, &config, &mut rng(2)).unwrap();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn constant_classifier_has_zero_gap_at_any_budget() {
        // Bias-only logits ignore the input entirely.
        let shape = NetworkShape::mlp(vec![2, 2]).unwrap();
        let params = FlatParams::new(vec![0.0, 0.0, 0.0, 0.0, 1.3, -0.4]).unwrap();
        let ensemble = ParticleEnsemble::new(shape, vec![params]).unwrap();
        let ds = crate::data::gen_two_moons(30, 0.1, 8).unwrap();
        let config = AttackConfig {
            eps_max: 0.25,
            alpha: 0.1,
            steps: 5,
            ..Default::default()
        };
        let gap = risk_gap(&ensemble, &ds, &config, &mut rng(3)).unwrap();
        assert!(gap.abs() < 1e-15);
    }

    #[test]
    fn bound_zero_for_one_hot_match() {
        // x_adv == x via zero budget, near-one-hot predictions:
        // r_theta ~ 0, IG terms equal -> bound = 1 - e^0 = 0.
        let (ensemble, ds) = confident_pair([1.0 - 1e-15, 1.0 - 1e-15]);
        let config = AttackConfig {
            eps_max: 0.0,
            steps: 1,
            ..Default::default()
        };
        let b = bound_rhs(&ensemble, &ds, &config, 5.0, &mut rng(4)).unwrap();
        assert!(b.bound.abs() < 1e-9, "bound = {}", b.bound);
    }

    #[test]
    fn bound_nonnegative_for_generic_predictions() {
        let shape = NetworkShape::mlp(vec![2, 6, 3]).unwrap();
        let ensemble = ParticleEnsemble::init(shape, 4, 9).unwrap();
        let ds = crate::data::gen_gaussian_blobs(25, 3, 0.15, 2).unwrap();
        for eps in [0.0, 0.05] {
            let config = AttackConfig {
                eps_max: eps,
                alpha: 0.02,
                steps: 5,
                ..Default::default()
            };
            let b = bound_rhs(&ensemble, &ds, &config, 5.0, &mut rng(5)).unwrap();
            assert!(b.bound >= -1e-12);
            assert!(b.bound <= 1.0 + 1e-12);
            assert!(b.linearized >= b.bound - 1e-9, "1 - e^-z <= z violated");
        }
    }

    #[test]
    fn bound_dominates_gap_on_random_ensembles() {
        let ds = crate::data::gen_two_moons(30, 0.15, 12).unwrap();
        let config = AttackConfig {
            eps_max: 0.1,
            alpha: 0.025,
            steps: 10,
            ..Default::default()
        };
        for seed in 0..5 {
            let shape = NetworkShape::mlp(vec![2, 8, 2]).unwrap();
            let ensemble = ParticleEnsemble::init(shape, 3, seed).unwrap();
            let gap = risk_gap(&ensemble, &ds, &config, &mut rng(100 + seed)).unwrap();
            let b = bound_rhs(&ensemble, &ds, &config, 5.0, &mut rng(100 + seed)).unwrap();
            assert!(
                b.bound >= gap - 1e-6,
                "seed {seed}: bound {} < gap {gap}",
                b.bound
            );
        }
    }

    #[test]
    fn curve_starts_at_clean_accuracy_and_is_monotone_nested() {
        let shape = NetworkShape::mlp(vec![2, 8, 2]).unwrap();
        let ensemble = ParticleEnsemble::init(shape, 3, 31).unwrap();
        let ds = crate::data::gen_two_moons(50, 0.15, 4).unwrap();
        let base = AttackConfig {
            alpha: 0.05,
            steps: 10,
            ..Default::default()
        };
        let eps = [0.0, 0.05, 0.1, 0.2];
        let curve =
            robustness_curve(&ensemble, &ds, &eps, &base, true, &mut rng(6)).unwrap();
        let clean = ensemble_accuracy(&ensemble, &ds.features_tensor(), &ds.labels_usize())
            .unwrap();
        assert_eq!(curve[0].1, clean);
        for w in curve.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-12, "curve increased: {curve:?}");
        }
    }

    #[test]
    fn identical_particles_give_constant_transfer_matrix() {
        let shape = NetworkShape::mlp(vec![2, 6, 2]).unwrap();
        let p = network::init_params(&shape, 3);
        let ensemble = ParticleEnsemble::new(shape, vec![p.clone(), p.clone(), p]).unwrap();
        let ds = crate::data::gen_two_moons(30, 0.15, 5).unwrap();
        let config = AttackConfig {
            eps_max: 0.05,
            alpha: 0.02,
            steps: 5,
            ..Default::default()
        };
        let m = transfer_matrix(&ensemble, &ds, &config, &mut rng(7)).unwrap();
        let first = m.get(0, 0);
        for s in 0..3 {
            for t in 0..3 {
                assert_eq!(m.get(s, t), first);
            }
        }
    }

    #[test]
    fn zero_budget_transfer_matrix_rows_are_clean_accuracies() {
        let shape = NetworkShape::mlp(vec![2, 6, 2]).unwrap();
        let ensemble = ParticleEnsemble::init(shape, 3, 13).unwrap();
        let ds = crate::data::gen_two_moons(30, 0.15, 5).unwrap();
        let config = AttackConfig {
            eps_max: 0.0,
            steps: 5,
            ..Default::default()
        };
        let m = transfer_matrix(&ensemble, &ds, &config, &mut rng(8)).unwrap();
        let x = ds.features_tensor();
        let labels = ds.labels_usize();
        for s in 0..3 {
            for t in 0..3 {
                let want = particle_accuracy(&ensemble, t, &x, &labels).unwrap();
                assert_eq!(m.get(s, t), want);
            }
        }
    }

    #[test]
    fn transfer_matrix_requires_two_particles() {
        let ensemble = uniform_predictor(2);
        let ds = crate::data::gen_two_moons(10, 0.1, 5).unwrap();
        assert!(matches!(
            transfer_matrix(&ensemble, &ds, &AttackConfig::default(), &mut rng(9)),
            Err(EvalError::TooFewParticles { .. })
        ));
    }

    #[test]
    fn metrics_record_roundtrips_through_json() {
        let record = MetricsRecord {
            tag: RecordTag::Epoch(7),
            clean_acc: 0.91,
            robust_acc: 0.63,
            risk: 0.11,
            risk_adv: 0.27,
            gap: 0.16,
            bound_rhs: 0.55,
            bound_rhs_linear: 0.81,
            ig_clean: 0.032,
            ig_adv: 0.045,
            risk_argmax: 0.09,
            risk_adv_argmax: 0.37,
        };
        let json = serde_json::to_string(&record).unwrap();
        let back: MetricsRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(record, back);
    }

    #[test]
    fn metric_permutation_invariance() {
        let shape = NetworkShape::mlp(vec![2, 6, 2]).unwrap();
        let mut particles = crate::network::init_particles(&shape, 3, 19);
        let ds = crate::data::gen_two_moons(20, 0.15, 5).unwrap();
        let e1 = ParticleEnsemble::new(shape.clone(), particles.clone()).unwrap();
        particles.rotate_left(1);
        let e2 = ParticleEnsemble::new(shape, particles).unwrap();
        let r1 = empirical_risk(&e1, &ds).unwrap();
        let r2 = empirical_risk(&e2, &ds).unwrap();
        assert!((r1 - r2).abs() < 1e-15);
        let a1 = ensemble_accuracy(&e1, &ds.features_tensor(), &ds.labels_usize()).unwrap();
        let a2 = ensemble_accuracy(&e2, &ds.features_tensor(), &ds.labels_usize()).unwrap();
        assert_eq!(a1, a2);
    }
}
