//! Feed-forward classifiers over flat parameter vectors.
//!
//! Parameters live in a single flat vector so that posterior particles are
//! interchangeable values: the same [`NetworkShape`] instantiated with any
//! [`FlatParams`] of the right length. The forward pass can be recorded on a
//! [`Tape`] with the parameters bound either as gradient leaves (training)
//! or as constants (attack-time input gradients).
//!
//! Flat layout, per layer in order: weight matrix `in x out` row-major, then
//! the `out` biases.

use crate::seeds;
use crate::tensor::{Gradients, NodeId, Tape, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("parameter vector length {got} does not match shape ({want})")]
    ParamLength { got: usize, want: usize },
    #[error("input width {got} does not match network input dim {want}")]
    InputDim { got: usize, want: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("non-finite parameter values")]
    NonFiniteParams,
    #[error("invalid predictive distribution: {0}")]
    InvalidDistribution(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Hidden-layer nonlinearity. `Identity` exists as a test hook so linearity
/// in the input can be verified directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Layer widths of an MLP classifier: input dim, hidden dims, class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkShape {
    widths: Vec<usize>,
    activation: Activation,
}

impl NetworkShape {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NetworkError::InvalidShape(
                "need at least input dim and class count".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(NetworkError::InvalidShape("zero layer width".into()));
        }
        let classes = *widths.last().unwrap();
        if classes < 2 {
            return Err(NetworkError::InvalidShape(format!(
                "class count must be at least 2, got {classes}"
            )));
        }
        Ok(NetworkShape { widths, activation })
    }

    /// Convenience constructor for relu MLPs.
    pub fn mlp(widths: Vec<usize>) -> Result<Self> {
        NetworkShape::new(widths, Activation::Relu)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// (fan_in, fan_out) per layer.
    pub fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.widths.windows(2).map(|w| (w[0], w[1]))
    }

    /// Total parameter count: sum of (in+1)*out over layers.
    pub fn param_count(&self) -> usize {
        self.layer_dims().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// One particle: a complete flat parameter vector for a [`NetworkShape`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams(Vec<f64>);

impl FlatParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(NetworkError::NonFiniteParams);
        }
        Ok(FlatParams(values))
    }

    pub fn zeros(len: usize) -> Self {
        FlatParams(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Per-particle class probabilities for a batch (rows sum to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    probs: Tensor,
}

impl PredictiveDistribution {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 2 {
            return Err(NetworkError::InvalidDistribution(format!(
                "expected batch x K matrix, got shape {:?}",
                probs.shape()
            )));
        }
        let k = probs.shape()[1];
        for i in 0..probs.shape()[0] {
            let row = probs.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(NetworkError::InvalidDistribution(format!(
                    "row {i} sums to {sum}"
                )));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(NetworkError::InvalidDistribution(format!(
                    "row {i} has entries outside [0,1]"
                )));
            }
        }
        let _ = k;
        Ok(PredictiveDistribution { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn batch(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn class_count(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    /// Predicted class per row; ties break to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.batch()).map(|i| argmax_row(self.row(i))).collect()
    }
}

/// Lowest-index argmax.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// How parameters enter a recorded forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Parameters are gradient leaves (training).
    Differentiable,
    /// Parameters are constants (input-gradient attacks).
    Constant,
}

/// Tape handles for one particle's layer parameters, with the flat ranges
/// needed to reassemble a flat gradient.
pub struct ParamLeaves {
    layers: Vec<LayerLeaves>,
    param_count: usize,
}

struct LayerLeaves {
    weight: NodeId,
    bias: NodeId,
    weight_range: std::ops::Range<usize>,
    bias_range: std::ops::Range<usize>,
}

impl ParamLeaves {
    /// Assemble the flat gradient vector from a backward pass. Layers the
    /// output does not depend on contribute zeros.
    pub fn grad_to_flat(&self, grads: &Gradients) -> FlatParams {
        let mut flat = vec![0.0; self.param_count];
        for layer in &self.layers {
            if let Some(gw) = grads.get(layer.weight) {
                flat[layer.weight_range.clone()].copy_from_slice(gw.data());
            }
            if let Some(gb) = grads.get(layer.bias) {
                flat[layer.bias_range.clone()].copy_from_slice(gb.data());
            }
        }
        FlatParams(flat)
    }
}

/// Register one particle's layer parameters on `tape` so the same bound
/// leaves can serve several forward passes (e.g. clean and adversarial
/// inputs share one gradient).
pub fn bind_params(
    tape: &mut Tape,
    shape: &NetworkShape,
    params: &FlatParams,
    binding: Binding,
) -> Result<ParamLeaves> {
    if params.len() != shape.param_count() {
        return Err(NetworkError::ParamLength {
            got: params.len(),
            want: shape.param_count(),
        });
    }
    let mut layers = Vec::new();
    let mut offset = 0;
    for (fan_in, fan_out) in shape.layer_dims() {
        let w_range = offset..offset + fan_in * fan_out;
        let b_range = w_range.end..w_range.end + fan_out;
        offset = b_range.end;

        let w_tensor = Tensor::matrix(fan_in, fan_out, params.0[w_range.clone()].to_vec())?;
        let b_tensor = Tensor::matrix(1, fan_out, params.0[b_range.clone()].to_vec())?;
        let (w_id, b_id) = match binding {
            Binding::Differentiable => (tape.leaf(w_tensor), tape.leaf(b_tensor)),
            Binding::Constant => (tape.constant(w_tensor), tape.constant(b_tensor)),
        };
        layers.push(LayerLeaves {
            weight: w_id,
            bias: b_id,
            weight_range: w_range,
            bias_range: b_range,
        });
    }
    Ok(ParamLeaves {
        layers,
        param_count: shape.param_count(),
    })
}

/// Record `logits = f(x; bound params)` through already-bound parameters.
pub fn forward_bound(
    tape: &mut Tape,
    shape: &NetworkShape,
    leaves: &ParamLeaves,
    x_id: NodeId,
) -> Result<NodeId> {
    let x_shape = tape.value(x_id).shape().to_vec();
    if x_shape.len() != 2 || x_shape[1] != shape.input_dim() {
        return Err(NetworkError::InputDim {
            got: if x_shape.len() == 2 { x_shape[1] } else { 0 },
            want: shape.input_dim(),
        });
    }
    let batch = x_shape[0];
    let mut h = x_id;
    let n_layers = shape.widths.len() - 1;
    for (li, layer) in leaves.layers.iter().enumerate() {
        let fan_out = tape.value(layer.weight).shape()[1];
        let wx = tape.matmul(h, layer.weight)?;
        let bb = tape.broadcast(layer.bias, &[batch, fan_out])?;
        h = tape.add(wx, bb)?;
        let last = li + 1 == n_layers;
        if !last && shape.activation == Activation::Relu {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Record the forward pass `logits = f(x; params)` on `tape`.
///
/// `x_id` must already be on the tape (leaf or constant, caller's choice),
/// with shape `batch x input_dim`. Returns the logits node
/// (`batch x class_count`) and the parameter leaf handles.
pub fn forward(
    tape: &mut Tape,
    shape: &NetworkShape,
    params: &FlatParams,
    binding: Binding,
    x_id: NodeId,
) -> Result<(NodeId, ParamLeaves)> {
    let leaves = bind_params(tape, shape, params, binding)?;
    let logits = forward_bound(tape, shape, &leaves, x_id)?;
    Ok((logits, leaves))
}

/// Plain (non-recorded) forward pass returning the logits tensor.
pub fn forward_value(shape: &NetworkShape, params: &FlatParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x_id = tape.constant(x.clone());
    let (logits, _) = forward(&mut tape, shape, params, Binding::Constant, x_id)?;
    Ok(tape.value(logits).clone())
}

/// Numerically stable softmax over logit rows (max subtraction).
pub fn predict_proba(logits: &Tensor) -> Result<PredictiveDistribution> {
    if logits.shape().len() != 2 {
        return Err(NetworkError::InvalidDistribution(format!(
            "expected batch x K logits, got shape {:?}",
            logits.shape()
        )));
    }
    if !logits.is_finite() {
        return Err(NetworkError::InvalidDistribution("non-finite logits".into()));
    }
    let (batch, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Vec::with_capacity(batch * k);
    for i in 0..batch {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    PredictiveDistribution::new(Tensor::matrix(batch, k, out)?)
}

/// Softmax probabilities of the ensemble-mean predictive distribution are
/// computed by callers; this helper gives one particle's probabilities
/// directly from inputs.
pub fn predict_proba_for(
    shape: &NetworkShape,
    params: &FlatParams,
    x: &Tensor,
) -> Result<PredictiveDistribution> {
    predict_proba(&forward_value(shape, params, x)?)
}

/// Record mean cross-entropy over the batch via log-sum-exp (the softmax is
/// never materialized on the loss path).
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NetworkError::InvalidDistribution(format!(
            "logits shape {:?} does not match {} labels",
            shape,
            labels.len()
        )));
    }
    let (batch, k) = (shape[0], shape[1]);
    for &y in labels {
        if y >= k {
            return Err(NetworkError::LabelRange {
                label: y,
                classes: k,
            });
        }
    }

    // lse = max + log(sum(exp(z - max))) per row
    let m = tape.max_axis(logits, 1)?;
    let mb = tape.broadcast(m, &[batch, k])?;
    let centered = tape.sub(logits, mb)?;
    let e = tape.exp(centered)?;
    let se = tape.sum_axis(e, 1)?;
    let lse_rest = tape.log(se)?;
    let lse = tape.add(lse_rest, m)?;

    // true-class logit per row via one-hot mask
    let mut onehot = vec![0.0; batch * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let mask = tape.constant(Tensor::matrix(batch, k, onehot)?);
    let picked = tape.mul(logits, mask)?;
    let z_true = tape.sum_axis(picked, 1)?;

    let per_row = tape.sub(lse, z_true)?;
    Ok(tape.mean(per_row)?)
}

/// Plain mean cross-entropy value.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = cross_entropy(&mut tape, l, labels)?;
    Ok(tape.value(ce).item())
}

/// He-style Gaussian init: weights ~ N(0, 2/fan_in), biases 0.
/// Deterministic per seed.
pub fn init_params(shape: &NetworkShape, seed: u64) -> FlatParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut values = Vec::with_capacity(shape.param_count());
    for (fan_in, fan_out) in shape.layer_dims() {
        let std = (2.0 / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            let z: f64 = normal.sample(&mut rng);
            values.push(z * std);
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    FlatParams(values)
}

/// Initialize `n` particles with particle-distinct seeds derived from `seed`.
pub fn init_particles(shape: &NetworkShape, n: usize, seed: u64) -> Vec<FlatParams> {
    (0..n)
        .map(|i| init_params(shape, seeds::derive(seed, "init", i as u64)))
        .collect()
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"IGPS";
const SNAPSHOT_VERSION: u32 = 1;

/// Parameter snapshot byte format:
///
/// ```text
/// offset  size  field
/// 0       4     magic "IGPS"
/// 4       4     version (u32 LE, currently 1)
/// 8       4     activation (u32 LE: 0 relu, 1 identity)
/// 12      4     width count (u32 LE)
/// 16      4*w   layer widths incl. input dim and class count (u32 LE)
/// ...     4     particle count n (u32 LE)
/// ...     8*n*param_count   particle values, f64 LE, particle-major
/// ```
pub fn encode_snapshot(shape: &NetworkShape, particles: &[FlatParams]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    let act: u32 = match shape.activation {
        Activation::Relu => 0,
        Activation::Identity => 1,
    };
    out.extend_from_slice(&act.to_le_bytes());
    out.extend_from_slice(&(shape.widths.len() as u32).to_le_bytes());
    for &w in &shape.widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(particles.len() as u32).to_le_bytes());
    for p in particles {
        for v in p.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decode [`encode_snapshot`] bytes. Returns the shape and particles;
/// trailing bytes are an error surfaced through the length check.
pub fn decode_snapshot(bytes: &[u8]) -> Result<(NetworkShape, Vec<FlatParams>)> {
    let fail = |msg: &str| NetworkError::InvalidShape(format!("snapshot: {msg}"));
    let need = |have: usize, want: usize| -> std::result::Result<(), NetworkError> {
        if have < want {
            Err(fail(&format!("truncated at {have} of {want} bytes")))
        } else {
            Ok(())
        }
    };
    need(bytes.len(), 16)?;
    if &bytes[0..4] != SNAPSHOT_MAGIC {
        return Err(fail("bad magic"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    if u32_at(4) != SNAPSHOT_VERSION {
        return Err(fail(&format!("unsupported version {}", u32_at(4))));
    }
    let activation = match u32_at(8) {
        0 => Activation::Relu,
        1 => Activation::Identity,
        a => return Err(fail(&format!("unknown activation code {a}"))),
    };
    let n_widths = u32_at(12) as usize;
    need(bytes.len(), 16 + 4 * n_widths + 4)?;
    let widths: Vec<usize> = (0..n_widths)
        .map(|i| u32_at(16 + 4 * i) as usize)
        .collect();
    let shape = NetworkShape::new(widths, activation)?;
    let n_off = 16 + 4 * n_widths;
    let n = u32_at(n_off) as usize;
    let pc = shape.param_count();
    let want = n_off + 4 + 8 * n * pc;
    if bytes.len() != want {
        return Err(fail(&format!(
            "length {} does not match expected {want}",
            bytes.len()
        )));
    }
    let mut particles = Vec::with_capacity(n);
    let mut off = n_off + 4;
    for _ in 0..n {
        let mut values = Vec::with_capacity(pc);
        for _ in 0..pc {
            values.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        particles.push(FlatParams::new(values)?);
    }
    Ok((shape, particles))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape_242() -> NetworkShape {
        NetworkShape::mlp(vec![2, 4, 2]).unwrap()
    }

    #[test]
    fn param_count_formula() {
        // (2+1)*4 + (4+1)*2 = 22
        assert_eq!(shape_242().param_count(), 22);
        let s = NetworkShape::mlp(vec![2, 16, 16, 2]).unwrap();
        assert_eq!(s.param_count(), 3 * 16 + 17 * 16 + 17 * 2);
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(NetworkShape::mlp(vec![3]).is_err());
        assert!(NetworkShape::mlp(vec![3, 1]).is_err()); // K < 2
        assert!(NetworkShape::mlp(vec![0, 2]).is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let shape = shape_242();
        let params = FlatParams::zeros(shape.param_count());
        let x = Tensor::matrix(3, 2, vec![0.1, -0.4, 2.0, 1.0, -1.0, 0.5]).unwrap();
        let logits = forward_value(&shape, &params, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let shape = NetworkShape::mlp(vec![2, 2]).unwrap();
        // weights = identity, bias = 0 (single linear layer, no activation on output)
        let params = FlatParams::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.3, -0.7, 1.5, 0.25]).unwrap();
        let logits = forward_value(&shape, &params, &x).unwrap();
        assert_eq!(logits.data(), x.data());
    }

    #[test]
    fn fixed_242_net_matches_hand_matrix_oracle() {
        let shape = shape_242();
        let params = init_params(&shape, 99);
        let x = Tensor::matrix(1, 2, vec![0.8, -0.3]).unwrap();
        let logits = forward_value(&shape, &params, &x).unwrap();

        // Hand evaluation: unpack layout and do the two matmuls directly.
        let v = params.values();
        let w1 = &v[0..8]; // 2x4
        let b1 = &v[8..12];
        let w2 = &v[12..20]; // 4x2
        let b2 = &v[20..22];
        let xin = [0.8, -0.3];
        let mut h = [0.0f64; 4];
        for j in 0..4 {
            let mut s = b1[j];
            for (i, &xv) in xin.iter().enumerate() {
                s += xv * w1[i * 4 + j];
            }
            h[j] = s.max(0.0);
        }
        let mut out = [0.0f64; 2];
        for j in 0..2 {
            let mut s = b2[j];
            for (i, &hv) in h.iter().enumerate() {
                s += hv * w2[i * 2 + j];
            }
            out[j] = s;
        }
        for (got, want) in logits.data().iter().zip(&out) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let p = predict_proba(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        assert!((p.row(0)[0] - 0.5).abs() < 1e-15);
        assert!((p.row(0)[1] - 0.5).abs() < 1e-15);

        let a = predict_proba(&Tensor::matrix(1, 3, vec![0.2, 1.1, -0.7]).unwrap()).unwrap();
        let b =
            predict_proba(&Tensor::matrix(1, 3, vec![100.2, 101.1, 99.3]).unwrap()).unwrap();
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let p = predict_proba(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let exps = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let sum: f64 = exps.iter().sum();
        for (got, want) in p.row(0).iter().zip(exps.iter().map(|e| e / sum)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_normalized_for_extreme_logits() {
        let p = predict_proba(&Tensor::matrix(1, 3, vec![500.0, -500.0, 250.0]).unwrap()).unwrap();
        let sum: f64 = p.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let logits = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let ce = cross_entropy_value(&logits, &[0]).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        let ce1 = cross_entropy_value(&logits, &[1]).unwrap();
        assert!((ce1 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let logits = Tensor::matrix(1, 2, vec![60.0, 0.0]).unwrap();
        let ce = cross_entropy_value(&logits, &[0]).unwrap();
        assert!(ce < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_scalar_formula() {
        // logits [1,3], label 0 -> ln(1 + e^2)
        let logits = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let ce = cross_entropy_value(&logits, &[0]).unwrap();
        assert!((ce - (1.0 + 2.0f64.exp()).ln()).abs() < 1e-12);
        assert!((ce - 2.126928).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_label_out_of_range() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(
            cross_entropy(&mut tape, l, &[2]),
            Err(NetworkError::LabelRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_batch() {
        let shape = shape_242();
        let params = init_params(&shape, 3);
        let x = Tensor::matrix(2, 2, vec![0.6, -0.2, -0.9, 0.4]).unwrap();
        let labels = [1usize, 0usize];

        let mut tape = Tape::new();
        let x_id = tape.leaf(x.clone());
        let (logits, _) = forward(&mut tape, &shape, &params, Binding::Constant, x_id).unwrap();
        let ce = cross_entropy(&mut tape, logits, &labels).unwrap();

        // Gradient w.r.t. the *logits* requires logits to be a leaf; rebuild
        // with the logits values as a leaf directly.
        let logit_values = tape.value(logits).clone();
        let mut t2 = Tape::new();
        let lg = t2.leaf(logit_values.clone());
        let ce2 = cross_entropy(&mut t2, lg, &labels).unwrap();
        let grads = t2.backward(ce2).unwrap();
        let g = grads.wrt(lg);

        let probs = predict_proba(&logit_values).unwrap();
        let batch = 2.0;
        for i in 0..2 {
            for c in 0..2 {
                let onehot = if labels[i] == c { 1.0 } else { 0.0 };
                let want = (probs.row(i)[c] - onehot) / batch;
                let got = g.data()[i * 2 + c];
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
        let _ = ce;
    }

    #[test]
    fn forward_is_linear_in_x_without_activation() {
        use rand::Rng;
        let shape = NetworkShape::new(vec![3, 5, 2], Activation::Identity).unwrap();
        let mut params = init_params(&shape, 11);
        // Zero the biases so linearity (not just affinity) holds.
        let mut offset = 0;
        for (fan_in, fan_out) in shape.layer_dims() {
            let b_start = offset + fan_in * fan_out;
            for b in &mut params.values_mut()[b_start..b_start + fan_out] {
                *b = 0.0;
            }
            offset = b_start + fan_out;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x1: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x2: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let combo: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();

            let f1 = forward_value(&shape, &params, &Tensor::matrix(1, 3, x1).unwrap()).unwrap();
            let f2 = forward_value(&shape, &params, &Tensor::matrix(1, 3, x2).unwrap()).unwrap();
            let fc =
                forward_value(&shape, &params, &Tensor::matrix(1, 3, combo).unwrap()).unwrap();
            for i in 0..2 {
                let want = a * f1.data()[i] + b * f2.data()[i];
                assert!((fc.data()[i] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let shape = shape_242();
        assert_eq!(init_params(&shape, 5), init_params(&shape, 5));
        assert_ne!(init_params(&shape, 5), init_params(&shape, 6));
    }

    #[test]
    fn init_std_matches_he_scaling() {
        let shape = NetworkShape::mlp(vec![100, 100, 2]).unwrap();
        let params = init_params(&shape, 7);
        // First layer: 10k weights with std sqrt(2/100).
        let w = &params.values()[..100 * 100];
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let want = (2.0 / 100.0f64).sqrt();
        assert!((var.sqrt() - want).abs() / want < 0.1);
        // Biases zero.
        let b = &params.values()[100 * 100..100 * 100 + 100];
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictive_distribution_rejects_bad_rows() {
        let bad = Tensor::matrix(1, 2, vec![0.7, 0.7]).unwrap();
        assert!(PredictiveDistribution::new(bad).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax_row(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax_row(&[0.1, 0.4, 0.5]), 2);
    }
}
