//! Central finite-difference verification of every recorded operation and
//! of the full training objective. Gates the other commands in CI.
//!
//! Each supported op is composed into a small random expression; the
//! recorded gradient must match central differences (step 1e-5) with
//! relative error below 1e-4. Inputs are sampled away from the kinks of
//! relu/clamp/max so the finite-difference oracle is valid.

use crate::infogain::{self, ObjectiveOptions};
use crate::network::NetworkShape;
use crate::svgd::ParticleEnsemble;
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Worst relative error observed for one op.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

/// Outcome of the full suite.
#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub per_op: Vec<OpReport>,
    pub failures: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn total_cases(&self) -> usize {
        self.per_op.iter().map(|o| o.cases).sum()
    }
}

const OPS: &[&str] = &[
    "add", "sub", "mul", "matmul", "relu", "exp", "log", "sum", "sum_axis", "mean", "max",
    "max_axis", "broadcast", "reshape", "clamp", "ig_objective",
];

/// All op names the suite knows, for fault-injection validation.
pub fn known_ops() -> &'static [&'static str] {
    OPS
}

/// Run the suite. `fault` deliberately corrupts the recorded gradient of
/// the named op so the harness itself can be shown to catch wrong
/// gradients.
pub fn run_gradcheck(seed: u64, cases_per_op: usize, fault: Option<&str>) -> GradcheckReport {
    let mut report = GradcheckReport::default();
    for &op in OPS {
        let (cases, max_rel_err, mut failures) = if op == "ig_objective" {
            check_objective(seed, (cases_per_op / 4).max(2), fault == Some(op))
        } else {
            check_op(op, seed, cases_per_op, fault == Some(op))
        };
        report.per_op.push(OpReport {
            op,
            cases,
            max_rel_err,
        });
        report.failures.append(&mut failures);
    }
    report
}

/// Sample away from a set of kink locations so central differences see a
/// smooth function.
fn sample_away(rng: &mut ChaCha8Rng, lo: f64, hi: f64, kinks: &[f64]) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > 5e-3) {
            return v;
        }
    }
}

type OpCheck = (usize, f64, Vec<String>);

fn check_op(op: &'static str, seed: u64, cases: usize, fault: bool) -> OpCheck {
    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;
    for case in 0..cases {
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, op, case as u64));

        // Leaf sized to the op under test (dims <= 16).
        let rows = rng.random_range(2..=4usize);
        let cols = rng.random_range(2..=4usize);
        let x_data: Vec<f64> = match op {
            "log" => (0..rows * cols).map(|_| rng.random_range(0.1..2.0)).collect(),
            "relu" => (0..rows * cols)
                .map(|_| sample_away(&mut rng, -2.0, 2.0, &[0.0]))
                .collect(),
            "clamp" => (0..rows * cols)
                .map(|_| sample_away(&mut rng, -1.0, 1.0, &[-0.5, 0.5]))
                .collect(),
            "max" | "max_axis" => {
                // Distinct entries keep the argmax stable under the probe.
                let mut vals: Vec<f64> =
                    (0..rows * cols).map(|i| i as f64 * 0.05).collect();
                for i in (1..vals.len()).rev() {
                    let j = rng.random_range(0..=i);
                    vals.swap(i, j);
                }
                vals.iter().map(|v| v + rng.random_range(-0.01..0.01)).collect()
            }
            _ => (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect(),
        };
        let x = Tensor::matrix(rows, cols, x_data.clone()).unwrap();
        let const_same = random_matrix(&mut rng, rows, cols);
        let const_matmul = random_matrix(&mut rng, cols, 3);

        let build = |tape: &mut Tape, x_id: NodeId| -> NodeId {
            let y = match op {
                "add" => {
                    let c = tape.constant(const_same.clone());
                    tape.add(x_id, c).unwrap()
                }
                "sub" => {
                    let c = tape.constant(const_same.clone());
                    tape.sub(x_id, c).unwrap()
                }
                "mul" => {
                    let c = tape.constant(const_same.clone());
                    tape.mul(x_id, c).unwrap()
                }
                "matmul" => {
                    let c = tape.constant(const_matmul.clone());
                    tape.matmul(x_id, c).unwrap()
                }
                "relu" => tape.relu(x_id).unwrap(),
                "exp" => tape.exp(x_id).unwrap(),
                "log" => tape.log(x_id).unwrap(),
                "sum" => tape.sum(x_id).unwrap(),
                "sum_axis" => tape.sum_axis(x_id, 1).unwrap(),
                "mean" => tape.mean(x_id).unwrap(),
                "max" => tape.max(x_id).unwrap(),
                "max_axis" => tape.max_axis(x_id, 1).unwrap(),
                "broadcast" => {
                    // Reduce to a row first so the broadcast expands it back.
                    let row = tape.sum_axis(x_id, 0).unwrap();
                    tape.broadcast(row, &[rows, cols]).unwrap()
                }
                "reshape" => tape.reshape(x_id, &[cols, rows]).unwrap(),
                "clamp" => tape.clamp(x_id, -0.5, 0.5).unwrap(),
                other => unreachable!("unknown op {other}"),
            };
            // Compose into a smooth scalar.
            let sq = tape.mul(y, y).unwrap();
            tape.mean(sq).unwrap()
        };

        let mut tape = Tape::new();
        let x_id = tape.leaf(x.clone());
        let out = build(&mut tape, x_id);
        let grads = tape.backward(out).unwrap();
        let mut ad = grads.wrt(x_id).data().to_vec();
        if fault && case == 0 {
            ad[0] += 0.01;
        }

        let f = |values: &[f64]| -> f64 {
            let mut t = Tape::new();
            let id = t.leaf(Tensor::matrix(rows, cols, values.to_vec()).unwrap());
            let o = build(&mut t, id);
            t.value(o).item()
        };
        for d in 0..x_data.len() {
            let mut plus = x_data.clone();
            plus[d] += FD_STEP;
            let mut minus = x_data.clone();
            minus[d] -= FD_STEP;
            let fd = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
            let rel = (ad[d] - fd).abs() / (fd.abs() + 1e-8);
            max_rel = max_rel.max(rel);
            if rel >= REL_TOL {
                failures.push(format!(
                    "{op}: case {case} coord {d}: autodiff {} vs fd {fd} (rel {rel:.2e})",
                    ad[d]
                ));
            }
        }
    }
    (cases, max_rel, failures)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Finite differences through the full objective on random small
/// ensembles (n = 3, K = 3, 2-8-3 networks), per particle.
fn check_objective(seed: u64, cases: usize, fault: bool) -> OpCheck {
    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(
            seed,
            "ig_objective",
            case as u64,
        ));
        let shape = NetworkShape::mlp(vec![2, 8, 3]).unwrap();
        let ensemble = ParticleEnsemble::init(shape, 3, rng.random()).unwrap();
        let batch = 3;
        let xs: Vec<f64> = (0..batch * 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let xa: Vec<f64> = xs
            .iter()
            .map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0))
            .collect();
        let x = Tensor::matrix(batch, 2, xs).unwrap();
        let x_adv = Tensor::matrix(batch, 2, xa).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
        let opts = ObjectiveOptions {
            effective_lambda: rng.random_range(0.5..4.0),
            entropy_floor: infogain::DEFAULT_ENTROPY_FLOOR,
            batch_mean_penalty: false,
        };

        let mut tape = Tape::new();
        let parts =
            infogain::ig_objective(&mut tape, &ensemble, &x, &x_adv, &labels, &opts).unwrap();
        let grads = tape.backward(parts.total).unwrap();

        for (pi, leaf) in parts.leaves.iter().enumerate() {
            let mut flat = leaf.grad_to_flat(&grads).values().to_vec();
            if fault && case == 0 && pi == 0 {
                flat[0] += 0.01;
            }
            for d in (0..flat.len()).step_by(5) {
                let mut plus = ensemble.clone();
                plus.particles_mut()[pi].values_mut()[d] += FD_STEP;
                let mut minus = ensemble.clone();
                minus.particles_mut()[pi].values_mut()[d] -= FD_STEP;
                let (fp, _, _) =
                    infogain::ig_objective_value(&plus, &x, &x_adv, &labels, &opts).unwrap();
                let (fm, _, _) =
                    infogain::ig_objective_value(&minus, &x, &x_adv, &labels, &opts).unwrap();
                let fd = (fp - fm) / (2.0 * FD_STEP);
                let rel = (flat[d] - fd).abs() / (fd.abs() + 1e-8);
                max_rel = max_rel.max(rel);
                if rel >= REL_TOL {
                    failures.push(format!(
                        "ig_objective: case {case} particle {pi} coord {d}: {} vs fd {fd} (rel {rel:.2e})",
                        flat[d]
                    ));
                }
            }
        }
    }
    (cases, max_rel, failures)
}
