//! Scratch calibration for the bimodal sampler settings (deleted once the
//! acceptance parameters are frozen).

use igbnn::network::FlatParams;
use igbnn::svgd::{apply_step, svgd_direction, ParticleEnsemble, StepMode, StepState, SvgdConfig};
use igbnn::NetworkShape;
use rand::SeedableRng;
use rand_distr::Distribution;

fn mixture_loss_grad(theta: f64) -> f64 {
    let c1 = (-(theta - 4.0) * (theta - 4.0) / 2.0).exp();
    let c2 = (-(theta + 4.0) * (theta + 4.0) / 2.0).exp();
    let score = (c1 * (4.0 - theta) + c2 * (-4.0 - theta)) / (c1 + c2);
    -score
}

fn run_sampler(seed: u64, steps: usize, step_size: f64, mode: StepMode) -> (f64, f64, f64) {
    let n = 30;
    let shape = NetworkShape::mlp(vec![1, 2]).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    // Antithetic init: mirrored +-draws keep the initial mass balanced.
    let particles: Vec<FlatParams> = (0..n / 2)
        .flat_map(|_| {
            let v: f64 = normal.sample(&mut rng);
            [v, -v]
        })
        .map(|v| FlatParams::new(vec![v, 0.0, 0.0, 0.0]).unwrap())
        .collect();
    let mut ensemble = ParticleEnsemble::new(shape, particles).unwrap();
    let config = SvgdConfig {
        gamma: 1.0,
        step_size,
        step_mode: mode,
        bandwidth: None,
    };
    let mut state = StepState::new(n, 4);
    for _ in 0..steps {
        let grads: Vec<FlatParams> = ensemble
            .particles()
            .iter()
            .map(|p| FlatParams::new(vec![mixture_loss_grad(p.values()[0]), 0.0, 0.0, 0.0]).unwrap())
            .collect();
        let dirs = svgd_direction(&ensemble, &grads, &config).unwrap();
        apply_step(&mut ensemble, &dirs, &config, &mut state).unwrap();
    }
    let thetas: Vec<f64> = ensemble.particles().iter().map(|p| p.values()[0]).collect();
    let d_plus = thetas.iter().map(|t| (t - 4.0).abs()).fold(f64::INFINITY, f64::min);
    let d_minus = thetas.iter().map(|t| (t + 4.0).abs()).fold(f64::INFINITY, f64::min);
    let mean = thetas.iter().sum::<f64>() / n as f64;
    (d_plus, d_minus, mean)
}

#[test]
#[ignore]
fn calibrate() {
    for (label, steps, step_size, mode) in [
        ("const 0.002", 2000, 0.002, StepMode::Constant),
        ("const 0.005", 2000, 0.005, StepMode::Constant),
        ("const 0.01", 2000, 0.01, StepMode::Constant),
        ("const 0.02", 2000, 0.02, StepMode::Constant),
        ("adapt 0.05", 2000, 0.05, StepMode::Adaptive),
        ("adapt 0.1", 2000, 0.1, StepMode::Adaptive),
        ("adapt 0.3", 2000, 0.3, StepMode::Adaptive),
    ] {
        let mut cover = 0;
        let mut mean_ok = 0;
        let mut worst = (0.0f64, 0.0f64, 0.0f64);
        for seed in 0..10 {
            let (dp, dm, mean) = run_sampler(seed, steps, step_size, mode);
            if dp <= 1.0 && dm <= 1.0 {
                cover += 1;
            }
            if mean.abs() <= 0.5 {
                mean_ok += 1;
            }
            if dp.max(dm) > worst.0.max(worst.1) {
                worst = (dp, dm, mean);
            }
        }
        println!("{label}: cover {cover}/10 mean_ok {mean_ok}/10 worst (d+ {:.2}, d- {:.2}, mean {:.2})", worst.0, worst.1, worst.2);
    }
}
