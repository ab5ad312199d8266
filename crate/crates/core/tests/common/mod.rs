//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ecs_pinn::autodiff::Tensor;
use ecs_pinn::network::MlpParams;

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}

/// Straight-line evaluation from the raw weight arrays: tanh hidden layers,
/// linear output.
pub fn reference_forward(mlp: &MlpParams, input: &[f64]) -> f64 {
    let mut z = input.to_vec();
    let n_layers = mlp.num_layers();
    for l in 0..n_layers {
        let w = &mlp.weights()[l];
        let b = mlp.biases()[l].values();
        let (fan_in, fan_out) = (w.rows(), w.cols());
        let mut next = vec![0.0; fan_out];
        for (j, out) in next.iter_mut().enumerate() {
            let mut acc = b[j];
            for (i, zi) in z.iter().enumerate().take(fan_in) {
                acc += zi * w.at(i, j);
            }
            *out = if l + 1 < n_layers { acc.tanh() } else { acc };
        }
        z = next;
    }
    z[0]
}

/// Central-difference `(N_t, ∇N, ΔN)` of `mlp.forward` at one point; the
/// time coordinate is the last input.
pub fn fd_derivatives(mlp: &MlpParams, point: &[f64], h1: f64, h2: f64) -> (f64, Vec<f64>, f64) {
    let dim = point.len();
    let d = dim - 1;
    let mut rows = vec![point.to_vec()];
    for i in 0..dim {
        for (h, sign) in [(h1, 1.0), (h1, -1.0), (h2, 1.0), (h2, -1.0)] {
            let mut p = point.to_vec();
            p[i] += sign * h;
            rows.push(p);
        }
    }
    let vals = mlp
        .forward(&Tensor::matrix(rows.len(), dim, rows.concat()))
        .unwrap();
    let centre = vals[0];
    let at = |i: usize, k: usize| vals[1 + 4 * i + k];
    let first = |i: usize| (at(i, 0) - at(i, 1)) / (2.0 * h1);
    let second = |i: usize| (at(i, 2) - 2.0 * centre + at(i, 3)) / (h2 * h2);
    let grad: Vec<f64> = (0..d).map(first).collect();
    let lap = (0..d).map(second).sum();
    (first(d), grad, lap)
}

/// Deterministic pseudo-random points in `[lo, hi)^dim`.
pub fn points(n: usize, dim: usize, seed: u64, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(lo..hi)).collect())
        .collect()
}

/// Worst FD mismatch of every parameter gradient of the full weighted loss
/// on a random 50-point batch. Returns the worst relative error over entries
/// with `|fd| >= floor` and the worst absolute error over the rest.
pub fn loss_gradient_audit(dim: usize, seed: u64, h: f64, floor: f64) -> (f64, f64) {
    use ecs_pinn::data::ScaleRecord;
    use ecs_pinn::trainer::{evaluate_loss, PinnModel, TrainingConfig};

    let config = TrainingConfig {
        seed,
        d_init: 3e-2,
        v_init: 0.4,
        layer_dims: Some(vec![dim + 1, 8, 8, 1]),
        ..TrainingConfig::default()
    };
    let scale = ScaleRecord::new(1.0, 1.0, 1.0, vec![0.0; dim], 0.0).unwrap();
    let mut model = PinnModel::init(&config, dim, &scale).unwrap();
    for (k, v) in model.physics.velocity.iter_mut().enumerate() {
        *v += 0.1 * k as f64;
    }
    let colloc = Tensor::matrix(50, dim + 1, points(50, dim + 1, seed + 1, 0.0, 1.0).concat());
    let data = Tensor::matrix(50, dim + 1, points(50, dim + 1, seed + 2, 0.0, 1.0).concat());
    let values: Vec<f64> = points(50, 1, seed + 3, 0.0, 1.0).concat();
    let loss = |m: &PinnModel| {
        evaluate_loss(m, &colloc, &data, &values, 100.0, 1.0, false).unwrap().0.total
    };
    let (_, grads) = evaluate_loss(&model, &colloc, &data, &values, 100.0, 1.0, true).unwrap();
    let grads = grads.unwrap();
    let (mut worst_rel, mut worst_abs): (f64, f64) = (0.0, 0.0);
    for (g, group) in grads.groups.iter().enumerate() {
        for (j, &analytic) in group.iter().enumerate() {
            let orig = model.param_groups_mut()[g][j];
            model.param_groups_mut()[g][j] = orig + h;
            let up = loss(&model);
            model.param_groups_mut()[g][j] = orig - h;
            let down = loss(&model);
            model.param_groups_mut()[g][j] = orig;
            let fd = (up - down) / (2.0 * h);
            if fd.abs() >= floor {
                worst_rel = worst_rel.max(rel_err(analytic, fd, floor));
            } else {
                worst_abs = worst_abs.max((analytic - fd).abs());
            }
        }
    }
    (worst_rel, worst_abs)
}
