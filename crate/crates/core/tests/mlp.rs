//! Regressor oracle tests: a straight-line forward re-implementation, central
//! finite-difference gradient checks, deterministic trajectories, and a
//! trainability smoke test.

use laplace_dps::linalg::standard_normal_vector;
use laplace_dps::mlp::{pack_batch, AdamTrainer, Mlp};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Plain-loop forward pass, kept independent of the library implementation.
fn forward_by_hand(mlp: &Mlp, x: &DVector<f64>) -> Vec<f64> {
    let (h, d) = (mlp.hidden(), mlp.dim());
    let mut hidden = vec![0.0; h];
    for i in 0..h {
        let mut acc = mlp.b1()[i];
        for j in 0..d {
            acc += mlp.w1()[(i, j)] * x[j];
        }
        hidden[i] = acc.max(0.0);
    }
    let mut out = vec![0.0; d];
    for i in 0..d {
        let mut acc = mlp.b2()[i];
        for j in 0..h {
            acc += mlp.w2()[(i, j)] * hidden[j];
        }
        out[i] = acc;
    }
    out
}

#[test]
fn forward_matches_straight_line_reimplementation() {
    let mut rng = ChaCha12Rng::seed_from_u64(400);
    for _ in 0..20 {
        let dim = rng.random_range(1..=6);
        let hidden = rng.random_range(1..=16);
        let mlp = Mlp::new(dim, hidden, &mut rng).unwrap();
        let x = standard_normal_vector(dim, &mut rng);
        let fast = mlp.forward(&x);
        let slow = forward_by_hand(&mlp, &x);
        for i in 0..dim {
            assert!((fast[i] - slow[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(401);
    for net in 0..10 {
        let mut mlp = Mlp::new(2, 4, &mut rng).unwrap();
        let pairs: Vec<_> = (0..6)
            .map(|_| {
                (
                    standard_normal_vector(2, &mut rng),
                    standard_normal_vector(2, &mut rng),
                )
            })
            .collect();
        let (x, t) = pack_batch(&pairs);
        let (grads, _) = mlp.gradients(&x, &t);
        let analytic = grads.to_flat();

        let flat = mlp.to_flat();
        let step = 1e-5;
        for p in 0..flat.len() {
            let mut plus = flat.clone();
            plus[p] += step;
            let mut minus = flat.clone();
            minus[p] -= step;
            let loss_plus = Mlp::from_flat(2, 4, &plus).unwrap().batch_loss(&x, &t);
            let loss_minus = Mlp::from_flat(2, 4, &minus).unwrap().batch_loss(&x, &t);
            let numeric = (loss_plus - loss_minus) / (2.0 * step);
            let denom = analytic[p].abs().max(numeric.abs()).max(1.0);
            let rel = (analytic[p] - numeric).abs() / denom;
            assert!(
                rel < 1e-4,
                "net {net}, parameter {p}: analytic {} vs numeric {numeric}",
                analytic[p]
            );
        }
        // keep the borrow checker honest about mlp being used mutably later
        let _ = &mut mlp;
    }
}

#[test]
fn training_trajectories_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha12Rng::seed_from_u64(402);
        let mut mlp = Mlp::new(2, 8, &mut rng).unwrap();
        let mut trainer = AdamTrainer::new(&mlp, 1e-3);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let pairs: Vec<_> = (0..16)
                .map(|_| {
                    let x = standard_normal_vector(2, &mut rng);
                    let y = DVector::from_vec(vec![x[0] + x[1], x[0] - x[1]]);
                    (x, y)
                })
                .collect();
            let (x, t) = pack_batch(&pairs);
            losses.push(trainer.grad_step(&mut mlp, &x, &t));
        }
        (mlp.to_flat(), losses)
    };
    let (params_a, losses_a) = run();
    let (params_b, losses_b) = run();
    assert_eq!(params_a, params_b);
    assert_eq!(losses_a, losses_b);
}

#[test]
fn learns_a_linear_target() {
    let mut rng = ChaCha12Rng::seed_from_u64(403);
    let a = DMatrix::from_row_slice(2, 2, &[0.8, -0.4, 0.3, 1.1]);
    let mut mlp = Mlp::new(2, 16, &mut rng).unwrap();
    let mut trainer = AdamTrainer::new(&mlp, 1e-2);
    let mut initial = None;
    let mut final_loss = 0.0;
    let mut window_means = Vec::new();
    let mut window = Vec::new();
    for _ in 0..500 {
        let pairs: Vec<_> = (0..64)
            .map(|_| {
                let x = standard_normal_vector(2, &mut rng);
                let y = &a * &x;
                (x, y)
            })
            .collect();
        let (x, t) = pack_batch(&pairs);
        let loss = trainer.grad_step(&mut mlp, &x, &t);
        initial.get_or_insert(loss);
        final_loss = loss;
        window.push(loss);
        if window.len() == 10 {
            window_means.push(window.iter().sum::<f64>() / 10.0);
            window.clear();
        }
    }
    let initial = initial.unwrap();
    assert!(
        final_loss < 0.01 * initial,
        "loss only went from {initial} to {final_loss}"
    );

    // Windowed averages trend down; batch noise grants a little slack.
    for w in window_means.windows(2) {
        assert!(
            w[1] <= w[0] * 1.25 + 1e-9,
            "window mean rose from {} to {}",
            w[0],
            w[1]
        );
    }
    assert!(window_means.last().unwrap() < &(window_means[0] * 0.05));
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    for _ in 0..10 {
        let mlp = Mlp::new(3, 8, &mut rng).unwrap();
        let x = standard_normal_vector(3, &mut rng);
        let v = standard_normal_vector(3, &mut rng);
        let grad = mlp.input_gradient(&x, &v);
        let step = 1e-6;
        for i in 0..3 {
            let mut plus = x.clone();
            plus[i] += step;
            let mut minus = x.clone();
            minus[i] -= step;
            let numeric = (mlp.forward(&plus).dot(&v) - mlp.forward(&minus).dot(&v)) / (2.0 * step);
            assert!(
                (grad[i] - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                "coordinate {i}: {} vs {numeric}",
                grad[i]
            );
        }
    }
}
