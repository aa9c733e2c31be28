//! AdamW contract: no-op on zero input, sign-like first step, convergence
//! on a known quadratic, and state/shape validation.

use gvq_core::optim::{AdamW, AdamWConfig};
use gvq_core::tensor::Mat;

fn cfg(lr: f64, wd: f64) -> AdamWConfig {
    AdamWConfig { lr, weight_decay: wd, ..AdamWConfig::default() }
}

#[test]
fn zero_grads_zero_decay_leave_params_bitwise_unchanged() {
    let mut p = Mat::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]);
    let before = p.data.clone();
    let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
    for _ in 0..5 {
        opt.step(&mut [&mut p], &[Mat::zeros(2, 2)]).unwrap();
    }
    assert_eq!(p.data, before);
    assert_eq!(opt.steps(), 5);
}

#[test]
fn first_step_is_learning_rate_times_sign() {
    let mut p = Mat::from_rows(&[vec![1.0, -1.0, 0.5]]);
    let g = Mat::from_rows(&[vec![0.3, -2.0, 1e-4]]);
    let lr = 0.05;
    let mut opt = AdamW::new(cfg(lr, 0.0)).unwrap();
    let before = p.data.clone();
    opt.step(&mut [&mut p], &[g.clone()]).unwrap();
    // Bias correction makes m_hat = g and v_hat = g^2 on step one, so the
    // update is -lr * g / (|g| + eps) = -lr * sign(g) up to eps.
    for i in 0..3 {
        let got = p.data[i] - before[i];
        let want = -lr * g.data[i].signum();
        let tol = lr * AdamWConfig::default().eps / g.data[i].abs();
        assert!(
            (got - want).abs() <= tol * 1.01 + 1e-15,
            "coord {i}: {got} vs {want}"
        );
    }
}

#[test]
fn decoupled_decay_shrinks_before_the_moment_update() {
    let mut p = Mat::from_rows(&[vec![2.0]]);
    let g = Mat::from_rows(&[vec![0.0]]);
    let (lr, wd) = (0.1, 0.5);
    let mut opt = AdamW::new(cfg(lr, wd)).unwrap();
    opt.step(&mut [&mut p], &[g]).unwrap();
    // Zero gradient: the only effect is the multiplicative decay.
    assert!((p.data[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
}

#[test]
fn two_hundred_steps_reach_a_quadratic_minimum() {
    // f(x, y) = (x - 3)^2 + 2 (y + 1)^2, minimum at (3, -1).
    let mut p = Mat::from_rows(&[vec![0.0, 0.0]]);
    let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
    for _ in 0..200 {
        let g = Mat::from_rows(&[vec![2.0 * (p.data[0] - 3.0), 4.0 * (p.data[1] + 1.0)]]);
        opt.step(&mut [&mut p], &[g]).unwrap();
    }
    assert!((p.data[0] - 3.0).abs() < 1e-3, "x = {}", p.data[0]);
    assert!((p.data[1] + 1.0).abs() < 1e-3, "y = {}", p.data[1]);
}

#[test]
fn multiple_parameter_groups_update_independently() {
    let mut a = Mat::from_rows(&[vec![1.0]]);
    let mut b = Mat::from_rows(&[vec![1.0, 2.0]]);
    let ga = Mat::from_rows(&[vec![1.0]]);
    let gb = Mat::zeros(1, 2);
    let mut opt = AdamW::new(cfg(0.01, 0.0)).unwrap();
    opt.step(&mut [&mut a, &mut b], &[ga, gb]).unwrap();
    assert!(a.data[0] < 1.0, "gradient-bearing slot moves");
    assert_eq!(b.data, vec![1.0, 2.0], "zero-grad slot untouched");
}

#[test]
fn config_and_shape_validation() {
    assert!(AdamW::new(cfg(0.0, 0.0)).is_err());
    assert!(AdamW::new(cfg(-0.1, 0.0)).is_err());
    assert!(AdamW::new(cfg(0.1, -1.0)).is_err());
    assert!(AdamW::new(AdamWConfig { beta1: 1.0, ..AdamWConfig::default() }).is_err());
    assert!(AdamW::new(AdamWConfig { beta2: -0.1, ..AdamWConfig::default() }).is_err());
    assert!(AdamW::new(AdamWConfig { eps: 0.0, ..AdamWConfig::default() }).is_err());

    let mut p = Mat::zeros(2, 2);
    let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
    assert!(opt.step(&mut [&mut p], &[]).is_err(), "group size mismatch");
    assert!(opt.step(&mut [&mut p], &[Mat::zeros(3, 2)]).is_err(), "shape mismatch");
}

#[test]
fn deterministic_across_reconstruction() {
    let run = || {
        let mut p = Mat::from_rows(&[vec![0.7, -0.3]]);
        let mut opt = AdamW::new(cfg(0.05, 1e-4)).unwrap();
        for t in 0..50 {
            let g = Mat::from_rows(&[vec![(t as f64).sin(), (t as f64).cos()]]);
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        p.data
    };
    assert_eq!(run(), run());
}
