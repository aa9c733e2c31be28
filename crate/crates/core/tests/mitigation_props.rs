//! Mitigation-arm contracts: EMA convergence and freezing, dead-code reset,
//! affine identity and gradient flow, SimVQ shared-parameter coupling.

use gvq_core::mitigation::{
    affine_adapt, codebook_reset, ema_update, simvq_project, AffineParams, EmaState,
    MitigationConfig, MitigationKind, SimvqParams,
};
use gvq_core::tensor::{finite_diff_check, Mat, Tape};
use gvq_core::vq::{nearest_assign, ste_quantize, vq_aux_losses, Codebook, Similarity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    m
}

// --- config -------------------------------------------------------------------

#[test]
fn config_validation() {
    let mut c = MitigationConfig::default();
    assert_eq!(c.kind, MitigationKind::None);
    assert_eq!((c.ema_decay, c.dead_threshold, c.pretrain_epochs), (0.9, 10, 50));
    assert!(c.validate().is_ok());
    c.ema_decay = 1.0;
    assert!(c.validate().is_err());
    c.ema_decay = 0.0;
    assert!(c.validate().is_err());
    c.ema_decay = 0.5;
    c.dead_threshold = 0;
    assert!(c.validate().is_err());
    c.dead_threshold = 1;
    c.pretrain_epochs = 0;
    assert!(c.validate().is_err());
}

// --- EMA ----------------------------------------------------------------------

#[test]
fn ema_converges_to_cluster_mean() {
    // All nodes on code 0 with fixed h: geometric convergence to mean(h).
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = rand_mat(12, 3, &mut rng);
    let mut mean = vec![0.0; 3];
    for i in 0..12 {
        for j in 0..3 {
            mean[j] += h.get(i, j) / 12.0;
        }
    }
    let mut entries = rand_mat(4, 3, &mut rng);
    let mut state = EmaState::new(&entries);
    let assign = vec![0usize; 12];
    for _ in 0..100 {
        ema_update(&mut entries, &mut state, &h, &assign, 0.9).unwrap();
    }
    for j in 0..3 {
        assert!((entries.get(0, j) - mean[j]).abs() < 1e-3, "dim {j}: {} vs {}", entries.get(0, j), mean[j]);
    }
}

#[test]
fn ema_decay_near_one_nearly_freezes_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = rand_mat(10, 3, &mut rng);
    let assign: Vec<usize> = (0..10).map(|i| i % 3).collect();

    let run = |decay: f64| {
        let mut entries = Mat::zeros(3, 3);
        let mut state = EmaState::new(&entries);
        let before = entries.clone();
        ema_update(&mut entries, &mut state, &h, &assign, decay).unwrap();
        let mut delta = 0.0f64;
        for (a, b) in entries.data.iter().zip(before.data.iter()) {
            delta += (a - b).powi(2);
        }
        delta.sqrt()
    };
    let slow = run(0.999);
    let fast = run(0.5);
    assert!(slow < 0.02 * fast, "decay 0.999 step {slow} vs decay 0.5 step {fast}");
}

#[test]
fn ema_never_assigned_code_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = rand_mat(20, 4, &mut rng);
    let mut entries = rand_mat(5, 4, &mut rng);
    let frozen_row = entries.row(3).to_vec();
    let mut state = EmaState::new(&entries);
    for step in 0..200 {
        // Codes 0..3 cycle; code 3 never appears.
        let assign: Vec<usize> = (0..20).map(|i| (i + step) % 3).collect();
        ema_update(&mut entries, &mut state, &h, &assign, 0.9).unwrap();
    }
    assert_eq!(entries.row(3), frozen_row.as_slice());
    assert_eq!(state.cluster_size[3], 1.0);
}

#[test]
fn ema_stays_finite_under_adversarial_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = rand_mat(6, 2, &mut rng);
    let mut entries = rand_mat(8, 2, &mut rng);
    let mut state = EmaState::new(&entries);
    for step in 0..500 {
        let assign: Vec<usize> = (0..6).map(|i| rng.gen_range(0..8) * ((i + step) % 2) % 8).collect();
        ema_update(&mut entries, &mut state, &h, &assign, 0.9).unwrap();
        assert!(entries.all_finite(), "step {step}");
    }
}

#[test]
fn ema_rejects_bad_decay() {
    let mut entries = Mat::zeros(2, 2);
    let mut state = EmaState::new(&entries);
    let h = Mat::zeros(3, 2);
    assert!(ema_update(&mut entries, &mut state, &h, &[0, 1, 0], 1.0).is_err());
    assert!(ema_update(&mut entries, &mut state, &h, &[0, 1, 0], 0.0).is_err());
}

// --- reset --------------------------------------------------------------------

#[test]
fn reset_leaves_used_codes_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut entries = rand_mat(4, 3, &mut rng);
    let before = entries.clone();
    let h = rand_mat(10, 3, &mut rng);
    // Every code used every epoch.
    let history = vec![vec![1.0; 4]; 12];
    let replaced = codebook_reset(&mut entries, &history, &h, 10, &mut rng).unwrap();
    assert!(replaced.is_empty());
    assert_eq!(entries.data, before.data);
}

#[test]
fn reset_boundary_is_exactly_threshold_epochs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = rand_mat(10, 3, &mut rng);

    // Code 1 dead for exactly 10 most-recent epochs -> replaced.
    let mut entries = rand_mat(3, 3, &mut rng);
    let mut history = vec![vec![1.0; 3]; 2];
    history.extend(std::iter::repeat(vec![1.0, 0.0, 1.0]).take(10));
    let mut r = ChaCha8Rng::seed_from_u64(50);
    let replaced = codebook_reset(&mut entries, &history, &h, 10, &mut r).unwrap();
    assert_eq!(replaced, vec![1]);
    // Replacement is literally a row of h.
    let is_h_row = (0..h.rows).any(|i| h.row(i) == entries.row(1));
    assert!(is_h_row);

    // Dead for only 9 of the last 10 -> untouched.
    let mut entries = rand_mat(3, 3, &mut rng);
    let before = entries.clone();
    let mut history = vec![vec![1.0; 3]; 3];
    history.extend(std::iter::repeat(vec![1.0, 0.0, 1.0]).take(9));
    history.push(vec![1.0, 1.0, 1.0]);
    let replaced = codebook_reset(&mut entries, &history, &h, 10, &mut r).unwrap();
    assert!(replaced.is_empty());
    assert_eq!(entries.data, before.data);
}

#[test]
fn reset_is_deterministic_and_demands_enough_history() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = rand_mat(30, 3, &mut rng);
    let base = rand_mat(5, 3, &mut rng);
    let history = vec![vec![0.0; 5]; 10];

    let mut e1 = base.clone();
    let mut r1 = ChaCha8Rng::seed_from_u64(99);
    codebook_reset(&mut e1, &history, &h, 10, &mut r1).unwrap();
    let mut e2 = base.clone();
    let mut r2 = ChaCha8Rng::seed_from_u64(99);
    codebook_reset(&mut e2, &history, &h, 10, &mut r2).unwrap();
    assert_eq!(e1.data, e2.data);

    let mut e3 = base.clone();
    let short = vec![vec![0.0; 5]; 9];
    assert!(codebook_reset(&mut e3, &short, &h, 10, &mut r1).is_err());
}

#[test]
fn reset_code_can_reactivate() {
    // Two tight clusters; dead code sits far away. After reset it lands on an
    // encoder row and wins at least that row under nearest assignment.
    let h = Mat::from_rows(&[
        vec![0.0, 0.0],
        vec![0.1, 0.0],
        vec![5.0, 5.0],
        vec![5.1, 5.0],
    ]);
    let mut entries = Mat::from_rows(&[vec![0.05, 0.0], vec![100.0, 100.0]]);
    let history = vec![vec![4.0, 0.0]; 10];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let replaced = codebook_reset(&mut entries, &history, &h, 10, &mut rng).unwrap();
    assert_eq!(replaced, vec![1]);
    let book = Codebook::new(entries, Similarity::Euclidean, 0.0).unwrap();
    let assign = nearest_assign(&h, &book).unwrap();
    assert!(assign.iter().any(|&a| a == 1), "revived code is selectable again");
}

// --- affine -------------------------------------------------------------------

#[test]
fn affine_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h_val = rand_mat(6, 4, &mut rng);
    let params = AffineParams::new(4);
    let tape = Tape::new();
    let (scale, shift) = params.lift(&tape);
    let out = affine_adapt(&tape, tape.leaf(&h_val, false), scale, shift).unwrap();
    assert_eq!(tape.to_mat(out).data, h_val.data);
}

#[test]
fn affine_gradients_reach_scale_and_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h_val = rand_mat(6, 4, &mut rng);
    let params = AffineParams::new(4);
    let tape = Tape::new();
    let (scale, shift) = params.lift(&tape);
    let out = affine_adapt(&tape, tape.leaf(&h_val, false), scale, shift).unwrap();
    tape.backward(tape.sum_all(tape.mul(out, out).unwrap())).unwrap();
    assert!(tape.grad(scale).data.iter().any(|&g| g != 0.0));
    assert!(tape.grad(shift).data.iter().any(|&g| g != 0.0));

    // Finite-difference check on the scale vector.
    let h2 = h_val.clone();
    let err = finite_diff_check(
        move |tape, s| {
            let shift = tape.leaf(&Mat::zeros(1, 4), true);
            let out = affine_adapt(tape, tape.leaf(&h2, false), s, shift)?;
            Ok(tape.sum_all(tape.mul(out, out)?))
        },
        &AffineParams::new(4).scale,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "affine scale grad error {err}");
}

#[test]
fn affine_composes_with_ste_through_commitment_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let h_val = rand_mat(5, 3, &mut rng);
    let entries_val = rand_mat(4, 3, &mut rng);
    let params = AffineParams::new(3);

    let tape = Tape::new();
    let (scale, shift) = params.lift(&tape);
    let adapted = affine_adapt(&tape, tape.leaf(&h_val, false), scale, shift).unwrap();
    let adapted_val = tape.to_mat(adapted);
    let book = Codebook::new(entries_val.clone(), Similarity::Euclidean, 0.0).unwrap();
    let assign = nearest_assign(&adapted_val, &book).unwrap();
    let entries = tape.leaf(&entries_val, true);
    let (q, z) = ste_quantize(&tape, adapted, entries, &assign).unwrap();

    // Straight-through output: gradient skips the codebook, reaches affine.
    tape.backward(tape.sum_all(z)).unwrap();
    assert!(tape.grad(entries).data.iter().all(|&g| g == 0.0));
    assert!(tape.grad(scale).data.iter().any(|&g| g != 0.0));
    assert!(tape.grad(shift).data.iter().any(|&g| g != 0.0));

    // Commitment loss also reaches the affine parameters.
    tape.zero_grads();
    let (_cl, commit) = vq_aux_losses(&tape, adapted, q, 0.5).unwrap();
    tape.backward(commit).unwrap();
    assert!(tape.grad(scale).data.iter().any(|&g| g != 0.0));
    assert!(tape.grad(entries).data.iter().all(|&g| g == 0.0));
}

// --- simvq --------------------------------------------------------------------

#[test]
fn simvq_identity_projection_reproduces_basis() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let basis = rand_mat(6, 3, &mut rng);
    let params = SimvqParams::new(basis.clone());
    let tape = Tape::new();
    let (effective, _proj) = simvq_project(&tape, &params).unwrap();
    assert_eq!(tape.to_mat(effective).data, basis.data);
}

#[test]
fn simvq_gradient_hits_proj_even_for_unselected_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let basis = rand_mat(6, 3, &mut rng);
    let params = SimvqParams::new(basis);
    let h_val = rand_mat(4, 3, &mut rng);

    let tape = Tape::new();
    let (effective, proj) = simvq_project(&tape, &params).unwrap();
    // Everyone assigned to code 0: five codes never selected.
    let assign = vec![0usize; 4];
    let (q, _z) = ste_quantize(&tape, tape.leaf(&h_val, true), effective, &assign).unwrap();
    let (codebook_loss, _) = vq_aux_losses(&tape, tape.leaf(&h_val, false), q, 0.0).unwrap();
    tape.backward(codebook_loss).unwrap();
    assert!(tape.grad(proj).data.iter().any(|&g| g != 0.0));
}

#[test]
fn simvq_single_assignment_moves_every_effective_codeword() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let basis = rand_mat(5, 3, &mut rng);
    // Generic basis: no zero entries, rows not orthogonal to proj columns.
    let h_val = rand_mat(4, 3, &mut rng);
    let assign = vec![2usize; 4];
    let lr = 0.05;

    // Vanilla: gradient step on entries moves only the assigned row.
    let tape = Tape::new();
    let entries = tape.leaf(&basis, true);
    let (q, _) = ste_quantize(&tape, tape.leaf(&h_val, true), entries, &assign).unwrap();
    let (loss, _) = vq_aux_losses(&tape, tape.leaf(&h_val, false), q, 0.0).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(entries);
    let mut vanilla = basis.clone();
    for i in 0..vanilla.data.len() {
        vanilla.data[i] -= lr * g.data[i];
    }
    let vanilla_changed: Vec<bool> = (0..5)
        .map(|r| vanilla.row(r) != basis.row(r))
        .collect();
    assert_eq!(vanilla_changed, vec![false, false, true, false, false]);

    // SimVQ: the same step through proj moves every effective row.
    let mut params = SimvqParams::new(basis.clone());
    let tape = Tape::new();
    let (effective, proj) = simvq_project(&tape, &params).unwrap();
    let before = tape.to_mat(effective);
    let (q, _) = ste_quantize(&tape, tape.leaf(&h_val, true), effective, &assign).unwrap();
    let (loss, _) = vq_aux_losses(&tape, tape.leaf(&h_val, false), q, 0.0).unwrap();
    tape.backward(loss).unwrap();
    let gp = tape.grad(proj);
    for i in 0..params.proj.data.len() {
        params.proj.data[i] -= lr * gp.data[i];
    }
    let tape = Tape::new();
    let (effective, _) = simvq_project(&tape, &params).unwrap();
    let after = tape.to_mat(effective);
    for r in 0..5 {
        assert_ne!(after.row(r), before.row(r), "effective codeword {r} moved");
    }
}

#[test]
fn simvq_effective_rank_bounded_by_proj_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let basis = rand_mat(5, 3, &mut rng);
    let mut params = SimvqParams::new(basis);
    // Rank-1 projection u vᵀ.
    let u = [0.5, -1.0, 2.0];
    let v = [1.0, 2.0, -0.5];
    for i in 0..3 {
        for j in 0..3 {
            params.proj.set(i, j, u[i] * v[j]);
        }
    }
    let tape = Tape::new();
    let (effective, _) = simvq_project(&tape, &params).unwrap();
    let e = tape.to_mat(effective);
    // Every row is a multiple of v.
    for r in 0..5 {
        let row = e.row(r);
        let alpha = row[0] / v[0];
        for j in 0..3 {
            assert!((row[j] - alpha * v[j]).abs() < 1e-9, "row {r} not proportional to v");
        }
    }
}
