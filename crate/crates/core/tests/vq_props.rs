//! Quantization-core oracles: assignment, STE routing, losses, perplexity,
//! k-means seeding, orthogonality penalty.

use gvq_core::encoder::{init_decoder, DecoderParams};
use gvq_core::graph::Graph;
use gvq_core::tensor::{finite_diff_check, Mat, Tape};
use gvq_core::vq::{
    all_link_pairs, feature_recon, gaussian_init, kmeans_with_trace, link_recon, nearest_assign,
    perplexity, recon_losses, sample_link_pairs, ste_quantize, usage_counts, vq_aux_losses,
    Codebook, LinkMode, Similarity,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.gen_range(-1.5..1.5);
    }
    m
}

fn cb(entries: Mat, sim: Similarity) -> Codebook {
    Codebook::new(entries, sim, 0.0).unwrap()
}

fn complete_graph(n: usize, f: usize) -> Graph {
    let feats = Mat::zeros(n, f);
    let adj: Vec<Vec<u32>> = (0..n)
        .map(|u| (0..n as u32).filter(|&v| v as usize != u).collect())
        .collect();
    Graph::new(feats, adj, None)
}

fn ring_graph(n: usize, f: usize) -> Graph {
    let feats = Mat::zeros(n, f);
    let mut adj = vec![Vec::new(); n];
    for u in 0..n {
        let v = (u + 1) % n;
        adj[u].push(v as u32);
        adj[v].push(u as u32);
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }
    Graph::new(feats, adj, None)
}

// --- nearest_assign ---------------------------------------------------------

#[test]
fn exact_codeword_maps_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let entries = rand_mat(6, 4, &mut rng);
    let h = Mat::from_rows(&[entries.row(3).to_vec()]);
    let a = nearest_assign(&h, &cb(entries, Similarity::Euclidean)).unwrap();
    assert_eq!(a, vec![3]);
}

#[test]
fn ties_break_to_lowest_index() {
    // Codewords at -1 and +1 in 1-D; h = 0 is equidistant.
    let entries = Mat::from_rows(&[vec![5.0], vec![-1.0], vec![3.0], vec![9.0], vec![1.0]]);
    let h = Mat::from_rows(&[vec![0.0]]);
    let a = nearest_assign(&h, &cb(entries, Similarity::Euclidean)).unwrap();
    assert_eq!(a, vec![1], "indices 1 and 4 tie; lowest wins");
}

#[test]
fn assignment_matches_expansion_oracle() {
    // Oracle computes argmin via the expanded form |h|^2 - 2 h.c + |c|^2.
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let h = rand_mat(10, 4, &mut rng);
        let entries = rand_mat(6, 4, &mut rng);
        let ours = nearest_assign(&h, &cb(entries.clone(), Similarity::Euclidean)).unwrap();
        for i in 0..10 {
            let hh: f64 = h.row(i).iter().map(|v| v * v).sum();
            let mut best = (0usize, f64::INFINITY);
            for k in 0..6 {
                let cc: f64 = entries.row(k).iter().map(|v| v * v).sum();
                let hc: f64 = h.row(i).iter().zip(entries.row(k)).map(|(a, b)| a * b).sum();
                let d = hh - 2.0 * hc + cc;
                if d < best.1 {
                    best = (k, d);
                }
            }
            assert_eq!(ours[i], best.0, "seed {seed} row {i}");
        }
    }
}

#[test]
fn cosine_assignment_is_scale_invariant_and_matches_cosine_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = rand_mat(12, 5, &mut rng);
    let entries = rand_mat(7, 5, &mut rng);
    let book = cb(entries.clone(), Similarity::Cosine);
    let base = nearest_assign(&h, &book).unwrap();

    // Row-wise rescaling leaves cosine assignment unchanged.
    let mut scaled = h.clone();
    for i in 0..scaled.rows {
        let s = 0.1 + 3.0 * (i as f64 % 4.0);
        for j in 0..scaled.cols {
            let v = scaled.get(i, j) * s;
            scaled.set(i, j, v);
        }
    }
    assert_eq!(nearest_assign(&scaled, &book).unwrap(), base);

    // Oracle: direct cosine argmax.
    for i in 0..h.rows {
        let hn: f64 = h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = (0usize, f64::NEG_INFINITY);
        for k in 0..entries.rows {
            let cn: f64 = entries.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = h.row(i).iter().zip(entries.row(k)).map(|(a, b)| a * b).sum();
            let cos = dot / (hn * cn);
            if cos > best.1 {
                best = (k, cos);
            }
        }
        assert_eq!(base[i], best.0, "row {i}");
    }
}

#[test]
fn assignment_agrees_with_pairwise_distance_argmin() {
    // Consistency between the deterministic path and the logits the
    // stochastic path uses (argmin distance == argmax of negated distances).
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let h = rand_mat(20, 6, &mut rng);
    let entries = rand_mat(9, 6, &mut rng);
    let ours = nearest_assign(&h, &cb(entries.clone(), Similarity::Euclidean)).unwrap();

    let tape = Tape::new();
    let d2 = tape
        .pairwise_sq_dist(tape.leaf(&h, false), tape.leaf(&entries, false))
        .unwrap();
    let dm = tape.to_mat(d2);
    for i in 0..20 {
        let row = dm.row(i);
        let mut best = (0usize, f64::INFINITY);
        for (k, &v) in row.iter().enumerate() {
            if v < best.1 {
                best = (k, v);
            }
        }
        assert_eq!(ours[i], best.0);
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let entries = Mat::zeros(3, 4);
    let h = Mat::zeros(2, 5);
    assert!(nearest_assign(&h, &cb(entries, Similarity::Euclidean)).is_err());
}

// --- ste_quantize ------------------------------------------------------------

#[test]
fn ste_forward_is_exact_gather_and_gradients_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h_val = rand_mat(5, 3, &mut rng);
    let entries_val = rand_mat(4, 3, &mut rng);
    let assign = nearest_assign(&h_val, &cb(entries_val.clone(), Similarity::Euclidean)).unwrap();

    let tape = Tape::new();
    let h = tape.leaf(&h_val, true);
    let entries = tape.leaf(&entries_val, true);
    let (q, z) = ste_quantize(&tape, h, entries, &assign).unwrap();

    // Forward: row i equals the assigned codeword bit-for-bit.
    let zv = tape.to_mat(z);
    let qv = tape.to_mat(q);
    for i in 0..5 {
        assert_eq!(zv.row(i), entries_val.row(assign[i]));
        assert_eq!(qv.row(i), entries_val.row(assign[i]));
    }

    // Backward of sum(z): dz/dh == 1 exactly, dz/dC == 0 exactly.
    tape.backward(tape.sum_all(z)).unwrap();
    assert!(tape.grad(h).data.iter().all(|&g| g == 1.0));
    assert!(tape.grad(entries).data.iter().all(|&g| g == 0.0));
}

#[test]
fn codeword_gradient_flows_through_q_only_to_assigned_rows() {
    let h_val = Mat::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![0.1, -0.1]]);
    let entries_val = Mat::from_rows(&[vec![0.0, 0.1], vec![1.0, 0.9], vec![50.0, 50.0]]);
    let assign = vec![0usize, 1, 0];

    let tape = Tape::new();
    let h = tape.leaf(&h_val, true);
    let entries = tape.leaf(&entries_val, true);
    let (q, _z) = ste_quantize(&tape, h, entries, &assign).unwrap();
    let (codebook_loss, _) = vq_aux_losses(&tape, h, q, 0.0).unwrap();
    tape.backward(codebook_loss).unwrap();

    let ge = tape.grad(entries);
    assert!(ge.row(0).iter().any(|&g| g != 0.0), "assigned row 0 moves");
    assert!(ge.row(1).iter().any(|&g| g != 0.0), "assigned row 1 moves");
    assert!(ge.row(2).iter().all(|&g| g == 0.0), "never-assigned row is frozen exactly");
    assert!(tape.grad(h).data.iter().all(|&g| g == 0.0), "sg blocks the encoder side");
}

// --- vq_aux_losses -----------------------------------------------------------

#[test]
fn aux_losses_match_analytic_values() {
    let tape = Tape::new();
    let q_val = Mat::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0], vec![2.0, 2.0, 2.0], vec![-1.0, 0.0, 4.0]]);
    let mut h_val = q_val.clone();
    for v in h_val.data.iter_mut() {
        *v += 1.0;
    }
    let h = tape.leaf(&h_val, true);
    let q = tape.leaf(&q_val, true);

    // Identical inputs: both zero.
    let (cl, co) = vq_aux_losses(&tape, q, q, 0.7).unwrap();
    assert_eq!(tape.scalar(cl).unwrap(), 0.0);
    assert_eq!(tape.scalar(co).unwrap(), 0.0);

    // Unit offset on every one of the n*d = 12 entries: sums are 12 and beta*12.
    let (cl, co) = vq_aux_losses(&tape, h, q, 0.25).unwrap();
    assert!((tape.scalar(cl).unwrap() - 12.0).abs() < 1e-12);
    assert!((tape.scalar(co).unwrap() - 3.0).abs() < 1e-12);
}

#[test]
fn aux_loss_gradients_route_to_disjoint_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let tape = Tape::new();
    let h = tape.leaf(&rand_mat(4, 3, &mut rng), true);
    let q = tape.leaf(&rand_mat(4, 3, &mut rng), true);

    let (codebook_loss, commit_loss) = vq_aux_losses(&tape, h, q, 0.5).unwrap();

    tape.backward(codebook_loss).unwrap();
    assert!(tape.grad(h).data.iter().all(|&g| g == 0.0));
    assert!(tape.grad(q).data.iter().any(|&g| g != 0.0));

    tape.zero_grads();
    tape.backward(commit_loss).unwrap();
    assert!(tape.grad(q).data.iter().all(|&g| g == 0.0));
    assert!(tape.grad(h).data.iter().any(|&g| g != 0.0));
}

#[test]
fn negative_beta_rejected() {
    let tape = Tape::new();
    let h = tape.leaf(&Mat::zeros(2, 2), false);
    assert!(vq_aux_losses(&tape, h, h, -0.1).is_err());
}

// --- recon_losses ------------------------------------------------------------

fn identity_decoder(d: usize) -> DecoderParams {
    DecoderParams {
        w1: Mat::identity(d),
        b1: Mat::zeros(1, d),
        w2: Mat::identity(d),
        b2: Mat::zeros(1, d),
    }
}

#[test]
fn perfect_reconstruction_gives_zero_feature_loss() {
    // Identity decoder on positive inputs (ELU is identity there).
    let g = ring_graph(6, 3);
    let mut x = Mat::zeros(6, 3);
    for (i, v) in x.data.iter_mut().enumerate() {
        *v = 0.5 + (i as f64) * 0.1;
    }
    let tape = Tape::new();
    let z = tape.leaf(&x, false);
    let xt = tape.constant(&x);
    let dec = identity_decoder(3).lift(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (feat, _link) =
        recon_losses(&tape, &g, z, xt, &dec, LinkMode::Sampled { neg_per_pos: 2 }, &mut rng).unwrap();
    assert!(tape.scalar(feat).unwrap().abs() < 1e-15);
}

#[test]
fn orthogonal_codes_on_complete_graph_give_quarter_link_loss() {
    let n = 8;
    let g = complete_graph(n, 2);
    let mut z_val = Mat::zeros(n, n);
    for i in 0..n {
        z_val.set(i, i, 1000.0); // huge orthogonal rows: z_u . z_v = 0 for u != v
    }
    let tape = Tape::new();
    let z = tape.leaf(&z_val, false);
    let x = tape.constant(&Mat::zeros(n, 2));
    let dec = init_decoder(n, 2, 3).lift(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_feat, link) = recon_losses(&tape, &g, z, x, &dec, LinkMode::Dense, &mut rng).unwrap();
    // Every pair is an edge (target 1) with sigma(0) = 0.5 -> (1 - 0.5)^2.
    assert!((tape.scalar(link).unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn dense_and_sampled_link_losses_agree_when_all_pairs_sampled() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 20;
    let mut adj = vec![Vec::new(); n];
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen_bool(0.25) {
                adj[u].push(v as u32);
                adj[v].push(u as u32);
            }
        }
    }
    let g = Graph::new(Mat::zeros(n, 2), adj, None);
    let z_val = rand_mat(n, 4, &mut rng);

    // Dense route: full sigmoid(Z Z^T) with diagonal mask.
    let tape = Tape::new();
    let z = tape.leaf(&z_val, false);
    let x = tape.constant(&Mat::zeros(n, 2));
    let dec = init_decoder(4, 2, 5).lift(&tape);
    let mut r0 = ChaCha8Rng::seed_from_u64(0);
    let (_f, dense) = recon_losses(&tape, &g, z, x, &dec, LinkMode::Dense, &mut r0).unwrap();

    // Sampled route evaluated on the complete pair list.
    let sampled = link_recon(&tape, z, &all_link_pairs(&g)).unwrap();
    let a = tape.scalar(dense).unwrap();
    let b = tape.scalar(sampled).unwrap();
    assert!((a - b).abs() < 1e-9, "dense {a} vs sampled-on-all-pairs {b}");
}

#[test]
fn sampled_pairs_have_correct_targets_and_counts() {
    let g = ring_graph(10, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs = sample_link_pairs(&g, 3, &mut rng).unwrap();
    let e = g.edge_count();
    assert_eq!(pairs.len(), e + 3 * e);
    for &(u, v, t) in &pairs {
        assert!(u < v);
        if t == 1.0 {
            assert!(g.has_edge(u, v));
        } else {
            assert_eq!(t, 0.0);
            assert!(!g.has_edge(u, v));
        }
    }
    assert!(sample_link_pairs(&g, 0, &mut rng).is_err(), "neg_per_pos < 1 rejected");
}

#[test]
fn recon_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let n = 7;
    let g = ring_graph(n, 3);
    let z_val = rand_mat(n, 4, &mut rng);
    let x_val = rand_mat(n, 3, &mut rng);
    let dec = init_decoder(4, 3, 11);

    let x2 = x_val.clone();
    let dec2 = dec.clone();
    let err = finite_diff_check(
        move |tape, z| {
            let lifted = dec2.lift(tape);
            let xhat = lifted.decode(tape, z)?;
            feature_recon(tape, xhat, tape.constant(&x2))
        },
        &z_val,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "feature loss grad error {err}");

    let pairs = all_link_pairs(&g);
    let err = finite_diff_check(move |tape, z| link_recon(tape, z, &pairs), &z_val, 1e-5).unwrap();
    assert!(err < 1e-4, "link loss grad error {err}");
}

// --- perplexity ---------------------------------------------------------------

#[test]
fn perplexity_reference_points() {
    // Total collapse: every node on one code.
    let counts = usage_counts(&vec![3usize; 40], 16);
    assert!((perplexity(&counts).unwrap() - 1.0).abs() < 1e-12);

    // Uniform over K = 512.
    let uniform = vec![1.0; 512];
    assert!((perplexity(&uniform).unwrap() - 512.0).abs() < 1e-9);

    // Two codes at 1/2 each.
    let mut half = vec![0.0; 8];
    half[0] = 0.5;
    half[3] = 0.5;
    assert!((perplexity(&half).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn perplexity_error_cases() {
    assert!(perplexity(&[]).is_err());
    assert!(perplexity(&[0.0, 0.0]).is_err());
    assert!(perplexity(&[1.0, -0.5]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn perplexity_bounded_by_support(counts in proptest::collection::vec(0u32..50, 1..40)) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let p = perplexity(&weights).unwrap();
        let k = weights.len() as f64;
        prop_assert!(p >= 1.0 - 1e-12 && p <= k + 1e-9, "P = {p} outside [1, {k}]");
    }
}

// --- kmeans -------------------------------------------------------------------

#[test]
fn kmeans_n_equals_k_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = rand_mat(5, 3, &mut rng);
    let (centroids, trace) = kmeans_with_trace(&h, 5, 10, 0).unwrap();
    assert!(trace.last().unwrap().abs() < 1e-18, "inertia 0 when every point is a centroid");
    // Centroids are exactly the points, as a set.
    for i in 0..5 {
        let hit = (0..5).any(|c| centroids.row(c) == h.row(i));
        assert!(hit, "point {i} has its own centroid");
    }
}

#[test]
fn kmeans_recovers_two_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut rows = Vec::new();
    let (mut mean_a, mut mean_b) = (vec![0.0, 0.0], vec![0.0, 0.0]);
    for _ in 0..30 {
        let p = vec![10.0 + rng.gen_range(-0.5..0.5), 10.0 + rng.gen_range(-0.5..0.5)];
        mean_a[0] += p[0] / 30.0;
        mean_a[1] += p[1] / 30.0;
        rows.push(p);
    }
    for _ in 0..30 {
        let p = vec![-10.0 + rng.gen_range(-0.5..0.5), -10.0 + rng.gen_range(-0.5..0.5)];
        mean_b[0] += p[0] / 30.0;
        mean_b[1] += p[1] / 30.0;
        rows.push(p);
    }
    let (centroids, _) = kmeans_with_trace(&Mat::from_rows(&rows), 2, 20, 7).unwrap();
    let c0 = centroids.row(0);
    let c1 = centroids.row(1);
    let d = |c: &[f64], m: &[f64]| ((c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2)).sqrt();
    let direct = d(c0, &mean_a).max(d(c1, &mean_b));
    let swapped = d(c0, &mean_b).max(d(c1, &mean_a));
    assert!(direct.min(swapped) < 0.1, "centroids near blob means");
}

#[test]
fn kmeans_inertia_is_monotone_nonincreasing() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let h = rand_mat(60, 4, &mut rng);
        let (_c, trace) = kmeans_with_trace(&h, 8, 15, seed).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "seed {seed}: inertia rose {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn kmeans_contract_errors_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = rand_mat(4, 3, &mut rng);
    assert!(kmeans_with_trace(&h, 5, 3, 0).is_err(), "n < K");
    let a = kmeans_with_trace(&h, 2, 5, 9).unwrap().0;
    let b = kmeans_with_trace(&h, 2, 5, 9).unwrap().0;
    assert_eq!(a.data, b.data);
}

// --- ortho_penalty -------------------------------------------------------------

#[test]
fn orthonormal_rows_have_zero_penalty() {
    let tape = Tape::new();
    let entries = tape.leaf(&Mat::identity(4), true);
    let (pen, flagged) = gvq_core::vq::ortho_penalty(&tape, entries).unwrap();
    assert!(tape.scalar(pen).unwrap().abs() < 1e-18);
    assert!(!flagged);
}

#[test]
fn identical_unit_rows_penalty_is_two() {
    let tape = Tape::new();
    let entries = tape.leaf(&Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]), true);
    let (pen, flagged) = gvq_core::vq::ortho_penalty(&tape, entries).unwrap();
    assert!((tape.scalar(pen).unwrap() - 2.0).abs() < 1e-12);
    assert!(!flagged);
}

#[test]
fn scaling_rows_does_not_change_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let entries = rand_mat(5, 3, &mut rng);
    let tape = Tape::new();
    let (pen, _) = gvq_core::vq::ortho_penalty(&tape, tape.leaf(&entries, false)).unwrap();
    let mut scaled = entries.clone();
    for i in 0..5 {
        for j in 0..3 {
            let v = scaled.get(i, j) * (1.0 + i as f64);
            scaled.set(i, j, v);
        }
    }
    let (pen2, _) = gvq_core::vq::ortho_penalty(&tape, tape.leaf(&scaled, false)).unwrap();
    assert!((tape.scalar(pen).unwrap() - tape.scalar(pen2).unwrap()).abs() < 1e-12);
}

#[test]
fn zero_norm_row_is_flagged() {
    let tape = Tape::new();
    let entries = tape.leaf(&Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]), false);
    let (_pen, flagged) = gvq_core::vq::ortho_penalty(&tape, entries).unwrap();
    assert!(flagged);
}

#[test]
fn ortho_penalty_gradient_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let entries = rand_mat(4, 3, &mut rng);
    let err = finite_diff_check(
        |tape, e| gvq_core::vq::ortho_penalty(tape, e).map(|(p, _)| p),
        &entries,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "ortho grad error {err}");
}

// --- init helpers ---------------------------------------------------------------

#[test]
fn gaussian_init_is_deterministic_with_requested_shape() {
    let a = gaussian_init(6, 4, 1.0, 5);
    let b = gaussian_init(6, 4, 1.0, 5);
    assert_eq!(a.shape(), (6, 4));
    assert_eq!(a.data, b.data);
    let c = gaussian_init(6, 4, 1.0, 6);
    assert_ne!(a.data, c.data);
}
