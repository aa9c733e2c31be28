//! Codebook-dynamics laboratory.
//!
//! Standalone checks on the update rule that drives quantizer training:
//! the selector algebra, the closed-form batch update and its equivalence
//! to a gradient step on the codebook loss, a biased-sampling simulation
//! of the self-reinforcing collapse loop, and a geometric co-assignment
//! scan whose probability bound is evaluated with constants measured from
//! the actual network.
//!
//! Conventions adopted here:
//! - Expectations in the update recursion are batch means over the
//!   provided node set.
//! - The co-assignment scan works in Euclidean geometry (safety radius =
//!   half the minimum pairwise codeword distance); cosine codebooks are
//!   evaluated under the same Euclidean assignment rule.
//! - Per-layer branching factors are not observable on irregular graphs,
//!   so the bound uses the maximum degree (clamped to >= 1) at every
//!   layer — a conservative stand-in, which makes the closed-form bound
//!   loose; the implication scan, not the numeric bound, is the primary
//!   check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::EncoderParams;
use crate::error::{GvqError, Result};
use crate::graph::Graph;
use crate::tensor::{Activation, Mat, Tape};
use crate::vq::{nearest_assign, perplexity, usage_counts, Codebook, Similarity};

// ---------------------------------------------------------------------------
// Selector algebra
// ---------------------------------------------------------------------------

/// `K x K` selector with a single 1 at `(k, k)`: the outer product of the
/// one-hot assignment row with itself.
pub fn kronecker_selector(k: usize, big_k: usize) -> Result<Mat> {
    if big_k == 0 {
        return Err(GvqError::Contract("selector needs K >= 1".into()));
    }
    if k >= big_k {
        return Err(GvqError::Contract(format!(
            "selector index {k} out of range for K = {big_k}"
        )));
    }
    let mut m = Mat::zeros(big_k, big_k);
    m.set(k, k, 1.0);
    Ok(m)
}

// ---------------------------------------------------------------------------
// Analytic update step
// ---------------------------------------------------------------------------

/// One closed-form codebook update,
/// `C <- C - eta * E[d^T d C] + eta * E[d^T h]`,
/// with the expectations realized as batch means over `h`'s rows. Equivalent
/// to one gradient-descent step at rate `eta / 2` on the mean codebook loss
/// (the stop-gradient term that pulls assigned codewords toward encoder
/// outputs); rows never assigned in the batch are untouched bit-for-bit.
pub fn analytic_update_step(
    cb: &Codebook,
    h: &Mat,
    assignments: &[usize],
    eta: f64,
) -> Result<Codebook> {
    if eta <= 0.0 {
        return Err(GvqError::Param(format!("eta must be > 0, got {eta}")));
    }
    if h.cols != cb.dim() {
        return Err(GvqError::dim(
            "analytic_update_step",
            (h.rows, h.cols),
            (cb.k(), cb.dim()),
        ));
    }
    if assignments.len() != h.rows {
        return Err(GvqError::Contract(format!(
            "{} assignments for {} rows",
            assignments.len(),
            h.rows
        )));
    }
    if h.rows == 0 {
        return Err(GvqError::Contract("empty batch".into()));
    }
    let (k, d, n) = (cb.k(), cb.dim(), h.rows as f64);
    let mut counts = vec![0.0f64; k];
    let mut sums = Mat::zeros(k, d);
    for (i, &a) in assignments.iter().enumerate() {
        if a >= k {
            return Err(GvqError::Contract(format!(
                "assignment {a} out of range for K = {k}"
            )));
        }
        counts[a] += 1.0;
        for j in 0..d {
            sums.set(a, j, sums.get(a, j) + h.get(i, j));
        }
    }
    let mut entries = cb.entries.clone();
    for c in 0..k {
        let rate = eta * counts[c] / n;
        for j in 0..d {
            let old = entries.get(c, j);
            let next = old - rate * old + eta * sums.get(c, j) / n;
            entries.set(c, j, next);
        }
    }
    Codebook::new(entries, cb.similarity, cb.ortho_weight)
}

// ---------------------------------------------------------------------------
// Cocoon simulation
// ---------------------------------------------------------------------------

/// Trajectory of a biased-sampling simulation of the quantizer update loop.
#[derive(Debug, Clone)]
pub struct CocoonTrajectory {
    /// Per-step usage histogram over the `K` codes.
    pub usage: Vec<Vec<f64>>,
    /// Per-step entropy (nats) of the usage histogram.
    pub entropy: Vec<f64>,
    /// Per-step per-code update norms.
    pub step_update_norms: Vec<Vec<f64>>,
    /// Total update norm accumulated by each code over the run.
    pub cumulative_update_norm: Vec<f64>,
    /// Perplexity of the final step's usage histogram.
    pub final_perplexity: f64,
    pub initial_entries: Mat,
    pub final_entries: Mat,
}

/// Simulates the closed-form update under biased code selection with an
/// encoder pull: a fixed cloud of latent points picks codes with probability
/// proportional to `bias_k * exp(-dist^2 / T)`, the codebook moves by
/// [`analytic_update_step`], and each point then drifts a small fraction of
/// the way toward its selected codeword (the commitment direction). Biased
/// selection plus the bidirectional pull reproduces the lock-in loop: hot
/// codes absorb the cloud while never-selected codes stay frozen.
///
/// Internals are fixed for reproducibility: 8-d latents, `64 * K` points,
/// proximity temperature 8, pull factor 0.05; all randomness flows from
/// `seed`. The temperature is low enough that the proximity feedback is a
/// real force (visible entropy decay under biased selection) yet high
/// enough that uniform bias keeps usage near capacity. Note the decay is a
/// contraction-phase effect: because the bias floor keeps feeding
/// never-dominant codes, they eventually drift toward the collapsed cloud
/// and selection re-flattens — unlike hard assignment, where starved codes
/// stay frozen forever.
pub fn cocoon_sim(
    k: usize,
    bias: &[f64],
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<CocoonTrajectory> {
    if k == 0 {
        return Err(GvqError::Param("K must be >= 1".into()));
    }
    if bias.len() != k {
        return Err(GvqError::Contract(format!(
            "bias has {} entries for K = {k}",
            bias.len()
        )));
    }
    if bias.iter().any(|&b| !(b >= 0.0)) {
        return Err(GvqError::Param("bias entries must be >= 0".into()));
    }
    let total: f64 = bias.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(GvqError::Param(format!(
            "bias must sum to 1, got {total}"
        )));
    }
    if steps == 0 {
        return Err(GvqError::Param("steps must be >= 1".into()));
    }
    if eta <= 0.0 || eta > 1.0 {
        return Err(GvqError::Param(format!("eta must be in (0, 1], got {eta}")));
    }

    const DIM: usize = 8;
    const TEMP: f64 = 8.0;
    const PULL: f64 = 0.05;
    let n = 64 * k;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Mat::zeros(k, DIM);
    for v in entries.data.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let mut points = Mat::zeros(n, DIM);
    for v in points.data.iter_mut() {
        *v = rng.sample(StandardNormal);
    }

    let initial_entries = entries.clone();
    let mut cb = Codebook::new(entries, Similarity::Euclidean, 0.0)?;
    let mut usage = Vec::with_capacity(steps);
    let mut entropy = Vec::with_capacity(steps);
    let mut step_update_norms = Vec::with_capacity(steps);
    let mut cumulative = vec![0.0f64; k];

    let mut sq = vec![0.0f64; k];
    let mut weights = vec![0.0f64; k];
    let mut assignments = vec![0usize; n];
    for _ in 0..steps {
        // Proximity-times-bias selection per point.
        for i in 0..n {
            let mut min_sq = f64::INFINITY;
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..DIM {
                    let diff = points.get(i, j) - cb.entries.get(c, j);
                    acc += diff * diff;
                }
                sq[c] = acc;
                min_sq = min_sq.min(acc);
            }
            let mut z = 0.0;
            for c in 0..k {
                weights[c] = bias[c] * (-(sq[c] - min_sq) / TEMP).exp();
                z += weights[c];
            }
            let u = rng.gen::<f64>() * z;
            let mut cum = 0.0;
            let mut pick = k - 1;
            for c in 0..k {
                cum += weights[c];
                if u < cum {
                    pick = c;
                    break;
                }
            }
            // Guard against picking a zero-bias code through the final
            // fallback branch when u lands on accumulated rounding.
            if bias[pick] == 0.0 {
                pick = (0..k).rev().find(|&c| bias[c] > 0.0).unwrap();
            }
            assignments[i] = pick;
        }

        let next = analytic_update_step(&cb, &points, &assignments, eta)?;
        let mut norms = vec![0.0f64; k];
        for c in 0..k {
            let mut acc = 0.0;
            for j in 0..DIM {
                let diff = next.entries.get(c, j) - cb.entries.get(c, j);
                acc += diff * diff;
            }
            norms[c] = acc.sqrt();
            cumulative[c] += norms[c];
        }
        cb = next;

        // Commitment direction: each point drifts toward its codeword.
        for i in 0..n {
            let a = assignments[i];
            for j in 0..DIM {
                let p = points.get(i, j);
                let target = cb.entries.get(a, j);
                points.set(i, j, p + PULL * (target - p));
            }
        }

        let hist = usage_counts(&assignments, k);
        entropy.push(perplexity(&hist)?.ln());
        usage.push(hist);
        step_update_norms.push(norms);
    }

    let final_perplexity = perplexity(usage.last().unwrap())?;
    Ok(CocoonTrajectory {
        usage,
        entropy,
        step_update_norms,
        cumulative_update_norm: cumulative,
        final_perplexity,
        initial_entries,
        final_entries: cb.entries,
    })
}

// ---------------------------------------------------------------------------
// Measured constants and the co-assignment bound
// ---------------------------------------------------------------------------

/// Largest singular value by power iteration on `M^T M`, deterministic in
/// `seed`. Exact to ~1e-9 on well-separated spectra after 200 rounds.
pub fn spectral_norm(m: &Mat, iters: usize, seed: u64) -> f64 {
    if m.rows == 0 || m.cols == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..m.cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut mv = vec![0.0f64; m.rows];
    for _ in 0..iters.max(1) {
        for (r, slot) in mv.iter_mut().enumerate() {
            let mut acc = 0.0;
            for c in 0..m.cols {
                acc += m.get(r, c) * v[c];
            }
            *slot = acc;
        }
        for c in 0..m.cols {
            let mut acc = 0.0;
            for r in 0..m.rows {
                acc += m.get(r, c) * mv[r];
            }
            v[c] = acc;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    for (r, slot) in mv.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..m.cols {
            acc += m.get(r, c) * v[c];
        }
        *slot = acc;
    }
    mv.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Global Lipschitz constant of an activation, used as the sigma factor in
/// the composite constants. Unbounded activations have none.
fn activation_lipschitz(act: Activation) -> Result<f64> {
    match act {
        Activation::Relu | Activation::Elu | Activation::Identity => Ok(1.0),
        Activation::Sigmoid => Ok(0.25),
        Activation::Exp | Activation::Log => Err(GvqError::Contract(
            "activation has no global Lipschitz constant".into(),
        )),
    }
}

/// Constants of the co-assignment probability bound, measured from an
/// instantiated encoder, codebook, and graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    /// Codeword safety radius: half the minimum pairwise codeword distance.
    pub delta_c: f64,
    /// Root-transform composite: activation Lipschitz x max self-weight
    /// spectral norm.
    pub c1: f64,
    /// Neighbor-transform composite: activation Lipschitz x max
    /// neighbor-weight spectral norm (aggregation and update treated as
    /// 1-Lipschitz).
    pub c2: f64,
    /// Bound on feature row norms (measured max).
    pub b_x: f64,
    /// Cumulative branching factor per layer, `D_l = d_1 ... d_l`, with the
    /// per-layer factor taken as max degree clamped to >= 1.
    pub branching: Vec<f64>,
    /// Encoder depth.
    pub depth: usize,
}

impl BoundParams {
    /// The worst-case closed form `1 - (2 B_x / delta_c)(C1 + sum C2^l D_l)`.
    /// Often vacuous (<= 0) for measured constants; diagnostic only.
    pub fn global_bound(&self) -> f64 {
        let mut tail = 0.0;
        for (l, d) in self.branching.iter().enumerate() {
            tail += self.c2.powi(l as i32 + 1) * d;
        }
        1.0 - (2.0 * self.b_x / self.delta_c) * (self.c1 + tail)
    }

    /// The per-pair form `1 - (C1 |x1 - x2| + C2 * child-term) / delta_c`.
    /// With identical inputs and neighborhoods both terms vanish and the
    /// bound reaches exactly 1.
    pub fn pair_bound(&self, x_dist: f64, child_sum: f64) -> f64 {
        1.0 - (self.c1 * x_dist + self.c2 * child_sum) / self.delta_c
    }
}

/// Half the minimum pairwise Euclidean distance between codewords.
fn safety_radius(entries: &Mat) -> Result<f64> {
    if entries.rows < 2 {
        return Err(GvqError::Contract(
            "safety radius needs at least two codewords".into(),
        ));
    }
    let mut min_sq = f64::INFINITY;
    for a in 0..entries.rows {
        for b in (a + 1)..entries.rows {
            let mut acc = 0.0;
            for j in 0..entries.cols {
                let diff = entries.get(a, j) - entries.get(b, j);
                acc += diff * diff;
            }
            min_sq = min_sq.min(acc);
        }
    }
    let r_c = min_sq.sqrt();
    if r_c <= 0.0 {
        return Err(GvqError::Contract(
            "duplicate codewords give a zero safety radius".into(),
        ));
    }
    Ok(r_c / 2.0)
}

/// Measures every constant of [`BoundParams`] from the given triple.
pub fn measure_bound_params(
    g: &Graph,
    enc: &EncoderParams,
    cb: &Codebook,
) -> Result<BoundParams> {
    let delta_c = safety_radius(&cb.entries)?;
    let c_sigma = activation_lipschitz(enc.act)?;
    let mut b_w1: f64 = 0.0;
    let mut b_w2: f64 = 0.0;
    for (i, layer) in enc.layers.iter().enumerate() {
        b_w1 = b_w1.max(spectral_norm(&layer.w_self, 200, 1000 + i as u64));
        b_w2 = b_w2.max(spectral_norm(&layer.w_neigh, 200, 2000 + i as u64));
    }
    let b_x = (0..g.features.rows)
        .map(|i| g.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);
    let max_deg = g.adj.iter().map(|l| l.len()).max().unwrap_or(0).max(1) as f64;
    let depth = enc.layers.len();
    let mut branching = Vec::with_capacity(depth);
    let mut run = 1.0;
    for _ in 0..depth {
        run *= max_deg;
        branching.push(run);
    }
    Ok(BoundParams {
        delta_c,
        c1: c_sigma * b_w1,
        c2: c_sigma * b_w2,
        b_x,
        branching,
        depth,
    })
}

/// Outcome of an exhaustive pair scan against the safety-radius implication.
#[derive(Debug, Clone)]
pub struct PairScan {
    pub delta_c: f64,
    pub total_pairs: usize,
    /// Pairs with embedding distance within the safety radius.
    pub close_pairs: usize,
    /// Close pairs assigned to different codewords — the implication says
    /// this must be zero.
    pub violations: usize,
    /// Fraction of all pairs sharing a codeword.
    pub coassign_rate: f64,
}

/// Scans every embedding pair: distance within `delta_c` must imply the same
/// nearest codeword. Assignment and radius are both Euclidean.
pub fn coassign_scan(h: &Mat, cb: &Codebook) -> Result<PairScan> {
    let delta_c = safety_radius(&cb.entries)?;
    let euclid = Codebook::new(cb.entries.clone(), Similarity::Euclidean, 0.0)?;
    let assign = nearest_assign(h, &euclid)?;
    let n = h.rows;
    let mut close = 0usize;
    let mut violations = 0usize;
    let mut same = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for c in 0..h.cols {
                let diff = h.get(i, c) - h.get(j, c);
                acc += diff * diff;
            }
            let dist = acc.sqrt();
            if assign[i] == assign[j] {
                same += 1;
            }
            if dist <= delta_c {
                close += 1;
                if assign[i] != assign[j] {
                    violations += 1;
                }
            }
        }
    }
    let total = n * (n - 1) / 2;
    Ok(PairScan {
        delta_c,
        total_pairs: total,
        close_pairs: close,
        violations,
        coassign_rate: if total > 0 { same as f64 / total as f64 } else { 0.0 },
    })
}

/// Full co-assignment report for one (graph, encoder, codebook) triple.
#[derive(Debug, Clone)]
pub struct CoassignReport {
    pub params: BoundParams,
    pub scan: PairScan,
    /// Value of the closed-form lower bound on the co-assignment rate.
    pub global_bound: f64,
    /// Whether `coassign_rate >= global_bound`; `None` when the bound is
    /// non-positive and therefore vacuous.
    pub bound_satisfied: Option<bool>,
}

/// Encodes the graph, scans all embedding pairs for safety-radius
/// violations, and evaluates the probability bound with measured constants.
pub fn coassign_check(g: &Graph, enc: &EncoderParams, cb: &Codebook) -> Result<CoassignReport> {
    if cb.k() < 2 {
        return Err(GvqError::Contract(
            "co-assignment check needs K >= 2".into(),
        ));
    }
    let params = measure_bound_params(g, enc, cb)?;
    let tape = Tape::new();
    let x = tape.leaf(&g.features, false);
    let h = enc.lift(&tape).encode(&tape, x, &g.adj)?;
    let h_val = tape.to_mat(h);
    let scan = coassign_scan(&h_val, cb)?;
    let global_bound = params.global_bound();
    let bound_satisfied = if global_bound > 0.0 {
        Some(scan.coassign_rate >= global_bound)
    } else {
        None
    };
    Ok(CoassignReport {
        params,
        scan,
        global_bound,
        bound_satisfied,
    })
}

// ---------------------------------------------------------------------------
// Redundancy sweep
// ---------------------------------------------------------------------------

/// One cell of a redundancy/density sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub pca95: usize,
    pub avg_degree: f64,
    pub perplexity: f64,
}

/// Sweep summary: per-cell statistics plus Spearman rank correlations of
/// perplexity against each graph statistic (`None` when undefined, e.g. a
/// single-cell grid or constant columns).
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub spearman_pca95: Option<f64>,
    pub spearman_degree: Option<f64>,
}

/// Runs `train_fn` over a grid of generated graphs and correlates the
/// resulting perplexities with feature redundancy (principal components at
/// 95% variance) and connectivity (average degree).
pub fn redundancy_sweep<F>(specs: &[crate::graph::SbmSpec], mut train_fn: F) -> Result<SweepTable>
where
    F: FnMut(&Graph) -> Result<f64>,
{
    if specs.is_empty() {
        return Err(GvqError::Contract("sweep needs at least one cell".into()));
    }
    let mut cells = Vec::with_capacity(specs.len());
    for spec in specs {
        let g = crate::graph::generate_sbm(spec)?;
        let pca = crate::graph::pca95(&g.features)?;
        let perplexity = train_fn(&g)?;
        cells.push(SweepCell {
            pca95: pca.components,
            avg_degree: g.avg_degree(),
            perplexity,
        });
    }
    let ps: Vec<f64> = cells.iter().map(|c| c.perplexity).collect();
    let pcas: Vec<f64> = cells.iter().map(|c| c.pca95 as f64).collect();
    let degs: Vec<f64> = cells.iter().map(|c| c.avg_degree).collect();
    Ok(SweepTable {
        spearman_pca95: crate::graph::spearman(&pcas, &ps),
        spearman_degree: crate::graph::spearman(&degs, &ps),
        cells,
    })
}
