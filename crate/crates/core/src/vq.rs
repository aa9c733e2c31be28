//! Codebook, deterministic quantization with straight-through gradients,
//! reconstruction and auxiliary losses, perplexity, and codebook seeding.
//!
//! Conventions: [`vq_aux_losses`] returns raw squared-norm sums (the training
//! harness divides by node count when assembling the total); the feature
//! reconstruction is already a per-node mean; the link reconstruction is a
//! mean over its pair collection, so the sampled estimator evaluated on every
//! pair equals the dense form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::LiftedDecoder;
use crate::error::{GvqError, Result};
use crate::graph::Graph;
use crate::tensor::{Activation, Mat, Tape, Tensor};

/// Distance convention used for assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// argmin over squared Euclidean distance to stored entries.
    Euclidean,
    /// argmax over cosine similarity: Euclidean argmin on row-normalized
    /// vectors. Stored entries stay unnormalized.
    Cosine,
}

/// Discrete code container. `entries` is K x d.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub entries: Mat,
    pub similarity: Similarity,
    pub ortho_weight: f64,
}

impl Codebook {
    pub fn new(entries: Mat, similarity: Similarity, ortho_weight: f64) -> Result<Self> {
        if entries.rows == 0 {
            return Err(GvqError::Contract("codebook must hold at least one entry".into()));
        }
        if !entries.all_finite() {
            return Err(GvqError::Numeric("codebook entries must be finite".into()));
        }
        if !(ortho_weight >= 0.0) {
            return Err(GvqError::Param(format!("ortho_weight must be >= 0, got {ortho_weight}")));
        }
        Ok(Self { entries, similarity, ortho_weight })
    }

    pub fn k(&self) -> usize {
        self.entries.rows
    }

    pub fn dim(&self) -> usize {
        self.entries.cols
    }
}

fn normalized_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    crate::graph::l2_normalize_rows(&mut out);
    out
}

/// Per-row index of the nearest codeword under the configured similarity.
/// Ties break to the lowest index.
pub fn nearest_assign(h: &Mat, cb: &Codebook) -> Result<Vec<usize>> {
    if cb.k() == 0 {
        return Err(GvqError::Contract("empty codebook".into()));
    }
    if h.cols != cb.dim() {
        return Err(GvqError::dim("nearest_assign", (h.rows, h.cols), (cb.k(), cb.dim())));
    }
    let (hn, cn);
    let (hq, cq) = match cb.similarity {
        Similarity::Euclidean => (h, &cb.entries),
        Similarity::Cosine => {
            hn = normalized_rows(h);
            cn = normalized_rows(&cb.entries);
            (&hn, &cn)
        }
    };
    let d = h.cols;
    let mut out = Vec::with_capacity(h.rows);
    for i in 0..h.rows {
        let hrow = hq.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..cb.k() {
            let crow = cq.row(k);
            let mut dist = 0.0;
            for j in 0..d {
                let diff = hrow[j] - crow[j];
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = k;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Straight-through quantization. Returns `(q, z)` where `q` gathers the
/// assigned codeword rows (gradient flows to the codebook) and
/// `z = sg(q - h) + h` (forward equals `q`, gradient w.r.t. `h` is exactly
/// the identity, none reaches the codebook).
pub fn ste_quantize(tape: &Tape, h: Tensor, entries: Tensor, assign: &[usize]) -> Result<(Tensor, Tensor)> {
    if assign.len() != tape.shape(h).0 {
        return Err(GvqError::Contract(format!(
            "assignment length {} != node count {}",
            assign.len(),
            tape.shape(h).0
        )));
    }
    let q = tape.gather_rows(entries, assign)?;
    let z = tape.add(tape.stop_gradient(tape.sub(q, h)?), h)?;
    Ok((q, z))
}

/// Codebook and commitment losses as raw squared-norm sums:
/// `(‖sg[h] - q‖², β·‖h - sg[q]‖²)`. The first routes gradient only to the
/// codebook (through `q`), the second only to `h`.
pub fn vq_aux_losses(tape: &Tape, h: Tensor, q: Tensor, beta: f64) -> Result<(Tensor, Tensor)> {
    if beta < 0.0 {
        return Err(GvqError::Param(format!("beta must be >= 0, got {beta}")));
    }
    let codebook_diff = tape.sub(tape.stop_gradient(h), q)?;
    let codebook_loss = tape.sum_all(tape.mul(codebook_diff, codebook_diff)?);
    let commit_diff = tape.sub(h, tape.stop_gradient(q))?;
    let commit_loss = tape.scale(tape.sum_all(tape.mul(commit_diff, commit_diff)?), beta);
    Ok((codebook_loss, commit_loss))
}

/// Per-node mean of the squared feature reconstruction error:
/// `(1/n)·‖xhat - x‖²`.
pub fn feature_recon(tape: &Tape, xhat: Tensor, x: Tensor) -> Result<Tensor> {
    let (n, _) = tape.shape(x);
    let diff = tape.sub(xhat, x)?;
    Ok(tape.scale(tape.sum_all(tape.mul(diff, diff)?), 1.0 / n as f64))
}

/// How the link reconstruction pairs are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum LinkMode {
    /// All unordered node pairs; bounded to n <= 512.
    Dense,
    /// Every positive edge plus `neg_per_pos` sampled non-edges per positive.
    Sampled { neg_per_pos: usize },
}

/// All unordered non-diagonal pairs with adjacency targets.
pub fn all_link_pairs(g: &Graph) -> Vec<(u32, u32, f64)> {
    let mut pairs = Vec::with_capacity(g.n * (g.n - 1) / 2);
    for u in 0..g.n as u32 {
        for v in (u + 1)..g.n as u32 {
            pairs.push((u, v, if g.has_edge(u, v) { 1.0 } else { 0.0 }));
        }
    }
    pairs
}

/// Every positive edge once, plus `neg_per_pos` non-edges per positive drawn
/// uniformly (rejection sampling) with target 0.
pub fn sample_link_pairs(g: &Graph, neg_per_pos: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(u32, u32, f64)>> {
    if neg_per_pos < 1 {
        return Err(GvqError::Param("neg_per_pos must be >= 1 in sampled mode".into()));
    }
    let positives = g.edges();
    if positives.is_empty() {
        return Err(GvqError::Contract("link sampling needs at least one edge".into()));
    }
    let total_pairs = g.n * (g.n - 1) / 2;
    if positives.len() == total_pairs {
        return Err(GvqError::Contract("complete graph has no non-edges to sample".into()));
    }
    let mut pairs: Vec<(u32, u32, f64)> = positives.iter().map(|&(u, v)| (u, v, 1.0)).collect();
    let wanted = positives.len() * neg_per_pos;
    let mut drawn = 0usize;
    let mut attempts = 0usize;
    let cap = 1000 * wanted.max(1);
    while drawn < wanted {
        attempts += 1;
        if attempts > cap {
            return Err(GvqError::Numeric(
                "negative sampling rejection cap exceeded; graph too dense".into(),
            ));
        }
        let u = rng.gen_range(0..g.n as u32);
        let v = rng.gen_range(0..g.n as u32);
        if u == v {
            continue;
        }
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        if g.has_edge(a, b) {
            continue;
        }
        pairs.push((a, b, 0.0));
        drawn += 1;
    }
    Ok(pairs)
}

/// Mean over `pairs` of `(a_uv - sigmoid(z_u . z_v))²`, differentiable in `z`.
pub fn link_recon(tape: &Tape, z: Tensor, pairs: &[(u32, u32, f64)]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(GvqError::Contract("link reconstruction needs at least one pair".into()));
    }
    let idx: std::rc::Rc<Vec<(u32, u32)>> = std::rc::Rc::new(pairs.iter().map(|&(u, v, _)| (u, v)).collect());
    let dots = tape.pair_dots(z, &idx)?;
    let probs = tape.activation(dots, Activation::Sigmoid)?;
    let targets = Mat::new(pairs.len(), 1, pairs.iter().map(|&(_, _, t)| t).collect());
    let diff = tape.sub(probs, tape.constant(&targets))?;
    Ok(tape.mean_all(tape.mul(diff, diff)?))
}

/// Dense link loss via the full similarity matrix `sigma(Z Zᵀ)`: mean over
/// unordered non-diagonal pairs. Independent route from [`link_recon`].
fn link_recon_dense(tape: &Tape, z: Tensor, g: &Graph) -> Result<Tensor> {
    if g.n > 512 {
        return Err(GvqError::Param(format!("dense link mode is limited to n <= 512, got n = {}", g.n)));
    }
    if g.n < 2 {
        return Err(GvqError::Contract("dense link loss needs at least two nodes".into()));
    }
    let scores = tape.matmul(z, tape.transpose(z))?;
    let probs = tape.activation(scores, Activation::Sigmoid)?;
    let mut adj_dense = Mat::zeros(g.n, g.n);
    let mut mask = Mat::zeros(g.n, g.n);
    for u in 0..g.n {
        for v in 0..g.n {
            if u != v {
                mask.set(u, v, 1.0);
                if g.has_edge(u.min(v) as u32, u.max(v) as u32) {
                    adj_dense.set(u, v, 1.0);
                }
            }
        }
    }
    let diff = tape.sub(probs, tape.constant(&adj_dense))?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, tape.constant(&mask))?;
    // Off-diagonal sum double-counts each unordered pair, so the mean over
    // n(n-1)/2 pairs is sum / (n(n-1)).
    Ok(tape.scale(tape.sum_all(masked), 1.0 / (g.n * (g.n - 1)) as f64))
}

/// Feature and link reconstruction losses for quantized codes `z`.
pub fn recon_losses(
    tape: &Tape,
    g: &Graph,
    z: Tensor,
    x: Tensor,
    dec: &LiftedDecoder,
    mode: LinkMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    if tape.shape(z).0 != g.n {
        return Err(GvqError::Contract(format!("z has {} rows for {} nodes", tape.shape(z).0, g.n)));
    }
    let xhat = dec.decode(tape, z)?;
    let feature = feature_recon(tape, xhat, x)?;
    let link = match mode {
        LinkMode::Dense => link_recon_dense(tape, z, g)?,
        LinkMode::Sampled { neg_per_pos } => {
            let pairs = sample_link_pairs(g, neg_per_pos, rng)?;
            link_recon(tape, z, &pairs)?
        }
    };
    Ok((feature, link))
}

/// Code-usage histogram (as counts) for an assignment.
pub fn usage_counts(assign: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0.0; k];
    for &a in assign {
        counts[a] += 1.0;
    }
    counts
}

/// `exp(-Σ p_k log p_k)` of the normalized weight vector; `0·log 0 := 0`.
/// Accepts raw counts or probabilities.
pub fn perplexity(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(GvqError::Contract("perplexity of empty usage vector".into()));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(GvqError::Domain("usage weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(GvqError::Contract("perplexity needs positive total usage".into()));
    }
    let mut entropy = 0.0;
    for &w in weights {
        let p = w / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means++ seeding followed by Lloyd iterations. Returns the centroids and
/// the inertia after each assignment phase (monotone non-increasing). Empty
/// clusters are re-seeded at the point farthest from its current centroid.
pub fn kmeans_with_trace(h: &Mat, k: usize, iters: usize, seed: u64) -> Result<(Mat, Vec<f64>)> {
    let n = h.rows;
    if k == 0 {
        return Err(GvqError::Contract("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(GvqError::Contract(format!("k-means needs n >= K, got n = {n}, K = {k}")));
    }
    let d = h.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Mat::zeros(k, d);
    let first = rng.gen_range(0..n);
    centroids.data[..d].copy_from_slice(h.row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(h.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        let start = c * d;
        centroids.data[start..start + d].copy_from_slice(h.row(pick));
        for i in 0..n {
            min_d2[i] = min_d2[i].min(sq_dist(h.row(i), centroids.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    let mut trace = Vec::with_capacity(iters + 1);
    for _ in 0..=iters {
        // Assignment phase (lowest-index ties) and inertia.
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(h.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assign[i] = best;
            inertia += best_d;
        }
        trace.push(inertia);
        if trace.len() > iters {
            break;
        }

        // Update phase.
        let mut sums = Mat::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            let start = c * d;
            for (j, &v) in h.row(i).iter().enumerate() {
                sums.data[start + j] += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let start = c * d;
                for j in 0..d {
                    centroids.data[start + j] = sums.data[start + j] / counts[c] as f64;
                }
            } else {
                // Re-seed at the globally farthest point from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(h.row(a), centroids.row(assign[a]));
                        let db = sq_dist(h.row(b), centroids.row(assign[b]));
                        da.partial_cmp(&db).expect("finite distances")
                    })
                    .expect("n >= 1");
                let start = c * d;
                centroids.data[start..start + d].copy_from_slice(h.row(far));
            }
        }
    }
    Ok((centroids, trace))
}

/// K-means centroids for codebook seeding.
pub fn kmeans_init(h: &Mat, k: usize, iters: usize, seed: u64) -> Result<Mat> {
    kmeans_with_trace(h, k, iters, seed).map(|(c, _)| c)
}

/// Standard-normal codebook rows scaled by `sigma`, deterministic in `seed`.
pub fn gaussian_init(k: usize, d: usize, sigma: f64, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mat::zeros(k, d);
    for v in m.data.iter_mut() {
        *v = sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    m
}

/// `‖ĈĈᵀ - I‖²` over row-normalized entries. The flag reports zero-norm
/// rows, which normalize to zero and so count as orthogonal to everything.
pub fn ortho_penalty(tape: &Tape, entries: Tensor) -> Result<(Tensor, bool)> {
    let (k, _) = tape.shape(entries);
    let degenerate = {
        let vals = tape.to_mat(entries);
        (0..k).any(|r| vals.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12)
    };
    let normed = tape.row_l2_normalize(entries);
    let gram = tape.matmul(normed, tape.transpose(normed))?;
    let eye = Mat::identity(k);
    let diff = tape.sub(gram, tape.constant(&eye))?;
    Ok((tape.sum_all(tape.mul(diff, diff)?), degenerate))
}
