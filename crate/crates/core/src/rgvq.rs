//! Soft quantization with Gumbel noise, structure-aware contrastive sets,
//! InfoNCE regularization, the combined training loss, and deterministic
//! inference.
//!
//! Conventions fixed here: pair similarity for InfoNCE is the cosine of
//! assignment-distribution rows divided by a similarity temperature
//! (default 0.5); contrastive thresholds are quantiles of the sampled
//! feature-distance pool (defaults: 10th and 90th percentile); negatives
//! default to one shared list where each member satisfies the
//! non-edge/far-feature predicate against a randomly drawn probe anchor
//! (stored per negative so the audit can re-verify it) — a per-anchor mode
//! sits behind a flag; the regularizer averages per-anchor terms by default
//! with a sum mode behind a flag. Anchors with no qualifying positives or
//! negatives contribute zero and are reported in diagnostics.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GvqError, Result};
use crate::graph::Graph;
use crate::tensor::{Mat, Tape, Tensor};
use crate::vq::{Codebook, Similarity};

/// Row-stochastic soft assignment produced by [`gumbel_softmax`].
pub struct AssignmentDistribution {
    pub probs: Tensor,
    pub tau: f64,
    pub mode: GumbelMode,
}

/// Whether soft assignment draws Gumbel noise or uses the noise-free limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GumbelMode {
    /// One Gumbel perturbation per node per call.
    Sampled,
    /// `softmax(pi / tau)` exactly — deterministic debug/analysis mode.
    Expected,
}

impl AssignmentDistribution {
    /// Asserts the row-stochastic invariant: entries >= 0, rows sum to
    /// 1 within 1e-9.
    pub fn check_rows(&self, tape: &Tape) -> Result<()> {
        let p = tape.to_mat(self.probs);
        for i in 0..p.rows {
            let mut sum = 0.0;
            for &v in p.row(i) {
                if v < 0.0 {
                    return Err(GvqError::Numeric(format!("negative probability in row {i}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(GvqError::Numeric(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Assignment logits `pi = -‖h_i - e_j‖²`, on row-normalized vectors under
/// cosine mode. Differentiable w.r.t. both `h` and the codebook entries.
pub fn assignment_logits(tape: &Tape, h: Tensor, entries: Tensor, sim: Similarity) -> Result<Tensor> {
    let (hq, eq) = match sim {
        Similarity::Euclidean => (h, entries),
        Similarity::Cosine => (tape.row_l2_normalize(h), tape.row_l2_normalize(entries)),
    };
    Ok(tape.scale(tape.pairwise_sq_dist(hq, eq)?, -1.0))
}

/// Gumbel-Softmax over assignment logits:
/// `p̃ = softmax((log_softmax(pi) + g) / tau)` with `g = -log(-log u)`,
/// `u` clamped to `[1e-10, 1 - 1e-10]`. Expected mode skips the noise.
pub fn gumbel_softmax(
    tape: &Tape,
    logits: Tensor,
    tau: f64,
    mode: GumbelMode,
    rng: &mut ChaCha8Rng,
) -> Result<AssignmentDistribution> {
    if !(tau > 0.0) {
        return Err(GvqError::Param(format!("temperature must be > 0, got {tau}")));
    }
    let log_probs = tape.log_softmax_rows(logits);
    let perturbed = match mode {
        GumbelMode::Expected => log_probs,
        GumbelMode::Sampled => {
            let (n, k) = tape.shape(logits);
            let mut noise = Mat::zeros(n, k);
            for v in noise.data.iter_mut() {
                let u: f64 = rng.gen_range(0.0..1.0);
                let u = u.clamp(1e-10, 1.0 - 1e-10);
                *v = -(-u.ln()).ln();
            }
            tape.add(log_probs, tape.constant(&noise))?
        }
    };
    let probs = tape.softmax_rows(perturbed, tau)?;
    Ok(AssignmentDistribution { probs, tau, mode })
}

/// Probability-weighted codes `z̃ = p̃ · C`; gradient reaches every codeword
/// in proportion to its assignment mass.
pub fn soft_quantize(tape: &Tape, dist: &AssignmentDistribution, entries: Tensor) -> Result<Tensor> {
    tape.matmul(dist.probs, entries)
}

/// How the negative list is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// One list shared by every anchor, validated against a random probe set.
    #[default]
    Shared,
    /// A separate list per anchor, validated against the anchor itself.
    PerAnchor,
}

/// Contrastive set construction parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Positives and negatives per anchor.
    pub k_c: usize,
    /// Quantile of the sampled distance pool defining the "near" threshold.
    pub eps_quantile: f64,
    /// Quantile defining the "far" threshold; must exceed `eps_quantile`.
    pub gamma_quantile: f64,
    /// Non-neighbor candidates sampled per node.
    pub m: usize,
    pub negative_mode: NegativeMode,
    /// Probe anchors the shared negative list is validated against.
    pub probe_count: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            k_c: 20,
            eps_quantile: 0.1,
            gamma_quantile: 0.9,
            m: 100,
            negative_mode: NegativeMode::Shared,
            probe_count: 10,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_c < 1 {
            return Err(GvqError::Param("k_c must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eps_quantile) || !(0.0..=1.0).contains(&self.gamma_quantile) {
            return Err(GvqError::Param("quantiles must lie in [0, 1]".into()));
        }
        if self.gamma_quantile <= self.eps_quantile {
            return Err(GvqError::Param(format!(
                "gamma_quantile ({}) must exceed eps_quantile ({})",
                self.gamma_quantile, self.eps_quantile
            )));
        }
        if self.m < self.k_c {
            return Err(GvqError::Param(format!("M ({}) must be >= k_c ({})", self.m, self.k_c)));
        }
        if self.probe_count < 1 {
            return Err(GvqError::Param("probe_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Materialized positive/negative lists plus thresholds and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContrastiveSets {
    pub positives: Vec<Vec<u32>>,
    /// Shared-mode list (empty under per-anchor mode).
    pub negatives: Vec<u32>,
    /// Probe anchor that witnessed each shared negative's predicate.
    pub negative_probe_for: Vec<u32>,
    /// Per-anchor lists when [`NegativeMode::PerAnchor`] was requested.
    pub per_anchor_negatives: Option<Vec<Vec<u32>>>,
    pub probe_nodes: Vec<u32>,
    pub eps: f64,
    pub gamma: f64,
    /// Nodes whose positive list came up shorter than k_c.
    pub short_positive_nodes: usize,
    /// Negative sampling could not fill k_c entries.
    pub degenerate_negatives: bool,
    /// The eps/gamma pair failed the `gamma > eps > 0` invariant
    /// (degenerate feature geometry); predicates still apply as stated.
    pub thresholds_degenerate: bool,
}

impl ContrastiveSets {
    /// Negative list seen by anchor `u`.
    pub fn negatives_for(&self, u: usize) -> &[u32] {
        match &self.per_anchor_negatives {
            Some(lists) => &lists[u],
            None => &self.negatives,
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Linear-interpolation quantile of an unsorted sample.
fn quantile(values: &mut [f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] * (1.0 - frac) + values[hi] * frac
}

/// Build positive/negative contrastive sets for every node.
///
/// Candidates per node are its neighbors plus up to `M` sampled
/// non-neighbors (all of them when fewer than `M` exist). The thresholds
/// are quantiles of the pooled candidate distances. Positives rank
/// neighbors first, then semantic matches, each by ascending feature
/// distance, keeping those with `a_uv = 1` or `‖x_u - x_v‖ < eps`.
/// Negatives satisfy `a_uv = 0` and `‖x_u - x_v‖ > gamma` against a
/// randomly drawn probe anchor recorded per negative (shared mode) or
/// against the anchor itself (per-anchor mode). Deterministic in `seed`
/// via per-node substreams.
pub fn build_contrastive_sets(g: &Graph, cfg: &ContrastiveConfig, seed: u64) -> Result<ContrastiveSets> {
    cfg.validate()?;
    let n = g.n;
    if n < 2 {
        return Err(GvqError::Contract("contrastive sets need at least two nodes".into()));
    }

    // Phase 1: per-node candidates (neighbors + sampled non-neighbors).
    let mut candidates: Vec<Vec<u32>> = Vec::with_capacity(n);
    let mut pool: Vec<f64> = Vec::new();
    for u in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + u as u64);
        let nbrs = &g.adj[u];
        let non_neighbor_count = n - 1 - nbrs.len();
        let mut cand: Vec<u32> = nbrs.clone();
        if non_neighbor_count <= cfg.m {
            // Few enough to enumerate exactly.
            for v in 0..n as u32 {
                if v as usize != u && !g.has_edge(u.min(v as usize) as u32, u.max(v as usize) as u32) {
                    cand.push(v);
                }
            }
        } else {
            let mut picked: Vec<u32> = Vec::with_capacity(cfg.m);
            let mut attempts = 0usize;
            while picked.len() < cfg.m {
                attempts += 1;
                if attempts > 1000 * cfg.m {
                    break; // extremely dense graphs: accept fewer samples
                }
                let v = rng.gen_range(0..n as u32);
                if v as usize == u
                    || g.has_edge(u.min(v as usize) as u32, u.max(v as usize) as u32)
                    || picked.contains(&v)
                {
                    continue;
                }
                picked.push(v);
            }
            cand.extend_from_slice(&picked);
        }
        for &v in &cand {
            pool.push(euclid(g.features.row(u), g.features.row(v as usize)));
        }
        candidates.push(cand);
    }
    if pool.is_empty() {
        return Err(GvqError::Contract("no candidate pairs to pool distances from".into()));
    }

    // Phase 2: thresholds from the pooled distances.
    let eps = quantile(&mut pool, cfg.eps_quantile);
    let gamma = quantile(&mut pool, cfg.gamma_quantile);
    let thresholds_degenerate = !(gamma > eps && eps > 0.0);

    // Phase 3: positives — neighbors first, then semantic matches, each by
    // ascending feature distance, filtered by the defining disjunction.
    let mut positives: Vec<Vec<u32>> = Vec::with_capacity(n);
    let mut short_positive_nodes = 0usize;
    for u in 0..n {
        let mut scored: Vec<(bool, f64, u32)> = candidates[u]
            .iter()
            .map(|&v| {
                let d = euclid(g.features.row(u), g.features.row(v as usize));
                let is_nbr = g.adj[u].binary_search(&v).is_ok();
                (is_nbr, d, v)
            })
            .filter(|&(is_nbr, d, _)| is_nbr || d < eps)
            .collect();
        scored.sort_by(|a, b| {
            b.0.cmp(&a.0) // neighbors (true) first
                .then(a.1.partial_cmp(&b.1).expect("finite distances"))
                .then(a.2.cmp(&b.2))
        });
        scored.truncate(cfg.k_c);
        if scored.len() < cfg.k_c {
            short_positive_nodes += 1;
        }
        positives.push(scored.into_iter().map(|(_, _, v)| v).collect());
    }

    // Phase 4: negatives.
    let mut global = ChaCha8Rng::seed_from_u64(seed);
    global.set_stream(0);
    let mut probe_nodes: Vec<u32> = Vec::new();
    let far_from = |p: u32, w: u32| -> bool {
        p != w
            && !g.has_edge(p.min(w), p.max(w))
            && euclid(g.features.row(p as usize), g.features.row(w as usize)) > gamma
    };
    let mut degenerate_negatives = false;
    let mut negative_probe_for: Vec<u32> = Vec::new();
    let (negatives, per_anchor_negatives) = match cfg.negative_mode {
        NegativeMode::Shared => {
            while probe_nodes.len() < cfg.probe_count.min(n) {
                let p = global.gen_range(0..n as u32);
                if !probe_nodes.contains(&p) {
                    probe_nodes.push(p);
                }
            }
            let mut list: Vec<u32> = Vec::with_capacity(cfg.k_c);
            let mut attempts = 0usize;
            while list.len() < cfg.k_c {
                attempts += 1;
                if attempts > 1000 * cfg.k_c {
                    degenerate_negatives = true;
                    break;
                }
                let w = global.gen_range(0..n as u32);
                let p = probe_nodes[global.gen_range(0..probe_nodes.len())];
                if list.contains(&w) {
                    continue;
                }
                if far_from(p, w) {
                    list.push(w);
                    negative_probe_for.push(p);
                }
            }
            (list, None)
        }
        NegativeMode::PerAnchor => {
            let mut lists: Vec<Vec<u32>> = Vec::with_capacity(n);
            for u in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1_000_000 + u as u64);
                let mut list: Vec<u32> = Vec::with_capacity(cfg.k_c);
                let mut attempts = 0usize;
                while list.len() < cfg.k_c {
                    attempts += 1;
                    if attempts > 1000 * cfg.k_c {
                        degenerate_negatives = true;
                        break;
                    }
                    let w = rng.gen_range(0..n as u32);
                    if w as usize == u || list.contains(&w) {
                        continue;
                    }
                    if far_from(u as u32, w) {
                        list.push(w);
                    }
                }
                lists.push(list);
            }
            (Vec::new(), Some(lists))
        }
    };

    Ok(ContrastiveSets {
        positives,
        negatives,
        negative_probe_for,
        per_anchor_negatives,
        probe_nodes,
        eps,
        gamma,
        short_positive_nodes,
        degenerate_negatives,
        thresholds_degenerate,
    })
}

/// Brute-force predicate audit over every emitted pair.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AuditReport {
    pub positives_checked: usize,
    pub positive_violations: usize,
    pub negatives_checked: usize,
    pub negative_violations: usize,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.positive_violations == 0 && self.negative_violations == 0
    }
}

/// Re-checks every emitted positive against `a_uv = 1 OR d < eps` and every
/// negative against `a_uv = 0 AND d > gamma` (vs probes in shared mode, vs
/// the anchor in per-anchor mode). Intended for n <= 200.
pub fn audit_contrastive_sets(g: &Graph, sets: &ContrastiveSets) -> Result<AuditReport> {
    if sets.positives.len() != g.n {
        return Err(GvqError::Contract("sets were built for a different graph".into()));
    }
    let mut report = AuditReport::default();
    for (u, pos) in sets.positives.iter().enumerate() {
        for &v in pos {
            report.positives_checked += 1;
            let d = euclid(g.features.row(u), g.features.row(v as usize));
            let edge = g.has_edge(u.min(v as usize) as u32, u.max(v as usize) as u32);
            if !(edge || d < sets.eps) {
                report.positive_violations += 1;
            }
        }
    }
    match &sets.per_anchor_negatives {
        Some(lists) => {
            for (u, list) in lists.iter().enumerate() {
                for &w in list {
                    report.negatives_checked += 1;
                    let d = euclid(g.features.row(u), g.features.row(w as usize));
                    let edge = g.has_edge(u.min(w as usize) as u32, u.max(w as usize) as u32);
                    if edge || d <= sets.gamma || w as usize == u {
                        report.negative_violations += 1;
                    }
                }
            }
        }
        None => {
            if sets.negatives.len() != sets.negative_probe_for.len() {
                return Err(GvqError::Contract("negatives and witness probes out of sync".into()));
            }
            for (&w, &p) in sets.negatives.iter().zip(&sets.negative_probe_for) {
                report.negatives_checked += 1;
                let d = euclid(g.features.row(p as usize), g.features.row(w as usize));
                let edge = p != w && g.has_edge(p.min(w), p.max(w));
                if p == w || edge || d <= sets.gamma {
                    report.negative_violations += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Reduction over per-anchor InfoNCE terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Anchors that contributed vs. were skipped for lack of pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct InfoNceDiag {
    pub contributing: usize,
    pub degenerate: usize,
}

/// InfoNCE over assignment-distribution rows:
/// `L_i = -log[ sum_{j in P_i} exp(sim_ij) / sum_{j in P_i ∪ N_i} exp(sim_ij) ]`
/// with `sim_ij = cos(p̃_i, p̃_j) / sim_temp`, reduced over contributing
/// anchors. Anchors with empty positive or negative lists contribute zero.
pub fn infonce_reg(
    tape: &Tape,
    probs: Tensor,
    sets: &ContrastiveSets,
    sim_temp: f64,
    reduction: Reduction,
) -> Result<(Tensor, InfoNceDiag)> {
    if !(sim_temp > 0.0) {
        return Err(GvqError::Param(format!("sim_temp must be > 0, got {sim_temp}")));
    }
    let (n, _) = tape.shape(probs);
    if sets.positives.len() != n {
        return Err(GvqError::Contract(format!(
            "sets cover {} nodes, probs has {n} rows",
            sets.positives.len()
        )));
    }

    let mut pairs: Vec<(u32, u32)> = Vec::new();
    let mut pos_segments: Vec<(u32, u32)> = Vec::new();
    let mut all_segments: Vec<(u32, u32)> = Vec::new();
    let mut diag = InfoNceDiag::default();
    for u in 0..n {
        let pos = &sets.positives[u];
        let neg = sets.negatives_for(u);
        if pos.is_empty() || neg.is_empty() {
            diag.degenerate += 1;
            continue;
        }
        let start = pairs.len() as u32;
        for &j in pos {
            pairs.push((u as u32, j));
        }
        let mid = pairs.len() as u32;
        for &j in neg {
            pairs.push((u as u32, j));
        }
        let end = pairs.len() as u32;
        pos_segments.push((start, mid));
        all_segments.push((start, end));
        diag.contributing += 1;
    }
    if diag.contributing == 0 {
        return Ok((tape.constant(&Mat::zeros(1, 1)), diag));
    }

    let normed = tape.row_l2_normalize(probs);
    let sims = tape.scale(tape.pair_dots(normed, &Rc::new(pairs))?, 1.0 / sim_temp);
    let lse_pos = tape.seg_lse(sims, &Rc::new(pos_segments))?;
    let lse_all = tape.seg_lse(sims, &Rc::new(all_segments))?;
    let per_anchor = tape.sub(lse_all, lse_pos)?;
    let loss = match reduction {
        Reduction::Mean => tape.mean_all(per_anchor),
        Reduction::Sum => tape.sum_all(per_anchor),
    };
    Ok((loss, diag))
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub link: f64,
    pub feature: f64,
    pub reg: f64,
    pub commit: f64,
    pub vocab: f64,
    pub ortho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { link: 0.01, feature: 100.0, reg: 1.0, commit: 0.1, vocab: 0.9, ortho: 0.1 }
    }
}

/// Scalar parts of the combined objective. `reg` and `ortho` are optional
/// (vanilla runs have no regularizer; ortho can be disabled).
pub struct LossParts {
    pub link: Tensor,
    pub feature: Tensor,
    pub reg: Option<Tensor>,
    pub commit: Tensor,
    pub vocab: Tensor,
    pub ortho: Option<Tensor>,
}

/// Weighted sum of the parts. Every provided part must be a finite scalar.
pub fn rgvq_total_loss(tape: &Tape, parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    let mut named: Vec<(&str, Tensor, f64)> = vec![
        ("link", parts.link, w.link),
        ("feature", parts.feature, w.feature),
        ("commit", parts.commit, w.commit),
        ("vocab", parts.vocab, w.vocab),
    ];
    if let Some(reg) = parts.reg {
        named.push(("reg", reg, w.reg));
    }
    if let Some(ortho) = parts.ortho {
        named.push(("ortho", ortho, w.ortho));
    }
    let mut total: Option<Tensor> = None;
    for (name, part, weight) in named {
        let v = tape.scalar(part)?;
        if !v.is_finite() {
            return Err(GvqError::Numeric(format!("{name} loss is not finite: {v}")));
        }
        let scaled = tape.scale(part, weight);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    Ok(total.expect("at least four mandatory parts"))
}

/// Deterministic inference: per-row argmax of the assignment logits,
/// computed without noise. Ties break to the lowest index, so this matches
/// [`nearest_assign`](crate::vq::nearest_assign) exactly.
pub fn infer_hard_assign(h: &Mat, cb: &Codebook) -> Result<Vec<usize>> {
    if cb.k() == 0 {
        return Err(GvqError::Contract("empty codebook".into()));
    }
    let tape = Tape::new();
    let logits = assignment_logits(
        &tape,
        tape.leaf(h, false),
        tape.leaf(&cb.entries, false),
        cb.similarity,
    )?;
    let lv = tape.to_mat(logits);
    let mut out = Vec::with_capacity(h.rows);
    for i in 0..h.rows {
        let row = lv.row(i);
        let mut best = (0usize, f64::NEG_INFINITY);
        for (k, &v) in row.iter().enumerate() {
            if v > best.1 {
                best = (k, v);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

/// Mean Shannon entropy (nats) of the rows of a stochastic matrix.
pub fn mean_row_entropy(probs: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..probs.rows {
        for &p in probs.row(i) {
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / probs.rows as f64
}
