//! Graph representation, file ingestion, synthetic generation, and the two
//! dataset statistics the experiments correlate with codebook health.
//!
//! Graphs are undirected, deduplicated, and stored as sorted neighbor
//! lists without self-loops. The stochastic block model generator exposes a
//! `redundancy` knob that interpolates node features between a shared block
//! centroid and per-node noise, which directly steers how many principal
//! components the feature matrix needs.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GvqError, Result};
use crate::tensor::Mat;

/// Undirected attributed graph.
#[derive(Debug, Clone)]
pub struct Graph {
    pub n: usize,
    /// Node features, n x f.
    pub features: Mat,
    /// Sorted, deduplicated neighbor lists; symmetric; no self-loops.
    pub adj: Rc<Vec<Vec<u32>>>,
    pub labels: Option<Vec<i64>>,
}

impl Graph {
    pub fn new(features: Mat, adj: Vec<Vec<u32>>, labels: Option<Vec<i64>>) -> Self {
        let n = features.rows;
        debug_assert_eq!(adj.len(), n);
        Graph { n, features, adj: Rc::new(adj), labels }
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|l| l.len()).sum::<usize>() / 2
    }

    /// All undirected edges as (u, v) with u < v.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (u, nbrs) in self.adj.iter().enumerate() {
            for &v in nbrs {
                if (u as u32) < v {
                    out.push((u as u32, v));
                }
            }
        }
        out
    }

    pub fn has_edge(&self, u: u32, v: u32) -> bool {
        self.adj[u as usize].binary_search(&v).is_ok()
    }

    /// Mean degree 2|E|/n.
    pub fn avg_degree(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        2.0 * self.edge_count() as f64 / self.n as f64
    }
}

/// Parameters of the stochastic block model generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SbmSpec {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Fraction of feature variance shared within a block, in [0, 1].
    pub redundancy: f64,
    pub seed: u64,
    /// L2-normalize feature rows after generation (matches the loader default).
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl SbmSpec {
    fn validate(&self) -> Result<()> {
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out), ("redundancy", self.redundancy)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GvqError::Param(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.blocks == 0 || self.nodes_per_block == 0 || self.feature_dim == 0 {
            return Err(GvqError::Param("blocks, nodes_per_block, feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Normalize each feature row to unit L2 norm; zero rows stay zero.
pub fn l2_normalize_rows(m: &mut Mat) {
    for i in 0..m.rows {
        let row = &mut m.data[i * m.cols..(i + 1) * m.cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn build_adj(n: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Vec<Vec<u32>> {
    let mut adj = vec![Vec::new(); n];
    for (u, v) in edges {
        if u == v {
            continue;
        }
        adj[u as usize].push(v);
        adj[v as usize].push(u);
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Load a graph from an edge-list file ("u v" per line, `#` comments), a
/// header-less CSV feature file, and an optional label file (one integer
/// per line). Duplicate and reversed edges collapse to one undirected edge.
/// Features are L2-row-normalized unless `normalize` is false.
pub fn load_graph(
    edge_path: &Path,
    features_path: &Path,
    labels_path: Option<&Path>,
    normalize: bool,
) -> Result<Graph> {
    let feat_text = fs::read_to_string(features_path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in feat_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|tok| tok.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| GvqError::Format {
            line: lineno + 1,
            msg: format!("bad feature value: {e}"),
        })?;
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(GvqError::Format {
                    line: lineno + 1,
                    msg: format!("ragged CSV: expected {w} columns, got {}", vals.len()),
                })
            }
            _ => {}
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(GvqError::Format { line: 0, msg: "empty feature file".into() });
    }
    let n = rows.len();
    let mut features = Mat::from_rows(&rows);
    if normalize {
        l2_normalize_rows(&mut features);
    }

    let edge_text = fs::read_to_string(edge_path)?;
    let mut edges = Vec::new();
    for (lineno, line) in edge_text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>, lineno: usize| -> Result<u32> {
            tok.ok_or(GvqError::Format { line: lineno + 1, msg: "expected 'u v'".into() })?
                .parse::<u32>()
                .map_err(|e| GvqError::Format { line: lineno + 1, msg: format!("bad node id: {e}") })
        };
        let u = parse(it.next(), lineno)?;
        let v = parse(it.next(), lineno)?;
        for id in [u, v] {
            if id as usize >= n {
                return Err(GvqError::Format {
                    line: lineno + 1,
                    msg: format!("node id {id} out of range for {n} feature rows"),
                });
            }
        }
        edges.push((u, v));
    }

    let labels = match labels_path {
        None => None,
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let mut out = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                out.push(line.parse::<i64>().map_err(|e| GvqError::Format {
                    line: lineno + 1,
                    msg: format!("bad label: {e}"),
                })?);
            }
            if out.len() != n {
                return Err(GvqError::Format {
                    line: 0,
                    msg: format!("label count {} != node count {n}", out.len()),
                });
            }
            Some(out)
        }
    };

    Ok(Graph::new(features, build_adj(n, edges), labels))
}

/// Generate a stochastic block model graph. Features are
/// `redundancy * centroid(block) + (1 - redundancy) * noise(node)` with
/// standard-normal centroids and noise; block id doubles as the node label.
/// Bit-deterministic under `spec.seed`.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.blocks * spec.nodes_per_block;
    let f = spec.feature_dim;

    let mut centroids = Vec::with_capacity(spec.blocks);
    for _ in 0..spec.blocks {
        let c: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
        centroids.push(c);
    }

    let mut features = Mat::zeros(n, f);
    let mut labels = Vec::with_capacity(n);
    for v in 0..n {
        let b = v / spec.nodes_per_block;
        labels.push(b as i64);
        for j in 0..f {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.set(v, j, spec.redundancy * centroids[b][j] + (1.0 - spec.redundancy) * noise);
        }
    }
    if spec.normalize {
        l2_normalize_rows(&mut features);
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let same = u / spec.nodes_per_block == v / spec.nodes_per_block;
            let p = if same { spec.p_in } else { spec.p_out };
            if rng.gen_range(0.0..1.0) < p {
                edges.push((u as u32, v as u32));
            }
        }
    }

    Ok(Graph::new(features, build_adj(n, edges), Some(labels)))
}

/// Result of [`pca95`]: the component count and a degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pca95 {
    /// Smallest k whose top-k eigenvalues cover >= 95% of total variance;
    /// 0 when the features have no variance at all.
    pub components: usize,
    /// Set when total variance is (numerically) zero.
    pub zero_variance: bool,
}

/// Number of principal components needed to retain 95% of feature variance,
/// computed by full Jacobi eigendecomposition of the covariance matrix.
pub fn pca95(features: &Mat) -> Result<Pca95> {
    if features.rows < 2 {
        return Err(GvqError::Contract(format!(
            "pca95 needs at least 2 rows, got {}",
            features.rows
        )));
    }
    let (n, f) = features.shape();
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for j in 0..f {
            mean[j] += features.get(i, j);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Mat::zeros(f, f);
    for i in 0..n {
        for a in 0..f {
            let da = features.get(i, a) - mean[a];
            for b in a..f {
                let db = features.get(i, b) - mean[b];
                cov.data[a * f + b] += da * db;
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..f {
        for b in a..f {
            let v = cov.data[a * f + b] / denom;
            cov.data[a * f + b] = v;
            cov.data[b * f + a] = v;
        }
    }

    let mut eigvals = jacobi_eigenvalues(&mut cov);
    eigvals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = eigvals.iter().map(|&v| v.max(0.0)).sum();
    if total <= 1e-12 {
        return Ok(Pca95 { components: 0, zero_variance: true });
    }
    let mut acc = 0.0;
    for (k, &v) in eigvals.iter().enumerate() {
        acc += v.max(0.0);
        if acc >= 0.95 * total {
            return Ok(Pca95 { components: k + 1, zero_variance: false });
        }
    }
    Ok(Pca95 { components: eigvals.len(), zero_variance: false })
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method. The input
/// is consumed as workspace.
fn jacobi_eigenvalues(a: &mut Mat) -> Vec<f64> {
    let n = a.rows;
    debug_assert_eq!(n, a.cols);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

/// Mean degree 2|E|/n.
pub fn avg_degree(g: &Graph) -> f64 {
    g.avg_degree()
}

/// Spearman rank correlation; `None` when fewer than 2 points or either
/// ranking is constant. Ties receive average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
