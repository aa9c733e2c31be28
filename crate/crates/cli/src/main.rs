//! `gvq` — command-line harness for the graph vector-quantization laboratory.
//!
//! Subcommands:
//!
//! - `train`      one training run; emits per-epoch metrics and a summary
//! - `sweep`      repeats a run along one axis (codebook size, temperature,
//!                contrastive k) and emits a CSV table
//! - `stats`      dataset statistics: node/edge counts, average degree, and
//!                principal components at 95% variance
//! - `build-sets` builds the contrastive positive/negative sets and audits
//!                every emitted pair against its defining predicate
//! - `dynamics`   closed-form codebook-update checks and the co-assignment
//!                geometry report
//! - `gradcheck`  finite-difference gradient suites, per-op and end-to-end
//!
//! Exit codes: 0 success; 1 a check ran and failed; 2 configuration or
//! parameter problems; 3 numeric or contract violations; 4 data-format or
//! I/O problems.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gvq_core::config::{desk_preset, CodebookInit, DatasetSource, Method, TrainConfig};
use gvq_core::dynamics::{analytic_update_step, coassign_check, cocoon_sim, kronecker_selector};
use gvq_core::encoder::init_encoder;
use gvq_core::graph::{pca95, SbmSpec};
use gvq_core::metrics::write_jsonl;
use gvq_core::mitigation::MitigationKind;
use gvq_core::rgvq::{
    assignment_logits, audit_contrastive_sets, build_contrastive_sets, gumbel_softmax,
    infonce_reg, rgvq_total_loss, soft_quantize, GumbelMode, LossParts, NegativeMode, Reduction,
};
use gvq_core::tensor::{finite_diff_check, Activation, AggKind, Mat, Tape, Tensor};
use gvq_core::train::{axis_csv, axis_sweep, train, SweepAxis};
use gvq_core::vq::{
    feature_recon, kmeans_init, link_recon, nearest_assign, ortho_penalty, ste_quantize,
    vq_aux_losses, Codebook, LinkMode, Similarity,
};
use gvq_core::{GvqError, Result};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "gvq", version, about = "Graph vector-quantization laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training configuration and report the perplexity summary.
    Train(TrainArgs),
    /// Train once per value along one axis and emit a CSV table.
    Sweep(SweepArgs),
    /// Print dataset statistics (nodes, edges, average degree, PCA@95%).
    Stats(StatsArgs),
    /// Build the contrastive sets and audit every pair's predicate.
    BuildSets(BuildSetsArgs),
    /// Verify codebook-update dynamics and report co-assignment geometry.
    Dynamics(DynamicsArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

// ---------------------------------------------------------------------------
// Shared configuration flags
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Vanilla,
    Rgvq,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Gaussian,
    Kmeans,
}

#[derive(Clone, Copy, ValueEnum)]
enum MitigationArg {
    None,
    Ema,
    Reset,
    Affine,
    Pretrain,
    Simvq,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Mean,
    Sum,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Elu,
    Sigmoid,
    Exp,
    Log,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum NegativeModeArg {
    Shared,
    PerAnchor,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkModeArg {
    Dense,
    Sampled,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    CodebookSize,
    Temperature,
    ContrastiveK,
}

/// Flags mirroring the run configuration. Defaults come from the desk
/// preset; a `--config` file overrides the preset, and individual flags
/// override the file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file applied over the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Quantization path.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Codebook size K.
    #[arg(long)]
    k: Option<usize>,
    /// Gumbel-Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Contrastive similarity temperature.
    #[arg(long)]
    sim_temp: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Assignment similarity.
    #[arg(long, value_enum)]
    similarity: Option<SimilarityArg>,

    /// Codebook initialization family.
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Standard deviation for Gaussian initialization.
    #[arg(long)]
    sigma: Option<f64>,
    /// Lloyd iterations for k-means initialization.
    #[arg(long)]
    kmeans_iters: Option<usize>,

    /// Mitigation arm.
    #[arg(long, value_enum)]
    mitigation: Option<MitigationArg>,
    /// EMA decay for the `ema` arm.
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Epochs a code may stay unused before the `reset` arm replaces it.
    #[arg(long)]
    dead_threshold: Option<usize>,
    /// Encoder pretraining epochs for the `pretrain` arm.
    #[arg(long)]
    pretrain_epochs: Option<usize>,

    /// Optimizer learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,

    // Dataset: generated block model ...
    /// Number of planted blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Nodes per block.
    #[arg(long)]
    nodes_per_block: Option<usize>,
    /// Within-block edge probability.
    #[arg(long)]
    p_in: Option<f64>,
    /// Cross-block edge probability.
    #[arg(long)]
    p_out: Option<f64>,
    /// Feature dimension.
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Feature redundancy in [0, 1]: the centroid share of each feature.
    #[arg(long)]
    redundancy: Option<f64>,
    /// Seed for graph generation (separate from the run seed).
    #[arg(long)]
    dataset_seed: Option<u64>,

    // ... or files on disk.
    /// Edge-list file (switches the dataset source to files).
    #[arg(long, requires = "features")]
    edges: Option<PathBuf>,
    /// Feature-matrix file.
    #[arg(long, requires = "edges")]
    features: Option<PathBuf>,
    /// Optional label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Skip row-normalizing features.
    #[arg(long)]
    no_normalize: bool,

    /// Encoder layer widths, input first, comma-separated (e.g. 16,64,64).
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Neighborhood aggregator.
    #[arg(long, value_enum)]
    agg: Option<AggArg>,
    /// Layer activation.
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,

    /// Loss weights.
    #[arg(long)]
    w_link: Option<f64>,
    #[arg(long)]
    w_feature: Option<f64>,
    #[arg(long)]
    w_reg: Option<f64>,
    #[arg(long)]
    w_commit: Option<f64>,
    #[arg(long)]
    w_vocab: Option<f64>,
    #[arg(long)]
    w_ortho: Option<f64>,

    /// Positives/negatives per anchor.
    #[arg(long)]
    k_c: Option<usize>,
    /// Near-threshold quantile for positives.
    #[arg(long)]
    eps_quantile: Option<f64>,
    /// Far-threshold quantile for negatives.
    #[arg(long)]
    gamma_quantile: Option<f64>,
    /// Non-neighbor candidates sampled per node.
    #[arg(long)]
    m_samples: Option<usize>,
    /// Negative-list mode.
    #[arg(long, value_enum)]
    negative_mode: Option<NegativeModeArg>,
    /// Probe anchors validating the shared negative list.
    #[arg(long)]
    probe_count: Option<usize>,

    /// Link-reconstruction pair source.
    #[arg(long, value_enum)]
    link_mode: Option<LinkModeArg>,
    /// Sampled negatives per positive edge (with --link-mode sampled).
    #[arg(long)]
    neg_per_pos: Option<usize>,

    /// Record every epoch but print progress only at this cadence.
    #[arg(long)]
    report_cadence: Option<usize>,
}

impl ConfigArgs {
    /// Desk preset, then the config file, then individual flags.
    fn resolve(&self, seed: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => desk_preset(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }

        if let Some(m) = self.method {
            cfg.method = match m {
                MethodArg::Vanilla => Method::Vanilla,
                MethodArg::Rgvq => Method::Rgvq,
            };
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(t) = self.sim_temp {
            cfg.sim_temp = t;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.similarity {
            cfg.similarity = match s {
                SimilarityArg::Euclidean => Similarity::Euclidean,
                SimilarityArg::Cosine => Similarity::Cosine,
            };
        }

        match self.init {
            Some(InitArg::Gaussian) => {
                cfg.codebook_init = CodebookInit::Gaussian { sigma: self.sigma.unwrap_or(1.0) };
            }
            Some(InitArg::Kmeans) => {
                cfg.codebook_init =
                    CodebookInit::Kmeans { iters: self.kmeans_iters.unwrap_or(25) };
            }
            None => {
                if let (Some(sigma), CodebookInit::Gaussian { .. }) =
                    (self.sigma, cfg.codebook_init)
                {
                    cfg.codebook_init = CodebookInit::Gaussian { sigma };
                }
                if let (Some(iters), CodebookInit::Kmeans { .. }) =
                    (self.kmeans_iters, cfg.codebook_init)
                {
                    cfg.codebook_init = CodebookInit::Kmeans { iters };
                }
            }
        }

        if let Some(m) = self.mitigation {
            cfg.mitigation.kind = match m {
                MitigationArg::None => MitigationKind::None,
                MitigationArg::Ema => MitigationKind::Ema,
                MitigationArg::Reset => MitigationKind::Reset,
                MitigationArg::Affine => MitigationKind::Affine,
                MitigationArg::Pretrain => MitigationKind::Pretrain,
                MitigationArg::Simvq => MitigationKind::Simvq,
            };
        }
        if let Some(d) = self.ema_decay {
            cfg.mitigation.ema_decay = d;
        }
        if let Some(t) = self.dead_threshold {
            cfg.mitigation.dead_threshold = t;
        }
        if let Some(e) = self.pretrain_epochs {
            cfg.mitigation.pretrain_epochs = e;
        }

        if let Some(lr) = self.lr {
            cfg.optimizer.lr = lr;
        }
        if let Some(wd) = self.weight_decay {
            cfg.optimizer.weight_decay = wd;
        }

        if let (Some(edges), Some(features)) = (&self.edges, &self.features) {
            cfg.dataset = DatasetSource::Files {
                edges: edges.clone(),
                features: features.clone(),
                labels: self.labels.clone(),
                normalize: !self.no_normalize,
            };
        } else {
            let sbm_flags = [
                self.blocks.is_some(),
                self.nodes_per_block.is_some(),
                self.p_in.is_some(),
                self.p_out.is_some(),
                self.feature_dim.is_some(),
                self.redundancy.is_some(),
                self.dataset_seed.is_some(),
            ];
            if sbm_flags.iter().any(|&f| f) {
                let spec = match &mut cfg.dataset {
                    DatasetSource::Sbm(spec) => spec,
                    DatasetSource::Files { .. } => {
                        return Err(GvqError::Config(
                            "block-model flags given but the configured dataset reads files; \
                             pass --edges/--features to override the files or drop the flags"
                                .into(),
                        ));
                    }
                };
                if let Some(b) = self.blocks {
                    spec.blocks = b;
                }
                if let Some(n) = self.nodes_per_block {
                    spec.nodes_per_block = n;
                }
                if let Some(p) = self.p_in {
                    spec.p_in = p;
                }
                if let Some(p) = self.p_out {
                    spec.p_out = p;
                }
                if let Some(f) = self.feature_dim {
                    spec.feature_dim = f;
                }
                if let Some(r) = self.redundancy {
                    spec.redundancy = r;
                }
                if let Some(s) = self.dataset_seed {
                    spec.seed = s;
                }
                if self.no_normalize {
                    spec.normalize = false;
                }
            }
        }

        if let Some(dims) = &self.dims {
            cfg.encoder.dims = dims.clone();
        } else if let (Some(f), DatasetSource::Sbm(_)) = (self.feature_dim, &cfg.dataset) {
            // The encoder input width follows the dataset feature dimension
            // unless --dims pins it explicitly.
            if let Some(first) = cfg.encoder.dims.first_mut() {
                *first = f;
            }
        }
        if let Some(a) = self.agg {
            cfg.encoder.agg = match a {
                AggArg::Mean => AggKind::Mean,
                AggArg::Sum => AggKind::Sum,
                AggArg::Max => AggKind::Max,
            };
        }
        if let Some(a) = self.activation {
            cfg.encoder.activation = match a {
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::Elu => Activation::Elu,
                ActivationArg::Sigmoid => Activation::Sigmoid,
                ActivationArg::Exp => Activation::Exp,
                ActivationArg::Log => Activation::Log,
                ActivationArg::Identity => Activation::Identity,
            };
        }

        if let Some(w) = self.w_link {
            cfg.weights.link = w;
        }
        if let Some(w) = self.w_feature {
            cfg.weights.feature = w;
        }
        if let Some(w) = self.w_reg {
            cfg.weights.reg = w;
        }
        if let Some(w) = self.w_commit {
            cfg.weights.commit = w;
        }
        if let Some(w) = self.w_vocab {
            cfg.weights.vocab = w;
        }
        if let Some(w) = self.w_ortho {
            cfg.weights.ortho = w;
        }

        if let Some(k) = self.k_c {
            cfg.contrastive.k_c = k;
        }
        if let Some(q) = self.eps_quantile {
            cfg.contrastive.eps_quantile = q;
        }
        if let Some(q) = self.gamma_quantile {
            cfg.contrastive.gamma_quantile = q;
        }
        if let Some(m) = self.m_samples {
            cfg.contrastive.m = m;
        }
        if let Some(n) = self.negative_mode {
            cfg.contrastive.negative_mode = match n {
                NegativeModeArg::Shared => NegativeMode::Shared,
                NegativeModeArg::PerAnchor => NegativeMode::PerAnchor,
            };
        }
        if let Some(p) = self.probe_count {
            cfg.contrastive.probe_count = p;
        }

        match self.link_mode {
            Some(LinkModeArg::Dense) => cfg.link_mode = LinkMode::Dense,
            Some(LinkModeArg::Sampled) => {
                cfg.link_mode = LinkMode::Sampled { neg_per_pos: self.neg_per_pos.unwrap_or(1) };
            }
            None => {
                if let (Some(npp), LinkMode::Sampled { .. }) = (self.neg_per_pos, cfg.link_mode) {
                    cfg.link_mode = LinkMode::Sampled { neg_per_pos: npp };
                }
            }
        }

        if let Some(c) = self.report_cadence {
            cfg.report_cadence = c;
        }

        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Run seed (required: every run is reproducible by construction).
    #[arg(long)]
    seed: u64,
    /// Directory for metrics.jsonl, summary.json, and the resolved
    /// config.toml. Without it only the summary is printed.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve(Some(args.seed))?;
    let out = train(&cfg)?;

    for r in &out.records {
        if cfg.report_cadence > 0
            && (r.epoch % cfg.report_cadence == 0 || r.epoch + 1 == out.records.len())
        {
            eprintln!(
                "epoch {:>4}  total {:>12.6}  perplexity {:>8.3}  active {:>4}",
                r.epoch, r.total, r.perplexity, r.active_codes
            );
        }
    }

    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("metrics.jsonl"), &out.records)?;
        fs::write(dir.join("summary.json"), out.summary.to_json()? + "\n")?;
        fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    }

    println!("{}", out.summary.to_json()?);
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SweepArgs {
    /// Run seed (shared by every cell).
    #[arg(long)]
    seed: u64,
    /// Axis to vary.
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.cfg.resolve(Some(args.seed))?;
    let axis = match args.axis {
        AxisArg::CodebookSize => SweepAxis::CodebookSize,
        AxisArg::Temperature => SweepAxis::Temperature,
        AxisArg::ContrastiveK => SweepAxis::ContrastiveK,
    };
    let rows = axis_sweep(&cfg, axis, &args.values)?;
    let csv = axis_csv(&rows);
    match &args.out {
        Some(path) => {
            fs::write(path, &csv)?;
            eprintln!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let cfg = args.cfg.resolve(None)?;
    let g = cfg.dataset.realize()?;
    let pca = pca95(&g.features)?;
    let out = serde_json::json!({
        "nodes": g.n,
        "edges": g.edge_count(),
        "avg_degree": g.avg_degree(),
        "pca95": pca.components,
        "zero_variance": pca.zero_variance,
    });
    println!("{out}");
    Ok(())
}

// ---------------------------------------------------------------------------
// build-sets
// ---------------------------------------------------------------------------

#[derive(Args)]
struct BuildSetsArgs {
    /// Seed for candidate sampling and probe selection.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn cmd_build_sets(args: &BuildSetsArgs) -> Result<()> {
    let cfg = args.cfg.resolve(Some(args.seed))?;
    let g = cfg.dataset.realize()?;
    let sets = build_contrastive_sets(&g, &cfg.contrastive, args.seed)?;
    let audit = audit_contrastive_sets(&g, &sets)?;
    let positives_total: usize = sets.positives.iter().map(Vec::len).sum();
    let negatives_total = match &sets.per_anchor_negatives {
        Some(lists) => lists.iter().map(Vec::len).sum(),
        None => sets.negatives.len(),
    };
    let out = serde_json::json!({
        "nodes": g.n,
        "k_c": cfg.contrastive.k_c,
        "eps": sets.eps,
        "gamma": sets.gamma,
        "positives_total": positives_total,
        "negatives_total": negatives_total,
        "short_positive_nodes": sets.short_positive_nodes,
        "degenerate_negatives": sets.degenerate_negatives,
        "thresholds_degenerate": sets.thresholds_degenerate,
        "audit": audit,
        "audit_clean": audit.clean(),
    });
    println!("{out}");
    if audit.clean() {
        Ok(())
    } else {
        Err(GvqError::Contract(format!(
            "{} positive and {} negative predicate violations",
            audit.positive_violations, audit.negative_violations
        )))
    }
}

// ---------------------------------------------------------------------------
// dynamics
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DynamicsArgs {
    /// Seed for the randomized instances.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Prints one check line and folds the verdict into `all_ok`.
fn check_line(all_ok: &mut bool, name: &str, ok: bool, detail: String) {
    *all_ok &= ok;
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn cmd_dynamics(args: &DynamicsArgs) -> Result<ExitCode> {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    // Selector algebra: a single diagonal 1, and the uniform mean I/K.
    {
        let big_k = 6;
        let mut selector_ok = true;
        let mut mean = Mat::zeros(big_k, big_k);
        for k in 0..big_k {
            let s = kronecker_selector(k, big_k)?;
            let mut expected = Mat::zeros(big_k, big_k);
            expected.set(k, k, 1.0);
            selector_ok &= s.data == expected.data;
            for (m, v) in mean.data.iter_mut().zip(&s.data) {
                *m += v / big_k as f64;
            }
        }
        let uniform_is_scaled_identity = (0..big_k).all(|i| {
            (0..big_k).all(|j| {
                let want = if i == j { 1.0 / big_k as f64 } else { 0.0 };
                (mean.get(i, j) - want).abs() < 1e-15
            })
        });
        check_line(
            &mut ok,
            "selector",
            selector_ok && uniform_is_scaled_identity,
            format!("K={big_k}, one-hot diagonals, uniform mean = I/K"),
        );
    }

    // Closed-form update vs an autodiff gradient step at rate eta/2.
    {
        let mut max_diff = 0.0f64;
        for _ in 0..20 {
            let k = rng.gen_range(2..8);
            let d = rng.gen_range(2..6);
            let n = rng.gen_range(1..20);
            let entries = rand_mat(k, d, &mut rng);
            let h_val = rand_mat(n, d, &mut rng);
            let assignments: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let eta = rng.gen_range(0.05..0.9);
            let cb = Codebook::new(entries.clone(), Similarity::Euclidean, 0.0)?;
            let analytic = analytic_update_step(&cb, &h_val, &assignments, eta)?;

            let tape = Tape::new();
            let e = tape.leaf(&entries, true);
            let h = tape.leaf(&h_val, false);
            let (q, _z) = ste_quantize(&tape, h, e, &assignments)?;
            let (vocab_raw, _commit) = vq_aux_losses(&tape, h, q, 1.0)?;
            let loss = tape.scale(vocab_raw, 1.0 / n as f64);
            tape.backward(loss)?;
            let grad = tape.grad(e);
            for idx in 0..entries.data.len() {
                let stepped = entries.data[idx] - (eta / 2.0) * grad.data[idx];
                max_diff = max_diff.max((analytic.entries.data[idx] - stepped).abs());
            }
        }
        check_line(
            &mut ok,
            "closed-form update",
            max_diff <= 1e-10,
            format!("20 random instances, max |analytic - autodiff| = {max_diff:.3e}"),
        );
    }

    // Biased-selection simulation: uniform bias keeps usage near capacity,
    // a dominant code starves the rest.
    {
        let k = 8;
        let uniform = vec![1.0 / k as f64; k];
        let traj_u = cocoon_sim(k, &uniform, 150, 0.1, args.seed)?;
        check_line(
            &mut ok,
            "uniform bias",
            traj_u.final_perplexity >= 0.9 * k as f64,
            format!("final perplexity {:.3} of K = {k}", traj_u.final_perplexity),
        );

        let mut bias = vec![0.05 / (k as f64 - 1.0) * (k as f64 - 1.0); k];
        let rest = 0.4 / (k as f64 - 1.0);
        bias.iter_mut().for_each(|b| *b = rest);
        bias[0] = 0.6;
        let traj_b = cocoon_sim(k, &bias, 150, 0.1, args.seed)?;
        check_line(
            &mut ok,
            "dominant bias",
            traj_b.final_perplexity < traj_u.final_perplexity
                && traj_b.entropy.last() < traj_b.entropy.first(),
            format!(
                "final perplexity {:.3} < uniform {:.3}, entropy {:.3} -> {:.3}",
                traj_b.final_perplexity,
                traj_u.final_perplexity,
                traj_b.entropy.first().unwrap_or(&0.0),
                traj_b.entropy.last().unwrap_or(&0.0)
            ),
        );
    }

    // Co-assignment geometry on the configured instance (reported, not
    // gated: the safety-radius implication is a property under scrutiny,
    // and the numbers are the point).
    {
        let cfg = args.cfg.resolve(Some(args.seed))?;
        let g = cfg.dataset.realize()?;
        let enc = init_encoder(&cfg.encoder.to_gnn_config(), args.seed)?;
        let tape = Tape::new();
        let x = tape.leaf(&g.features, false);
        let h = enc.lift(&tape).encode(&tape, x, &g.adj)?;
        let h_val = tape.to_mat(h);
        let entries = kmeans_init(&h_val, cfg.k, 25, args.seed)?;
        let cb = Codebook::new(entries, Similarity::Euclidean, 0.0)?;
        let report = coassign_check(&g, &enc, &cb)?;
        println!(
            "INFO co-assignment: delta_c {:.6}, {} close pairs of {}, {} violations, \
             rate {:.4}, bound {:.4} ({})",
            report.scan.delta_c,
            report.scan.close_pairs,
            report.scan.total_pairs,
            report.scan.violations,
            report.scan.coassign_rate,
            report.global_bound,
            match report.bound_satisfied {
                Some(true) => "satisfied",
                Some(false) => "violated",
                None => "vacuous",
            }
        );
    }

    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the probe matrices.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Per-op relative-error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// End-to-end composite tolerance.
    #[arg(long, default_value_t = 1e-3)]
    composite_tol: f64,
}

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Mat::new(rows, cols, data)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let a = rand_mat(4, 5, &mut rng);
    let b = rand_mat(5, 3, &mut rng);
    let c = rand_mat(4, 5, &mut rng);
    let row = rand_mat(1, 5, &mut rng);
    let mut positive = rand_mat(4, 5, &mut rng);
    positive.data.iter_mut().for_each(|v| *v = v.abs() + 0.5);
    // Keep ReLU probes away from the kink, where central differences lie.
    let mut off_kink = rand_mat(4, 5, &mut rng);
    off_kink.data.iter_mut().for_each(|v| {
        if v.abs() < 0.1 {
            *v += 0.3;
        }
    });

    let mut run = |name: &str, x: &Mat, f: &dyn Fn(&Tape, Tensor) -> Result<Tensor>| {
        match finite_diff_check(f, x, 1e-5) {
            Ok(err) => check_line(&mut ok, name, err <= args.tol, format!("max rel err {err:.3e}")),
            Err(e) => check_line(&mut ok, name, false, format!("errored: {e}")),
        }
    };

    let bc = b.clone();
    run("matmul", &a, &|t, x| {
        let bt = t.constant(&bc);
        Ok(t.sum_all(t.matmul(x, bt)?))
    });
    let cc = c.clone();
    run("add", &a, &|t, x| {
        let ct = t.constant(&cc);
        Ok(t.sum_all(t.add(x, ct)?))
    });
    let cc = c.clone();
    run("sub", &a, &|t, x| {
        let ct = t.constant(&cc);
        Ok(t.sum_all(t.sub(x, ct)?))
    });
    let cc = c.clone();
    run("mul", &a, &|t, x| {
        let ct = t.constant(&cc);
        Ok(t.sum_all(t.mul(x, ct)?))
    });
    run("scale", &a, &|t, x| Ok(t.sum_all(t.scale(x, -1.7))));
    run("add_scalar", &a, &|t, x| Ok(t.sum_all(t.add_scalar(x, 0.9))));
    let rc = row.clone();
    run("add_rowvec", &a, &|t, x| {
        let r = t.constant(&rc);
        Ok(t.sum_all(t.add_rowvec(x, r)?))
    });
    let rc = row.clone();
    run("mul_rowvec", &a, &|t, x| {
        let r = t.constant(&rc);
        Ok(t.sum_all(t.mul_rowvec(x, r)?))
    });
    for (name, act, probe) in [
        ("relu", Activation::Relu, &off_kink),
        ("elu", Activation::Elu, &a),
        ("sigmoid", Activation::Sigmoid, &a),
        ("exp", Activation::Exp, &a),
        ("log", Activation::Log, &positive),
        ("identity", Activation::Identity, &a),
    ] {
        run(name, probe, &move |t, x| Ok(t.sum_all(t.activation(x, act)?)));
    }
    run("softmax_rows", &a, &|t, x| {
        let s = t.softmax_rows(x, 0.7)?;
        let w = t.constant(&Mat::new(
            4,
            5,
            (0..20).map(|i| (i as f64 * 0.37).sin()).collect(),
        ));
        Ok(t.sum_all(t.mul(s, w)?))
    });
    run("log_softmax_rows", &a, &|t, x| {
        let s = t.log_softmax_rows(x);
        let w = t.constant(&Mat::new(
            4,
            5,
            (0..20).map(|i| (i as f64 * 0.61).cos()).collect(),
        ));
        Ok(t.sum_all(t.mul(s, w)?))
    });
    let bc5 = rand_mat(3, 5, &mut rng);
    let bcc = bc5.clone();
    run("pairwise_sq_dist (left)", &a, &|t, x| {
        let bt = t.constant(&bcc);
        Ok(t.sum_all(t.pairwise_sq_dist(x, bt)?))
    });
    let ac = a.clone();
    run("pairwise_sq_dist (right)", &bc5, &|t, x| {
        let at = t.constant(&ac);
        Ok(t.sum_all(t.pairwise_sq_dist(at, x)?))
    });
    run("row_l2_normalize", &a, &|t, x| {
        let n = t.row_l2_normalize(x);
        let w = t.constant(&Mat::new(
            4,
            5,
            (0..20).map(|i| (i as f64 * 0.23).sin() + 1.5).collect(),
        ));
        Ok(t.sum_all(t.mul(n, w)?))
    });
    run("gather_rows", &a, &|t, x| Ok(t.sum_all(t.gather_rows(x, &[2, 0, 2, 3])?)));
    run("transpose", &a, &|t, x| Ok(t.sum_all(t.transpose(x))));
    run("mean_all", &a, &|t, x| Ok(t.mean_all(x)));
    run("ortho_penalty", &a, &|t, x| Ok(ortho_penalty(t, x)?.0));
    let xc = rand_mat(4, 5, &mut rng);
    run("feature_recon", &a, &|t, x| {
        let target = t.constant(&xc);
        feature_recon(t, x, target)
    });
    let pairs = vec![(0u32, 1u32, 1.0), (0, 2, 0.0), (1, 3, 1.0), (2, 3, 0.0)];
    let z_probe = rand_mat(4, 5, &mut rng);
    let pc = pairs.clone();
    run("link_recon", &z_probe, &|t, x| link_recon(t, x, &pc));

    // The straight-through estimator has no finite-difference story — its
    // backward is the identity by definition — so assert exactness instead.
    {
        let h_val = rand_mat(4, 3, &mut rng);
        let entries = rand_mat(5, 3, &mut rng);
        let tape = Tape::new();
        let h = tape.leaf(&h_val, true);
        let e = tape.leaf(&entries, true);
        let cb = Codebook::new(entries.clone(), Similarity::Euclidean, 0.0)?;
        let assign = nearest_assign(&h_val, &cb)?;
        let (_q, z) = ste_quantize(&tape, h, e, &assign)?;
        tape.backward(tape.sum_all(z))?;
        let gh = tape.grad(h);
        let ge = tape.grad(e);
        let pass_through = gh.data.iter().all(|&v| (v - 1.0).abs() < 1e-15);
        let blocked = ge.data.iter().all(|&v| v == 0.0);
        check_line(
            &mut ok,
            "straight-through",
            pass_through && blocked,
            "dz/dh = 1 exactly, dz/dentries = 0 exactly".into(),
        );
    }

    // End-to-end composite on a 6-node toy: the full soft-path objective,
    // differentiated through encoder, quantizer, and every loss term, with
    // the deterministic expected-assignment mode standing in for sampling.
    {
        let spec = SbmSpec {
            blocks: 2,
            nodes_per_block: 3,
            p_in: 1.0,
            p_out: 0.2,
            feature_dim: 4,
            redundancy: 0.7,
            seed: 7,
            normalize: true,
        };
        let g = gvq_core::graph::generate_sbm(&spec)?;
        let ctr = gvq_core::rgvq::ContrastiveConfig {
            k_c: 2,
            m: 5,
            probe_count: 2,
            ..Default::default()
        };
        let sets = build_contrastive_sets(&g, &ctr, 11)?;
        let enc = init_encoder(
            &gvq_core::encoder::GnnConfig {
                dims: vec![4, 6, 6],
                agg: AggKind::Mean,
                activation: Activation::Elu,
            },
            13,
        )?;
        let dec = gvq_core::encoder::init_decoder(6, 4, 17);
        let entries_val = rand_mat(3, 6, &mut rng);
        let weights = gvq_core::rgvq::LossWeights::default();
        let pairs = gvq_core::vq::all_link_pairs(&g);
        let n = g.n as f64;

        // The codebook and commitment terms freeze one side behind a
        // stop-gradient, so a finite-difference probe of the raw objective
        // would leak through the frozen side and disagree with the tape by
        // construction. Pinning those sides at their base-point values
        // makes the probe measure exactly the function the tape
        // differentiates.
        let (h_base, zq_base) = {
            let t = Tape::new();
            let x = t.constant(&g.features);
            let e = t.constant(&entries_val);
            let h = enc.lift(&t).encode(&t, x, &g.adj)?;
            let logits = assignment_logits(&t, h, e, Similarity::Euclidean)?;
            let mut no_rng = ChaCha8Rng::seed_from_u64(0);
            let dist = gumbel_softmax(&t, logits, 0.7, GumbelMode::Expected, &mut no_rng)?;
            let zq = soft_quantize(&t, &dist, e)?;
            (t.to_mat(h), t.to_mat(zq))
        };

        let composite = |t: &Tape, x: Tensor, e: Tensor| -> Result<Tensor> {
            let h = enc.lift(t).encode(t, x, &g.adj)?;
            let logits = assignment_logits(t, h, e, Similarity::Euclidean)?;
            let mut no_rng = ChaCha8Rng::seed_from_u64(0);
            let dist = gumbel_softmax(t, logits, 0.7, GumbelMode::Expected, &mut no_rng)?;
            let zq = soft_quantize(t, &dist, e)?;
            let (reg, _diag) = infonce_reg(t, dist.probs, &sets, 0.5, Reduction::Mean)?;
            let h_pin = t.constant(&h_base);
            let zq_pin = t.constant(&zq_base);
            let vdiff = t.sub(h_pin, zq)?;
            let vocab = t.scale(t.sum_all(t.mul(vdiff, vdiff)?), 1.0 / n);
            let cdiff = t.sub(h, zq_pin)?;
            let commit = t.scale(t.sum_all(t.mul(cdiff, cdiff)?), 1.0 / n);
            let xhat = dec.lift(t).decode(t, zq)?;
            let feature = feature_recon(t, xhat, x)?;
            let link = link_recon(t, zq, &pairs)?;
            let (ortho, _degenerate) = ortho_penalty(t, e)?;
            rgvq_total_loss(
                t,
                &LossParts {
                    link,
                    feature,
                    reg: Some(reg),
                    commit,
                    vocab,
                    ortho: Some(ortho),
                },
                &weights,
            )
        };

        let ec = entries_val.clone();
        let wrt_features = finite_diff_check(
            |t, x| {
                let e = t.constant(&ec);
                composite(t, x, e)
            },
            &g.features,
            1e-5,
        )?;
        check_line(
            &mut ok,
            "composite (wrt features)",
            wrt_features <= args.composite_tol,
            format!("max rel err {wrt_features:.3e}"),
        );
        let xc = g.features.clone();
        let wrt_entries = finite_diff_check(
            |t, e| {
                let x = t.constant(&xc);
                composite(t, x, e)
            },
            &entries_val,
            1e-5,
        )?;
        check_line(
            &mut ok,
            "composite (wrt codebook)",
            wrt_entries <= args.composite_tol,
            format!("max rel err {wrt_entries:.3e}"),
        );
    }

    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

// ---------------------------------------------------------------------------
// entry
// ---------------------------------------------------------------------------

fn exit_for(e: &GvqError) -> ExitCode {
    match e {
        GvqError::Config(_) | GvqError::Param(_) => ExitCode::from(2),
        GvqError::Dim { .. }
        | GvqError::Domain(_)
        | GvqError::Contract(_)
        | GvqError::Numeric(_) => ExitCode::from(3),
        GvqError::Format { .. } | GvqError::Io(_) => ExitCode::from(4),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: Result<ExitCode> = match &cli.cmd {
        Cmd::Train(a) => cmd_train(a).map(|()| ExitCode::SUCCESS),
        Cmd::Sweep(a) => cmd_sweep(a).map(|()| ExitCode::SUCCESS),
        Cmd::Stats(a) => cmd_stats(a).map(|()| ExitCode::SUCCESS),
        Cmd::BuildSets(a) => cmd_build_sets(a).map(|()| ExitCode::SUCCESS),
        Cmd::Dynamics(a) => cmd_dynamics(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
