//! Joint training loops for both quantization methods.
//!
//! One epoch processes the whole graph: encode, quantize (straight-through
//! hard assignment or Gumbel-softmax soft assignment, per the configured
//! method), assemble the weighted objective, backpropagate, step AdamW, and
//! apply whatever mitigation hook is active. Every epoch appends one
//! [`MetricsRecord`]; the reported headline number is the highest hard-
//! assignment perplexity seen during training.
//!
//! Determinism: each random consumer (encoder init, decoder init, codebook
//! init, Gumbel noise, link sampling, resets, contrastive set construction)
//! owns its own ChaCha8 stream derived from the run seed, so reordering one
//! consumer can never perturb another. Two runs with the same config and
//! seed produce byte-identical metrics.

use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CodebookInit, Method, TrainConfig};
use crate::encoder::{init_decoder, init_encoder, DecoderParams, EncoderParams};
use crate::error::{GvqError, Result};
use crate::graph::Graph;
use crate::metrics::{MetricsRecord, TrainSummary};
use crate::mitigation::{
    affine_adapt, codebook_reset, ema_update, simvq_project, AffineParams, EmaState,
    MitigationKind, SimvqParams,
};
use crate::optim::AdamW;
use crate::rgvq::{
    assignment_logits, audit_contrastive_sets, build_contrastive_sets, gumbel_softmax,
    infonce_reg, rgvq_total_loss, soft_quantize, AuditReport, GumbelMode, LossParts, Reduction,
};
use crate::tensor::{Mat, Tape, Tensor};
use crate::vq::{
    gaussian_init, kmeans_init, nearest_assign, ortho_penalty, perplexity, recon_losses,
    ste_quantize, usage_counts, vq_aux_losses, Codebook,
};

/// Splitmix-style stream derivation so each random consumer gets an
/// independent seed from the run seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_ENCODER: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_CODEBOOK: u64 = 3;
const STREAM_GUMBEL: u64 = 4;
const STREAM_LINKS: u64 = 5;
const STREAM_RESET: u64 = 6;
const STREAM_SETS: u64 = 7;

/// Counters for the mitigation hooks, so tests can assert the documented
/// cadence (EMA fires every optimization step, resets fire every epoch once
/// the usage history covers the dead threshold).
#[derive(Debug, Clone, Default)]
pub struct MitigationLog {
    pub ema_updates: usize,
    /// `(epoch, replaced code indices)` for every reset that replaced codes.
    pub resets: Vec<(usize, Vec<usize>)>,
    pub pretrain_epochs: usize,
}

/// Everything a finished run hands back.
pub struct TrainOutput {
    /// One record per epoch, in order.
    pub records: Vec<MetricsRecord>,
    pub summary: TrainSummary,
    /// Stored codebook state (the raw entries the mitigation variant learns).
    pub codebook: Codebook,
    /// The entries assignment actually uses: equal to the stored entries
    /// except for the affine and projection variants, which derive them.
    pub effective_entries: Mat,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    /// Hard nearest-codeword assignment of the final embeddings.
    pub final_assign: Vec<usize>,
    /// Structural audit of the contrastive sets (soft method only).
    pub audit: Option<AuditReport>,
    pub mitigation_log: MitigationLog,
}

enum MitState {
    Plain,
    Ema(EmaState),
    Affine(AffineParams),
    Simvq(SimvqParams),
}

/// Per-epoch view of the codebook on the current tape: the effective entries
/// used for assignment, plus the tensors whose gradients feed the optimizer
/// (aligned with [`codebook_slots`]).
struct EpochCodebook {
    eff: Tensor,
    grad_sources: Vec<Tensor>,
}

fn lift_codebook(tape: &Tape, cb: &Codebook, mit: &MitState) -> Result<EpochCodebook> {
    Ok(match mit {
        MitState::Plain => {
            let entries = tape.leaf(&cb.entries, true);
            EpochCodebook { eff: entries, grad_sources: vec![entries] }
        }
        MitState::Ema(_) => {
            // EMA replaces the codebook-loss gradient entirely.
            let entries = tape.leaf(&cb.entries, false);
            EpochCodebook { eff: entries, grad_sources: vec![] }
        }
        MitState::Affine(a) => {
            let entries = tape.leaf(&cb.entries, true);
            let (scale, shift) = a.lift(tape);
            let eff = affine_adapt(tape, entries, scale, shift)?;
            EpochCodebook { eff, grad_sources: vec![entries, scale, shift] }
        }
        MitState::Simvq(s) => {
            let (eff, proj) = simvq_project(tape, s)?;
            EpochCodebook { eff, grad_sources: vec![proj] }
        }
    })
}

/// Mutable parameter slots the optimizer owns for the codebook, in the same
/// order as [`lift_codebook`]'s gradient sources.
fn codebook_slots<'a>(cb: &'a mut Codebook, mit: &'a mut MitState) -> Vec<&'a mut Mat> {
    match mit {
        MitState::Plain => vec![&mut cb.entries],
        MitState::Ema(_) => vec![],
        MitState::Affine(a) => {
            let mut slots = vec![&mut cb.entries];
            slots.extend(a.param_slots());
            slots
        }
        MitState::Simvq(s) => s.param_slots(),
    }
}

/// The entries assignment currently uses, materialized as plain values.
fn effective_entries(cb: &Codebook, mit: &MitState) -> Result<Mat> {
    match mit {
        MitState::Plain | MitState::Ema(_) => Ok(cb.entries.clone()),
        MitState::Affine(a) => {
            let tape = Tape::new();
            let (scale, shift) = a.lift(&tape);
            let eff = affine_adapt(&tape, tape.leaf(&cb.entries, false), scale, shift)?;
            Ok(tape.to_mat(eff))
        }
        MitState::Simvq(s) => {
            let tape = Tape::new();
            let (eff, _) = simvq_project(&tape, s)?;
            Ok(tape.to_mat(eff))
        }
    }
}

/// Forward pass without gradients: the current embeddings as plain values.
fn embed(enc: &EncoderParams, g: &Graph) -> Result<Mat> {
    let tape = Tape::new();
    let x = tape.constant(&g.features);
    let h = enc.lift(&tape).encode(&tape, x, &g.adj)?;
    Ok(tape.to_mat(h))
}

/// Attaches the last finite record to a numeric abort so the failure is
/// diagnosable from the error alone.
fn nan_context(e: GvqError, records: &[MetricsRecord]) -> GvqError {
    if let GvqError::Numeric(msg) = &e {
        let dump = records
            .last()
            .and_then(|r| serde_json::to_string(r).ok())
            .unwrap_or_else(|| "none".into());
        return GvqError::Numeric(format!("{msg}; last finite record: {dump}"));
    }
    e
}

/// Reconstruction-only epoch used by the pretrained-encoder baseline.
fn pretrain_epoch(
    cfg: &TrainConfig,
    g: &Graph,
    enc: &mut EncoderParams,
    dec: &mut DecoderParams,
    opt: &mut AdamW,
    link_rng: &mut ChaCha8Rng,
) -> Result<()> {
    let tape = Tape::new();
    let x = tape.constant(&g.features);
    let enc_l = enc.lift(&tape);
    let dec_l = dec.lift(&tape);
    let h = enc_l.encode(&tape, x, &g.adj)?;
    let (feature, link) = recon_losses(&tape, g, h, x, &dec_l, cfg.link_mode, link_rng)?;
    let total = tape.add(
        tape.scale(link, cfg.weights.link),
        tape.scale(feature, cfg.weights.feature),
    )?;
    let v = tape.scalar(total)?;
    if !v.is_finite() {
        return Err(GvqError::Numeric(format!("pretraining loss is not finite: {v}")));
    }
    tape.backward(total)?;
    let mut grads: Vec<Mat> = Vec::new();
    for t in enc_l.tensors() {
        grads.push(tape.grad(t));
    }
    for t in dec_l.tensors() {
        grads.push(tape.grad(t));
    }
    let mut params = enc.param_slots();
    params.extend(dec.param_slots());
    opt.step(&mut params, &grads)
}

/// Realizes the configured dataset and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let g = cfg.dataset.realize()?;
    train_on_graph(cfg, &g)
}

/// Trains on an already-materialized graph (sweeps reuse this to avoid
/// regenerating the dataset per cell).
pub fn train_on_graph(cfg: &TrainConfig, g: &Graph) -> Result<TrainOutput> {
    cfg.validate()?;
    let gnn = cfg.encoder.to_gnn_config();
    if g.features.cols != gnn.dims[0] {
        return Err(GvqError::Contract(format!(
            "encoder expects {} input features, graph has {}",
            gnn.dims[0], g.features.cols
        )));
    }
    let latent = gnn.latent_dim();

    let mut enc = init_encoder(&gnn, sub_seed(cfg.seed, STREAM_ENCODER))?;
    let mut dec = init_decoder(latent, g.features.cols, sub_seed(cfg.seed, STREAM_DECODER));

    let mut gumbel_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_GUMBEL));
    let mut link_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_LINKS));
    let mut reset_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_RESET));

    let mut log = MitigationLog::default();

    // The pretrained-encoder baseline trains the autoencoder alone first, so
    // the codebook initialization below sees a structured latent space.
    if cfg.mitigation.kind == MitigationKind::Pretrain {
        let mut pre_opt = AdamW::new(cfg.optimizer)?;
        for _ in 0..cfg.mitigation.pretrain_epochs {
            pretrain_epoch(cfg, g, &mut enc, &mut dec, &mut pre_opt, &mut link_rng)?;
            log.pretrain_epochs += 1;
        }
    }

    let entries = match cfg.codebook_init {
        CodebookInit::Gaussian { sigma } => {
            gaussian_init(cfg.k, latent, sigma, sub_seed(cfg.seed, STREAM_CODEBOOK))
        }
        CodebookInit::Kmeans { iters } => {
            let h0 = embed(&enc, g)?;
            kmeans_init(&h0, cfg.k, iters, sub_seed(cfg.seed, STREAM_CODEBOOK))?
        }
    };
    let mut cb = Codebook::new(entries, cfg.similarity, cfg.weights.ortho)?;

    let mut mit = match cfg.mitigation.kind {
        MitigationKind::Ema => MitState::Ema(EmaState::new(&cb.entries)),
        MitigationKind::Affine => MitState::Affine(AffineParams::new(latent)),
        MitigationKind::Simvq => MitState::Simvq(SimvqParams::new(cb.entries.clone())),
        MitigationKind::None | MitigationKind::Reset | MitigationKind::Pretrain => MitState::Plain,
    };

    let (sets, audit) = if cfg.method == Method::Rgvq {
        let sets = build_contrastive_sets(g, &cfg.contrastive, sub_seed(cfg.seed, STREAM_SETS))?;
        let audit = audit_contrastive_sets(g, &sets)?;
        (Some(sets), Some(audit))
    } else {
        (None, None)
    };

    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut records: Vec<MetricsRecord> = Vec::with_capacity(cfg.epochs);
    let mut usage_history: Vec<Vec<f64>> = Vec::new();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let tape = Tape::new();
        let x = tape.constant(&g.features);
        let enc_l = enc.lift(&tape);
        let dec_l = dec.lift(&tape);
        let h = enc_l.encode(&tape, x, &g.adj)?;
        let h_mat = tape.to_mat(h);

        let ecb = lift_codebook(&tape, &cb, &mit)?;

        // The codebook and commitment losses act on the quantized embedding
        // of whichever path is active: the gathered codewords on the hard
        // path, the probability-weighted mixture on the soft path (so every
        // participating codeword receives gradient, not just the winner).
        // `assign` is the nearest-codeword token for each node under the
        // epoch's effective codebook — the same deterministic rule every
        // method uses at inference — and feeds the usage metrics and the
        // mitigation hooks, so usage numbers are comparable across methods.
        let eff_mat = tape.to_mat(ecb.eff);
        let eval_cb = Codebook::new(eff_mat, cfg.similarity, 0.0)?;
        let assign = nearest_assign(&h_mat, &eval_cb)?;
        let (z, reg, vocab_raw, commit_raw) = match cfg.method {
            Method::Vanilla => {
                let (q, z_ste) = ste_quantize(&tape, h, ecb.eff, &assign)?;
                let (vocab_raw, commit_raw) = vq_aux_losses(&tape, h, q, 1.0)?;
                (z_ste, None, vocab_raw, commit_raw)
            }
            Method::Rgvq => {
                let logits = assignment_logits(&tape, h, ecb.eff, cfg.similarity)?;
                let dist =
                    gumbel_softmax(&tape, logits, cfg.tau, GumbelMode::Sampled, &mut gumbel_rng)?;
                let zq = soft_quantize(&tape, &dist, ecb.eff)?;
                let (reg_t, _diag) = infonce_reg(
                    &tape,
                    dist.probs,
                    sets.as_ref().expect("sets built for rgvq"),
                    cfg.sim_temp,
                    Reduction::Mean,
                )?;
                let (vocab_raw, commit_raw) = vq_aux_losses(&tape, h, zq, 1.0)?;
                (zq, Some(reg_t), vocab_raw, commit_raw)
            }
        };

        let n = g.n as f64;
        let vocab = tape.scale(vocab_raw, 1.0 / n);
        let commit = tape.scale(commit_raw, 1.0 / n);
        let (feature, link) = recon_losses(&tape, g, z, x, &dec_l, cfg.link_mode, &mut link_rng)?;
        let ortho = if cfg.weights.ortho > 0.0 {
            Some(ortho_penalty(&tape, ecb.eff)?.0)
        } else {
            None
        };

        let parts = LossParts { link, feature, reg, commit, vocab, ortho };
        let total =
            rgvq_total_loss(&tape, &parts, &cfg.weights).map_err(|e| nan_context(e, &records))?;
        tape.backward(total)?;

        let counts = usage_counts(&assign, cfg.k);
        let perp = perplexity(&counts)?;
        let active = counts.iter().filter(|&&c| c > 0.0).count();
        let mut rec = MetricsRecord {
            epoch,
            total: tape.scalar(total)?,
            link: tape.scalar(link)?,
            feature: tape.scalar(feature)?,
            commit: tape.scalar(commit)?,
            vocab: tape.scalar(vocab)?,
            ortho: match ortho {
                Some(t) => tape.scalar(t)?,
                None => 0.0,
            },
            contrastive: match reg {
                Some(t) => tape.scalar(t)?,
                None => 0.0,
            },
            perplexity: perp,
            active_codes: active,
            wall_time_ms: 0.0,
        };

        let mut grads: Vec<Mat> = Vec::new();
        for t in enc_l.tensors() {
            grads.push(tape.grad(t));
        }
        for t in dec_l.tensors() {
            grads.push(tape.grad(t));
        }
        for &t in &ecb.grad_sources {
            grads.push(tape.grad(t));
        }
        let mut params = enc.param_slots();
        params.extend(dec.param_slots());
        params.extend(codebook_slots(&mut cb, &mut mit));
        opt.step(&mut params, &grads)?;

        if let MitState::Ema(state) = &mut mit {
            ema_update(&mut cb.entries, state, &h_mat, &assign, cfg.mitigation.ema_decay)?;
            log.ema_updates += 1;
        }
        usage_history.push(counts);
        if cfg.mitigation.kind == MitigationKind::Reset
            && usage_history.len() >= cfg.mitigation.dead_threshold
        {
            let replaced = codebook_reset(
                &mut cb.entries,
                &usage_history,
                &h_mat,
                cfg.mitigation.dead_threshold,
                &mut reset_rng,
            )?;
            if !replaced.is_empty() {
                log.resets.push((epoch, replaced));
            }
        }

        rec.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        records.push(rec);
    }

    let h_final = embed(&enc, g)?;
    let eff_final = effective_entries(&cb, &mit)?;
    let final_cb = Codebook::new(eff_final.clone(), cfg.similarity, 0.0)?;
    let final_assign = nearest_assign(&h_final, &final_cb)?;
    let summary = TrainSummary::from_records(cfg.method, cfg.k, &records)?;

    Ok(TrainOutput {
        records,
        summary,
        codebook: cb,
        effective_entries: eff_final,
        encoder: enc,
        decoder: dec,
        final_assign,
        audit,
        mitigation_log: log,
    })
}

/// Hyperparameter axis a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Codebook size K (values are rounded to integers >= 1).
    CodebookSize,
    /// Gumbel-softmax temperature.
    Temperature,
    /// Contrastive positives/negatives per anchor.
    ContrastiveK,
}

/// One row of an axis sweep: the swept value, the run's best perplexity, and
/// the capacity-normalized perplexity `P / K`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AxisCell {
    pub value: f64,
    pub best_perplexity: f64,
    pub normalized: f64,
}

/// Trains one run per value, varying only the swept axis.
pub fn axis_sweep(base: &TrainConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<AxisCell>> {
    if values.is_empty() {
        return Err(GvqError::Param("sweep needs at least one value".into()));
    }
    let g = base.dataset.realize()?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::CodebookSize => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(GvqError::Param(format!("codebook size must be a positive integer, got {v}")));
                }
                cfg.k = v as usize;
            }
            SweepAxis::Temperature => cfg.tau = v,
            SweepAxis::ContrastiveK => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(GvqError::Param(format!("contrastive k must be a positive integer, got {v}")));
                }
                cfg.contrastive.k_c = v as usize;
            }
        }
        let out = train_on_graph(&cfg, &g)?;
        rows.push(AxisCell {
            value: v,
            best_perplexity: out.summary.best_perplexity,
            normalized: out.summary.best_perplexity / cfg.k as f64,
        });
    }
    Ok(rows)
}

/// Renders sweep rows as CSV with a fixed header.
pub fn axis_csv(rows: &[AxisCell]) -> String {
    let mut out = String::from("value,best_perplexity,normalized_perplexity\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.value, r.best_perplexity, r.normalized));
    }
    out
}
