//! Collapse-mitigation arms: EMA codebook updates, dead-code reset,
//! pre-quantization affine adaptation, encoder-pretraining configuration,
//! and SimVQ-style codebook reparameterization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GvqError, Result};
use crate::tensor::{Mat, Tape, Tensor};

/// Which mitigation arm a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MitigationKind {
    #[default]
    None,
    Ema,
    Reset,
    Affine,
    Pretrain,
    Simvq,
}

/// Mitigation block of the experiment config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MitigationConfig {
    pub kind: MitigationKind,
    pub ema_decay: f64,
    pub dead_threshold: usize,
    pub pretrain_epochs: usize,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self { kind: MitigationKind::None, ema_decay: 0.9, dead_threshold: 10, pretrain_epochs: 50 }
    }
}

impl MitigationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(GvqError::Config(format!(
                "ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.dead_threshold < 1 {
            return Err(GvqError::Config("dead_threshold must be >= 1".into()));
        }
        if self.pretrain_epochs < 1 {
            return Err(GvqError::Config("pretrain_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// EMA accumulators: per-code smoothed count and smoothed feature sum,
/// seeded so that `sum / (size + eps)` starts at the initial entries.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub cluster_size: Vec<f64>,
    pub cluster_sum: Mat,
}

impl EmaState {
    pub fn new(entries: &Mat) -> Self {
        Self { cluster_size: vec![1.0; entries.rows], cluster_sum: entries.clone() }
    }
}

/// EMA codebook step replacing the gradient path of the codebook loss.
/// Only codes assigned this step touch their accumulators, so a
/// never-assigned code keeps its entry bit-identical.
pub fn ema_update(
    entries: &mut Mat,
    state: &mut EmaState,
    h: &Mat,
    assign: &[usize],
    decay: f64,
) -> Result<()> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(GvqError::Param(format!("decay must lie in (0, 1), got {decay}")));
    }
    if h.cols != entries.cols || assign.len() != h.rows {
        return Err(GvqError::Contract("ema_update shape mismatch".into()));
    }
    let (k, d) = entries.shape();
    let mut counts = vec![0.0; k];
    let mut sums = Mat::zeros(k, d);
    for (i, &a) in assign.iter().enumerate() {
        if a >= k {
            return Err(GvqError::Contract(format!("assignment {a} out of range for K = {k}")));
        }
        counts[a] += 1.0;
        let start = a * d;
        for (j, &v) in h.row(i).iter().enumerate() {
            sums.data[start + j] += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0.0 {
            continue;
        }
        state.cluster_size[c] = decay * state.cluster_size[c] + (1.0 - decay) * counts[c];
        let start = c * d;
        for j in 0..d {
            state.cluster_sum.data[start + j] =
                decay * state.cluster_sum.data[start + j] + (1.0 - decay) * sums.data[start + j];
            entries.data[start + j] =
                state.cluster_sum.data[start + j] / (state.cluster_size[c] + 1e-5);
        }
    }
    Ok(())
}

/// Replace every code unused for the last `dead_threshold` consecutive epochs
/// with a uniformly sampled row of `h`. Returns the replaced indices.
pub fn codebook_reset(
    entries: &mut Mat,
    usage_history: &[Vec<f64>],
    h: &Mat,
    dead_threshold: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if dead_threshold < 1 {
        return Err(GvqError::Param("dead_threshold must be >= 1".into()));
    }
    if usage_history.len() < dead_threshold {
        return Err(GvqError::Contract(format!(
            "usage history covers {} epochs, need >= {dead_threshold}",
            usage_history.len()
        )));
    }
    if h.cols != entries.cols || h.rows == 0 {
        return Err(GvqError::Contract("reset needs nonempty h with matching width".into()));
    }
    let k = entries.rows;
    let recent = &usage_history[usage_history.len() - dead_threshold..];
    let mut replaced = Vec::new();
    for c in 0..k {
        let dead = recent.iter().all(|epoch| {
            if epoch.len() != k {
                return false;
            }
            epoch[c] == 0.0
        });
        if recent.iter().any(|epoch| epoch.len() != k) {
            return Err(GvqError::Contract("usage history row length != K".into()));
        }
        if dead {
            let pick = rng.gen_range(0..h.rows);
            let start = c * entries.cols;
            entries.data[start..start + entries.cols].copy_from_slice(h.row(pick));
            replaced.push(c);
        }
    }
    Ok(replaced)
}

/// Learnable per-dimension scale and shift applied before quantization.
#[derive(Debug, Clone)]
pub struct AffineParams {
    pub scale: Mat,
    pub shift: Mat,
}

impl AffineParams {
    /// Identity initialization: scale 1, shift 0.
    pub fn new(d: usize) -> Self {
        Self { scale: Mat::new(1, d, vec![1.0; d]), shift: Mat::zeros(1, d) }
    }

    pub fn lift(&self, tape: &Tape) -> (Tensor, Tensor) {
        (tape.leaf(&self.scale, true), tape.leaf(&self.shift, true))
    }

    pub fn param_slots(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.scale, &mut self.shift]
    }
}

/// `h ∘ scale + shift`, gradient-carrying in all three arguments.
pub fn affine_adapt(tape: &Tape, h: Tensor, scale: Tensor, shift: Tensor) -> Result<Tensor> {
    tape.add_rowvec(tape.mul_rowvec(h, scale)?, shift)
}

/// SimVQ state: frozen basis, learnable square projection (init identity).
#[derive(Debug, Clone)]
pub struct SimvqParams {
    pub basis: Mat,
    pub proj: Mat,
}

impl SimvqParams {
    /// Freeze `basis` (the initial codebook) and start `proj` at identity so
    /// the effective codebook begins equal to the basis.
    pub fn new(basis: Mat) -> Self {
        let d = basis.cols;
        Self { basis, proj: Mat::identity(d) }
    }

    pub fn param_slots(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.proj]
    }
}

/// Effective codebook `basis · proj`. The basis is lifted without gradient,
/// so every effective codeword moves whenever any code is used.
pub fn simvq_project(tape: &Tape, params: &SimvqParams) -> Result<(Tensor, Tensor)> {
    let basis = tape.leaf(&params.basis, false);
    let proj = tape.leaf(&params.proj, true);
    let effective = tape.matmul(basis, proj)?;
    Ok((effective, proj))
}
