//! Graph neural network encoder and MLP feature decoder.
//!
//! Each encoder layer computes `act(h·W_self + agg(h)·W_neigh + bias)` where
//! `agg` pools neighbor rows (mean by default); nodes with no neighbors
//! contribute a zero aggregate. The decoder is a two-layer MLP
//! (`d -> d -> f`, ELU between, linear output) mapping quantized codes back
//! to feature space.
//!
//! Parameters live in plain [`Mat`]s between epochs and are lifted onto a
//! fresh [`Tape`] as gradient-tracked leaves for each forward/backward pass;
//! [`EncoderParams::param_slots`] and the `Lifted*` mirrors expose them in a
//! stable order so optimizer state can be keyed by slot index.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GvqError, Result};
use crate::tensor::{Activation, AggKind, Mat, Tape, Tensor};

/// One message-passing layer: self transform, neighbor transform, bias.
#[derive(Debug, Clone)]
pub struct GnnLayer {
    pub w_self: Mat,
    pub w_neigh: Mat,
    pub bias: Mat,
}

/// Encoder architecture shared by config and construction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GnnConfig {
    /// Layer widths from input features to latent dim, e.g. `[16, 64, 64]`.
    pub dims: Vec<usize>,
    pub agg: AggKind,
    pub activation: Activation,
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(GvqError::Config(
                "encoder dims must list at least input and output width".into(),
            ));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(GvqError::Config("encoder dims must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }
}

/// Full encoder state: layers plus the fixed aggregation and nonlinearity.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<GnnLayer>,
    pub agg: AggKind,
    pub act: Activation,
}

/// Decoder state: `z -> elu(z·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Tape handles for one lifted encoder, in layer order.
pub struct LiftedEncoder {
    pub layers: Vec<(Tensor, Tensor, Tensor)>,
    agg: AggKind,
    act: Activation,
}

/// Tape handles for one lifted decoder.
pub struct LiftedDecoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    m
}

/// Xavier-uniform encoder initialization (biases zero), deterministic in `seed`.
pub fn init_encoder(cfg: &GnnConfig, seed: u64) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = cfg
        .dims
        .windows(2)
        .map(|w| GnnLayer {
            w_self: xavier(w[0], w[1], &mut rng),
            w_neigh: xavier(w[0], w[1], &mut rng),
            bias: Mat::zeros(1, w[1]),
        })
        .collect();
    Ok(EncoderParams { layers, agg: cfg.agg, act: cfg.activation })
}

/// Xavier-uniform decoder initialization for `d -> d -> f`.
pub fn init_decoder(latent: usize, features: usize, seed: u64) -> DecoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DecoderParams {
        w1: xavier(latent, latent, &mut rng),
        b1: Mat::zeros(1, latent),
        w2: xavier(latent, features, &mut rng),
        b2: Mat::zeros(1, features),
    }
}

impl EncoderParams {
    /// Lift all parameters onto `tape` as gradient-tracked leaves.
    pub fn lift(&self, tape: &Tape) -> LiftedEncoder {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(&l.w_self, true), tape.leaf(&l.w_neigh, true), tape.leaf(&l.bias, true)))
            .collect();
        LiftedEncoder { layers, agg: self.agg, act: self.act }
    }

    /// Stored parameter matrices in lift order.
    pub fn param_slots(&mut self) -> Vec<&mut Mat> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w_self, &mut l.w_neigh, &mut l.bias])
            .collect()
    }
}

impl LiftedEncoder {
    /// Tape handles in the same order as [`EncoderParams::param_slots`].
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|&(a, b, c)| [a, b, c]).collect()
    }

    /// Forward pass producing the latent matrix `h` (n x d).
    pub fn encode(&self, tape: &Tape, x: Tensor, adj: &Rc<Vec<Vec<u32>>>) -> Result<Tensor> {
        let mut h = x;
        for &(w_self, w_neigh, bias) in &self.layers {
            let own = tape.matmul(h, w_self)?;
            let pooled = tape.aggregate_neighbors(h, adj, self.agg)?;
            let msg = tape.matmul(pooled, w_neigh)?;
            let pre = tape.add_rowvec(tape.add(own, msg)?, bias)?;
            h = tape.activation(pre, self.act)?;
        }
        Ok(h)
    }
}

impl DecoderParams {
    pub fn lift(&self, tape: &Tape) -> LiftedDecoder {
        LiftedDecoder {
            w1: tape.leaf(&self.w1, true),
            b1: tape.leaf(&self.b1, true),
            w2: tape.leaf(&self.w2, true),
            b2: tape.leaf(&self.b2, true),
        }
    }

    pub fn param_slots(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl LiftedDecoder {
    pub fn tensors(&self) -> Vec<Tensor> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// Forward pass mapping codes `z` (n x d) to reconstructions (n x f).
    pub fn decode(&self, tape: &Tape, z: Tensor) -> Result<Tensor> {
        let hidden = tape.activation(tape.add_rowvec(tape.matmul(z, self.w1)?, self.b1)?, Activation::Elu)?;
        tape.add_rowvec(tape.matmul(hidden, self.w2)?, self.b2)
    }
}
