//! Graph vector-quantization laboratory.
//!
//! The library trains graph autoencoders whose latent space is discretized
//! by a learned codebook, and studies when that codebook collapses. It
//! provides:
//!
//! - a small reverse-mode autodiff engine over dense 2-D matrices
//!   ([`tensor`]),
//! - graph loading, a stochastic block model generator with a feature
//!   redundancy knob, and the two dataset statistics the experiments use
//!   ([`graph`]),
//! - a message-passing encoder and perceptron decoder ([`encoder`]),
//! - deterministic vector quantization with a straight-through estimator,
//!   its auxiliary losses, perplexity, and k-means initialization ([`vq`]),
//! - five collapse-mitigation baselines ([`mitigation`]),
//! - soft quantization by Gumbel-Softmax sampling with a structure-aware
//!   contrastive regularizer ([`rgvq`]),
//! - an analyzer that cross-checks the closed-form codebook update rule
//!   against autodiff and probes token co-assignment geometry
//!   ([`dynamics`]),
//! - AdamW, experiment configuration, metrics, and the training loops
//!   ([`optim`], [`config`], [`metrics`], [`train`]).

pub mod config;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod mitigation;
pub mod optim;
pub mod rgvq;
pub mod tensor;
pub mod train;
pub mod vq;

pub use error::{GvqError, Result};
pub use tensor::{finite_diff_check, Activation, AggKind, Mat, Tape, Tensor};
