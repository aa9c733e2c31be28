//! Versioned run configuration, stored as TOML.
//!
//! Every field has a default drawn from the desk-scale preset, so a config
//! file only needs the fields it overrides. `version` must match
//! [`CONFIG_VERSION`]; bump it when the schema changes incompatibly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GvqError, Result};
use crate::graph::{generate_sbm, load_graph, Graph, SbmSpec};
use crate::mitigation::MitigationConfig;
use crate::optim::AdamWConfig;
use crate::rgvq::ContrastiveConfig;
use crate::rgvq::LossWeights;
use crate::tensor::{Activation, AggKind};
use crate::vq::{LinkMode, Similarity};

pub const CONFIG_VERSION: u32 = 1;

/// Where the graph comes from: files on disk or a generated block model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Files {
        edges: PathBuf,
        features: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Sbm(SbmSpec),
}

fn default_true() -> bool {
    true
}

impl DatasetSource {
    /// Loads or generates the graph this source describes.
    pub fn realize(&self) -> Result<Graph> {
        match self {
            DatasetSource::Files { edges, features, labels, normalize } => {
                load_graph(edges, features, labels.as_deref(), *normalize)
            }
            DatasetSource::Sbm(spec) => generate_sbm(spec),
        }
    }
}

/// Which quantization path training takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Deterministic nearest-codeword assignment with a straight-through
    /// backward and the two-sided auxiliary losses.
    Vanilla,
    /// Gumbel-softmax soft assignment with the structure-aware contrastive
    /// regularizer.
    Rgvq,
}

/// How the codebook is initialized before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "init", rename_all = "lowercase")]
pub enum CodebookInit {
    /// Independent Gaussian entries with the given standard deviation.
    Gaussian { sigma: f64 },
    /// K-means++ seeding plus Lloyd refinement on the initial embeddings.
    Kmeans { iters: usize },
}

/// Encoder architecture, serializable half of [`crate::encoder::GnnConfig`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderSpec {
    /// Layer widths, input first: `[in, h1, ..., latent]`.
    pub dims: Vec<usize>,
    pub agg: AggKind,
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn to_gnn_config(&self) -> crate::encoder::GnnConfig {
        crate::encoder::GnnConfig {
            dims: self.dims.clone(),
            agg: self.agg,
            activation: self.activation,
        }
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub version: u32,
    pub dataset: DatasetSource,
    pub encoder: EncoderSpec,
    /// Codebook size.
    pub k: usize,
    pub similarity: Similarity,
    pub codebook_init: CodebookInit,
    pub method: Method,
    pub mitigation: MitigationConfig,
    /// Gumbel-softmax temperature (soft path only).
    pub tau: f64,
    /// Cosine-similarity temperature inside the contrastive regularizer.
    pub sim_temp: f64,
    pub contrastive: ContrastiveConfig,
    pub link_mode: LinkMode,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Record a metrics line every this many epochs (the final epoch is
    /// always recorded).
    pub report_cadence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        desk_preset()
    }
}

/// Desk-scale preset: a 300-node redundant block model, a 4-layer encoder
/// with hidden width 64, and a 64-entry codebook, with the same codebook
/// protocol the full-scale runs use (cosine similarity, k-means
/// initialization, orthogonal regularization). Small enough that a full
/// run finishes in seconds.
pub fn desk_preset() -> TrainConfig {
    TrainConfig {
        version: CONFIG_VERSION,
        dataset: DatasetSource::Sbm(SbmSpec {
            blocks: 4,
            nodes_per_block: 75,
            p_in: 0.5,
            p_out: 0.02,
            feature_dim: 16,
            redundancy: 0.95,
            seed: 0,
            normalize: true,
        }),
        encoder: EncoderSpec {
            dims: vec![16, 64, 64, 64, 64],
            agg: AggKind::Mean,
            activation: Activation::Elu,
        },
        k: 64,
        similarity: Similarity::Cosine,
        codebook_init: CodebookInit::Kmeans { iters: 25 },
        method: Method::Rgvq,
        mitigation: MitigationConfig::default(),
        tau: 0.1,
        sim_temp: 0.5,
        contrastive: ContrastiveConfig::default(),
        link_mode: LinkMode::Dense,
        weights: LossWeights::default(),
        optimizer: AdamWConfig::default(),
        epochs: 100,
        seed: 42,
        report_cadence: 1,
    }
}

/// Full-scale preset mirroring the reference protocol: hidden width 256,
/// four layers, K = 512, k-means initialization, low learning rate, and
/// sampled link reconstruction. Expects a dataset source to be filled in.
pub fn paper_preset() -> TrainConfig {
    TrainConfig {
        encoder: EncoderSpec {
            dims: vec![16, 256, 256, 256, 256],
            agg: AggKind::Mean,
            activation: Activation::Elu,
        },
        k: 512,
        codebook_init: CodebookInit::Kmeans { iters: 25 },
        link_mode: LinkMode::Sampled { neg_per_pos: 1 },
        optimizer: AdamWConfig { lr: 1e-4, ..AdamWConfig::default() },
        ..desk_preset()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(GvqError::Config(format!(
                "config version {} not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.encoder.to_gnn_config().validate()?;
        if self.k == 0 {
            return Err(GvqError::Config("k must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(GvqError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.sim_temp > 0.0) {
            return Err(GvqError::Config(format!(
                "sim_temp must be > 0, got {}",
                self.sim_temp
            )));
        }
        let w = &self.weights;
        for (name, v) in [
            ("link", w.link),
            ("feature", w.feature),
            ("reg", w.reg),
            ("commit", w.commit),
            ("vocab", w.vocab),
            ("ortho", w.ortho),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(GvqError::Config(format!("weight {name} must be >= 0, got {v}")));
            }
        }
        match self.codebook_init {
            CodebookInit::Gaussian { sigma } => {
                if !(sigma > 0.0) {
                    return Err(GvqError::Config(format!(
                        "gaussian init sigma must be > 0, got {sigma}"
                    )));
                }
            }
            CodebookInit::Kmeans { iters } => {
                if iters == 0 {
                    return Err(GvqError::Config("kmeans iters must be >= 1".into()));
                }
            }
        }
        self.optimizer.validate().map_err(|e| GvqError::Config(e.to_string()))?;
        if self.epochs == 0 {
            return Err(GvqError::Config("epochs must be >= 1".into()));
        }
        if self.report_cadence == 0 {
            return Err(GvqError::Config("report_cadence must be >= 1".into()));
        }
        self.contrastive.validate().map_err(|e| GvqError::Config(e.to_string()))?;
        self.mitigation.validate().map_err(|e| GvqError::Config(e.to_string()))?;
        if let LinkMode::Sampled { neg_per_pos } = self.link_mode {
            if neg_per_pos == 0 {
                return Err(GvqError::Config("neg_per_pos must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| GvqError::Config(format!("TOML parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| GvqError::Config(format!("TOML emit: {e}")))
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }
}
