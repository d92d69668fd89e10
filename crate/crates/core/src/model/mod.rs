//! The FedVI network: embedding MLP, support/query and global/local
//! splits, posterior constructor, global and local classifiers.
//!
//! Two forward paths share the parameter layout: [`forward`] records onto a
//! [`Graph`](crate::graph::Graph) for training, [`infer`] evaluates with plain
//! tensors for evaluation and loss audits.

pub mod forward;
pub mod infer;
pub mod io;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{glorot_scale, DiagGaussian, DistError};
use crate::params::{ParamBlock, ParamSet};
use crate::tensor::{NnError, Tensor};

pub use forward::{global_minibatch_loss, minibatch_loss, Dropout, LossParts, MinibatchLoss};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("batch of {size} rows cannot be split into non-empty support and query sets")]
    BatchTooSmall { size: usize },
    #[error("noise has length {got}, expected {expected}")]
    NoiseLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    /// Widths of the embedding layers; the last one is the representation
    /// size and must equal `global_dim + local_dim`.
    pub embed_widths: Vec<usize>,
    pub local_dim: usize,
    pub global_dim: usize,
    pub num_classes: usize,
    /// Hidden widths of the posterior constructor.
    pub posterior_widths: Vec<usize>,
    pub support_fraction: f64,
    pub mean_damp: f64,
    pub logscale_damp: f64,
    pub scale_floor: f64,
    /// Inverted-dropout rate on embedding activations during training.
    pub dropout: f64,
    /// Multiplier on the Glorot range of the constructor's output weights.
    pub posterior_out_init: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            embed_widths: vec![64, 20],
            local_dim: 4,
            global_dim: 16,
            num_classes: 5,
            posterior_widths: vec![256, 256],
            support_fraction: 0.5,
            mean_damp: 0.1,
            logscale_damp: 0.01,
            scale_floor: 1e-5,
            dropout: 0.0,
            posterior_out_init: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.input_dim == 0 || self.num_classes < 2 {
            return fail("input_dim must be ≥ 1 and num_classes ≥ 2".into());
        }
        if self.local_dim == 0 || self.global_dim == 0 {
            return fail(format!(
                "local_dim = {} and global_dim = {} must both be ≥ 1",
                self.local_dim, self.global_dim
            ));
        }
        match self.embed_widths.last() {
            Some(&d) if d == self.local_dim + self.global_dim => {}
            other => {
                return fail(format!(
                    "last embedding width {:?} must equal global_dim + local_dim = {}",
                    other,
                    self.local_dim + self.global_dim
                ))
            }
        }
        if self.embed_widths.iter().chain(&self.posterior_widths).any(|&w| w == 0) {
            return fail("layer widths must be positive".into());
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return fail(format!("support_fraction = {} must lie in (0, 1)", self.support_fraction));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return fail(format!("dropout = {} must lie in [0, 1)", self.dropout));
        }
        if !(self.scale_floor > 0.0 && self.mean_damp.is_finite() && self.logscale_damp.is_finite()) {
            return fail("scale_floor must be positive and damping factors finite".into());
        }
        if !(self.posterior_out_init >= 0.0) {
            return fail("posterior_out_init must be non-negative".into());
        }
        Ok(())
    }

    pub fn repr_dim(&self) -> usize {
        self.local_dim + self.global_dim
    }

    /// Dimension of the local parameter vector β.
    pub fn beta_dim(&self) -> usize {
        self.local_dim * self.num_classes
    }

    /// `(2L + 1)·|Y|`.
    pub fn posterior_out_width(&self) -> usize {
        (2 * self.local_dim + 1) * self.num_classes
    }

    /// Prior standard deviation of every β coordinate.
    pub fn prior_scale(&self) -> f64 {
        glorot_scale(self.local_dim, self.num_classes)
    }

    pub fn prior(&self) -> DiagGaussian {
        DiagGaussian::isotropic(self.beta_dim(), self.prior_scale()).expect("glorot scale is positive")
    }
}

/// Posterior over β reconstructed from a support set, plus the per-class
/// logit offset produced alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub q: DiagGaussian,
    pub b_beta: Vec<f64>,
}

/// Global parameters θ = embedding ∪ posterior constructor ∪ classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FedVIParams {
    pub arch: ArchConfig,
    pub blocks: ParamSet,
}

/// Positions of each parameter group inside [`FedVIParams::blocks`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embed: Range<usize>,
    pub post: Range<usize>,
    pub cls_weight: usize,
    pub cls_bias: usize,
}

impl Layout {
    pub fn of(arch: &ArchConfig) -> Self {
        let ne = 2 * arch.embed_widths.len();
        let np = 2 * (arch.posterior_widths.len() + 1);
        Self {
            embed: 0..ne,
            post: ne..ne + np,
            cls_weight: ne + np,
            cls_bias: ne + np + 1,
        }
    }

    pub fn len(&self) -> usize {
        self.cls_bias + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn layer_dims(input: usize, widths: &[usize]) -> Vec<(usize, usize)> {
    let mut prev = input;
    widths
        .iter()
        .map(|&w| {
            let d = (prev, w);
            prev = w;
            d
        })
        .collect()
}

fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| if limit > 0.0 { rng.random_range(-limit..limit) } else { 0.0 })
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

impl FedVIParams {
    /// Glorot-uniform weights and zero biases. The constructor's output
    /// weights are shrunk by `posterior_out_init` so that the posterior
    /// starts close to `N(0, σ0²·I)`.
    pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut blocks = Vec::new();
        for (i, (fi, fo)) in layer_dims(arch.input_dim, &arch.embed_widths).into_iter().enumerate() {
            blocks.push(ParamBlock::new(format!("embed.{i}.weight"), glorot_uniform(rng, fi, fo, 1.0)));
            blocks.push(ParamBlock::new(format!("embed.{i}.bias"), Tensor::zeros(&[fo])));
        }
        let mut widths = arch.posterior_widths.clone();
        widths.push(arch.posterior_out_width());
        let n_post = widths.len();
        for (i, (fi, fo)) in layer_dims(arch.global_dim, &widths).into_iter().enumerate() {
            let gain = if i + 1 == n_post { arch.posterior_out_init } else { 1.0 };
            blocks.push(ParamBlock::new(format!("post.{i}.weight"), glorot_uniform(rng, fi, fo, gain)));
            blocks.push(ParamBlock::new(format!("post.{i}.bias"), Tensor::zeros(&[fo])));
        }
        blocks.push(ParamBlock::new(
            "cls.weight",
            glorot_uniform(rng, arch.global_dim, arch.num_classes, 1.0),
        ));
        blocks.push(ParamBlock::new("cls.bias", Tensor::zeros(&[arch.num_classes])));
        Ok(Self {
            arch: arch.clone(),
            blocks: ParamSet::new(blocks)?,
        })
    }

    /// Validates that `blocks` matches the layout implied by `arch`.
    pub fn from_blocks(arch: ArchConfig, blocks: ParamSet) -> Result<Self, ModelError> {
        arch.validate()?;
        let template = Self::init(&arch, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        if !template.blocks.same_layout(&blocks) {
            return Err(ModelError::Config("parameter blocks do not match the architecture".into()));
        }
        Ok(Self { arch, blocks })
    }

    pub fn layout(&self) -> Layout {
        Layout::of(&self.arch)
    }

    pub fn theta_embed(&self) -> &[ParamBlock] {
        &self.blocks.blocks()[self.layout().embed]
    }

    pub fn theta_post(&self) -> &[ParamBlock] {
        &self.blocks.blocks()[self.layout().post]
    }

    /// Global classifier weight and bias.
    pub fn theta_cls(&self) -> &[ParamBlock] {
        let l = self.layout();
        &self.blocks.blocks()[l.cls_weight..=l.cls_bias]
    }

    /// Output bias of the posterior constructor.
    pub fn posterior_out_bias(&self) -> &Tensor {
        &self.blocks.blocks()[self.layout().post.end - 1].value
    }
}

/// Splits `size` batch positions into a support prefix of
/// `floor(fraction·size)` rows and a query suffix.
pub fn split_support_query(size: usize, fraction: f64) -> Result<(Range<usize>, Range<usize>), ModelError> {
    let s = (fraction * size as f64).floor() as usize;
    if s == 0 || s >= size {
        return Err(ModelError::BatchTooSmall { size });
    }
    Ok((0..s, s..size))
}

/// Columns `[0, G)` are global features, `[G, G + L)` local ones.
pub fn split_features(rep: &Tensor, global_dim: usize) -> Result<(Tensor, Tensor), ModelError> {
    let d = rep.cols();
    Ok((rep.slice_cols(0, global_dim)?, rep.slice_cols(global_dim, d)?))
}
