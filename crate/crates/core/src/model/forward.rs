//! Training forward pass recorded on the autodiff graph.

use rand::{Rng, RngCore};

use super::{split_support_query, ArchConfig, FedVIParams, ModelError, PosteriorStats};
use crate::distributions::{kl_diag_var, sample_reparam_var, DiagGaussian};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Dropout on embedding activations. Masks are drawn from the supplied
/// generator, so training stays reproducible.
pub enum Dropout<'a> {
    Off,
    On { rate: f64, rng: &'a mut dyn RngCore },
}

impl Dropout<'_> {
    fn mask(&mut self, shape: &[usize]) -> Option<Tensor> {
        match self {
            Dropout::On { rate, rng } if *rate > 0.0 => {
                let keep = 1.0 / (1.0 - *rate);
                let mut m = Tensor::zeros(shape);
                for v in m.data_mut() {
                    if rng.random::<f64>() >= *rate {
                        *v = keep;
                    }
                }
                Some(m)
            }
            _ => None,
        }
    }
}

/// The loss terms of one minibatch: `loss = nll + kl_weight · kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub kl: f64,
    pub kl_weight: f64,
}

/// A recorded minibatch loss, ready for [`MinibatchLoss::gradients`].
pub struct MinibatchLoss {
    pub loss: f64,
    pub parts: LossParts,
    /// `None` on the global-only path.
    pub posterior: Option<PosteriorStats>,
    graph: Graph,
    root: Var,
    n_blocks: usize,
}

impl MinibatchLoss {
    /// Gradients for every parameter block in layout order; blocks the
    /// loss does not touch get zeros.
    pub fn gradients(&self, params: &FedVIParams) -> Result<Vec<Tensor>, ModelError> {
        let mut grads = self.graph.backward(self.root)?;
        Ok((0..self.n_blocks)
            .map(|i| {
                grads
                    .take(i)
                    .unwrap_or_else(|| Tensor::zeros(params.blocks.blocks()[i].value.shape()))
            })
            .collect())
    }
}

pub(crate) fn bind(g: &mut Graph, params: &FedVIParams) -> Vec<Var> {
    params
        .blocks
        .blocks()
        .iter()
        .enumerate()
        .map(|(i, b)| g.param(i, b.value.clone()))
        .collect()
}

pub(crate) fn embed_var(
    g: &mut Graph,
    arch: &ArchConfig,
    vars: &[Var],
    x: Var,
    dropout: &mut Dropout<'_>,
) -> Result<Var, ModelError> {
    let n = arch.embed_widths.len();
    let mut h = x;
    for i in 0..n {
        h = g.dense(h, vars[2 * i], vars[2 * i + 1])?;
        if i + 1 < n {
            h = g.relu(h)?;
        }
        if let Some(mask) = dropout.mask(g.value(h).shape()) {
            let m = g.constant(mask);
            h = g.mul(h, m)?;
        }
    }
    Ok(h)
}

pub(crate) struct PosteriorVars {
    pub mean: Var,
    pub scale: Var,
    pub b_beta: Var,
}

pub(crate) fn posterior_var(
    g: &mut Graph,
    arch: &ArchConfig,
    post_vars: &[Var],
    support_global: Var,
) -> Result<PosteriorVars, ModelError> {
    let layers = post_vars.len() / 2;
    let mut h = support_global;
    for i in 0..layers {
        h = g.dense(h, post_vars[2 * i], post_vars[2 * i + 1])?;
        if i + 1 < layers {
            h = g.relu(h)?;
        }
    }
    let gbar = g.mean_rows(h)?;
    let lk = arch.beta_dim();
    let raw_mean = g.slice(gbar, 0, lk)?;
    let mean = g.scale(raw_mean, arch.mean_damp)?;
    let raw_scale = g.slice(gbar, lk, 2 * lk)?;
    let damped = g.scale(raw_scale, arch.logscale_damp)?;
    let e = g.exp(damped)?;
    let s = g.scale(e, arch.prior_scale())?;
    let scale = g.add_scalar(s, arch.scale_floor)?;
    let b_beta = g.slice(gbar, 2 * lk, arch.posterior_out_width())?;
    Ok(PosteriorVars { mean, scale, b_beta })
}

/// `reshape(β, [|Y|, L]) · local + θ_clsᵀ · global + b_β + b_global`,
/// row-wise over the query set.
pub(crate) fn logits_var(
    g: &mut Graph,
    arch: &ArchConfig,
    cls: (Var, Var),
    beta: Var,
    b_beta: Var,
    query_global: Var,
    query_local: Var,
) -> Result<Var, ModelError> {
    let b = g.reshape(beta, &[arch.num_classes, arch.local_dim])?;
    let bt = g.transpose(b)?;
    let local = g.matmul(query_local, bt)?;
    let global = g.matmul(query_global, cls.0)?;
    let sum = g.add(local, global)?;
    let bias = g.add(b_beta, cls.1)?;
    Ok(g.add_row(sum, bias)?)
}

fn posterior_stats(g: &Graph, p: &PosteriorVars) -> Result<PosteriorStats, ModelError> {
    Ok(PosteriorStats {
        q: DiagGaussian::new(g.value(p.mean).data().to_vec(), g.value(p.scale).data().to_vec())?,
        b_beta: g.value(p.b_beta).data().to_vec(),
    })
}

/// FedVI minibatch loss: query NLL plus `(tau / B)·KL(q ‖ prior)`.
///
/// Only query labels are read; `y[support]` never influences the result.
pub fn minibatch_loss(
    params: &FedVIParams,
    x: &Tensor,
    y: &[usize],
    tau: f64,
    noise: &[f64],
    mut dropout: Dropout<'_>,
) -> Result<MinibatchLoss, ModelError> {
    let arch = &params.arch;
    let bsz = y.len();
    if x.shape().len() != 2 || x.rows() != bsz {
        return Err(ModelError::Config(format!("{} labels for batch of shape {:?}", bsz, x.shape())));
    }
    if noise.len() != arch.beta_dim() {
        return Err(ModelError::NoiseLength {
            got: noise.len(),
            expected: arch.beta_dim(),
        });
    }
    let (support, query) = split_support_query(bsz, arch.support_fraction)?;
    let layout = params.layout();

    let mut g = Graph::new();
    let vars = bind(&mut g, params);
    let xv = g.constant(x.clone());
    let h = embed_var(&mut g, arch, &vars, xv, &mut dropout)?;
    let support_idx: Vec<usize> = support.collect();
    let query_idx: Vec<usize> = query.clone().collect();
    let hs = g.select_rows(h, &support_idx)?;
    let hq = g.select_rows(h, &query_idx)?;
    let gdim = arch.global_dim;
    let sg = g.slice_cols(hs, 0, gdim)?;
    let qg = g.slice_cols(hq, 0, gdim)?;
    let ql = g.slice_cols(hq, gdim, arch.repr_dim())?;

    let post = posterior_var(&mut g, arch, &vars[layout.post.clone()], sg)?;
    let beta = sample_reparam_var(&mut g, post.mean, post.scale, noise)?;
    let logits = logits_var(
        &mut g,
        arch,
        (vars[layout.cls_weight], vars[layout.cls_bias]),
        beta,
        post.b_beta,
        qg,
        ql,
    )?;
    let nll = g.softmax_nll(logits, &y[query])?;
    let kl = kl_diag_var(&mut g, post.mean, post.scale, &arch.prior())?;
    let kl_weight = tau / bsz as f64;
    let weighted = g.scale(kl, kl_weight)?;
    let root = g.add(nll, weighted)?;

    let parts = LossParts {
        nll: g.value(nll).item(),
        kl: g.value(kl).item(),
        kl_weight,
    };
    Ok(MinibatchLoss {
        loss: g.value(root).item(),
        parts,
        posterior: Some(posterior_stats(&g, &post)?),
        n_blocks: vars.len(),
        graph: g,
        root,
    })
}

/// Global-branch loss on the whole minibatch (the FedAvg objective).
pub fn global_minibatch_loss(
    params: &FedVIParams,
    x: &Tensor,
    y: &[usize],
    mut dropout: Dropout<'_>,
) -> Result<MinibatchLoss, ModelError> {
    let arch = &params.arch;
    if x.shape().len() != 2 || x.rows() != y.len() || y.is_empty() {
        return Err(ModelError::Config(format!("{} labels for batch of shape {:?}", y.len(), x.shape())));
    }
    let layout = params.layout();
    let mut g = Graph::new();
    let vars = bind(&mut g, params);
    let xv = g.constant(x.clone());
    let h = embed_var(&mut g, arch, &vars, xv, &mut dropout)?;
    let hg = g.slice_cols(h, 0, arch.global_dim)?;
    let logits = g.dense(hg, vars[layout.cls_weight], vars[layout.cls_bias])?;
    let nll = g.softmax_nll(logits, y)?;
    Ok(MinibatchLoss {
        loss: g.value(nll).item(),
        parts: LossParts {
            nll: g.value(nll).item(),
            kl: 0.0,
            kl_weight: 0.0,
        },
        posterior: None,
        n_blocks: vars.len(),
        graph: g,
        root: nll,
    })
}
