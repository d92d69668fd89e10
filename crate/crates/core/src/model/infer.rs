//! Graph-free forward pass used for evaluation and for recomputing losses
//! independently of the training path.

use std::ops::Range;

use super::{split_support_query, FedVIParams, LossParts, ModelError, PosteriorStats};
use crate::distributions::{kl_diag, DiagGaussian};
use crate::tensor::{dense_forward, relu, softmax_nll, Tensor};

/// Embedding `h(x)` without dropout.
pub fn embed(params: &FedVIParams, x: &Tensor) -> Result<Tensor, ModelError> {
    let blocks = params.theta_embed();
    let n = blocks.len() / 2;
    let mut h = x.clone();
    for i in 0..n {
        h = dense_forward(&h, &blocks[2 * i].value, &blocks[2 * i + 1].value)?;
        if i + 1 < n {
            h = relu(&h);
        }
    }
    Ok(h)
}

/// Posterior from the global features of a support set (rows × G).
pub fn construct_posterior(params: &FedVIParams, support_global: &Tensor) -> Result<PosteriorStats, ModelError> {
    let arch = &params.arch;
    let blocks = params.theta_post();
    let n = blocks.len() / 2;
    let mut h = support_global.clone();
    for i in 0..n {
        h = dense_forward(&h, &blocks[2 * i].value, &blocks[2 * i + 1].value)?;
        if i + 1 < n {
            h = relu(&h);
        }
    }
    let gbar = h.mean_rows()?;
    let g = gbar.data();
    let lk = arch.beta_dim();
    let s0 = arch.prior_scale();
    let mean = g[..lk].iter().map(|v| arch.mean_damp * v).collect();
    let scale = g[lk..2 * lk]
        .iter()
        .map(|v| arch.scale_floor + s0 * (arch.logscale_damp * v).exp())
        .collect();
    Ok(PosteriorStats {
        q: DiagGaussian::new(mean, scale)?,
        b_beta: g[2 * lk..].to_vec(),
    })
}

/// Query logits for a fixed β (length `L·|Y|`, class-major).
pub fn predict_logits(
    params: &FedVIParams,
    beta: &[f64],
    b_beta: &[f64],
    query_global: &Tensor,
    query_local: &Tensor,
) -> Result<Tensor, ModelError> {
    let arch = &params.arch;
    let cls = params.theta_cls();
    let b = Tensor::matrix(arch.num_classes, arch.local_dim, beta.to_vec())?.transpose()?;
    let bias = Tensor::vector(b_beta.to_vec()).add(&cls[1].value)?;
    let s = query_local.matmul(&b)?.add(&query_global.matmul(&cls[0].value)?)?;
    Ok(s.add_row(&bias)?)
}

/// Global-branch logits on every row of `x`.
pub fn global_logits(params: &FedVIParams, x: &Tensor) -> Result<Tensor, ModelError> {
    let h = embed(params, x)?;
    let cls = params.theta_cls();
    Ok(dense_forward(&h.slice_cols(0, params.arch.global_dim)?, &cls[0].value, &cls[1].value)?)
}

/// Pieces of a batch that do not depend on β: query features and the
/// posterior built from the support rows.
#[derive(Debug, Clone)]
pub struct BatchView {
    pub support: Range<usize>,
    pub query: Range<usize>,
    pub query_global: Tensor,
    pub query_local: Tensor,
    pub posterior: PosteriorStats,
}

pub fn batch_view(params: &FedVIParams, x: &Tensor) -> Result<BatchView, ModelError> {
    let arch = &params.arch;
    let (support, query) = split_support_query(x.rows(), arch.support_fraction)?;
    let h = embed(params, x)?;
    let hs = h.select_rows(&support.clone().collect::<Vec<_>>())?;
    let hq = h.select_rows(&query.clone().collect::<Vec<_>>())?;
    let g = arch.global_dim;
    let posterior = construct_posterior(params, &hs.slice_cols(0, g)?)?;
    Ok(BatchView {
        support,
        query,
        query_global: hq.slice_cols(0, g)?,
        query_local: hq.slice_cols(g, arch.repr_dim())?,
        posterior,
    })
}

/// Query logits with β set to the posterior mean.
pub fn predict_query(params: &FedVIParams, x: &Tensor) -> Result<(Range<usize>, Tensor), ModelError> {
    let v = batch_view(params, x)?;
    let logits = predict_logits(params, v.posterior.q.mean(), &v.posterior.b_beta, &v.query_global, &v.query_local)?;
    Ok((v.query, logits))
}

/// Recomputes the training loss terms of one minibatch (no dropout).
pub fn loss_parts(
    params: &FedVIParams,
    x: &Tensor,
    y: &[usize],
    tau: f64,
    noise: &[f64],
) -> Result<LossParts, ModelError> {
    let v = batch_view(params, x)?;
    let beta = v.posterior.q.sample_reparam(noise)?;
    let logits = predict_logits(params, &beta, &v.posterior.b_beta, &v.query_global, &v.query_local)?;
    Ok(LossParts {
        nll: softmax_nll(&logits, &y[v.query])?,
        kl: kl_diag(&v.posterior.q, &params.arch.prior())?,
        kl_weight: tau / y.len() as f64,
    })
}
