//! Loss-decomposition audit and a Monte-Carlo PAC-Bayes bound for the
//! synthetic generator, with θ held at its trained point estimate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClientId, FederatedDataset, GroundTruth};
use crate::distributions::{kl_diag, standard_normal_vec, DiagGaussian};
use crate::federation::StepRecord;
use crate::model::infer::{construct_posterior, embed, loss_parts};
use crate::model::{FedVIParams, ModelError};
use crate::tensor::{log_softmax_row, Tensor};

/// Terms of the variational objective accumulated over a set of steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElboReport {
    pub expected_loss: f64,
    /// Always zero: θ is a point estimate under a flat prior.
    pub global_reg: f64,
    /// Per client, `Σ_batches KL(q ‖ prior) / batch size`.
    pub local_regs: Vec<(ClientId, f64)>,
    pub tau: f64,
    pub gamma: f64,
    pub total: f64,
}

/// Recomputes every recorded step on the graph-free path and splits the
/// accumulated loss into its expected-loss and regularizer terms.
pub fn elbo_components(
    ds: &FederatedDataset,
    records: &[StepRecord],
    tau: f64,
    gamma: f64,
) -> Result<ElboReport, ModelError> {
    let mut expected_loss = 0.0;
    let mut local_regs: Vec<(ClientId, f64)> = Vec::new();
    for rec in records {
        let client = ds
            .clients
            .iter()
            .find(|c| c.id() == rec.client)
            .ok_or_else(|| ModelError::Config(format!("record refers to unknown client {}", rec.client)))?;
        if rec.rows.iter().any(|&r| r >= client.train_len()) {
            return Err(ModelError::Config(format!("record for client {} reads outside its training rows", rec.client)));
        }
        let x = client.x().select_rows(&rec.rows)?;
        let y: Vec<usize> = rec.rows.iter().map(|&i| client.y()[i]).collect();
        let parts = loss_parts(&rec.params, &x, &y, tau, &rec.noise)?;
        expected_loss += parts.nll;
        let reg = parts.kl / rec.rows.len() as f64;
        match local_regs.iter_mut().find(|(id, _)| *id == rec.client) {
            Some((_, v)) => *v += reg,
            None => local_regs.push((rec.client, reg)),
        }
    }
    local_regs.sort_by_key(|(id, _)| *id);
    let global_reg = 0.0;
    let total = expected_loss + gamma * global_reg + tau * local_regs.iter().map(|(_, v)| v).sum::<f64>();
    Ok(ElboReport {
        expected_loss,
        global_reg,
        local_regs,
        tau,
        gamma,
        total,
    })
}

/// Records for a fixed parameter vector: each listed client's training rows
/// in order, cut into batches of `batch_size` (a trailing batch with fewer
/// than two rows is dropped), with fresh noise per batch.
pub fn fixed_records<R: Rng + ?Sized>(
    params: &FedVIParams,
    ds: &FederatedDataset,
    clients: &[ClientId],
    batch_size: usize,
    rng: &mut R,
) -> Vec<StepRecord> {
    let mut out = Vec::new();
    for id in clients {
        let Some(c) = ds.clients.iter().find(|c| c.id() == *id) else { continue };
        let rows: Vec<usize> = (0..c.train_len()).collect();
        for chunk in rows.chunks(batch_size.max(2)).filter(|c| c.len() >= 2) {
            out.push(StepRecord {
                client: *id,
                params: params.clone(),
                rows: chunk.to_vec(),
                noise: standard_normal_vec(rng, params.arch.beta_dim()),
                loss: f64::NAN,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacBayesConfig {
    pub eta: f64,
    pub delta: f64,
    /// Prior draws used by the slack estimator.
    pub prior_samples: usize,
    /// Dataset draws used by the slack estimator.
    pub data_draws: usize,
    /// Rows per client in one dataset.
    pub samples_per_client: usize,
    /// Fresh rows per client used to approximate true risks.
    pub pool_size: usize,
    /// Posterior draws for expectations over `q`.
    pub posterior_samples: usize,
}

impl Default for PacBayesConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            delta: 0.05,
            prior_samples: 1000,
            data_draws: 1000,
            samples_per_client: 200,
            pool_size: 10_000,
            posterior_samples: 100,
        }
    }
}

impl PacBayesConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(ModelError::Config(format!("eta = {} must be positive", self.eta)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(ModelError::Config(format!("delta = {} must lie in (0, 1]", self.delta)));
        }
        if self.prior_samples == 0
            || self.data_draws == 0
            || self.samples_per_client < 2
            || self.pool_size < self.samples_per_client
            || self.posterior_samples == 0
        {
            return Err(ModelError::Config(
                "sample counts must be positive, samples_per_client ≥ 2 and pool_size ≥ samples_per_client".into(),
            ));
        }
        Ok(())
    }
}

/// `emp + (kl + ln(1/δ) + slack) / η`.
pub fn pacbayes_rhs(empirical_risk: f64, kl: f64, eta: f64, delta: f64, slack: f64) -> f64 {
    empirical_risk + (kl + (1.0 / delta).ln() + slack) / eta
}

/// Everything about one client dataset that does not depend on β: local
/// features, the β-free part of the logits, and labels. The β-free part
/// includes `b_β`, reconstructed from the dataset's own inputs.
#[derive(Debug, Clone)]
pub struct ClientFeatures {
    pub local: Tensor,
    pub offset: Tensor,
    pub y: Vec<usize>,
    pub posterior: DiagGaussian,
}

pub fn client_features(params: &FedVIParams, x: &Tensor, y: &[usize]) -> Result<ClientFeatures, ModelError> {
    let arch = &params.arch;
    let h = embed(params, x)?;
    let hg = h.slice_cols(0, arch.global_dim)?;
    let post = construct_posterior(params, &hg)?;
    let cls = params.theta_cls();
    let bias = Tensor::vector(post.b_beta.clone()).add(&cls[1].value)?;
    Ok(ClientFeatures {
        local: h.slice_cols(arch.global_dim, arch.repr_dim())?,
        offset: hg.matmul(&cls[0].value)?.add_row(&bias)?,
        y: y.to_vec(),
        posterior: post.q,
    })
}

fn row_log_probs(f: &ClientFeatures, beta: &[f64], i: usize, logits: &mut [f64]) -> Vec<f64> {
    let l = f.local.cols();
    let xi = f.local.row(i);
    for (k, out) in logits.iter_mut().enumerate() {
        let w = &beta[k * l..(k + 1) * l];
        *out = f.offset.get(i, k) + xi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    }
    log_softmax_row(logits)
}

/// Mean per-datum negative log-likelihood under a fixed β.
pub fn mean_nll(f: &ClientFeatures, beta: &[f64]) -> f64 {
    let mut logits = vec![0.0; f.offset.cols()];
    let total: f64 = (0..f.y.len())
        .map(|i| -row_log_probs(f, beta, i, &mut logits)[f.y[i]])
        .sum();
    total / f.y.len() as f64
}

/// Mean per-datum `−log E_β p(y | x, β)` over the given draws of β.
pub fn mean_predictive_nll(f: &ClientFeatures, betas: &[Vec<f64>]) -> f64 {
    let mut logits = vec![0.0; f.offset.cols()];
    let ln_s = (betas.len() as f64).ln();
    let mut total = 0.0;
    let mut lps = vec![0.0; betas.len()];
    for i in 0..f.y.len() {
        for (lp, b) in lps.iter_mut().zip(betas) {
            *lp = row_log_probs(f, b, i, &mut logits)[f.y[i]];
        }
        total -= log_sum_exp(&lps) - ln_s;
    }
    total / f.y.len() as f64
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `n` rows per dataset; pools of `pool` rows are cut into such datasets
/// so that `b_β` is always reconstructed from a dataset-sized support.
fn draw_features<R: Rng + ?Sized>(
    params: &FedVIParams,
    truth: &GroundTruth,
    client: usize,
    n: usize,
    rng: &mut R,
) -> Result<ClientFeatures, ModelError> {
    let (x, y) = truth.sample_client(client, n, rng);
    client_features(params, &x, &y)
}

fn draw_pool<R: Rng + ?Sized>(
    params: &FedVIParams,
    truth: &GroundTruth,
    client: usize,
    n: usize,
    pool: usize,
    rng: &mut R,
) -> Result<Vec<ClientFeatures>, ModelError> {
    (0..pool.div_ceil(n))
        .map(|_| draw_features(params, truth, client, n, rng))
        .collect()
}

fn pool_mean_nll(pool: &[ClientFeatures], beta: &[f64]) -> f64 {
    pool.iter().map(|f| mean_nll(f, beta)).sum::<f64>() / pool.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlackEstimate {
    /// `log((1/δ)·mean exp(η·gap))`.
    pub value: f64,
    /// `log mean exp(η·gap)`, i.e. `value − ln(1/δ)`.
    pub log_moment: f64,
    /// Share of the Monte-Carlo sum carried by its single largest term.
    pub max_weight: f64,
    pub warning: Option<String>,
}

/// `log mean exp(η·gap)` with its largest-term weight.
pub fn log_moment_from_gaps(gaps: &[f64], eta: f64) -> (f64, f64) {
    let scaled: Vec<f64> = gaps.iter().map(|g| eta * g).collect();
    let lse = log_sum_exp(&scaled);
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lse - (gaps.len() as f64).ln(), (max - lse).exp())
}

/// Monte-Carlo estimate of `log((1/δ)·E_data E_prior exp(η·(R − R̂)))`
/// where `R` is the true per-datum risk averaged over the generator's
/// clients and `R̂` the empirical one on a fresh dataset.
pub fn estimate_slack<R: Rng + ?Sized>(
    truth: &GroundTruth,
    params: &FedVIParams,
    prior: &DiagGaussian,
    cfg: &PacBayesConfig,
    rng: &mut R,
) -> Result<SlackEstimate, ModelError> {
    cfg.validate()?;
    let c = truth.num_clients();
    let n = cfg.samples_per_client;
    let pools = (0..c)
        .map(|k| draw_pool(params, truth, k, n, cfg.pool_size, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let draws = (0..cfg.data_draws)
        .map(|_| (0..c).map(|k| draw_features(params, truth, k, n, rng)).collect())
        .collect::<Result<Vec<Vec<ClientFeatures>>, _>>()?;
    let priors: Vec<Vec<Vec<f64>>> = (0..cfg.prior_samples)
        .map(|_| (0..c).map(|_| prior.sample(rng)).collect())
        .collect();

    let gaps: Vec<f64> = priors
        .par_iter()
        .flat_map_iter(|betas| {
            let truth_risk: f64 = pools.iter().zip(betas).map(|(p, b)| pool_mean_nll(p, b)).sum::<f64>() / c as f64;
            draws.iter().map(move |d| {
                let emp: f64 = d.iter().zip(betas).map(|(f, b)| mean_nll(f, b)).sum::<f64>() / c as f64;
                truth_risk - emp
            })
        })
        .collect();
    Ok(slack_from_gaps(&gaps, cfg.eta, cfg.delta))
}

/// Builds the estimate from precomputed gaps; an overflowing or otherwise
/// non-finite moment is reported as `+∞` with a warning.
pub fn slack_from_gaps(gaps: &[f64], eta: f64, delta: f64) -> SlackEstimate {
    let ln_inv_delta = (1.0 / delta).ln();
    let (log_moment, max_weight) = log_moment_from_gaps(gaps, eta);
    if !log_moment.is_finite() {
        return SlackEstimate {
            value: f64::INFINITY,
            log_moment: f64::INFINITY,
            max_weight: 1.0,
            warning: Some("exponential moment diverged; the slack term is not finite at this eta".into()),
        };
    }
    let warning = (max_weight > 0.5).then(|| {
        format!("heavy tail: one sample carries {:.0}% of the exponential moment", 100.0 * max_weight)
    });
    SlackEstimate {
        value: ln_inv_delta + log_moment,
        log_moment,
        max_weight,
        warning,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundTrial {
    pub true_risk: f64,
    pub empirical_risk: f64,
    pub kl: f64,
    pub rhs: f64,
}

impl BoundTrial {
    pub fn holds(&self) -> bool {
        self.rhs >= self.true_risk
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    /// 1.0 when no trials were run.
    pub holds_fraction: f64,
    pub trials: Vec<BoundTrial>,
}

/// One draw of the bound: a fresh dataset, posteriors reconstructed from it,
/// the right-hand side, and the true risk of the Bayes predictive.
pub fn bound_trial<R: Rng + ?Sized>(
    truth: &GroundTruth,
    params: &FedVIParams,
    cfg: &PacBayesConfig,
    log_moment: f64,
    rng: &mut R,
) -> Result<BoundTrial, ModelError> {
    let prior = params.arch.prior();
    let c = truth.num_clients();
    let n = cfg.samples_per_client;
    let (mut emp, mut kl, mut true_risk) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let f = draw_features(params, truth, k, n, rng)?;
        let betas: Vec<Vec<f64>> = (0..cfg.posterior_samples).map(|_| f.posterior.sample(rng)).collect();
        emp += betas.iter().map(|b| mean_nll(&f, b)).sum::<f64>() / betas.len() as f64;
        kl += kl_diag(&f.posterior, &prior)?;
        let pool = draw_pool(params, truth, k, n, cfg.pool_size, rng)?;
        true_risk += pool.iter().map(|p| mean_predictive_nll(p, &betas)).sum::<f64>() / pool.len() as f64;
    }
    let (emp, true_risk) = (emp / c as f64, true_risk / c as f64);
    Ok(BoundTrial {
        true_risk,
        empirical_risk: emp,
        kl,
        rhs: pacbayes_rhs(emp, kl, cfg.eta, cfg.delta, log_moment),
    })
}

/// Fraction of independent trials in which the bound's right-hand side
/// covers the true risk. Trials run in parallel on per-trial generators
/// seeded from `rng`.
pub fn bound_holds_check<R: Rng + ?Sized>(
    truth: &GroundTruth,
    params: &FedVIParams,
    cfg: &PacBayesConfig,
    log_moment: f64,
    trials: usize,
    rng: &mut R,
) -> Result<BoundCheck, ModelError> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..trials).map(|_| rng.random()).collect();
    let results = seeds
        .par_iter()
        .map(|&s| bound_trial(truth, params, cfg, log_moment, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect::<Result<Vec<_>, _>>()?;
    let holds_fraction = if results.is_empty() {
        1.0
    } else {
        results.iter().filter(|t| t.holds()).count() as f64 / results.len() as f64
    };
    Ok(BoundCheck {
        holds_fraction,
        trials: results,
    })
}
