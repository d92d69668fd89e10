//! Stateless cross-device rounds: cohort sampling, local gradient descent,
//! pseudo-gradient aggregation with server momentum, and evaluation on
//! participating and holdout clients.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{ClientDataset, ClientId, FederatedDataset};
use crate::distributions::standard_normal_vec;
use crate::model::infer::{global_logits, predict_query};
use crate::model::{global_minibatch_loss, minibatch_loss, ArchConfig, Dropout, FedVIParams, ModelError};
use crate::params::ParamSet;
use crate::tensor::argmax_rows;

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cohort size {m} exceeds the {available} participating clients")]
    CohortTooLarge { m: usize, available: usize },
    #[error("round {round}: no client in the cohort produced an update")]
    EmptyCohort { round: usize },
    #[error("round {round}: parameters became non-finite")]
    NonFinite { round: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedVI,
    FedAvg,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::FedVI => "fedvi",
            Algorithm::FedAvg => "fedavg",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fedvi" => Ok(Algorithm::FedVI),
            "fedavg" => Ok(Algorithm::FedAvg),
            other => Err(format!("unknown algorithm `{other}` (expected fedvi or fedavg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub cohort_size: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub server_momentum: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    /// Weight of the global regularizer; it is identically zero under the
    /// point estimate of θ, so this only scales a zero term.
    pub gamma: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub eval_every: usize,
    /// Number of trailing evaluated rounds averaged in the summary.
    pub summary_window: usize,
    /// Run the clients of a round on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            cohort_size: 8,
            client_lr: 0.005,
            server_lr: 1.0,
            server_momentum: 0.9,
            local_epochs: 1,
            batch_size: 32,
            tau: 1e-4,
            gamma: 0.0,
            algorithm: Algorithm::FedVI,
            seed: 0,
            eval_every: 1,
            summary_window: 100,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let fail = |m: String| Err(FedError::Config(m));
        if self.cohort_size == 0 || self.local_epochs == 0 || self.eval_every == 0 || self.summary_window == 0 {
            return fail("cohort_size, local_epochs, eval_every and summary_window must be positive".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size = {} must be at least 2", self.batch_size));
        }
        if !(self.client_lr > 0.0 && self.client_lr.is_finite()) {
            return fail(format!("client_lr = {} must be positive", self.client_lr));
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return fail(format!("server_lr = {} must be positive", self.server_lr));
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return fail(format!("server_momentum = {} must lie in [0, 1)", self.server_momentum));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail("tau and gamma must be finite and non-negative".into());
        }
        Ok(())
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_COHORT: u64 = 2;
const STREAM_CLIENT: u64 = 3;

/// Independent generator for `(purpose, round, client)`, so a client's
/// randomness does not depend on scheduling order.
pub fn stream_rng(seed: u64, purpose: u64, round: u64, client: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 60) | ((round & 0x0FFF_FFFF) << 32) | (client & 0xFFFF_FFFF));
    rng
}

pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<FedVIParams, FedError> {
    Ok(FedVIParams::init(arch, &mut stream_rng(seed, STREAM_INIT, 0, 0))?)
}

/// `m` distinct ids, uniformly over `m`-subsets, in sampled order.
pub fn sample_cohort<R: Rng + ?Sized>(ids: &[ClientId], m: usize, rng: &mut R) -> Result<Vec<ClientId>, FedError> {
    if m > ids.len() {
        return Err(FedError::CohortTooLarge {
            m,
            available: ids.len(),
        });
    }
    Ok(index::sample(rng, ids.len(), m).into_iter().map(|i| ids[i]).collect())
}

/// Shuffled minibatches over `n` rows for one epoch. A trailing batch with
/// fewer than two rows is dropped.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Inputs of one local step, enough to recompute its loss elsewhere.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub client: ClientId,
    pub params: FedVIParams,
    pub rows: Vec<usize>,
    pub noise: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: ClientId,
    /// `initial − final`.
    pub delta: ParamSet,
    pub weight: f64,
    pub mean_loss: f64,
    pub mean_kl: f64,
    pub steps: usize,
    pub trace: Vec<StepRecord>,
}

/// Local training from a copy of the global parameters. Returns `None` for
/// a client with fewer than two training rows.
pub fn client_update<R: Rng>(
    global: &FedVIParams,
    client: &ClientDataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<ClientUpdate>, FedError> {
    client_update_inner(global, client, cfg, rng, false)
}

/// As [`client_update`], additionally recording every step.
pub fn client_update_traced<R: Rng>(
    global: &FedVIParams,
    client: &ClientDataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<ClientUpdate>, FedError> {
    client_update_inner(global, client, cfg, rng, true)
}

fn client_update_inner<R: Rng>(
    global: &FedVIParams,
    client: &ClientDataset,
    cfg: &TrainConfig,
    rng: &mut R,
    trace: bool,
) -> Result<Option<ClientUpdate>, FedError> {
    if client.train_len() < 2 {
        return Ok(None);
    }
    let train = client.train_split();
    let mut p = global.clone();
    let beta_dim = p.arch.beta_dim();
    let rate = p.arch.dropout;
    let mut records = Vec::new();
    let (mut loss_sum, mut kl_sum, mut steps) = (0.0, 0.0, 0usize);
    for _ in 0..cfg.local_epochs {
        for rows in epoch_batches(train.len(), cfg.batch_size, rng) {
            let x = train.x.select_rows(&rows).map_err(ModelError::from)?;
            let y: Vec<usize> = rows.iter().map(|&i| train.y[i]).collect();
            let out = match cfg.algorithm {
                Algorithm::FedVI => {
                    let noise = standard_normal_vec(rng, beta_dim);
                    let out = minibatch_loss(&p, &x, &y, cfg.tau, &noise, Dropout::On { rate, rng: &mut *rng })?;
                    if trace {
                        records.push(StepRecord {
                            client: client.id(),
                            params: p.clone(),
                            rows: rows.clone(),
                            noise,
                            loss: out.loss,
                        });
                    }
                    out
                }
                Algorithm::FedAvg => global_minibatch_loss(&p, &x, &y, Dropout::On { rate, rng: &mut *rng })?,
            };
            let grads = out.gradients(&p)?;
            p.blocks.set_grads(grads).map_err(ModelError::from)?;
            p.blocks.descend(cfg.client_lr);
            loss_sum += out.loss;
            kl_sum += out.parts.kl;
            steps += 1;
        }
    }
    let delta = global.blocks.difference(&p.blocks).map_err(ModelError::from)?;
    let denom = steps.max(1) as f64;
    Ok(Some(ClientUpdate {
        client: client.id(),
        delta,
        weight: train.len() as f64,
        mean_loss: loss_sum / denom,
        mean_kl: kl_sum / denom,
        steps,
        trace: records,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: FedVIParams,
    pub momentum: ParamSet,
    pub round: usize,
}

impl ServerState {
    pub fn new(params: FedVIParams) -> Self {
        let momentum = params.blocks.zeros_like();
        Self {
            params,
            momentum,
            round: 0,
        }
    }
}

/// `buf ← μ·buf + Σ wᵢ·δᵢ / Σ wᵢ`, then `params ← params − lr·buf`.
/// Deltas are reduced in the order given.
pub fn server_apply(
    state: &mut ServerState,
    deltas: &[&ParamSet],
    weights: &[f64],
    cfg: &TrainConfig,
) -> Result<(), FedError> {
    if deltas.is_empty() || deltas.len() != weights.len() {
        return Err(FedError::EmptyCohort { round: state.round });
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(FedError::Config("aggregation weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut g = state.params.blocks.zeros_like();
    for (d, &w) in deltas.iter().zip(weights) {
        g.axpy(w / total, d).map_err(ModelError::from)?;
    }
    state.momentum.scale(cfg.server_momentum);
    state.momentum.axpy(1.0, &g).map_err(ModelError::from)?;
    state
        .params
        .blocks
        .axpy(-cfg.server_lr, &state.momentum)
        .map_err(ModelError::from)?;
    state.round += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientAccuracy {
    pub client: ClientId,
    pub accuracy: f64,
    /// Local test-set size, used as the averaging weight.
    pub weight: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    /// `None` when every client was excluded.
    pub accuracy: Option<f64>,
    pub per_client: Vec<ClientAccuracy>,
    /// Clients skipped for having fewer than two test rows.
    pub excluded: usize,
}

pub fn weighted_accuracy(per_client: &[ClientAccuracy]) -> Option<f64> {
    let total: usize = per_client.iter().map(|c| c.weight).sum();
    if total == 0 {
        return None;
    }
    let s: f64 = per_client.iter().map(|c| c.accuracy * c.weight as f64).sum();
    Some(s / total as f64)
}

fn client_accuracy(
    params: &FedVIParams,
    client: &ClientDataset,
    batch_size: usize,
    algorithm: Algorithm,
) -> Result<Option<f64>, FedError> {
    let test = client.test_split();
    if test.len() < 2 {
        return Ok(None);
    }
    let (mut correct, mut total) = (0usize, 0usize);
    match algorithm {
        Algorithm::FedAvg => {
            let pred = argmax_rows(&global_logits(params, &test.x)?);
            correct = pred.iter().zip(&test.y).filter(|(p, y)| p == y).count();
            total = test.len();
        }
        Algorithm::FedVI => {
            let rows: Vec<usize> = (0..test.len()).collect();
            for chunk in rows.chunks(batch_size).filter(|c| c.len() >= 2) {
                let x = test.x.select_rows(chunk).map_err(ModelError::from)?;
                let (query, logits) = predict_query(params, &x)?;
                let pred = argmax_rows(&logits);
                let labels = chunk[query].iter().map(|&i| test.y[i]);
                correct += pred.iter().zip(labels).filter(|(p, y)| **p == *y).count();
                total += pred.len();
            }
        }
    }
    Ok(Some(correct as f64 / total as f64))
}

/// Test-set accuracy per client, averaged with weights proportional to
/// local test-set size. FedVI reconstructs each test batch's posterior
/// from that batch's own (unlabeled) support half and scores the query
/// half with β at the posterior mean.
pub fn evaluate<'a>(
    params: &FedVIParams,
    clients: impl IntoIterator<Item = &'a ClientDataset>,
    cfg: &TrainConfig,
) -> Result<EvalResult, FedError> {
    let mut out = EvalResult::default();
    for c in clients {
        match client_accuracy(params, c, cfg.batch_size, cfg.algorithm)? {
            Some(accuracy) => out.per_client.push(ClientAccuracy {
                client: c.id(),
                accuracy,
                weight: c.test_len(),
            }),
            None => out.excluded += 1,
        }
    }
    out.accuracy = weighted_accuracy(&out.per_client);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub cohort: Vec<ClientId>,
    pub mean_loss: f64,
    pub mean_kl: f64,
    pub part_acc: Option<f64>,
    pub nonpart_acc: Option<f64>,
    pub excluded: usize,
    /// Local steps taken by all clients so far; a deterministic clock.
    pub client_steps: u64,
    pub duration: Duration,
}

impl RoundReport {
    pub fn evaluated(&self) -> bool {
        self.part_acc.is_some() || self.nonpart_acc.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TrainSummary {
    pub part_acc: Option<f64>,
    pub nonpart_acc: Option<f64>,
    /// `part_acc − nonpart_acc`.
    pub gap: Option<f64>,
    pub rounds_averaged: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Means over the last `window` evaluated rounds.
pub fn summarize(reports: &[RoundReport], window: usize) -> TrainSummary {
    let evaluated: Vec<&RoundReport> = reports.iter().filter(|r| r.evaluated()).collect();
    let tail = &evaluated[evaluated.len().saturating_sub(window)..];
    let part_acc = mean(tail.iter().filter_map(|r| r.part_acc));
    let nonpart_acc = mean(tail.iter().filter_map(|r| r.nonpart_acc));
    TrainSummary {
        part_acc,
        nonpart_acc,
        gap: part_acc.zip(nonpart_acc).map(|(p, n)| p - n),
        rounds_averaged: tail.len(),
    }
}

pub struct TrainOutcome {
    pub reports: Vec<RoundReport>,
    pub state: ServerState,
    pub summary: TrainSummary,
    /// Every local step in execution order, when tracing was requested.
    pub trace: Vec<StepRecord>,
}

pub fn check_compatible(arch: &ArchConfig, ds: &FederatedDataset) -> Result<(), FedError> {
    arch.validate()?;
    if arch.input_dim != ds.input_dim() || arch.num_classes != ds.num_classes {
        return Err(FedError::Config(format!(
            "architecture expects input_dim {} and {} classes, dataset has {} and {}",
            arch.input_dim,
            arch.num_classes,
            ds.input_dim(),
            ds.num_classes
        )));
    }
    Ok(())
}

/// Full federated training run, a pure function of `(cfg, arch, ds)`.
pub fn run_training(cfg: &TrainConfig, arch: &ArchConfig, ds: &FederatedDataset) -> Result<TrainOutcome, FedError> {
    run(cfg, arch, ds, false)
}

/// [`run_training`] that also records every local step.
pub fn run_training_traced(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    ds: &FederatedDataset,
) -> Result<TrainOutcome, FedError> {
    run(cfg, arch, ds, true)
}

fn run(cfg: &TrainConfig, arch: &ArchConfig, ds: &FederatedDataset, trace: bool) -> Result<TrainOutcome, FedError> {
    cfg.validate()?;
    check_compatible(arch, ds)?;
    let participants = ds.participating();
    if cfg.cohort_size > participants.len() {
        return Err(FedError::CohortTooLarge {
            m: cfg.cohort_size,
            available: participants.len(),
        });
    }
    let ids: Vec<ClientId> = participants.iter().map(ClientDataset::id).collect();
    let mut state = ServerState::new(init_params(arch, cfg.seed)?);
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut records = Vec::new();
    let mut client_steps = 0u64;

    for r in 0..cfg.rounds {
        let start = Instant::now();
        let cohort = sample_cohort(&ids, cfg.cohort_size, &mut stream_rng(cfg.seed, STREAM_COHORT, r as u64, 0))?;
        let members: Vec<&ClientDataset> = cohort
            .iter()
            .map(|id| participants.iter().find(|c| c.id() == *id).expect("cohort drawn from participants"))
            .collect();
        let work = |c: &&ClientDataset| {
            let mut rng = stream_rng(cfg.seed, STREAM_CLIENT, r as u64, u64::from(c.id().0));
            client_update_inner(&state.params, c, cfg, &mut rng, trace)
        };
        let results: Vec<Result<Option<ClientUpdate>, FedError>> = if cfg.parallel {
            members.par_iter().map(work).collect()
        } else {
            members.iter().map(work).collect()
        };
        let mut updates = Vec::with_capacity(results.len());
        for res in results {
            if let Some(u) = res? {
                updates.push(u);
            }
        }
        if updates.is_empty() {
            return Err(FedError::EmptyCohort { round: r });
        }
        updates.sort_by_key(|u| u.client);
        let deltas: Vec<&ParamSet> = updates.iter().map(|u| &u.delta).collect();
        let weights: Vec<f64> = updates.iter().map(|u| u.weight).collect();
        server_apply(&mut state, &deltas, &weights, cfg)?;
        if !state.params.blocks.all_finite() {
            return Err(FedError::NonFinite { round: r });
        }
        client_steps += updates.iter().map(|u| u.steps as u64).sum::<u64>();
        let mean_loss = updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64;
        let mean_kl = updates.iter().map(|u| u.mean_kl).sum::<f64>() / updates.len() as f64;
        if trace {
            for u in &mut updates {
                records.append(&mut u.trace);
            }
        }

        let (mut part_acc, mut nonpart_acc, mut excluded) = (None, None, 0);
        if (r + 1) % cfg.eval_every == 0 || r + 1 == cfg.rounds {
            let part = evaluate(&state.params, participants, cfg)?;
            let non = evaluate(&state.params, ds.holdout(), cfg)?;
            part_acc = part.accuracy;
            nonpart_acc = non.accuracy;
            excluded = part.excluded + non.excluded;
        }
        reports.push(RoundReport {
            round: r,
            cohort,
            mean_loss,
            mean_kl,
            part_acc,
            nonpart_acc,
            excluded,
            client_steps,
            duration: start.elapsed(),
        });
    }
    let summary = summarize(&reports, cfg.summary_window);
    Ok(TrainOutcome {
        reports,
        state,
        summary,
        trace: records,
    })
}
