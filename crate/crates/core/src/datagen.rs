//! Federated datasets: the hierarchical synthetic generator, a Dirichlet
//! label-skew partitioner and the versioned binary file format.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{softmax_row, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"FVDS";
pub const DATASET_VERSION: u32 = 1;
/// Fraction of each client's rows used for training; the rest is test.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed dataset file: {0}")]
    Malformed(String),
    #[error("dataset version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("cannot assign {samples} samples to {clients} clients")]
    Infeasible { samples: usize, clients: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One client's rows. Rows `[0, train_len)` are training data, the rest
/// test data. Every call to [`ClientDataset::train_split`] is counted so
/// tests can prove holdout clients never train.
#[derive(Debug)]
pub struct ClientDataset {
    id: ClientId,
    x: Tensor,
    y: Vec<usize>,
    train_len: usize,
    train_reads: AtomicUsize,
}

impl Clone for ClientDataset {
    fn clone(&self) -> Self {
        Self {
            id: self.id,
            x: self.x.clone(),
            y: self.y.clone(),
            train_len: self.train_len,
            train_reads: AtomicUsize::new(self.train_reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for ClientDataset {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.x == other.x && self.y == other.y && self.train_len == other.train_len
    }
}

/// Borrowed rows of one split.
#[derive(Debug, Clone)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl ClientDataset {
    pub fn new(id: ClientId, x: Tensor, y: Vec<usize>, train_len: usize) -> Result<Self, DataError> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(DataError::Invalid(format!(
                "client {id}: {} labels for x of shape {:?}",
                y.len(),
                x.shape()
            )));
        }
        if train_len > y.len() {
            return Err(DataError::Invalid(format!(
                "client {id}: train length {train_len} exceeds {} rows",
                y.len()
            )));
        }
        Ok(Self {
            id,
            x,
            y,
            train_len,
            train_reads: AtomicUsize::new(0),
        })
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn train_len(&self) -> usize {
        self.train_len
    }

    pub fn test_len(&self) -> usize {
        self.y.len() - self.train_len
    }

    pub fn train_reads(&self) -> usize {
        self.train_reads.load(Ordering::Relaxed)
    }

    fn rows(&self, start: usize, end: usize) -> Split {
        if start == end {
            return Split {
                x: Tensor::zeros(&[0, self.dim()]),
                y: Vec::new(),
            };
        }
        let idx: Vec<usize> = (start..end).collect();
        Split {
            x: self.x.select_rows(&idx).expect("row range is in bounds"),
            y: self.y[start..end].to_vec(),
        }
    }

    pub fn train_split(&self) -> Split {
        self.train_reads.fetch_add(1, Ordering::Relaxed);
        self.rows(0, self.train_len)
    }

    pub fn test_split(&self) -> Split {
        self.rows(self.train_len, self.len())
    }

    /// Same rows with some labels replaced; used to prove label-free paths.
    pub fn with_labels(&self, y: Vec<usize>) -> Result<Self, DataError> {
        Self::new(self.id, self.x.clone(), y, self.train_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientDataset>,
    pub num_classes: usize,
    /// The first `holdout_count` clients never train.
    pub holdout_count: usize,
}

impl FederatedDataset {
    pub fn new(clients: Vec<ClientDataset>, num_classes: usize, holdout_count: usize) -> Result<Self, DataError> {
        if clients.is_empty() || holdout_count >= clients.len() {
            return Err(DataError::Invalid(format!(
                "holdout count {holdout_count} must be below client count {}",
                clients.len()
            )));
        }
        let mut ids: Vec<ClientId> = clients.iter().map(ClientDataset::id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Invalid("duplicate client ids".into()));
        }
        let dim = clients[0].dim();
        for c in &clients {
            if c.dim() != dim {
                return Err(DataError::Invalid(format!("client {} has input dimension {}", c.id, c.dim())));
            }
            if let Some(&bad) = c.y.iter().find(|&&l| l >= num_classes) {
                return Err(DataError::Invalid(format!("client {} has label {bad} ≥ {num_classes}", c.id)));
            }
        }
        Ok(Self {
            clients,
            num_classes,
            holdout_count,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn holdout(&self) -> &[ClientDataset] {
        &self.clients[..self.holdout_count]
    }

    pub fn participating(&self) -> &[ClientDataset] {
        &self.clients[self.holdout_count..]
    }
}

/// Parameters of the synthetic hierarchical generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Total clients, holdout included.
    pub clients: usize,
    pub holdout: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub sigma_beta: f64,
    pub input_shift_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            clients: 40,
            holdout: 8,
            n_min: 200,
            n_max: 400,
            input_dim: 16,
            num_classes: 5,
            sigma_beta: 2.0,
            input_shift_scale: 1.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Invalid(m));
        if self.clients < 2 {
            return fail(format!("clients = {} must be at least 2", self.clients));
        }
        if self.holdout >= self.clients {
            return fail(format!("holdout = {} must be below clients = {}", self.holdout, self.clients));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return fail(format!("invalid sample range [{}, {}]", self.n_min, self.n_max));
        }
        if self.input_dim < 1 || self.num_classes < 2 {
            return fail("input_dim must be ≥ 1 and num_classes ≥ 2".into());
        }
        if !(self.sigma_beta >= 0.0 && self.input_shift_scale >= 0.0) {
            return fail("sigma_beta and input_shift_scale must be non-negative".into());
        }
        Ok(())
    }
}

/// The generator's latent draws, kept for oracle checks and for sampling
/// fresh data from the same clients.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `[d × |Y|]`.
    pub theta: Tensor,
    /// Per client `[d × |Y|]`.
    pub betas: Vec<Tensor>,
    /// Per client input mean `m_k`.
    pub shifts: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn num_clients(&self) -> usize {
        self.betas.len()
    }

    pub fn input_dim(&self) -> usize {
        self.theta.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.theta.cols()
    }

    /// `softmax((θ + β_k)ᵀ x)`.
    pub fn class_probs(&self, client: usize, x: &[f64]) -> Vec<f64> {
        let k = self.num_classes();
        let beta = &self.betas[client];
        let mut logits = vec![0.0; k];
        for (i, &xi) in x.iter().enumerate() {
            for (j, l) in logits.iter_mut().enumerate() {
                *l += (self.theta.get(i, j) + beta.get(i, j)) * xi;
            }
        }
        softmax_row(&logits)
    }

    pub fn sample_input<R: Rng + ?Sized>(&self, client: usize, rng: &mut R) -> Vec<f64> {
        self.shifts[client]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `n` fresh `(x, y)` rows from client `client`.
    pub fn sample_client<R: Rng + ?Sized>(&self, client: usize, n: usize, rng: &mut R) -> (Tensor, Vec<usize>) {
        let d = self.input_dim();
        let mut xs = Vec::with_capacity(n * d);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.sample_input(client, rng);
            ys.push(sample_categorical(&self.class_probs(client, &x), rng));
            xs.extend(x);
        }
        (Tensor::matrix(n, d, xs).expect("n ≥ 1"), ys)
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn train_len_for(n: usize) -> usize {
    (TRAIN_FRACTION * n as f64).floor() as usize
}

/// Samples the hierarchical process: `θ* ~ N(0, I)`, then per client
/// `β_k* ~ N(0, σ_β² I)`, `m_k ~ N(0, s² I)`, `x ~ N(m_k, I)` and
/// `y ~ Categorical(softmax((θ* + β_k*)ᵀ x))`.
pub fn generate_hierarchical<R: Rng + ?Sized>(
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<(FederatedDataset, GroundTruth), DataError> {
    cfg.validate()?;
    let (d, k) = (cfg.input_dim, cfg.num_classes);
    let theta = normal_matrix(rng, d, k, 1.0);
    let mut truth = GroundTruth {
        theta,
        betas: Vec::with_capacity(cfg.clients),
        shifts: Vec::with_capacity(cfg.clients),
    };
    let mut clients = Vec::with_capacity(cfg.clients);
    for c in 0..cfg.clients {
        truth.betas.push(normal_matrix(rng, d, k, cfg.sigma_beta));
        truth
            .shifts
            .push((0..d).map(|_| cfg.input_shift_scale * rng.sample::<f64, _>(StandardNormal)).collect());
        let n = rng.random_range(cfg.n_min..=cfg.n_max);
        let (x, y) = truth.sample_client(c, n, rng);
        clients.push(ClientDataset::new(ClientId(c as u32), x, y, train_len_for(n))?);
    }
    Ok((FederatedDataset::new(clients, k, cfg.holdout)?, truth))
}

/// Draws class proportions from `Dirichlet(alpha·1)`; sampled in log space
/// so that small `alpha` does not underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = rng.sample(gamma);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    logs.iter().map(|l| (l - max).exp() / z).collect()
}

/// Splits `(x, y)` across `c` clients with Dirichlet label skew.
///
/// Client sizes are balanced (`N / c`, remainder to the first clients).
/// Clients draw one sample at a time in round-robin order; the class is
/// chosen with weight `p_k[class] · remaining[class]`, so the partition
/// is exactly a uniform random split as `alpha → ∞`.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    x: &Tensor,
    y: &[usize],
    c: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<FederatedDataset, DataError> {
    let n = y.len();
    if x.shape().len() != 2 || x.rows() != n {
        return Err(DataError::Invalid(format!("{} labels for x of shape {:?}", n, x.shape())));
    }
    if c == 0 || n < c {
        return Err(DataError::Infeasible { samples: n, clients: c });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::Invalid(format!("alpha = {alpha} must be positive")));
    }
    let k = y.iter().max().map_or(0, |m| m + 1);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in y.iter().enumerate() {
        pools[l].push(i);
    }
    let props: Vec<Vec<f64>> = (0..c).map(|_| sample_dirichlet(alpha, k, rng)).collect();
    let quotas: Vec<usize> = (0..c).map(|i| n / c + usize::from(i < n % c)).collect();
    let mut assigned: Vec<Vec<usize>> = quotas.iter().map(|&q| Vec::with_capacity(q)).collect();

    let mut weights = vec![0.0; k];
    for pass in 0..quotas[0] {
        for client in 0..c {
            if pass >= quotas[client] {
                continue;
            }
            for (cls, w) in weights.iter_mut().enumerate() {
                *w = props[client][cls] * pools[cls].len() as f64;
            }
            if !(weights.iter().sum::<f64>() > 0.0) {
                for (cls, w) in weights.iter_mut().enumerate() {
                    *w = pools[cls].len() as f64;
                }
            }
            let cls = sample_categorical(&weights, rng);
            let pool = &mut pools[cls];
            let pick = rng.random_range(0..pool.len());
            assigned[client].push(pool.swap_remove(pick));
        }
    }

    let mut clients = Vec::with_capacity(c);
    for (i, mut rows) in assigned.into_iter().enumerate() {
        rows.shuffle(rng);
        let cx = x.select_rows(&rows).map_err(|e| DataError::Invalid(e.to_string()))?;
        let cy: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
        let len = cy.len();
        clients.push(ClientDataset::new(ClientId(i as u32), cx, cy, train_len_for(len))?);
    }
    FederatedDataset::new(clients, k, 0)
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Writes the versioned little-endian binary dataset file.
pub fn save_dataset(ds: &FederatedDataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    put_u32(&mut w, DATASET_VERSION)?;
    put_u32(&mut w, ds.num_classes as u32)?;
    put_u32(&mut w, ds.holdout_count as u32)?;
    put_u32(&mut w, ds.clients.len() as u32)?;
    for c in &ds.clients {
        put_u32(&mut w, c.id.0)?;
        put_u64(&mut w, c.len() as u64)?;
        put_u64(&mut w, c.dim() as u64)?;
        put_u64(&mut w, c.train_len as u64)?;
        for v in c.x.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &l in &c.y {
            put_u32(&mut w, l as u32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Path of the JSON provenance file written next to a dataset.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Saves the dataset plus a JSON sidecar holding the generator config.
pub fn save_dataset_with_config(ds: &FederatedDataset, cfg: &GenConfig, path: &Path) -> Result<(), DataError> {
    save_dataset(ds, path)?;
    let json = serde_json::to_string_pretty(cfg).map_err(|e| DataError::Invalid(e.to_string()))?;
    std::fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DataError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DataError::Malformed(format!("truncated while reading {what}")),
            _ => DataError::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.bytes::<8>(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.bytes::<8>(what)?))
    }
}

pub fn load_dataset(path: &Path) -> Result<FederatedDataset, DataError> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    let magic = r.bytes::<4>("magic")?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::Malformed("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let num_classes = r.u32("num_classes")? as usize;
    let holdout = r.u32("holdout")? as usize;
    let count = r.u32("client count")? as usize;
    let mut clients = Vec::new();
    for _ in 0..count {
        let id = ClientId(r.u32("client id")?);
        let n = r.u64("row count")?;
        let d = r.u64("dimension")?;
        let train_len = r.u64("train length")? as usize;
        // Reject sizes the file cannot possibly hold before allocating.
        let need = n.checked_mul(d).and_then(|v| v.checked_mul(8)).unwrap_or(u64::MAX);
        if n == 0 || d == 0 || need > file_len {
            return Err(DataError::Malformed(format!("client {id}: implausible shape {n}×{d}")));
        }
        let (n, d) = (n as usize, d as usize);
        let mut xs = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            xs.push(r.f64("features")?);
        }
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            ys.push(r.u32("labels")? as usize);
        }
        let x = Tensor::matrix(n, d, xs).map_err(|e| DataError::Malformed(e.to_string()))?;
        clients.push(ClientDataset::new(id, x, ys, train_len).map_err(|e| DataError::Malformed(e.to_string()))?);
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(DataError::Malformed("trailing bytes after last client".into()));
    }
    FederatedDataset::new(clients, num_classes, holdout).map_err(|e| DataError::Malformed(e.to_string()))
}
