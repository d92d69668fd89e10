//! Experiment configuration: a line-oriented `key = value` file with
//! `[section]` headers, resolved against documented defaults.
//!
//! ```text
//! seed = 3
//! label = hetero
//!
//! [data]
//! sigma_beta = 2.0
//!
//! [train]
//! rounds = 200
//! algorithm = fedavg
//! ```
//!
//! Every resolved key is recorded with its origin (file line, flag or
//! default) so outputs can carry a complete reproducibility header.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use fedvi_core::bounds::PacBayesConfig;
use fedvi_core::datagen::{FederatedDataset, GenConfig};
use fedvi_core::federation::{Algorithm, TrainConfig};
use fedvi_core::model::ArchConfig;
use thiserror::Error;

use crate::error::CliError;

const SECTIONS: [&str; 5] = ["data", "arch", "train", "bound", "ablation"];
const GENERATOR_KEYS: [&str; 8] = [
    "clients",
    "holdout",
    "n_min",
    "n_max",
    "input_dim",
    "num_classes",
    "sigma_beta",
    "input_shift_scale",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag(&'static str),
    Default,
    /// Set per run by the τ sweep.
    Ablation,
}

impl Origin {
    pub fn line(self) -> Option<usize> {
        match self {
            Origin::Line(n) => Some(n),
            _ => None,
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag(name) => write!(f, "flag --{name}"),
            Origin::Default => f.write_str("default"),
            Origin::Ablation => f.write_str("ablation grid"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ConfigError {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("config error: ")?;
        if let Some(n) = self.line {
            write!(f, "line {n}: ")?;
        }
        if !self.key.is_empty() {
            write!(f, "{}: ", self.key)?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Generate(GenConfig),
    File(PathBuf),
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub algorithm: Option<Algorithm>,
    pub tau: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub label: String,
    pub out: PathBuf,
    pub data: DataSource,
    /// `input_dim` and `num_classes` stay zero until a dataset file is
    /// checked with [`ExperimentConfig::bind_dataset`].
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Metrics timestamps in wall-clock seconds instead of client steps.
    pub wall_clock: bool,
    pub bound: PacBayesConfig,
    pub bound_trials: usize,
    pub bound_seed: u64,
    pub taus: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

trait Value: Sized {
    const KIND: &'static str;
    fn parse(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($t:ty, $kind:expr) => {
        impl Value for $t {
            const KIND: &'static str = $kind;
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    };
}

from_str_value!(u64, "an unsigned integer");
from_str_value!(usize, "an unsigned integer");
from_str_value!(bool, "true or false");
from_str_value!(String, "a string");
from_str_value!(Algorithm, "fedvi or fedavg");

impl Value for f64 {
    const KIND: &'static str = "a number";
    fn parse(s: &str) -> Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("must be finite".into())
        }
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for PathBuf {
    const KIND: &'static str = "a path";
    fn parse(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            Err("empty path".into())
        } else {
            Ok(PathBuf::from(s))
        }
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl<T: Value> Value for Vec<T> {
    const KIND: &'static str = "a comma-separated list";
    fn parse(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse(p.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(Value::show).collect::<Vec<_>>().join(", ")
    }
}

struct Raw {
    value: String,
    origin: Origin,
}

fn parse_text(text: &str) -> Result<BTreeMap<String, Raw>, ConfigError> {
    let mut raw = BTreeMap::new();
    let mut section = String::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::new("", Some(n), "unterminated section header"))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(ConfigError::new(name, Some(n), "unknown section"));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::new("", Some(n), format!("expected `key = value`, found `{line}`")))?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError::new(k, Some(n), "invalid key"));
        }
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        let entry = Raw {
            value: v.trim().to_string(),
            origin: Origin::Line(n),
        };
        if let Some(prev) = raw.insert(key.clone(), entry) {
            return Err(ConfigError::new(
                key,
                Some(n),
                format!("duplicate key, first set at {}", prev.origin),
            ));
        }
    }
    Ok(raw)
}

struct Resolver {
    raw: BTreeMap<String, Raw>,
    used: BTreeSet<String>,
    provenance: Vec<Provenance>,
}

impl Resolver {
    fn take<T: Value>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        self.used.insert(key.to_string());
        let (value, origin) = match self.raw.get(key) {
            Some(r) => {
                let v = T::parse(&r.value).map_err(|m| {
                    ConfigError::new(key, r.origin.line(), format!("expected {}, got `{}` ({m})", T::KIND, r.value))
                })?;
                (v, r.origin)
            }
            None => (default, Origin::Default),
        };
        self.provenance.push(Provenance {
            key: key.to_string(),
            value: value.show(),
            origin,
        });
        Ok(value)
    }

    fn origin(&self, key: &str) -> Origin {
        self.raw.get(key).map_or(Origin::Default, |r| r.origin)
    }

    fn unknown(&self) -> Option<ConfigError> {
        self.raw
            .iter()
            .filter(|(k, _)| !self.used.contains(*k))
            .min_by_key(|(_, r)| r.origin.line())
            .map(|(k, r)| ConfigError::new(k.as_str(), r.origin.line(), "unknown key"))
    }
}

fn section_error(section: &str, e: impl fmt::Display) -> ConfigError {
    ConfigError::new(format!("[{section}]"), None, e.to_string())
}

impl ExperimentConfig {
    /// Reads and resolves a config file.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Ok(Self::parse(&text, overrides)?)
    }

    /// All defaults, with flag overrides applied.
    pub fn defaults(overrides: &Overrides) -> Result<Self, ConfigError> {
        Self::parse("", overrides)
    }

    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut raw = parse_text(text)?;
        let mut flag = |key: &str, name: &'static str, value: Option<String>| {
            if let Some(value) = value {
                raw.insert(
                    key.to_string(),
                    Raw {
                        value,
                        origin: Origin::Flag(name),
                    },
                );
            }
        };
        flag("seed", "seed", overrides.seed.map(|v| v.to_string()));
        flag("out", "out", overrides.out.as_ref().map(|p| p.display().to_string()));
        flag("train.algorithm", "algorithm", overrides.algorithm.map(|a| a.to_string()));
        flag("train.tau", "tau", overrides.tau.map(|t| format!("{t:?}")));
        // Seeds pinned in the file for data, training or bounds keep their
        // value under --seed.
        let mut r = Resolver {
            raw,
            used: BTreeSet::new(),
            provenance: Vec::new(),
        };

        let seed = r.take("seed", 0u64)?;
        let label = r.take("label", "run".to_string())?;
        let out = r.take("out", PathBuf::from("out"))?;
        // Where results go does not change them; keep it out of the headers
        // so reruns into different directories stay byte-identical.
        r.provenance.pop();

        let dataset: Option<PathBuf> = if r.raw.contains_key("data.dataset") {
            Some(r.take("data.dataset", PathBuf::new())?)
        } else {
            r.used.insert("data.dataset".into());
            None
        };
        let g = GenConfig::default();
        let data_seed = r.take("data.seed", seed)?;
        let data = match dataset {
            Some(path) => {
                if let Some(k) = GENERATOR_KEYS.iter().map(|k| format!("data.{k}")).find(|k| r.raw.contains_key(k)) {
                    return Err(ConfigError::new(
                        k.as_str(),
                        r.origin(&k).line(),
                        "generator keys have no effect when data.dataset is set",
                    ));
                }
                DataSource::File(path)
            }
            None => {
                let gen = GenConfig {
                    clients: r.take("data.clients", g.clients)?,
                    holdout: r.take("data.holdout", g.holdout)?,
                    n_min: r.take("data.n_min", g.n_min)?,
                    n_max: r.take("data.n_max", g.n_max)?,
                    input_dim: r.take("data.input_dim", g.input_dim)?,
                    num_classes: r.take("data.num_classes", g.num_classes)?,
                    sigma_beta: r.take("data.sigma_beta", g.sigma_beta)?,
                    input_shift_scale: r.take("data.input_shift_scale", g.input_shift_scale)?,
                    seed: data_seed,
                };
                gen.validate().map_err(|e| section_error("data", e))?;
                DataSource::Generate(gen)
            }
        };

        let a = ArchConfig::default();
        let (dim_default, class_default) = match &data {
            DataSource::Generate(g) => (g.input_dim, g.num_classes),
            DataSource::File(_) => (0, 0),
        };
        let arch = ArchConfig {
            input_dim: r.take("arch.input_dim", dim_default)?,
            num_classes: r.take("arch.num_classes", class_default)?,
            embed_widths: r.take("arch.embed_widths", a.embed_widths)?,
            local_dim: r.take("arch.local_dim", a.local_dim)?,
            global_dim: r.take("arch.global_dim", a.global_dim)?,
            posterior_widths: r.take("arch.posterior_widths", a.posterior_widths)?,
            support_fraction: r.take("arch.support_fraction", a.support_fraction)?,
            mean_damp: r.take("arch.mean_damp", a.mean_damp)?,
            logscale_damp: r.take("arch.logscale_damp", a.logscale_damp)?,
            scale_floor: r.take("arch.scale_floor", a.scale_floor)?,
            dropout: r.take("arch.dropout", a.dropout)?,
            posterior_out_init: r.take("arch.posterior_out_init", a.posterior_out_init)?,
        };

        let t = TrainConfig::default();
        let train = TrainConfig {
            rounds: r.take("train.rounds", t.rounds)?,
            cohort_size: r.take("train.cohort_size", t.cohort_size)?,
            client_lr: r.take("train.client_lr", t.client_lr)?,
            server_lr: r.take("train.server_lr", t.server_lr)?,
            server_momentum: r.take("train.server_momentum", t.server_momentum)?,
            local_epochs: r.take("train.local_epochs", t.local_epochs)?,
            batch_size: r.take("train.batch_size", t.batch_size)?,
            tau: r.take("train.tau", t.tau)?,
            gamma: r.take("train.gamma", t.gamma)?,
            algorithm: r.take("train.algorithm", t.algorithm)?,
            seed: r.take("train.seed", seed)?,
            eval_every: r.take("train.eval_every", t.eval_every)?,
            summary_window: r.take("train.summary_window", t.summary_window)?,
            parallel: r.take("train.parallel", t.parallel)?,
        };
        train.validate().map_err(|e| section_error("train", e))?;
        let wall_clock = r.take("train.wall_clock", false)?;

        let b = PacBayesConfig::default();
        let bound = PacBayesConfig {
            eta: r.take("bound.eta", b.eta)?,
            delta: r.take("bound.delta", b.delta)?,
            prior_samples: r.take("bound.prior_samples", b.prior_samples)?,
            data_draws: r.take("bound.data_draws", b.data_draws)?,
            samples_per_client: r.take("bound.samples_per_client", b.samples_per_client)?,
            pool_size: r.take("bound.pool_size", b.pool_size)?,
            posterior_samples: r.take("bound.posterior_samples", b.posterior_samples)?,
        };
        bound.validate().map_err(|e| section_error("bound", e))?;
        let bound_trials = r.take("bound.trials", 0usize)?;
        let bound_seed = r.take("bound.seed", seed)?;

        let taus: Vec<f64> = r.take("ablation.taus", vec![0.0, 1e-6, 1e-4, 1e-2, 1.0])?;
        if taus.is_empty() || taus.iter().any(|&t| t < 0.0) {
            return Err(ConfigError::new(
                "ablation.taus",
                r.origin("ablation.taus").line(),
                "must be a non-empty list of non-negative values",
            ));
        }

        if let Some(e) = r.unknown() {
            return Err(e);
        }

        let mut cfg = ExperimentConfig {
            seed,
            label,
            out,
            data,
            arch,
            train,
            wall_clock,
            bound,
            bound_trials,
            bound_seed,
            taus,
            provenance: Vec::new(),
        };
        let origin = |k: &str| r.origin(k);
        if let DataSource::Generate(g) = &cfg.data {
            let participants = g.clients - g.holdout;
            cfg.check_dims(g.input_dim, g.num_classes, &origin)?;
            cfg.check_cohort(participants, &origin, &format!("data.clients = {}, data.holdout = {}", g.clients, g.holdout))?;
            cfg.arch.validate().map_err(|e| section_error("arch", e))?;
        }
        cfg.provenance = r.provenance;
        Ok(cfg)
    }

    fn check_dims(&self, input_dim: usize, num_classes: usize, origin: &dyn Fn(&str) -> Origin) -> Result<(), ConfigError> {
        for (key, declared, actual) in [
            ("arch.input_dim", self.arch.input_dim, input_dim),
            ("arch.num_classes", self.arch.num_classes, num_classes),
        ] {
            let o = origin(key);
            if o != Origin::Default && declared != actual {
                return Err(ConfigError::new(
                    key,
                    o.line(),
                    format!("declared {declared} but the data has {actual}"),
                ));
            }
        }
        Ok(())
    }

    fn check_cohort(&self, participants: usize, origin: &dyn Fn(&str) -> Origin, detail: &str) -> Result<(), ConfigError> {
        if self.train.cohort_size > participants {
            return Err(ConfigError::new(
                "train.cohort_size",
                origin("train.cohort_size").line(),
                format!(
                    "cohort_size = {} exceeds the {participants} participating clients ({detail})",
                    self.train.cohort_size
                ),
            ));
        }
        Ok(())
    }

    fn recorded_origin(&self, key: &str) -> Origin {
        self.provenance.iter().find(|p| p.key == key).map_or(Origin::Default, |p| p.origin)
    }

    /// Checks a loaded dataset against the config and fills in the
    /// architecture's input and class dimensions.
    pub fn bind_dataset(&mut self, ds: &FederatedDataset) -> Result<(), ConfigError> {
        let origin = |k: &str| self.recorded_origin(k);
        self.check_dims(ds.input_dim(), ds.num_classes, &origin)?;
        self.check_cohort(
            ds.participating().len(),
            &origin,
            &format!("dataset has {} clients, {} held out", ds.clients.len(), ds.holdout_count),
        )?;
        self.arch.input_dim = ds.input_dim();
        self.arch.num_classes = ds.num_classes;
        self.arch.validate().map_err(|e| section_error("arch", e))?;
        for p in &mut self.provenance {
            match p.key.as_str() {
                "arch.input_dim" => p.value = ds.input_dim().to_string(),
                "arch.num_classes" => p.value = ds.num_classes.to_string(),
                _ => {}
            }
        }
        Ok(())
    }

    /// `key = value (origin)` for every resolved key.
    pub fn provenance_lines(&self) -> Vec<String> {
        self.provenance
            .iter()
            .map(|p| format!("{} = {} ({})", p.key, p.value, p.origin))
            .collect()
    }

    pub fn provenance_json(&self) -> serde_json::Value {
        self.provenance
            .iter()
            .map(|p| (p.key.clone(), serde_json::Value::String(p.value.clone())))
            .collect::<serde_json::Map<_, _>>()
            .into()
    }

    /// The resolved config as a config file that parses back to itself.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for p in &self.provenance {
            let (section, key) = p.key.split_once('.').unwrap_or(("", &p.key));
            if section != current {
                out.push_str(&format!("\n[{section}]\n"));
                current = section;
            }
            if self.is_unbound_dim(p) {
                continue;
            }
            out.push_str(&format!("{key} = {}\n", p.value));
        }
        out.trim_start().to_string()
    }

    fn is_unbound_dim(&self, p: &Provenance) -> bool {
        matches!(p.key.as_str(), "arch.input_dim" | "arch.num_classes") && p.value == "0"
    }

    /// Training config for the `index`-th entry of the sorted τ grid.
    pub fn ablation_train(&self, tau: f64, index: usize) -> TrainConfig {
        TrainConfig {
            tau,
            seed: self.train.seed.wrapping_add(index as u64),
            ..self.train.clone()
        }
    }

    /// The τ grid sorted ascending with duplicates removed and 0 included.
    pub fn ablation_grid(&self) -> Vec<f64> {
        let mut taus = self.taus.clone();
        taus.push(0.0);
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        taus
    }
}
