//! Subcommand implementations. Each writes its outputs under the configured
//! output directory and returns the headline numbers for printing.

use std::fs;
use std::path::{Path, PathBuf};

use fedvi_core::bounds::{bound_holds_check, bound_trial, estimate_slack, pacbayes_rhs};
use fedvi_core::datagen::{
    generate_hierarchical, load_dataset, save_dataset, sidecar_path, FederatedDataset, GenConfig, GroundTruth,
};
use fedvi_core::federation::{check_compatible, evaluate, run_training, stream_rng, TrainConfig, TrainSummary};
use fedvi_core::model::io::{load_params_with_meta, save_params_with_meta};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{DataSource, ExperimentConfig, Origin};
use crate::error::CliError;
use crate::metrics::{rows_from_reports, MetricsWriter};

pub const DATASET_FILE: &str = "dataset.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PARAMS_FILE: &str = "params.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const BOUND_TEXT_FILE: &str = "bound.txt";
pub const BOUND_CSV_FILE: &str = "bound.csv";
pub const EVAL_FILE: &str = "eval.json";

const STREAM_BOUND: u64 = 4;

fn out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    write(path, &(text + "\n"))
}

fn comments(cfg: &ExperimentConfig, kind: &str) -> Vec<String> {
    let mut c = vec![format!("fedvi {kind}")];
    c.extend(cfg.provenance_lines());
    c
}

fn generator(cfg: &ExperimentConfig) -> Result<&GenConfig, CliError> {
    match &cfg.data {
        DataSource::Generate(g) => Ok(g),
        DataSource::File(p) => Err(crate::config::ConfigError::new(
            "data.dataset",
            cfg.provenance.iter().find(|p| p.key == "data.dataset").and_then(|p| p.origin.line()),
            format!("this command needs the synthetic generator, not the dataset file {}", p.display()),
        )
        .into()),
    }
}

fn generate(g: &GenConfig) -> Result<(FederatedDataset, GroundTruth), CliError> {
    Ok(generate_hierarchical(g, &mut ChaCha8Rng::seed_from_u64(g.seed))?)
}

/// Generates or loads the dataset and binds its dimensions to the config.
pub fn load_data(cfg: &mut ExperimentConfig) -> Result<FederatedDataset, CliError> {
    let ds = match &cfg.data {
        DataSource::Generate(g) => generate(g)?.0,
        DataSource::File(p) => load_dataset(p)?,
    };
    cfg.bind_dataset(&ds)?;
    Ok(ds)
}

pub fn cmd_generate(cfg: &mut ExperimentConfig) -> Result<PathBuf, CliError> {
    let g = generator(cfg)?.clone();
    let (ds, _) = generate(&g)?;
    cfg.bind_dataset(&ds)?;
    out_dir(&cfg.out)?;
    let path = cfg.out.join(DATASET_FILE);
    save_dataset(&ds, &path)?;
    write_json(
        &sidecar_path(&path),
        &json!({
            "kind": "dataset",
            "seed": g.seed,
            "generator": g,
            "config": cfg.provenance_json(),
        }),
    )?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub summary: TrainSummary,
    pub dir: PathBuf,
}

fn summary_json(cfg: &ExperimentConfig, train: &TrainConfig, s: &TrainSummary) -> serde_json::Value {
    json!({
        "label": cfg.label,
        "algorithm": train.algorithm.to_string(),
        "seed": train.seed,
        "tau": train.tau,
        "rounds": train.rounds,
        "summary_window": train.summary_window,
        "status": if s.part_acc.is_some() || s.nonpart_acc.is_some() { "ok" } else { "no-data" },
        "rounds_averaged": s.rounds_averaged,
        "part_acc": s.part_acc,
        "nonpart_acc": s.nonpart_acc,
        "gap": s.gap,
        "config": cfg.provenance_json(),
    })
}

/// One training run written to `dir`: metrics, final parameters, summary.
fn train_into(cfg: &ExperimentConfig, ds: &FederatedDataset, dir: &Path) -> Result<TrainSummary, CliError> {
    let outcome = run_training(&cfg.train, &cfg.arch, ds)?;
    out_dir(dir)?;
    let mut w = MetricsWriter::create(&dir.join(METRICS_FILE), &comments(cfg, "metrics"))?;
    for row in rows_from_reports(&outcome.reports, cfg.train.eval_every, cfg.wall_clock) {
        w.append(&row)?;
    }
    w.finish()?;
    let meta = json!({ "label": cfg.label, "seed": cfg.train.seed, "config": cfg.provenance_json() });
    save_params_with_meta(&outcome.state.params, &meta, &dir.join(PARAMS_FILE))?;
    write_json(&dir.join(SUMMARY_FILE), &summary_json(cfg, &cfg.train, &outcome.summary))?;
    Ok(outcome.summary)
}

pub fn cmd_train(cfg: &mut ExperimentConfig) -> Result<TrainRun, CliError> {
    let ds = load_data(cfg)?;
    let summary = train_into(cfg, &ds, &cfg.out)?;
    Ok(TrainRun {
        summary,
        dir: cfg.out.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub tau: f64,
    pub seed: u64,
    pub result: Result<TrainSummary, String>,
}

fn run_config(cfg: &ExperimentConfig, train: TrainConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    for p in &mut c.provenance {
        match p.key.as_str() {
            "train.tau" => p.value = format!("{:?}", train.tau),
            "train.seed" => p.value = train.seed.to_string(),
            _ => continue,
        }
        p.origin = Origin::Ablation;
    }
    c.train = train;
    c
}

/// One training run per τ of the sorted grid (τ = 0 always included), all
/// on the same dataset. With `runs_dir`, each run's files go to its own
/// subdirectory. A failed run is recorded in its row and the sweep goes on.
pub fn run_ablation(cfg: &ExperimentConfig, ds: &FederatedDataset, runs_dir: Option<&Path>) -> Vec<AblationRow> {
    cfg.ablation_grid()
        .into_iter()
        .enumerate()
        .map(|(i, tau)| {
            let run = run_config(cfg, cfg.ablation_train(tau, i));
            let result = match runs_dir {
                Some(dir) => train_into(&run, ds, &dir.join(format!("tau_{i:02}"))),
                None => run_training(&run.train, &run.arch, ds).map(|o| o.summary).map_err(CliError::from),
            };
            AblationRow {
                tau,
                seed: run.train.seed,
                result: result.map_err(|e| e.to_string()),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn ablation_csv(cfg: &ExperimentConfig, rows: &[AblationRow]) -> String {
    let mut s: String = comments(cfg, "ablation").iter().map(|c| format!("# {c}\n")).collect();
    s.push_str("tau,seed,part_acc,nonpart_acc,gap,status\n");
    for r in rows {
        let (p, n, g, status) = match &r.result {
            Ok(x) => (opt(x.part_acc), opt(x.nonpart_acc), opt(x.gap), "ok".to_string()),
            Err(e) => (String::new(), String::new(), String::new(), format!("\"error: {}\"", e.replace('"', "'"))),
        };
        s.push_str(&format!("{:?},{},{p},{n},{g},{status}\n", r.tau, r.seed));
    }
    s
}

pub fn cmd_ablate(cfg: &mut ExperimentConfig) -> Result<Vec<AblationRow>, CliError> {
    let ds = load_data(cfg)?;
    out_dir(&cfg.out)?;
    let rows = run_ablation(cfg, &ds, Some(&cfg.out.join("ablation")));
    write(&cfg.out.join(ABLATION_FILE), &ablation_csv(cfg, &rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub eta: f64,
    pub delta: f64,
    pub empirical_risk: f64,
    /// Local-parameter KL summed over clients.
    pub kl: f64,
    /// Always 0: θ is a point estimate and carries no KL term.
    pub theta_kl: f64,
    pub ln_inv_delta: f64,
    /// `log E exp(η·gap)`, without the `ln(1/δ)` part.
    pub slack: f64,
    pub rhs: f64,
    pub true_risk: f64,
    pub holds_fraction: Option<f64>,
    pub trials: usize,
    pub warning: Option<String>,
}

impl BoundReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("eta", format!("{:?}", self.eta)),
            ("delta", format!("{:?}", self.delta)),
            ("empirical_risk", format!("{:?}", self.empirical_risk)),
            ("kl", format!("{:?}", self.kl)),
            ("theta_kl", format!("{:?}", self.theta_kl)),
            ("ln_inv_delta", format!("{:?}", self.ln_inv_delta)),
            ("slack", format!("{:?}", self.slack)),
            ("rhs", format!("{:?}", self.rhs)),
            ("true_risk", format!("{:?}", self.true_risk)),
            ("holds_fraction", self.holds_fraction.map(|v| format!("{v:?}")).unwrap_or_default()),
            ("trials", self.trials.to_string()),
        ]
    }

    pub fn text(&self, cfg: &ExperimentConfig) -> String {
        let mut s = format!("bound report for {}\n\n", cfg.label);
        for (k, v) in self.fields() {
            s.push_str(&format!("{k:>15} = {v}\n"));
        }
        s.push_str("\ntheta_kl is not modelled: the shared parameters are a point estimate.\n");
        if let Some(w) = &self.warning {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str("\nresolved config:\n");
        for line in cfg.provenance_lines() {
            s.push_str(&format!("  {line}\n"));
        }
        s
    }

    pub fn csv(&self, cfg: &ExperimentConfig) -> String {
        let mut s: String = comments(cfg, "bound").iter().map(|c| format!("# {c}\n")).collect();
        s.push_str("key,value\n");
        for (k, v) in self.fields() {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

/// Estimates the slack for the trained parameters, evaluates the bound on
/// one fresh dataset and, when `bound.trials > 0`, checks how often it holds.
pub fn cmd_bound(cfg: &mut ExperimentConfig, params_path: &Path) -> Result<BoundReport, CliError> {
    let g = generator(cfg)?.clone();
    let (ds, truth) = generate(&g)?;
    cfg.bind_dataset(&ds)?;
    let (params, _) = load_params_with_meta(params_path)?;
    check_compatible(&params.arch, &ds)?;
    let pb = &cfg.bound;
    let slack = estimate_slack(
        &truth,
        &params,
        &params.arch.prior(),
        pb,
        &mut stream_rng(cfg.bound_seed, STREAM_BOUND, 0, 0),
    )?;
    let observed = bound_trial(&truth, &params, pb, slack.log_moment, &mut stream_rng(cfg.bound_seed, STREAM_BOUND, 0, 1))?;
    let check = (cfg.bound_trials > 0)
        .then(|| {
            bound_holds_check(
                &truth,
                &params,
                pb,
                slack.log_moment,
                cfg.bound_trials,
                &mut stream_rng(cfg.bound_seed, STREAM_BOUND, 0, 2),
            )
        })
        .transpose()?;
    let report = BoundReport {
        eta: pb.eta,
        delta: pb.delta,
        empirical_risk: observed.empirical_risk,
        kl: observed.kl,
        theta_kl: 0.0,
        ln_inv_delta: (1.0 / pb.delta).ln(),
        slack: slack.log_moment,
        rhs: pacbayes_rhs(observed.empirical_risk, observed.kl, pb.eta, pb.delta, slack.log_moment),
        true_risk: observed.true_risk,
        holds_fraction: check.map(|c| c.holds_fraction),
        trials: cfg.bound_trials,
        warning: slack.warning,
    };
    out_dir(&cfg.out)?;
    write(&cfg.out.join(BOUND_TEXT_FILE), &report.text(cfg))?;
    write(&cfg.out.join(BOUND_CSV_FILE), &report.csv(cfg))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub part_acc: Option<f64>,
    pub nonpart_acc: Option<f64>,
    pub gap: Option<f64>,
    pub excluded: usize,
}

/// Scores saved parameters on every client's test split.
pub fn cmd_eval(cfg: &mut ExperimentConfig, params_path: &Path) -> Result<EvalReport, CliError> {
    let ds = load_data(cfg)?;
    let (params, meta) = load_params_with_meta(params_path)?;
    check_compatible(&params.arch, &ds)?;
    let part = evaluate(&params, ds.participating(), &cfg.train)?;
    let non = evaluate(&params, ds.holdout(), &cfg.train)?;
    let report = EvalReport {
        part_acc: part.accuracy,
        nonpart_acc: non.accuracy,
        gap: part.accuracy.zip(non.accuracy).map(|(p, n)| p - n),
        excluded: part.excluded + non.excluded,
    };
    out_dir(&cfg.out)?;
    write_json(
        &cfg.out.join(EVAL_FILE),
        &json!({
            "algorithm": cfg.train.algorithm.to_string(),
            "params": params_path.display().to_string(),
            "params_provenance": meta,
            "result": report,
            "config": cfg.provenance_json(),
        }),
    )?;
    Ok(report)
}
