use std::path::Path;
use std::process::Command;

use fedvi_cli::commands::{
    ablation_csv, cmd_ablate, cmd_bound, cmd_eval, cmd_generate, cmd_train, load_data, run_ablation, METRICS_FILE,
    PARAMS_FILE, SUMMARY_FILE,
};
use fedvi_cli::config::{Origin, Overrides};
use fedvi_cli::metrics::{read_metrics, MetricsWriter, METRICS_HEADER};
use fedvi_cli::{CliError, DataSource, ExperimentConfig};
use fedvi_core::bounds::PacBayesConfig;
use fedvi_core::datagen::GenConfig;
use fedvi_core::federation::{Algorithm, TrainConfig};
use fedvi_core::model::ArchConfig;

const SMALL: &str = "\
seed = 1
label = small

[data]
clients = 6
holdout = 2
n_min = 30
n_max = 40
input_dim = 4
num_classes = 3

[arch]
embed_widths = 8, 5
local_dim = 2
global_dim = 3
posterior_widths = 8

[train]
rounds = 4
cohort_size = 2
batch_size = 8
summary_window = 2

[bound]
prior_samples = 20
data_draws = 20
samples_per_client = 30
pool_size = 200
posterior_samples = 10
trials = 3

[ablation]
taus = 1e-2, 0
";

fn small(out: &Path, extra: &str) -> ExperimentConfig {
    let ov = Overrides {
        out: Some(out.to_path_buf()),
        ..Overrides::default()
    };
    ExperimentConfig::parse(&format!("{SMALL}{extra}"), &ov).unwrap()
}

fn with_train(extra: &str) -> String {
    SMALL.replace("[train]\n", &format!("[train]\n{extra}\n"))
}

fn config_err(text: &str) -> fedvi_cli::ConfigError {
    ExperimentConfig::parse(text, &Overrides::default()).unwrap_err()
}

#[test]
fn seed_only_file_gets_all_defaults() {
    let cfg = ExperimentConfig::parse("seed = 9\n", &Overrides::default()).unwrap();
    assert_eq!(cfg.seed, 9);
    let DataSource::Generate(g) = &cfg.data else { panic!("expected generator") };
    assert_eq!(g, &GenConfig { seed: 9, ..GenConfig::default() });
    assert_eq!(cfg.train, TrainConfig { seed: 9, ..TrainConfig::default() });
    assert_eq!(cfg.arch, ArchConfig::default());
    assert_eq!(cfg.bound, PacBayesConfig::default());
    assert_eq!(cfg.taus, vec![0.0, 1e-6, 1e-4, 1e-2, 1.0]);
    let seed = cfg.provenance.iter().find(|p| p.key == "seed").unwrap();
    assert_eq!(seed.origin, Origin::Line(1));
    assert!(cfg.provenance.iter().filter(|p| p.key != "seed").all(|p| p.origin == Origin::Default));
    assert!(cfg.provenance_lines().iter().any(|l| l == "train.batch_size = 32 (default)"));
}

#[test]
fn explicit_optimizer_values_round_trip() {
    let text = "seed = 4\n[train]\ntau = 1e-9\nclient_lr = 0.02\nserver_lr = 3.0\nserver_momentum = 0.9\nrounds = 1500\nbatch_size = 256\n";
    let cfg = ExperimentConfig::parse(text, &Overrides::default()).unwrap();
    assert_eq!(cfg.train.tau, 1e-9);
    assert_eq!(cfg.train.client_lr, 0.02);
    assert_eq!(cfg.train.server_lr, 3.0);
    assert_eq!(cfg.train.server_momentum, 0.9);
    assert_eq!(cfg.train.rounds, 1500);
    assert_eq!(cfg.train.batch_size, 256);
    let again = ExperimentConfig::parse(&cfg.render(), &Overrides::default()).unwrap();
    assert_eq!(again.train, cfg.train);
    assert_eq!(again.data, cfg.data);
    assert_eq!(again.arch, cfg.arch);
    assert_eq!(again.bound, cfg.bound);
    assert_eq!(again.render(), cfg.render());
}

#[test]
fn cohort_larger_than_participants_names_both_values() {
    let e = config_err("[data]\nclients = 10\nholdout = 2\n[train]\ncohort_size = 9\n");
    assert_eq!(e.key, "train.cohort_size");
    assert_eq!(e.line, Some(5));
    assert!(e.message.contains("cohort_size = 9") && e.message.contains("8 participating"), "{e}");
}

#[test]
fn errors_carry_key_and_line() {
    let e = config_err("seed = 1\n[train]\nrounds = 3\nlearning_rate = 0.1\n");
    assert_eq!((e.key.as_str(), e.line), ("train.learning_rate", Some(4)));
    assert!(e.message.contains("unknown key"));

    let e = config_err("\n[train]\nrounds = many\n");
    assert_eq!((e.key.as_str(), e.line), ("train.rounds", Some(3)));
    assert!(e.to_string().contains("line 3") && e.to_string().contains("unsigned integer"));

    let e = config_err("[model]\n");
    assert_eq!(e.line, Some(1));

    let e = config_err("[train]\ntau = 1\ntau = 2\n");
    assert_eq!((e.key.as_str(), e.line), ("train.tau", Some(3)));

    let e = config_err("[train]\nalgorithm = sgd\n");
    assert_eq!(e.key, "train.algorithm");

    let e = config_err("[data]\ndataset = d.bin\nclients = 4\n");
    assert_eq!((e.key.as_str(), e.line), ("data.clients", Some(3)));

    let e = config_err("[data]\nnum_classes = 4\n[arch]\nnum_classes = 5\n");
    assert_eq!((e.key.as_str(), e.line), ("arch.num_classes", Some(4)));

    let e = config_err("just words\n");
    assert_eq!(e.line, Some(1));
}

#[test]
fn flags_override_file_values() {
    let ov = Overrides {
        seed: Some(77),
        algorithm: Some(Algorithm::FedAvg),
        tau: Some(0.5),
        out: None,
    };
    let cfg = ExperimentConfig::parse("seed = 3\n[train]\ntau = 1e-3\n", &ov).unwrap();
    assert_eq!(cfg.seed, 77);
    assert_eq!(cfg.train.seed, 77);
    assert_eq!(cfg.train.algorithm, Algorithm::FedAvg);
    assert_eq!(cfg.train.tau, 0.5);
    let tau = cfg.provenance.iter().find(|p| p.key == "train.tau").unwrap();
    assert_eq!(tau.origin, Origin::Flag("tau"));
    let pinned = ExperimentConfig::parse("[train]\nseed = 5\n", &ov).unwrap();
    assert_eq!((pinned.seed, pinned.train.seed), (77, 5));
}

#[test]
fn zero_rounds_gives_header_only_and_no_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), "");
    cfg.train.rounds = 0;
    let run = cmd_train(&mut cfg).unwrap();
    assert_eq!(run.summary.part_acc, None);
    let (comments, rows) = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert!(rows.is_empty());
    assert!(comments.iter().any(|c| c.starts_with("seed = 1")));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["status"], "no-data");
    assert!(summary["part_acc"].is_null());
    assert_eq!(summary["config"]["train.batch_size"], "8");
}

#[test]
fn training_is_byte_identical_and_schedule_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    cmd_train(&mut small(a.path(), "")).unwrap();
    cmd_train(&mut small(b.path(), "")).unwrap();
    let read = |d: &Path| std::fs::read(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(std::fs::read(a.path().join(PARAMS_FILE)).unwrap(), std::fs::read(b.path().join(PARAMS_FILE)).unwrap());

    let mut seq = ExperimentConfig::parse(&with_train("parallel = false"), &Overrides::default()).unwrap();
    seq.out = c.path().to_path_buf();
    cmd_train(&mut seq).unwrap();
    let (_, rows_par) = read_metrics(&a.path().join(METRICS_FILE)).unwrap();
    let (_, rows_seq) = read_metrics(&c.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows_par, rows_seq);
    assert_eq!(rows_par.len(), 4);
}

#[test]
fn eval_reproduces_the_last_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), "");
    cmd_train(&mut cfg).unwrap();
    let (_, rows) = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    let last = rows.last().unwrap();
    let r = cmd_eval(&mut small(dir.path(), ""), &dir.path().join(PARAMS_FILE)).unwrap();
    assert_eq!(r.part_acc, last.part_acc);
    assert_eq!(r.nonpart_acc, last.nonpart_acc);
}

#[test]
fn dataset_file_trains_like_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let gen_dir = dir.path().join("gen");
    let path = cmd_generate(&mut small(&gen_dir, "")).unwrap();
    assert!(path.with_extension("bin.json").exists());

    let mut direct = small(&dir.path().join("direct"), "");
    cmd_train(&mut direct).unwrap();

    let from_file = SMALL
        .lines()
        .filter(|l| !["clients", "holdout", "n_min", "n_max", "input_dim", "num_classes"].iter().any(|k| l.starts_with(k)))
        .collect::<Vec<_>>()
        .join("\n")
        .replace("[data]", &format!("[data]\ndataset = {}", path.display()));
    let mut cfg = ExperimentConfig::parse(&from_file, &Overrides::default()).unwrap();
    cfg.out = dir.path().join("file");
    assert_eq!(cfg.arch.num_classes, 0);
    cmd_train(&mut cfg).unwrap();
    assert_eq!(cfg.arch.num_classes, 3);

    let (_, a) = read_metrics(&dir.path().join("direct").join(METRICS_FILE)).unwrap();
    let (_, b) = read_metrics(&dir.path().join("file").join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    let rendered = cfg.render();
    assert!(rendered.contains("num_classes = 3"));
}

#[test]
fn metrics_reader_rejects_other_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, "# x\nround,loss,acc\n1,2,3\n").unwrap();
    assert!(matches!(read_metrics(&path), Err(CliError::Format(_))));
    std::fs::write(&path, "# only comments\n").unwrap();
    assert!(read_metrics(&path).is_err());
    std::fs::write(&path, format!("{METRICS_HEADER}\n0,1.5,0.5,,2\n")).unwrap();
    assert!(read_metrics(&path).is_err());

    let w = MetricsWriter::create(&path, &["a = b".to_string()]).unwrap();
    w.finish().unwrap();
    let (comments, rows) = read_metrics(&path).unwrap();
    assert_eq!(comments, vec!["a = b".to_string()]);
    assert!(rows.is_empty());
}

#[test]
fn ablation_grid_is_sorted_and_keeps_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "");
    assert_eq!(cfg.ablation_grid(), vec![0.0, 1e-2]);

    let mut only_zero = small(dir.path(), "");
    only_zero.taus = vec![0.0];
    let ds = load_data(&mut only_zero).unwrap();
    let rows = run_ablation(&only_zero, &ds, None);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].tau, 0.0);

    let mut no_zero = small(dir.path(), "");
    no_zero.taus = vec![1.0];
    assert_eq!(no_zero.ablation_grid(), vec![0.0, 1.0]);

    // An absurd KL weight blows up; the τ = 0 run must survive it.
    let mut failing = small(dir.path(), "");
    failing.taus = vec![1e300];
    let rows = cmd_ablate(&mut failing).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].result.is_ok());
    assert!(rows[1].result.is_err());
    assert_ne!(rows[0].seed, rows[1].seed);
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv, ablation_csv(&failing, &rows));
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "tau,seed,part_acc,nonpart_acc,gap,status");
    assert!(body[1].starts_with("0.0,") && body[1].ends_with(",ok"));
    assert!(body[2].contains("error"));
    assert!(dir.path().join("ablation").join("tau_00").join(METRICS_FILE).exists());
}

#[test]
fn bound_report_fields_add_up() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), "");
    cmd_train(&mut cfg).unwrap();
    let params = dir.path().join(PARAMS_FILE);
    let r = cmd_bound(&mut small(dir.path(), ""), &params).unwrap();
    let expected = r.empirical_risk + (r.kl + (1.0 / r.delta).ln() + r.slack) / r.eta;
    assert!((r.rhs - expected).abs() < 1e-10);
    assert_eq!(r.theta_kl, 0.0);
    assert_eq!(r.trials, 3);
    assert!(r.holds_fraction.is_some());
    let text = std::fs::read_to_string(dir.path().join("bound.txt")).unwrap();
    assert!(text.contains("theta_kl") && text.contains("point estimate"));
    let csv = std::fs::read_to_string(dir.path().join("bound.csv")).unwrap();
    assert!(csv.contains("\nkey,value\n") && csv.contains("\nrhs,"));

    let mut delta_one = small(dir.path(), "");
    delta_one.bound.delta = 1.0;
    let r = cmd_bound(&mut delta_one, &params).unwrap();
    assert_eq!(r.ln_inv_delta, 0.0);
    assert!((r.rhs - (r.empirical_risk + (r.kl + r.slack) / r.eta)).abs() < 1e-10);
}

fn fedvi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedvi"))
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.conf");
    let out = dir.path().join("out");

    let usage = fedvi().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));

    std::fs::write(&cfg_path, "[train]\nrounds = -1\n").unwrap();
    let bad = fedvi().arg("train").arg("--config").arg(&cfg_path).output().unwrap();
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    let missing = fedvi().arg("train").arg("--config").arg(dir.path().join("nope.conf")).output().unwrap();
    assert_eq!(missing.status.code(), Some(4));

    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a dataset").unwrap();
    std::fs::write(&cfg_path, format!("[data]\ndataset = {}\n", garbage.display())).unwrap();
    let bad_data = fedvi().arg("train").arg("--config").arg(&cfg_path).output().unwrap();
    assert_eq!(bad_data.status.code(), Some(4));

    std::fs::write(&cfg_path, SMALL).unwrap();
    let blowup = fedvi()
        .arg("train")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .args(["--tau", "1e300"])
        .output()
        .unwrap();
    assert_eq!(blowup.status.code(), Some(5));

    let ok = fedvi()
        .arg("train")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .args(["--algorithm", "fedavg", "--seed", "3"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let metrics = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert!(metrics.contains("# train.algorithm = fedavg (flag --algorithm)"));
    assert!(metrics.contains("# seed = 3 (flag --seed)"));
}
