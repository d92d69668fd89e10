use fedvi_core::distributions::{glorot_scale, kl_diag, standard_normal_vec};
use fedvi_core::gradcheck::{finite_diff_grad, max_rel_error};
use fedvi_core::model::infer::{construct_posterior, embed, loss_parts, predict_logits};
use fedvi_core::model::io::{load_params, load_params_with_meta, save_params, save_params_with_meta, CheckpointError};
use fedvi_core::model::{global_minibatch_loss, minibatch_loss, ArchConfig, Dropout, FedVIParams};
use fedvi_core::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> ArchConfig {
    ArchConfig {
        input_dim: 3,
        embed_widths: vec![5, 4],
        local_dim: 2,
        global_dim: 2,
        num_classes: 3,
        posterior_widths: vec![6],
        posterior_out_init: 1.0,
        ..ArchConfig::default()
    }
}

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Zero-initialized biases put dead-ReLU rows exactly on the kink, which
/// breaks central differences; jitter every parameter first.
fn jittered(arch: &ArchConfig, seed: u64) -> FedVIParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = FedVIParams::init(arch, &mut rng).unwrap();
    for b in p.blocks.blocks_mut() {
        for v in b.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn batch(rng: &mut impl Rng, arch: &ArchConfig, b: usize) -> (Tensor, Vec<usize>) {
    let x = random_tensor(rng, b, arch.input_dim);
    let y = (0..b).map(|_| rng.random_range(0..arch.num_classes)).collect();
    (x, y)
}

#[test]
fn zero_constructor_gives_prior_shaped_posterior() {
    let arch = small_arch();
    let mut p = FedVIParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let post = p.layout().post;
    for b in &mut p.blocks.blocks_mut()[post] {
        b.value = Tensor::zeros(b.value.shape());
    }
    let s = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), 5, arch.global_dim);
    let stats = construct_posterior(&p, &s).unwrap();
    let s0 = glorot_scale(arch.local_dim, arch.num_classes);
    assert!(stats.q.mean().iter().all(|&m| m == 0.0));
    assert!(stats.q.scale().iter().all(|&v| (v - (1e-5 + s0)).abs() < 1e-15));
    assert!(stats.b_beta.iter().all(|&v| v == 0.0));
}

#[test]
fn posterior_is_invariant_to_duplicating_support() {
    let arch = small_arch();
    let p = FedVIParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let s = random_tensor(&mut ChaCha8Rng::seed_from_u64(3), 4, arch.global_dim);
    let idx: Vec<usize> = (0..4).chain(0..4).collect();
    let doubled = s.select_rows(&idx).unwrap();
    let a = construct_posterior(&p, &s).unwrap();
    let b = construct_posterior(&p, &doubled).unwrap();
    for (u, v) in a.q.mean().iter().zip(b.q.mean()) {
        assert!((u - v).abs() < 1e-12);
    }
    for (u, v) in a.q.scale().iter().zip(b.q.scale()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn predict_logits_matches_loop_oracle() {
    let arch = small_arch();
    let p = FedVIParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = 6;
    let qg = random_tensor(&mut rng, q, arch.global_dim);
    let ql = random_tensor(&mut rng, q, arch.local_dim);
    let beta: Vec<f64> = (0..arch.beta_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bb: Vec<f64> = (0..arch.num_classes).map(|_| rng.random_range(-1.0..1.0)).collect();
    let logits = predict_logits(&p, &beta, &bb, &qg, &ql).unwrap();
    let w = &p.blocks.get("cls.weight").unwrap().value;
    let b0 = &p.blocks.get("cls.bias").unwrap().value;
    for i in 0..q {
        for k in 0..arch.num_classes {
            let mut s = bb[k] + b0.data()[k];
            for j in 0..arch.local_dim {
                s += ql.get(i, j) * beta[k * arch.local_dim + j];
            }
            for j in 0..arch.global_dim {
                s += qg.get(i, j) * w.get(j, k);
            }
            assert!((logits.get(i, k) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn tau_zero_loss_is_pure_nll() {
    let arch = small_arch();
    let p = FedVIParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, y) = batch(&mut rng, &arch, 8);
    let noise = standard_normal_vec(&mut rng, arch.beta_dim());
    let out = minibatch_loss(&p, &x, &y, 0.0, &noise, Dropout::Off).unwrap();
    assert_eq!(out.loss, out.parts.nll);
    assert!(out.parts.kl > 0.0);
    let out = minibatch_loss(&p, &x, &y, 3.0, &noise, Dropout::Off).unwrap();
    assert_eq!(out.parts.kl_weight, 3.0 / 8.0);
    assert_eq!(out.loss, out.parts.nll + out.parts.kl_weight * out.parts.kl);
}

#[test]
fn graph_and_plain_paths_agree() {
    let arch = small_arch();
    let p = FedVIParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (x, y) = batch(&mut rng, &arch, 9);
    let noise = standard_normal_vec(&mut rng, arch.beta_dim());
    let g = minibatch_loss(&p, &x, &y, 2.0, &noise, Dropout::Off).unwrap();
    let plain = loss_parts(&p, &x, &y, 2.0, &noise).unwrap();
    assert!((g.parts.nll - plain.nll).abs() < 1e-10);
    assert!((g.parts.kl - plain.kl).abs() < 1e-10);
    let post = g.posterior.unwrap();
    assert!((kl_diag(&post.q, &arch.prior()).unwrap() - g.parts.kl).abs() < 1e-10);
}

#[test]
fn minibatch_gradients_match_finite_differences() {
    let arch = small_arch();
    let p = jittered(&arch, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, y) = batch(&mut rng, &arch, 8);
    let noise = standard_normal_vec(&mut rng, arch.beta_dim());
    let out = minibatch_loss(&p, &x, &y, 1.5, &noise, Dropout::Off).unwrap();
    let analytic = out.gradients(&p).unwrap();
    let numeric = finite_diff_grad(
        |ps: &ParamSet| {
            let q = FedVIParams {
                arch: arch.clone(),
                blocks: ps.clone(),
            };
            minibatch_loss(&q, &x, &y, 1.5, &noise, Dropout::Off).unwrap().loss
        },
        &p.blocks,
        1e-5,
    );
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = max_rel_error(a, n, 1e-5);
        assert!(err < 1e-4, "block {} error {err}", p.blocks.blocks()[i].name);
    }
}

#[test]
fn global_loss_gradients_match_finite_differences() {
    let arch = small_arch();
    let p = jittered(&arch, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (x, y) = batch(&mut rng, &arch, 7);
    let out = global_minibatch_loss(&p, &x, &y, Dropout::Off).unwrap();
    let analytic = out.gradients(&p).unwrap();
    let numeric = finite_diff_grad(
        |ps: &ParamSet| {
            let q = FedVIParams {
                arch: arch.clone(),
                blocks: ps.clone(),
            };
            global_minibatch_loss(&q, &x, &y, Dropout::Off).unwrap().loss
        },
        &p.blocks,
        1e-5,
    );
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(max_rel_error(a, n, 1e-5) < 1e-4);
    }
    let post = p.layout().post;
    assert!(analytic[post].iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn support_labels_never_matter() {
    let arch = small_arch();
    let p = FedVIParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (x, y) = batch(&mut rng, &arch, 10);
    let noise = standard_normal_vec(&mut rng, arch.beta_dim());
    let mut y2 = y.clone();
    for v in &mut y2[..5] {
        *v = (*v + 1) % arch.num_classes;
    }
    let a = minibatch_loss(&p, &x, &y, 1.0, &noise, Dropout::Off).unwrap();
    let b = minibatch_loss(&p, &x, &y2, 1.0, &noise, Dropout::Off).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.gradients(&p).unwrap(), b.gradients(&p).unwrap());
}

#[test]
fn dropout_is_reproducible_and_rescales() {
    let arch = ArchConfig {
        dropout: 0.5,
        ..small_arch()
    };
    let p = FedVIParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (x, y) = batch(&mut rng, &arch, 8);
    let noise = standard_normal_vec(&mut rng, arch.beta_dim());
    let run = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        minibatch_loss(&p, &x, &y, 1.0, &noise, Dropout::On { rate: 0.5, rng: &mut r })
            .unwrap()
            .loss
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let plain = minibatch_loss(&p, &x, &y, 1.0, &noise, Dropout::Off).unwrap().loss;
    assert_ne!(run(1), plain);
}

#[test]
fn default_init_starts_near_prior() {
    let arch = ArchConfig::default();
    let p = FedVIParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random_tensor(&mut rng, 32, arch.input_dim);
    let h = embed(&p, &x).unwrap();
    let stats = construct_posterior(&p, &h.slice_cols(0, arch.global_dim).unwrap()).unwrap();
    let s0 = arch.prior_scale();
    assert!(stats.q.mean().iter().all(|m| m.abs() < 0.05 * s0));
    assert!(stats.q.scale().iter().all(|s| (s / s0 - 1.0).abs() < 0.01));
}

#[test]
fn params_round_trip_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    let arch = small_arch();
    let p = FedVIParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
    save_params(&p, &path).unwrap();
    assert_eq!(load_params(&path).unwrap(), p);
    let meta = serde_json::json!({"seed": 7, "label": "x"});
    save_params_with_meta(&p, &meta, &path).unwrap();
    assert_eq!(load_params_with_meta(&path).unwrap(), (p.clone(), meta));
    save_params(&p, &path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_params(&path), Err(CheckpointError::Malformed(_))));

    let mut bumped = bytes.clone();
    bumped[4] += 1;
    std::fs::write(&path, &bumped).unwrap();
    assert!(matches!(load_params(&path), Err(CheckpointError::VersionMismatch { found: 2, .. })));

    let mut extra = bytes;
    extra.push(0);
    std::fs::write(&path, &extra).unwrap();
    assert!(matches!(load_params(&path), Err(CheckpointError::Malformed(_))));
}
