//! Diagonal Gaussians: closed-form KL, reparameterized sampling and the
//! Glorot-scale prior over local parameters.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::tensor::{NnError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("scale[{index}] = {value} is not strictly positive and finite")]
    InvalidScale { index: usize, value: f64 },
    #[error("mean[{index}] = {value} is not finite")]
    InvalidMean { index: usize, value: f64 },
}

/// Gaussian with diagonal covariance; `scale` holds standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self, DistError> {
        if mean.len() != scale.len() {
            return Err(DistError::DimensionMismatch {
                left: mean.len(),
                right: scale.len(),
            });
        }
        if let Some((index, &value)) = scale.iter().enumerate().find(|(_, s)| !(s.is_finite() && **s > 0.0)) {
            return Err(DistError::InvalidScale { index, value });
        }
        if let Some((index, &value)) = mean.iter().enumerate().find(|(_, m)| !m.is_finite()) {
            return Err(DistError::InvalidMean { index, value });
        }
        Ok(Self { mean, scale })
    }

    /// `N(0, scale²·I_dim)`.
    pub fn isotropic(dim: usize, scale: f64) -> Result<Self, DistError> {
        Self::new(vec![0.0; dim], vec![scale; dim])
    }

    pub fn standard(dim: usize) -> Self {
        Self::isotropic(dim, 1.0).expect("unit scale is valid")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    fn check_dim(&self, n: usize) -> Result<(), DistError> {
        if self.dim() == n {
            Ok(())
        } else {
            Err(DistError::DimensionMismatch {
                left: self.dim(),
                right: n,
            })
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64, DistError> {
        self.check_dim(x.len())?;
        let ln2pi = (2.0 * PI).ln();
        Ok(-0.5
            * x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .map(|((x, m), s)| {
                    let z = (x - m) / s;
                    z * z + 2.0 * s.ln() + ln2pi
                })
                .sum::<f64>())
    }

    /// `mean + scale ⊙ noise`.
    pub fn sample_reparam(&self, noise: &[f64]) -> Result<Vec<f64>, DistError> {
        self.check_dim(noise.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.scale)
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise = standard_normal_vec(rng, self.dim());
        self.sample_reparam(&noise).expect("noise has matching dimension")
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64, DistError> {
    q.check_dim(p.dim())?;
    Ok(q.mean
        .iter()
        .zip(&q.scale)
        .zip(p.mean.iter().zip(&p.scale))
        .map(|((qm, qs), (pm, ps))| {
            let d = qm - pm;
            (ps / qs).ln() + (qs * qs + d * d) / (2.0 * ps * ps) - 0.5
        })
        .sum())
}

/// `sqrt(2 / (fan_in + fan_out))`.
pub fn glorot_scale(fan_in: usize, fan_out: usize) -> f64 {
    assert!(fan_in >= 1 && fan_out >= 1, "fan sizes must be positive");
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Monte-Carlo mean of `log q(x) − log p(x)` over `n` draws from `q`,
/// together with its standard error (zero when `n == 1`).
pub fn mc_kl_estimate_with_se<R: Rng + ?Sized>(
    q: &DiagGaussian,
    p: &DiagGaussian,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64), DistError> {
    q.check_dim(p.dim())?;
    assert!(n >= 1, "need at least one sample");
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut x = vec![0.0; q.dim()];
    for i in 0..n {
        for ((xi, m), s) in x.iter_mut().zip(&q.mean).zip(&q.scale) {
            let e: f64 = rng.sample(StandardNormal);
            *xi = m + s * e;
        }
        let r = q.log_density(&x)? - p.log_density(&x)?;
        let delta = r - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (r - mean);
    }
    let se = if n > 1 {
        (m2 / (n - 1) as f64 / n as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

pub fn mc_kl_estimate<R: Rng + ?Sized>(
    q: &DiagGaussian,
    p: &DiagGaussian,
    n: usize,
    rng: &mut R,
) -> Result<f64, DistError> {
    mc_kl_estimate_with_se(q, p, n, rng).map(|(m, _)| m)
}

/// Graph version of [`kl_diag`] with `q` given as differentiable nodes and
/// a constant prior `p`.
pub fn kl_diag_var(g: &mut Graph, q_mean: Var, q_scale: Var, p: &DiagGaussian) -> Result<Var, NnError> {
    let m = g.value(q_mean).len();
    if m != p.dim() || g.value(q_scale).len() != m {
        return Err(NnError::ShapeMismatch {
            op: "kl_diag",
            left: g.value(q_mean).shape().to_vec(),
            right: vec![p.dim()],
        });
    }
    let p_mean = g.constant(Tensor::vector(p.mean.clone()));
    let inv_two_var = g.constant(Tensor::vector(p.scale.iter().map(|s| 0.5 / (s * s)).collect()));
    let log_p_scale: f64 = p.scale.iter().map(|s| s.ln()).sum();

    let log_q = g.log(q_scale)?;
    let sum_log_q = g.sum(log_q)?;
    let var_q = g.mul(q_scale, q_scale)?;
    let d = g.sub(q_mean, p_mean)?;
    let d2 = g.mul(d, d)?;
    let num = g.add(var_q, d2)?;
    let quad = g.mul(num, inv_two_var)?;
    let sum_quad = g.sum(quad)?;
    let kl = g.sub(sum_quad, sum_log_q)?;
    g.add_scalar(kl, log_p_scale - 0.5 * m as f64)
}

/// Graph version of [`DiagGaussian::sample_reparam`].
pub fn sample_reparam_var(g: &mut Graph, mean: Var, scale: Var, noise: &[f64]) -> Result<Var, NnError> {
    let n = g.constant(Tensor::vector(noise.to_vec()));
    let spread = g.mul(scale, n)?;
    g.add(mean, spread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error};
    use crate::params::{ParamBlock, ParamSet};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g1(m: f64, s: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![s]).unwrap()
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = DiagGaussian::standard(5);
        assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_form_values() {
        assert!((kl_diag(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        let expected = 1.5 - 2f64.ln();
        assert!((kl_diag(&g1(0.0, 2.0), &g1(0.0, 1.0)).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.806853).abs() < 1e-6);
    }

    #[test]
    fn kl_matches_monte_carlo_on_reference_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (est, se) = mc_kl_estimate_with_se(&g1(1.0, 1.0), &g1(0.0, 1.0), 1_000_000, &mut rng).unwrap();
        assert!((est - 0.5).abs() < 0.005, "{est} ± {se}");
        let (est, se) = mc_kl_estimate_with_se(&g1(0.0, 2.0), &g1(0.0, 1.0), 1_000_000, &mut rng).unwrap();
        assert!((est - (1.5 - 2f64.ln())).abs() < 5.0 * se, "{est} ± {se}");
    }

    #[test]
    fn mc_estimate_of_identical_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DiagGaussian::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        let n = 1_000_000;
        let est = mc_kl_estimate(&p, &p, n, &mut rng).unwrap();
        assert!(est.abs() < 3.0 / (n as f64).sqrt());
        let single = mc_kl_estimate(&g1(1.0, 1.0), &g1(0.0, 1.0), 1, &mut rng).unwrap();
        assert!(single.is_finite());
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            kl_diag(&DiagGaussian::standard(2), &DiagGaussian::standard(3)),
            Err(DistError::DimensionMismatch { left: 2, right: 3 })
        ));
        assert!(DiagGaussian::standard(2).sample_reparam(&[0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn reparam_cases() {
        let q = DiagGaussian::new(vec![1.0, -2.0], vec![0.5, 3.0]).unwrap();
        assert_eq!(q.sample_reparam(&[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        let z = vec![0.3, -1.7];
        assert_eq!(DiagGaussian::standard(2).sample_reparam(&z).unwrap(), z);
    }

    #[test]
    fn reparam_moments() {
        let q = g1(2.0, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| q.sample(&mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0).abs() < 0.02);
        assert!((var.sqrt() - 0.7).abs() < 0.007);
    }

    #[test]
    fn glorot_values() {
        assert!((glorot_scale(26, 62) - (2.0f64 / 88.0).sqrt()).abs() < 1e-15);
        assert!((glorot_scale(26, 62) - 0.150756).abs() < 1e-6);
        assert_eq!(glorot_scale(1, 1), 1.0);
        assert!((glorot_scale(26, 100) - 0.125988).abs() < 1e-6);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = DiagGaussian::new(vec![0.2, -0.4, 0.0], vec![0.3, 1.2, 0.8]).unwrap();
        let mean = Tensor::vector(standard_normal_vec(&mut rng, 3));
        let scale = Tensor::vector(vec![0.5, 1.1, 0.2]);
        let params = ParamSet::new(vec![ParamBlock::new("m", mean), ParamBlock::new("s", scale)]).unwrap();
        let eval = |ps: &ParamSet| {
            let q = DiagGaussian::new(ps.blocks()[0].value.data().to_vec(), ps.blocks()[1].value.data().to_vec()).unwrap();
            kl_diag(&q, &p).unwrap()
        };
        let mut g = Graph::new();
        let m = g.param(0, params.blocks()[0].value.clone());
        let s = g.param(1, params.blocks()[1].value.clone());
        let kl = kl_diag_var(&mut g, m, s, &p).unwrap();
        assert!((g.value(kl).item() - eval(&params)).abs() < 1e-12);
        let grads = g.backward(kl).unwrap();
        let numeric = finite_diff_grad(eval, &params, 1e-5);
        for (i, n) in numeric.iter().enumerate() {
            assert!(max_rel_error(grads.get(i).unwrap(), n, 1e-8) < 1e-6);
        }
    }

    fn arb_pair() -> impl Strategy<Value = (DiagGaussian, DiagGaussian)> {
        (1usize..6).prop_flat_map(|m| {
            (
                prop::collection::vec(-3.0..3.0f64, m),
                prop::collection::vec(0.05..3.0f64, m),
                prop::collection::vec(-3.0..3.0f64, m),
                prop::collection::vec(0.05..3.0f64, m),
            )
                .prop_map(|(qm, qs, pm, ps)| {
                    (DiagGaussian::new(qm, qs).unwrap(), DiagGaussian::new(pm, ps).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_factorizes((q, p) in arb_pair()) {
            let kl = kl_diag(&q, &p).unwrap();
            prop_assert!(kl >= -1e-12);
            let per_dim: f64 = (0..q.dim())
                .map(|i| kl_diag(&g1(q.mean()[i], q.scale()[i]), &g1(p.mean()[i], p.scale()[i])).unwrap())
                .sum();
            prop_assert!((kl - per_dim).abs() < 1e-12 * (1.0 + kl.abs()));
            prop_assert!(kl_diag(&q, &q).unwrap().abs() < 1e-12);
        }
    }
}
