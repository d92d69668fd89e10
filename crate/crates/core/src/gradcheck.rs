//! Central finite differences, used as the gradient oracle in tests.

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// `(f(p + eps·e_i) − f(p − eps·e_i)) / (2·eps)` for every scalar of every
/// block, returned in block order.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamSet, eps: f64) -> Vec<Tensor>
where
    F: FnMut(&ParamSet) -> f64,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for bi in 0..params.len() {
        let shape = params.blocks()[bi].value.shape().to_vec();
        let n = params.blocks()[bi].value.len();
        let mut grad = vec![0.0; n];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = work.blocks()[bi].value.data()[i];
            work.blocks_mut()[bi].value.data_mut()[i] = orig + eps;
            let plus = f(&work);
            work.blocks_mut()[bi].value.data_mut()[i] = orig - eps;
            let minus = f(&work);
            work.blocks_mut()[bi].value.data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * eps);
        }
        out.push(Tensor::new(shape, grad).expect("shape preserved"));
    }
    out
}

/// Largest `|a−b| / max(|a|,|b|)` over coordinates whose analytic
/// magnitude `|a|` exceeds `floor`.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter(|(a, _)| a.abs() > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}
