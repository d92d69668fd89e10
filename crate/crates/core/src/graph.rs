//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order. [`Graph::backward`] walks it in
//! reverse and accumulates vector-Jacobian products. It only reads the tape:
//! calling it twice on the same root returns identical gradients.

use std::collections::BTreeMap;

use crate::tensor::{softmax_row, validate_labels, NnError, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    MeanRows(Var),
    SliceCols(Var, usize, usize),
    Slice(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    /// Keeps the row softmax for the backward pass.
    SoftmaxNll(Var, Vec<usize>, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by the parameter id passed to [`Graph::param`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn take(&mut self, id: usize) -> Option<Tensor> {
        self.by_param.remove(&id)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. `id` keys the gradient in [`Gradients`].
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(v, Op::Mul(a, b))
    }

    /// Broadcasts a vector over the rows of a matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let v = self.value(m).add_row(self.value(row))?;
        self.push(v, Op::AddRow(m, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = crate::tensor::relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mean_rows()?;
        self.push(v, Op::MeanRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, end)?;
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice(start, end)?;
        self.push(v, Op::Slice(a, start, end))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a).select_rows(idx)?;
        self.push(v, Op::SelectRows(a, idx.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a))
    }

    /// `x · w + b` built from the primitive ops.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Summed softmax cross-entropy; see [`crate::tensor::softmax_nll`].
    pub fn softmax_nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        validate_labels(l, labels)?;
        let k = l.cols();
        let mut probs = Vec::with_capacity(l.len());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = l.row(i);
            let lsm = crate::tensor::log_softmax_row(row);
            total -= lsm[y];
            probs.extend(softmax_row(row));
        }
        let probs = Tensor::matrix(labels.len(), k, probs)?;
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxNll(logits, labels.to_vec(), probs),
        )
    }

    /// Reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(NnError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::full(root_val.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul(&bv.transpose()?)?;
                    let gb = av.transpose()?.matmul(&g)?;
                    accumulate(&mut adj, *a, ga)?;
                    accumulate(&mut adj, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone())?;
                    accumulate(&mut adj, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scale(-1.0))?;
                    accumulate(&mut adj, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut adj, *a, ga)?;
                    accumulate(&mut adj, *b, gb)?;
                }
                Op::AddRow(m, row) => {
                    let gr = g.mean_rows()?.scale(g.rows() as f64);
                    accumulate(&mut adj, *row, gr.reshape(self.value(*row).shape())?)?;
                    accumulate(&mut adj, *m, g)?;
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s))?,
                Op::AddScalar(a) => accumulate(&mut adj, *a, g)?,
                Op::Exp(a) => {
                    let ga = g.mul(&node.value)?;
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), "log_backward", |gv, x| gv / x)?;
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), "relu_backward", |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.value(*a).shape(), g.item());
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let inv = 1.0 / m as f64;
                    let mut data = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        data.extend(g.data().iter().map(|v| v * inv));
                    }
                    accumulate(&mut adj, *a, Tensor::matrix(m, n, data)?)?;
                }
                Op::SliceCols(a, start, end) => {
                    let av = self.value(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let w = end - start;
                    let mut data = vec![0.0; m * n];
                    for i in 0..m {
                        data[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut adj, *a, Tensor::matrix(m, n, data)?)?;
                }
                Op::Slice(a, start, end) => {
                    let mut data = vec![0.0; self.value(*a).len()];
                    data[*start..*end].copy_from_slice(g.data());
                    accumulate(&mut adj, *a, Tensor::vector(data))?;
                }
                Op::SelectRows(a, idx) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut ga = Tensor::zeros(av.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut ga.data_mut()[i * n..(i + 1) * n];
                        for (d, s) in dst.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += s;
                        }
                    }
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).shape())?;
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()?)?,
                Op::SoftmaxNll(logits, labels, probs) => {
                    let k = probs.cols();
                    let mut ga = probs.scale(g.item());
                    for (i, &y) in labels.iter().enumerate() {
                        ga.data_mut()[i * k + y] -= g.item();
                    }
                    accumulate(&mut adj, *logits, ga)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Relu(_) => "relu",
        Op::Sum(_) => "sum",
        Op::MeanRows(_) => "mean_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Slice(..) => "slice",
        Op::SelectRows(..) => "select_rows",
        Op::Reshape(_) => "reshape",
        Op::Transpose(_) => "transpose",
        Op::SoftmaxNll(..) => "softmax_nll",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error};
    use crate::params::{ParamBlock, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn analytic(params: &ParamSet, f: impl Fn(&mut Graph, &[Var]) -> Var) -> Vec<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| g.param(i, b.value.clone()))
            .collect();
        let root = f(&mut g, &vars);
        let mut grads = g.backward(root).unwrap();
        params
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| grads.take(i).unwrap_or_else(|| Tensor::zeros(b.value.shape())))
            .collect()
    }

    fn value(params: &ParamSet, f: &impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| g.param(i, b.value.clone()))
            .collect();
        let root = f(&mut g, &vars);
        g.value(root).item()
    }

    fn check(params: &ParamSet, f: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let a = analytic(params, &f);
        let n = finite_diff_grad(|p| value(p, &f), params, 1e-5);
        for (x, y) in a.iter().zip(&n) {
            let err = max_rel_error(x, y, 1e-8);
            assert!(err < tol, "rel err {err}: {x:?} vs {y:?}");
        }
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[3, 4]);
        let params = ParamSet::new(vec![ParamBlock::new("w", random(&mut rng, &[4, 2]))]).unwrap();
        let xc = x.clone();
        let f = move |g: &mut Graph, v: &[Var]| {
            let xv = g.constant(xc.clone());
            let y = g.matmul(xv, v[0]).unwrap();
            g.sum(y).unwrap()
        };
        let grads = analytic(&params, &f);
        // d/dW_kj sum_i (xW)_ij = sum_i x_ik
        for k in 0..4 {
            let col: f64 = (0..3).map(|i| x.get(i, k)).sum();
            for j in 0..2 {
                assert!((grads[0].get(k, j) - col).abs() < 1e-12);
            }
        }
        check(&params, f, 1e-6);
    }

    #[test]
    fn unused_param_has_zero_gradient() {
        let params = ParamSet::new(vec![
            ParamBlock::new("a", Tensor::vector(vec![1.0, 2.0])),
            ParamBlock::new("b", Tensor::vector(vec![3.0])),
        ])
        .unwrap();
        let grads = analytic(&params, |g, v| g.sum(v[0]).unwrap());
        assert_eq!(grads[1].data(), &[0.0]);
    }

    #[test]
    fn composite_dense_relu_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[3, 4]);
        let params = ParamSet::new(vec![
            ParamBlock::new("w1", random(&mut rng, &[4, 5])),
            ParamBlock::new("b1", random(&mut rng, &[5])),
            ParamBlock::new("w2", random(&mut rng, &[5, 3])),
            ParamBlock::new("b2", random(&mut rng, &[3])),
        ])
        .unwrap();
        let labels = vec![0, 2, 1];
        check(
            &params,
            move |g, v| {
                let xv = g.constant(x.clone());
                let h = g.dense(xv, v[0], v[1]).unwrap();
                let h = g.relu(h).unwrap();
                let o = g.dense(h, v[2], v[3]).unwrap();
                g.softmax_nll(o, &labels).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let params = ParamSet::new(vec![
                ParamBlock::new("m", random(&mut rng, &[4, 6])),
                ParamBlock::new("v", random(&mut rng, &[6])),
                ParamBlock::new("s", random(&mut rng, &[12])),
            ])
            .unwrap();
            check(
                &params,
                |g, v| {
                    let e = g.exp(v[0]).unwrap();
                    let sq = g.mul(e, v[0]).unwrap();
                    let rows = g.select_rows(sq, &[3, 0, 0]).unwrap();
                    let m = g.mean_rows(rows).unwrap();
                    let d = g.sub(m, v[1]).unwrap();
                    let sc = g.slice_cols(v[0], 1, 4).unwrap();
                    let t = g.transpose(sc).unwrap();
                    let r = g.reshape(v[2], &[4, 3]).unwrap();
                    let tt = g.matmul(t, r).unwrap();
                    let tt = g.add_scalar(tt, 1.5).unwrap();
                    let pos = g.mul(tt, tt).unwrap();
                    let pos = g.add_scalar(pos, 0.1).unwrap();
                    let lg = g.log(pos).unwrap();
                    let sl = g.slice(d, 2, 5).unwrap();
                    let br = g.add_row(lg, sl).unwrap();
                    let rl = g.relu(br).unwrap();
                    let a = g.sum(rl).unwrap();
                    let b = g.sum(d).unwrap();
                    let b = g.scale(b, -0.3).unwrap();
                    let s = g.add(a, b).unwrap();
                    let nll = g.softmax_nll(lg, &[0, 2, 1]).unwrap();
                    g.add(s, nll).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut g = Graph::new();
        let p = g.param(0, Tensor::vector(vec![1.0, -2.0, 3.0]));
        let e = g.exp(p).unwrap();
        let s = g.sum(e).unwrap();
        let a = g.backward(s).unwrap();
        let b = g.backward(s).unwrap();
        assert_eq!(a.get(0), b.get(0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(0, Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(NnError::NonScalarRoot { .. })));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let p = g.param(0, Tensor::vector(vec![1000.0]));
        assert!(matches!(g.exp(p), Err(NnError::NonFinite { op: "exp" })));
    }
}
