//! Named parameter collections and the flat arithmetic the federation
//! layer needs (deltas, weighted means, momentum).

use std::collections::HashSet;

use crate::tensor::{NnError, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Ordered parameter blocks with unique names.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

impl ParamSet {
    pub fn new(blocks: Vec<ParamBlock>) -> Result<Self> {
        let mut seen = HashSet::new();
        for b in &blocks {
            if !seen.insert(b.name.as_str()) {
                return Err(NnError::Contract(format!("duplicate parameter name `{}`", b.name)));
            }
            if b.value.shape() != b.grad.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "param_block",
                    left: b.value.shape().to_vec(),
                    right: b.grad.shape().to_vec(),
                });
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock::new(b.name.clone(), Tensor::zeros(b.value.shape())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    fn check_layout(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(NnError::Contract(format!("{op}: parameter layouts differ")))
        }
    }

    /// `self += alpha * other`, value-wise.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_layout(other, "axpy")?;
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.value.axpy(alpha, &b.value)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.value.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self - other`, value-wise.
    pub fn difference(&self, other: &ParamSet) -> Result<ParamSet> {
        self.check_layout(other, "difference")?;
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// Stores gradients into each block's `grad` slot, in block order.
    pub fn set_grads(&mut self, grads: Vec<Tensor>) -> Result<()> {
        if grads.len() != self.blocks.len() {
            return Err(NnError::Contract("gradient count differs from block count".into()));
        }
        for (b, g) in self.blocks.iter_mut().zip(grads) {
            if g.shape() != b.value.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "set_grads",
                    left: b.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            b.grad = g;
        }
        Ok(())
    }

    /// `value -= lr * grad` for every block.
    pub fn descend(&mut self, lr: f64) {
        for b in &mut self.blocks {
            let ParamBlock { value, grad, .. } = b;
            for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * g;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.value.data().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.all_finite())
    }

    /// Flattened values in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.value.data().iter().copied()).collect()
    }
}
