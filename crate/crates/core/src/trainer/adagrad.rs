use std::collections::BTreeMap;

use crate::encoder::ModelParams;
use crate::kernels::Tensor;
use crate::scalar::Scalar;

pub const ADAGRAD_EPS: f64 = 1e-8;

/// Accumulated squared gradients, one tensor per model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState<T> {
    pub accumulators: Vec<Tensor<T>>,
}

impl<T: Scalar> AdagradState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            accumulators: params
                .tensors()
                .into_iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }
}

/// `acc += g²; θ -= lr · g / (sqrt(acc) + eps)` elementwise.
pub fn adagrad_update<T: Scalar>(theta: &mut [T], grad: &[T], acc: &mut [T], lr: T) {
    let eps = T::lit(ADAGRAD_EPS);
    for ((t, &g), a) in theta.iter_mut().zip(grad).zip(acc.iter_mut()) {
        *a += g * g;
        *t -= lr * g / (a.sqrt() + eps);
    }
}

/// Gradient of the whole model: sparse rows for the node table, dense for
/// everything else (indexed like `ModelParams::tensors()[1..]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub embedding_rows: BTreeMap<usize, Vec<T>>,
    pub dense: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros(params: &ModelParams<T>) -> Self {
        Self {
            embedding_rows: BTreeMap::new(),
            dense: params.tensors()[1..]
                .iter()
                .map(|t| vec![T::zero(); t.numel()])
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (&r, g) in &other.embedding_rows {
            let acc = self
                .embedding_rows
                .entry(r)
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        for (acc, g) in self.dense.iter_mut().zip(&other.dense) {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self
            .embedding_rows
            .values_mut()
            .chain(self.dense.iter_mut())
        {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embedding_rows
            .values()
            .chain(self.dense.iter())
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Dense gradient of the node table (zeros for untouched rows).
    pub fn embedding_dense(&self, num_nodes: usize, d: usize) -> Tensor<T> {
        let mut out = Tensor::zeros(&[num_nodes, d]);
        for (&r, g) in &self.embedding_rows {
            out.row_mut(r).copy_from_slice(g);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite gradient; step rejected")]
pub struct NonFiniteGradient;

/// One Adagrad step. Embedding rows without a gradient are left untouched,
/// which is identical to applying a zero gradient to them.
pub fn adagrad_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ParamGrads<T>,
    state: &mut AdagradState<T>,
    lr: T,
) -> Result<(), NonFiniteGradient> {
    if !grads.is_finite() {
        return Err(NonFiniteGradient);
    }
    let mut tensors = params.tensors_mut();
    let (emb_acc, rest_acc) = state
        .accumulators
        .split_first_mut()
        .expect("state matches params");
    let emb = &mut tensors[0];
    for (&r, g) in &grads.embedding_rows {
        adagrad_update(emb.row_mut(r), g, emb_acc.row_mut(r), lr);
    }
    for ((theta, g), acc) in tensors[1..].iter_mut().zip(&grads.dense).zip(rest_acc) {
        adagrad_update(theta.data_mut(), g, acc.data_mut(), lr);
    }
    Ok(())
}
