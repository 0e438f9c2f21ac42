//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op is appended to the tape in execution order; [`Tape::backward`]
//! walks the record in exact reverse order and accumulates (`+=`) into the
//! gradient of each input. Gathers from a leaf table produce sparse row
//! gradients, so an embedding table never needs a dense gradient buffer.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::kernels::linalg::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::kernels::{KernelError, Tensor};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined primitive with a hand-written backward pass.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, KernelError>;

    /// Accumulates into `input_grads[i]` (already sized like input `i`).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        out_grad: &[T],
        input_grads: &mut [Vec<T>],
    );
}

enum Op<T: Scalar> {
    Leaf,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SumProduct {
        x: Var,
        weights: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        seq: usize,
        dim: usize,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    Row {
        x: Var,
        index: usize,
    },
    InfoNce {
        c: Var,
        pos: Var,
        neg: Var,
        dpos_score: Vec<T>,
        dneg_score: Vec<T>,
    },
    Nib {
        c: Var,
        pos: Var,
        inputs: Var,
        w1: Var,
        w2: Var,
        a1: Vec<T>,
        a2: Vec<T>,
        dpos_score: Vec<T>,
        dinput_score: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
}

/// Record of executed ops. Leaves may borrow parameter tensors.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_owned(value, Op::Leaf)
    }

    /// Leaf that borrows its value; no copy of the tensor is made.
    pub fn leaf_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Row gather `table[ids]` from a 2-d table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, KernelError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(shape_err("gather table must be 2-d", t.shape()));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(KernelError::OutOfRange { id, len: n });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_vec(&[ids.len(), d], out)?;
        Ok(self.push_owned(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(KernelError::Shape(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        Ok(self.push_owned(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push_owned(value, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a))
    }

    /// `Σ x ⊙ weights` with constant weights; a handy scalar probe.
    pub fn sum_product(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var, KernelError> {
        let x = self.value(a);
        if x.numel() != weights.numel() {
            return Err(KernelError::Shape(format!(
                "sum_product: {:?} vs {:?}",
                x.shape(),
                weights.shape()
            )));
        }
        let s = dot(x.data(), weights.data());
        Ok(self.push_owned(
            Tensor::scalar(s),
            Op::SumProduct {
                x: a,
                weights: weights.data().to_vec(),
            },
        ))
    }

    /// Affine map over the last dimension: `x[.., d_in] · w[d_in, d_out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, KernelError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 || xv.shape().is_empty() {
            return Err(shape_err("linear weight must be 2-d", wv.shape()));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != din || bv.shape() != [dout] {
            return Err(KernelError::Shape(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        matmul_acc(xv.data(), wv.data(), &mut out, rows, din, dout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push_owned(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push_owned(value, Op::Relu(x))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var, KernelError> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(KernelError::NonFinite("softmax input contains NaN".into()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(self.push_owned(out, Op::Softmax(x)))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain ⊙ · + shift`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        eps: T,
    ) -> Result<Var, KernelError> {
        let (xv, gv, sv) = (self.value(x), self.value(gain), self.value(shift));
        let n = xv.last_dim();
        if n < 2 || gv.shape() != [n] || sv.shape() != [n] {
            return Err(KernelError::Shape(format!(
                "layer_norm: x {:?}, gain {:?}, shift {:?}",
                xv.shape(),
                gv.shape(),
                sv.shape()
            )));
        }
        let rows = xv.rows();
        let nf = T::lit(n as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(gv.data()[j] * h + sv.data()[j]);
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push_owned(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    /// `softmax(Q Kᵀ / √d) V` over the last two dims; leading dims are batch.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, KernelError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() < 2 {
            return Err(KernelError::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let nd = qv.shape().len();
        let (seq, dim) = (qv.shape()[nd - 2], qv.shape()[nd - 1]);
        let block = seq * dim;
        let batch = qv.numel().checked_div(block).unwrap_or(0);
        let scale = T::one() / T::lit(dim as f64).sqrt();
        let mut probs = vec![T::zero(); batch * seq * seq];
        let mut out = vec![T::zero(); qv.numel()];
        for b in 0..batch {
            let qs = &qv.data()[b * block..(b + 1) * block];
            let ks = &kv.data()[b * block..(b + 1) * block];
            let vs = &vv.data()[b * block..(b + 1) * block];
            let p = &mut probs[b * seq * seq..(b + 1) * seq * seq];
            matmul_bt_acc(qs, ks, p, seq, dim, seq);
            for row in p.chunks_mut(seq) {
                for x in row.iter_mut() {
                    *x *= scale;
                }
                softmax_in_place(row);
            }
            matmul_acc(p, vs, &mut out[b * block..(b + 1) * block], seq, seq, dim);
        }
        let value = Tensor::from_vec(qv.shape(), out)?;
        Ok(self.push_owned(
            value,
            Op::Attention {
                q,
                k,
                v,
                probs,
                seq,
                dim,
            },
        ))
    }

    /// `[s, h·dh] -> [h, s, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, KernelError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || heads == 0 || !xv.shape()[1].is_multiple_of(heads) {
            return Err(shape_err(
                "split_heads needs [s, d] with d % heads == 0",
                xv.shape(),
            ));
        }
        let (s, d) = (xv.shape()[0], xv.shape()[1]);
        let dh = d / heads;
        let mut out = vec![T::zero(); s * d];
        for t in 0..s {
            for h in 0..heads {
                out[(h * s + t) * dh..(h * s + t + 1) * dh]
                    .copy_from_slice(&xv.data()[t * d + h * dh..t * d + (h + 1) * dh]);
            }
        }
        let value = Tensor::from_vec(&[heads, s, dh], out)?;
        Ok(self.push_owned(value, Op::SplitHeads { x, heads }))
    }

    /// `[h, s, dh] -> [s, h·dh]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var, KernelError> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(shape_err("merge_heads needs [h, s, dh]", xv.shape()));
        }
        let (heads, s, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let d = heads * dh;
        let mut out = vec![T::zero(); s * d];
        for t in 0..s {
            for h in 0..heads {
                out[t * d + h * dh..t * d + (h + 1) * dh]
                    .copy_from_slice(&xv.data()[(h * s + t) * dh..(h * s + t + 1) * dh]);
            }
        }
        let value = Tensor::from_vec(&[s, d], out)?;
        Ok(self.push_owned(value, Op::MergeHeads { x, heads }))
    }

    /// Selects row `index` of a 2-d value.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var, KernelError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err("row needs a 2-d value", xv.shape()));
        }
        if index >= xv.shape()[0] {
            return Err(KernelError::OutOfRange {
                id: index,
                len: xv.shape()[0],
            });
        }
        let value = Tensor::from_vec(&[xv.shape()[1]], xv.row(index).to_vec())?;
        Ok(self.push_owned(value, Op::Row { x, index }))
    }

    /// Multi-positive InfoNCE:
    /// `Σ_h −log( e^{s_h} / (e^{s_h} + Σ_j e^{t_j}) )` with `s_h = c·pos_h / τ`
    /// and `t_j = c·neg_j / τ`, evaluated in log-sum-exp form.
    pub fn info_nce(&mut self, c: Var, pos: Var, neg: Var, tau: T) -> Result<Var, KernelError> {
        let (cv, pv, nv) = (self.value(c), self.value(pos), self.value(neg));
        let d = cv.numel();
        if cv.shape().len() != 1
            || pv.shape().len() != 2
            || nv.shape().len() != 2
            || pv.shape()[1] != d
            || nv.shape()[1] != d
        {
            return Err(KernelError::Shape(format!(
                "info_nce: c {:?}, pos {:?}, neg {:?}",
                cv.shape(),
                pv.shape(),
                nv.shape()
            )));
        }
        if pv.rows() == 0 || nv.rows() == 0 {
            return Err(KernelError::Shape(
                "info_nce needs at least one positive and one negative".into(),
            ));
        }
        if tau.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(KernelError::Domain("temperature must be positive".into()));
        }
        let inv_tau = T::one() / tau;
        let pos_scores: Vec<T> = (0..pv.rows())
            .map(|h| dot(cv.data(), pv.row(h)) * inv_tau)
            .collect();
        let neg_scores: Vec<T> = (0..nv.rows())
            .map(|j| dot(cv.data(), nv.row(j)) * inv_tau)
            .collect();
        if pos_scores.iter().chain(&neg_scores).any(|s| !s.is_finite()) {
            return Err(KernelError::NonFinite("info_nce scores".into()));
        }
        let neg_lse = crate::scalar::log_sum_exp(&neg_scores);
        let mut loss = T::zero();
        let mut neg_weight = T::zero();
        let mut dpos_score = Vec::with_capacity(pos_scores.len());
        for &s in &pos_scores {
            loss += softplus(neg_lse - s);
            let w_neg = sigmoid(neg_lse - s);
            dpos_score.push(-w_neg * inv_tau);
            neg_weight += w_neg;
        }
        let mut dneg_score = neg_scores;
        for t in dneg_score.iter_mut() {
            *t = (*t - neg_lse).exp() * neg_weight * inv_tau;
        }
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::InfoNce {
                c,
                pos,
                neg,
                dpos_score,
                dneg_score,
            },
        ))
    }

    /// Bilinear bottleneck objective:
    /// `Σ_h −log σ(cᵀ W1 pos_h) + β Σ_j log σ(cᵀ W2 input_j)`.
    #[allow(clippy::too_many_arguments)]
    pub fn nib(
        &mut self,
        c: Var,
        pos: Var,
        inputs: Var,
        w1: Var,
        w2: Var,
        beta: T,
    ) -> Result<Var, KernelError> {
        let (cv, pv, xv, w1v, w2v) = (
            self.value(c),
            self.value(pos),
            self.value(inputs),
            self.value(w1),
            self.value(w2),
        );
        let d = cv.numel();
        let ok = cv.shape().len() == 1
            && pv.shape().len() == 2
            && xv.shape().len() == 2
            && pv.shape()[1] == d
            && xv.shape()[1] == d
            && w1v.shape() == [d, d]
            && w2v.shape() == [d, d];
        if !ok {
            return Err(KernelError::Shape(format!(
                "nib: c {:?}, pos {:?}, inputs {:?}, w1 {:?}, w2 {:?}",
                cv.shape(),
                pv.shape(),
                xv.shape(),
                w1v.shape(),
                w2v.shape()
            )));
        }
        if xv.rows() == 0 {
            return Err(KernelError::Shape("nib needs a nonempty input set".into()));
        }
        let mut a1 = vec![T::zero(); d];
        let mut a2 = vec![T::zero(); d];
        matmul_acc(cv.data(), w1v.data(), &mut a1, 1, d, d);
        matmul_acc(cv.data(), w2v.data(), &mut a2, 1, d, d);
        let pos_scores: Vec<T> = (0..pv.rows()).map(|h| dot(&a1, pv.row(h))).collect();
        let in_scores: Vec<T> = (0..xv.rows()).map(|j| dot(&a2, xv.row(j))).collect();
        if pos_scores.iter().chain(&in_scores).any(|s| !s.is_finite()) {
            return Err(KernelError::NonFinite("nib scores".into()));
        }
        let mut loss = T::zero();
        let mut dpos_score = Vec::with_capacity(pos_scores.len());
        for &s in &pos_scores {
            loss += softplus(-s);
            dpos_score.push(-sigmoid(-s));
        }
        let mut dinput_score = Vec::with_capacity(in_scores.len());
        for &s in &in_scores {
            loss -= beta * softplus(-s);
            dinput_score.push(beta * sigmoid(-s));
        }
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::Nib {
                c,
                pos,
                inputs,
                w1,
                w2,
                a1,
                a2,
                dpos_score,
                dinput_score,
            },
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T>>) -> Result<Var, KernelError> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push_owned(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Gradients of the scalar `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, KernelError> {
        if self.value(root).numel() != 1 {
            return Err(KernelError::NotScalar(self.value(root).shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut rows: HashMap<usize, BTreeMap<usize, Vec<T>>> = HashMap::new();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads, &mut rows);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            dense: grads,
            rows,
        })
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        rows: &mut HashMap<usize, BTreeMap<usize, Vec<T>>>,
    ) {
        let numel = |v: Var| self.value(v).numel();
        match op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                let d = self.value(*table).last_dim();
                if matches!(self.nodes[table.0].op, Op::Leaf) {
                    let sparse = rows.entry(table.0).or_default();
                    for (r, &id) in ids.iter().enumerate() {
                        let acc = sparse.entry(id).or_insert_with(|| vec![T::zero(); d]);
                        axpy(T::one(), &g[r * d..(r + 1) * d], acc);
                    }
                } else {
                    let acc = slot(grads, *table, numel(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            T::one(),
                            &g[r * d..(r + 1) * d],
                            &mut acc[id * d..(id + 1) * d],
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                axpy(T::one(), g, slot(grads, *a, g.len()));
                axpy(T::one(), g, slot(grads, *b, g.len()));
            }
            Op::Scale(a, f) => axpy(*f, g, slot(grads, *a, g.len())),
            Op::Sum(a) => {
                let acc = slot(grads, *a, numel(*a));
                for x in acc.iter_mut() {
                    *x += g[0];
                }
            }
            Op::SumProduct { x, weights } => axpy(g[0], weights, slot(grads, *x, weights.len())),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let r = xv.rows();
                matmul_bt_acc(g, wv.data(), slot(grads, *x, r * din), r, dout, din);
                matmul_at_acc(xv.data(), g, slot(grads, *w, din * dout), r, din, dout);
                let gb = slot(grads, *b, dout);
                for row in g.chunks(dout) {
                    axpy(T::one(), row, gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let acc = slot(grads, *x, g.len());
                for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv.data()) {
                    if xi > T::zero() {
                        *a += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                let acc = slot(grads, *x, g.len());
                for ((y, gr), a) in out.data().chunks(n).zip(g.chunks(n)).zip(acc.chunks_mut(n)) {
                    let inner = dot(y, gr);
                    for j in 0..n {
                        a[j] += y[j] * (gr[j] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let n = out.last_dim();
                let nf = T::lit(n as f64);
                let gv = self.value(*gain).data().to_vec();
                {
                    let acc = slot(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); n];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                        let mean_dh = dot(&dxhat, hr) / nf;
                        for j in 0..n {
                            acc[r * n + j] += is * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                {
                    let acc = slot(grads, *gain, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            acc[j] += gr[j] * hr[j];
                        }
                    }
                }
                let acc = slot(grads, *shift, n);
                for gr in g.chunks(n) {
                    axpy(T::one(), gr, acc);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                seq,
                dim,
            } => {
                let (seq, dim) = (*seq, *dim);
                let block = seq * dim;
                let total = g.len();
                let batch = total.checked_div(block).unwrap_or(0);
                let scale = T::one() / T::lit(dim as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); total];
                let mut dk = vec![T::zero(); total];
                let mut dv = vec![T::zero(); total];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    let span = b * block..(b + 1) * block;
                    let p = &probs[b * seq * seq..(b + 1) * seq * seq];
                    let go = &g[span.clone()];
                    dp.iter_mut().for_each(|x| *x = T::zero());
                    matmul_bt_acc(go, &vv.data()[span.clone()], &mut dp, seq, dim, seq);
                    matmul_at_acc(p, go, &mut dv[span.clone()], seq, seq, dim);
                    for (dpr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                        let inner = dot(dpr, pr);
                        for j in 0..seq {
                            dpr[j] = pr[j] * (dpr[j] - inner) * scale;
                        }
                    }
                    matmul_acc(
                        &dp,
                        &kv.data()[span.clone()],
                        &mut dq[span.clone()],
                        seq,
                        seq,
                        dim,
                    );
                    matmul_at_acc(
                        &dp,
                        &qv.data()[span.clone()],
                        &mut dk[span.clone()],
                        seq,
                        seq,
                        dim,
                    );
                }
                axpy(T::one(), &dq, slot(grads, *q, total));
                axpy(T::one(), &dk, slot(grads, *k, total));
                axpy(T::one(), &dv, slot(grads, *v, total));
            }
            Op::SplitHeads { x, heads } => {
                let (s, d) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let dh = d / heads;
                let acc = slot(grads, *x, s * d);
                for t in 0..s {
                    for h in 0..*heads {
                        axpy(
                            T::one(),
                            &g[(h * s + t) * dh..(h * s + t + 1) * dh],
                            &mut acc[t * d + h * dh..t * d + (h + 1) * dh],
                        );
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let shape = self.value(*x).shape();
                let (s, dh) = (shape[1], shape[2]);
                let d = heads * dh;
                let acc = slot(grads, *x, s * d);
                for t in 0..s {
                    for h in 0..*heads {
                        axpy(
                            T::one(),
                            &g[t * d + h * dh..t * d + (h + 1) * dh],
                            &mut acc[(h * s + t) * dh..(h * s + t + 1) * dh],
                        );
                    }
                }
            }
            Op::Row { x, index } => {
                let d = g.len();
                let acc = slot(grads, *x, numel(*x));
                axpy(T::one(), g, &mut acc[index * d..(index + 1) * d]);
            }
            Op::InfoNce {
                c,
                pos,
                neg,
                dpos_score,
                dneg_score,
            } => {
                let g0 = g[0];
                let (cv, pv, nv) = (self.value(*c), self.value(*pos), self.value(*neg));
                let d = cv.numel();
                let mut dc = vec![T::zero(); d];
                for (h, &w) in dpos_score.iter().enumerate() {
                    axpy(g0 * w, pv.row(h), &mut dc);
                }
                for (j, &w) in dneg_score.iter().enumerate() {
                    axpy(g0 * w, nv.row(j), &mut dc);
                }
                axpy(T::one(), &dc, slot(grads, *c, d));
                let acc = slot(grads, *pos, pv.numel());
                for (h, &w) in dpos_score.iter().enumerate() {
                    axpy(g0 * w, cv.data(), &mut acc[h * d..(h + 1) * d]);
                }
                let acc = slot(grads, *neg, nv.numel());
                for (j, &w) in dneg_score.iter().enumerate() {
                    axpy(g0 * w, cv.data(), &mut acc[j * d..(j + 1) * d]);
                }
            }
            Op::Nib {
                c,
                pos,
                inputs,
                w1,
                w2,
                a1,
                a2,
                dpos_score,
                dinput_score,
            } => {
                let g0 = g[0];
                let (cv, pv, xv) = (self.value(*c), self.value(*pos), self.value(*inputs));
                let d = cv.numel();
                let mut u1 = vec![T::zero(); d];
                let mut u2 = vec![T::zero(); d];
                {
                    let acc = slot(grads, *pos, pv.numel());
                    for (h, &w) in dpos_score.iter().enumerate() {
                        axpy(g0 * w, a1, &mut acc[h * d..(h + 1) * d]);
                        axpy(g0 * w, pv.row(h), &mut u1);
                    }
                }
                {
                    let acc = slot(grads, *inputs, xv.numel());
                    for (j, &w) in dinput_score.iter().enumerate() {
                        axpy(g0 * w, a2, &mut acc[j * d..(j + 1) * d]);
                        axpy(g0 * w, xv.row(j), &mut u2);
                    }
                }
                let mut dc = vec![T::zero(); d];
                matmul_bt_acc(self.value(*w1).data(), &u1, &mut dc, d, d, 1);
                matmul_bt_acc(self.value(*w2).data(), &u2, &mut dc, d, d, 1);
                axpy(T::one(), &dc, slot(grads, *c, d));
                matmul_acc(cv.data(), &u1, slot(grads, *w1, d * d), d, 1, d);
                matmul_acc(cv.data(), &u2, slot(grads, *w2, d * d), d, 1, d);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let mut local: Vec<Vec<T>> =
                    values.iter().map(|v| vec![T::zero(); v.numel()]).collect();
                op.backward(&values, out, g, &mut local);
                for (&v, lg) in inputs.iter().zip(&local) {
                    axpy(T::one(), lg, slot(grads, v, lg.len()));
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn shape_err(msg: &str, shape: &[usize]) -> KernelError {
    KernelError::Shape(format!("{msg} (got {shape:?})"))
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    dense: Vec<Option<Vec<T>>>,
    rows: HashMap<usize, BTreeMap<usize, Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Dense gradient, if one was accumulated for `v`.
    pub fn dense(&self, v: Var) -> Option<&[T]> {
        self.dense[v.0].as_deref()
    }

    /// Sparse row gradients produced by gathers from leaf table `v`.
    pub fn rows(&self, v: Var) -> Option<&BTreeMap<usize, Vec<T>>> {
        self.rows.get(&v.0)
    }

    pub fn take_rows(&mut self, v: Var) -> BTreeMap<usize, Vec<T>> {
        self.rows.remove(&v.0).unwrap_or_default()
    }

    /// Full gradient of `v` (dense and sparse parts combined, zeros where untouched).
    pub fn to_dense(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        let mut out = Tensor::zeros(shape);
        if let Some(g) = self.dense(v) {
            axpy(T::one(), g, out.data_mut());
        }
        if let Some(rows) = self.rows(v) {
            for (&r, g) in rows {
                axpy(T::one(), g, out.row_mut(r));
            }
        }
        out
    }
}
