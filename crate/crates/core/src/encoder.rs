//! Transformer encoder producing the neighbor-predictive coding of a target.
//!
//! Input rows are node embedding plus a learned hop-position embedding
//! (index 0 marks the target). After `layers` post-norm blocks the output
//! row at the target position is the coding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ensure, ConfigError};
use crate::kernels::{KernelError, Tape, Tensor, Var};
use crate::sampler::TokenSequence;
use crate::scalar::Scalar;
use crate::trainer::xavier_init;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Embedding and hidden size.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 128,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(self.d >= 2, "encoder.d", "must be at least 2")?;
        ensure(
            (1..=6).contains(&self.layers),
            "encoder.layers",
            "must be between 1 and 6",
        )?;
        ensure(self.heads >= 1, "encoder.heads", "must be at least 1")?;
        ensure(
            self.d.is_multiple_of(self.heads),
            "encoder.heads",
            "d must be divisible by heads",
        )?;
        ensure(self.ffn_mult >= 1, "encoder.ffn_mult", "must be at least 1")
    }
}

/// Weights of one post-norm Transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_shift: Tensor<T>,
    pub ff1_w: Tensor<T>,
    pub ff1_b: Tensor<T>,
    pub ff2_w: Tensor<T>,
    pub ff2_b: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_shift: Tensor<T>,
}

pub const TENSORS_PER_LAYER: usize = 16;

impl<T: Scalar> LayerParams<T> {
    fn build(d: usize, ffn_mult: usize, init: &mut impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        let h = d * ffn_mult;
        Self {
            wq: init(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: init(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: init(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: init(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln1_gain: Tensor::full(&[d], T::one()),
            ln1_shift: Tensor::zeros(&[d]),
            ff1_w: init(&[d, h]),
            ff1_b: Tensor::zeros(&[h]),
            ff2_w: init(&[h, d]),
            ff2_b: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], T::one()),
            ln2_shift: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; TENSORS_PER_LAYER] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_shift,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
            &self.ln2_gain,
            &self.ln2_shift,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; TENSORS_PER_LAYER] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_shift,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
            &mut self.ln2_gain,
            &mut self.ln2_shift,
        ]
    }
}

/// Every trainable tensor of the model.
///
/// [`tensors`](Self::tensors) fixes a canonical order shared by the
/// optimizer, gradients and checkpoints: node embeddings first, then hop
/// positions, the encoder layers, and the two bilinear matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub node_embeddings: Tensor<T>,
    pub hop_positions: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub nib_w1: Tensor<T>,
    pub nib_w2: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Xavier-uniform weights, zero biases and shifts, unit norm gains.
    pub fn xavier<R: Rng + ?Sized>(
        num_nodes: usize,
        hops: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        Self::build(num_nodes, hops, cfg, |shape| xavier_init(shape, rng))
    }

    /// Same layout as [`xavier`](Self::xavier) with every weight matrix zero.
    pub fn zeros(num_nodes: usize, hops: usize, cfg: &EncoderConfig) -> Self {
        Self::build(num_nodes, hops, cfg, Tensor::zeros)
    }

    fn build(
        num_nodes: usize,
        hops: usize,
        cfg: &EncoderConfig,
        mut init: impl FnMut(&[usize]) -> Tensor<T>,
    ) -> Self {
        let d = cfg.d;
        let node_embeddings = init(&[num_nodes, d]);
        let hop_positions = init(&[hops + 1, d]);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams::build(d, cfg.ffn_mult, &mut init))
            .collect();
        let nib_w1 = init(&[d, d]);
        let nib_w2 = init(&[d, d]);
        Self {
            node_embeddings,
            hop_positions,
            layers,
            nib_w1,
            nib_w2,
        }
    }

    /// Assembles parameters from tensors in canonical order.
    pub fn from_tensors(mut tensors: Vec<Tensor<T>>) -> Result<Self, KernelError> {
        if tensors.len() < 4 || !(tensors.len() - 4).is_multiple_of(TENSORS_PER_LAYER) {
            return Err(KernelError::Shape(format!(
                "{} tensors do not form a model",
                tensors.len()
            )));
        }
        let nib_w2 = tensors.pop().unwrap();
        let nib_w1 = tensors.pop().unwrap();
        let mut it = tensors.into_iter();
        let node_embeddings = it.next().unwrap();
        let hop_positions = it.next().unwrap();
        let mut layers = Vec::new();
        let rest: Vec<Tensor<T>> = it.collect();
        for chunk in rest.chunks(TENSORS_PER_LAYER) {
            let mut c = chunk.iter().cloned();
            let mut next = || c.next().unwrap();
            layers.push(LayerParams {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_gain: next(),
                ln1_shift: next(),
                ff1_w: next(),
                ff1_b: next(),
                ff2_w: next(),
                ff2_b: next(),
                ln2_gain: next(),
                ln2_shift: next(),
            });
        }
        Ok(Self {
            node_embeddings,
            hop_positions,
            layers,
            nib_w1,
            nib_w2,
        })
    }

    pub fn dim(&self) -> usize {
        self.node_embeddings.last_dim()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_embeddings.rows()
    }

    /// Largest hop index with a position embedding.
    pub fn max_hop(&self) -> usize {
        self.hop_positions.rows().saturating_sub(1)
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.node_embeddings, &self.hop_positions];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.nib_w1);
        out.push(&self.nib_w2);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.node_embeddings, &mut self.hop_positions];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.nib_w1);
        out.push(&mut self.nib_w2);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams::from_tensors(self.tensors().into_iter().map(Tensor::cast).collect())
            .expect("same layout")
    }

    /// Registers every tensor on `tape` as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> ParamVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf_ref(t))
            .collect();
        ParamVars::from_vars(vars)
    }
}

/// Tape handles for a bound [`ModelParams`], in canonical order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    all: Vec<Var>,
}

pub(crate) struct LayerVars<'v>(&'v [Var]);

impl LayerVars<'_> {
    fn get(&self, i: usize) -> Var {
        self.0[i]
    }
}

impl ParamVars {
    pub fn from_vars(all: Vec<Var>) -> Self {
        assert!(all.len() >= 4 && (all.len() - 4).is_multiple_of(TENSORS_PER_LAYER));
        Self { all }
    }

    pub fn all(&self) -> &[Var] {
        &self.all
    }

    pub fn node_embeddings(&self) -> Var {
        self.all[0]
    }

    pub fn hop_positions(&self) -> Var {
        self.all[1]
    }

    pub fn num_layers(&self) -> usize {
        (self.all.len() - 4) / TENSORS_PER_LAYER
    }

    pub(crate) fn layer(&self, l: usize) -> LayerVars<'_> {
        let start = 2 + l * TENSORS_PER_LAYER;
        LayerVars(&self.all[start..start + TENSORS_PER_LAYER])
    }

    pub fn nib_w1(&self) -> Var {
        self.all[self.all.len() - 2]
    }

    pub fn nib_w2(&self) -> Var {
        self.all[self.all.len() - 1]
    }
}

/// Row gather from the node embedding table.
pub fn embed_lookup<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    ids: &[u32],
) -> Result<Var, KernelError> {
    let ids: Vec<usize> = ids.iter().map(|&v| v as usize).collect();
    tape.gather(vars.node_embeddings(), &ids)
}

/// Runs the encoder on `seq` and returns the coding at the target row.
pub fn encode<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    seq: &TokenSequence,
    heads: usize,
) -> Result<Var, KernelError> {
    if seq.is_empty() {
        return Err(KernelError::Shape("empty token sequence".into()));
    }
    let nodes = embed_lookup(tape, vars, &seq.nodes)?;
    let positions = tape.gather(vars.hop_positions(), &seq.hops)?;
    let mut x = tape.add(nodes, positions)?;
    let eps = T::lit(LAYER_NORM_EPS);
    for l in 0..vars.num_layers() {
        let lv = vars.layer(l);
        let q = tape.linear(x, lv.get(0), lv.get(1))?;
        let k = tape.linear(x, lv.get(2), lv.get(3))?;
        let v = tape.linear(x, lv.get(4), lv.get(5))?;
        let q = tape.split_heads(q, heads)?;
        let k = tape.split_heads(k, heads)?;
        let v = tape.split_heads(v, heads)?;
        let att = tape.attention(q, k, v)?;
        let att = tape.merge_heads(att)?;
        let out = tape.linear(att, lv.get(6), lv.get(7))?;
        let res = tape.add(x, out)?;
        x = tape.layer_norm(res, lv.get(8), lv.get(9), eps)?;

        let hidden = tape.linear(x, lv.get(10), lv.get(11))?;
        let hidden = tape.relu(hidden);
        let out = tape.linear(hidden, lv.get(12), lv.get(13))?;
        let res = tape.add(x, out)?;
        x = tape.layer_norm(res, lv.get(14), lv.get(15), eps)?;
    }
    tape.row(x, 0)
}
