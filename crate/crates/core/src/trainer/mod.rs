//! Training loop: instance assembly, forward/backward, Adagrad, checkpoints.
//!
//! Every random draw is keyed by `(seed, step, position in batch)`, so a run
//! is a pure function of its config. Gradients are reduced in a fixed order
//! regardless of thread count, which makes parallel and reference mode
//! produce the same bits.

mod adagrad;
mod checkpoint;
mod init;

pub use adagrad::{
    adagrad_step, adagrad_update, AdagradState, NonFiniteGradient, ParamGrads, ADAGRAD_EPS,
};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use init::xavier_init;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ensure, ConfigError};
use crate::encoder::{embed_lookup, encode, EncoderConfig, ModelParams, ParamVars};
use crate::graph::{BipartiteGraph, NodeId};
use crate::kernels::{KernelError, Tape, Var};
use crate::negatives::{sample_negatives, NegativeError, NegativeSet, WalkConfig};
use crate::objectives::{info_nce_multihop, nib_loss, total_loss, LossConfig};
use crate::sampler::{
    flatten, mask_multi_hop, sample_subgraph, MaskedSubgraph, SampleError, SamplerConfig,
    TokenSequence,
};
use crate::scalar::Scalar;

/// Instances per reduction chunk. Fixed so the summation order does not
/// depend on the thread count.
const CHUNK: usize = 8;

const STREAM_INIT: u64 = 0;
const STREAM_INSTANCE: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_interval: u64,
    /// Also use item nodes as training targets.
    pub items_as_targets: bool,
    /// Fan instances out over the rayon pool. Results are identical either way.
    pub parallel: bool,
    pub sampler: SamplerConfig,
    pub walk: WalkConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            learning_rate: 0.001,
            epochs: 10,
            seed: 0,
            checkpoint_interval: 0,
            items_as_targets: false,
            parallel: true,
            sampler: SamplerConfig::default(),
            walk: WalkConfig::default(),
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(
            self.batch_size >= 1,
            "train.batch_size",
            "must be at least 1",
        )?;
        ensure(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "train.learning_rate",
            "must be positive",
        )?;
        self.sampler.validate()?;
        self.walk.validate()?;
        self.loss.validate()?;
        self.encoder.validate()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("every target in the batch was skipped")]
    EmptyBatch,
    #[error("graph has no trainable targets")]
    NoTargets,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("step {step}: {source}")]
    NonFinite {
        step: u64,
        source: NonFiniteGradient,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not fit this graph/config: {0}")]
    Incompatible(String),
}

/// splitmix64 over the parts; used to derive independent RNG streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Everything sampled for one target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Instance {
    pub subgraph: MaskedSubgraph,
    pub sequence: TokenSequence,
    pub negatives: NegativeSet,
}

/// Samples, masks and draws negatives for `target`. `None` means the
/// instance must be skipped (isolated target or nothing left to sample
/// negatives from).
pub fn build_instance<R: rand::Rng + ?Sized>(
    graph: &BipartiteGraph,
    target: NodeId,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<Instance>, TrainError> {
    let raw = match sample_subgraph(graph, target, &cfg.sampler, rng) {
        Ok(raw) => raw,
        Err(SampleError::Isolated(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let subgraph = mask_multi_hop(&raw, rng);
    if subgraph.realized_hops() == 0 {
        return Ok(None);
    }
    let negatives = match sample_negatives(graph, &subgraph, &cfg.walk, rng) {
        Ok(n) => n,
        Err(NegativeError::Exhausted | NegativeError::Isolated(_)) => return Ok(None),
    };
    let sequence = flatten(&subgraph);
    Ok(Some(Instance {
        subgraph,
        sequence,
        negatives,
    }))
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub vanilla: Var,
    pub nib: Var,
    pub total: Var,
}

/// Records the losses of one instance on `tape`.
pub fn instance_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    inst: &Instance,
    loss: &LossConfig,
    heads: usize,
) -> Result<LossVars, KernelError> {
    let coding = encode(tape, vars, &inst.sequence, heads)?;
    let pos_ids: Vec<NodeId> = inst
        .subgraph
        .masked_positives
        .iter()
        .map(|t| t.node)
        .collect();
    let positives = embed_lookup(tape, vars, &pos_ids)?;
    let neg_ids: Vec<NodeId> = inst.negatives.all().collect();
    let negatives = embed_lookup(tape, vars, &neg_ids)?;
    let vanilla = info_nce_multihop(tape, coding, positives, negatives, T::lit(loss.tau))?;
    let inputs = embed_lookup(tape, vars, &inst.sequence.nodes)?;
    let nib = nib_loss(
        tape,
        coding,
        positives,
        inputs,
        vars.nib_w1(),
        vars.nib_w2(),
        T::lit(loss.beta),
    )?;
    let total = total_loss(tape, vanilla, nib, T::lit(loss.eta))?;
    Ok(LossVars {
        vanilla,
        nib,
        total,
    })
}

/// Loss components of one instance, or a mean over several.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub vanilla: f64,
    pub nib: f64,
    pub total: f64,
}

impl LossValues {
    fn add(&mut self, o: &LossValues) {
        self.vanilla += o.vanilla;
        self.nib += o.nib;
        self.total += o.total;
    }
}

/// Forward and backward for one instance.
pub fn instance_gradients<T: Scalar>(
    params: &ModelParams<T>,
    inst: &Instance,
    cfg: &TrainConfig,
) -> Result<(ParamGrads<T>, LossValues), KernelError> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let lv = instance_loss(&mut tape, &vars, inst, &cfg.loss, cfg.encoder.heads)?;
    let values = LossValues {
        vanilla: tape.value(lv.vanilla).item().to_f64_lossy(),
        nib: tape.value(lv.nib).item().to_f64_lossy(),
        total: tape.value(lv.total).item().to_f64_lossy(),
    };
    let mut grads = tape.backward(lv.total)?;
    let all = vars.all();
    let embedding_rows = grads.take_rows(all[0]);
    let dense = all[1..]
        .iter()
        .map(|&v| grads.to_dense(v).into_data())
        .collect();
    Ok((
        ParamGrads {
            embedding_rows,
            dense,
        },
        values,
    ))
}

struct ChunkResult<T> {
    grads: ParamGrads<T>,
    losses: LossValues,
    instances: usize,
}

fn run_chunk<T: Scalar>(
    graph: &BipartiteGraph,
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    step: u64,
    first: usize,
    targets: &[NodeId],
) -> Result<ChunkResult<T>, TrainError> {
    let mut out = ChunkResult {
        grads: ParamGrads::zeros(params),
        losses: LossValues::default(),
        instances: 0,
    };
    for (offset, &target) in targets.iter().enumerate() {
        let index = (first + offset) as u64;
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_INSTANCE, step, index]));
        let Some(inst) = build_instance(graph, target, cfg, &mut rng)? else {
            continue;
        };
        let (g, l) = instance_gradients(params, &inst, cfg)?;
        out.grads.accumulate(&g);
        out.losses.add(&l);
        out.instances += 1;
    }
    Ok(out)
}

/// Mean loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: u64,
    pub vanilla: f64,
    pub nib: f64,
    pub total: f64,
    pub instances: usize,
}

/// One synchronous step over `targets`: per-instance gradients, averaged,
/// then a single Adagrad update.
pub fn train_step<T: Scalar>(
    graph: &BipartiteGraph,
    params: &mut ModelParams<T>,
    state: &mut AdagradState<T>,
    targets: &[NodeId],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepLosses, TrainError> {
    let shared: &ModelParams<T> = params;
    let work =
        |(c, chunk): (usize, &[NodeId])| run_chunk(graph, shared, cfg, step, c * CHUNK, chunk);
    let chunks: Vec<ChunkResult<T>> = if cfg.parallel {
        targets
            .par_chunks(CHUNK)
            .enumerate()
            .map(work)
            .collect::<Result<_, _>>()?
    } else {
        targets
            .chunks(CHUNK)
            .enumerate()
            .map(work)
            .collect::<Result<_, _>>()?
    };

    let mut iter = chunks.into_iter();
    let mut total = iter.next().ok_or(TrainError::EmptyBatch)?;
    for c in iter {
        total.grads.accumulate(&c.grads);
        total.losses.add(&c.losses);
        total.instances += c.instances;
    }
    if total.instances == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let n = total.instances as f64;
    total.grads.scale(T::lit(1.0 / n));
    adagrad_step(params, &total.grads, state, T::lit(cfg.learning_rate))
        .map_err(|source| TrainError::NonFinite { step, source })?;
    Ok(StepLosses {
        step,
        vanilla: total.losses.vanilla / n,
        nib: total.losses.nib / n,
        total: total.losses.total / n,
        instances: total.instances,
    })
}

/// Owns the model and optimizer state and walks through epochs.
///
/// Step `s` belongs to epoch `s / steps_per_epoch`; the epoch's target order
/// is a shuffle keyed by the seed and the epoch number, so resuming from a
/// saved step needs no other state.
pub struct Trainer<'g, T: Scalar> {
    graph: &'g BipartiteGraph,
    cfg: TrainConfig,
    params: ModelParams<T>,
    state: AdagradState<T>,
    targets: Vec<NodeId>,
    step: u64,
    epoch_order: Option<(u64, Vec<NodeId>)>,
}

impl<'g, T: Scalar> Trainer<'g, T> {
    pub fn new(graph: &'g BipartiteGraph, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_INIT]));
        let params = ModelParams::xavier(
            graph.num_nodes(),
            cfg.sampler.hops(),
            &cfg.encoder,
            &mut rng,
        );
        let state = AdagradState::new(&params);
        Self::assemble(graph, cfg, params, state, 0)
    }

    pub fn from_checkpoint(
        graph: &'g BipartiteGraph,
        cfg: TrainConfig,
        ckpt: Checkpoint<T>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if ckpt.encoder != cfg.encoder {
            return Err(TrainError::Incompatible(format!(
                "encoder {:?} vs configured {:?}",
                ckpt.encoder, cfg.encoder
            )));
        }
        if ckpt.user_ids != graph.raw_user_ids() || ckpt.item_ids != graph.raw_item_ids() {
            return Err(TrainError::Incompatible("node id maps differ".into()));
        }
        if ckpt.params.max_hop() != cfg.sampler.hops() {
            return Err(TrainError::Incompatible(format!(
                "checkpoint has {} hops, config has {}",
                ckpt.params.max_hop(),
                cfg.sampler.hops()
            )));
        }
        Self::assemble(graph, cfg, ckpt.params, ckpt.optimizer, ckpt.step)
    }

    fn assemble(
        graph: &'g BipartiteGraph,
        cfg: TrainConfig,
        params: ModelParams<T>,
        state: AdagradState<T>,
        step: u64,
    ) -> Result<Self, TrainError> {
        cfg.walk.check_depth(cfg.sampler.hops());
        let last = if cfg.items_as_targets {
            graph.num_nodes()
        } else {
            graph.num_users()
        };
        let targets: Vec<NodeId> = (0..last as NodeId)
            .filter(|&v| graph.degree(v) > 0)
            .collect();
        if targets.is_empty() {
            return Err(TrainError::NoTargets);
        }
        Ok(Self {
            graph,
            cfg,
            params,
            state,
            targets,
            step,
            epoch_order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn optimizer(&self) -> &AdagradState<T> {
        &self.state
    }

    /// Number of steps already taken.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn targets(&self) -> &[NodeId] {
        &self.targets
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.targets.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch(&mut self, step: u64) -> Vec<NodeId> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order = self.targets.clone();
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, STREAM_SHUFFLE, epoch]));
            order.shuffle(&mut rng);
            self.epoch_order = Some((epoch, order));
        }
        let order = &self.epoch_order.as_ref().expect("just set").1;
        let b = (step % spe) as usize * self.cfg.batch_size;
        order[b..(b + self.cfg.batch_size).min(order.len())].to_vec()
    }

    /// Takes the next step. An all-skipped batch is logged and counted as a
    /// step without an update.
    pub fn step(&mut self) -> Result<Option<StepLosses>, TrainError> {
        let step = self.step;
        let batch = self.batch(step);
        let out = match train_step(
            self.graph,
            &mut self.params,
            &mut self.state,
            &batch,
            &self.cfg,
            step,
        ) {
            Ok(l) => Some(l),
            Err(TrainError::EmptyBatch) => {
                log::warn!("step {step}: every target skipped");
                None
            }
            Err(e) => return Err(e),
        };
        self.step += 1;
        Ok(out)
    }

    /// Runs to the end of the configured epochs, calling `on_step` after
    /// each update.
    pub fn run<E>(
        &mut self,
        mut on_step: impl FnMut(&Self, &StepLosses) -> Result<(), E>,
    ) -> Result<(), E>
    where
        E: From<TrainError>,
    {
        while !self.is_done() {
            if let Some(l) = self.step()? {
                on_step(self, &l)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            encoder: self.cfg.encoder.clone(),
            step: self.step,
            user_ids: self.graph.raw_user_ids().to_vec(),
            item_ids: self.graph.raw_item_ids().to_vec(),
            params: self.params.clone(),
            optimizer: self.state.clone(),
        }
    }
}
