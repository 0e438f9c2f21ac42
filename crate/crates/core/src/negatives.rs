//! Negative sampling: uniform easy negatives from outside the subgraph and
//! hard negatives taken from the end of second-order random walks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ensure, ConfigError};
use crate::graph::{BipartiteGraph, NodeId};
use crate::sampler::MaskedSubgraph;

/// Re-walk attempts before a hard negative falls back to an easy one.
pub const HARD_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    /// Return parameter.
    pub p: f64,
    /// In-out parameter.
    pub q: f64,
    /// Walk length in steps.
    pub length: usize,
    pub hard_count: usize,
    pub easy_count: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            p: 1.0,
            q: 0.5,
            length: 10,
            hard_count: 16,
            easy_count: 4096,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(
            self.p > 0.0 && self.p.is_finite(),
            "walk.p",
            "must be positive",
        )?;
        ensure(
            self.q > 0.0 && self.q.is_finite(),
            "walk.q",
            "must be positive",
        )?;
        ensure(self.length >= 2, "walk.length", "must be at least 2")?;
        ensure(
            self.easy_count + self.hard_count >= 1,
            "walk.easy_count",
            "need at least one negative",
        )
    }

    /// Logs a warning when walks are not expected to leave an `hops`-hop
    /// neighborhood.
    pub fn check_depth(&self, hops: usize) {
        let depth = expected_depth(self);
        if depth <= hops as f64 {
            log::warn!(
                "expected walk depth {depth:.2} does not exceed hop count {hops}; \
                 hard negatives will mostly be rejected"
            );
        }
    }
}

/// `L · p / (p + pq + q)`: approximate upper bound on how far from the start
/// a walk ends up.
pub fn expected_depth(cfg: &WalkConfig) -> f64 {
    let (p, q) = (cfg.p, cfg.q);
    cfg.length as f64 * p / (p + p * q + q)
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum NegativeError {
    #[error("every node is forbidden; no negative can be drawn")]
    Exhausted,
    #[error("walk start {0} is isolated")]
    Isolated(NodeId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NegativeSet {
    pub easy: Vec<NodeId>,
    pub hard: Vec<NodeId>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.easy.len() + self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Easy negatives followed by hard ones.
    pub fn all(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.easy.iter().chain(&self.hard).copied()
    }
}

/// Sorted node set used for O(log n) exclusion checks.
pub trait Forbidden {
    fn forbids(&self, v: NodeId) -> bool;
    fn count(&self) -> usize;
}

impl Forbidden for [NodeId] {
    fn forbids(&self, v: NodeId) -> bool {
        self.binary_search(&v).is_ok()
    }

    fn count(&self) -> usize {
        self.len()
    }
}

/// Unnormalized second-order weight for stepping `prev -> cur -> x`, for
/// every neighbor `x` of `cur` (aligned with `g.neighbors(cur)`).
pub fn transition_weights(
    g: &BipartiteGraph,
    prev: NodeId,
    cur: NodeId,
    p: f64,
    q: f64,
    out: &mut Vec<f64>,
) {
    out.clear();
    out.extend(g.neighbors_unchecked(cur).iter().map(|&x| {
        if x == prev {
            1.0 / p
        } else if g.has_edge(prev, x) {
            1.0
        } else {
            1.0 / q
        }
    }));
}

fn pick_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

/// Second-order walk of `cfg.length` steps; returns `length + 1` nodes.
pub fn random_walk<R: Rng + ?Sized>(
    g: &BipartiteGraph,
    start: NodeId,
    cfg: &WalkConfig,
    rng: &mut R,
) -> Result<Vec<NodeId>, NegativeError> {
    let first = g.neighbors_unchecked(start);
    if first.is_empty() {
        return Err(NegativeError::Isolated(start));
    }
    let mut path = Vec::with_capacity(cfg.length + 1);
    path.push(start);
    path.push(first[rng.gen_range(0..first.len())]);
    let mut weights = Vec::new();
    while path.len() <= cfg.length {
        let (prev, cur) = (path[path.len() - 2], path[path.len() - 1]);
        transition_weights(g, prev, cur, cfg.p, cfg.q, &mut weights);
        // `cur` was reached from `prev`, so it has at least one neighbor.
        let next = g.neighbors_unchecked(cur)[pick_weighted(&weights, rng)];
        path.push(next);
    }
    Ok(path)
}

/// `count` nodes drawn uniformly with replacement from `V \ forbidden`.
pub fn sample_easy<R: Rng + ?Sized, F: Forbidden + ?Sized>(
    g: &BipartiteGraph,
    count: usize,
    forbidden: &F,
    rng: &mut R,
) -> Result<Vec<NodeId>, NegativeError> {
    let n = g.num_nodes();
    if forbidden.count() * 2 >= n {
        // Dense exclusion: enumerate the complement instead of rejecting.
        let pool: Vec<NodeId> = (0..n as NodeId)
            .filter(|&v| !forbidden.forbids(v))
            .collect();
        if pool.is_empty() {
            return Err(NegativeError::Exhausted);
        }
        return Ok((0..count)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect());
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v = rng.gen_range(0..n) as NodeId;
        if !forbidden.forbids(v) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Hard negatives: the last node of `cfg.hard_count` walks from `target`,
/// re-walking up to [`HARD_RETRIES`] times on a forbidden endpoint and
/// falling back to an easy negative after that.
pub fn sample_hard<R: Rng + ?Sized, F: Forbidden + ?Sized>(
    g: &BipartiteGraph,
    target: NodeId,
    cfg: &WalkConfig,
    forbidden: &F,
    rng: &mut R,
) -> Result<Vec<NodeId>, NegativeError> {
    hard_walks(g, target, cfg, forbidden, rng, &mut |_| {})
}

/// [`sample_hard`] that also returns every walk taken, retries included.
/// Consumes the RNG exactly like `sample_hard`.
pub fn sample_hard_traced<R: Rng + ?Sized, F: Forbidden + ?Sized>(
    g: &BipartiteGraph,
    target: NodeId,
    cfg: &WalkConfig,
    forbidden: &F,
    rng: &mut R,
) -> Result<(Vec<NodeId>, Vec<Vec<NodeId>>), NegativeError> {
    let mut walks = Vec::new();
    let hard = hard_walks(g, target, cfg, forbidden, rng, &mut |p| {
        walks.push(p.to_vec())
    })?;
    Ok((hard, walks))
}

fn hard_walks<R: Rng + ?Sized, F: Forbidden + ?Sized>(
    g: &BipartiteGraph,
    target: NodeId,
    cfg: &WalkConfig,
    forbidden: &F,
    rng: &mut R,
    on_walk: &mut dyn FnMut(&[NodeId]),
) -> Result<Vec<NodeId>, NegativeError> {
    let mut out = Vec::with_capacity(cfg.hard_count);
    for _ in 0..cfg.hard_count {
        let mut found = None;
        for _ in 0..=HARD_RETRIES {
            let path = random_walk(g, target, cfg, rng)?;
            on_walk(&path);
            let end = *path.last().expect("nonempty walk");
            if !forbidden.forbids(end) {
                found = Some(end);
                break;
            }
        }
        match found {
            Some(v) => out.push(v),
            None => out.extend(sample_easy(g, 1, forbidden, rng)?),
        }
    }
    Ok(out)
}

/// Negatives for one training instance; nothing in the subgraph (which
/// includes the masked positives) is ever returned.
pub fn sample_negatives<R: Rng + ?Sized>(
    g: &BipartiteGraph,
    ms: &MaskedSubgraph,
    cfg: &WalkConfig,
    rng: &mut R,
) -> Result<NegativeSet, NegativeError> {
    let forbidden = ms.subgraph_nodes.as_slice();
    let easy = sample_easy(g, cfg.easy_count, forbidden, rng)?;
    let hard = sample_hard(g, ms.target, cfg, forbidden, rng)?;
    Ok(NegativeSet { easy, hard })
}
