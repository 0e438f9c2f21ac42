//! Multi-hop neighborhood sampling and per-hop masking.
//!
//! A target's neighborhood is sampled as a fixed-fanout tree: every hop-`h`
//! node draws `fanouts[h]` children from its own adjacency. One node per hop
//! is then masked out and becomes a positive to predict; everything else is
//! flattened hop-major into the encoder's token sequence.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ensure, ConfigError};
use crate::graph::{BipartiteGraph, NodeId};

/// Upper bound on the number of sampled nodes at the deepest hop.
pub const MAX_FANOUT_PRODUCT: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Neighbors drawn per parent at each hop; its length is the hop count.
    pub fanouts: Vec<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            fanouts: vec![16, 16],
        }
    }
}

impl SamplerConfig {
    pub fn new(fanouts: &[usize]) -> Self {
        Self {
            fanouts: fanouts.to_vec(),
        }
    }

    pub fn hops(&self) -> usize {
        self.fanouts.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(
            !self.fanouts.is_empty(),
            "sampler.fanouts",
            "need at least one hop",
        )?;
        ensure(
            self.fanouts.iter().all(|&s| s >= 1),
            "sampler.fanouts",
            "every fanout must be at least 1",
        )?;
        let product = self
            .fanouts
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s));
        ensure(
            matches!(product, Some(p) if p <= MAX_FANOUT_PRODUCT),
            "sampler.fanouts",
            "product of fanouts must not exceed 512",
        )
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SampleError {
    /// The target has no neighbors; the instance should be skipped.
    #[error("skip-instance: node {0} is isolated")]
    Isolated(NodeId),
    #[error("node {0} is out of range")]
    OutOfRange(NodeId),
}

/// Per-hop sampled node lists before masking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RawSubgraph {
    pub target: NodeId,
    /// `hops[h]` holds the hop-`h+1` samples.
    pub hops: Vec<Vec<NodeId>>,
    /// `parents[h][j]` indexes the hop-`h` list entry that produced
    /// `hops[h][j]`; hop-1 parents all point at the target (index 0).
    pub parents: Vec<Vec<u32>>,
}

/// A node together with its hop distance index (0 = target).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Token {
    pub node: NodeId,
    pub hop: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MaskedSubgraph {
    pub target: NodeId,
    /// Target first, then the unmasked samples hop by hop.
    pub kept_tokens: Vec<Token>,
    /// One masked node per realized hop, in hop order.
    pub masked_positives: Vec<Token>,
    /// Sorted, deduplicated set of every sampled node including the target.
    pub subgraph_nodes: Vec<NodeId>,
}

impl MaskedSubgraph {
    pub fn realized_hops(&self) -> usize {
        self.masked_positives.len()
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.subgraph_nodes.binary_search(&v).is_ok()
    }
}

/// Encoder input: node ids paired with hop position indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenSequence {
    pub nodes: Vec<NodeId>,
    pub hops: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Samples `count` entries of `pool`: distinct when the pool is large
/// enough, uniform with replacement otherwise.
fn draw<R: Rng + ?Sized>(pool: &[NodeId], count: usize, rng: &mut R, out: &mut Vec<NodeId>) {
    if pool.len() >= count {
        out.extend(
            index::sample(rng, pool.len(), count)
                .into_iter()
                .map(|i| pool[i]),
        );
    } else {
        out.extend((0..count).map(|_| pool[rng.gen_range(0..pool.len())]));
    }
}

pub fn sample_subgraph<R: Rng + ?Sized>(
    g: &BipartiteGraph,
    target: NodeId,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<RawSubgraph, SampleError> {
    if target as usize >= g.num_nodes() {
        return Err(SampleError::OutOfRange(target));
    }
    if g.degree(target) == 0 {
        return Err(SampleError::Isolated(target));
    }
    let mut hops: Vec<Vec<NodeId>> = Vec::with_capacity(cfg.hops());
    let mut parents: Vec<Vec<u32>> = Vec::with_capacity(cfg.hops());
    let mut frontier = vec![target];
    for &fanout in &cfg.fanouts {
        let mut level = Vec::with_capacity(frontier.len() * fanout);
        let mut links = Vec::with_capacity(frontier.len() * fanout);
        for (pi, &parent) in frontier.iter().enumerate() {
            let pool = g.neighbors_unchecked(parent);
            if pool.is_empty() {
                continue;
            }
            let before = level.len();
            draw(pool, fanout, rng, &mut level);
            links.extend(std::iter::repeat_n(pi as u32, level.len() - before));
        }
        if level.is_empty() {
            break;
        }
        hops.push(level.clone());
        parents.push(links);
        frontier = level;
    }
    Ok(RawSubgraph {
        target,
        hops,
        parents,
    })
}

/// Masks one uniformly chosen position per hop.
///
/// Every occurrence of a masked node is dropped from the context so the
/// encoder never sees the node it must predict. Positions holding the
/// target or an already-masked node are not eligible; a hop with no
/// eligible position ends masking there and deeper hops are discarded.
pub fn mask_multi_hop<R: Rng + ?Sized>(raw: &RawSubgraph, rng: &mut R) -> MaskedSubgraph {
    let mut masked: Vec<Token> = Vec::with_capacity(raw.hops.len());
    for (h, level) in raw.hops.iter().enumerate() {
        let eligible: Vec<usize> = level
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v != raw.target && masked.iter().all(|t| t.node != v))
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            break;
        }
        let pick = eligible[rng.gen_range(0..eligible.len())];
        masked.push(Token {
            node: level[pick],
            hop: h + 1,
        });
    }

    let is_masked = |v: NodeId| masked.iter().any(|t| t.node == v);
    let mut kept_tokens = vec![Token {
        node: raw.target,
        hop: 0,
    }];
    for (h, level) in raw.hops.iter().take(masked.len()).enumerate() {
        kept_tokens.extend(level.iter().filter(|&&v| !is_masked(v)).map(|&v| Token {
            node: v,
            hop: h + 1,
        }));
    }

    let mut subgraph_nodes: Vec<NodeId> = std::iter::once(raw.target)
        .chain(raw.hops.iter().flatten().copied())
        .collect();
    subgraph_nodes.sort_unstable();
    subgraph_nodes.dedup();

    MaskedSubgraph {
        target: raw.target,
        kept_tokens,
        masked_positives: masked,
        subgraph_nodes,
    }
}

/// Target token followed by the kept tokens, hop-major.
pub fn flatten(ms: &MaskedSubgraph) -> TokenSequence {
    TokenSequence {
        nodes: ms.kept_tokens.iter().map(|t| t.node).collect(),
        hops: ms.kept_tokens.iter().map(|t| t.hop).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_graph() -> BipartiteGraph {
        // user 0 - item 0 - user 1
        BipartiteGraph::from_edges(&[(0, 0), (1, 0)]).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig::new(&[]).validate().is_err());
        assert!(SamplerConfig::new(&[4, 0]).validate().is_err());
        assert!(SamplerConfig::new(&[32, 16]).validate().is_ok());
        assert!(SamplerConfig::new(&[32, 32]).validate().is_err());
        assert!(SamplerConfig::new(&[usize::MAX, 2]).validate().is_err());
    }

    #[test]
    fn path_graph_is_forced() {
        let g = path_graph();
        let (u, i, v) = (0, g.item_node(0).unwrap(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let raw = sample_subgraph(&g, u, &SamplerConfig::new(&[2, 2]), &mut rng).unwrap();
            assert_eq!(raw.hops[0], vec![i, i]);
            assert!(raw.hops[1].iter().all(|&x| x == u || x == v));
            assert_eq!(raw.hops[1].len(), 4);
        }
    }

    #[test]
    fn star_samples_are_neighbors() {
        let edges: Vec<(u64, u64)> = (0..100).map(|i| (0, i)).collect();
        let g = BipartiteGraph::from_edges(&edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = sample_subgraph(&g, 0, &SamplerConfig::new(&[16]), &mut rng).unwrap();
        assert_eq!(raw.hops[0].len(), 16);
        assert!(raw.hops[0].iter().all(|&x| g.has_edge(0, x)));
        let mut distinct = raw.hops[0].clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 16);
    }

    #[test]
    fn isolated_target_signals_skip() {
        let g = BipartiteGraph::with_nodes([9], [], &[(0, 0)]).unwrap();
        let lonely = g.user_node(9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            sample_subgraph(&g, lonely, &SamplerConfig::default(), &mut rng),
            Err(SampleError::Isolated(lonely))
        );
        assert_eq!(
            sample_subgraph(&g, 99, &SamplerConfig::default(), &mut rng),
            Err(SampleError::OutOfRange(99))
        );
    }

    fn raw(target: NodeId, hops: Vec<Vec<NodeId>>) -> RawSubgraph {
        let parents = hops.iter().map(|h| vec![0; h.len()]).collect();
        RawSubgraph {
            target,
            hops,
            parents,
        }
    }

    #[test]
    fn one_mask_per_hop() {
        let r = raw(10, vec![vec![1, 2], vec![3]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ms = mask_multi_hop(&r, &mut rng);
        assert_eq!(ms.masked_positives.len(), 2);
        assert!(matches!(
            ms.masked_positives[0],
            Token {
                node: 1 | 2,
                hop: 1
            }
        ));
        assert_eq!(ms.masked_positives[1], Token { node: 3, hop: 2 });
        assert!(ms.kept_tokens.iter().all(|t| t.hop != 2));
        assert_eq!(ms.kept_tokens.len(), 2);
        assert_eq!(ms.subgraph_nodes, vec![1, 2, 3, 10]);
    }

    #[test]
    fn mask_position_is_uniform() {
        let r = raw(10, vec![vec![1, 2]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| mask_multi_hop(&r, &mut rng).masked_positives[0].node == 1)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn duplicates_of_masked_node_leave_the_context() {
        let r = raw(10, vec![vec![1, 1, 1], vec![10, 10]]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ms = mask_multi_hop(&r, &mut rng);
        assert_eq!(ms.masked_positives, vec![Token { node: 1, hop: 1 }]);
        // hop 2 holds only the target, so it cannot be masked and is dropped
        assert_eq!(ms.kept_tokens, vec![Token { node: 10, hop: 0 }]);
    }

    #[test]
    fn single_hop_masking() {
        let r = raw(0, vec![vec![5, 6, 7]]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ms = mask_multi_hop(&r, &mut rng);
        assert_eq!(ms.realized_hops(), 1);
        assert_eq!(ms.kept_tokens.len(), 3);
    }

    #[test]
    fn flatten_orders_hop_major_and_hides_masks() {
        let ms = MaskedSubgraph {
            target: 7,
            kept_tokens: vec![
                Token { node: 7, hop: 0 },
                Token { node: 1, hop: 1 },
                Token { node: 2, hop: 2 },
            ],
            masked_positives: vec![Token { node: 3, hop: 1 }, Token { node: 4, hop: 2 }],
            subgraph_nodes: vec![1, 2, 3, 4, 7],
        };
        let seq = flatten(&ms);
        assert_eq!(seq.nodes, vec![7, 1, 2]);
        assert_eq!(seq.hops, vec![0, 1, 2]);

        let empty = MaskedSubgraph {
            kept_tokens: vec![Token { node: 7, hop: 0 }],
            ..ms
        };
        assert_eq!(flatten(&empty).nodes, vec![7]);
    }

    #[test]
    fn same_seed_same_instance() {
        let edges: Vec<(u64, u64)> = (0..30).map(|i| (i % 7, (i * 3) % 11)).collect();
        let g = BipartiteGraph::from_edges(&edges).unwrap();
        let cfg = SamplerConfig::new(&[4, 3]);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let raw = sample_subgraph(&g, 2, &cfg, &mut rng).unwrap();
            mask_multi_hop(&raw, &mut rng)
        };
        assert_eq!(run(), run());
    }
}
