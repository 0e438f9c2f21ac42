//! Full-ranking top-k evaluation: every item is scored for every test user.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ensure, ConfigError};
use crate::encoder::{encode, ModelParams};
use crate::graph::{BipartiteGraph, NodeId};
use crate::kernels::{KernelError, Tape, Tensor};
use crate::sampler::{sample_subgraph, SampleError, SamplerConfig, TokenSequence};
use crate::scalar::Scalar;
use crate::trainer::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// Drop a user's training items from their ranking.
    pub exclude_train: bool,
    /// Users scored per parallel task.
    pub user_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            exclude_train: true,
            user_batch: 256,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(self.k >= 1, "eval.k", "must be at least 1")?;
        ensure(
            self.user_batch >= 1,
            "eval.user_batch",
            "must be at least 1",
        )
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("k = {k} exceeds the {available} rankable items")]
    KTooLarge { k: usize, available: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("embedding table has {got} rows, graph has {expected} nodes")]
    NodeCount { got: usize, expected: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
    pub users: usize,
    /// Test pairs whose user or item is not in the training graph.
    #[serde(skip)]
    pub unknown_pairs: usize,
}

/// Scoring table laid out like the node embeddings, with every
/// non-isolated user row replaced by that user's coding.
///
/// The coding is computed from one sampled, unmasked neighborhood (seeded
/// per user), which is the representation InfoNCE trains against item rows.
/// Item rows and isolated users keep their node embeddings.
pub fn coding_table<T: Scalar>(
    params: &ModelParams<T>,
    graph: &BipartiteGraph,
    sampler: &SamplerConfig,
    heads: usize,
    seed: u64,
) -> Result<Tensor<T>, KernelError> {
    let users: Vec<NodeId> = (0..graph.num_users() as NodeId).collect();
    let codings: Vec<Option<Vec<T>>> = users
        .par_iter()
        .map(|&u| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, u as u64]));
            let raw = match sample_subgraph(graph, u, sampler, &mut rng) {
                Ok(raw) => raw,
                Err(SampleError::Isolated(_)) => return Ok(None),
                Err(e) => return Err(KernelError::Domain(e.to_string())),
            };
            let mut seq = TokenSequence {
                nodes: vec![u],
                hops: vec![0],
            };
            for (h, level) in raw.hops.iter().enumerate() {
                seq.nodes.extend_from_slice(level);
                seq.hops.extend(std::iter::repeat_n(h + 1, level.len()));
            }
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let c = encode(&mut tape, &vars, &seq, heads)?;
            Ok(Some(tape.value(c).data().to_vec()))
        })
        .collect::<Result<_, _>>()?;
    let mut table = params.node_embeddings.clone();
    for (u, c) in codings.into_iter().enumerate() {
        if let Some(c) = c {
            table.row_mut(u).copy_from_slice(&c);
        }
    }
    Ok(table)
}

/// Inner product of `user` with every row of `items`.
pub fn score_items<T: Scalar>(user: &[T], items: &Tensor<T>) -> Result<Vec<T>, EvalError> {
    let d = items.last_dim();
    if user.len() != d {
        return Err(EvalError::Dimension(user.len(), d));
    }
    Ok((0..items.rows())
        .map(|r| items.row(r).iter().zip(user).map(|(&a, &b)| a * b).sum())
        .collect())
}

/// The `k` best non-excluded indices, highest score first, ties by index.
pub fn top_k<T: Scalar>(
    scores: &[T],
    k: usize,
    excluded: &HashSet<usize>,
) -> Result<Vec<usize>, EvalError> {
    let available = (0..scores.len()).filter(|i| !excluded.contains(i)).count();
    if k > available {
        return Err(EvalError::KTooLarge { k, available });
    }
    let mut cand: Vec<usize> = (0..scores.len())
        .filter(|i| !excluded.contains(i))
        .collect();
    // total order: NaN ranks last and -0 equals +0
    let key = |i: usize| {
        let s = scores[i].to_f64_lossy() + 0.0;
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    };
    let order = |&a: &usize, &b: &usize| key(b).total_cmp(&key(a)).then(a.cmp(&b));
    if k < cand.len() && k > 0 {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_by(order);
    cand.truncate(k);
    Ok(cand)
}

pub fn recall_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.contains(i))
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-gain NDCG; the ideal ranking puts `min(|relevant|, k)` hits first.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| gain(pos + 1))
        .sum();
    let idcg: f64 = (1..=relevant.len().min(k)).map(gain).sum();
    dcg / idcg
}

/// Scores users against items using rows of a table laid out like the graph
/// (users first, then items), typically [`coding_table`] or the raw node
/// embeddings.
///
/// `test` holds raw `(user, item)` ids. Pairs naming ids absent from the
/// graph are counted in `unknown_pairs` and skipped.
pub fn evaluate<T: Scalar>(
    embeddings: &Tensor<T>,
    graph: &BipartiteGraph,
    test: &[(u64, u64)],
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    cfg.validate()?;
    if embeddings.rows() != graph.num_nodes() {
        return Err(EvalError::NodeCount {
            got: embeddings.rows(),
            expected: graph.num_nodes(),
        });
    }
    let mut relevant: BTreeMap<u32, HashSet<usize>> = BTreeMap::new();
    let mut unknown = 0;
    for &(u, i) in test {
        match (graph.user_node(u), graph.item_node(i)) {
            (Some(un), Some(inode)) => {
                relevant
                    .entry(un)
                    .or_default()
                    .insert(inode as usize - graph.item_offset());
            }
            _ => unknown += 1,
        }
    }
    if unknown > 0 {
        log::warn!("skipped {unknown} test pairs with ids not in the training graph");
    }

    let d = embeddings.last_dim();
    let offset = graph.item_offset();
    let items = Tensor::from_vec(
        &[graph.num_items(), d],
        embeddings.data()[offset * d..].to_vec(),
    )
    .expect("item block of the table");

    let users: Vec<(&u32, &HashSet<usize>)> = relevant.iter().collect();
    let per_user = |(&u, rel): (&u32, &HashSet<usize>)| -> Result<(f64, f64), EvalError> {
        let scores = score_items(embeddings.row(u as usize), &items)?;
        let excluded: HashSet<usize> = if cfg.exclude_train {
            graph
                .neighbors_unchecked(u)
                .iter()
                .map(|&v| v as usize - offset)
                .collect()
        } else {
            HashSet::new()
        };
        let available = graph.num_items() - excluded.len();
        let ranked = top_k(&scores, cfg.k.min(available), &excluded)?;
        Ok((
            recall_at_k(&ranked, rel, cfg.k),
            ndcg_at_k(&ranked, rel, cfg.k),
        ))
    };
    let results: Vec<(f64, f64)> = users
        .par_chunks(cfg.user_batch)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&x| per_user(x))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();

    let n = results.len();
    if n == 0 {
        log::warn!("no users with test interactions; metrics are zero");
    }
    let (r, g) = results
        .iter()
        .fold((0.0, 0.0), |(r, g), &(a, b)| (r + a, g + b));
    let denom = n.max(1) as f64;
    Ok(MetricsReport {
        recall_at_k: r / denom,
        ndcg_at_k: g / denom,
        k: cfg.k,
        users: n,
        unknown_pairs: unknown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> HashSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn scoring_basics() {
        let items = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(
            score_items(&[1.0, 0.0, 0.0], &items).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(score_items(&[0.0; 3], &items).unwrap(), vec![0.0; 3]);
        assert!(score_items(&[0.0; 2], &items).is_err());
    }

    #[test]
    fn top_k_order_exclusion_and_ties() {
        assert_eq!(top_k(&[3.0, 1.0, 2.0], 2, &set(&[])).unwrap(), vec![0, 2]);
        assert_eq!(top_k(&[3.0, 1.0, 2.0], 2, &set(&[0])).unwrap(), vec![2, 1]);
        assert_eq!(top_k(&[5.0; 6], 3, &set(&[])).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            top_k(&[1.0, 2.0], 2, &set(&[1])),
            Err(EvalError::KTooLarge { k: 2, available: 1 })
        ));
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 2, 3], &set(&[1, 3]), 3), 1.0);
        assert_eq!(recall_at_k(&[1, 2, 3], &set(&[7]), 3), 0.0);
        assert_eq!(recall_at_k(&[1, 2, 3], &set(&[2, 9]), 3), 0.5);
    }

    #[test]
    fn ndcg_examples() {
        assert!((ndcg_at_k(&[4, 0], &set(&[4]), 2) - 1.0).abs() < 1e-15);
        assert!((ndcg_at_k(&[0, 4], &set(&[4]), 2) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((ndcg_at_k(&[4, 5, 0], &set(&[4, 5]), 3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn crafted_embeddings_are_perfect() {
        // users 0,1; items 0,1,2. User u's test item is u+1.
        let g = BipartiteGraph::from_edges(&[(0, 0), (1, 0), (0, 2), (1, 1)]).unwrap();
        let mut emb = Tensor::<f64>::zeros(&[5, 3]);
        emb.row_mut(0).copy_from_slice(&[0., 1., 0.]);
        emb.row_mut(1).copy_from_slice(&[0., 0., 1.]);
        for i in 0..3 {
            emb.row_mut(2 + i)[i] = 1.0;
        }
        let cfg = EvalConfig {
            k: 1,
            ..EvalConfig::default()
        };
        let rep = evaluate(&emb, &g, &[(0, 1), (1, 2), (9, 0)], &cfg).unwrap();
        assert_eq!(rep.recall_at_k, 1.0);
        assert_eq!(rep.ndcg_at_k, 1.0);
        assert_eq!(rep.users, 2);
        assert_eq!(rep.unknown_pairs, 1);
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json.as_object().unwrap().len(), 4);
    }

    #[test]
    fn empty_test_set_reports_zero_users() {
        let g = BipartiteGraph::from_edges(&[(0, 0)]).unwrap();
        let rep = evaluate(
            &Tensor::<f32>::zeros(&[2, 2]),
            &g,
            &[],
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.users, 0);
        assert_eq!(rep.recall_at_k, 0.0);
    }
}
