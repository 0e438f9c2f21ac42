//! Stochastic block model generator for bipartite test graphs.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ensure, ConfigError};
use crate::graph::{write_edge_list, GraphError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

impl SbmConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(self.users >= 1, "synth.users", "must be at least 1")?;
        ensure(self.items >= 1, "synth.items", "must be at least 1")?;
        ensure(
            self.blocks >= 1 && self.blocks <= self.users.min(self.items),
            "synth.blocks",
            "must be between 1 and min(users, items)",
        )?;
        ensure(
            (0.0..=1.0).contains(&self.p_in),
            "synth.p_in",
            "must lie in [0, 1]",
        )?;
        ensure(
            (0.0..=1.0).contains(&self.p_out),
            "synth.p_out",
            "must lie in [0, 1]",
        )
    }

    /// Expected number of edges.
    pub fn expected_edges(&self) -> f64 {
        let mut within = 0.0;
        for b in 0..self.blocks {
            within += (block_size(self.users, self.blocks, b)
                * block_size(self.items, self.blocks, b)) as f64;
        }
        let total = (self.users * self.items) as f64;
        within * self.p_in + (total - within) * self.p_out
    }
}

/// Node `i` of `n` belongs to block `i · blocks / n`.
pub fn block_of(i: usize, n: usize, blocks: usize) -> usize {
    i * blocks / n
}

fn block_size(n: usize, blocks: usize, b: usize) -> usize {
    (0..n).filter(|&i| block_of(i, n, blocks) == b).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmGraph {
    pub config: SbmConfig,
    pub user_blocks: Vec<usize>,
    pub item_blocks: Vec<usize>,
    /// Raw `(user, item)` pairs; raw ids are the generator indices.
    #[serde(skip)]
    pub edges: Vec<(u64, u64)>,
}

/// Draws every user–item pair independently.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<SbmGraph, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let user_blocks: Vec<usize> = (0..cfg.users)
        .map(|u| block_of(u, cfg.users, cfg.blocks))
        .collect();
    let item_blocks: Vec<usize> = (0..cfg.items)
        .map(|i| block_of(i, cfg.items, cfg.blocks))
        .collect();
    let mut edges = Vec::new();
    for (u, &bu) in user_blocks.iter().enumerate() {
        for (i, &bi) in item_blocks.iter().enumerate() {
            let p = if bu == bi { cfg.p_in } else { cfg.p_out };
            if rng.gen_bool(p) {
                edges.push((u as u64, i as u64));
            }
        }
    }
    Ok(SbmGraph {
        config: cfg.clone(),
        user_blocks,
        item_blocks,
        edges,
    })
}

/// `<path>.json` next to the edge file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl SbmGraph {
    /// Writes the edge list and the block-assignment sidecar.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let path = path.as_ref();
        write_edge_list(path, &self.edges)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(self).expect("plain data");
        std::fs::write(&side, json).map_err(|source| GraphError::Io {
            path: side.display().to_string(),
            source,
        })
    }
}

/// Raw `(user, item)` pairs.
pub type EdgeList = Vec<(u64, u64)>;

/// Holds out about `fraction` of the edges, never removing a user's or an
/// item's last remaining training edge. Returns `(train, test)`.
pub fn split_edges(edges: &[(u64, u64)], fraction: f64, seed: u64) -> (EdgeList, EdgeList) {
    use std::collections::HashMap;
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut user_deg: HashMap<u64, usize> = HashMap::new();
    let mut item_deg: HashMap<u64, usize> = HashMap::new();
    for &(u, i) in edges {
        *user_deg.entry(u).or_default() += 1;
        *item_deg.entry(i).or_default() += 1;
    }
    let want = (edges.len() as f64 * fraction).round() as usize;
    let mut is_test = vec![false; edges.len()];
    let mut taken = 0;
    for idx in order {
        if taken == want {
            break;
        }
        let (u, i) = edges[idx];
        if user_deg[&u] > 1 && item_deg[&i] > 1 {
            *user_deg.get_mut(&u).unwrap() -= 1;
            *item_deg.get_mut(&i).unwrap() -= 1;
            is_test[idx] = true;
            taken += 1;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, t) in edges.iter().zip(is_test) {
        if t {
            test.push(*e)
        } else {
            train.push(*e)
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p_in: f64, p_out: f64) -> SbmConfig {
        SbmConfig {
            users: 10,
            items: 8,
            blocks: 2,
            p_in,
            p_out,
            seed: 3,
        }
    }

    #[test]
    fn pure_blocks_are_complete_bipartite() {
        let g = generate_sbm(&cfg(1.0, 0.0)).unwrap();
        assert_eq!(g.edges.len(), 5 * 4 * 2);
        for &(u, i) in &g.edges {
            assert_eq!(g.user_blocks[u as usize], g.item_blocks[i as usize]);
        }
        assert_eq!(cfg(1.0, 0.0).expected_edges(), 40.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_sbm(&cfg(1.5, 0.0)).is_err());
        assert!(generate_sbm(&cfg(0.5, -0.1)).is_err());
        let mut c = cfg(0.5, 0.1);
        c.blocks = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_keeps_every_node_in_train() {
        let g = generate_sbm(&cfg(0.8, 0.1)).unwrap();
        let (train, test) = split_edges(&g.edges, 0.2, 1);
        assert_eq!(train.len() + test.len(), g.edges.len());
        for (u, i) in &test {
            assert!(train.iter().any(|e| e.0 == *u));
            assert!(train.iter().any(|e| e.1 == *i));
        }
        assert_eq!(test.len(), (g.edges.len() as f64 * 0.2).round() as usize);
    }
}
