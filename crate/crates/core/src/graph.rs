//! Immutable bipartite interaction graph in compressed adjacency form.
//!
//! Users and items share one dense node-id space: users occupy
//! `0..num_users`, items occupy `num_users..num_users + num_items`. Raw ids
//! from the input file are kept so embeddings can be exported under their
//! original names.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::num::IntErrorKind;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

/// Dense internal node id.
pub type NodeId = u32;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed edge at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("edge list contains no interactions")]
    Empty,
    #[error("id overflow at line {line}")]
    IdOverflow { line: usize },
    #[error("too many nodes for a 32-bit node id space: {0}")]
    TooManyNodes(u64),
    #[error("node id {id} out of range (graph has {num_nodes} nodes)")]
    OutOfRange { id: u64, num_nodes: usize },
}

/// Side of the bipartition a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    num_users: usize,
    num_items: usize,
    offsets: Vec<usize>,
    neighbors: Vec<NodeId>,
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GraphStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub sparsity: f64,
}

impl GraphStats {
    pub fn from_counts(num_users: usize, num_items: usize, num_interactions: usize) -> Self {
        let cells = num_users as f64 * num_items as f64;
        Self {
            num_users,
            num_items,
            num_interactions,
            sparsity: if cells > 0.0 {
                num_interactions as f64 / cells
            } else {
                0.0
            },
        }
    }
}

impl BipartiteGraph {
    /// Builds a graph from raw `(user, item)` pairs. Duplicates collapse;
    /// dense ids follow ascending raw-id order.
    pub fn from_edges(raw: &[(u64, u64)]) -> Result<Self, GraphError> {
        Self::with_nodes(std::iter::empty(), std::iter::empty(), raw)
    }

    /// Like [`from_edges`](Self::from_edges) but also registers raw users
    /// and items that may have no interactions (isolated nodes).
    pub fn with_nodes(
        users: impl IntoIterator<Item = u64>,
        items: impl IntoIterator<Item = u64>,
        raw: &[(u64, u64)],
    ) -> Result<Self, GraphError> {
        if raw.is_empty() {
            return Err(GraphError::Empty);
        }
        let user_ids: Vec<u64> = raw
            .iter()
            .map(|e| e.0)
            .chain(users)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let item_ids: Vec<u64> = raw
            .iter()
            .map(|e| e.1)
            .chain(items)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let total = user_ids.len() as u64 + item_ids.len() as u64;
        if total > NodeId::MAX as u64 {
            return Err(GraphError::TooManyNodes(total));
        }
        let num_users = user_ids.len();
        let num_nodes = total as usize;

        let mut pairs: Vec<(NodeId, NodeId)> = raw
            .iter()
            .map(|&(u, i)| {
                let u = user_ids.binary_search(&u).expect("collected") as NodeId;
                let i = (num_users + item_ids.binary_search(&i).expect("collected")) as NodeId;
                (u, i)
            })
            .collect();
        pairs.sort_unstable();
        pairs.dedup();

        let mut degree = vec![0usize; num_nodes];
        for &(u, i) in &pairs {
            degree[u as usize] += 1;
            degree[i as usize] += 1;
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut cursor = offsets[..num_nodes].to_vec();
        let mut neighbors = vec![0 as NodeId; 2 * pairs.len()];
        // Pairs are sorted by (user, item), so each user's items land in
        // order; items receive users in ascending order as well.
        for &(u, i) in &pairs {
            neighbors[cursor[u as usize]] = i;
            cursor[u as usize] += 1;
            neighbors[cursor[i as usize]] = u;
            cursor[i as usize] += 1;
        }

        Ok(Self {
            num_users,
            num_items: item_ids.len(),
            offsets,
            neighbors,
            user_ids,
            item_ids,
        })
    }

    /// Reads a tab-separated `user<TAB>item` edge list.
    pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let edges = read_edge_list(path)?;
        Self::from_edges(&edges)
    }

    /// Writes every interaction once as `raw_user<TAB>raw_item`.
    pub fn export_edge_list(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let path = path.as_ref();
        let io_err = |source| GraphError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        for u in 0..self.num_users as NodeId {
            for &i in self.neighbors_unchecked(u) {
                writeln!(out, "{}\t{}", self.raw_id(u), self.raw_id(i)).map_err(io_err)?;
            }
        }
        out.flush().map_err(io_err)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_interactions(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn kind(&self, v: NodeId) -> NodeKind {
        if (v as usize) < self.num_users {
            NodeKind::User
        } else {
            NodeKind::Item
        }
    }

    /// Dense id of the first item.
    pub fn item_offset(&self) -> usize {
        self.num_users
    }

    /// Original id of a node as it appeared in the edge file.
    pub fn raw_id(&self, v: NodeId) -> u64 {
        let v = v as usize;
        if v < self.num_users {
            self.user_ids[v]
        } else {
            self.item_ids[v - self.num_users]
        }
    }

    pub fn user_node(&self, raw: u64) -> Option<NodeId> {
        self.user_ids.binary_search(&raw).ok().map(|i| i as NodeId)
    }

    pub fn item_node(&self, raw: u64) -> Option<NodeId> {
        self.item_ids
            .binary_search(&raw)
            .ok()
            .map(|i| (i + self.num_users) as NodeId)
    }

    pub fn raw_user_ids(&self) -> &[u64] {
        &self.user_ids
    }

    pub fn raw_item_ids(&self) -> &[u64] {
        &self.item_ids
    }

    pub fn neighbors(&self, v: NodeId) -> Result<&[NodeId], GraphError> {
        if (v as usize) >= self.num_nodes() {
            return Err(GraphError::OutOfRange {
                id: v as u64,
                num_nodes: self.num_nodes(),
            });
        }
        Ok(self.neighbors_unchecked(v))
    }

    /// Neighbor slice; panics on an out-of-range id.
    #[inline]
    pub fn neighbors_unchecked(&self, v: NodeId) -> &[NodeId] {
        let v = v as usize;
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn degree(&self, v: NodeId) -> usize {
        let v = v as usize;
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Binary-search membership test on the sorted adjacency.
    #[inline]
    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.neighbors_unchecked(a).binary_search(&b).is_ok()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats::from_counts(self.num_users, self.num_items, self.num_interactions())
    }
}

/// Parses a raw edge list without building a graph. Used for test splits,
/// whose ids may not all exist in the training graph.
pub fn read_edge_list(path: impl AsRef<Path>) -> Result<Vec<(u64, u64)>, GraphError> {
    let path = path.as_ref();
    let io_err = |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = idx + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let (Some(u), Some(i), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(GraphError::Malformed {
                line: lineno,
                reason: "expected exactly two tab-separated fields".into(),
            });
        };
        edges.push((parse_id(u, lineno)?, parse_id(i, lineno)?));
    }
    Ok(edges)
}

fn parse_id(field: &str, line: usize) -> Result<u64, GraphError> {
    field.trim().parse::<u64>().map_err(|e| match e.kind() {
        IntErrorKind::PosOverflow => GraphError::IdOverflow { line },
        _ => GraphError::Malformed {
            line,
            reason: format!("invalid id {field:?}"),
        },
    })
}

/// Writes raw `(user, item)` pairs as a TSV edge list.
pub fn write_edge_list(path: impl AsRef<Path>, edges: &[(u64, u64)]) -> Result<(), GraphError> {
    let path = path.as_ref();
    let io_err = |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for (u, i) in edges {
        writeln!(out, "{u}\t{i}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
