//! Per-sample multi-modal graph over patch and prompt nodes.
//!
//! Nodes are numbered patches first (`0..M`) then prompts (`M..M+P`).
//! Similarity is negative Euclidean distance, so "top-k" means the k
//! smallest distances; equal distances resolve to the lower node index.
//! An edge `src -> dst` makes `src` an in-neighbor of `dst`.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeModality {
    Patch,
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NodeRef {
    pub modality: NodeModality,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopKConfig {
    pub k_text: usize,
    pub k_patch: usize,
    pub k_cross: usize,
}

impl Default for TopKConfig {
    fn default() -> Self {
        Self {
            k_text: 2,
            k_patch: 10,
            k_cross: 8,
        }
    }
}

impl TopKConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_text == 0 || self.k_patch == 0 || self.k_cross == 0 {
            return Err(Error::Invalid("top-k values must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalGraph {
    pub patch_features: Vec<Vector>,
    pub prompt_features: Vec<Vector>,
    pub intra_edges: Vec<Edge>,
    pub inter_edges: Vec<Edge>,
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` entries of `candidates` nearest to `query`, nearest first.
fn nearest(query: &Vector, candidates: &[Vector], skip: Option<usize>, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(j, c)| (squared_distance(query, c), j))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// For each vector, its `min(k, n - 1)` nearest other vectors, nearest first.
pub fn intra_neighbors(features: &[Vector], k: usize) -> Vec<Vec<usize>> {
    features
        .iter()
        .enumerate()
        .map(|(i, f)| nearest(f, features, Some(i), k))
        .collect()
}

/// Union of the `k` nearest prompts of every patch and the `k` nearest
/// patches of every prompt, as sorted `(patch, prompt)` pairs.
pub fn inter_neighbors(patches: &[Vector], prompts: &[Vector], k: usize) -> Vec<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    for (p, f) in patches.iter().enumerate() {
        for t in nearest(f, prompts, None, k) {
            pairs.insert((p, t));
        }
    }
    for (t, f) in prompts.iter().enumerate() {
        for p in nearest(f, patches, None, k) {
            pairs.insert((p, t));
        }
    }
    pairs.into_iter().collect()
}

pub fn build_graph(patches: &[Vector], prompts: &[Vector], config: &TopKConfig) -> Result<MultiModalGraph> {
    config.validate()?;
    let dim = patches
        .first()
        .map(|v| v.len())
        .ok_or_else(|| Error::Invalid("a graph needs at least one patch".into()))?;
    if let Some(v) = patches.iter().chain(prompts).find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: v.len(),
        });
    }
    let m = patches.len();
    let mut intra = Vec::new();
    for (i, ns) in intra_neighbors(patches, config.k_patch).into_iter().enumerate() {
        intra.extend(ns.into_iter().map(|j| Edge { src: j, dst: i }));
    }
    for (i, ns) in intra_neighbors(prompts, config.k_text).into_iter().enumerate() {
        intra.extend(ns.into_iter().map(|j| Edge { src: m + j, dst: m + i }));
    }
    intra.sort_unstable();

    let mut inter = Vec::new();
    if !prompts.is_empty() {
        for (p, t) in inter_neighbors(patches, prompts, config.k_cross) {
            inter.push(Edge { src: p, dst: m + t });
            inter.push(Edge { src: m + t, dst: p });
        }
        inter.sort_unstable();
    }
    Ok(MultiModalGraph {
        patch_features: patches.to_vec(),
        prompt_features: prompts.to_vec(),
        intra_edges: intra,
        inter_edges: inter,
    })
}

impl MultiModalGraph {
    pub fn num_patches(&self) -> usize {
        self.patch_features.len()
    }

    pub fn node_count(&self) -> usize {
        self.patch_features.len() + self.prompt_features.len()
    }

    pub fn dim(&self) -> usize {
        self.patch_features.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn node(&self, i: usize) -> NodeRef {
        let m = self.num_patches();
        if i < m {
            NodeRef {
                modality: NodeModality::Patch,
                position: i,
            }
        } else {
            NodeRef {
                modality: NodeModality::Prompt,
                position: i - m,
            }
        }
    }

    /// Node features in node order.
    pub fn features(&self) -> Vec<Vector> {
        self.patch_features
            .iter()
            .chain(&self.prompt_features)
            .cloned()
            .collect()
    }

    /// Sorted, de-duplicated in-neighbors of every node over both edge sets.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![BTreeSet::new(); self.node_count()];
        for e in self.intra_edges.iter().chain(&self.inter_edges) {
            sets[e.dst].insert(e.src);
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Same nodes and features with every edge removed.
    pub fn without_edges(&self) -> Self {
        Self {
            intra_edges: Vec::new(),
            inter_edges: Vec::new(),
            ..self.clone()
        }
    }

    /// JSON description of node modalities and edge lists (no features).
    pub fn dump(&self) -> serde_json::Value {
        let nodes: Vec<NodeRef> = (0..self.node_count()).map(|i| self.node(i)).collect();
        let edges = |es: &[Edge]| -> Vec<[usize; 2]> { es.iter().map(|e| [e.src, e.dst]).collect() };
        serde_json::json!({
            "nodes": nodes,
            "intra_edges": edges(&self.intra_edges),
            "inter_edges": edges(&self.inter_edges),
        })
    }
}
