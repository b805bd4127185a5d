//! Variable blocks, their dependency graph and a greedy coloring that groups
//! mutually independent blocks for concurrent sweeps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::RealizationProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SolverKind {
    Esdp,
    Bm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BlockKind {
    Esdp,
    BmU,
    BmV,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block {
    pub agent: usize,
    pub kind: BlockKind,
    /// Sensor columns owned by the block.
    pub columns: std::ops::Range<usize>,
    /// Frozen blocks keep their values and are never swept.
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockPartition {
    pub solver: SolverKind,
    pub blocks: Vec<Block>,
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Index of an agent's block of the given kind.
    pub fn block_of(&self, agent: usize, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Esdp => agent,
            BlockKind::BmU => 2 * agent,
            BlockKind::BmV => 2 * agent + 1,
        }
    }
}

/// One block per agent (ESDP) or a U and a V block per agent (BM). Frozen
/// agents keep their nodes but are marked frozen.
pub fn build_blocks(problem: &RealizationProblem, solver: SolverKind, frozen_agents: &[bool]) -> Result<BlockPartition> {
    let idx = &problem.index;
    for c in &problem.calibrations {
        if idx.owner(c.a) != c.agent || idx.owner(c.b) != c.agent {
            return Err(Error::PartitionInvalid(format!(
                "calibration between columns {} and {} spans agents",
                c.a, c.b
            )));
        }
    }
    for r in &problem.linear {
        if r.coeffs.len() != idx.count(r.agent) * problem.dim {
            return Err(Error::PartitionInvalid(format!(
                "linear row of agent {} references foreign coordinates",
                r.agent
            )));
        }
    }
    let frozen = |a: usize| frozen_agents.get(a).copied().unwrap_or(false);
    let mut blocks = Vec::new();
    for a in 0..idx.agents() {
        let kinds: &[BlockKind] = match solver {
            SolverKind::Esdp => &[BlockKind::Esdp],
            SolverKind::Bm => &[BlockKind::BmU, BlockKind::BmV],
        };
        for &kind in kinds {
            blocks.push(Block {
                agent: a,
                kind,
                columns: idx.columns(a),
                frozen: frozen(a),
            });
        }
    }
    Ok(BlockPartition { solver, blocks })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DependencyGraph {
    pub adjacency: Vec<Vec<usize>>,
}

impl DependencyGraph {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adjacency = vec![Vec::new(); n];
        for (a, b) in edges {
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for l in &mut adjacency {
            l.sort_unstable();
            l.dedup();
        }
        Self { adjacency }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).max().unwrap_or(0)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, l) in self.adjacency.iter().enumerate() {
            for &b in l {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Edge list as JSON for debugging.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.edges())?)
    }
}

/// Blocks are adjacent when they share a measurement term, or (BM) when they
/// are the U and V blocks of one agent.
pub fn dependency_graph(partition: &BlockPartition, problem: &RealizationProblem) -> DependencyGraph {
    let idx = &problem.index;
    let mut edges = Vec::new();
    for t in &problem.terms {
        let (i, j) = (idx.owner(t.a), idx.owner(t.b));
        if i == j {
            continue;
        }
        match partition.solver {
            SolverKind::Esdp => edges.push((i, j)),
            SolverKind::Bm => {
                for ki in [BlockKind::BmU, BlockKind::BmV] {
                    for kj in [BlockKind::BmU, BlockKind::BmV] {
                        edges.push((partition.block_of(i, ki), partition.block_of(j, kj)));
                    }
                }
            }
        }
    }
    if partition.solver == SolverKind::Bm {
        for a in 0..idx.agents() {
            edges.push((partition.block_of(a, BlockKind::BmU), partition.block_of(a, BlockKind::BmV)));
        }
    }
    DependencyGraph::from_edges(partition.len(), edges)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Coloring {
    pub colors: Vec<usize>,
    pub classes: Vec<Vec<usize>>,
}

impl Coloring {
    pub fn count(&self) -> usize {
        self.classes.len()
    }

    pub fn is_proper(&self, graph: &DependencyGraph) -> bool {
        graph
            .edges()
            .iter()
            .all(|&(a, b)| self.colors[a] != self.colors[b])
    }

    /// Classes with frozen blocks removed; empty classes dropped.
    pub fn sweep_classes(&self, partition: &BlockPartition) -> Vec<Vec<usize>> {
        self.classes
            .iter()
            .map(|c| c.iter().copied().filter(|&b| !partition.blocks[b].frozen).collect::<Vec<_>>())
            .filter(|c| !c.is_empty())
            .collect()
    }
}

/// Smallest-available-color greedy coloring visiting nodes in `order`.
pub fn greedy_coloring(graph: &DependencyGraph, order: &[usize]) -> Coloring {
    let n = graph.len();
    let mut colors = vec![usize::MAX; n];
    let mut used = Vec::new();
    for &v in order {
        used.clear();
        used.resize(graph.adjacency[v].len() + 1, false);
        for &w in &graph.adjacency[v] {
            let c = colors[w];
            if c < used.len() {
                used[c] = true;
            }
        }
        colors[v] = used.iter().position(|u| !u).expect("degree + 1 slots");
    }
    // Nodes missing from `order` still need a color.
    for v in 0..n {
        if colors[v] == usize::MAX {
            let taken: Vec<usize> = graph.adjacency[v].iter().map(|&w| colors[w]).collect();
            colors[v] = (0..).find(|c| !taken.contains(c)).expect("unbounded");
        }
    }
    let count = colors.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    let mut classes = vec![Vec::new(); count];
    for (v, &c) in colors.iter().enumerate() {
        classes[c].push(v);
    }
    Coloring { colors, classes }
}

/// Partition, dependency graph and ascending-order coloring in one call.
pub fn schedule(
    problem: &RealizationProblem,
    solver: SolverKind,
    frozen_agents: &[bool],
) -> Result<(BlockPartition, DependencyGraph, Coloring)> {
    let partition = build_blocks(problem, solver, frozen_agents)?;
    let graph = dependency_graph(&partition, problem);
    let order: Vec<usize> = (0..partition.len()).collect();
    let coloring = greedy_coloring(&graph, &order);
    Ok((partition, graph, coloring))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_needs_two_colors() {
        let g = DependencyGraph::from_edges(3, [(0, 1), (1, 2)]);
        let c = greedy_coloring(&g, &[0, 1, 2]);
        assert_eq!(c.count(), 2);
        assert!(c.is_proper(&g));
    }

    #[test]
    fn clique_needs_all_colors() {
        let g = DependencyGraph::from_edges(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        let c = greedy_coloring(&g, &[0, 1, 2, 3]);
        assert_eq!(c.count(), 4);
        assert_eq!(g.max_degree(), 3);
    }

    #[test]
    fn coloring_handles_partial_order() {
        let g = DependencyGraph::from_edges(3, [(0, 1), (1, 2)]);
        let c = greedy_coloring(&g, &[1]);
        assert!(c.is_proper(&g));
    }

    #[test]
    fn edge_list_export() {
        let g = DependencyGraph::from_edges(3, [(1, 0), (1, 2), (2, 1)]);
        assert_eq!(g.to_json().unwrap(), "[[0,1],[1,2]]");
    }
}
