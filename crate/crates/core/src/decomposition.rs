//! Node classification and branch/trunk decomposition of skeleton graphs.
//!
//! End-nodes have degree 1. Nodes of degree >= 3 are quasi-junctions; within
//! each connected cluster of quasi-junctions the node of largest degree is the
//! junction. Every end-node then grows a breadth-first front until it touches
//! a junction, all end-nodes advancing one hop per round, so the shortest
//! end-to-junction paths are found first. While more than `tau` end-nodes
//! are still searching, each path found is discarded (and recorded as deleted
//! when shorter than `iota` nodes); the last `tau` paths are kept as
//! branches. Trunks are shortest paths between neighbouring junctions.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::SkeletonGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    /// Number of branches to preserve.
    pub tau: usize,
    /// Branches with fewer nodes than this are deleted rather than omitted.
    pub iota: f64,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self { tau: 5, iota: 10.0 }
    }
}

impl DecompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::InvalidConfig("tau must be >= 1".into()));
        }
        if !(self.iota >= 0.0) {
            return Err(Error::InvalidConfig("iota must be non-negative".into()));
        }
        Ok(())
    }
}

/// Output of [`classify_nodes`]. All indices refer to graph nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDecomposition {
    /// Preserved branches, each ordered junction -> end, longest first.
    pub branches: Vec<Vec<usize>>,
    /// Paths between neighbouring junctions.
    pub trunks: Vec<Vec<usize>>,
    pub end_nodes: Vec<usize>,
    pub junction_nodes: Vec<usize>,
    pub quasi_junction_nodes: Vec<usize>,
    pub deleted_nodes: Vec<usize>,
}

impl NodeDecomposition {
    /// Preserved branches followed by trunks.
    pub fn segments(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.branches.iter().chain(self.trunks.iter())
    }
}

/// Hop count of the shortest path between `u` and `v`.
pub fn geodesic_distance<const D: usize>(graph: &SkeletonGraph<D>, u: usize, v: usize) -> Result<usize> {
    check_index(graph, u)?;
    check_index(graph, v)?;
    graph.bfs_distances(u)[v].ok_or(Error::Unreachable { from: u, to: v })
}

/// Node indices of a shortest path from `from` to `to`, both included.
pub fn shortest_path<const D: usize>(graph: &SkeletonGraph<D>, from: usize, to: usize) -> Result<Vec<usize>> {
    check_index(graph, from)?;
    check_index(graph, to)?;
    let tree = BfsTree::grow(graph, to);
    tree.path_to_root(from).ok_or(Error::Unreachable { from, to })
}

fn check_index<const D: usize>(graph: &SkeletonGraph<D>, i: usize) -> Result<()> {
    if i >= graph.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: graph.len(),
        });
    }
    Ok(())
}

/// Breadth-first tree: nodes grouped by hop distance plus parent links.
/// Among equal-hop parents the one giving the shortest Euclidean path from
/// the root wins, then the smallest index, so paths follow the straight line
/// through junction clusters instead of cutting across them.
struct BfsTree {
    layers: Vec<Vec<usize>>,
    parent: Vec<usize>,
    reached: Vec<bool>,
}

impl BfsTree {
    fn grow<const D: usize>(graph: &SkeletonGraph<D>, root: usize) -> Self {
        let n = graph.len();
        let mut parent = vec![usize::MAX; n];
        let mut hops = vec![usize::MAX; n];
        let mut length = vec![f64::INFINITY; n];
        hops[root] = 0;
        length[root] = 0.0;
        let mut layers = vec![vec![root]];
        loop {
            let depth = layers.len();
            let mut next = Vec::new();
            for &u in layers.last().unwrap() {
                for &v in graph.neighbors(u) {
                    if hops[v] == usize::MAX {
                        hops[v] = depth;
                        next.push(v);
                    }
                    if hops[v] == depth {
                        let cand = length[u] + (graph.point(u) - graph.point(v)).norm();
                        if cand < length[v] - 1e-12 || (cand <= length[v] + 1e-12 && u < parent[v]) {
                            length[v] = cand;
                            parent[v] = u;
                        }
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            layers.push(next);
        }
        let reached = hops.iter().map(|&h| h != usize::MAX).collect();
        Self {
            layers,
            parent,
            reached,
        }
    }

    /// Path from `node` back to the root, starting at `node`.
    fn path_to_root(&self, node: usize) -> Option<Vec<usize>> {
        if !self.reached[node] {
            return None;
        }
        let mut path = vec![node];
        let mut cur = node;
        while self.parent[cur] != usize::MAX {
            cur = self.parent[cur];
            path.push(cur);
        }
        Some(path)
    }
}

/// Connected clusters of quasi-junction nodes.
struct Clusters {
    id: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl Clusters {
    fn find<const D: usize>(graph: &SkeletonGraph<D>, quasi: &[usize]) -> Self {
        let n = graph.len();
        let mut in_quasi = vec![false; n];
        for &q in quasi {
            in_quasi[q] = true;
        }
        let mut id = vec![usize::MAX; n];
        let mut members = Vec::new();
        for &start in quasi {
            if id[start] != usize::MAX {
                continue;
            }
            let cid = members.len();
            id[start] = cid;
            let mut group = Vec::new();
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                group.push(u);
                for &v in graph.neighbors(u) {
                    if in_quasi[v] && id[v] == usize::MAX {
                        id[v] = cid;
                        queue.push_back(v);
                    }
                }
            }
            group.sort_unstable();
            members.push(group);
        }
        Self { id, members }
    }

    /// Largest-degree member of every cluster; ties go to the smallest index.
    fn maxima(&self, degree: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .members
            .iter()
            .map(|group| {
                *group
                    .iter()
                    .min_by(|&&a, &&b| degree[b].cmp(&degree[a]).then(a.cmp(&b)))
                    .expect("clusters are nonempty")
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Number of arms leaving the cluster of `node`: outside neighbours not
    /// marked removed, grouped by mutual adjacency.
    fn arms<const D: usize>(&self, graph: &SkeletonGraph<D>, node: usize, removed: &[bool]) -> usize {
        let group = &self.members[self.id[node]];
        let mut outside: Vec<usize> = group
            .iter()
            .flat_map(|&u| graph.neighbors(u).iter().copied())
            .filter(|&v| self.id[v] != self.id[node] && !removed[v])
            .collect();
        outside.sort_unstable();
        outside.dedup();
        let mut root: Vec<usize> = (0..outside.len()).collect();
        fn find(root: &mut [usize], mut i: usize) -> usize {
            while root[i] != i {
                root[i] = root[root[i]];
                i = root[i];
            }
            i
        }
        for a in 0..outside.len() {
            for b in a + 1..outside.len() {
                if graph.is_adjacent(outside[a], outside[b]) {
                    let (ra, rb) = (find(&mut root, a), find(&mut root, b));
                    root[ra] = rb;
                }
            }
        }
        (0..outside.len()).filter(|&i| find(&mut root, i) == i).count()
    }
}

/// Classifies nodes and decomposes the graph into branches and trunks.
pub fn classify_nodes<const D: usize>(
    graph: &SkeletonGraph<D>,
    config: &DecompositionConfig,
) -> Result<NodeDecomposition> {
    config.validate()?;
    let n = graph.len();
    if n < 2 {
        return Err(Error::TooFewNodes { found: n });
    }
    let degree = graph.degrees();
    let end_nodes: Vec<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    let quasi: Vec<usize> = (0..n).filter(|&i| degree[i] >= 3).collect();
    if end_nodes.len() < config.tau {
        return Err(Error::TooFewEndNodes {
            found: end_nodes.len(),
            required: config.tau,
        });
    }
    if quasi.is_empty() {
        return Err(Error::TooFewJunctions {
            end_nodes: end_nodes.len(),
        });
    }

    let clusters = Clusters::find(graph, &quasi);
    let mut is_junction = vec![false; n];
    for j in clusters.maxima(&degree) {
        is_junction[j] = true;
    }

    // branch search, all end-nodes advancing one layer per round
    let trees: Vec<BfsTree> = end_nodes.iter().map(|&e| BfsTree::grow(graph, e)).collect();
    let mut marked: Vec<usize> = (0..end_nodes.len()).collect();
    let mut removed = vec![false; n];
    let mut branches = Vec::new();
    let mut deleted = BTreeSet::new();
    let mut s = 0;
    while !marked.is_empty() {
        if marked.iter().all(|&k| s >= trees[k].layers.len()) {
            break;
        }
        for k in marked.clone() {
            let Some(layer) = trees[k].layers.get(s) else {
                continue;
            };
            let Some(&junction) = layer.iter().filter(|&&j| is_junction[j]).min() else {
                continue;
            };
            let still_marked = marked.len();
            marked.retain(|&m| m != k);
            // junction -> end
            let omega = trees[k].path_to_root(junction).expect("junction lies in the BFS tree");
            debug_assert_eq!(omega.last(), Some(&end_nodes[k]));
            if still_marked > config.tau {
                let cluster = clusters.id[junction];
                for &i in &omega {
                    if clusters.id[i] != cluster {
                        removed[i] = true;
                    }
                }
                let demoted = clusters.arms(graph, junction, &removed) < 3;
                if demoted {
                    is_junction[junction] = false;
                }
                if (omega.len() as f64) < config.iota {
                    deleted.extend(omega.iter().copied().filter(|&i| demoted || i != junction));
                }
            } else {
                branches.push(omega);
            }
        }
        s += 1;
    }
    if branches.len() < config.tau {
        return Err(Error::TooFewJunctions {
            end_nodes: end_nodes.len(),
        });
    }
    branches.sort_by(|a, b| b.len().cmp(&a.len()).then(a.last().cmp(&b.last())));

    let junction_nodes: Vec<usize> = (0..n).filter(|&i| is_junction[i]).collect();
    let trunks = neighbouring_junction_paths(graph, &junction_nodes, &is_junction)?;
    for path in branches.iter().chain(trunks.iter()) {
        for i in path {
            deleted.remove(i);
        }
    }

    Ok(NodeDecomposition {
        branches,
        trunks,
        end_nodes,
        junction_nodes,
        quasi_junction_nodes: quasi,
        deleted_nodes: deleted.into_iter().collect(),
    })
}

/// Shortest paths between junction pairs whose breadth-first regions touch.
/// Pairs whose shortest path runs through a third junction are not
/// neighbours and are skipped.
fn neighbouring_junction_paths<const D: usize>(
    graph: &SkeletonGraph<D>,
    junctions: &[usize],
    is_junction: &[bool],
) -> Result<Vec<Vec<usize>>> {
    let n = graph.len();
    let mut owner = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &j in junctions {
        owner[j] = j;
        queue.push_back(j);
    }
    while let Some(u) = queue.pop_front() {
        for &v in graph.neighbors(u) {
            if owner[v] == usize::MAX {
                owner[v] = owner[u];
                queue.push_back(v);
            }
        }
    }
    let mut pairs = BTreeSet::new();
    for (u, v) in graph.edges() {
        let (a, b) = (owner[u], owner[v]);
        if a != b && a != usize::MAX && b != usize::MAX {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let mut trunks = Vec::new();
    for (a, b) in pairs {
        let path = shortest_path(graph, a, b)?;
        if path[1..path.len() - 1].iter().any(|&i| is_junction[i]) {
            continue;
        }
        trunks.push(path);
    }
    Ok(trunks)
}
