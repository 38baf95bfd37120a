//! Skeleton point sets and their grid adjacency graphs.
//!
//! Skeleton points live on a regular grid (pixels for 2D, voxels for 3D).
//! Two points are adjacent when their grid coordinates differ by at most one
//! step on every axis, i.e. their Chebyshev distance is exactly 1. The graph
//! keeps only the largest connected component.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::SVector;

use crate::error::{Error, Result};

pub type Point2 = nalgebra::Vector2<f64>;
pub type Point3 = nalgebra::Vector3<f64>;

/// Tolerance on `coordinate / spacing` when snapping to integer grid indices.
pub const GRID_TOLERANCE: f64 = 1e-6;

/// Ordered set of distinct skeleton points with a per-axis grid spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonPointSet<const D: usize> {
    points: Vec<SVector<f64, D>>,
    spacing: SVector<f64, D>,
}

pub type PointSet2 = SkeletonPointSet<2>;
pub type PointSet3 = SkeletonPointSet<3>;

impl<const D: usize> SkeletonPointSet<D> {
    pub fn new(points: Vec<SVector<f64, D>>, spacing: SVector<f64, D>) -> Result<Self> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidSpacing);
        }
        let mut seen = HashSet::with_capacity(points.len());
        for (index, p) in points.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidPoint { index });
            }
            // +0.0 + -0.0 normalises the sign of zero before hashing bits
            let key: Vec<u64> = p.iter().map(|c| (c + 0.0).to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::DuplicatePoint { index });
            }
        }
        Ok(Self { points, spacing })
    }

    /// Point set on a unit grid.
    pub fn from_points(points: Vec<SVector<f64, D>>) -> Result<Self> {
        Self::new(points, SVector::repeat(1.0))
    }

    pub fn points(&self) -> &[SVector<f64, D>] {
        &self.points
    }

    pub fn spacing(&self) -> &SVector<f64, D> {
        &self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Integer grid index of every point, or `NonGridInput` for the first
    /// point that is off-grid.
    pub fn grid_coords(&self) -> Result<Vec<[i64; D]>> {
        self.points
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let mut cell = [0i64; D];
                for k in 0..D {
                    let scaled = p[k] / self.spacing[k];
                    let rounded = scaled.round();
                    let offset = (scaled - rounded).abs();
                    if offset > GRID_TOLERANCE {
                        return Err(Error::NonGridInput { index, offset });
                    }
                    cell[k] = rounded as i64;
                }
                Ok(cell)
            })
            .collect()
    }

    pub fn into_points(self) -> Vec<SVector<f64, D>> {
        self.points
    }
}

/// Adjacency graph over a skeleton point set.
#[derive(Debug, Clone)]
pub struct SkeletonGraph<const D: usize> {
    points: SkeletonPointSet<D>,
    neighbors: Vec<Vec<usize>>,
    source_indices: Vec<usize>,
}

pub type Graph2 = SkeletonGraph<2>;
pub type Graph3 = SkeletonGraph<3>;

impl<const D: usize> SkeletonGraph<D> {
    pub fn points(&self) -> &SkeletonPointSet<D> {
        &self.points
    }

    pub fn point(&self, i: usize) -> &SVector<f64, D> {
        &self.points.points[i]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Sorted neighbour indices of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Index of each retained node in the point set passed to [`build_graph`].
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    /// Undirected edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Hop distances from `source`; `None` for unreachable nodes.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Builds a graph directly from adjacency lists. Lists are sorted and
    /// symmetrised; self loops are dropped. Used for tests and for graphs
    /// whose adjacency does not come from grid positions.
    pub fn from_adjacency(points: SkeletonPointSet<D>, adjacency: Vec<Vec<usize>>) -> Self {
        let n = points.len();
        let mut neighbors = vec![Vec::new(); n];
        for (i, list) in adjacency.iter().enumerate() {
            for &j in list {
                if j != i && j < n {
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        Self {
            points,
            neighbors,
            source_indices: (0..n).collect(),
        }
    }
}

/// Every offset in `{-1, 0, 1}^D` except the origin.
pub(crate) fn unit_offsets<const D: usize>() -> Vec<[i64; D]> {
    let total = 3usize.pow(D as u32);
    (0..total)
        .filter_map(|mut code| {
            let mut off = [0i64; D];
            for o in off.iter_mut() {
                *o = (code % 3) as i64 - 1;
                code /= 3;
            }
            off.iter().any(|&o| o != 0).then_some(off)
        })
        .collect()
}

pub(crate) fn offset<const D: usize>(a: &[i64; D], d: &[i64; D]) -> [i64; D] {
    let mut out = *a;
    for k in 0..D {
        out[k] += d[k];
    }
    out
}

/// Chebyshev adjacency graph of `points`, restricted to its largest
/// connected component. Ties between equally large components go to the one
/// containing the smallest point index.
pub fn build_graph<const D: usize>(points: &SkeletonPointSet<D>) -> Result<SkeletonGraph<D>> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let cells = points.grid_coords()?;
    let lookup: HashMap<[i64; D], usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let offsets = unit_offsets::<D>();

    let mut full: Vec<Vec<usize>> = cells
        .iter()
        .map(|c| {
            let mut nb: Vec<usize> = offsets
                .iter()
                .filter_map(|d| lookup.get(&offset(c, d)).copied())
                .collect();
            nb.sort_unstable();
            nb
        })
        .collect();

    // components, discovered in increasing order of their smallest index
    let n = cells.len();
    let mut component = vec![usize::MAX; n];
    let mut best: (usize, usize) = (0, 0); // (component id, size)
    let mut next_id = 0;
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        component[start] = next_id;
        while let Some(u) = queue.pop_front() {
            size += 1;
            for &v in &full[u] {
                if component[v] == usize::MAX {
                    component[v] = next_id;
                    queue.push_back(v);
                }
            }
        }
        if size > best.1 {
            best = (next_id, size);
        }
        next_id += 1;
    }

    let keep: Vec<usize> = (0..n).filter(|&i| component[i] == best.0).collect();
    if keep.len() == n {
        return Ok(SkeletonGraph {
            points: points.clone(),
            neighbors: full,
            source_indices: keep,
        });
    }
    let mut remap = vec![usize::MAX; n];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let kept_points = keep.iter().map(|&i| points.points[i]).collect();
    let neighbors = keep
        .iter()
        .map(|&old| std::mem::take(&mut full[old]).into_iter().map(|j| remap[j]).collect())
        .collect();
    Ok(SkeletonGraph {
        points: SkeletonPointSet {
            points: kept_points,
            spacing: points.spacing,
        },
        neighbors,
        source_indices: keep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set2(pts: &[(f64, f64)]) -> PointSet2 {
        PointSet2::from_points(pts.iter().map(|&(x, y)| Point2::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn drops_smaller_component() {
        let g = build_graph(&set2(&[(0.0, 0.0), (1.0, 1.0), (5.0, 5.0)])).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert_eq!(g.source_indices(), &[0, 1]);
    }

    #[test]
    fn single_point_graph() {
        let g = build_graph(&set2(&[(3.0, 3.0)])).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn block_center_has_degree_eight() {
        let mut pts = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                pts.push((x as f64, y as f64));
            }
        }
        let g = build_graph(&set2(&pts)).unwrap();
        // brute-force pairwise Chebyshev check
        let center = 4;
        let expected = pts
            .iter()
            .enumerate()
            .filter(|&(j, p)| j != center && (p.0 - 1.0).abs().max((p.1 - 1.0).abs()) <= 1.0)
            .count();
        assert_eq!(expected, 8);
        assert_eq!(g.degree(center), 8);
    }

    #[test]
    fn tie_between_components_prefers_smallest_index() {
        let g = build_graph(&set2(&[(10.0, 10.0), (0.0, 0.0), (11.0, 10.0), (1.0, 0.0)])).unwrap();
        assert_eq!(g.source_indices(), &[0, 2]);
    }

    #[test]
    fn rejects_empty_and_off_grid() {
        assert!(matches!(
            build_graph(&PointSet2::from_points(vec![]).unwrap()),
            Err(Error::EmptyInput)
        ));
        let off = set2(&[(0.0, 0.0), (0.5, 0.0)]);
        assert!(matches!(build_graph(&off), Err(Error::NonGridInput { index: 1, .. })));
    }

    #[test]
    fn spacing_scales_grid() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.5, 0.5, 0.0),
            Point3::new(1.0, 0.5, 0.5),
        ];
        let set = PointSet3::new(pts, Point3::repeat(0.5)).unwrap();
        let g = build_graph(&set).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn rejects_duplicates() {
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(-0.0, 0.0)];
        assert!(matches!(
            PointSet2::from_points(pts),
            Err(Error::DuplicatePoint { index: 1 })
        ));
    }

    fn brute_force_adjacency(cells: &[[i64; 3]]) -> Vec<Vec<usize>> {
        (0..cells.len())
            .map(|i| {
                (0..cells.len())
                    .filter(|&j| j != i && (0..3).map(|k| (cells[i][k] - cells[j][k]).abs()).max().unwrap() <= 1)
                    .collect()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn adjacency_matches_brute_force(raw in proptest::collection::hash_set((0i64..9, 0i64..9, 0i64..4), 1..300)) {
            let cells: Vec<[i64; 3]> = raw.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let set = PointSet3::from_points(
                cells.iter().map(|c| Point3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect(),
            ).unwrap();
            let g = build_graph(&set).unwrap();
            let full = brute_force_adjacency(&cells);
            // restricted to retained nodes, adjacency must equal the brute-force relation
            let src = g.source_indices();
            for (i, &si) in src.iter().enumerate() {
                let expected: Vec<usize> = full[si].clone();
                let got: Vec<usize> = g.neighbors(i).iter().map(|&j| src[j]).collect();
                prop_assert_eq!(got, expected);
                prop_assert!(!g.is_adjacent(i, i));
            }
        }
    }
}
