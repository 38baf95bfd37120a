//! Branch/trunk matching between a 2D and a 3D decomposition, and the soft
//! assignment of 3D nodes to 2D nodes by arc length.

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::decomposition::NodeDecomposition;
use crate::error::{Error, Result};
use crate::skeleton::{Point2, Point3};

/// 1-based node positions used to sample a branch direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TangentConfig {
    pub eta_s: usize,
    pub eta_t: usize,
}

impl Default for TangentConfig {
    fn default() -> Self {
        Self { eta_s: 1, eta_t: 10 }
    }
}

impl TangentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta_s < 1 || self.eta_s >= self.eta_t {
            return Err(Error::InvalidConfig("tangent indices need 1 <= eta_s < eta_t".into()));
        }
        Ok(())
    }
}

/// Matched segments. Every pair is stored as (2D path, 3D path) with both
/// paths oriented the same way: branches junction -> end, trunks so that
/// their endpoints agree with `junction_pairs`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchTrunkMatching {
    pub trunk_pairs: Vec<(Vec<usize>, Vec<usize>)>,
    pub branch_pairs: Vec<(Vec<usize>, Vec<usize>)>,
    /// (2D node, 3D node).
    pub junction_pairs: Vec<(usize, usize)>,
    pub unmatched_branches_2d: Vec<usize>,
    pub unmatched_branches_3d: Vec<usize>,
}

/// Trunk pairs plus the junction identifications they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkMatching {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
    pub junction_pairs: Vec<(usize, usize)>,
}

const MAX_ORIENTATION_SEARCH: usize = 12;

/// Pairs trunks rank by rank in order of decreasing geodesic length.
/// Each 3D trunk may be reversed; the orientation set maximising junction
/// agreement across pairs is chosen, ties going to the smallest summed
/// distance between 2D junctions and their projected 3D partners when
/// `projected3` is given.
pub fn match_trunks(
    d2: &NodeDecomposition,
    d3: &NodeDecomposition,
    x: &[Point2],
    projected3: Option<&[Point2]>,
) -> Result<TrunkMatching> {
    if d2.trunks.is_empty() {
        return Err(Error::NoTrunks { dim: 2 });
    }
    if d3.trunks.is_empty() {
        return Err(Error::NoTrunks { dim: 3 });
    }
    let ranked = |trunks: &[Vec<usize>]| {
        let mut order: Vec<usize> = (0..trunks.len()).collect();
        order.sort_by(|&a, &b| trunks[b].len().cmp(&trunks[a].len()).then(a.cmp(&b)));
        order
    };
    let r2 = ranked(&d2.trunks);
    let r3 = ranked(&d3.trunks);
    let k = r2.len().min(r3.len());
    let base: Vec<(&Vec<usize>, &Vec<usize>)> = (0..k).map(|i| (&d2.trunks[r2[i]], &d3.trunks[r3[i]])).collect();

    let ends = |mask: u32| -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(2 * k);
        for (i, (t2, t3)) in base.iter().enumerate() {
            let (a3, b3) = if mask >> i & 1 == 1 {
                (*t3.last().unwrap(), t3[0])
            } else {
                (t3[0], *t3.last().unwrap())
            };
            out.push((t2[0], a3));
            out.push((*t2.last().unwrap(), b3));
        }
        out
    };
    let distance = |ids: &[(usize, usize)]| -> f64 {
        projected3.map_or(0.0, |f| ids.iter().map(|&(a, b)| (x[a] - f[b]).norm()).sum())
    };

    let pick = |mask: u32| {
        let ids = ends(mask);
        (consistency(&ids), distance(&ids))
    };
    let mut best_mask = 0u32;
    let mut best = pick(0);
    if k <= MAX_ORIENTATION_SEARCH {
        for mask in 1..(1u32 << k) {
            let s = pick(mask);
            if s.0 > best.0 || (s.0 == best.0 && s.1 < best.1 - 1e-9) {
                best = s;
                best_mask = mask;
            }
        }
    } else {
        // greedy, one trunk at a time
        for i in 0..k {
            let s = pick(best_mask | 1 << i);
            if s.0 > best.0 || (s.0 == best.0 && s.1 < best.1 - 1e-9) {
                best = s;
                best_mask |= 1 << i;
            }
        }
    }

    let pairs: Vec<(Vec<usize>, Vec<usize>)> = base
        .iter()
        .enumerate()
        .map(|(i, (t2, t3))| {
            let mut t3 = (*t3).clone();
            if best_mask >> i & 1 == 1 {
                t3.reverse();
            }
            ((*t2).clone(), t3)
        })
        .collect();
    let junction_pairs = dedup_identifications(&ends(best_mask));
    Ok(TrunkMatching { pairs, junction_pairs })
}

/// Number of agreeing identification pairs minus conflicting ones.
fn consistency(ids: &[(usize, usize)]) -> i64 {
    let mut score = 0;
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            let same2 = ids[a].0 == ids[b].0;
            let same3 = ids[a].1 == ids[b].1;
            if same2 && same3 {
                score += 1;
            } else if same2 || same3 {
                score -= 1;
            }
        }
    }
    score
}

/// Keeps the first identification of every 2D and every 3D node.
fn dedup_identifications(ids: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &(a, b) in ids {
        if out.iter().all(|&(c, d)| c != a && d != b) {
            out.push((a, b));
        }
    }
    out
}

/// Unit vector from node `eta_s` to node `eta_t` (1-based, clamped to the
/// branch length).
pub fn branch_tangent<const D: usize>(
    branch: &[usize],
    points: &[SVector<f64, D>],
    cfg: &TangentConfig,
) -> Result<SVector<f64, D>> {
    if branch.len() < 2 {
        return Err(Error::DegenerateBranch);
    }
    let s = cfg.eta_s.clamp(1, branch.len());
    let t = cfg.eta_t.clamp(1, branch.len());
    let v = points[branch[t - 1]] - points[branch[s - 1]];
    let n = v.norm();
    if !(n > 0.0) {
        return Err(Error::DegenerateBranch);
    }
    Ok(v / n)
}

/// Branch index pairs `(2D branch, 3D branch)` plus the unmatched leftovers.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchMatching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_2d: Vec<usize>,
    pub unmatched_3d: Vec<usize>,
}

/// Matches preserved branches by tangent similarity. 3D tangents are taken
/// on the projected points `fy`. Branches hanging off identified junctions
/// are matched within their junction group first; the remainder are matched
/// jointly. Unequal branch counts are not an error: the surplus is reported
/// as unmatched.
pub fn match_branches(
    d2: &NodeDecomposition,
    d3: &NodeDecomposition,
    x: &[Point2],
    fy: &[Point2],
    junction_pairs: &[(usize, usize)],
    cfg: &TangentConfig,
) -> Result<BranchMatching> {
    cfg.validate()?;
    let t2: Vec<Point2> = d2
        .branches
        .iter()
        .map(|b| branch_tangent(b, x, cfg))
        .collect::<Result<_>>()?;
    let t3: Vec<Point2> = d3
        .branches
        .iter()
        .map(|b| branch_tangent(b, fy, cfg))
        .collect::<Result<_>>()?;
    let sim = |i: usize, j: usize| t2[i].dot(&t3[j]);

    let mut used2 = vec![false; t2.len()];
    let mut used3 = vec![false; t3.len()];
    let mut pairs = Vec::new();

    for &(j2, j3) in junction_pairs {
        let g2: Vec<usize> = (0..t2.len())
            .filter(|&i| !used2[i] && d2.branches[i][0] == j2)
            .collect();
        let g3: Vec<usize> = (0..t3.len())
            .filter(|&j| !used3[j] && d3.branches[j][0] == j3)
            .collect();
        for (a, b) in best_assignment(&g2, &g3, &sim) {
            used2[a] = true;
            used3[b] = true;
            pairs.push((a, b));
        }
    }
    let rest2: Vec<usize> = (0..t2.len()).filter(|&i| !used2[i]).collect();
    let rest3: Vec<usize> = (0..t3.len()).filter(|&j| !used3[j]).collect();
    for (a, b) in best_assignment(&rest2, &rest3, &sim) {
        used2[a] = true;
        used3[b] = true;
        pairs.push((a, b));
    }
    pairs.sort_unstable();
    let unmatched_2d: Vec<usize> = (0..t2.len()).filter(|&i| !used2[i]).collect();
    let unmatched_3d: Vec<usize> = (0..t3.len()).filter(|&j| !used3[j]).collect();
    if !unmatched_2d.is_empty() || !unmatched_3d.is_empty() {
        log::warn!(
            "{}",
            Error::CountMismatch {
                branches_2d: t2.len(),
                branches_3d: t3.len()
            }
        );
    }
    Ok(BranchMatching {
        pairs,
        unmatched_2d,
        unmatched_3d,
    })
}

const MAX_EXACT_ASSIGNMENT: usize = 8;

/// One-to-one pairing of `rows` with `cols` of maximal total score, of size
/// `min(|rows|, |cols|)`. Exhaustive for small groups, greedy beyond.
/// Ties keep the lexicographically first choice.
pub(crate) fn best_assignment(
    rows: &[usize],
    cols: &[usize],
    score: &dyn Fn(usize, usize) -> f64,
) -> Vec<(usize, usize)> {
    let k = rows.len().min(cols.len());
    if k == 0 {
        return Vec::new();
    }
    if rows.len().max(cols.len()) > MAX_EXACT_ASSIGNMENT {
        let mut cand: Vec<(f64, usize, usize)> = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (score(r, c), r, c)))
            .collect();
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut out = Vec::new();
        for (_, r, c) in cand {
            if out.iter().all(|&(a, b)| a != r && b != c) {
                out.push((r, c));
            }
        }
        return out;
    }

    struct Search<'a> {
        rows: &'a [usize],
        cols: &'a [usize],
        score: &'a dyn Fn(usize, usize) -> f64,
        k: usize,
        taken: Vec<bool>,
        current: Vec<(usize, usize)>,
        best: Option<(f64, Vec<(usize, usize)>)>,
    }
    impl Search<'_> {
        fn run(&mut self, r: usize, total: f64) {
            if self.current.len() == self.k {
                if self.best.as_ref().is_none_or(|(b, _)| total > *b + 1e-12) {
                    self.best = Some((total, self.current.clone()));
                }
                return;
            }
            if r == self.rows.len() || self.rows.len() - r < self.k - self.current.len() {
                return;
            }
            for c in 0..self.cols.len() {
                if !self.taken[c] {
                    self.taken[c] = true;
                    self.current.push((self.rows[r], self.cols[c]));
                    let s = (self.score)(self.rows[r], self.cols[c]);
                    self.run(r + 1, total + s);
                    self.current.pop();
                    self.taken[c] = false;
                }
            }
            // leave this row out when there are more rows than columns
            self.run(r + 1, total);
        }
    }
    let mut search = Search {
        rows,
        cols,
        score,
        k,
        taken: vec![false; cols.len()],
        current: Vec::new(),
        best: None,
    };
    search.run(0, 0.0);
    search.best.map(|(_, p)| p).unwrap_or_default()
}

/// Matches trunks, then branches, and resolves the junction identifications.
/// Without trunks on either side matching uses branches alone and junctions
/// are identified from the matched branch roots.
pub fn match_decompositions(
    d2: &NodeDecomposition,
    d3: &NodeDecomposition,
    x: &[Point2],
    fy: &[Point2],
    cfg: &TangentConfig,
) -> Result<BranchTrunkMatching> {
    let (trunk_pairs, mut junction_pairs) = match match_trunks(d2, d3, x, Some(fy)) {
        Ok(t) => (t.pairs, t.junction_pairs),
        Err(e @ Error::NoTrunks { .. }) => {
            log::info!("{e}; matching branches only");
            (Vec::new(), Vec::new())
        }
        Err(e) => return Err(e),
    };
    let branches = match_branches(d2, d3, x, fy, &junction_pairs, cfg)?;
    let branch_pairs: Vec<(Vec<usize>, Vec<usize>)> = branches
        .pairs
        .iter()
        .map(|&(a, b)| (d2.branches[a].clone(), d3.branches[b].clone()))
        .collect();
    let mut ids = junction_pairs.clone();
    ids.extend(branch_pairs.iter().map(|(a, b)| (a[0], b[0])));
    junction_pairs = dedup_identifications(&ids);
    Ok(BranchTrunkMatching {
        trunk_pairs,
        branch_pairs,
        junction_pairs,
        unmatched_branches_2d: branches.unmatched_2d,
        unmatched_branches_3d: branches.unmatched_3d,
    })
}

/// Sparse non-negative n2 x n3 matrix stored by column. A column holds at
/// most two entries, on consecutive nodes of one 2D path.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    rows: usize,
    cols: Vec<Vec<(usize, f64)>>,
}

impl AssignmentMatrix {
    pub fn zeros(n2: usize, n3: usize) -> Self {
        Self {
            rows: n2,
            cols: vec![Vec::new(); n3],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols.len()
    }

    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.cols[j]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cols[j].iter().find(|e| e.0 == i).map_or(0.0, |e| e.1)
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        self.cols[j].iter().map(|e| e.1).sum()
    }

    pub fn is_assigned(&self, j: usize) -> bool {
        !self.cols[j].is_empty()
    }

    pub fn assigned(&self) -> Vec<usize> {
        (0..self.cols.len()).filter(|&j| self.is_assigned(j)).collect()
    }

    pub fn nnz(&self) -> usize {
        self.cols.iter().map(Vec::len).sum()
    }

    /// Replaces column `j` with the given weights, clamped to [0, 1] and
    /// renormalised to sum to one. Zero weights are not stored.
    pub fn set_column(&mut self, j: usize, entries: &[(usize, f64)]) {
        let mut col: Vec<(usize, f64)> = entries
            .iter()
            .map(|&(i, w)| (i, w.clamp(0.0, 1.0)))
            .filter(|e| e.1 > 0.0)
            .collect();
        let sum: f64 = col.iter().map(|e| e.1).sum();
        if sum > 0.0 {
            for e in &mut col {
                e.1 /= sum;
            }
            if let [only] = col.as_mut_slice() {
                only.1 = 1.0;
            } else if let [a, b] = col.as_mut_slice() {
                b.1 = 1.0 - a.1;
            }
        }
        col.sort_by_key(|e| e.0);
        self.cols[j] = col;
    }

    /// `X m_j`, the 2D target of 3D node `j`.
    pub fn target(&self, j: usize, x: &[Point2]) -> Point2 {
        self.cols[j].iter().map(|&(i, w)| x[i] * w).sum()
    }

    /// Non-zero entries as (row, col, value), column-major.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.cols
            .iter()
            .enumerate()
            .flat_map(|(j, col)| col.iter().map(move |&(i, w)| (i, j, w)))
            .collect()
    }
}

fn cumulative<const D: usize>(path: &[usize], points: &[SVector<f64, D>]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(path.len());
    let mut s = 0.0;
    acc.push(0.0);
    for w in path.windows(2) {
        s += (points[w[1]] - points[w[0]]).norm();
        acc.push(s);
    }
    acc
}

/// Interpolation weights of arc length `s` along a 2D path with cumulative
/// lengths `s2`, or `None` past its end.
fn bracket(path2: &[usize], s2: &[f64], s: f64) -> Option<Vec<(usize, f64)>> {
    let total = *s2.last().unwrap();
    let tol = 1e-9 * (1.0 + total);
    if s > total + tol || s < -tol {
        return None;
    }
    if path2.len() == 1 {
        return Some(vec![(path2[0], 1.0)]);
    }
    // last i with s2[i] <= s, kept below the final node
    let i = s2.partition_point(|&v| v <= s).saturating_sub(1).min(path2.len() - 2);
    let seg = s2[i + 1] - s2[i];
    let w = ((s - s2[i]) / seg).clamp(0.0, 1.0);
    Some(vec![(path2[i], 1.0 - w), (path2[i + 1], w)])
}

/// Assigns each node of a 3D branch to the 2D branch node(s) at the same
/// cumulative arc length, 3D lengths measured on projected points `fy`.
/// Nodes beyond the end of the 2D branch stay unassigned.
pub fn assign_branch_nodes(w2: &[usize], w3: &[usize], x: &[Point2], fy: &[Point2], m: &mut AssignmentMatrix) {
    if w2.is_empty() {
        return;
    }
    let s2 = cumulative(w2, x);
    let s3 = cumulative(w3, fy);
    for (k, &j) in w3.iter().enumerate() {
        if let Some(col) = bracket(w2, &s2, s3[k]) {
            m.set_column(j, &col);
        }
    }
}

/// Assigns 3D trunk nodes by arc-length proportion: 3D lengths are scaled by
/// the ratio of the 2D to the 3D trunk length, so endpoints map to endpoints.
pub fn assign_trunk_nodes(
    p2: &[usize],
    p3: &[usize],
    x: &[Point2],
    y: &[Point3],
    m: &mut AssignmentMatrix,
) -> Result<()> {
    let s2 = cumulative(p2, x);
    let s3 = cumulative(p3, y);
    let l2 = *s2.last().unwrap_or(&0.0);
    let l3 = *s3.last().unwrap_or(&0.0);
    if !(l2 > 0.0) || !(l3 > 0.0) {
        return Err(Error::ZeroLengthTrunk);
    }
    let ratio = l2 / l3;
    for (k, &j) in p3.iter().enumerate() {
        let s = if k + 1 == p3.len() { l2 } else { (ratio * s3[k]).min(l2) };
        let col = bracket(p2, &s2, s).expect("scaled length lies within the trunk");
        m.set_column(j, &col);
    }
    Ok(())
}

/// Builds the assignment matrix from a matching: branches first, then
/// trunks. A later write to a column replaces the earlier one.
pub fn build_assignment(
    matching: &BranchTrunkMatching,
    x: &[Point2],
    fy: &[Point2],
    y: &[Point3],
) -> Result<AssignmentMatrix> {
    let mut m = AssignmentMatrix::zeros(x.len(), y.len());
    for (w2, w3) in &matching.branch_pairs {
        assign_branch_nodes(w2, w3, x, fy, &mut m);
    }
    for (p2, p3) in &matching.trunk_pairs {
        assign_trunk_nodes(p2, p3, x, y, &mut m)?;
    }
    Ok(m)
}
