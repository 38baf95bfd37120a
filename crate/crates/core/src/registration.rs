//! End-to-end deformable registration of a 3D skeleton to a 2D skeleton.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::correspondence::{
    build_assignment, match_decompositions, AssignmentMatrix, BranchTrunkMatching, TangentConfig,
};
use crate::decomposition::{classify_nodes, DecompositionConfig, NodeDecomposition};
use crate::deformation::{minimize, Displacement, EnergyConfig, EnergyState, EnergyTerms};
use crate::error::{Error, Result, Stage};
use crate::projection::{project_points, ProjectionMatrix, RigidTransform3D};
use crate::skeleton::{build_graph, Point3, SkeletonGraph, SkeletonPointSet};
use crate::tps::ThinPlateSpline;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub decomposition: DecompositionConfig,
    pub tangent: TangentConfig,
    pub energy: EnergyConfig,
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.decomposition.validate()?;
        self.tangent.validate()?;
        self.energy.validate()
    }
}

/// Wall-clock time per stage, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTiming {
    pub stages: Vec<(Stage, f64)>,
}

impl StageTiming {
    pub fn get(&self, stage: Stage) -> f64 {
        self.stages.iter().filter(|s| s.0 == stage).map(|s| s.1).sum()
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.1).sum()
    }
}

/// Output of [`register`]. Node indices refer to the input point sets.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Displacement of every 3D node relative to its pre-aligned position.
    pub displacements: Vec<Displacement>,
    /// Pre-aligned 3D skeleton `R Y + T`.
    pub aligned: Vec<Point3>,
    /// `aligned + displacements`.
    pub deformed: Vec<Point3>,
    pub rigid: RigidTransform3D,
    /// Nodes moved by the optimiser; the rest were warped afterwards.
    pub assigned: Vec<bool>,
    pub deleted_nodes: Vec<usize>,
    pub decomposition_2d: NodeDecomposition,
    pub decomposition_3d: NodeDecomposition,
    pub matching: BranchTrunkMatching,
    pub assignment: AssignmentMatrix,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub line_search_failure: bool,
    pub energy_trace: Vec<EnergyTerms>,
    pub timing: StageTiming,
}

impl RegistrationResult {
    pub fn final_energy(&self) -> EnergyTerms {
        self.energy_trace.last().copied().unwrap_or_default()
    }
}

struct Clock {
    timing: StageTiming,
    start: Instant,
}

impl Clock {
    fn new() -> Self {
        Self {
            timing: StageTiming::default(),
            start: Instant::now(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.timing.stages.push((stage, (now - self.start).as_secs_f64() * 1e3));
        self.start = now;
    }
}

/// Registers the 3D skeleton `y` to the 2D skeleton `x` seen through `p`,
/// starting from the rigid pre-alignment `rigid`.
///
/// Stages: skeleton graphs and decompositions on both sides, branch/trunk
/// matching, soft assignment, energy minimisation over the assigned nodes,
/// then branch-wise TPS for every other node. Errors carry the stage name.
pub fn register(
    x: &SkeletonPointSet<2>,
    y: &SkeletonPointSet<3>,
    p: &ProjectionMatrix,
    rigid: &RigidTransform3D,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    let mut clock = Clock::new();

    let g3 = build_graph(y).map_err(|e| e.at(Stage::Graph3d))?;
    clock.lap(Stage::Graph3d);
    let d3 = classify_nodes(&g3, &config.decomposition).map_err(|e| e.at(Stage::Classify3d))?;
    clock.lap(Stage::Classify3d);
    let g2 = build_graph(x).map_err(|e| e.at(Stage::Graph2d))?;
    clock.lap(Stage::Graph2d);
    let d2 = classify_nodes(&g2, &config.decomposition).map_err(|e| e.at(Stage::Classify2d))?;
    clock.lap(Stage::Classify2d);

    let aligned = rigid.apply_all(y.points());
    let y0: Vec<Point3> = g3.source_indices().iter().map(|&i| aligned[i]).collect();
    let x2 = g2.points().points();
    let fy = project_points(p, &y0).map_err(|e| e.at(Stage::Matching))?;
    let matching = match_decompositions(&d2, &d3, x2, &fy, &config.tangent).map_err(|e| e.at(Stage::Matching))?;
    clock.lap(Stage::Matching);

    let m = build_assignment(&matching, x2, &fy, &y0).map_err(|e| e.at(Stage::Assignment))?;
    if m.assigned().is_empty() {
        return Err(Error::NoAssignedNodes.at(Stage::Assignment));
    }
    clock.lap(Stage::Assignment);

    let edges: Vec<(usize, usize)> = g3
        .edges()
        .into_iter()
        .filter(|&(i, j)| m.is_assigned(i) && m.is_assigned(j))
        .collect();
    let state = EnergyState {
        x: x2,
        m: &m,
        y: &y0,
        p,
        edges: &edges,
        alpha: config.energy.alpha,
        beta: config.energy.beta,
    };
    let outcome = minimize(&state, &config.energy).map_err(|e| e.at(Stage::Optimization))?;
    clock.lap(Stage::Optimization);

    let phi_graph = post_deform(&g3, &d3, &y0, &outcome.field.phi, &outcome.field.assigned)
        .map_err(|e| e.at(Stage::PostDeformation))?;

    // back to input indexing; nodes outside the kept component are warped
    // with every assigned node as control
    let n3 = y.len();
    let src = g3.source_indices();
    let mut displacements = vec![Displacement::zeros(); n3];
    let mut in_graph = vec![false; n3];
    for (g, &i) in src.iter().enumerate() {
        displacements[i] = phi_graph[g];
        in_graph[i] = true;
    }
    if in_graph.iter().any(|b| !b) {
        let controls: Vec<usize> = (0..g3.len()).filter(|&g| outcome.field.assigned[g]).collect();
        let from: Vec<Point3> = controls.iter().map(|&g| y0[g]).collect();
        let to: Vec<Point3> = controls.iter().map(|&g| y0[g] + outcome.field.phi[g]).collect();
        let tps = ThinPlateSpline::fit(&from, &to).map_err(|e| e.at(Stage::PostDeformation))?;
        for i in (0..n3).filter(|&i| !in_graph[i]) {
            displacements[i] = tps.warp(&aligned[i]) - aligned[i];
        }
    }
    clock.lap(Stage::PostDeformation);

    let mut assigned = vec![false; n3];
    for (g, &i) in src.iter().enumerate() {
        assigned[i] = outcome.field.assigned[g];
    }
    let deformed = aligned.iter().zip(&displacements).map(|(a, d)| a + d).collect();
    let decomposition_3d = remap(&d3, src);
    let decomposition_2d = remap(&d2, g2.source_indices());
    let matching = remap_matching(&matching, g2.source_indices(), src);
    let assignment = remap_assignment(&m, x.len(), g2.source_indices(), n3, src);

    Ok(RegistrationResult {
        displacements,
        aligned,
        deformed,
        rigid: *rigid,
        assigned,
        deleted_nodes: decomposition_3d.deleted_nodes.clone(),
        decomposition_2d,
        decomposition_3d,
        matching,
        assignment,
        iterations: outcome.iterations,
        evaluations: outcome.evaluations,
        converged: outcome.converged,
        line_search_failure: outcome.line_search_failure,
        energy_trace: outcome.energy_trace,
        timing: clock.timing,
    })
}

const MIN_CONTROLS: usize = 4;

/// Displacements of unassigned nodes by a TPS per branch/trunk. Each such
/// node belongs to the segment containing it or, failing that, to the
/// nearest one in graph distance. Controls are the segment's assigned nodes,
/// widened to touching segments and finally to every assigned node while
/// fewer than four are available.
fn post_deform(
    g3: &SkeletonGraph<3>,
    d3: &NodeDecomposition,
    y0: &[Point3],
    phi: &[Displacement],
    assigned: &[bool],
) -> Result<Vec<Displacement>> {
    let n = g3.len();
    let segments: Vec<&Vec<usize>> = d3.segments().collect();
    let owner = nearest_segment(g3, &segments);
    let all_assigned: Vec<usize> = (0..n).filter(|&i| assigned[i]).collect();

    let mut out = phi.to_vec();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); segments.len() + 1];
    for i in (0..n).filter(|&i| !assigned[i]) {
        groups[owner[i].unwrap_or(segments.len())].push(i);
    }
    for (s, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut controls: Vec<usize> = Vec::new();
        if s < segments.len() {
            controls.extend(segments[s].iter().copied().filter(|&i| assigned[i]));
            if controls.len() < MIN_CONTROLS {
                for (t, seg) in segments.iter().enumerate() {
                    if t != s && touches(g3, segments[s], seg) {
                        controls.extend(seg.iter().copied().filter(|&i| assigned[i]));
                    }
                }
                controls.sort_unstable();
                controls.dedup();
            }
        }
        if controls.len() < MIN_CONTROLS {
            controls = all_assigned.clone();
        }
        let from: Vec<Point3> = controls.iter().map(|&i| y0[i]).collect();
        let to: Vec<Point3> = controls.iter().map(|&i| y0[i] + phi[i]).collect();
        let tps = ThinPlateSpline::fit(&from, &to)?;
        for &i in members {
            out[i] = tps.warp(&y0[i]) - y0[i];
        }
    }
    Ok(out)
}

fn touches(g: &SkeletonGraph<3>, a: &[usize], b: &[usize]) -> bool {
    a.iter().any(|&u| b.iter().any(|&v| u == v || g.is_adjacent(u, v)))
}

/// Segment index owning each node: its own segment (first listed) or the
/// nearest one by breadth-first distance.
fn nearest_segment(g: &SkeletonGraph<3>, segments: &[&Vec<usize>]) -> Vec<Option<usize>> {
    let mut owner = vec![None; g.len()];
    let mut queue = VecDeque::new();
    for (s, seg) in segments.iter().enumerate() {
        for &i in seg.iter() {
            if owner[i].is_none() {
                owner[i] = Some(s);
                queue.push_back(i);
            }
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if owner[v].is_none() {
                owner[v] = owner[u];
                queue.push_back(v);
            }
        }
    }
    owner
}

fn remap(d: &NodeDecomposition, src: &[usize]) -> NodeDecomposition {
    let map = |v: &Vec<usize>| v.iter().map(|&i| src[i]).collect::<Vec<_>>();
    NodeDecomposition {
        branches: d.branches.iter().map(map).collect(),
        trunks: d.trunks.iter().map(map).collect(),
        end_nodes: map(&d.end_nodes),
        junction_nodes: map(&d.junction_nodes),
        quasi_junction_nodes: map(&d.quasi_junction_nodes),
        deleted_nodes: map(&d.deleted_nodes),
    }
}

fn remap_matching(m: &BranchTrunkMatching, src2: &[usize], src3: &[usize]) -> BranchTrunkMatching {
    let pair = |(a, b): &(Vec<usize>, Vec<usize>)| {
        (
            a.iter().map(|&i| src2[i]).collect(),
            b.iter().map(|&i| src3[i]).collect(),
        )
    };
    BranchTrunkMatching {
        trunk_pairs: m.trunk_pairs.iter().map(pair).collect(),
        branch_pairs: m.branch_pairs.iter().map(pair).collect(),
        junction_pairs: m.junction_pairs.iter().map(|&(a, b)| (src2[a], src3[b])).collect(),
        unmatched_branches_2d: m.unmatched_branches_2d.clone(),
        unmatched_branches_3d: m.unmatched_branches_3d.clone(),
    }
}

fn remap_assignment(m: &AssignmentMatrix, n2: usize, src2: &[usize], n3: usize, src3: &[usize]) -> AssignmentMatrix {
    let mut out = AssignmentMatrix::zeros(n2, n3);
    for (g, &j) in src3.iter().enumerate() {
        if m.is_assigned(g) {
            let col: Vec<(usize, f64)> = m.column(g).iter().map(|&(i, w)| (src2[i], w)).collect();
            out.set_column(j, &col);
        }
    }
    out
}
