//! Registration energy over per-node displacements and its minimisation.
//!
//! With `Ỹ = Y + Φ` the energy is
//! `S_D + alpha * S_L + beta * S_S` where
//! `S_D = 1/n3 Σ_j |X m_j - f(ỹ_j)|²` over assigned nodes,
//! `S_L = 1/|E| Σ_(i,j) (|ỹ_i - ỹ_j| - |y_i - y_j|)²` and
//! `S_S = 1/|E| Σ_(i,j) |φ_i - φ_j|²`.

use std::cell::Cell;

use nalgebra::{DVector, Matrix6xX, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::bfgs::{self, BfgsOptions, Termination};
use crate::correspondence::AssignmentMatrix;
use crate::error::{Error, Result};
use crate::projection::{lift, projection_jacobian_core, ProjectionMatrix, DEPTH_EPS};
use crate::skeleton::{Point2, Point3};

pub type Displacement = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Relative gradient tolerance: iteration stops once
    /// `|∇ε| < grad_tol * (|∇ε(0)| + 1)`.
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            alpha: 500.0,
            beta: 10.0,
            grad_tol: 1e-6,
            max_iters: 500,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(
                "alpha and beta must be finite and non-negative".into(),
            ));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("grad_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Per-node displacements; `assigned` marks the nodes moved by the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub phi: Vec<Displacement>,
    pub assigned: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub total: f64,
    pub data: f64,
    pub length: f64,
    pub smoothness: f64,
}

/// Everything the energy needs besides `Φ`.
#[derive(Debug, Clone)]
pub struct EnergyState<'a> {
    pub x: &'a [Point2],
    pub m: &'a AssignmentMatrix,
    /// Rest positions (pre-aligned 3D skeleton).
    pub y: &'a [Point3],
    pub p: &'a ProjectionMatrix,
    /// Edges entering the length and smoothness terms.
    pub edges: &'a [(usize, usize)],
    pub alpha: f64,
    pub beta: f64,
}

/// Scratch buffers rebuilt on every evaluation.
#[derive(Debug, Clone)]
pub struct GradientWorkspace {
    pub d: Matrix6xX<f64>,
    pub j: SMatrix<f64, 6, 4>,
    pub denominators: Vec<f64>,
    targets: Vec<Option<Point2>>,
}

impl GradientWorkspace {
    pub fn new(state: &EnergyState) -> Self {
        let n = state.y.len();
        Self {
            d: Matrix6xX::zeros(n),
            j: projection_jacobian_core(state.p),
            denominators: vec![0.0; n],
            targets: (0..n)
                .map(|j| state.m.is_assigned(j).then(|| state.m.target(j, state.x)))
                .collect(),
        }
    }
}

pub fn data_term(
    phi: &[Displacement],
    x: &[Point2],
    m: &AssignmentMatrix,
    y: &[Point3],
    p: &ProjectionMatrix,
) -> Result<f64> {
    let n3 = y.len() as f64;
    let mut sum = 0.0;
    for j in m.assigned() {
        let yt = y[j] + phi[j];
        let f = p.project_point(&yt).ok_or(Error::DegenerateDepth {
            index: j,
            depth: p.depth(&yt),
        })?;
        sum += (m.target(j, x) - f).norm_squared();
    }
    Ok(sum / n3)
}

pub fn length_term(phi: &[Displacement], y: &[Point3], edges: &[(usize, usize)]) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let sum: f64 = edges
        .iter()
        .map(|&(i, j)| {
            let rest = (y[i] - y[j]).norm();
            let now = (y[i] + phi[i] - y[j] - phi[j]).norm();
            (now - rest).powi(2)
        })
        .sum();
    sum / edges.len() as f64
}

pub fn smoothness_term(phi: &[Displacement], edges: &[(usize, usize)]) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let sum: f64 = edges.iter().map(|&(i, j)| (phi[i] - phi[j]).norm_squared()).sum();
    sum / edges.len() as f64
}

/// Energy and its gradient with respect to every node's displacement.
/// The data gradient is assembled from the 6 x n3 matrix `D` (residuals
/// times the projection-derivative numerators) divided by the squared
/// depths.
pub fn energy_and_gradient(
    phi: &[Displacement],
    state: &EnergyState,
    ws: &mut GradientWorkspace,
) -> Result<(EnergyTerms, Vec<Displacement>)> {
    let n = state.y.len();
    let scale = 2.0 / n as f64;
    let mut grad = vec![Displacement::zeros(); n];
    let mut data = 0.0;
    ws.d.fill(0.0);
    for j in 0..n {
        let Some(target) = ws.targets[j] else {
            ws.denominators[j] = 0.0;
            continue;
        };
        let yh = lift(&(state.y[j] + phi[j]));
        let h = state.p.matrix() * yh;
        if h.z.abs() <= DEPTH_EPS {
            return Err(Error::DegenerateDepth { index: j, depth: h.z });
        }
        ws.denominators[j] = h.z;
        let r = target - Point2::new(h.x / h.z, h.y / h.z);
        data += r.norm_squared();
        let jy: Vector6<f64> = ws.j * yh;
        let col = Vector6::new(
            r.x * jy[0],
            r.y * jy[1],
            r.x * jy[2],
            r.y * jy[3],
            r.x * jy[4],
            r.y * jy[5],
        ) * -scale;
        ws.d.set_column(j, &col);
        let den2 = h.z * h.z;
        grad[j] = Displacement::new(col[0] + col[1], col[2] + col[3], col[4] + col[5]) / den2;
    }
    data /= n as f64;

    let mut length = 0.0;
    let mut smooth = 0.0;
    if !state.edges.is_empty() {
        let inv_e = 1.0 / state.edges.len() as f64;
        for &(i, j) in state.edges {
            let rest = (state.y[i] - state.y[j]).norm();
            let diff = state.y[i] + phi[i] - state.y[j] - phi[j];
            let now = diff.norm();
            length += (now - rest).powi(2);
            if state.alpha != 0.0 && now > 0.0 {
                let g = diff * (2.0 * state.alpha * inv_e * (now - rest) / now);
                grad[i] += g;
                grad[j] -= g;
            }
            let dphi = phi[i] - phi[j];
            smooth += dphi.norm_squared();
            if state.beta != 0.0 {
                let g = dphi * (2.0 * state.beta * inv_e);
                grad[i] += g;
                grad[j] -= g;
            }
        }
        length *= inv_e;
        smooth *= inv_e;
    }
    let terms = EnergyTerms {
        total: data + state.alpha * length + state.beta * smooth,
        data,
        length,
        smoothness: smooth,
    };
    Ok((terms, grad))
}

#[derive(Debug, Clone)]
pub struct MinimizeOutcome {
    pub field: DisplacementField,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub line_search_failure: bool,
    /// Terms at every accepted iterate, starting with `Φ = 0`.
    pub energy_trace: Vec<EnergyTerms>,
}

/// BFGS over the displacements of assigned nodes, starting from zero.
/// Unassigned nodes stay at zero.
pub fn minimize(state: &EnergyState, config: &EnergyConfig) -> Result<MinimizeOutcome> {
    config.validate()?;
    let n = state.y.len();
    let vars = state.m.assigned();
    if vars.is_empty() {
        return Err(Error::NoAssignedNodes);
    }
    let mut ws = GradientWorkspace::new(state);
    let expand = |v: &DVector<f64>| -> Vec<Displacement> {
        let mut phi = vec![Displacement::zeros(); n];
        for (k, &j) in vars.iter().enumerate() {
            phi[j] = Displacement::new(v[3 * k], v[3 * k + 1], v[3 * k + 2]);
        }
        phi
    };
    let gather = |g: &[Displacement]| -> DVector<f64> {
        DVector::from_iterator(vars.len() * 3, vars.iter().flat_map(|&j| [g[j].x, g[j].y, g[j].z]))
    };

    let zero = DVector::zeros(vars.len() * 3);
    let (_, g0) = energy_and_gradient(&expand(&zero), state, &mut ws)?;
    let opts = BfgsOptions {
        grad_tol: config.grad_tol * (gather(&g0).norm() + 1.0),
        max_iters: config.max_iters,
        ..Default::default()
    };

    // the accepted iterate is always the most recent evaluation
    let last = Cell::new(EnergyTerms::default());
    let mut trace = Vec::new();
    let outcome = bfgs::minimize(
        |v| {
            let (terms, g) = energy_and_gradient(&expand(v), state, &mut ws).ok()?;
            last.set(terms);
            Some((terms.total, gather(&g)))
        },
        zero,
        &opts,
        |_, _| trace.push(last.get()),
    )
    .expect("energy is defined at the starting point");

    let phi = expand(&outcome.x);
    let mut assigned = vec![false; n];
    for &j in &vars {
        assigned[j] = true;
    }
    if outcome.termination == Termination::LineSearchFailure {
        log::warn!(
            "line search failed after {} iterations; keeping best iterate",
            outcome.iterations
        );
    }
    Ok(MinimizeOutcome {
        field: DisplacementField { phi, assigned },
        iterations: outcome.iterations,
        evaluations: outcome.evaluations,
        converged: outcome.termination == Termination::Converged,
        line_search_failure: outcome.termination == Termination::LineSearchFailure,
        energy_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cone_beam() -> ProjectionMatrix {
        ProjectionMatrix::from_rows([
            [1500.0, 0.0, 256.0, 256.0 * 1000.0],
            [0.0, 1500.0, 256.0, 256.0 * 1000.0],
            [0.0, 0.0, 1.0, 1000.0],
        ])
        .unwrap()
    }

    fn orthographic() -> ProjectionMatrix {
        ProjectionMatrix::from_rows([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap()
    }

    struct Fixture {
        x: Vec<Point2>,
        y: Vec<Point3>,
        m: AssignmentMatrix,
        edges: Vec<(usize, usize)>,
        phi: Vec<Displacement>,
    }

    fn random_fixture(rng: &mut ChaCha8Rng, n: usize, p: &ProjectionMatrix) -> Fixture {
        let mut y = vec![Point3::new(0.0, 0.0, 0.0)];
        for _ in 1..n {
            let last = *y.last().unwrap();
            y.push(
                last + Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(-0.5..0.5),
                ),
            );
        }
        let x: Vec<Point2> = y
            .iter()
            .map(|v| p.project_point(v).unwrap() + Point2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect();
        let mut m = AssignmentMatrix::zeros(n, n);
        for j in 0..n {
            if rng.gen_bool(0.8) {
                let i = rng.gen_range(0..n - 1);
                let w = rng.gen_range(0.0..1.0);
                m.set_column(j, &[(i, 1.0 - w), (i + 1, w)]);
            }
        }
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        let phi = (0..n)
            .map(|_| {
                Displacement::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                )
            })
            .collect();
        Fixture { x, y, m, edges, phi }
    }

    fn state<'a>(f: &'a Fixture, p: &'a ProjectionMatrix, alpha: f64, beta: f64) -> EnergyState<'a> {
        EnergyState {
            x: &f.x,
            m: &f.m,
            y: &f.y,
            p,
            edges: &f.edges,
            alpha,
            beta,
        }
    }

    #[test]
    fn data_term_examples() {
        let p = cone_beam();
        let y: Vec<Point3> = (0..4).map(|i| Point3::new(i as f64, 2.0 * i as f64, 5.0)).collect();
        let x: Vec<Point2> = y.iter().map(|v| p.project_point(v).unwrap()).collect();
        let mut m = AssignmentMatrix::zeros(4, 4);
        for j in 0..4 {
            m.set_column(j, &[(j, 1.0)]);
        }
        let zero = vec![Displacement::zeros(); 4];
        assert_eq!(data_term(&zero, &x, &m, &y, &p).unwrap(), 0.0);

        let mut one = AssignmentMatrix::zeros(4, 4);
        one.set_column(2, &[(2, 1.0)]);
        let mut shifted = x.clone();
        shifted[2] += Point2::new(3.0, 4.0);
        let sd = data_term(&zero, &shifted, &one, &y, &p).unwrap();
        assert!((sd - 25.0 / 4.0).abs() < 1e-9);

        let doubled: Vec<Point2> = x.iter().zip(&shifted).map(|(a, b)| a + (b - a) * 2.0).collect();
        let sd2 = data_term(&zero, &doubled, &one, &y, &p).unwrap();
        assert!((sd2 - 4.0 * sd).abs() < 1e-9);
    }

    #[test]
    fn length_and_smoothness_examples() {
        let y = vec![Point3::zeros(), Point3::new(1.0, 0.0, 0.0), Point3::new(1.0, 1.0, 0.0)];
        let edges = vec![(0, 1), (1, 2)];
        let zero = vec![Displacement::zeros(); 3];
        assert_eq!(length_term(&zero, &y, &edges), 0.0);
        assert_eq!(smoothness_term(&zero, &edges), 0.0);
        let shift = vec![Displacement::new(3.0, -1.0, 2.0); 3];
        assert!(length_term(&shift, &y, &edges) < 1e-24);
        assert_eq!(smoothness_term(&shift, &edges), 0.0);
        // stretch edge (0,1) from 1 to 1.5
        let stretch = vec![
            Displacement::zeros(),
            Displacement::new(0.5, 0.0, 0.0),
            Displacement::new(0.5, 0.0, 0.0),
        ];
        assert!((length_term(&stretch, &y, &edges) - 0.25 / 2.0).abs() < 1e-12);
        // phi differs by (1,0,0) across edge (0,1) only
        let step = vec![
            Displacement::zeros(),
            Displacement::new(1.0, 0.0, 0.0),
            Displacement::new(1.0, 0.0, 0.0),
        ];
        assert!((smoothness_term(&step, &edges) - 0.5).abs() < 1e-12);
    }

    fn fd_error(f: &Fixture, st: &EnergyState) -> f64 {
        let mut ws = GradientWorkspace::new(st);
        let (_, g) = energy_and_gradient(&f.phi, st, &mut ws).unwrap();
        let h = 1e-5;
        let mut max_diff: f64 = 0.0;
        let mut max_g: f64 = 0.0;
        for j in 0..f.phi.len() {
            for k in 0..3 {
                let mut a = f.phi.clone();
                let mut b = f.phi.clone();
                a[j][k] += h;
                b[j][k] -= h;
                let ea = energy_and_gradient(&a, st, &mut ws).unwrap().0.total;
                let eb = energy_and_gradient(&b, st, &mut ws).unwrap().0.total;
                let fd = (ea - eb) / (2.0 * h);
                max_diff = max_diff.max((fd - g[j][k]).abs());
                max_g = max_g.max(fd.abs());
            }
        }
        max_diff / max_g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = cone_beam();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let f = random_fixture(&mut rng, 40, &p);
            let err = fd_error(&f, &state(&f, &p, 500.0, 10.0));
            assert!(err < 1e-5, "relative error {err}");
            let err = fd_error(&f, &state(&f, &p, 0.0, 0.0));
            assert!(err < 1e-5, "data-only relative error {err}");
        }
    }

    #[test]
    fn zero_weights_isolate_the_data_gradient() {
        let p = cone_beam();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_fixture(&mut rng, 20, &p);
        let st = state(&f, &p, 0.0, 0.0);
        let mut ws = GradientWorkspace::new(&st);
        let (terms, g) = energy_and_gradient(&f.phi, &st, &mut ws).unwrap();
        assert_eq!(terms.total, terms.data);
        for j in 0..20 {
            if !f.m.is_assigned(j) {
                assert_eq!(g[j], Displacement::zeros());
            } else {
                // rebuild from the workspace matrices
                let d = ws.d.column(j);
                let den2 = ws.denominators[j].powi(2);
                let want = Displacement::new(d[0] + d[1], d[2] + d[3], d[4] + d[5]) / den2;
                assert_eq!(g[j], want);
            }
        }
    }

    #[test]
    fn optimal_start_is_kept() {
        let p = cone_beam();
        let y: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 0.5 * i as f64, 0.0)).collect();
        let x: Vec<Point2> = y.iter().map(|v| p.project_point(v).unwrap()).collect();
        let mut m = AssignmentMatrix::zeros(10, 10);
        for j in 0..10 {
            m.set_column(j, &[(j, 1.0)]);
        }
        let edges: Vec<(usize, usize)> = (1..10).map(|i| (i - 1, i)).collect();
        let st = EnergyState {
            x: &x,
            m: &m,
            y: &y,
            p: &p,
            edges: &edges,
            alpha: 500.0,
            beta: 10.0,
        };
        let out = minimize(&st, &EnergyConfig::default()).unwrap();
        assert!(out.iterations <= 1);
        assert!(out.field.phi.iter().all(|v| v.norm() < 1e-9));
    }

    #[test]
    fn quadratic_toy_matches_normal_equations() {
        // orthographic camera, no length term: S_D + beta S_S is quadratic in
        // the in-plane displacements and flat in depth
        let p = orthographic();
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<Point3> = (0..n)
            .map(|i| Point3::new(i as f64, 0.0, rng.gen_range(-1.0..1.0)))
            .collect();
        let x: Vec<Point2> = (0..n)
            .map(|i| Point2::new(i as f64 + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let mut m = AssignmentMatrix::zeros(n, n);
        for j in 0..n {
            m.set_column(j, &[(j, 1.0)]);
        }
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        let beta = 10.0;
        let st = EnergyState {
            x: &x,
            m: &m,
            y: &y,
            p: &p,
            edges: &edges,
            alpha: 0.0,
            beta,
        };
        let cfg = EnergyConfig {
            alpha: 0.0,
            beta,
            grad_tol: 1e-12,
            max_iters: 500,
        };
        let out = minimize(&st, &cfg).unwrap();

        // normal equations per axis: (I/n + beta/|E| L) phi = (x - y)/n
        let e = edges.len() as f64;
        let mut a = nalgebra::DMatrix::<f64>::identity(n, n) / n as f64;
        for &(i, j) in &edges {
            let w = beta / e;
            a[(i, i)] += w;
            a[(j, j)] += w;
            a[(i, j)] -= w;
            a[(j, i)] -= w;
        }
        let lu = a.lu();
        for axis in 0..2 {
            let b = nalgebra::DVector::from_iterator(n, (0..n).map(|j| (x[j][axis] - y[j][axis]) / n as f64));
            let want = lu.solve(&b).unwrap();
            for j in 0..n {
                assert!((out.field.phi[j][axis] - want[j]).abs() < 1e-6);
            }
        }
        assert!(out.field.phi.iter().all(|v| v.z.abs() < 1e-12));
    }

    #[test]
    fn accepted_energies_never_increase() {
        let p = cone_beam();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_fixture(&mut rng, 30, &p);
        let out = minimize(&state(&f, &p, 500.0, 10.0), &EnergyConfig::default()).unwrap();
        assert_eq!(out.energy_trace.len(), out.iterations + 1);
        assert!(out.energy_trace.windows(2).all(|w| w[1].total <= w[0].total));
        assert!(out.energy_trace.last().unwrap().total < out.energy_trace[0].total);
    }

    #[test]
    fn argmin_ignores_projection_scale() {
        let p = cone_beam();
        let q = p.scaled(-3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = random_fixture(&mut rng, 25, &p);
        let cfg = EnergyConfig {
            grad_tol: 1e-10,
            ..Default::default()
        };
        let a = minimize(&state(&f, &p, 500.0, 10.0), &cfg).unwrap();
        let b = minimize(&state(&f, &q, 500.0, 10.0), &cfg).unwrap();
        let ea = a.energy_trace.last().unwrap().total;
        let eb = b.energy_trace.last().unwrap().total;
        assert!((ea - eb).abs() <= 1e-6 * ea.max(1e-12));
        for (u, v) in a.field.phi.iter().zip(&b.field.phi) {
            assert!((u - v).norm() < 1e-3, "{u} vs {v}");
        }
    }

    #[test]
    fn empty_assignment_is_an_error() {
        let p = cone_beam();
        let y = vec![Point3::zeros(); 2];
        let m = AssignmentMatrix::zeros(1, 2);
        let st = EnergyState {
            x: &[Point2::zeros()],
            m: &m,
            y: &y,
            p: &p,
            edges: &[],
            alpha: 1.0,
            beta: 1.0,
        };
        assert!(matches!(
            minimize(&st, &EnergyConfig::default()),
            Err(Error::NoAssignedNodes)
        ));
    }
}
