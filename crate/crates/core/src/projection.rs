//! Perspective projection through a 3x4 matrix, its derivative blocks, and a
//! rigid pre-alignment of a 3D skeleton against a 2D one.

use std::ops::AddAssign;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x4, Matrix6, Rotation3, SMatrix, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Point2, Point3, SkeletonPointSet};

/// Denominators at or below this magnitude are treated as points on the
/// camera plane.
pub const DEPTH_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix {
    m: Matrix3x4<f64>,
}

impl ProjectionMatrix {
    pub fn new(m: Matrix3x4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("projection matrix has non-finite entries".into()));
        }
        if m.row(2).iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateProjection);
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 4]; 3]) -> Result<Self> {
        Self::new(Matrix3x4::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 4]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.m[(r, c)]))
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.m * s)
    }

    /// `p3 . (y, 1)`.
    pub fn depth(&self, y: &Point3) -> f64 {
        self.m.row(2).dot(&lift(y).transpose())
    }

    pub fn project_point(&self, y: &Point3) -> Option<Point2> {
        let h = self.m * lift(y);
        if h.z.abs() <= DEPTH_EPS {
            return None;
        }
        Some(Point2::new(h.x / h.z, h.y / h.z))
    }

    /// Derivative of the projected point with respect to `y`.
    pub fn derivative(&self, y: &Point3) -> Option<Matrix2x3<f64>> {
        let den = self.depth(y);
        if den.abs() <= DEPTH_EPS {
            return None;
        }
        let g = projection_jacobian_core(self) * lift(y);
        let s = 1.0 / (den * den);
        Some(Matrix2x3::new(
            g[0] * s,
            g[2] * s,
            g[4] * s,
            g[1] * s,
            g[3] * s,
            g[5] * s,
        ))
    }
}

pub(crate) fn lift(y: &Point3) -> Vector4<f64> {
    Vector4::new(y.x, y.y, y.z, 1.0)
}

/// Projects every point, failing on the first point with zero depth.
pub fn project_points(p: &ProjectionMatrix, points: &[Point3]) -> Result<Vec<Point2>> {
    points
        .iter()
        .enumerate()
        .map(|(index, y)| {
            p.project_point(y).ok_or(Error::DegenerateDepth {
                index,
                depth: p.depth(y),
            })
        })
        .collect()
}

pub fn project(p: &ProjectionMatrix, y: &SkeletonPointSet<3>) -> Result<SkeletonPointSet<2>> {
    SkeletonPointSet::from_points(project_points(p, y.points())?)
}

/// 6x4 matrix whose product with `(y, 1)` gives the numerators of
/// d(u, v)/d(y1, y2, y3), interleaved as (du/dy1, dv/dy1, du/dy2, ...).
pub fn projection_jacobian_core(p: &ProjectionMatrix) -> SMatrix<f64, 6, 4> {
    let m = &p.m;
    let lead =
        SMatrix::<f64, 6, 1>::from_column_slice(&[m[(0, 0)], m[(1, 0)], m[(0, 1)], m[(1, 1)], m[(0, 2)], m[(1, 2)]]);
    let p3 = m.row(2);
    let p3_spatial = Vector3::new(m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let p12 = m.fixed_rows::<2>(0).into_owned();
    lead * p3 - p3_spatial.kronecker(&p12)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform3D {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform3D {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform3D {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams("rotation must be orthonormal with det +1".into()));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("translation must be finite".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, y: &Point3) -> Point3 {
        self.rotation * y + self.translation
    }

    pub fn apply_all(&self, ys: &[Point3]) -> Vec<Point3> {
        ys.iter().map(|y| self.apply(y)).collect()
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        Rotation3::from_matrix_unchecked(self.rotation).angle()
    }
}

const PREALIGN_MAX_ITERS: usize = 50;
const PREALIGN_TOL: f64 = 1e-8;
const PRIOR_PX_PER_MM: f64 = 0.2;

/// Projected ICP: nearest 2D neighbours of the projected points, then a
/// damped Gauss-Newton step on a rotation about the centroid of `y` and a
/// translation. Never returns a transform with a higher cost than identity.
///
/// Depth and out-of-plane rotation are barely visible in one view and soak up
/// non-rigid misfit, so they carry a weak quadratic prior: one mm of motion
/// along the view axis costs as much as `PRIOR_PX_PER_MM` px of image misfit.
/// A first pass pins those directions hard and solves the in-plane motion
/// only; the second relaxes to the weak prior. Residuals are point-to-line
/// against the local tangent of `x`.
pub fn rigid_prealign(x: &[Point2], y: &[Point3], p: &ProjectionMatrix) -> Result<RigidTransform3D> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput);
    }
    let centroid = y.iter().sum::<Point3>() / y.len() as f64;
    let centred: Vec<Point3> = y.iter().map(|v| v - centroid).collect();
    let nn = NearestNeighbors::new(x);
    // point-to-line residuals; plain nearest points slide along the curve
    let weights = nn.line_weights(0.1);

    // principal axis; for an affine camera, the direction that does not move the image
    let rows = p.rows();
    let spatial = |r: usize| Vector3::new(rows[r][0], rows[r][1], rows[r][2]);
    let axis = spatial(2)
        .try_normalize(0.0)
        .or_else(|| spatial(0).cross(&spatial(1)).try_normalize(0.0))
        .unwrap_or_else(Vector3::z);
    let along = axis * axis.transpose();
    let across = Matrix3::identity() - along;
    let radius2 = centred.iter().map(|v| v.norm_squared()).sum::<f64>() / y.len() as f64;
    let gain = p
        .derivative(&centroid)
        .map(|d| (d.norm_squared() / 2.0).sqrt())
        .unwrap_or(0.0);
    let lambda = (PRIOR_PX_PER_MM * gain).powi(2);
    let prior_of = |scale: f64| (along * (lambda * scale), across * (lambda * radius2 * scale));
    let prior = |(pt, pw): (Matrix3<f64>, Matrix3<f64>), rot: &Rotation3<f64>, t: &Vector3<f64>| -> f64 {
        let w = rot.scaled_axis();
        t.dot(&(pt * t)) + w.dot(&(pw * w))
    };

    let place = |rot: &Rotation3<f64>, t: &Vector3<f64>| -> Vec<Point3> {
        centred.iter().map(|v| rot * v + centroid + t).collect()
    };
    let nn_cost = |pts: &[Point3]| -> Option<f64> {
        let mut sum = 0.0;
        for v in pts {
            let u = p.project_point(v)?;
            sum += nn.nearest(&u).1;
        }
        Some(sum / pts.len() as f64)
    };

    if nn_cost(y).is_none() {
        let (index, depth) = y
            .iter()
            .enumerate()
            .map(|(i, v)| (i, p.depth(v)))
            .find(|(_, d)| d.abs() <= DEPTH_EPS)
            .unwrap_or((0, 0.0));
        return Err(Error::DegenerateDepth { index, depth });
    }
    let mut rot = Rotation3::identity();
    let mut t = Vector3::zeros();
    // in-plane motion first with the weak directions all but frozen, then all six
    for scale in [1e6, 1.0] {
        let (prior_t, prior_w) = prior_of(scale);
        let total = |rot: &Rotation3<f64>, t: &Vector3<f64>| {
            nn_cost(&place(rot, t)).map_or(f64::INFINITY, |c| c + prior((prior_t, prior_w), rot, t))
        };
        let mut cost = total(&rot, &t);
        let mut mu = 1e-3;

        for _ in 0..PREALIGN_MAX_ITERS {
            let pts = place(&rot, &t);
            let targets: Vec<usize> = pts
                .iter()
                .map(|v| nn.nearest(&p.project_point(v).expect("checked")).0)
                .collect();
            let fixed_cost = |pts: &[Point3]| -> Option<f64> {
                let mut sum = 0.0;
                for (v, &k) in pts.iter().zip(&targets) {
                    let r = p.project_point(v)? - x[k];
                    sum += r.dot(&(weights[k] * r));
                }
                Some(sum / pts.len() as f64)
            };

            let mut a = Matrix6::<f64>::zeros();
            let mut g = Vector6::<f64>::zeros();
            for ((v, &k), c) in pts.iter().zip(&targets).zip(&centred) {
                let r = p.project_point(v).expect("checked") - x[k];
                let d = p.derivative(v).expect("checked");
                let arm = rot * c;
                let mut jac = SMatrix::<f64, 2, 6>::zeros();
                jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-d * arm.cross_matrix()));
                jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&d);
                let wj = weights[k] * jac;
                a += jac.transpose() * wj;
                g += wj.transpose() * r;
            }
            let count = pts.len() as f64;
            a /= count;
            g /= count;
            let w = rot.scaled_axis();
            a.fixed_view_mut::<3, 3>(0, 0).add_assign(&prior_w);
            a.fixed_view_mut::<3, 3>(3, 3).add_assign(&prior_t);
            g.fixed_rows_mut::<3>(0).add_assign(&(prior_w * w));
            g.fixed_rows_mut::<3>(3).add_assign(&(prior_t * t));
            let base = fixed_cost(&pts).expect("checked") + prior((prior_t, prior_w), &rot, &t);
            let floor = 1e-9 * a.diagonal().max().max(1e-300);

            let mut stepped = false;
            for _ in 0..12 {
                let mut damped = a;
                for k in 0..6 {
                    damped[(k, k)] += mu * (a[(k, k)] + floor);
                }
                let Some(delta) = damped.lu().solve(&(-g)) else {
                    mu *= 10.0;
                    continue;
                };
                let dw = Vector3::new(delta[0], delta[1], delta[2]);
                let new_rot = Rotation3::new(dw) * rot;
                let new_t = t + Vector3::new(delta[3], delta[4], delta[5]);
                let cand = place(&new_rot, &new_t);
                match fixed_cost(&cand).map(|c| c + prior((prior_t, prior_w), &new_rot, &new_t)) {
                    Some(c) if c < base => {
                        rot = new_rot;
                        t = new_t;
                        mu = (mu * 0.3).max(1e-12);
                        stepped = true;
                        break;
                    }
                    _ => mu *= 10.0,
                }
            }
            if !stepped {
                break;
            }
            let new_cost = total(&rot, &t);
            let improvement = cost - new_cost;
            if new_cost <= cost {
                cost = new_cost;
            }
            if improvement < PREALIGN_TOL {
                break;
            }
        }
    }

    let identity_cost = nn_cost(y).expect("checked above");
    let final_cost = nn_cost(&place(&rot, &t)).unwrap_or(f64::INFINITY);
    if !(final_cost <= identity_cost) {
        return Ok(RigidTransform3D::identity());
    }
    let r = *rot.matrix();
    Ok(RigidTransform3D {
        rotation: r,
        translation: centroid + t - r * centroid,
    })
}

/// Nearest-neighbour lookup over a uniform bucket grid.
pub(crate) struct NearestNeighbors<'a> {
    points: &'a [Point2],
    cell: f64,
    origin: Point2,
    upper: Point2,
    buckets: std::collections::HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> NearestNeighbors<'a> {
    pub(crate) fn new(points: &'a [Point2]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for q in points {
            lo = lo.inf(q);
            hi = hi.sup(q);
        }
        let extent = (hi - lo).max().max(1e-9);
        let cell = (extent / (points.len() as f64).sqrt()).max(1e-9);
        let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
        for (i, q) in points.iter().enumerate() {
            let key = (
                ((q.x - lo.x) / cell).floor() as i64,
                ((q.y - lo.y) / cell).floor() as i64,
            );
            buckets.entry(key).or_default().push(i);
        }
        Self {
            points,
            cell,
            origin: lo,
            upper: hi,
            buckets,
        }
    }

    /// Index of the nearest point and the squared distance to it.
    pub(crate) fn nearest(&self, q: &Point2) -> (usize, f64) {
        let pad = 2.0 * self.cell;
        if q.x < self.origin.x - pad
            || q.y < self.origin.y - pad
            || q.x > self.upper.x + pad
            || q.y > self.upper.y + pad
        {
            return self.scan(q);
        }
        let cx = ((q.x - self.origin.x) / self.cell).floor() as i64;
        let cy = ((q.y - self.origin.y) / self.cell).floor() as i64;
        let mut best = (usize::MAX, f64::INFINITY);
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    if let Some(ids) = self.buckets.get(&(cx + dx, cy + dy)) {
                        for &i in ids {
                            let d = (self.points[i] - q).norm_squared();
                            if d < best.1 || (d == best.1 && i < best.0) {
                                best = (i, d);
                            }
                        }
                    }
                }
            }
            // every unvisited cell is at least `ring * cell` away
            let reach = ring as f64 * self.cell;
            if best.0 != usize::MAX && reach * reach > best.1 {
                return best;
            }
            ring += 1;
        }
    }

    /// Indices of all points within `radius` of `q`, in index order.
    pub(crate) fn within(&self, q: &Point2, radius: f64) -> Vec<usize> {
        let reach = (radius / self.cell).ceil() as i64;
        let cx = ((q.x - self.origin.x) / self.cell).floor() as i64;
        let cy = ((q.y - self.origin.y) / self.cell).floor() as i64;
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                if let Some(ids) = self.buckets.get(&(cx + dx, cy + dy)) {
                    out.extend(ids.iter().copied().filter(|&i| (self.points[i] - q).norm() <= radius));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Per-point residual weights `n n' + w^2 t t'` from the local tangent
    /// `t` (principal direction of the neighbours within three spacings).
    /// Isolated points get the identity.
    pub(crate) fn line_weights(&self, tangential: f64) -> Vec<Matrix2<f64>> {
        let mut gaps: Vec<f64> = self
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, q)| {
                self.within(q, 2.0 * self.cell)
                    .into_iter()
                    .filter(|&j| j != i)
                    .map(|j| (self.points[j] - q).norm())
                    .filter(|&d| d > 0.0)
                    .min_by(f64::total_cmp)
            })
            .collect();
        if gaps.is_empty() {
            return vec![Matrix2::identity(); self.points.len()];
        }
        gaps.sort_by(f64::total_cmp);
        let radius = 3.0 * gaps[gaps.len() / 2];
        self.points
            .iter()
            .map(|q| {
                let ids = self.within(q, radius);
                if ids.len() < 3 {
                    return Matrix2::identity();
                }
                let mean = ids.iter().map(|&j| self.points[j]).sum::<Point2>() / ids.len() as f64;
                let cov = ids
                    .iter()
                    .map(|&j| {
                        let d = self.points[j] - mean;
                        d * d.transpose()
                    })
                    .sum::<Matrix2<f64>>();
                let eig = cov.symmetric_eigen();
                let k = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
                let t = eig.eigenvectors.column(k).into_owned();
                let n = Point2::new(-t.y, t.x);
                n * n.transpose() + t * t.transpose() * (tangential * tangential)
            })
            .collect()
    }

    fn scan(&self, q: &Point2) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, x) in self.points.iter().enumerate() {
            let d = (x - q).norm_squared();
            if d < best.1 || (d == best.1 && i < best.0) {
                best = (i, d);
            }
        }
        best
    }
}
