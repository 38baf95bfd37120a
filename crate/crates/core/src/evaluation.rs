//! Point-to-curve distances and the error summaries built on them.

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::projection::{project_points, ProjectionMatrix, RigidTransform3D};
use crate::skeleton::{Point2, Point3, SkeletonGraph};

/// Line segments making up one or more piecewise-linear curves.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve<const D: usize> {
    segments: Vec<(SVector<f64, D>, SVector<f64, D>)>,
}

pub type Curve2 = Curve<2>;
pub type Curve3 = Curve<3>;

impl<const D: usize> Curve<D> {
    /// Consecutive points of each polyline are joined; single-point
    /// polylines contribute nothing.
    pub fn from_polylines(polylines: &[Vec<SVector<f64, D>>]) -> Result<Self> {
        let segments: Vec<_> = polylines
            .iter()
            .flat_map(|pl| pl.windows(2).map(|w| (w[0], w[1])))
            .collect();
        if segments.is_empty() {
            return Err(Error::EmptyCurve);
        }
        Ok(Self { segments })
    }

    /// One segment per graph edge.
    pub fn from_graph(graph: &SkeletonGraph<D>) -> Result<Self> {
        Self::from_edges(graph.points().points(), &graph.edges())
    }

    pub fn from_edges(points: &[SVector<f64, D>], edges: &[(usize, usize)]) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::EmptyCurve);
        }
        Ok(Self {
            segments: edges.iter().map(|&(i, j)| (points[i], points[j])).collect(),
        })
    }

    pub fn segments(&self) -> &[(SVector<f64, D>, SVector<f64, D>)] {
        &self.segments
    }

    pub fn distance(&self, q: &SVector<f64, D>) -> f64 {
        self.segments
            .iter()
            .map(|(a, b)| segment_distance_sq(q, a, b))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

fn segment_distance_sq<const D: usize>(q: &SVector<f64, D>, a: &SVector<f64, D>, b: &SVector<f64, D>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((q - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + ab * t - q).norm_squared()
}

/// Distance from every point to the nearest point of `curve`.
pub fn point_to_curve<const D: usize>(points: &[SVector<f64, D>], curve: &Curve<D>) -> Vec<f64> {
    points.iter().map(|q| curve.distance(q)).collect()
}

/// Mean and population standard deviation; zeros for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pre-deformation errors: mean distance from `project(P, R Y + T)` to the
/// 2D curve, and from `R Y + T` to the 3D ground-truth curve when given.
pub fn shape_variation(
    x_curve: &Curve2,
    y: &[Point3],
    p: &ProjectionMatrix,
    rigid: &RigidTransform3D,
    truth_3d: Option<&Curve3>,
) -> Result<(f64, Option<f64>)> {
    let aligned = rigid.apply_all(y);
    let projected = project_points(p, &aligned)?;
    let sv2 = mean_std(&point_to_curve(&projected, x_curve)).0;
    let sv3 = truth_3d.map(|c| mean_std(&point_to_curve(&aligned, c)).0);
    Ok((sv2, sv3))
}

/// One row of the metrics table. Distances in pixels (2D) and mm (3D);
/// `None` where a value does not exist (no 3D truth, failed case).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub method: String,
    pub mean_2d: Option<f64>,
    pub std_2d: Option<f64>,
    pub mean_3d: Option<f64>,
    pub std_3d: Option<f64>,
    pub sv_2d: Option<f64>,
    pub sv_3d: Option<f64>,
    pub runtime_ms: Option<f64>,
    /// Wall-clock per stage; empty unless timing was recorded.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_ms: Vec<(Stage, f64)>,
}

impl MetricsReport {
    pub fn failed(case_id: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            method: "failed".into(),
            mean_2d: None,
            std_2d: None,
            mean_3d: None,
            std_3d: None,
            sv_2d: None,
            sv_3d: None,
            runtime_ms: None,
            stage_ms: Vec::new(),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.method == "failed"
    }
}

/// `(mean_2d, std_2d, 3D (mean, std))`.
pub type PredictionErrors = (f64, f64, Option<(f64, f64)>);

/// 2D and optional 3D errors of predicted 3D points against the target
/// curves.
pub fn prediction_errors(
    predicted: &[Point3],
    p: &ProjectionMatrix,
    x_curve: &Curve2,
    truth_3d: Option<&Curve3>,
) -> Result<PredictionErrors> {
    let projected: Vec<Point2> = project_points(p, predicted)?;
    let (m2, s2) = mean_std(&point_to_curve(&projected, x_curve));
    let e3 = truth_3d.map(|c| mean_std(&point_to_curve(predicted, c)));
    Ok((m2, s2, e3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basic_distances() {
        let c = Curve2::from_polylines(&[vec![Point2::new(-1.0, 0.0), Point2::new(1.0, 0.0)]]).unwrap();
        assert_eq!(c.distance(&Point2::new(0.0, 1.0)), 1.0);
        assert_eq!(c.distance(&Point2::new(0.5, 0.0)), 0.0);
        assert_eq!(c.distance(&Point2::new(4.0, 4.0)), 5.0);
    }

    #[test]
    fn empty_curve_is_rejected() {
        assert!(matches!(
            Curve2::from_polylines(&[vec![Point2::zeros()]]),
            Err(Error::EmptyCurve)
        ));
        assert!(matches!(Curve3::from_edges(&[], &[]), Err(Error::EmptyCurve)));
    }

    #[test]
    fn matches_dense_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let poly: Vec<Point2> = (0..6)
            .map(|_| Point2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let curve = Curve2::from_polylines(&[poly.clone()]).unwrap();
        // samples every 1e-4 of arc length
        let mut samples = Vec::new();
        for w in poly.windows(2) {
            let len = (w[1] - w[0]).norm();
            let k = (len / 1e-4).ceil() as usize;
            for i in 0..=k {
                samples.push(w[0] + (w[1] - w[0]) * (i as f64 / k as f64));
            }
        }
        for _ in 0..200 {
            let q = Point2::new(rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5));
            let oracle = samples.iter().map(|s| (s - q).norm()).fold(f64::INFINITY, f64::min);
            assert!((curve.distance(&q) - oracle).abs() < 1e-3);
        }
    }

    #[test]
    fn uniform_offset_shape_variation() {
        let p =
            ProjectionMatrix::from_rows([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let y: Vec<Point3> = (0..30).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let x: Vec<Point2> = (0..30).map(|i| Point2::new(i as f64, 5.0)).collect();
        let c = Curve2::from_polylines(&[x]).unwrap();
        let (sv2, sv3) = shape_variation(&c, &y, &p, &RigidTransform3D::identity(), None).unwrap();
        assert!((sv2 - 5.0).abs() < 1e-12);
        assert!(sv3.is_none());

        let x0: Vec<Point2> = (0..30).map(|i| Point2::new(i as f64, 0.0)).collect();
        let c0 = Curve2::from_polylines(&[x0]).unwrap();
        assert_eq!(
            shape_variation(&c0, &y, &p, &RigidTransform3D::identity(), None)
                .unwrap()
                .0,
            0.0
        );
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[]), (0.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    proptest! {
        #[test]
        fn distance_is_a_lower_bound_on_vertex_distance(
            pts in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64), 2..10),
            q in (-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64),
        ) {
            let poly: Vec<Point3> = pts.iter().map(|&(a, b, c)| Point3::new(a, b, c)).collect();
            let curve = Curve3::from_polylines(&[poly.clone()]).unwrap();
            let q = Point3::new(q.0, q.1, q.2);
            let d = curve.distance(&q);
            let vertex = poly.iter().map(|v| (v - q).norm()).fold(f64::INFINITY, f64::min);
            prop_assert!(d <= vertex + 1e-12);
            prop_assert!(d >= 0.0);
        }
    }
}
