//! Synthetic AAA-like vessel trees, smooth length-preserving deformations of
//! them, and their voxel / pixel skeletons.
//!
//! The tree is an aorta running head to foot (+y) with two renal-like
//! branches leaving near the top and two iliac-like branches at the
//! bifurcation; the part of the aorta above the first renal junction is the
//! upper-aorta branch. The camera looks along +z.

use std::collections::HashSet;
use std::f64::consts::PI;

use nalgebra::{Rotation2, Rotation3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{ProjectionMatrix, RigidTransform3D};
use crate::skeleton::{Point2, Point3, SkeletonPointSet};
use crate::thinning::thin_cells;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    /// Aorta length from its top end to the bifurcation.
    pub trunk_length_mm: f64,
    /// 3 (upper aorta, two iliacs), 4 (plus one renal) or 5 (two renals).
    pub branch_count: usize,
    /// Lateral bow of the aorta.
    pub curvature_mm: f64,
    /// Largest node displacement of the ground-truth deformation.
    pub deform_mm: f64,
    pub voxel_mm: f64,
    pub source_distance_mm: f64,
    pub focal_px: f64,
    pub image_size: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            trunk_length_mm: 180.0,
            branch_count: 5,
            curvature_mm: 6.0,
            deform_mm: 8.0,
            voxel_mm: 0.5,
            source_distance_mm: 1000.0,
            focal_px: 1500.0,
            image_size: 512,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.into()));
        if !(self.trunk_length_mm >= 60.0 && self.trunk_length_mm <= 400.0) {
            return bad("trunk_length_mm must lie in [60, 400]");
        }
        if !(3..=5).contains(&self.branch_count) {
            return bad("branch_count must be 3, 4 or 5");
        }
        if !(self.curvature_mm >= 0.0 && self.curvature_mm <= 0.2 * self.trunk_length_mm) {
            return bad("curvature_mm must lie in [0, trunk_length_mm / 5]");
        }
        if !(self.deform_mm >= 0.0 && self.deform_mm <= 40.0) {
            return bad("deform_mm must lie in [0, 40]");
        }
        if !(self.voxel_mm > 0.0 && self.voxel_mm <= 5.0) {
            return bad("voxel_mm must lie in (0, 5]");
        }
        if !(self.source_distance_mm > 2.0 * self.trunk_length_mm) || !(self.focal_px > 0.0) || self.image_size == 0 {
            return bad("camera must be in front of the anatomy with positive focal length");
        }
        Ok(())
    }

    /// Cone-beam camera `K [I | (0, 0, D)]` centred on the image.
    pub fn projection(&self) -> ProjectionMatrix {
        let c = self.image_size as f64 / 2.0;
        let (f, d) = (self.focal_px, self.source_distance_mm);
        ProjectionMatrix::from_rows([[f, 0.0, c, c * d], [0.0, f, c, c * d], [0.0, 0.0, 1.0, d]]).expect("valid camera")
    }

    fn image_centre(&self) -> Point2 {
        let c = self.image_size as f64 / 2.0;
        Point2::new(c, c)
    }
}

/// Polyline whose first point lies on `parent = (vessel, sample)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    pub points: Vec<Point3>,
    pub parent: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    /// Vessel 0 is the aorta, top to bifurcation.
    pub vessels: Vec<Vessel>,
    /// Aorta sample held fixed by deformations (first renal junction).
    pub anchor: usize,
}

impl Anatomy {
    pub fn polylines(&self) -> Vec<Vec<Point3>> {
        self.vessels.iter().map(|v| v.points.clone()).collect()
    }

    pub fn total_length(&self) -> f64 {
        self.vessels
            .iter()
            .map(|v| v.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>())
            .sum()
    }
}

const SAMPLE_MM: f64 = 0.5;

fn sample_curve(len: f64, f: impl Fn(f64) -> Point3) -> Vec<Point3> {
    let n = (len / SAMPLE_MM).ceil().max(1.0) as usize;
    (0..=n).map(|i| f(i as f64 / n as f64)).collect()
}

/// Branch leaving `start` along `dir`, bowing sideways within `plane_normal`.
fn branch(start: Point3, dir: Point3, bow_dir: Point3, len: f64, bow: f64) -> Vec<Point3> {
    sample_curve(len, |t| start + dir * (t * len) + bow_dir * (bow * (PI * t).sin() * t))
}

pub fn generate_anatomy(seed: u64, params: &SyntheticParams) -> Result<Anatomy> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = params.trunk_length_mm;
    let bow = params.curvature_mm * rng.gen_range(0.6..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let zbow = 0.3 * params.curvature_mm * rng.gen_range(-1.0..1.0);
    let top = -0.5 * (l + 60.0);
    let aorta = sample_curve(l, |s| {
        Point3::new(bow * (PI * s).sin(), top + s * l, zbow * (PI * s).sin())
    });
    let n = aorta.len();
    let idx = |s: f64| ((s * (n - 1) as f64).round() as usize).clamp(1, n - 2);

    let s1 = 0.3 + rng.gen_range(-0.03..0.03);
    let s2 = s1 + (8.0 + rng.gen_range(-1.0..1.0)) / l;
    let j1 = idx(s1);
    let j2 = idx(s2).max(j1 + 4);
    let bif = n - 1;

    let jitter = |rng: &mut ChaCha8Rng, deg: f64| rng.gen_range(-deg..deg).to_radians();
    let mut vessels = vec![Vessel {
        points: aorta.clone(),
        parent: None,
    }];
    let renal = |rng: &mut ChaCha8Rng, at: usize, side: f64| {
        let a = jitter(rng, 10.0);
        let dir = Point3::new(side * a.cos(), 0.25 + a.sin() * 0.3, 0.2).normalize();
        let len = 40.0 + rng.gen_range(-5.0..5.0);
        Vessel {
            points: branch(aorta[at], dir, Point3::new(0.0, 1.0, 0.0), len, 0.1 * len),
            parent: Some((0, at)),
        }
    };
    let left = renal(&mut rng, j1, -1.0);
    let right = renal(&mut rng, j2, 1.0);
    let anchor = if params.branch_count >= 4 { j1 } else { n / 2 };
    if params.branch_count >= 4 {
        vessels.push(left);
    }
    if params.branch_count == 5 {
        vessels.push(right);
    }
    for side in [-1.0, 1.0] {
        let spread = (25.0f64).to_radians() + jitter(&mut rng, 5.0);
        let dir = Point3::new(side * spread.sin(), spread.cos(), 0.05).normalize();
        let len = 65.0 + rng.gen_range(-5.0..5.0);
        vessels.push(Vessel {
            points: branch(aorta[bif], dir, Point3::new(side, 0.0, 0.0), len, 0.08 * len),
            parent: Some((0, bif)),
        });
    }
    Ok(Anatomy { vessels, anchor })
}

/// Bending profile of one vessel: the local frame turns at angular rate
/// `amplitude * axis * (offset + sin(2 pi s / wavelength + phase))` per mm of
/// arc length `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BendMode {
    pub axis: [f64; 3],
    pub offset: f64,
    pub wavelength_mm: f64,
    pub phase: f64,
}

/// Length-preserving deformation of an [`Anatomy`]: every segment keeps its
/// length and is rotated by the accumulated bending of the path from the
/// anchor. Rotation is mostly about the viewing axis, so motion is mostly
/// parallel to the image plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BendingField {
    /// Angular rate scale in rad/mm.
    pub amplitude: f64,
    pub modes: Vec<BendMode>,
}

impl BendingField {
    pub fn identity(vessels: usize) -> Self {
        Self {
            amplitude: 0.0,
            modes: vec![
                BendMode {
                    axis: [0.0, 0.0, 1.0],
                    offset: 0.0,
                    wavelength_mm: 100.0,
                    phase: 0.0,
                };
                vessels
            ],
        }
    }

    /// Random profile scaled so the largest displacement is `deform_mm`.
    pub fn random(rng: &mut ChaCha8Rng, anatomy: &Anatomy, deform_mm: f64) -> Self {
        let modes = (0..anatomy.vessels.len())
            .map(|_| BendMode {
                axis: [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), 1.0],
                offset: rng.gen_range(-0.5..0.5),
                wavelength_mm: rng.gen_range(120.0..220.0),
                phase: rng.gen_range(0.0..2.0 * PI),
            })
            .collect();
        let mut field = Self { amplitude: 1e-3, modes };
        if deform_mm == 0.0 {
            field.amplitude = 0.0;
            return field;
        }
        for _ in 0..4 {
            let reach = field.max_displacement(anatomy);
            if reach > 0.0 {
                field.amplitude *= deform_mm / reach;
            }
        }
        field
    }

    pub fn max_displacement(&self, anatomy: &Anatomy) -> f64 {
        let moved = self.apply(anatomy);
        anatomy
            .vessels
            .iter()
            .zip(&moved.vessels)
            .flat_map(|(a, b)| a.points.iter().zip(&b.points).map(|(p, q)| (p - q).norm()))
            .fold(0.0, f64::max)
    }

    fn rate(&self, vessel: usize, s: f64) -> Point3 {
        let m = &self.modes[vessel];
        let a = Point3::new(m.axis[0], m.axis[1], m.axis[2]).normalize();
        a * (self.amplitude * (m.offset + (2.0 * PI * s / m.wavelength_mm + m.phase).sin()))
    }

    pub fn apply(&self, anatomy: &Anatomy) -> Anatomy {
        let mut out = anatomy.clone();
        if self.amplitude == 0.0 {
            return out;
        }
        let mut frames: Vec<Vec<Rotation3<f64>>> = anatomy
            .vessels
            .iter()
            .map(|v| vec![Rotation3::identity(); v.points.len()])
            .collect();
        for (vi, v) in anatomy.vessels.iter().enumerate() {
            let pts = &v.points;
            let (start, mut frame, origin) = match v.parent {
                None => (anatomy.anchor, Rotation3::identity(), pts[anatomy.anchor]),
                Some((pv, ps)) => (0, frames[pv][ps], out.vessels[pv].points[ps]),
            };
            let q = &mut out.vessels[vi].points;
            q[start] = origin;
            frames[vi][start] = frame;
            let mut s = 0.0;
            for k in start + 1..pts.len() {
                let seg = pts[k] - pts[k - 1];
                s += seg.norm();
                frame = Rotation3::new(self.rate(vi, s) * seg.norm()) * frame;
                frames[vi][k] = frame;
                q[k] = q[k - 1] + frame * seg;
            }
            // root vessel: walk back towards its top end too
            let mut frame = frames[vi][start];
            let mut s = 0.0;
            for k in (0..start).rev() {
                let seg = pts[k] - pts[k + 1];
                s -= seg.norm();
                frame = Rotation3::new(self.rate(vi, s) * seg.norm()) * frame;
                frames[vi][k] = frame;
                q[k] = q[k + 1] + frame * seg;
            }
        }
        out
    }
}

/// Dense samples along every vessel, at most `step` apart.
fn dense_samples(anatomy: &Anatomy, step: f64) -> Vec<Point3> {
    let mut out = Vec::new();
    for v in &anatomy.vessels {
        for w in v.points.windows(2) {
            let k = ((w[1] - w[0]).norm() / step).ceil().max(1.0) as usize;
            for i in 0..k {
                out.push(w[0] + (w[1] - w[0]) * (i as f64 / k as f64));
            }
        }
        out.extend(v.points.last());
    }
    out
}

/// One-voxel-thick skeleton of the tree on a grid of spacing `voxel_mm`.
pub fn voxelize(anatomy: &Anatomy, voxel_mm: f64) -> Result<SkeletonPointSet<3>> {
    let cells: HashSet<[i64; 3]> = dense_samples(anatomy, 0.1 * voxel_mm)
        .iter()
        .map(|p| [0, 1, 2].map(|k| (p[k] / voxel_mm).round() as i64))
        .collect();
    let points = thin_cells(cells)
        .into_iter()
        .map(|c| Point3::new(c[0] as f64, c[1] as f64, c[2] as f64) * voxel_mm)
        .collect();
    SkeletonPointSet::new(points, Point3::repeat(voxel_mm))
}

/// In-plane motion of the 2D image: rotation by `theta_deg` about the image
/// centre followed by a translation in pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InPlaneTransform {
    pub tx_px: f64,
    pub ty_px: f64,
    pub theta_deg: f64,
}

impl InPlaneTransform {
    pub fn is_identity(&self) -> bool {
        self.tx_px == 0.0 && self.ty_px == 0.0 && self.theta_deg == 0.0
    }

    pub fn apply(&self, u: &Point2, centre: &Point2) -> Point2 {
        Rotation2::new(self.theta_deg.to_radians()) * (u - centre) + centre + Vector2::new(self.tx_px, self.ty_px)
    }

    /// 3D rigid motion that reproduces this image motion exactly for points
    /// on the plane `z = 0` (approximately elsewhere).
    pub fn rigid_equivalent(&self, params: &SyntheticParams) -> RigidTransform3D {
        let k = params.source_distance_mm / params.focal_px;
        RigidTransform3D::new(
            *Rotation3::from_axis_angle(&Point3::z_axis(), self.theta_deg.to_radians()).matrix(),
            Point3::new(self.tx_px * k, self.ty_px * k, 0.0),
        )
        .expect("rotation about z is proper")
    }
}

/// Projected, transformed and re-gridded 2D skeleton of the tree.
pub fn render_2d(
    anatomy: &Anatomy,
    params: &SyntheticParams,
    in_plane: &InPlaneTransform,
) -> Result<SkeletonPointSet<2>> {
    // about 0.1 px between samples
    let step = 0.1 * params.source_distance_mm / params.focal_px;
    let cells = pixel_cells(anatomy, &params.projection(), step, |u| {
        in_plane.apply(u, &params.image_centre())
    })?;
    let points = thin_cells(cells)
        .into_iter()
        .map(|c| Point2::new(c[0] as f64, c[1] as f64))
        .collect();
    SkeletonPointSet::from_points(points)
}

fn pixel_cells(
    anatomy: &Anatomy,
    p: &ProjectionMatrix,
    step: f64,
    warp: impl Fn(&Point2) -> Point2,
) -> Result<HashSet<[i64; 2]>> {
    let mut cells = HashSet::new();
    for y in dense_samples(anatomy, step) {
        let u = p
            .project_point(&y)
            .ok_or(Error::InvalidParams("anatomy crosses the camera plane".into()))?;
        let v = warp(&u);
        cells.insert([v.x.round() as i64, v.y.round() as i64]);
    }
    Ok(cells)
}

/// Pair whose 2D skeleton is exactly the projection of the 3D one, with no
/// deformation between them: `X = project(P, Y)` point for point.
///
/// The camera is orthographic with one pixel per voxel; every pixel of the
/// thinned 2D skeleton is lifted to the voxel at the tree's (rounded) depth,
/// so both graphs have the same adjacency.
pub fn self_registration_fixture(
    seed: u64,
    params: &SyntheticParams,
) -> Result<(SkeletonPointSet<2>, SkeletonPointSet<3>, ProjectionMatrix)> {
    let anatomy = generate_anatomy(seed, params)?;
    let v = params.voxel_mm;
    let c = params.image_size as f64 / 2.0;
    let p = ProjectionMatrix::from_rows([[1.0 / v, 0.0, 0.0, c], [0.0, 1.0 / v, 0.0, c], [0.0, 0.0, 0.0, 1.0]])?;
    let samples = dense_samples(&anatomy, 0.1 * v);
    let pixels = thin_cells(pixel_cells(&anatomy, &p, 0.1 * v, |u| *u)?);
    let mut xs = Vec::with_capacity(pixels.len());
    let mut ys = Vec::with_capacity(pixels.len());
    for [i, j] in pixels {
        let (px, py) = ((i as f64 - c) * v, (j as f64 - c) * v);
        let depth = samples
            .iter()
            .min_by(|a, b| {
                let da = (a.x - px).powi(2) + (a.y - py).powi(2);
                let db = (b.x - px).powi(2) + (b.y - py).powi(2);
                da.total_cmp(&db)
            })
            .map_or(0.0, |q| q.z);
        xs.push(Point2::new(i as f64, j as f64));
        ys.push(Point3::new(px, py, (depth / v).round() * v));
    }
    Ok((
        SkeletonPointSet::from_points(xs)?,
        SkeletonPointSet::new(ys, Point3::repeat(v))?,
        p,
    ))
}

/// Undeformed pre-operative skeleton, a deformation of it, and the 2D
/// skeleton of the deformed tree.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub skeleton_3d: SkeletonPointSet<3>,
    pub anatomy: Anatomy,
    pub ground_truth_deformation: BendingField,
    /// Deformed tree as continuous polylines (3D ground truth).
    pub deformed: Anatomy,
    pub projection: ProjectionMatrix,
    pub skeleton_2d: SkeletonPointSet<2>,
    pub in_plane_transform: InPlaneTransform,
}

pub fn generate_synthetic_aaa(seed: u64, params: &SyntheticParams) -> Result<SyntheticCase> {
    let anatomy = generate_anatomy(seed, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let field = BendingField::random(&mut rng, &anatomy, params.deform_mm);
    let deformed = field.apply(&anatomy);
    let in_plane = InPlaneTransform::default();
    Ok(SyntheticCase {
        skeleton_3d: voxelize(&anatomy, params.voxel_mm)?,
        skeleton_2d: render_2d(&deformed, params, &in_plane)?,
        projection: params.projection(),
        anatomy,
        ground_truth_deformation: field,
        deformed,
        in_plane_transform: in_plane,
    })
}

/// One deformed instance of a shared anatomy, imaged in 3D and in 2D.
#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub deformation: BendingField,
    pub anatomy: Anatomy,
    pub skeleton_3d: SkeletonPointSet<3>,
    pub skeleton_2d: SkeletonPointSet<2>,
}

/// `count` differently deformed copies of the anatomy drawn from `seed`.
pub fn generate_subjects(seed: u64, params: &SyntheticParams, count: usize) -> Result<Vec<SyntheticSubject>> {
    let base = generate_anatomy(seed, params)?;
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let deformation = BendingField::random(&mut rng, &base, params.deform_mm);
            let anatomy = deformation.apply(&base);
            Ok(SyntheticSubject {
                skeleton_3d: voxelize(&anatomy, params.voxel_mm)?,
                skeleton_2d: render_2d(&anatomy, params, &InPlaneTransform::default())?,
                deformation,
                anatomy,
            })
        })
        .collect()
}
