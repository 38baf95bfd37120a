//! Cross-paired synthetic cases, in-plane transform sweeps, and the runner
//! that registers each case and scores it against the shape-variation
//! baseline.

use std::collections::HashSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::evaluation::{prediction_errors, shape_variation, Curve2, Curve3, MetricsReport};
use crate::io::Layer;
use crate::projection::{project_points, rigid_prealign, ProjectionMatrix, RigidTransform3D};
use crate::registration::{register, RegistrationConfig, RegistrationResult};
use crate::skeleton::{build_graph, Point2, Point3, SkeletonPointSet};
use crate::synthetic::{generate_subjects, render_2d, InPlaneTransform, SyntheticParams};

/// One registration problem: 2D target, 3D source, camera, and optionally
/// the true 3D shape behind the 2D target.
#[derive(Debug, Clone)]
pub struct BenchmarkCase {
    pub id: String,
    pub x: SkeletonPointSet<2>,
    pub y: SkeletonPointSet<3>,
    pub projection: ProjectionMatrix,
    pub truth_3d: Option<Vec<Vec<Point3>>>,
}

/// Extra in-plane motions applied to each case's 2D skeleton. Empty grids
/// add nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    /// Shifts along the image x axis, in pixels.
    pub translations_px: Vec<f64>,
    /// Rotations about the image centre, in degrees.
    pub rotations_deg: Vec<f64>,
}

impl SweepGrid {
    /// `steps` evenly spaced values over `[-r, r]` for each non-zero range.
    pub fn symmetric(translation_px: f64, rotation_deg: f64, steps: usize) -> Self {
        let grid = |r: f64| -> Vec<f64> {
            if r == 0.0 || steps == 0 {
                return Vec::new();
            }
            if steps == 1 {
                return vec![0.0];
            }
            (0..steps)
                .map(|k| -r + 2.0 * r * k as f64 / (steps - 1) as f64)
                .collect()
        };
        Self {
            translations_px: grid(translation_px),
            rotations_deg: grid(rotation_deg),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.translations_px.is_empty() && self.rotations_deg.is_empty()
    }

    fn transforms(&self) -> impl Iterator<Item = (String, InPlaneTransform)> + '_ {
        let shifts = self.translations_px.iter().map(|&t| {
            (
                format!("tx{t:+.3}"),
                InPlaneTransform {
                    tx_px: t,
                    ..Default::default()
                },
            )
        });
        let turns = self.rotations_deg.iter().map(|&r| {
            (
                format!("rot{r:+.3}"),
                InPlaneTransform {
                    theta_deg: r,
                    ..Default::default()
                },
            )
        });
        shifts.chain(turns)
    }
}

/// Every ordered pair `(i, j)`, `i != j`, of `subjects` deformed copies of one
/// anatomy: the 3D skeleton of `i` registered to the 2D skeleton of `j`. Each
/// pair is followed by its sweep variants, whose 2D skeleton is re-rendered
/// under the in-plane motion and whose 3D truth moves by the matching rigid
/// motion (exact for rotations, exact on the `z = 0` plane for shifts).
pub fn synthetic_cases(
    seed: u64,
    params: &SyntheticParams,
    subjects: usize,
    sweep: &SweepGrid,
) -> Result<Vec<BenchmarkCase>> {
    if subjects < 2 {
        return Err(Error::InvalidParams("cross-pairing needs at least two subjects".into()));
    }
    let subs = generate_subjects(seed, params, subjects)?;
    let p = params.projection();
    let width = (subjects - 1).to_string().len().max(2);
    let mut cases = Vec::with_capacity(subjects * (subjects - 1));
    for (i, a) in subs.iter().enumerate() {
        for (j, b) in subs.iter().enumerate() {
            if i == j {
                continue;
            }
            let id = format!("{i:0width$}-{j:0width$}");
            cases.push(BenchmarkCase {
                id: id.clone(),
                x: b.skeleton_2d.clone(),
                y: a.skeleton_3d.clone(),
                projection: p,
                truth_3d: Some(b.anatomy.polylines()),
            });
            for (tag, motion) in sweep.transforms() {
                let moved = motion.rigid_equivalent(params);
                cases.push(BenchmarkCase {
                    id: format!("{id}/{tag}"),
                    x: render_2d(&b.anatomy, params, &motion)?,
                    y: a.skeleton_3d.clone(),
                    projection: p,
                    truth_3d: Some(b.anatomy.polylines().iter().map(|pl| moved.apply_all(pl)).collect()),
                });
            }
        }
    }
    Ok(cases)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub registration: RegistrationConfig,
    /// Fill `runtime_ms` and per-stage timings. Off by default so reports
    /// are reproducible byte for byte.
    pub record_timing: bool,
}

/// Outcome of one case.
#[derive(Debug)]
pub struct CaseRun {
    pub report: MetricsReport,
    pub rigid: Option<RigidTransform3D>,
    pub result: Result<RegistrationResult>,
}

/// Registers and scores one case.
pub fn run_case(case: &BenchmarkCase, config: &BenchmarkConfig) -> CaseRun {
    let start = Instant::now();
    let failed = |e: Error, rigid: Option<RigidTransform3D>| {
        log::warn!("case {}: {e}", case.id);
        CaseRun {
            report: MetricsReport::failed(&case.id),
            rigid,
            result: Err(e),
        }
    };
    let p = &case.projection;
    let rigid = match rigid_prealign(case.x.points(), case.y.points(), p) {
        Ok(r) => r,
        Err(e) => return failed(e.at(Stage::Prealign), None),
    };
    let prealign_ms = start.elapsed().as_secs_f64() * 1e3;
    let curves = build_graph(&case.x)
        .and_then(|g| Curve2::from_graph(&g))
        .and_then(|xc| {
            let truth = case.truth_3d.as_deref().map(Curve3::from_polylines).transpose()?;
            Ok((xc, truth))
        });
    let (x_curve, truth) = match curves {
        Ok(c) => c,
        Err(e) => return failed(e.at(Stage::Evaluation), Some(rigid)),
    };
    let result = match register(&case.x, &case.y, p, &rigid, &config.registration) {
        Ok(r) => r,
        Err(e) => return failed(e, Some(rigid)),
    };
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    let scored = shape_variation(&x_curve, case.y.points(), p, &rigid, truth.as_ref()).and_then(|sv| {
        let deleted: HashSet<usize> = result.deleted_nodes.iter().copied().collect();
        let kept: Vec<Point3> = (0..result.deformed.len())
            .filter(|k| !deleted.contains(k))
            .map(|k| result.deformed[k])
            .collect();
        Ok((sv, prediction_errors(&kept, p, &x_curve, truth.as_ref())?))
    });
    let ((sv2, sv3), (m2, s2, e3)) = match scored {
        Ok(s) => s,
        Err(e) => return failed(e.at(Stage::Evaluation), Some(rigid)),
    };
    let mut stage_ms = Vec::new();
    if config.record_timing {
        stage_ms.push((Stage::Prealign, prealign_ms));
        stage_ms.extend(result.timing.stages.iter().copied());
    }
    CaseRun {
        report: MetricsReport {
            case_id: case.id.clone(),
            method: "proposed".into(),
            mean_2d: Some(m2),
            std_2d: Some(s2),
            mean_3d: e3.map(|e| e.0),
            std_3d: e3.map(|e| e.1),
            sv_2d: Some(sv2),
            sv_3d: sv3,
            runtime_ms: config.record_timing.then_some(runtime_ms),
            stage_ms,
        },
        rigid: Some(rigid),
        result: Ok(result),
    }
}

/// Runs every case (in parallel on the current rayon pool) and returns the
/// outcomes in case order. Failures are recorded, not raised.
pub fn run_benchmark(cases: &[BenchmarkCase], config: &BenchmarkConfig) -> Vec<CaseRun> {
    cases.par_iter().map(|c| run_case(c, config)).collect()
}

/// Overlay layers for one registration: pre-aligned 3D skeleton projected
/// (`preop`), 2D skeleton (`intraop`), deformed 3D skeleton projected
/// (`prediction`), each drawn along its graph edges.
pub fn overlay_layers(
    x: &SkeletonPointSet<2>,
    y: &SkeletonPointSet<3>,
    p: &ProjectionMatrix,
    result: &RegistrationResult,
) -> Result<Vec<Layer<'static>>> {
    let g2 = build_graph(x)?;
    let g3 = build_graph(y)?;
    let src = g3.source_indices();
    let edges3: Vec<(usize, usize)> = g3.edges().into_iter().map(|(a, b)| (src[a], src[b])).collect();
    let along = |pts: &[Point3]| -> Result<Vec<(Point2, Point2)>> {
        let u = project_points(p, pts)?;
        Ok(edges3.iter().map(|&(a, b)| (u[a], u[b])).collect())
    };
    let xs = g2.points().points();
    Ok(vec![
        Layer {
            class: "preop",
            segments: along(&result.aligned)?,
        },
        Layer {
            class: "intraop",
            segments: g2.edges().into_iter().map(|(a, b)| (xs[a], xs[b])).collect(),
        },
        Layer {
            class: "prediction",
            segments: along(&result.deformed)?,
        },
    ])
}

/// Mean of each metric over the successful reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Summary {
    pub cases: usize,
    pub failed: usize,
    pub mean_2d: f64,
    pub sv_2d: f64,
    pub mean_3d: Option<f64>,
    pub sv_3d: Option<f64>,
}

pub fn summarize(reports: &[MetricsReport]) -> Summary {
    let ok: Vec<&MetricsReport> = reports.iter().filter(|r| !r.is_failed()).collect();
    let mean = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Summary {
        cases: reports.len(),
        failed: reports.len() - ok.len(),
        mean_2d: mean(&|r| r.mean_2d).unwrap_or(f64::NAN),
        sv_2d: mean(&|r| r.sv_2d).unwrap_or(f64::NAN),
        mean_3d: mean(&|r| r.mean_3d),
        sv_3d: mean(&|r| r.sv_3d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_grid() {
        let g = SweepGrid::symmetric(20.0, 0.0, 5);
        assert_eq!(g.translations_px, vec![-20.0, -10.0, 0.0, 10.0, 20.0]);
        assert!(g.rotations_deg.is_empty());
        assert!(SweepGrid::symmetric(0.0, 0.0, 7).is_empty());
        assert_eq!(SweepGrid::symmetric(15.0, 15.0, 7).rotations_deg.len(), 7);
    }

    #[test]
    fn cross_pairing_counts() {
        let params = SyntheticParams::default();
        let cases = synthetic_cases(3, &params, 3, &SweepGrid::default()).unwrap();
        assert_eq!(cases.len(), 6);
        let ids: Vec<&str> = cases.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["00-01", "00-02", "01-00", "01-02", "02-00", "02-01"]);
        let sweep = SweepGrid {
            translations_px: vec![0.0, 5.0, -5.0, 10.0, -10.0, 20.0, -20.0],
            rotations_deg: vec![],
        };
        let cases = synthetic_cases(3, &params, 2, &sweep).unwrap();
        assert_eq!(cases.len(), 2 * 8);
        assert_eq!(cases[1].id, "00-01/tx+0.000");
        assert_eq!(cases[1].x, cases[0].x);
        assert!(matches!(
            synthetic_cases(3, &params, 1, &sweep),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn failures_are_recorded() {
        let params = SyntheticParams::default();
        let mut cases = synthetic_cases(5, &params, 2, &SweepGrid::default()).unwrap();
        cases.truncate(1);
        let mut bad = cases[0].clone();
        bad.id = "bad".into();
        bad.x = SkeletonPointSet::from_points(bad.x.points()[..3].to_vec()).unwrap();
        cases.push(bad);
        let config = BenchmarkConfig::default();
        let runs = run_benchmark(&cases, &config);
        assert!(!runs[0].report.is_failed());
        assert!(runs[0].report.runtime_ms.is_none());
        assert!(runs[1].report.is_failed());
        assert!(runs[1].result.is_err());
        let s = summarize(&runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>());
        assert_eq!((s.cases, s.failed), (2, 1));
    }
}
