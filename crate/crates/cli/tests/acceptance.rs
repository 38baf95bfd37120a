//! End-to-end acceptance checks on synthetic data. Prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vesselreg::benchmark::{
    run_benchmark, run_case, summarize, synthetic_cases, BenchmarkCase, BenchmarkConfig, CaseRun, SweepGrid,
};
use vesselreg::correspondence::AssignmentMatrix;
use vesselreg::decomposition::geodesic_distance;
use vesselreg::deformation::{energy_and_gradient, Displacement, EnergyState, GradientWorkspace};
use vesselreg::evaluation::Curve2;
use vesselreg::projection::{project_points, ProjectionMatrix};
use vesselreg::skeleton::{build_graph, Point2, Point3, SkeletonGraph, SkeletonPointSet};
use vesselreg::synthetic::{self_registration_fixture, SyntheticParams};
use vesselreg::tps::ThinPlateSpline;
use vesselreg::Stage;

const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cone_beam() -> ProjectionMatrix {
    SyntheticParams::default().projection()
}

/// Random chain with side edges, targets near its projection, and a random
/// sparse assignment.
fn random_state(
    rng: &mut ChaCha8Rng,
    p: &ProjectionMatrix,
) -> (
    Vec<Point2>,
    Vec<Point3>,
    AssignmentMatrix,
    Vec<(usize, usize)>,
    Vec<Displacement>,
) {
    let n = rng.gen_range(20..=80);
    let mut y = vec![Point3::new(
        rng.gen_range(-20.0..20.0),
        -60.0,
        rng.gen_range(-20.0..20.0),
    )];
    for _ in 1..n {
        let last = *y.last().unwrap();
        y.push(
            last + Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..1.5),
                rng.gen_range(-1.0..1.0),
            ),
        );
    }
    let x: Vec<Point2> = project_points(p, &y)
        .unwrap()
        .into_iter()
        .map(|u| u + Point2::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)))
        .collect();
    let mut m = AssignmentMatrix::zeros(n, n);
    for j in 0..n {
        if rng.gen_bool(0.75) {
            let i = rng.gen_range(0..n - 1);
            let w = rng.gen_range(0.0..1.0);
            m.set_column(j, &[(i, 1.0 - w), (i + 1, w)]);
        }
    }
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    for _ in 0..n / 10 {
        let a = rng.gen_range(0..n - 3);
        edges.push((a, a + 2));
    }
    let phi = (0..n)
        .map(|_| {
            Displacement::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            )
        })
        .collect();
    (x, y, m, edges, phi)
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let p = cone_beam();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (x, y, m, edges, phi) = random_state(&mut rng, &p);
        let state = EnergyState {
            x: &x,
            m: &m,
            y: &y,
            p: &p,
            edges: &edges,
            alpha: 500.0,
            beta: 10.0,
        };
        let mut ws = GradientWorkspace::new(&state);
        let (_, g) = energy_and_gradient(&phi, &state, &mut ws).unwrap();
        let h = 1e-5;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for j in 0..phi.len() {
            for k in 0..3 {
                let mut a = phi.clone();
                let mut b = phi.clone();
                a[j][k] += h;
                b[j][k] -= h;
                let ea = energy_and_gradient(&a, &state, &mut ws).unwrap().0.total;
                let eb = energy_and_gradient(&b, &state, &mut ws).unwrap().0.total;
                let fd = (ea - eb) / (2.0 * h);
                diff += (fd - g[j][k]).powi(2);
                norm += fd * fd;
            }
        }
        worst = worst.max((diff / norm).sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 30.0,
        format!("max relative error {worst:.2e} over 100 states, {secs:.1} s"),
    )
}

fn assignment_constraints(runs: &[CaseRun]) -> Outcome {
    let mut worst_sum: f64 = 0.0;
    let mut out_of_range = 0usize;
    let mut checked = 0usize;
    for run in runs {
        let Ok(r) = &run.result else { continue };
        checked += 1;
        let m = &r.assignment;
        for j in 0..m.cols() {
            let col = m.column(j);
            out_of_range += col.iter().filter(|e| !(0.0..=1.0).contains(&e.1)).count();
            if col.iter().any(|e| e.1 != 0.0) {
                worst_sum = worst_sum.max((m.column_sum(j) - 1.0).abs());
            }
        }
    }
    outcome(
        checked == runs.len() && out_of_range == 0 && worst_sum <= 1e-12,
        format!(
            "{checked}/{} cases, {out_of_range} entries outside [0,1], max |column sum - 1| = {worst_sum:.1e}",
            runs.len()
        ),
    )
}

fn self_registration() -> Outcome {
    let params = SyntheticParams::default();
    let mut worst: f64 = 0.0;
    for seed in [SEED, SEED + 1, SEED + 2] {
        let (x, y, projection) = self_registration_fixture(seed, &params).unwrap();
        let case = BenchmarkCase {
            id: format!("self-{seed}"),
            x,
            y,
            projection,
            truth_3d: None,
        };
        match run_case(&case, &BenchmarkConfig::default()).report.mean_2d {
            Some(e) => worst = worst.max(e),
            None => return outcome(false, format!("seed {seed} failed")),
        }
    }
    outcome(worst < 0.1, format!("max mean 2D error {worst:.4} px over 3 fixtures"))
}

fn deformation_recovery(runs: &[CaseRun], secs: f64) -> Outcome {
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    let s = summarize(&reports);
    let (m3, sv3) = (s.mean_3d.unwrap_or(f64::NAN), s.sv_3d.unwrap_or(f64::NAN));
    let r2 = s.mean_2d / s.sv_2d;
    let r3 = m3 / sv3;
    outcome(
        s.cases == 20 && s.failed == 0 && r2 < 0.2 && r3 < 0.5 && secs < 300.0,
        format!(
            "{} cases ({} failed): 2D {:.4}/{:.4} px = {r2:.3}, 3D {m3:.4}/{sv3:.4} mm = {r3:.3}, {secs:.0} s",
            s.cases, s.failed, s.mean_2d, s.sv_2d
        ),
    )
}

fn robustness_sweep() -> Outcome {
    let params = SyntheticParams::default();
    let sweep = SweepGrid::symmetric(20.0, 15.0, 5);
    let cases = synthetic_cases(SEED, &params, 2, &sweep).unwrap();
    let runs = run_benchmark(&cases, &BenchmarkConfig::default());
    let mut worst: f64 = 0.0;
    let mut base = f64::NAN;
    let mut failed = 0;
    for (case, run) in cases.iter().zip(&runs) {
        let Some(e) = run.report.mean_2d else {
            failed += 1;
            continue;
        };
        if case.id.contains('/') {
            worst = worst.max(e / base);
        } else {
            base = e;
        }
    }
    outcome(
        failed == 0 && worst <= 3.0,
        format!(
            "{} runs, {failed} failed, worst transformed/base 2D error ratio {worst:.2}",
            runs.len()
        ),
    )
}

fn total_length(points: &[Point3], edges: &[(usize, usize)]) -> f64 {
    edges.iter().map(|&(a, b)| (points[a] - points[b]).norm()).sum()
}

fn length_preservation(cases: &[BenchmarkCase], runs: &[CaseRun]) -> Outcome {
    let mut worst: f64 = 0.0;
    for (case, run) in cases.iter().zip(runs) {
        let Ok(r) = &run.result else {
            return outcome(false, format!("case {} failed", case.id));
        };
        let g = build_graph(&case.y).unwrap();
        let src = g.source_indices();
        let deleted: HashSet<usize> = r.deleted_nodes.iter().copied().collect();
        let edges: Vec<(usize, usize)> = g
            .edges()
            .into_iter()
            .map(|(a, b)| (src[a], src[b]))
            .filter(|(a, b)| !deleted.contains(a) && !deleted.contains(b))
            .collect();
        let before = total_length(&r.aligned, &edges);
        let after = total_length(&r.deformed, &edges);
        worst = worst.max((after - before).abs() / before);
    }
    outcome(
        worst < 0.05,
        format!(
            "max relative length change {:.2}% over {} cases",
            100.0 * worst,
            runs.len()
        ),
    )
}

fn performance(cases: &[BenchmarkCase]) -> Outcome {
    let Some(case) = cases.iter().find(|c| (700..=900).contains(&c.y.len())) else {
        return outcome(false, "no case with 700-900 nodes".into());
    };
    let config = BenchmarkConfig {
        record_timing: true,
        ..Default::default()
    };
    let run = run_case(case, &config);
    let Ok(r) = &run.result else {
        return outcome(false, format!("case {} failed", case.id));
    };
    let total = run.report.runtime_ms.unwrap_or(f64::INFINITY) / 1e3;
    let front: f64 = [
        Stage::Graph3d,
        Stage::Classify3d,
        Stage::Graph2d,
        Stage::Classify2d,
        Stage::Matching,
    ]
    .into_iter()
    .map(|s| r.timing.get(s))
    .sum::<f64>()
        / 1e3;
    outcome(
        total < 5.0 && front < 0.5,
        format!(
            "case {} ({} 3D / {} 2D nodes): total {total:.2} s, decomposition + matching {:.1} ms",
            case.id,
            case.y.len(),
            case.x.len(),
            front * 1e3
        ),
    )
}

/// Unit-weight Floyd-Warshall.
fn all_pairs(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut geodesic_mismatch = 0usize;
    for _ in 0..20 {
        let n = rng.gen_range(2..=50);
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
        for _ in 0..rng.gen_range(0..5) {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a != b {
                edges.push((a, b));
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adjacency[a].push(b);
        }
        let points = SkeletonPointSet::from_points((0..n).map(|i| Point2::new(i as f64, 0.0)).collect()).unwrap();
        let g = SkeletonGraph::from_adjacency(points, adjacency);
        let d = all_pairs(n, &edges);
        for u in 0..n {
            for v in 0..n {
                if geodesic_distance(&g, u, v).unwrap() != d[u][v] {
                    geodesic_mismatch += 1;
                }
            }
        }
    }

    let mut curve_err: f64 = 0.0;
    for _ in 0..10 {
        let poly: Vec<Point2> = (0..8)
            .map(|_| Point2::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)))
            .collect();
        let curve = Curve2::from_polylines(&[poly.clone()]).unwrap();
        let mut samples = Vec::new();
        for w in poly.windows(2) {
            let k = ((w[1] - w[0]).norm() / 1e-3).ceil() as usize;
            samples.extend((0..=k).map(|i| w[0] + (w[1] - w[0]) * (i as f64 / k as f64)));
        }
        for _ in 0..50 {
            let q = Point2::new(rng.gen_range(-2.0..12.0), rng.gen_range(-2.0..12.0));
            let dense = samples.iter().map(|s| (s - q).norm()).fold(f64::INFINITY, f64::min);
            curve_err = curve_err.max((curve.distance(&q) - dense).abs());
        }
    }

    let mut tps_err: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.gen_range(4..40);
        let src: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                )
            })
            .collect();
        let dst: Vec<Point3> = src
            .iter()
            .map(|s| {
                s + Point3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        let tps = ThinPlateSpline::fit(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            tps_err = tps_err.max((tps.warp(s) - d).norm());
        }
    }
    outcome(
        geodesic_mismatch == 0 && curve_err < 1e-3 && tps_err < 1e-8,
        format!("geodesic mismatches {geodesic_mismatch}, point-to-curve deviation {curve_err:.1e}, TPS control error {tps_err:.1e}"),
    )
}

fn benchmark_run(dir: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_vesselreg"))
        .args(["benchmark", "--cases", "5", "--seed", "7", "--out-dir", "out"])
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    Ok(())
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        if let Err(e) = benchmark_run(dir) {
            return outcome(false, format!("benchmark run failed: {e}"));
        }
    }
    let fa = files(&a.path().join("out"));
    let fb = files(&b.path().join("out"));
    let csv = fa.iter().find(|f| f.0 == "metrics.csv").map(|f| &f.1);
    let same = fa == fb && csv.is_some() && csv == fb.iter().find(|f| f.0 == "metrics.csv").map(|f| &f.1);
    outcome(same, format!("{} output files compared byte for byte", fa.len()))
}

fn main() {
    let params = SyntheticParams::default();
    let cases = synthetic_cases(SEED, &params, 5, &SweepGrid::default()).unwrap();
    let start = Instant::now();
    let runs = run_benchmark(&cases, &BenchmarkConfig::default());
    let secs = start.elapsed().as_secs_f64();
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient oracle", gradient_oracle()),
        ("assignment constraints", assignment_constraints(&runs)),
        ("self-registration", self_registration()),
        ("deformation recovery", deformation_recovery(&runs, secs)),
        ("robustness sweep", robustness_sweep()),
        ("length preservation", length_preservation(&cases, &runs)),
        ("performance", performance(&cases)),
        ("oracle equivalences", oracles()),
        ("determinism", determinism()),
    ];
    let mut failed = 0;
    for (k, (name, o)) in results.iter().enumerate() {
        println!(
            "criterion {} {name}: {} ({})",
            k + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
