//! File formats: PGM masks, `.vox` volumes, skeleton and metrics CSV,
//! projection text files, JSON results and SVG overlays.
//!
//! Every text artifact starts with the format version and the run
//! configuration. Floats are written with six decimals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::SVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::correspondence::AssignmentMatrix;
use crate::decomposition::NodeDecomposition;
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::projection::ProjectionMatrix;
use crate::registration::RegistrationResult;
use crate::skeleton::{Point2, SkeletonPointSet};
use crate::thinning::{BinaryImage, VoxelGrid};

pub const FORMAT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Binary mask from a PGM (`P2` or `P5`); grey values of 128 and above (on
/// a 0-255 scale) are foreground.
pub fn parse_pgm(bytes: &[u8]) -> Result<BinaryImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let number = |t: String| {
        t.parse::<usize>()
            .map_err(|_| format_err(format!("bad PGM header field {t:?}")))
    };
    let width = number(token()?)?;
    let height = number(token()?)?;
    let maxval = number(token()?)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format_err("PGM dimensions and maxval must be positive"));
    }
    let count = width * height;
    let values: Vec<usize> = match magic.as_str() {
        "P2" => (0..count).map(|_| token().and_then(number)).collect::<Result<_>>()?,
        "P5" => {
            // exactly one whitespace byte after maxval
            let data = bytes.get(pos + 1..).unwrap_or_default();
            let wide = maxval > 255;
            let need = if wide { 2 * count } else { count };
            if data.len() < need {
                return Err(format_err("truncated PGM raster"));
            }
            if wide {
                data.chunks_exact(2)
                    .take(count)
                    .map(|c| (c[0] as usize) << 8 | c[1] as usize)
                    .collect()
            } else {
                data[..count].iter().map(|&b| b as usize).collect()
            }
        }
        other => return Err(format_err(format!("not a PGM file (magic {other:?})"))),
    };
    let mut image = BinaryImage::new(width, height);
    for (k, v) in values.into_iter().enumerate() {
        if v > maxval {
            return Err(format_err("PGM value exceeds maxval"));
        }
        if v * 255 >= 128 * maxval {
            image.set(k % width, k / width, true);
        }
    }
    Ok(image)
}

/// Volume from the raw `.vox` format: an ASCII line `nx ny nz`, then
/// `nx * ny * nz` bytes of 0 or 1, x fastest.
pub fn parse_vox(bytes: &[u8]) -> Result<VoxelGrid> {
    let eol = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err("missing .vox header line"))?;
    let header = std::str::from_utf8(&bytes[..eol]).map_err(|_| format_err("non-ASCII .vox header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format_err(format!("bad .vox dimension {t:?}"))))
        .collect::<Result<_>>()?;
    let [nx, ny, nz] = dims[..] else {
        return Err(format_err("expected `nx ny nz` header"));
    };
    let data = &bytes[eol + 1..];
    if data.len() != nx * ny * nz {
        return Err(format_err(format!(
            "expected {} voxel bytes, found {}",
            nx * ny * nz,
            data.len()
        )));
    }
    let mut grid = VoxelGrid::new(nx, ny, nz);
    for (k, &b) in data.iter().enumerate() {
        match b {
            0 => {}
            1 => grid.set(k % nx, (k / nx) % ny, k / (nx * ny), true),
            _ => return Err(format_err(format!("voxel byte {k} is {b}, expected 0 or 1"))),
        }
    }
    Ok(grid)
}

pub fn write_vox(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = format!("{} {} {}\n", grid.nx, grid.ny, grid.nz).into_bytes();
    out.extend(grid.data.iter().map(|&v| v as u8));
    out
}

/// Mask or volume, chosen by file extension.
#[derive(Debug, Clone)]
pub enum MaskInput {
    Image(BinaryImage),
    Volume(VoxelGrid),
}

pub fn read_mask(path: &Path) -> Result<MaskInput> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pgm") => Ok(MaskInput::Image(parse_pgm(&fs::read(path)?)?)),
        Some("vox") => Ok(MaskInput::Volume(parse_vox(&fs::read(path)?)?)),
        _ => Err(format_err(format!(
            "unsupported input {}: expected .pgm or .vox",
            path.display()
        ))),
    }
}

fn header(config: &Value) -> String {
    format!(
        "# vesselreg-format: {FORMAT_VERSION}\n# config: {}\n",
        round_floats(config.clone())
    )
}

/// Skeleton CSV with header `x,y` or `x,y,z`; the grid spacing goes in a
/// comment line.
pub fn skeleton_csv<const D: usize>(set: &SkeletonPointSet<D>, config: &Value) -> String {
    let axes = ["x", "y", "z"];
    let mut out = header(config);
    let spacing: Vec<String> = set.spacing().iter().map(|s| format!("{s:.6}")).collect();
    let _ = writeln!(out, "# grid_spacing: {}", spacing.join(","));
    out.push_str(&axes[..D].join(","));
    out.push('\n');
    for p in set.points() {
        let row: Vec<String> = p.iter().map(|c| format!("{c:.6}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reads a skeleton CSV of dimension `D`. Comment lines start with `#`; a
/// `# grid_spacing:` comment sets the spacing (unit spacing otherwise).
pub fn parse_skeleton_csv<const D: usize>(text: &str) -> Result<SkeletonPointSet<D>> {
    let mut spacing = SVector::<f64, D>::repeat(1.0);
    for line in text.lines() {
        if let Some(rest) = line.trim().strip_prefix("# grid_spacing:") {
            let values: Vec<f64> = rest
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| format_err(format!("bad grid spacing {t:?}")))
                })
                .collect::<Result<_>>()?;
            if values.len() != D {
                return Err(format_err(format!(
                    "grid spacing has {} values, expected {D}",
                    values.len()
                )));
            }
            spacing = SVector::from_column_slice(&values);
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let expected = &["x", "y", "z"][..D];
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(format_err(format!(
            "expected header {:?}, found {:?}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record?;
        let coords: Vec<f64> = record
            .iter()
            .map(|t| t.parse().map_err(|_| format_err(format!("bad coordinate {t:?}"))))
            .collect::<Result<_>>()?;
        points.push(SVector::from_column_slice(&coords));
    }
    SkeletonPointSet::new(points, spacing)
}

pub fn read_skeleton_csv<const D: usize>(path: &Path) -> Result<SkeletonPointSet<D>> {
    parse_skeleton_csv(&fs::read_to_string(path)?)
}

/// Three lines of four whitespace-separated numbers, row-major. Blank and
/// `#` lines are skipped.
pub fn parse_projection(text: &str) -> Result<ProjectionMatrix> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse().map_err(|_| format_err(format!("bad matrix entry {t:?}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    if rows.len() != 3 || rows.iter().any(|r| r.len() != 4) {
        return Err(format_err("projection file must hold 3 rows of 4 numbers"));
    }
    ProjectionMatrix::from_rows(std::array::from_fn(|r| std::array::from_fn(|c| rows[r][c])))
}

pub fn read_projection(path: &Path) -> Result<ProjectionMatrix> {
    parse_projection(&fs::read_to_string(path)?)
}

pub fn projection_text(p: &ProjectionMatrix) -> String {
    p.rows()
        .iter()
        .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

/// Rounds every float in a JSON tree to six decimals.
pub fn round_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(0.0);
            let r = (x * 1e6).round() / 1e6;
            json!(if r == 0.0 { 0.0 } else { r })
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_floats).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_floats(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with a trailing newline, floats rounded.
pub fn to_json_text(v: &impl Serialize) -> Result<String> {
    let value = round_floats(serde_json::to_value(v)?);
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

pub fn decomposition_json(d: &NodeDecomposition, config: &Value) -> Value {
    json!({
        "format_version": FORMAT_VERSION,
        "config": config,
        "branches": d.branches,
        "trunks": d.trunks,
        "end_nodes": d.end_nodes,
        "junction_nodes": d.junction_nodes,
        "quasi_junction_nodes": d.quasi_junction_nodes,
        "deleted_nodes": d.deleted_nodes,
    })
}

/// Registration result document. Timings are included only when asked for,
/// since they differ between runs.
pub fn registration_json(r: &RegistrationResult, config: &Value, timing: bool) -> Value {
    let vec3 = |v: &SVector<f64, 3>| [v.x, v.y, v.z];
    let mut doc = json!({
        "format_version": FORMAT_VERSION,
        "config": config,
        "displacements": r.displacements.iter().map(vec3).collect::<Vec<_>>(),
        "deformed": r.deformed.iter().map(vec3).collect::<Vec<_>>(),
        "assigned": r.assigned,
        "deleted_nodes": r.deleted_nodes,
        "rigid": {
            "rotation": r.rigid.rotation().row_iter().map(|row| [row[0], row[1], row[2]]).collect::<Vec<_>>(),
            "translation": vec3(r.rigid.translation()),
        },
        "iterations": r.iterations,
        "evaluations": r.evaluations,
        "converged": r.converged,
        "line_search_failure": r.line_search_failure,
        "final_energy": r.final_energy(),
        "energy_trace": r.energy_trace,
        "decomposition_2d": r.decomposition_2d,
        "decomposition_3d": r.decomposition_3d,
        "matching": r.matching,
    });
    if timing {
        let stages: serde_json::Map<String, Value> = r
            .timing
            .stages
            .iter()
            .map(|(s, ms)| (s.to_string(), json!(ms)))
            .collect();
        doc["timing_ms"] = Value::Object(stages);
    }
    doc
}

/// Nonzero entries of `M` as `row,col,value`.
pub fn assignment_csv(m: &AssignmentMatrix, config: &Value) -> String {
    let mut out = header(config);
    out.push_str("row,col,value\n");
    for (i, j, v) in m.triplets() {
        let _ = writeln!(out, "{i},{j},{v:.6}");
    }
    out
}

pub const METRICS_HEADER: &str =
    "case_id,method,mean_2d_px,std_2d_px,mean_3d_mm,std_3d_mm,sv_2d_px,sv_3d_mm,runtime_ms";

pub fn metrics_csv(reports: &[MetricsReport], config: &Value) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = header(config);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.case_id,
            r.method,
            cell(r.mean_2d),
            cell(r.std_2d),
            cell(r.mean_3d),
            cell(r.std_3d),
            cell(r.sv_2d),
            cell(r.sv_3d),
            cell(r.runtime_ms)
        );
    }
    out
}

/// Line segments drawn with one CSS class.
pub struct Layer<'a> {
    pub class: &'a str,
    pub segments: Vec<(Point2, Point2)>,
}

/// SVG of the pre-operative projection, the intra-operative skeleton and
/// the prediction (classes `preop`, `intraop`, `prediction`), framed to fit.
pub fn overlay_svg(layers: &[Layer<'_>], config: &Value) -> String {
    let all = layers
        .iter()
        .flat_map(|l| l.segments.iter().flat_map(|(a, b)| [*a, *b]));
    let (lo, hi) = all.fold(
        (Point2::repeat(f64::INFINITY), Point2::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(&p), hi.sup(&p)),
    );
    let (lo, hi) = if lo.x.is_finite() {
        (lo.add_scalar(-10.0), hi.add_scalar(10.0))
    } else {
        (Point2::zeros(), Point2::repeat(1.0))
    };
    let size = hi - lo;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.3} {:.3} {:.3} {:.3}" width="{:.0}" height="{:.0}">"#,
        lo.x,
        lo.y,
        size.x,
        size.y,
        size.x.max(1.0),
        size.y.max(1.0)
    );
    let _ = writeln!(out, "<!-- vesselreg-format: {FORMAT_VERSION} -->");
    let _ = writeln!(
        out,
        "<!-- config: {} -->",
        round_floats(config.clone()).to_string().replace("--", "- -")
    );
    out.push_str(
        "<style>line{stroke-width:0.8;stroke-linecap:round}\
         .preop{stroke:#1f77b4}.intraop{stroke:#7f7f7f}.prediction{stroke:#d62728}</style>\n",
    );
    for layer in layers {
        let _ = writeln!(out, r#"<g class="{}">"#, layer.class);
        for (a, b) in &layer.segments {
            let _ = writeln!(
                out,
                r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
                a.x, a.y, b.x, b.y
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::Point3;

    #[test]
    fn pgm_ascii_and_binary_agree() {
        let ascii = b"P2\n# bar\n4 2\n255\n0 200 128 127\n255 0 0 0\n";
        let a = parse_pgm(ascii).unwrap();
        let mut raw = b"P5 4 2 255\n".to_vec();
        raw.extend([0, 200, 128, 127, 255, 0, 0, 0]);
        let b = parse_pgm(&raw).unwrap();
        let fa: Vec<_> = a.foreground().collect();
        assert_eq!(fa, b.foreground().collect::<Vec<_>>());
        assert_eq!(fa, vec![[1, 0], [2, 0], [0, 1]]);
    }

    #[test]
    fn malformed_inputs_are_format_errors() {
        assert!(parse_pgm(b"P3\n1 1\n255\n0").unwrap_err().is_format());
        assert!(parse_pgm(b"P2\n2 2\n255\n0 0").unwrap_err().is_format());
        assert!(parse_vox(b"2 2\n\0\0\0\0").unwrap_err().is_format());
        assert!(parse_vox(b"1 1 2\n\x01").unwrap_err().is_format());
        assert!(parse_projection("1 2 3 4\n1 2 3 4\n").unwrap_err().is_format());
        assert!(parse_skeleton_csv::<2>("a,b\n1,2\n").unwrap_err().is_format());
        assert!(parse_skeleton_csv::<3>("x,y\n1,2\n").unwrap_err().is_format());
    }

    #[test]
    fn vox_round_trip() {
        let mut g = VoxelGrid::new(3, 2, 2);
        g.set(2, 1, 0, true);
        g.set(0, 0, 1, true);
        let back = parse_vox(&write_vox(&g)).unwrap();
        assert_eq!(
            back.foreground().collect::<Vec<_>>(),
            g.foreground().collect::<Vec<_>>()
        );
    }

    #[test]
    fn skeleton_csv_round_trip() {
        let set = SkeletonPointSet::new(
            vec![Point3::new(0.5, 1.0, -2.0), Point3::new(1.0, 1.5, -2.0)],
            Point3::new(0.5, 0.5, 1.0),
        )
        .unwrap();
        let text = skeleton_csv(&set, &json!({"seed": 7}));
        assert!(text.starts_with("# vesselreg-format: 1\n# config: {\"seed\":7}\n"));
        let back: SkeletonPointSet<3> = parse_skeleton_csv(&text).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn projection_round_trip() {
        let p = ProjectionMatrix::from_rows([
            [1500.0, 0.0, 256.0, 256000.0],
            [0.0, 1500.0, 256.0, 256000.0],
            [0.0, 0.0, 1.0, 1000.0],
        ])
        .unwrap();
        assert_eq!(parse_projection(&projection_text(&p)).unwrap(), p);
    }

    #[test]
    fn floats_are_rounded() {
        let v = round_floats(json!({"a": [0.1234567891, -1e-9, 3], "b": "x"}));
        assert_eq!(v.to_string(), r#"{"a":[0.123457,0.0,3],"b":"x"}"#);
    }

    #[test]
    fn metrics_rows_leave_missing_values_empty() {
        let text = metrics_csv(&[MetricsReport::failed("00-01")], &json!({}));
        assert!(text.ends_with(&format!("{METRICS_HEADER}\n00-01,failed,,,,,,,\n")));
    }

    #[test]
    fn svg_has_three_classes() {
        let seg = vec![(Point2::new(0.0, 0.0), Point2::new(5.0, 5.0))];
        let layers = [
            Layer {
                class: "preop",
                segments: seg.clone(),
            },
            Layer {
                class: "intraop",
                segments: seg.clone(),
            },
            Layer {
                class: "prediction",
                segments: seg,
            },
        ];
        let svg = overlay_svg(&layers, &json!({}));
        for c in ["preop", "intraop", "prediction"] {
            assert!(svg.contains(&format!(r#"<g class="{c}">"#)));
        }
    }
}
